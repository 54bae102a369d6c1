//! Command-line interface: one binary, five subcommands.
//!
//! ```text
//! mor degrade  --input <dir> --output <dir> --profile <deg1|deg2|file> [--seed <u64>]
//! mor estimate --image <file> (--statistical | --embeddings <file> --id <key>)
//!              [--prompt-embeddings <file>]
//! mor train    --config <file> --out <ckpt> [--resume <ckpt>]
//! mor eval     --ckpt <file> --dataset <dir> [--csv <out>]
//! mor analyze  --ckpt <file> --dataset <dir> --csv <dir> [--layer <id>]
//! ```
//!
//! Exit codes: 0 on success, 1 on a usage error (help is printed), 2 on a
//! runtime error (message on stderr). Every subcommand is deterministic
//! given its flags — repeated invocations write byte-identical files. The
//! global `--seed` feeds whatever randomness a subcommand has: the degrade
//! recipe sampler directly, training by overriding the config's seed;
//! `estimate`, `eval`, and `analyze` have none and ignore it.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand};

use crate::analysis::{
    expert_frequency, expert_frequency_csv, log_activations, zero_counts_csv,
    zero_expert_counts,
};
use crate::degrade::{degrade_image, resize_bicubic, DegradationProfile};
use crate::embed::{
    load_embedding_file, prompt_pairs_from, statistical_embed, statistical_prompt_pairs,
    Embedding, PromptPairSet,
};
use crate::error::{Error, Result};
use crate::estimator::{aggregate_scalar, named_scores};
use crate::image::ImageF;
use crate::numeric::SeededRng;
use crate::pnm::{read_pnm, write_pnm};
use crate::trainer::checkpoint::FORMAT_VERSION;
use crate::trainer::{
    self, build_dataset, center_crop, evaluate, Checkpoint, Sample, TrainConfig, TrainState,
};

/// Semantic version plus the checkpoint format version, for `--version`.
fn version_line() -> String {
    format!(
        "{} (checkpoint format v{FORMAT_VERSION})",
        env!("CARGO_PKG_VERSION")
    )
}

#[derive(Parser)]
#[command(
    name = "mor",
    version = version_line(),
    about = "Degradation-aware mixture-of-ranks adapters: data synthesis, \
             scoring, training, evaluation, and routing analysis",
    arg_required_else_help = true
)]
struct Cli {
    /// Seed for randomized work (degradation sampling; overrides the
    /// training config's seed). Deterministic subcommands ignore it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print per-item progress to stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade every image in a directory under a recipe, writing the
    /// low-quality images plus a .record file of the sampled parameters.
    Degrade(DegradeArgs),
    /// Print the seven quality scores and the scalar severity of an image.
    Estimate(EstimateArgs),
    /// Train from a config file and write the final checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint: restoration quality and routing statistics.
    Eval(EvalArgs),
    /// Tabulate expert activations of a checkpoint over a tagged dataset.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct DegradeArgs {
    /// Directory of clean .pgm/.ppm images.
    #[arg(long)]
    input: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    output: PathBuf,
    /// Built-in recipe name (deg1, deg2) or the path of a profile file.
    #[arg(long)]
    profile: String,
}

#[derive(Args)]
#[command(group = ArgGroup::new("source").required(true).args(["statistical", "embeddings"]))]
struct EstimateArgs {
    /// Image to score.
    #[arg(long)]
    image: PathBuf,
    /// Embed the image with the built-in statistical embedder.
    #[arg(long)]
    statistical: bool,
    /// Embedding file to look the image up in (requires --id).
    #[arg(long, requires = "id")]
    embeddings: Option<PathBuf>,
    /// Id of the image's entry inside --embeddings.
    #[arg(long, requires = "embeddings")]
    id: Option<String>,
    /// Prompt embeddings; defaults to --embeddings, or to the built-in
    /// prompts with --statistical.
    #[arg(long)]
    prompt_embeddings: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Key=value training config file.
    #[arg(long)]
    config: PathBuf,
    /// Where to write the final checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Continue this checkpoint up to the config's iteration count instead
    /// of initializing fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of clean images; each is degraded by the checkpointed
    /// config's recipe (deterministically) and then restored.
    #[arg(long)]
    dataset: PathBuf,
    /// Also write per-image metrics as CSV to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset root holding per-regime subdirectories (deg1/, deg2/) of
    /// already-degraded images.
    #[arg(long)]
    dataset: PathBuf,
    /// Output directory for zero_counts.csv and expert_freq_layer<id>.csv.
    #[arg(long)]
    csv: PathBuf,
    /// Emit the frequency table only for this layer (default: every layer).
    #[arg(long)]
    layer: Option<usize>,
}

/// Parse `args` and run the selected subcommand, returning the process exit
/// code: 0 success, 1 usage error, 2 runtime error.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Degrade(a) => cmd_degrade(a, cli.seed.unwrap_or(0), cli.verbose),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Train(a) => cmd_train(a, cli.seed, cli.verbose),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Sorted `.pgm`/`.ppm` paths under a directory; errors when none exist.
fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm") | Some("ppm")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument {
            what: "image directory",
            why: format!("no .pgm/.ppm images under {}", dir.display()),
        });
    }
    Ok(paths)
}

fn cmd_degrade(args: DegradeArgs, seed: u64, verbose: u8) -> Result<()> {
    let profile = match DegradationProfile::by_name(&args.profile) {
        Some(p) => p,
        None => DegradationProfile::from_file(&args.profile)?,
    };
    let paths = image_paths(&args.input)?;
    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    // One seed per image, drawn in sorted order, so the whole run is a pure
    // function of (inputs, profile, seed).
    let mut rng = SeededRng::new(seed);
    for path in &paths {
        let hr = read_pnm(path)?;
        let (lq, record) = degrade_image(&hr, &profile, rng.next_u64())?;
        let name = path
            .file_name()
            .expect("read_dir yields named files")
            .to_string_lossy()
            .into_owned();
        let out_img = args.output.join(&name);
        write_pnm(&out_img, &lq)?;
        let out_rec = args.output.join(format!("{name}.record"));
        std::fs::write(&out_rec, record.to_text()).map_err(|e| Error::io(&out_rec, e))?;
        if verbose > 0 {
            eprintln!("{} -> {}", path.display(), out_img.display());
        }
    }
    println!("degraded {} images -> {}", paths.len(), args.output.display());
    Ok(())
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let (e_img, prompts): (Embedding, PromptPairSet) = if args.statistical {
        let img = read_pnm(&args.image)?;
        let prompts = match &args.prompt_embeddings {
            Some(p) => prompt_pairs_from(&load_embedding_file(p)?)?,
            None => statistical_prompt_pairs(),
        };
        (statistical_embed(&img)?, prompts)
    } else {
        let images = load_embedding_file(args.embeddings.as_ref().expect("required by clap"))?;
        let e = images.require(args.id.as_ref().expect("required by clap"))?.clone();
        let prompts = match &args.prompt_embeddings {
            Some(p) => load_embedding_file(p)?,
            None => images,
        };
        (e, prompt_pairs_from(&prompts)?)
    };
    let scores = crate::estimator::estimate(&e_img, &prompts)?;
    for (name, value) in named_scores(&scores) {
        println!("{name}={value:.6}");
    }
    println!("severity={:.6}", aggregate_scalar(&scores));
    Ok(())
}

fn cmd_train(args: TrainArgs, seed: Option<u64>, verbose: u8) -> Result<()> {
    let mut config = TrainConfig::from_file(&args.config)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let run = match &args.resume {
        Some(path) => trainer::resume(&config, &Checkpoint::read_file(path)?)?,
        None => trainer::train(&config)?,
    };
    if verbose > 0 {
        for row in &run.log {
            eprintln!("{}", row.to_csv());
        }
    }
    run.state.to_checkpoint().write_file(&args.out)?;
    println!(
        "trained to iteration {} -> {}",
        run.state.iteration,
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::read_file(&args.ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    // The whole directory is the held-out corpus: degrade every image under
    // the checkpointed recipe and score the restorations.
    let mut config = state.config.clone();
    config.data_dir = Some(args.dataset.clone());
    config.holdout_count = 0;
    let (samples, _) = build_dataset(&config)?;
    let report = evaluate(&state, &samples)?;
    println!("samples={}", samples.len());
    println!("mean_psnr={:.6}", report.metrics.mean_psnr());
    println!("mean_ssim={:.6}", report.metrics.mean_ssim());
    println!("mean_severity={:.6}", report.mean_severity);
    println!("routing_entropy={:.6}", report.routing_entropy);
    println!("mean_zero_active={:.6}", report.mean_zero_active);
    if let Some(path) = &args.csv {
        let mut text = String::from("index,regime,severity,psnr,ssim\n");
        for (i, s) in samples.iter().enumerate() {
            text.push_str(&format!(
                "{i},{},{:.6},{:.6},{:.6}\n",
                s.regime, s.severity, report.metrics.psnr[i], report.metrics.ssim[i]
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Bring an analysis input to the model's patch size: center-crop when the
/// image is at least patch-sized, bicubic resize otherwise.
fn to_patch(img: ImageF, patch: usize) -> Result<ImageF> {
    let img = img.to_luma();
    if img.width() >= patch && img.height() >= patch {
        center_crop(&img, patch)
    } else {
        resize_bicubic(&img, patch, patch)
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let ckpt = Checkpoint::read_file(&args.ckpt)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let patch = state.generator.patch();
    let prompts = statistical_prompt_pairs();

    let mut samples = Vec::new();
    for regime in ["deg1", "deg2"] {
        let dir = args.dataset.join(regime);
        if !dir.is_dir() {
            continue;
        }
        for path in image_paths(&dir)? {
            let img = to_patch(read_pnm(&path)?, patch)?;
            samples.push(Sample::from_pair(img.clone(), img, regime, &prompts)?);
        }
    }
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            what: "analyze dataset",
            why: format!(
                "no deg1/ or deg2/ subdirectory with images under {}",
                args.dataset.display()
            ),
        });
    }

    let log = log_activations(&ckpt, &samples)?;
    std::fs::create_dir_all(&args.csv).map_err(|e| Error::io(&args.csv, e))?;

    let zero_path = args.csv.join("zero_counts.csv");
    let zero_rows = zero_expert_counts(&log)?;
    std::fs::write(&zero_path, zero_counts_csv(&zero_rows))
        .map_err(|e| Error::io(&zero_path, e))?;
    println!("wrote {}", zero_path.display());

    let layers: Vec<usize> = match args.layer {
        Some(l) => vec![l],
        None => (0..log.n_layers()).collect(),
    };
    for layer in layers {
        let rows = expert_frequency(&log, layer)?;
        let path = args.csv.join(format!("expert_freq_layer{layer}.csv"));
        std::fs::write(&path, expert_frequency_csv(&rows)).map_err(|e| Error::io(&path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn version_names_both_formats() {
        let line = version_line();
        assert!(line.contains(env!("CARGO_PKG_VERSION")));
        assert!(line.contains(&format!("checkpoint format v{FORMAT_VERSION}")));
    }

    #[test]
    fn cli_declaration_is_consistent() {
        // Catches conflicting flag definitions at test time instead of at
        // first invocation.
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn image_paths_filters_and_sorts() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.pgm", "a.ppm", "c.txt", "d.png"] {
            std::fs::write(dir.path().join(name), b"x").unwrap();
        }
        let paths = image_paths(dir.path()).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_str().unwrap())
            .collect();
        assert_eq!(names, vec!["a.ppm", "b.pgm"]);

        let empty = tempfile::tempdir().unwrap();
        assert!(image_paths(empty.path()).is_err());
    }

    #[test]
    fn to_patch_crops_or_upsamples() {
        let big = crate::textures::texture(24, 24, 1);
        assert_eq!(to_patch(big, 12).unwrap().width(), 12);
        let small = crate::textures::texture(6, 6, 1);
        let up = to_patch(small, 12).unwrap();
        assert_eq!((up.width(), up.height(), up.channels()), (12, 12, 1));
    }
}
