//! Training configuration: a flat key=value text format covering every
//! knob of the toy task, the model, and the optimization loop.

use std::path::{Path, PathBuf};

use crate::adapter::MorConfig;
use crate::degrade::DegradationProfile;
use crate::embed::DIMENSIONS;
use crate::error::{Error, Result};
use crate::losses::LossWeights;

/// Which degradation recipe supplies training inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProfileChoice {
    /// The mild first-order-dominant recipe.
    Deg1,
    /// The severe second-order recipe.
    Deg2,
    /// Alternate per sample between the two recipes (even indices mild,
    /// odd severe) so one run sees the whole severity range.
    Mix,
    /// A recipe loaded from a profile file.
    File(PathBuf),
}

impl ProfileChoice {
    fn parse(value: &str) -> Result<Self> {
        match value {
            "deg1" => Ok(ProfileChoice::Deg1),
            "deg2" => Ok(ProfileChoice::Deg2),
            "mix" => Ok(ProfileChoice::Mix),
            other => match other.strip_prefix("file:") {
                Some(path) if !path.is_empty() => Ok(ProfileChoice::File(PathBuf::from(path))),
                _ => Err(Error::InvalidArgument {
                    what: "profile",
                    why: format!("expected deg1, deg2, mix, or file:<path>, got {other:?}"),
                }),
            },
        }
    }

    fn to_text(&self) -> String {
        match self {
            ProfileChoice::Deg1 => "deg1".into(),
            ProfileChoice::Deg2 => "deg2".into(),
            ProfileChoice::Mix => "mix".into(),
            ProfileChoice::File(p) => format!("file:{}", p.display()),
        }
    }

    /// The profile for sample `index`. For `Mix`, even indices draw the
    /// mild recipe and odd ones the severe recipe.
    pub fn profile_for(&self, index: usize) -> Result<DegradationProfile> {
        match self {
            ProfileChoice::Deg1 => Ok(DegradationProfile::deg1()),
            ProfileChoice::Deg2 => Ok(DegradationProfile::deg2()),
            ProfileChoice::Mix => Ok(if index % 2 == 0 {
                DegradationProfile::deg1()
            } else {
                DegradationProfile::deg2()
            }),
            ProfileChoice::File(path) => DegradationProfile::from_file(path),
        }
    }
}

/// Every knob of a training run.
///
/// Defaults are sized for a CPU toy run that finishes in minutes. The
/// full-scale recipe this architecture was designed around uses batch 16,
/// 25000 iterations, and learning rate 5e-5 with 8 shared + 32 routed
/// experts (top-8, 4 zero) — far beyond desk scale, kept here as a record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Patch side in pixels.
    pub patch: usize,
    /// Degradation downsampling factor; the input is bicubically resized
    /// back to `patch` before encoding when above 1.
    pub scale: usize,
    /// Procedural training patches (ignored when `data_dir` is set).
    pub train_count: usize,
    /// Procedural held-out patches.
    pub holdout_count: usize,
    pub profile: ProfileChoice,
    /// Optional directory of `.pgm` images used as clean sources instead
    /// of procedural textures.
    pub data_dir: Option<PathBuf>,
    /// Latent width of the generator trunk. When this equals `patch * patch`
    /// the decoder is square (a full orthonormal basis) and every pixel of
    /// reconstruction error is reachable by training; smaller values project
    /// onto a random subspace and leave an irreducible residual floor.
    pub latent: usize,
    /// Hidden width of the noise-prediction MLPs.
    pub score_hidden: usize,
    /// Hidden width of each discriminator head.
    pub disc_hidden: usize,
    pub n_shared: usize,
    pub n_real: usize,
    pub n_zero: usize,
    pub top_k: usize,
    pub batch: usize,
    /// Generator iterations (phase cycles).
    pub iterations: usize,
    /// Teacher pretraining iterations before the alternating loop.
    pub teacher_iters: usize,
    pub lr_generator: f64,
    pub lr_student: f64,
    pub lr_disc: f64,
    /// Student steps per cycle.
    pub student_steps: usize,
    /// Generator steps per cycle.
    pub generator_steps: usize,
    pub lambda_vsd: f64,
    pub lambda_gan: f64,
    pub alpha_balance: f64,
    /// Scale the zero-expert balance weight by batch severity (the
    /// degradation-aware variant) instead of treating all experts alike.
    pub deg_aware: bool,
    pub seed: u64,
    /// Optional CSV log path.
    pub log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: 24,
            scale: 1,
            train_count: 192,
            holdout_count: 32,
            profile: ProfileChoice::Mix,
            data_dir: None,
            latent: 576,
            score_hidden: 48,
            disc_hidden: 16,
            n_shared: 2,
            n_real: 12,
            n_zero: 4,
            top_k: 4,
            batch: 8,
            iterations: 600,
            teacher_iters: 300,
            lr_generator: 2e-3,
            lr_student: 2e-3,
            lr_disc: 1e-3,
            student_steps: 1,
            generator_steps: 1,
            lambda_vsd: 1.0,
            lambda_gan: 0.1,
            alpha_balance: 0.01,
            deg_aware: true,
            seed: 1,
            log: None,
        }
    }
}

impl TrainConfig {
    /// The adapter-pool shape both generator layers use.
    pub fn mor_config(&self) -> MorConfig {
        MorConfig {
            d_in: self.latent,
            d_out: self.latent,
            score_dim: DIMENSIONS.len(),
            n_shared: self.n_shared,
            n_real: self.n_real,
            n_zero: self.n_zero,
            top_k: self.top_k,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_vsd: self.lambda_vsd,
            lambda_gan: self.lambda_gan,
            alpha_balance: self.alpha_balance,
        }
    }

    /// Side length of the degraded input before any re-upsampling.
    pub fn lr_size(&self) -> usize {
        self.patch / self.scale
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |why: String| Error::InvalidArgument {
            what: "TrainConfig",
            why,
        };
        if self.patch == 0 || self.scale == 0 {
            return Err(inv("patch and scale must be positive".into()));
        }
        if self.patch % self.scale != 0 || self.patch / self.scale < 4 {
            return Err(inv(format!(
                "scale {} must divide patch {} leaving at least 4 pixels",
                self.scale, self.patch
            )));
        }
        if self.latent == 0 || self.latent > self.patch * self.patch {
            return Err(inv(format!(
                "latent {} outside 1..={}",
                self.latent,
                self.patch * self.patch
            )));
        }
        if self.score_hidden == 0 || self.disc_hidden == 0 {
            return Err(inv("network widths must be positive".into()));
        }
        if self.train_count == 0 && self.data_dir.is_none() {
            return Err(inv("train_count must be positive".into()));
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(inv("batch and iterations must be positive".into()));
        }
        if self.generator_steps == 0 {
            return Err(inv("generator_steps must be at least 1".into()));
        }
        for (name, v) in [
            ("lr_generator", self.lr_generator),
            ("lr_student", self.lr_student),
            ("lr_disc", self.lr_disc),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(inv(format!("{name} must be a positive number, got {v}")));
            }
        }
        self.loss_weights().validate()?;
        self.mor_config().validate()?;
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::parse(&text, path)
    }

    /// Parse the key=value format. Lines are `key = value`, `#` starts a
    /// comment, unknown keys are errors, later lines override earlier ones.
    pub fn parse(text: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_usize = |field: &str| {
                value.parse::<usize>().map_err(|_| {
                    err(format!("{field} expects a non-negative integer, got {value:?}"))
                })
            };
            let parse_f64 = |field: &str| {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("{field} expects a number, got {value:?}")))
            };
            match key {
                "patch" => config.patch = parse_usize(key)?,
                "scale" => config.scale = parse_usize(key)?,
                "train_count" => config.train_count = parse_usize(key)?,
                "holdout_count" => config.holdout_count = parse_usize(key)?,
                "profile" => config.profile = ProfileChoice::parse(value).map_err(|e| {
                    err(e.to_string())
                })?,
                "data_dir" => {
                    config.data_dir = if value.is_empty() {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    }
                }
                "latent" => config.latent = parse_usize(key)?,
                "score_hidden" => config.score_hidden = parse_usize(key)?,
                "disc_hidden" => config.disc_hidden = parse_usize(key)?,
                "n_shared" => config.n_shared = parse_usize(key)?,
                "n_real" => config.n_real = parse_usize(key)?,
                "n_zero" => config.n_zero = parse_usize(key)?,
                "top_k" => config.top_k = parse_usize(key)?,
                "batch" => config.batch = parse_usize(key)?,
                "iterations" => config.iterations = parse_usize(key)?,
                "teacher_iters" => config.teacher_iters = parse_usize(key)?,
                "lr_generator" => config.lr_generator = parse_f64(key)?,
                "lr_student" => config.lr_student = parse_f64(key)?,
                "lr_disc" => config.lr_disc = parse_f64(key)?,
                "student_steps" => config.student_steps = parse_usize(key)?,
                "generator_steps" => config.generator_steps = parse_usize(key)?,
                "lambda_vsd" => config.lambda_vsd = parse_f64(key)?,
                "lambda_gan" => config.lambda_gan = parse_f64(key)?,
                "alpha_balance" => config.alpha_balance = parse_f64(key)?,
                "deg_aware" => {
                    config.deg_aware = match value {
                        "true" => true,
                        "false" => false,
                        _ => return Err(err(format!("deg_aware expects true or false, got {value:?}"))),
                    }
                }
                "seed" => {
                    config.seed = value.parse::<u64>().map_err(|_| {
                        err(format!("seed expects an unsigned integer, got {value:?}"))
                    })?
                }
                "log" => {
                    config.log = if value.is_empty() {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    }
                }
                unknown => return Err(err(format!("unknown key {unknown:?}"))),
            }
        }
        config.validate()?;
        Ok(config)
    }

    /// Canonical serialization: every key in a fixed order, parseable by
    /// [`TrainConfig::parse`]. Two equal configs serialize identically.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |key: &str, value: String| {
            out.push_str(key);
            out.push_str(" = ");
            out.push_str(&value);
            out.push('\n');
        };
        push("patch", self.patch.to_string());
        push("scale", self.scale.to_string());
        push("train_count", self.train_count.to_string());
        push("holdout_count", self.holdout_count.to_string());
        push("profile", self.profile.to_text());
        push(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        push("latent", self.latent.to_string());
        push("score_hidden", self.score_hidden.to_string());
        push("disc_hidden", self.disc_hidden.to_string());
        push("n_shared", self.n_shared.to_string());
        push("n_real", self.n_real.to_string());
        push("n_zero", self.n_zero.to_string());
        push("top_k", self.top_k.to_string());
        push("batch", self.batch.to_string());
        push("iterations", self.iterations.to_string());
        push("teacher_iters", self.teacher_iters.to_string());
        push("lr_generator", self.lr_generator.to_string());
        push("lr_student", self.lr_student.to_string());
        push("lr_disc", self.lr_disc.to_string());
        push("student_steps", self.student_steps.to_string());
        push("generator_steps", self.generator_steps.to_string());
        push("lambda_vsd", self.lambda_vsd.to_string());
        push("lambda_gan", self.lambda_gan.to_string());
        push("alpha_balance", self.alpha_balance.to_string());
        push("deg_aware", self.deg_aware.to_string());
        push("seed", self.seed.to_string());
        push(
            "log",
            self.log
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        out
    }
}
