//! Alternating two-phase training for the toy restoration task.
//!
//! A run assembles degraded/clean patch pairs, pretrains a frozen teacher
//! noise predictor on clean latents, then alternates between two phases:
//!
//! - **student phase** — one Adam step fitting the online noise predictor to
//!   the *current* generator's output distribution (re-noised recovered
//!   latents), with the generator frozen;
//! - **generator phase** — one Adam step on the composite objective
//!   (reconstruction, score distillation through the teacher/student gap,
//!   adversarial, routing balance), with both predictors frozen, followed by
//!   one hinge step of the discriminator.
//!
//! Everything is deterministic given the config: model init, teacher
//! pretraining, data degradation, and the loop each draw from their own
//! seeded stream, and the loop stream's state rides along in checkpoints so
//! an interrupted run resumes bit-exactly.

pub mod checkpoint;
pub mod config;
pub mod model;

pub use checkpoint::Checkpoint;
pub use config::{ProfileChoice, TrainConfig};
pub use model::{Discriminator, ScoreNet, ToyGenerator};

use std::path::Path;

use crate::adapter::{MorLayer, RoutingDecision};
use crate::degrade::{degrade_image, resize_bicubic};
use crate::embed::{statistical_embed, statistical_prompt_pairs, PromptPairSet};
use crate::error::{Error, Result};
use crate::estimator::{aggregate_scalar, estimate};
use crate::image::ImageF;
use crate::losses::{
    balance_prob_grad, balance_stats, deg_aware_balance_loss, diffusion_loss_with_grad,
    gan_generator_loss, discriminator_loss_with_grad, reconstruction_loss_with_grad,
    vsd_gradient, NoiseSchedule,
};
use crate::metrics::MetricReport;
use crate::numeric::{entropy, AdamState, SeededRng};
use crate::pnm::read_pnm;
use crate::textures::texture;
use model::{
    adam_states_for, adam_step_tensors, DiscHead, DiscHeadGrad, GenForward, GenGrad,
    ScoreNetGrad, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};

// Independent RNG streams per responsibility, so e.g. adding a teacher
// iteration cannot silently reshuffle the training data.
const TAG_MODEL: u64 = 0x31;
const TAG_TEACHER: u64 = 0x32;
const TAG_TRAIN: u64 = 0x33;
const TAG_DATA: u64 = 0x34;

// ---------------------------------------------------------------------------
// Dataset assembly.
// ---------------------------------------------------------------------------

/// One training pair: a clean patch, its degraded counterpart brought back
/// to the clean resolution, and the quality scores estimated from that
/// degraded input (never from the clean side — at inference time only the
/// degraded image exists).
#[derive(Debug, Clone)]
pub struct Sample {
    /// Clean target, `patch x patch`, one channel.
    pub hr: ImageF,
    /// Degraded input at the same resolution (bicubically re-upsampled when
    /// the recipe downscales), clamped to `[0, 1]`.
    pub input: ImageF,
    /// Per-axis quality scores of `input`, one per estimator dimension.
    pub scores: Vec<f64>,
    /// Mean of `scores`; higher means more degraded.
    pub severity: f64,
    /// Name of the recipe that produced `input` (`deg1`, `deg2`, ...).
    pub regime: String,
}

impl Sample {
    /// Build a sample from a clean patch and an already-degraded version of
    /// it. `lq` is re-upsampled to the clean resolution if needed.
    pub fn from_pair(hr: ImageF, lq: ImageF, regime: &str, prompts: &PromptPairSet) -> Result<Self> {
        let mut input = if lq.width() == hr.width() && lq.height() == hr.height() {
            lq
        } else {
            resize_bicubic(&lq, hr.width(), hr.height())?
        };
        // Bicubic overshoot would otherwise leak out-of-range values into
        // the score statistics.
        input.clamp01();
        let scores = estimate(&statistical_embed(&input)?, prompts)?;
        let severity = aggregate_scalar(&scores);
        Ok(Sample {
            hr,
            input,
            scores,
            severity,
            regime: regime.to_string(),
        })
    }
}

/// Center-crop to `side x side`; errors if the image is smaller.
pub(crate) fn center_crop(img: &ImageF, side: usize) -> Result<ImageF> {
    if img.width() < side || img.height() < side {
        return Err(Error::InvalidArgument {
            what: "center_crop",
            why: format!(
                "image {}x{} is smaller than the {side}x{side} patch",
                img.width(),
                img.height()
            ),
        });
    }
    let x0 = (img.width() - side) / 2;
    let y0 = (img.height() - side) / 2;
    let mut out = ImageF::new(side, side, img.channels())?;
    for y in 0..side {
        for x in 0..side {
            for c in 0..img.channels() {
                out.set(x, y, c, img.get(x0 + x, y0 + y, c));
            }
        }
    }
    Ok(out)
}

/// Clean sources for a run: either procedural textures or every `.pgm`/`.ppm`
/// under `data_dir` (sorted by file name, center-cropped, converted to luma).
fn clean_sources(config: &TrainConfig) -> Result<Vec<ImageF>> {
    let Some(dir) = &config.data_dir else {
        let total = config.train_count + config.holdout_count;
        return Ok((0..total)
            .map(|i| texture(config.patch, config.patch, i as u64))
            .collect());
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
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
            what: "clean_sources",
            why: format!("no .pgm/.ppm images under {}", dir.display()),
        });
    }
    paths
        .iter()
        .map(|p| center_crop(&read_pnm(p)?.to_luma(), config.patch))
        .collect()
}

/// Build the training and held-out sets.
///
/// Each source is degraded under `profile_for(index)` with its own seed from
/// the data stream, so the corpus is a pure function of the config. The last
/// `holdout_count` samples form the held-out set; with `data_dir` set the
/// image files define the corpus size instead of `train_count` (there must
/// be more files than held-out slots).
pub fn build_dataset(config: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    config.validate()?;
    let prompts = statistical_prompt_pairs();
    let sources = clean_sources(config)?;
    if sources.len() <= config.holdout_count {
        return Err(Error::InvalidArgument {
            what: "build_dataset",
            why: format!(
                "{} clean sources cannot cover {} held-out samples",
                sources.len(),
                config.holdout_count
            ),
        });
    }
    let mut data_rng = SeededRng::stream(config.seed, TAG_DATA);
    let mut samples = Vec::with_capacity(sources.len());
    for (i, hr) in sources.into_iter().enumerate() {
        let mut profile = config.profile.profile_for(i)?;
        profile.scale = config.scale;
        let (lq, _record) = degrade_image(&hr, &profile, data_rng.next_u64())?;
        samples.push(Sample::from_pair(hr, lq, &profile.name, &prompts)?);
    }
    let holdout = samples.split_off(samples.len() - config.holdout_count);
    Ok((samples, holdout))
}

// ---------------------------------------------------------------------------
// Teacher pretraining.
// ---------------------------------------------------------------------------

/// Train a noise predictor on clean latents and return it.
///
/// This is ordinary denoising-score-matching: draw a latent, a step, and a
/// noise vector; predict the noise from the noised latent. The result serves
/// as the frozen teacher for distillation; its optimizer state is transient
/// because the teacher never trains again.
pub fn pretrain_teacher(
    latents: &[Vec<f64>],
    config: &TrainConfig,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<ScoreNet> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument {
            what: "pretrain_teacher",
            why: "no clean latents to train on".into(),
        });
    }
    let dim = latents[0].len();
    let mut net = ScoreNet::new(dim, config.score_hidden, rng)?;
    let mut opt = adam_states_for(&net.tensors());
    for _ in 0..config.teacher_iters {
        let mut grad = ScoreNetGrad::zeros(&net);
        for _ in 0..config.batch {
            let z0 = &latents[rng.below(latents.len() as u64) as usize];
            let t = 1 + rng.below(schedule.t_max() as u64) as usize;
            let eps: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let z_t = schedule.noise_to(z0, &eps, t)?;
            let (pred, cache) = net.forward_cached(&z_t, t, schedule)?;
            let (_, mut d_out) = diffusion_loss_with_grad(&eps, &pred)?;
            for d in &mut d_out {
                *d /= config.batch as f64;
            }
            grad.accumulate(&net.backward(&cache, &d_out)?)?;
        }
        adam_step_tensors(
            &mut net.tensors_mut(),
            &grad.tensors(),
            &mut opt,
            config.lr_student,
        )?;
    }
    Ok(net)
}

// ---------------------------------------------------------------------------
// Training state and the two phases.
// ---------------------------------------------------------------------------

/// Everything a run carries between iterations. Converts losslessly to and
/// from [`Checkpoint`].
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: ToyGenerator,
    /// Frozen after pretraining.
    pub teacher: ScoreNet,
    /// Online predictor tracking the generator's output distribution.
    pub student: ScoreNet,
    pub disc: Discriminator,
    pub schedule: NoiseSchedule,
    /// Adam states: encoder, then each adapter layer's five tensors.
    gen_opt: Vec<AdamState>,
    student_opt: Vec<AdamState>,
    /// Four states per head, heads in order.
    disc_opt: Vec<AdamState>,
    rng: SeededRng,
    /// Completed generator iterations.
    pub iteration: u64,
}

/// Metrics from one generator-phase step, in logging units: the raw loss
/// terms before their lambda weights, the balance penalty with its alpha
/// already inside, and two routing health numbers.
#[derive(Debug, Clone, Copy)]
pub struct GenStepLog {
    pub loss_rec: f64,
    pub loss_vsd_surrogate: f64,
    pub loss_gan: f64,
    pub loss_balance: f64,
    /// Entropy of the batch-mean routing probabilities, averaged over the
    /// two adapter layers. Near `ln(n_routed)` means diffuse routing.
    pub routing_entropy: f64,
    /// Mean number of zero experts in the top-k selection, averaged over
    /// samples and layers.
    pub mean_zero_active: f64,
}

/// The five trainable tensor names of an adapter layer, in checkpoint order.
const LAYER_TENSOR_NAMES: [&str; 5] = ["shared_a", "shared_b", "real_a", "real_b", "w_g"];

/// Optimizer-state names for the generator, aligned with
/// `TrainState::gen_opt`.
fn generator_opt_names() -> Vec<String> {
    let mut names = vec!["generator.encoder".to_string()];
    for prefix in ["generator.layer1", "generator.layer2"] {
        for name in LAYER_TENSOR_NAMES {
            names.push(format!("{prefix}.{name}"));
        }
    }
    names
}

fn draw_batch(rng: &mut SeededRng, pool: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.below(pool as u64) as usize).collect()
}

impl TrainState {
    /// Initialize a fresh run: generator and discriminator from the model
    /// stream, teacher pretrained on the clean latents of `train_set` from
    /// the teacher stream, student cloned from the teacher, loop RNG on its
    /// own stream.
    pub fn new(config: TrainConfig, train_set: &[Sample]) -> Result<Self> {
        config.validate()?;
        if train_set.is_empty() {
            return Err(Error::InvalidArgument {
                what: "TrainState::new",
                why: "empty training set".into(),
            });
        }
        let schedule = NoiseSchedule::default_linear();
        let mut model_rng = SeededRng::stream(config.seed, TAG_MODEL);
        let generator = ToyGenerator::new(
            config.patch,
            config.latent,
            &config.mor_config(),
            &schedule,
            &mut model_rng,
        )?;
        let disc = Discriminator::new(config.latent, config.disc_hidden, &mut model_rng);

        let latents: Vec<Vec<f64>> = train_set
            .iter()
            .map(|s| generator.encode_clean(s.hr.data()))
            .collect::<Result<_>>()?;
        let mut teacher_rng = SeededRng::stream(config.seed, TAG_TEACHER);
        let teacher = pretrain_teacher(&latents, &config, &schedule, &mut teacher_rng)?;
        // The student starts as a copy: at iteration zero the distillation
        // gradient is exactly zero, and it only grows as the generator's
        // outputs drift from the clean distribution.
        let student = teacher.clone();

        let gen_opt = Self::fresh_gen_opt(&generator);
        let student_opt = adam_states_for(&student.tensors());
        let disc_opt = disc
            .heads
            .iter()
            .flat_map(|h| adam_states_for(&h.tensors()))
            .collect();
        Ok(TrainState {
            rng: SeededRng::stream(config.seed, TAG_TRAIN),
            config,
            generator,
            teacher,
            student,
            disc,
            schedule,
            gen_opt,
            student_opt,
            disc_opt,
            iteration: 0,
        })
    }

    fn fresh_gen_opt(generator: &ToyGenerator) -> Vec<AdamState> {
        let mut opt = vec![AdamState::new(generator.encoder().as_slice().len())];
        for layer in [&generator.layer1, &generator.layer2] {
            opt.extend(adam_states_for(&layer.tensors()));
        }
        opt
    }

    /// One student-phase step: fit the online predictor to noise added onto
    /// the current generator's recovered latents. Only student tensors and
    /// student optimizer states change. Returns the batch diffusion loss.
    ///
    /// Draw order per sample: batch index, step `t`, then `latent` noise
    /// values — fixed so checkpointed streams replay exactly.
    pub fn student_phase(&mut self, train_set: &[Sample]) -> Result<f64> {
        let batch = self.config.batch;
        let idx = draw_batch(&mut self.rng, train_set.len(), batch);
        let dim = self.generator.latent();
        let mut grad = ScoreNetGrad::zeros(&self.student);
        let mut total = 0.0;
        for &i in &idx {
            let s = &train_set[i];
            let fwd = self.generator.forward(s.input.data(), &s.scores)?;
            let t = 1 + self.rng.below(self.schedule.t_max() as u64) as usize;
            let eps: Vec<f64> = (0..dim).map(|_| self.rng.normal(0.0, 1.0)).collect();
            let z_t = self.schedule.noise_to(&fwd.z0_hat, &eps, t)?;
            let (pred, cache) = self.student.forward_cached(&z_t, t, &self.schedule)?;
            let (loss, mut d_out) = diffusion_loss_with_grad(&eps, &pred)?;
            for d in &mut d_out {
                *d /= batch as f64;
            }
            grad.accumulate(&self.student.backward(&cache, &d_out)?)?;
            total += loss;
        }
        adam_step_tensors(
            &mut self.student.tensors_mut(),
            &grad.tensors(),
            &mut self.student_opt,
            self.config.lr_student,
        )?;
        Ok(total / batch as f64)
    }

    /// One generator-phase step, then one discriminator step.
    ///
    /// The generator takes a single Adam step on the batch-mean objective
    /// `rec + lambda_vsd * vsd + lambda_gan * gan + balance`: pixel gradients
    /// from the reconstruction term, a distillation gradient injected at the
    /// recovered latent, adversarial gradients chained through each head's
    /// re-noising, and the balance penalty's probability-space gradient fed
    /// into both adapter layers. The discriminator then takes one hinge step
    /// scoring fresh noisings of clean latents against the fakes that were
    /// just scored. Teacher and student stay untouched.
    ///
    /// Draw order: batch indices; per sample the distillation `t` and noise,
    /// then one noise vector per head; then, for the discriminator, one
    /// noise vector per sample per head.
    pub fn generator_phase(&mut self, train_set: &[Sample]) -> Result<GenStepLog> {
        let config = self.config.clone();
        let batch = config.batch;
        let idx = draw_batch(&mut self.rng, train_set.len(), batch);
        let samples: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();

        let TrainState {
            generator,
            teacher,
            student,
            disc,
            schedule,
            gen_opt,
            disc_opt,
            rng,
            ..
        } = self;

        let fwds: Vec<GenForward> = samples
            .iter()
            .map(|s| generator.forward(s.input.data(), &s.scores))
            .collect::<Result<_>>()?;

        // Balance penalty over the batch's routing, per layer. The gradient
        // with respect to each sample's probabilities is the same vector, so
        // it is computed once and injected into every backward pass below.
        let routed = config.n_real + config.n_zero > 0;
        let severity = samples.iter().map(|s| s.severity).sum::<f64>() / batch as f64;
        let s_eff = if config.deg_aware { severity } else { 1.0 };
        let mut loss_balance = 0.0;
        let mut routing_entropy = 0.0;
        let mut extras: [Option<Vec<f64>>; 2] = [None, None];
        if routed {
            for layer in 0..2 {
                let decisions: Vec<RoutingDecision> =
                    fwds.iter().map(|f| f.routing[layer].clone()).collect();
                let stats = balance_stats(&decisions)?;
                routing_entropy += entropy(&stats.p) / 2.0;
                loss_balance +=
                    deg_aware_balance_loss(&stats, config.alpha_balance, config.n_real, s_eff)?;
                if config.alpha_balance > 0.0 {
                    extras[layer] = Some(balance_prob_grad(
                        &stats,
                        config.alpha_balance,
                        config.n_real,
                        s_eff,
                    )?);
                }
            }
        }

        let head_steps = Discriminator::head_steps(schedule);
        let dim = generator.latent();
        let mut grad = GenGrad::zeros(generator);
        let mut loss_rec = 0.0;
        let mut vsd_surrogate = 0.0;
        let mut mean_zero_active = 0.0;
        let mut gan_outputs = Vec::with_capacity(batch * head_steps.len());
        // Fake latents per sample per head, reused by the discriminator step.
        let mut fakes: Vec<Vec<Vec<f64>>> = Vec::with_capacity(batch);

        for (s, fwd) in samples.iter().zip(&fwds) {
            // Pixel reconstruction.
            let pred = ImageF::from_vec(config.patch, config.patch, 1, fwd.x_hat.clone())?;
            let (rec, rec_grad) = reconstruction_loss_with_grad(&pred, &s.hr)?;
            loss_rec += rec / batch as f64;
            let d_x_hat: Vec<f64> = rec_grad.iter().map(|g| g / batch as f64).collect();

            // Distillation: the teacher/student gap at a random step, pulled
            // back to the recovered latent. The surrogate logged is its
            // inner product with that latent — the first-order loss change.
            let t = 1 + rng.below(schedule.t_max() as u64) as usize;
            let eps: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
            let g_vsd = vsd_gradient(
                &fwd.z0_hat,
                t,
                &eps,
                |z, t| teacher.forward(z, t, schedule),
                |z, t| student.forward(z, t, schedule),
                |_| 1.0,
                schedule,
            )?;
            vsd_surrogate += g_vsd
                .iter()
                .zip(&fwd.z0_hat)
                .map(|(g, z)| g * z)
                .sum::<f64>()
                / batch as f64;
            let mut d_z0: Vec<f64> = g_vsd
                .iter()
                .map(|g| config.lambda_vsd * g / batch as f64)
                .collect();

            // Adversarial: each head scores the latent re-noised to its own
            // step; `d gan / d out = -1/(heads * batch)` chains back through
            // the noising's sqrt(abar) factor.
            let mut per_head = Vec::with_capacity(head_steps.len());
            for (&t_h, head) in head_steps.iter().zip(&disc.heads) {
                let eps_h: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
                let z_fake = schedule.noise_to(&fwd.z0_hat, &eps_h, t_h)?;
                let (out, cache) = head.forward_cached(&z_fake)?;
                gan_outputs.push(out);
                let d_out = -config.lambda_gan / (head_steps.len() * batch) as f64;
                let (_, d_z) = head.backward(&cache, d_out);
                let a_h = schedule.sqrt_alpha_bar(t_h);
                for (acc, d) in d_z0.iter_mut().zip(&d_z) {
                    *acc += a_h * d;
                }
                per_head.push(z_fake);
            }
            fakes.push(per_head);

            mean_zero_active += (fwd.routing[0].zero_active(config.n_real)
                + fwd.routing[1].zero_active(config.n_real)) as f64
                / (2 * batch) as f64;

            let extras_ref = [extras[0].as_deref(), extras[1].as_deref()];
            grad.accumulate(&generator.backward(fwd, &d_x_hat, Some(&d_z0), extras_ref)?)?;
        }

        // One Adam step over the encoder and both adapter layers.
        gen_opt[0].step(
            generator.encoder_mut().as_mut_slice(),
            grad.d_encoder.as_slice(),
            config.lr_generator,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
        adam_step_tensors(
            &mut generator.layer1.tensors_mut(),
            &grad.layer1.tensors(),
            &mut gen_opt[1..6],
            config.lr_generator,
        )?;
        adam_step_tensors(
            &mut generator.layer2.tensors_mut(),
            &grad.layer2.tensors(),
            &mut gen_opt[6..11],
            config.lr_generator,
        )?;

        // Discriminator step: hinge on fresh noisings of the clean latents
        // against the fake latents scored above (produced by the pre-update
        // generator; the heads themselves were not touched by the step).
        let mut real_outputs = Vec::with_capacity(gan_outputs.len());
        let mut fake_outputs = Vec::with_capacity(gan_outputs.len());
        let mut real_caches = Vec::with_capacity(gan_outputs.len());
        let mut fake_caches = Vec::with_capacity(gan_outputs.len());
        for (s, per_head) in samples.iter().zip(&fakes) {
            let z0 = generator.encode_clean(s.hr.data())?;
            for (h, &t_h) in head_steps.iter().enumerate() {
                let eps_r: Vec<f64> = (0..dim).map(|_| rng.normal(0.0, 1.0)).collect();
                let z_real = schedule.noise_to(&z0, &eps_r, t_h)?;
                let (out, cache) = disc.heads[h].forward_cached(&z_real)?;
                real_outputs.push(out);
                real_caches.push((h, cache));
                let (out, cache) = disc.heads[h].forward_cached(&per_head[h])?;
                fake_outputs.push(out);
                fake_caches.push((h, cache));
            }
        }
        let (_, d_real, d_fake) = discriminator_loss_with_grad(&real_outputs, &fake_outputs)?;
        let mut head_grads: Vec<DiscHeadGrad> =
            disc.heads.iter().map(DiscHeadGrad::zeros).collect();
        for ((h, cache), d) in real_caches.iter().zip(&d_real) {
            let (g, _) = disc.heads[*h].backward(cache, *d);
            head_grads[*h].accumulate(&g)?;
        }
        for ((h, cache), d) in fake_caches.iter().zip(&d_fake) {
            let (g, _) = disc.heads[*h].backward(cache, *d);
            head_grads[*h].accumulate(&g)?;
        }
        for (h, head) in disc.heads.iter_mut().enumerate() {
            adam_step_tensors(
                &mut head.tensors_mut(),
                &head_grads[h].tensors(),
                &mut disc_opt[h * 4..(h + 1) * 4],
                config.lr_disc,
            )?;
        }

        Ok(GenStepLog {
            loss_rec,
            loss_vsd_surrogate: vsd_surrogate,
            loss_gan: gan_generator_loss(&gan_outputs)?,
            loss_balance,
            routing_entropy,
            mean_zero_active,
        })
    }

    // -- Checkpoint conversion ---------------------------------------------

    /// Snapshot the complete state. Tensor order is fixed, so two states
    /// with identical contents serialize to identical bytes.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, crate::numeric::Matrix)> = vec![
            ("generator.encoder".into(), self.generator.encoder().clone()),
            ("generator.decoder".into(), self.generator.decoder().clone()),
        ];
        for (prefix, layer) in [
            ("generator.layer1", &self.generator.layer1),
            ("generator.layer2", &self.generator.layer2),
        ] {
            tensors.push((format!("{prefix}.w0"), layer.w0().clone()));
            for (name, m) in layer.tensors() {
                tensors.push((format!("{prefix}.{name}"), m.clone()));
            }
        }
        for (prefix, net) in [("teacher", &self.teacher), ("student", &self.student)] {
            for (name, m) in net.tensors() {
                tensors.push((format!("{prefix}.{name}"), m.clone()));
            }
        }
        for (h, head) in self.disc.heads.iter().enumerate() {
            for (name, m) in head.tensors() {
                tensors.push((format!("disc.head{h}.{name}"), m.clone()));
            }
        }

        let mut optimizers: Vec<(String, AdamState)> = generator_opt_names()
            .into_iter()
            .zip(self.gen_opt.iter().cloned())
            .collect();
        for ((name, _), state) in self.student.tensors().iter().zip(&self.student_opt) {
            optimizers.push((format!("student.{name}"), state.clone()));
        }
        let mut disc_states = self.disc_opt.iter();
        for (h, head) in self.disc.heads.iter().enumerate() {
            for (name, _) in head.tensors() {
                let state = disc_states.next().expect("one Adam state per disc tensor");
                optimizers.push((format!("disc.head{h}.{name}"), state.clone()));
            }
        }

        Checkpoint {
            tensors,
            optimizers,
            rng_state: self.rng.state(),
            iteration: self.iteration,
            config_text: self.config.to_text(),
        }
    }

    /// Rebuild a state from a snapshot. The embedded config echo supplies
    /// every shape; tensors are validated against it as they are wired back
    /// together.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config_text, "checkpoint config echo")?;
        config.validate()?;
        let schedule = NoiseSchedule::default_linear();
        let tensor = |name: String| ckpt.tensor(&name).cloned();

        let layer = |prefix: &str| -> Result<MorLayer> {
            MorLayer::from_tensors(
                config.mor_config(),
                tensor(format!("{prefix}.w0"))?,
                tensor(format!("{prefix}.shared_a"))?,
                tensor(format!("{prefix}.shared_b"))?,
                tensor(format!("{prefix}.real_a"))?,
                tensor(format!("{prefix}.real_b"))?,
                tensor(format!("{prefix}.w_g"))?,
            )
        };
        let generator = ToyGenerator::from_parts(
            config.patch,
            config.latent,
            schedule.alpha_bar(schedule.t_max()),
            tensor("generator.encoder".into())?,
            tensor("generator.decoder".into())?,
            layer("generator.layer1")?,
            layer("generator.layer2")?,
        )?;
        let net = |prefix: &str| -> Result<ScoreNet> {
            ScoreNet::from_tensors(
                tensor(format!("{prefix}.w1"))?,
                tensor(format!("{prefix}.b1"))?,
                tensor(format!("{prefix}.w2"))?,
                tensor(format!("{prefix}.b2"))?,
            )
        };
        let teacher = net("teacher")?;
        let student = net("student")?;
        let heads = (0..model::DISC_LEVELS.len())
            .map(|h| {
                DiscHead::from_tensors(
                    tensor(format!("disc.head{h}.w1"))?,
                    tensor(format!("disc.head{h}.b1"))?,
                    tensor(format!("disc.head{h}.w2"))?,
                    tensor(format!("disc.head{h}.b2"))?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let disc = Discriminator { heads };

        let opt = |name: String| ckpt.optimizer(&name).cloned();
        let gen_opt = generator_opt_names()
            .into_iter()
            .map(opt)
            .collect::<Result<Vec<_>>>()?;
        let student_opt = student
            .tensors()
            .iter()
            .map(|(name, _)| opt(format!("student.{name}")))
            .collect::<Result<Vec<_>>>()?;
        let mut disc_opt = Vec::new();
        for (h, head) in disc.heads.iter().enumerate() {
            for (name, _) in head.tensors() {
                disc_opt.push(opt(format!("disc.head{h}.{name}"))?);
            }
        }

        Ok(TrainState {
            config,
            generator,
            teacher,
            student,
            disc,
            schedule,
            gen_opt,
            student_opt,
            disc_opt,
            rng: SeededRng::from_state(ckpt.rng_state),
            iteration: ckpt.iteration,
        })
    }
}

// ---------------------------------------------------------------------------
// The outer loop.
// ---------------------------------------------------------------------------

/// One CSV log row per generator iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss_rec: f64,
    pub loss_vsd_surrogate: f64,
    pub loss_gan: f64,
    pub loss_balance: f64,
    pub routing_entropy: f64,
    pub mean_zero_active: f64,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "iter,loss_rec,loss_vsd_surrogate,loss_gan,loss_balance,routing_entropy,mean_zero_active";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.loss_rec,
            self.loss_vsd_surrogate,
            self.loss_gan,
            self.loss_balance,
            self.routing_entropy,
            self.mean_zero_active
        )
    }

    fn from_step(iter: u64, step: &GenStepLog) -> Self {
        LogRow {
            iter,
            loss_rec: step.loss_rec,
            loss_vsd_surrogate: step.loss_vsd_surrogate,
            loss_gan: step.loss_gan,
            loss_balance: step.loss_balance,
            routing_entropy: step.routing_entropy,
            mean_zero_active: step.mean_zero_active,
        }
    }
}

/// Write rows as CSV with a header line.
pub fn write_log(path: impl AsRef<Path>, rows: &[LogRow]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(LogRow::CSV_HEADER);
    text.push('\n');
    for row in rows {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A finished (or checkpointed) run: the final state plus the log rows the
/// loop produced while it ran.
#[derive(Debug)]
pub struct TrainRun {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Alternate phases until the configured iteration count, counting
/// generator steps. Each cycle runs `student_steps` student updates and up
/// to `generator_steps` generator updates, logging one row per generator
/// step.
fn run_loop(state: &mut TrainState, train_set: &[Sample]) -> Result<Vec<LogRow>> {
    let mut rows = Vec::new();
    while state.iteration < state.config.iterations as u64 {
        for _ in 0..state.config.student_steps {
            state.student_phase(train_set)?;
        }
        for _ in 0..state.config.generator_steps {
            if state.iteration >= state.config.iterations as u64 {
                break;
            }
            let step = state.generator_phase(train_set)?;
            state.iteration += 1;
            rows.push(LogRow::from_step(state.iteration, &step));
        }
    }
    Ok(rows)
}

/// Run a full training job from scratch. Writes the CSV log if the config
/// names one.
pub fn train(config: &TrainConfig) -> Result<TrainRun> {
    config.validate()?;
    let (train_set, _holdout) = build_dataset(config)?;
    let mut state = TrainState::new(config.clone(), &train_set)?;
    let log = run_loop(&mut state, &train_set)?;
    if let Some(path) = &config.log {
        write_log(path, &log)?;
    }
    Ok(TrainRun { state, log })
}

/// Continue a checkpointed run up to `config.iterations`.
///
/// Every other knob must match the checkpoint's embedded config — silently
/// training against different data, shapes, or rates would corrupt the run.
/// The log rows cover only the newly run iterations.
pub fn resume(config: &TrainConfig, ckpt: &Checkpoint) -> Result<TrainRun> {
    config.validate()?;
    let mut state = TrainState::from_checkpoint(ckpt)?;
    let mut adopted = state.config.clone();
    adopted.iterations = config.iterations;
    adopted.log = config.log.clone();
    if adopted != *config {
        let stored = adopted.to_text();
        let asked = config.to_text();
        let diff = stored
            .lines()
            .zip(asked.lines())
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("checkpoint has `{a}`, run asks `{b}`"))
            .unwrap_or_else(|| "configs differ in length".into());
        return Err(Error::Checkpoint(format!(
            "config does not match the checkpointed run: {diff}"
        )));
    }
    state.config = adopted;
    let (train_set, _holdout) = build_dataset(&state.config)?;
    let log = run_loop(&mut state, &train_set)?;
    if let Some(path) = &state.config.log {
        write_log(path, &log)?;
    }
    Ok(TrainRun { state, log })
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Held-out quality and routing behaviour of a trained state.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metrics: MetricReport,
    pub mean_severity: f64,
    /// Entropy of the mean routing probabilities, averaged over layers;
    /// zero when the model has no routed experts.
    pub routing_entropy: f64,
    pub mean_zero_active: f64,
}

/// Restore every sample and score it against its clean target. Outputs are
/// clamped to `[0, 1]` before scoring, matching how they would be written
/// out as images. Evaluation is pure: no RNG, no state mutation.
pub fn evaluate(state: &TrainState, samples: &[Sample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument {
            what: "evaluate",
            why: "no samples to evaluate".into(),
        });
    }
    let patch = state.generator.patch();
    let n_real = state.config.n_real;
    let mut metrics = MetricReport::default();
    let mut decisions: [Vec<RoutingDecision>; 2] = [Vec::new(), Vec::new()];
    let mut mean_zero_active = 0.0;
    let mut mean_severity = 0.0;
    for s in samples {
        let fwd = state.generator.forward(s.input.data(), &s.scores)?;
        let mut pred = ImageF::from_vec(patch, patch, 1, fwd.x_hat)?;
        pred.clamp01();
        metrics.push_pair(&pred, &s.hr)?;
        mean_zero_active += (fwd.routing[0].zero_active(n_real)
            + fwd.routing[1].zero_active(n_real)) as f64
            / (2 * samples.len()) as f64;
        mean_severity += s.severity / samples.len() as f64;
        let [r1, r2] = fwd.routing;
        decisions[0].push(r1);
        decisions[1].push(r2);
    }
    let mut routing_entropy = 0.0;
    if state.config.n_real + state.config.n_zero > 0 {
        for layer in &decisions {
            routing_entropy += entropy(&balance_stats(layer)?.p) / 2.0;
        }
    }
    Ok(EvalReport {
        metrics,
        mean_severity,
        routing_entropy,
        mean_zero_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pnm::write_pnm;

    /// Small enough to keep every loop test under a second.
    fn tiny_config() -> TrainConfig {
        TrainConfig {
            patch: 12,
            scale: 1,
            train_count: 12,
            holdout_count: 4,
            latent: 10,
            score_hidden: 8,
            disc_hidden: 6,
            n_shared: 1,
            n_real: 4,
            n_zero: 2,
            top_k: 2,
            batch: 4,
            iterations: 4,
            teacher_iters: 12,
            ..TrainConfig::default()
        }
    }

    fn tensors_by_prefix<'c>(
        ckpt: &'c Checkpoint,
        prefix: &str,
    ) -> Vec<&'c (String, crate::numeric::Matrix)> {
        ckpt.tensors
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .collect()
    }

    fn prefix_changed(before: &Checkpoint, after: &Checkpoint, prefix: &str) -> bool {
        let a = tensors_by_prefix(before, prefix);
        let b = tensors_by_prefix(after, prefix);
        assert!(!a.is_empty(), "no tensors under {prefix}");
        assert_eq!(a.len(), b.len());
        a.iter().zip(&b).any(|(x, y)| x != y)
    }

    #[test]
    fn dataset_is_deterministic_and_scored() {
        let config = tiny_config();
        let (train, holdout) = build_dataset(&config).unwrap();
        assert_eq!(train.len(), 12);
        assert_eq!(holdout.len(), 4);
        for (i, s) in train.iter().enumerate() {
            assert_eq!(s.hr.width(), 12);
            assert_eq!(s.input.width(), 12);
            assert_eq!(s.scores.len(), crate::embed::DIMENSIONS.len());
            assert!(s.severity > 0.0 && s.severity < 1.0);
            // The mixed profile alternates regimes by sample index.
            assert_eq!(s.regime, if i % 2 == 0 { "deg1" } else { "deg2" });
        }
        let (train2, _) = build_dataset(&config).unwrap();
        for (a, b) in train.iter().zip(&train2) {
            assert_eq!(a.input.data(), b.input.data());
            assert_eq!(a.scores, b.scores);
        }
    }

    #[test]
    fn dataset_downscales_and_restores_resolution() {
        let config = TrainConfig {
            scale: 2,
            ..tiny_config()
        };
        let (train, _) = build_dataset(&config).unwrap();
        assert_eq!(train[0].input.width(), config.patch);
        assert_eq!(train[0].input.height(), config.patch);
    }

    #[test]
    fn dataset_reads_image_directories() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..6 {
            let img = texture(16, 16, 100 + i);
            write_pnm(dir.path().join(format!("src{i}.pgm")), &img).unwrap();
        }
        let config = TrainConfig {
            data_dir: Some(dir.path().to_path_buf()),
            holdout_count: 2,
            ..tiny_config()
        };
        let (train, holdout) = build_dataset(&config).unwrap();
        assert_eq!(train.len(), 4);
        assert_eq!(holdout.len(), 2);
        assert_eq!(train[0].hr.width(), 12); // center-cropped from 16

        // Not enough files to carve out the held-out set.
        let starved = TrainConfig {
            holdout_count: 6,
            ..config.clone()
        };
        assert!(build_dataset(&starved).is_err());

        // An empty directory is an error, not an empty corpus.
        let empty = tempfile::tempdir().unwrap();
        let none = TrainConfig {
            data_dir: Some(empty.path().to_path_buf()),
            ..config
        };
        assert!(build_dataset(&none).is_err());
    }

    #[test]
    fn teacher_pretraining_beats_fresh_net() {
        let config = TrainConfig {
            teacher_iters: 150,
            ..tiny_config()
        };
        let (train, _) = build_dataset(&config).unwrap();
        let schedule = NoiseSchedule::default_linear();
        let mut rng = SeededRng::stream(config.seed, TAG_MODEL);
        let generator =
            ToyGenerator::new(config.patch, config.latent, &config.mor_config(), &schedule, &mut rng)
                .unwrap();
        let latents: Vec<Vec<f64>> = train
            .iter()
            .map(|s| generator.encode_clean(s.hr.data()).unwrap())
            .collect();

        let mut teacher_rng = SeededRng::stream(config.seed, TAG_TEACHER);
        let fresh = ScoreNet::new(config.latent, config.score_hidden, &mut teacher_rng.clone())
            .unwrap();
        let trained = pretrain_teacher(&latents, &config, &schedule, &mut teacher_rng).unwrap();

        // Fixed held-out denoising problems, same for both nets.
        let eval_rng = SeededRng::new(999);
        let eval_loss = |net: &ScoreNet| -> f64 {
            let mut rng = eval_rng.clone();
            let mut total = 0.0;
            let trials = 64;
            for _ in 0..trials {
                let z0 = &latents[rng.below(latents.len() as u64) as usize];
                let t = 1 + rng.below(schedule.t_max() as u64) as usize;
                let eps: Vec<f64> = (0..config.latent).map(|_| rng.normal(0.0, 1.0)).collect();
                let z_t = schedule.noise_to(z0, &eps, t).unwrap();
                let pred = net.forward(&z_t, t, &schedule).unwrap();
                total += crate::losses::diffusion_loss(&eps, &pred).unwrap();
            }
            total / trials as f64
        };
        let before = eval_loss(&fresh);
        let after = eval_loss(&trained);
        assert!(
            after < before,
            "pretraining should reduce denoising loss: {before} -> {after}"
        );
        assert!(pretrain_teacher(&[], &config, &schedule, &mut teacher_rng).is_err());
    }

    #[test]
    fn student_phase_touches_only_the_student() {
        let config = tiny_config();
        let (train, _) = build_dataset(&config).unwrap();
        let mut state = TrainState::new(config, &train).unwrap();
        let before = state.to_checkpoint();
        let loss = state.student_phase(&train).unwrap();
        let after = state.to_checkpoint();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(prefix_changed(&before, &after, "student."));
        for frozen in ["generator.", "teacher.", "disc."] {
            assert!(
                !prefix_changed(&before, &after, frozen),
                "{frozen} tensors moved during the student phase"
            );
        }
    }

    #[test]
    fn generator_phase_touches_generator_and_disc_only() {
        let config = tiny_config();
        let (train, _) = build_dataset(&config).unwrap();
        let mut state = TrainState::new(config, &train).unwrap();
        let before = state.to_checkpoint();
        let step = state.generator_phase(&train).unwrap();
        let after = state.to_checkpoint();

        assert!(prefix_changed(&before, &after, "generator.layer1"));
        assert!(prefix_changed(&before, &after, "generator.layer2"));
        assert!(prefix_changed(&before, &after, "generator.encoder"));
        assert!(prefix_changed(&before, &after, "disc."));
        for frozen in ["teacher.", "student."] {
            assert!(
                !prefix_changed(&before, &after, frozen),
                "{frozen} tensors moved during the generator phase"
            );
        }
        // The frozen pieces inside the generator never move.
        for name in ["generator.decoder", "generator.layer1.w0", "generator.layer2.w0"] {
            assert_eq!(
                before.tensors.iter().find(|(n, _)| n == name),
                after.tensors.iter().find(|(n, _)| n == name),
                "{name} should be frozen"
            );
        }

        assert!(step.loss_rec > 0.0);
        assert!(step.loss_balance >= 0.0);
        assert!(step.routing_entropy > 0.0);
        assert!(step.mean_zero_active >= 0.0);
    }

    #[test]
    fn phases_run_without_routed_experts() {
        // Degenerate pool: shared experts only (a plain low-rank adapter).
        let config = TrainConfig {
            n_shared: 3,
            n_real: 0,
            n_zero: 0,
            top_k: 0,
            ..tiny_config()
        };
        let (train, _) = build_dataset(&config).unwrap();
        let mut state = TrainState::new(config, &train).unwrap();
        state.student_phase(&train).unwrap();
        let step = state.generator_phase(&train).unwrap();
        assert_eq!(step.loss_balance, 0.0);
        assert_eq!(step.routing_entropy, 0.0);
        assert_eq!(step.mean_zero_active, 0.0);
        let report = evaluate(&state, &train).unwrap();
        assert_eq!(report.routing_entropy, 0.0);
    }

    #[test]
    fn reconstruction_only_training_halves_the_loss() {
        // Full-rank latent: with a square orthonormal decoder the model can
        // in principle reproduce any target, so the whole reconstruction
        // error is trainable (at low rank the frozen decoder's subspace
        // residual would put a floor under the loss).
        let config = TrainConfig {
            latent: 144,
            lambda_vsd: 0.0,
            lambda_gan: 0.0,
            alpha_balance: 0.0,
            student_steps: 0,
            iterations: 200,
            ..tiny_config()
        };
        let run = train(&config).unwrap();
        assert_eq!(run.log.len(), 200);
        let first = run.log[0].loss_rec;
        let tail: f64 = run.log[195..].iter().map(|r| r.loss_rec).sum::<f64>() / 5.0;
        assert!(
            tail < 0.5 * first,
            "reconstruction loss should at least halve: {first} -> {tail}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config();
        let a = train(&config).unwrap();
        let b = train(&config).unwrap();
        assert_eq!(
            a.state.to_checkpoint().to_bytes(),
            b.state.to_checkpoint().to_bytes()
        );
        assert_eq!(a.log.len(), b.log.len());
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn checkpoint_roundtrips_through_state() {
        let config = tiny_config();
        let run = train(&config).unwrap();
        let ckpt = run.state.to_checkpoint();
        let rebuilt = TrainState::from_checkpoint(&ckpt).unwrap();
        assert_eq!(ckpt.to_bytes(), rebuilt.to_checkpoint().to_bytes());
    }

    #[test]
    fn interrupted_run_resumes_bit_exactly() {
        let full_config = TrainConfig {
            iterations: 6,
            ..tiny_config()
        };
        let half_config = TrainConfig {
            iterations: 3,
            ..full_config.clone()
        };
        let full = train(&full_config).unwrap();
        let half = train(&half_config).unwrap();
        let resumed = resume(&full_config, &half.state.to_checkpoint()).unwrap();
        assert_eq!(resumed.state.iteration, 6);
        assert_eq!(
            full.state.to_checkpoint().to_bytes(),
            resumed.state.to_checkpoint().to_bytes()
        );
        // The resumed log covers exactly the second half.
        assert_eq!(resumed.log.len(), 3);
        assert_eq!(full.log[3..], resumed.log[..]);
    }

    #[test]
    fn resume_rejects_a_mismatched_config() {
        let config = tiny_config();
        let run = train(&config).unwrap();
        let ckpt = run.state.to_checkpoint();
        let tampered = TrainConfig {
            lr_generator: 1e-4,
            ..config
        };
        let err = resume(&tampered, &ckpt).unwrap_err().to_string();
        assert!(err.contains("lr_generator"), "unhelpful error: {err}");
    }

    #[test]
    fn evaluation_is_pure_and_reports_in_range() {
        let config = tiny_config();
        let (_train_set, holdout) = build_dataset(&config).unwrap();
        let run = train(&config).unwrap();
        let a = evaluate(&run.state, &holdout).unwrap();
        let b = evaluate(&run.state, &holdout).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.metrics.len(), holdout.len());
        assert!(a.metrics.mean_psnr() > 0.0);
        assert!(a.metrics.mean_ssim() > -1.0 && a.metrics.mean_ssim() <= 1.0);
        assert!(a.mean_severity > 0.0 && a.mean_severity < 1.0);
        let n_routed = (run.state.config.n_real + run.state.config.n_zero) as f64;
        assert!(a.routing_entropy >= 0.0 && a.routing_entropy <= n_routed.ln() + 1e-12);
        assert!(evaluate(&run.state, &[]).is_err());
    }

    #[test]
    fn log_rows_serialize_as_csv() {
        let row = LogRow {
            iter: 3,
            loss_rec: 0.5,
            loss_vsd_surrogate: -0.25,
            loss_gan: 0.125,
            loss_balance: 0.01,
            routing_entropy: 1.75,
            mean_zero_active: 0.5,
        };
        assert_eq!(row.to_csv(), "3,0.5,-0.25,0.125,0.01,1.75,0.5");
        assert_eq!(LogRow::CSV_HEADER.split(',').count(), 7);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        write_log(&path, &[row]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(LogRow::CSV_HEADER));
        assert_eq!(lines.next(), Some(row.to_csv().as_str()));
    }
}
