//! Training objectives: diffusion noise prediction, single-step clean-latent
//! recovery, score-distillation gradients, adversarial terms, expert
//! load-balancing penalties, and the image reconstruction loss.
//!
//! Conventions: losses return scalars; where the trainer needs gradients, a
//! `_with_grad` variant returns the loss together with the exact gradient so
//! tests can pin both against finite differences.

use crate::adapter::RoutingDecision;
use crate::error::{Error, Result};
use crate::image::ImageF;

/// Weight of the image-gradient term inside [`reconstruction_loss`].
pub const GRAD_WEIGHT: f64 = 0.5;

/// Cumulative signal coefficients of a forward noising process.
///
/// `alpha_bar(t)` for `t in 1..=t_max` is the squared signal fraction left
/// after `t` noising steps: `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear per-step variance ramp from `beta_start` to `beta_end` over
    /// `t_max` steps; `abar_t = prod_{i<=t} (1 - beta_i)`.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let inv = |why: String| Error::InvalidArgument {
            what: "NoiseSchedule::linear",
            why,
        };
        if t_max == 0 {
            return Err(inv("t_max must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end) {
            return Err(inv(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut alpha_bar = Vec::with_capacity(t_max);
        let mut prod = 1.0;
        for t in 0..t_max {
            let frac = if t_max == 1 {
                0.0
            } else {
                t as f64 / (t_max - 1) as f64
            };
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { alpha_bar })
    }

    /// The stock 1000-step schedule with variances from 1e-4 to 0.02.
    pub fn default_linear() -> Self {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("stock parameters are valid")
    }

    pub fn t_max(&self) -> usize {
        self.alpha_bar.len()
    }

    /// Cumulative signal coefficient at step `t` (1-based, `1..=t_max`).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(
            t >= 1 && t <= self.alpha_bar.len(),
            "step {t} outside 1..={}",
            self.alpha_bar.len()
        );
        self.alpha_bar[t - 1]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    /// Forward noising: `sqrt(abar_t) z0 + sqrt(1-abar_t) eps`.
    pub fn noise_to(&self, z0: &[f64], eps: &[f64], t: usize) -> Result<Vec<f64>> {
        if z0.len() != eps.len() {
            return Err(Error::ShapeMismatch {
                op: "NoiseSchedule::noise_to",
                left: format!("z0 len {}", z0.len()),
                right: format!("eps len {}", eps.len()),
            });
        }
        let a = self.sqrt_alpha_bar(t);
        let b = self.sqrt_one_minus_alpha_bar(t);
        Ok(z0.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }
}

/// Recover the clean latent in one step: `(z_in - sqrt(1-abar) eps) / sqrt(abar)`.
///
/// This inverts the forward noising exactly when `eps_pred` is the true
/// noise, which is what makes single-evaluation restoration possible.
pub fn predict_x0(z_in: &[f64], eps_pred: &[f64], abar: f64) -> Result<Vec<f64>> {
    if z_in.len() != eps_pred.len() {
        return Err(Error::ShapeMismatch {
            op: "predict_x0",
            left: format!("z_in len {}", z_in.len()),
            right: format!("eps_pred len {}", eps_pred.len()),
        });
    }
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(Error::InvalidArgument {
            what: "predict_x0",
            why: format!("abar must lie in (0, 1], got {abar}"),
        });
    }
    let a = abar.sqrt();
    let b = (1.0 - abar).sqrt();
    Ok(z_in
        .iter()
        .zip(eps_pred)
        .map(|(z, e)| (z - b * e) / a)
        .collect())
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_true: &[f64], eps_pred: &[f64]) -> Result<f64> {
    Ok(diffusion_loss_with_grad(eps_true, eps_pred)?.0)
}

/// [`diffusion_loss`] plus its gradient with respect to `eps_pred`.
pub fn diffusion_loss_with_grad(eps_true: &[f64], eps_pred: &[f64]) -> Result<(f64, Vec<f64>)> {
    if eps_true.len() != eps_pred.len() {
        return Err(Error::ShapeMismatch {
            op: "diffusion_loss",
            left: format!("eps_true len {}", eps_true.len()),
            right: format!("eps_pred len {}", eps_pred.len()),
        });
    }
    if eps_true.is_empty() {
        return Err(Error::InvalidArgument {
            what: "diffusion_loss",
            why: "empty noise vectors".into(),
        });
    }
    let n = eps_true.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; eps_true.len()];
    for (i, (t, p)) in eps_true.iter().zip(eps_pred).enumerate() {
        let d = p - t;
        loss += d * d;
        grad[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

/// Score-distillation gradient with respect to the recovered latent.
///
/// Re-noises `z0_hat` to step `t` with the given `eps`, evaluates both noise
/// predictors there, and returns
/// `omega(t) * (teacher(z_t, t) - student(z_t, t)) * sqrt(abar_t)`
/// — the chain rule through `z_t = sqrt(abar_t) z0_hat + ...`. Chaining
/// further into generator parameters is the trainer's job.
pub fn vsd_gradient(
    z0_hat: &[f64],
    t: usize,
    eps: &[f64],
    mut score_teacher: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
    mut score_student: impl FnMut(&[f64], usize) -> Result<Vec<f64>>,
    omega: impl Fn(usize) -> f64,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let z_t = schedule.noise_to(z0_hat, eps, t)?;
    let teacher = score_teacher(&z_t, t)?;
    let student = score_student(&z_t, t)?;
    if teacher.len() != z0_hat.len() || student.len() != z0_hat.len() {
        return Err(Error::ShapeMismatch {
            op: "vsd_gradient",
            left: format!("latent len {}", z0_hat.len()),
            right: format!(
                "teacher len {}, student len {}",
                teacher.len(),
                student.len()
            ),
        });
    }
    let w = omega(t) * schedule.sqrt_alpha_bar(t);
    Ok(teacher
        .iter()
        .zip(&student)
        .map(|(a, b)| w * (a - b))
        .collect())
}

/// Generator-side adversarial loss: negative mean discriminator output.
/// The gradient with respect to each output is `-1/n`.
pub fn gan_generator_loss(disc_outputs: &[f64]) -> Result<f64> {
    if disc_outputs.is_empty() {
        return Err(Error::InvalidArgument {
            what: "gan_generator_loss",
            why: "no discriminator outputs".into(),
        });
    }
    Ok(-disc_outputs.iter().sum::<f64>() / disc_outputs.len() as f64)
}

/// Hinge discriminator loss: `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn discriminator_loss(real_outputs: &[f64], fake_outputs: &[f64]) -> Result<f64> {
    Ok(discriminator_loss_with_grad(real_outputs, fake_outputs)?.0)
}

/// [`discriminator_loss`] plus gradients with respect to both output lists.
pub fn discriminator_loss_with_grad(
    real_outputs: &[f64],
    fake_outputs: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if real_outputs.is_empty() || fake_outputs.is_empty() {
        return Err(Error::InvalidArgument {
            what: "discriminator_loss",
            why: "empty output list".into(),
        });
    }
    let nr = real_outputs.len() as f64;
    let nf = fake_outputs.len() as f64;
    let mut loss = 0.0;
    let d_real: Vec<f64> = real_outputs
        .iter()
        .map(|&r| {
            if 1.0 - r > 0.0 {
                loss += (1.0 - r) / nr;
                -1.0 / nr
            } else {
                0.0
            }
        })
        .collect();
    let d_fake: Vec<f64> = fake_outputs
        .iter()
        .map(|&f| {
            if 1.0 + f > 0.0 {
                loss += (1.0 + f) / nf;
                1.0 / nf
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, d_real, d_fake))
}

/// Per-batch routing usage: `f[i]` is the fraction of samples whose argmax
/// probability lands on expert `i` (ties to the lowest index), `p[i]` the
/// mean probability mass on expert `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub batch: usize,
}

impl BalanceStats {
    pub fn n_experts(&self) -> usize {
        self.f.len()
    }
}

/// Aggregate routing decisions of one batch into [`BalanceStats`].
pub fn balance_stats(decisions: &[RoutingDecision]) -> Result<BalanceStats> {
    let first = decisions.first().ok_or(Error::InvalidArgument {
        what: "balance_stats",
        why: "empty batch".into(),
    })?;
    let n = first.probs.len();
    if n == 0 {
        return Err(Error::InvalidArgument {
            what: "balance_stats",
            why: "decisions carry no routed experts".into(),
        });
    }
    let b = decisions.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for d in decisions {
        if d.probs.len() != n {
            return Err(Error::ShapeMismatch {
                op: "balance_stats",
                left: format!("{n} experts"),
                right: format!("decision with {}", d.probs.len()),
            });
        }
        let mut argmax = 0;
        for (i, &prob) in d.probs.iter().enumerate() {
            if prob > d.probs[argmax] {
                argmax = i;
            }
        }
        f[argmax] += 1.0 / b;
        for (acc, &prob) in p.iter_mut().zip(&d.probs) {
            *acc += prob / b;
        }
    }
    Ok(BalanceStats {
        f,
        p,
        batch: decisions.len(),
    })
}

/// Load-balancing penalty `alpha * N * sum_i f_i p_i`.
///
/// Minimized (at `alpha`) when dispatch and probability mass are uniform;
/// concentrating both on one expert raises it toward `alpha * N`.
pub fn balance_loss(stats: &BalanceStats, alpha: f64) -> f64 {
    let n = stats.n_experts() as f64;
    alpha
        * n
        * stats
            .f
            .iter()
            .zip(&stats.p)
            .map(|(f, p)| f * p)
            .sum::<f64>()
}

/// Degradation-aware balancing: `N * sum_i alpha_i f_i p_i` where real
/// experts (indices below `n_real`) keep weight `alpha` and zero experts get
/// `s * alpha`, `s` being the batch-mean degradation severity.
///
/// Mildly degraded batches (small `s`) therefore pay little for routing
/// mass onto zero experts, freeing the router to spend capacity only where
/// degradation demands it. At `s = 1` this is exactly [`balance_loss`].
pub fn deg_aware_balance_loss(
    stats: &BalanceStats,
    alpha: f64,
    n_real: usize,
    s: f64,
) -> Result<f64> {
    if n_real > stats.n_experts() {
        return Err(Error::InvalidArgument {
            what: "deg_aware_balance_loss",
            why: format!("n_real {} exceeds {} experts", n_real, stats.n_experts()),
        });
    }
    let n = stats.n_experts() as f64;
    let mut total = 0.0;
    for (i, (f, p)) in stats.f.iter().zip(&stats.p).enumerate() {
        let a_i = if i < n_real { alpha } else { s * alpha };
        total += a_i * f * p;
    }
    Ok(n * total)
}

/// Gradient of [`deg_aware_balance_loss`] with respect to one sample's
/// probability vector (identical for every sample in the batch).
///
/// Dispatch fractions come from an argmax, so they are treated as constant;
/// the gradient flows through the mean probabilities only:
/// `d/dp_i = N * alpha_i * f_i / batch`. Feed this to the adapter backward
/// pass as the extra probability-space gradient.
pub fn balance_prob_grad(
    stats: &BalanceStats,
    alpha: f64,
    n_real: usize,
    s: f64,
) -> Result<Vec<f64>> {
    if n_real > stats.n_experts() {
        return Err(Error::InvalidArgument {
            what: "balance_prob_grad",
            why: format!("n_real {} exceeds {} experts", n_real, stats.n_experts()),
        });
    }
    let n = stats.n_experts() as f64;
    let b = stats.batch as f64;
    Ok(stats
        .f
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let a_i = if i < n_real { alpha } else { s * alpha };
            n * a_i * f / b
        })
        .collect())
}

/// Pixel reconstruction loss: `MSE + GRAD_WEIGHT * MSE(forward differences)`.
///
/// The gradient term compares horizontal and vertical neighbor differences,
/// a cheap stand-in for a perceptual term that punishes blurred edges harder
/// than plain MSE does.
pub fn reconstruction_loss(pred: &ImageF, target: &ImageF) -> Result<f64> {
    Ok(reconstruction_loss_with_grad(pred, target)?.0)
}

/// [`reconstruction_loss`] plus its gradient with respect to `pred`,
/// flattened in the image's interleaved layout.
pub fn reconstruction_loss_with_grad(pred: &ImageF, target: &ImageF) -> Result<(f64, Vec<f64>)> {
    let same_shape = pred.width() == target.width()
        && pred.height() == target.height()
        && pred.channels() == target.channels();
    if !same_shape {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            left: format!(
                "{}x{}x{}",
                pred.width(),
                pred.height(),
                pred.channels()
            ),
            right: format!(
                "{}x{}x{}",
                target.width(),
                target.height(),
                target.channels()
            ),
        });
    }
    let (w, h, c) = (pred.width(), pred.height(), pred.channels());
    let n = (w * h * c) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w * h * c];

    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let d = p - t;
        loss += d * d / n;
        grad[i] = 2.0 * d / n;
    }

    // Forward-difference counts: horizontal (w-1)*h and vertical w*(h-1)
    // per channel.
    let m = (c * ((w.saturating_sub(1)) * h + w * (h.saturating_sub(1)))) as f64;
    if m > 0.0 {
        let at = |x: usize, y: usize, ch: usize| (y * w + x) * c + ch;
        let mut grad_term = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w.saturating_sub(1) {
                    let dp = pred.get(x + 1, y, ch) - pred.get(x, y, ch);
                    let dt = target.get(x + 1, y, ch) - target.get(x, y, ch);
                    let d = dp - dt;
                    grad_term += d * d / m;
                    let g = GRAD_WEIGHT * 2.0 * d / m;
                    grad[at(x + 1, y, ch)] += g;
                    grad[at(x, y, ch)] -= g;
                }
            }
            for y in 0..h.saturating_sub(1) {
                for x in 0..w {
                    let dp = pred.get(x, y + 1, ch) - pred.get(x, y, ch);
                    let dt = target.get(x, y + 1, ch) - target.get(x, y, ch);
                    let d = dp - dt;
                    grad_term += d * d / m;
                    let g = GRAD_WEIGHT * 2.0 * d / m;
                    grad[at(x, y + 1, ch)] += g;
                    grad[at(x, y, ch)] -= g;
                }
            }
        }
        loss += GRAD_WEIGHT * grad_term;
    }
    Ok((loss, grad))
}

/// Scalar weights of the composite generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Multiplier on the score-distillation term.
    pub lambda_vsd: f64,
    /// Multiplier on the adversarial term.
    pub lambda_gan: f64,
    /// Base weight of the balancing penalty (already applied inside the
    /// balance losses, not by [`total_generator_loss`]).
    pub alpha_balance: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_vsd: 1.0,
            lambda_gan: 0.1,
            alpha_balance: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_vsd >= 0.0 && self.lambda_gan >= 0.0 && self.alpha_balance >= 0.0;
        if !ok {
            return Err(Error::InvalidArgument {
                what: "LossWeights",
                why: "weights must be non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Composite generator objective for reporting:
/// `rec + lambda_vsd * vsd_surrogate + lambda_gan * gan + balance`.
///
/// The distillation term trains through [`vsd_gradient`], not this scalar;
/// `vsd_surrogate` is its logging stand-in. `balance` arrives already scaled
/// by its own alpha.
pub fn total_generator_loss(
    weights: &LossWeights,
    rec: f64,
    vsd_surrogate: f64,
    gan: f64,
    balance: f64,
) -> f64 {
    rec + weights.lambda_vsd * vsd_surrogate + weights.lambda_gan * gan + balance
}
