//! The toy restoration model and its auxiliary networks.
//!
//! The generator maps a degraded patch to a restored one in a single
//! evaluation: a trainable linear encoder produces a pseudo-noised latent,
//! two mixture-of-ranks layers (with a tanh between) predict the noise it
//! carries, the clean latent is recovered algebraically, and a frozen
//! orthonormal decoder maps it back to pixels. Noise-prediction MLPs serve
//! as the frozen teacher and online student for score distillation, and a
//! bank of tiny heads on re-noised latents forms the discriminator.
//!
//! Everything here is explicit f64 math with hand-derived backward passes;
//! the unit tests pin each one against central finite differences.

use crate::adapter::{MorBackward, MorConfig, MorLayer, RoutingDecision};
use crate::error::{Error, Result};
use crate::losses::{predict_x0, NoiseSchedule};
use crate::numeric::{AdamState, Matrix, SeededRng};

/// Adam hyperparameters shared by every optimizer in the trainer.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Number of scalar features encoding the diffusion step for the MLPs.
pub const TIME_FEATURES: usize = 4;

/// Scalar features for step `t`: normalized position, one sine/cosine pair,
/// and the signal coefficient — enough for a toy net to tell steps apart.
pub fn time_features(t: usize, schedule: &NoiseSchedule) -> [f64; TIME_FEATURES] {
    let tn = t as f64 / schedule.t_max() as f64;
    [
        tn,
        (std::f64::consts::TAU * tn).sin(),
        (std::f64::consts::TAU * tn).cos(),
        schedule.sqrt_alpha_bar(t),
    ]
}

/// `w x + b` where `b` is stored as a 1-row matrix.
fn affine(w: &Matrix, x: &[f64], b: &Matrix) -> Result<Vec<f64>> {
    let mut y = w.matvec(x)?;
    for (v, i) in y.iter_mut().zip(0..b.cols()) {
        *v += b.get(0, i);
    }
    Ok(y)
}

/// Step one tensor list with per-tensor Adam states. Tensor and gradient
/// lists must align by name; states align by position.
pub fn adam_step_tensors(
    tensors: &mut [(&'static str, &mut Matrix)],
    grads: &[(&'static str, &Matrix)],
    states: &mut [AdamState],
    lr: f64,
) -> Result<()> {
    if tensors.len() != grads.len() || tensors.len() != states.len() {
        return Err(Error::InvalidArgument {
            what: "adam_step_tensors",
            why: format!(
                "{} tensors, {} grads, {} states",
                tensors.len(),
                grads.len(),
                states.len()
            ),
        });
    }
    for (((name, tensor), (gname, grad)), state) in
        tensors.iter_mut().zip(grads).zip(states.iter_mut())
    {
        if name != gname {
            return Err(Error::InvalidArgument {
                what: "adam_step_tensors",
                why: format!("tensor {name} paired with gradient {gname}"),
            });
        }
        state.step(
            tensor.as_mut_slice(),
            grad.as_slice(),
            lr,
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
        )?;
    }
    Ok(())
}

/// Fresh Adam states sized for the given tensors.
pub fn adam_states_for(tensors: &[(&'static str, &Matrix)]) -> Vec<AdamState> {
    tensors
        .iter()
        .map(|(_, t)| AdamState::new(t.as_slice().len()))
        .collect()
}

// ---------------------------------------------------------------------------
// Noise-prediction MLP (teacher and student).
// ---------------------------------------------------------------------------

/// Two-layer MLP predicting the noise in a latent at a given step:
/// `eps = W2 tanh(W1 [z_t, time] + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    latent: usize,
    hidden: usize,
    w1: Matrix,
    b1: Matrix,
    w2: Matrix,
    b2: Matrix,
}

/// Forward activations needed by [`ScoreNet::backward`].
pub struct ScoreCache {
    input: Vec<f64>,
    h: Vec<f64>,
}

/// Gradients for every [`ScoreNet`] tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNetGrad {
    pub d_w1: Matrix,
    pub d_b1: Matrix,
    pub d_w2: Matrix,
    pub d_b2: Matrix,
}

impl ScoreNetGrad {
    pub fn zeros(net: &ScoreNet) -> Self {
        ScoreNetGrad {
            d_w1: Matrix::zeros(net.hidden, net.latent + TIME_FEATURES),
            d_b1: Matrix::zeros(1, net.hidden),
            d_w2: Matrix::zeros(net.latent, net.hidden),
            d_b2: Matrix::zeros(1, net.latent),
        }
    }

    pub fn accumulate(&mut self, other: &ScoreNetGrad) -> Result<()> {
        self.d_w1.add_scaled(&other.d_w1, 1.0)?;
        self.d_b1.add_scaled(&other.d_b1, 1.0)?;
        self.d_w2.add_scaled(&other.d_w2, 1.0)?;
        self.d_b2.add_scaled(&other.d_b2, 1.0)?;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for m in [&mut self.d_w1, &mut self.d_b1, &mut self.d_w2, &mut self.d_b2] {
            for v in m.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w1", &self.d_w1),
            ("b1", &self.d_b1),
            ("w2", &self.d_w2),
            ("b2", &self.d_b2),
        ]
    }
}

impl ScoreNet {
    /// Random init: weights `N(0, 1/fan_in)`, biases zero.
    pub fn new(latent: usize, hidden: usize, rng: &mut SeededRng) -> Result<Self> {
        if latent == 0 || hidden == 0 {
            return Err(Error::InvalidArgument {
                what: "ScoreNet::new",
                why: "latent and hidden must be positive".into(),
            });
        }
        let in_dim = latent + TIME_FEATURES;
        let s1 = (1.0 / in_dim as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        Ok(ScoreNet {
            latent,
            hidden,
            w1: Matrix::from_fn(hidden, in_dim, |_, _| rng.normal(0.0, s1)),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::from_fn(latent, hidden, |_, _| rng.normal(0.0, s2)),
            b2: Matrix::zeros(1, latent),
        })
    }

    pub fn from_tensors(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let latent = w2.rows();
        let hidden = w2.cols();
        let ok = w1.shape() == (hidden, latent + TIME_FEATURES)
            && b1.shape() == (1, hidden)
            && b2.shape() == (1, latent);
        if !ok {
            return Err(Error::Checkpoint(format!(
                "noise-prediction net tensor shapes are inconsistent: w1 {:?}, b1 {:?}, w2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            )));
        }
        Ok(ScoreNet {
            latent,
            hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// Predict the noise in `z_t` at step `t`.
    pub fn forward(&self, z_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        Ok(self.forward_cached(z_t, t, schedule)?.0)
    }

    pub fn forward_cached(
        &self,
        z_t: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<(Vec<f64>, ScoreCache)> {
        if z_t.len() != self.latent {
            return Err(Error::ShapeMismatch {
                op: "ScoreNet::forward",
                left: format!("latent {}", self.latent),
                right: format!("z_t len {}", z_t.len()),
            });
        }
        let mut input = Vec::with_capacity(self.latent + TIME_FEATURES);
        input.extend_from_slice(z_t);
        input.extend_from_slice(&time_features(t, schedule));
        let h: Vec<f64> = affine(&self.w1, &input, &self.b1)?
            .into_iter()
            .map(f64::tanh)
            .collect();
        let out = affine(&self.w2, &h, &self.b2)?;
        Ok((out, ScoreCache { input, h }))
    }

    /// Gradients of a scalar loss given `d_out = dL/d eps_pred`.
    pub fn backward(&self, cache: &ScoreCache, d_out: &[f64]) -> Result<ScoreNetGrad> {
        if d_out.len() != self.latent {
            return Err(Error::ShapeMismatch {
                op: "ScoreNet::backward",
                left: format!("latent {}", self.latent),
                right: format!("d_out len {}", d_out.len()),
            });
        }
        let mut grad = ScoreNetGrad::zeros(self);
        for (i, &d) in d_out.iter().enumerate() {
            grad.d_b2.set(0, i, d);
            for (j, &hj) in cache.h.iter().enumerate() {
                grad.d_w2.set(i, j, d * hj);
            }
        }
        let d_h = self.w2.matvec_t(d_out)?;
        for (j, (&dh, &hj)) in d_h.iter().zip(&cache.h).enumerate() {
            let d_pre = dh * (1.0 - hj * hj);
            grad.d_b1.set(0, j, d_pre);
            for (k, &xv) in cache.input.iter().enumerate() {
                grad.d_w1.set(j, k, d_pre * xv);
            }
        }
        Ok(grad)
    }
}

// ---------------------------------------------------------------------------
// Discriminator: tiny heads at fixed noise levels.
// ---------------------------------------------------------------------------

/// Fractions of the schedule at which discriminator heads operate.
pub const DISC_LEVELS: [f64; 3] = [0.25, 0.5, 0.75];

/// One two-layer scoring head: `scalar = w2 tanh(W1 z + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscHead {
    w1: Matrix,
    b1: Matrix,
    w2: Matrix, // 1 x hidden
    b2: Matrix, // 1 x 1
}

pub struct DiscCache {
    input: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscHeadGrad {
    pub d_w1: Matrix,
    pub d_b1: Matrix,
    pub d_w2: Matrix,
    pub d_b2: Matrix,
}

impl DiscHeadGrad {
    pub fn zeros(head: &DiscHead) -> Self {
        DiscHeadGrad {
            d_w1: Matrix::zeros(head.w1.rows(), head.w1.cols()),
            d_b1: Matrix::zeros(1, head.b1.cols()),
            d_w2: Matrix::zeros(1, head.w2.cols()),
            d_b2: Matrix::zeros(1, 1),
        }
    }

    pub fn accumulate(&mut self, other: &DiscHeadGrad) -> Result<()> {
        self.d_w1.add_scaled(&other.d_w1, 1.0)?;
        self.d_b1.add_scaled(&other.d_b1, 1.0)?;
        self.d_w2.add_scaled(&other.d_w2, 1.0)?;
        self.d_b2.add_scaled(&other.d_b2, 1.0)?;
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w1", &self.d_w1),
            ("b1", &self.d_b1),
            ("w2", &self.d_w2),
            ("b2", &self.d_b2),
        ]
    }
}

impl DiscHead {
    pub fn new(latent: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let s1 = (1.0 / latent as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        DiscHead {
            w1: Matrix::from_fn(hidden, latent, |_, _| rng.normal(0.0, s1)),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::from_fn(1, hidden, |_, _| rng.normal(0.0, s2)),
            b2: Matrix::zeros(1, 1),
        }
    }

    pub fn from_tensors(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let hidden = w1.rows();
        let ok = b1.shape() == (1, hidden) && w2.shape() == (1, hidden) && b2.shape() == (1, 1);
        if !ok {
            return Err(Error::Checkpoint(
                "discriminator head tensor shapes are inconsistent".into(),
            ));
        }
        Ok(DiscHead { w1, b1, w2, b2 })
    }

    pub fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    pub fn forward_cached(&self, z: &[f64]) -> Result<(f64, DiscCache)> {
        let h: Vec<f64> = affine(&self.w1, z, &self.b1)?
            .into_iter()
            .map(f64::tanh)
            .collect();
        let out = self.w2.row(0).iter().zip(&h).map(|(w, h)| w * h).sum::<f64>()
            + self.b2.get(0, 0);
        Ok((
            out,
            DiscCache {
                input: z.to_vec(),
                h,
            },
        ))
    }

    /// Gradients given `d_out = dL/d score`; also returns `dL/d input`.
    pub fn backward(&self, cache: &DiscCache, d_out: f64) -> (DiscHeadGrad, Vec<f64>) {
        let mut grad = DiscHeadGrad::zeros(self);
        grad.d_b2.set(0, 0, d_out);
        for (j, &hj) in cache.h.iter().enumerate() {
            grad.d_w2.set(0, j, d_out * hj);
        }
        let mut d_input = vec![0.0; cache.input.len()];
        for (j, &hj) in cache.h.iter().enumerate() {
            let d_pre = d_out * self.w2.get(0, j) * (1.0 - hj * hj);
            grad.d_b1.set(0, j, d_pre);
            for (k, &xv) in cache.input.iter().enumerate() {
                grad.d_w1.set(j, k, d_pre * xv);
                d_input[k] += d_pre * self.w1.get(j, k);
            }
        }
        (grad, d_input)
    }
}

/// One head per entry of [`DISC_LEVELS`]; head `i` scores latents re-noised
/// to step `round(level_i * t_max)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub heads: Vec<DiscHead>,
}

impl Discriminator {
    pub fn new(latent: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Discriminator {
            heads: DISC_LEVELS
                .iter()
                .map(|_| DiscHead::new(latent, hidden, rng))
                .collect(),
        }
    }

    /// The schedule step each head operates at.
    pub fn head_steps(schedule: &NoiseSchedule) -> Vec<usize> {
        DISC_LEVELS
            .iter()
            .map(|f| ((f * schedule.t_max() as f64).round() as usize).clamp(1, schedule.t_max()))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Toy single-step restoration generator.
// ---------------------------------------------------------------------------

/// Generator: encoder, two routed adapter layers predicting noise, algebraic
/// clean-latent recovery at the fixed final step, frozen decoder.
///
/// The trunk works on unit-scale vectors and the operating step's
/// coefficients are applied only around the recovery algebra: the latent
/// presented at the final step is `sqrt(abar) * u` and the noise prediction
/// carries a fixed `sqrt(abar / (1 - abar))` head scale. Recovery divides by
/// `sqrt(abar)` (a factor of ~157 at the stock schedule's last step), so
/// without this arrangement every trainable coordinate would move the output
/// two orders of magnitude harder than an optimizer step assumes.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyGenerator {
    patch: usize,
    latent: usize,
    /// Operating step's cumulative signal coefficient.
    abar: f64,
    /// Trainable, `latent x patch^2`.
    encoder: Matrix,
    /// Frozen orthonormal columns, `patch^2 x latent`.
    decoder: Matrix,
    pub layer1: MorLayer,
    pub layer2: MorLayer,
}

/// Everything the forward pass produces for one sample.
pub struct GenForward {
    pub x_hat: Vec<f64>,
    pub z0_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
    pub routing: [RoutingDecision; 2],
    cache: GenCache,
}

struct GenCache {
    x_in: Vec<f64>,
    scores: Vec<f64>,
    u: Vec<f64>, // encoder output
    h: Vec<f64>, // tanh(layer1 output)
}

/// Gradients for the generator's trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct GenGrad {
    pub d_encoder: Matrix,
    pub layer1: MorBackward,
    pub layer2: MorBackward,
}

impl GenGrad {
    pub fn zeros(gen: &ToyGenerator) -> Self {
        GenGrad {
            d_encoder: Matrix::zeros(gen.latent, gen.patch * gen.patch),
            layer1: MorBackward::zeros(gen.layer1.config()),
            layer2: MorBackward::zeros(gen.layer2.config()),
        }
    }

    pub fn accumulate(&mut self, other: &GenGrad) -> Result<()> {
        self.d_encoder.add_scaled(&other.d_encoder, 1.0)?;
        self.layer1.accumulate(&other.layer1)?;
        self.layer2.accumulate(&other.layer2)?;
        Ok(())
    }
}

/// Orthonormalize the columns of a random Gaussian matrix (modified
/// Gram-Schmidt, two passes for numerical safety).
fn random_orthonormal_columns(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    assert!(cols <= rows, "cannot orthonormalize {cols} columns in {rows} dims");
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.normal(0.0, 1.0)).collect())
        .collect();
    for i in 0..cols {
        for _pass in 0..2 {
            for j in 0..i {
                let proj: f64 = columns[i]
                    .iter()
                    .zip(&columns[j])
                    .map(|(a, b)| a * b)
                    .sum();
                for k in 0..rows {
                    columns[i][k] -= proj * columns[j][k];
                }
            }
        }
        let norm = columns[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut columns[i] {
            *v /= norm;
        }
    }
    Matrix::from_fn(rows, cols, |r, c| columns[c][r])
}

impl ToyGenerator {
    /// Build and initialize the generator.
    ///
    /// The decoder gets random orthonormal columns and stays frozen. The
    /// encoder starts at `decoder^T`, and layer 1 wraps an identity base
    /// weight while layer 2 wraps a zero one — so the initial noise
    /// prediction is exactly zero and the whole model reduces to a
    /// projection onto the decoder's column space (the identity, when the
    /// latent is full rank). Training then only has to learn the residual
    /// restoration.
    pub fn new(
        patch: usize,
        latent: usize,
        mor: &MorConfig,
        schedule: &NoiseSchedule,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let p2 = patch * patch;
        if latent > p2 {
            return Err(Error::InvalidArgument {
                what: "ToyGenerator::new",
                why: format!("latent {latent} exceeds patch pixels {p2}"),
            });
        }
        if mor.d_in != latent || mor.d_out != latent {
            return Err(Error::InvalidArgument {
                what: "ToyGenerator::new",
                why: format!(
                    "adapter dims {}x{} must match latent {latent}",
                    mor.d_in, mor.d_out
                ),
            });
        }
        let abar = schedule.alpha_bar(schedule.t_max());
        let decoder = random_orthonormal_columns(p2, latent, rng);
        let encoder = Matrix::from_fn(latent, p2, |r, c| decoder.get(c, r));
        let layer1 = MorLayer::new(mor.clone(), Matrix::identity(latent), rng)?;
        let layer2 = MorLayer::new(mor.clone(), Matrix::zeros(latent, latent), rng)?;
        Ok(ToyGenerator {
            patch,
            latent,
            abar,
            encoder,
            decoder,
            layer1,
            layer2,
        })
    }

    pub fn from_parts(
        patch: usize,
        latent: usize,
        abar: f64,
        encoder: Matrix,
        decoder: Matrix,
        layer1: MorLayer,
        layer2: MorLayer,
    ) -> Result<Self> {
        let p2 = patch * patch;
        let ok = encoder.shape() == (latent, p2) && decoder.shape() == (p2, latent);
        if !ok {
            return Err(Error::Checkpoint(format!(
                "generator tensor shapes are inconsistent: encoder {:?}, decoder {:?}",
                encoder.shape(),
                decoder.shape()
            )));
        }
        Ok(ToyGenerator {
            patch,
            latent,
            abar,
            encoder,
            decoder,
            layer1,
            layer2,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn latent(&self) -> usize {
        self.latent
    }

    pub fn abar(&self) -> f64 {
        self.abar
    }

    pub fn encoder(&self) -> &Matrix {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut Matrix {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &Matrix {
        &self.decoder
    }

    /// Clean latent of a target patch: `decoder^T x`.
    pub fn encode_clean(&self, x_flat: &[f64]) -> Result<Vec<f64>> {
        self.decoder.matvec_t(x_flat)
    }

    /// The fixed scale on the adapter trunk's noise output:
    /// `sqrt(abar / (1 - abar))`, the ratio of the operating step's signal
    /// and noise coefficients. With it, a unit change in the trunk output
    /// moves the recovered latent by one unit.
    fn head_scale(&self) -> f64 {
        (self.abar / (1.0 - self.abar)).sqrt()
    }

    /// Restore one flattened degraded patch conditioned on its degradation
    /// scores.
    ///
    /// The encoder output `u` plays the clean-latent role; the recovery step
    /// receives it re-scaled to the operating step (`sqrt(abar) * u`)
    /// together with the scaled noise prediction, and algebraically this
    /// recovers `u - trunk(u)` — the trunk learns the restoration residual.
    pub fn forward(&self, x_flat: &[f64], scores: &[f64]) -> Result<GenForward> {
        if x_flat.len() != self.patch * self.patch {
            return Err(Error::ShapeMismatch {
                op: "ToyGenerator::forward",
                left: format!("patch^2 {}", self.patch * self.patch),
                right: format!("input len {}", x_flat.len()),
            });
        }
        let u = self.encoder.matvec(x_flat)?;
        let (y1, r1) = self.layer1.forward(&u, scores)?;
        let h: Vec<f64> = y1.into_iter().map(f64::tanh).collect();
        let (m, r2) = self.layer2.forward(&h, scores)?;
        let scale = self.head_scale();
        let eps_hat: Vec<f64> = m.iter().map(|v| scale * v).collect();
        let z_in: Vec<f64> = u.iter().map(|v| self.abar.sqrt() * v).collect();
        let z0_hat = predict_x0(&z_in, &eps_hat, self.abar)?;
        let x_hat = self.decoder.matvec(&z0_hat)?;
        Ok(GenForward {
            x_hat,
            z0_hat,
            eps_hat,
            routing: [r1, r2],
            cache: GenCache {
                x_in: x_flat.to_vec(),
                scores: scores.to_vec(),
                u,
                h,
            },
        })
    }

    /// Backward pass for one sample.
    ///
    /// `d_x_hat` is the loss gradient at the restored pixels, `d_z0_extra`
    /// an additional gradient applied directly at the recovered latent (the
    /// distillation and adversarial paths produce one), and the two extras
    /// are probability-space gradients for each layer's balance penalty.
    pub fn backward(
        &self,
        fwd: &GenForward,
        d_x_hat: &[f64],
        d_z0_extra: Option<&[f64]>,
        d_probs_extra: [Option<&[f64]>; 2],
    ) -> Result<GenGrad> {
        let c = &fwd.cache;
        // dL/d z0_hat from the pixel path plus injected latent-space terms.
        let mut d_z0 = self.decoder.matvec_t(d_x_hat)?;
        if let Some(extra) = d_z0_extra {
            if extra.len() != self.latent {
                return Err(Error::ShapeMismatch {
                    op: "ToyGenerator::backward",
                    left: format!("latent {}", self.latent),
                    right: format!("d_z0_extra len {}", extra.len()),
                });
            }
            for (d, e) in d_z0.iter_mut().zip(extra) {
                *d += e;
            }
        }
        // z0_hat = (sqrt(abar) u - sqrt(1-abar) * head_scale * m) / sqrt(abar)
        //        = u - m, so the trunk output and the encoder output both see
        // the recovered latent's gradient at unit scale.
        let d_m: Vec<f64> = d_z0.iter().map(|d| -d).collect();
        let mut d_u = d_z0;

        let l2 = self
            .layer2
            .backward(&c.h, &c.scores, &fwd.routing[1], &d_m, d_probs_extra[1])?;
        // Through the tanh.
        let d_y1: Vec<f64> = l2
            .d_x
            .iter()
            .zip(&c.h)
            .map(|(d, h)| d * (1.0 - h * h))
            .collect();
        let l1 = self
            .layer1
            .backward(&c.u, &c.scores, &fwd.routing[0], &d_y1, d_probs_extra[0])?;
        for (d, t) in d_u.iter_mut().zip(&l1.d_x) {
            *d += t;
        }
        let d_encoder = Matrix::from_fn(self.latent, self.patch * self.patch, |r, col| {
            d_u[r] * c.x_in[col]
        });
        Ok(GenGrad {
            d_encoder,
            layer1: l1,
            layer2: l2,
        })
    }
}
