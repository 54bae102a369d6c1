//! Mixture-of-ranks adapter layer.
//!
//! A frozen base weight `W0` is augmented by a pool of rank-1 adapters, each
//! an outer product `B_i A_i` (`A_i`: `1 x d_in`, `B_i`: `d_out x 1`).
//! Experts come in three kinds:
//!
//! - **shared** experts: always active, ungated;
//! - **real** routed experts: gated by a router conditioned on the
//!   degradation score vector, top-k selected;
//! - **zero** experts: parameterless routing targets that contribute exactly
//!   nothing — selecting one spends a top-k slot on "do less", which lets the
//!   router modulate effective capacity per input.
//!
//! The router computes `softmax(W_g s)` over all `n_real + n_zero`
//! candidates, keeps the top k by probability (ties to the lowest index),
//! and uses the *unrenormalized* probabilities of the kept experts as gates.
//! Output:
//!
//! ```text
//! y = W0 x + sum_shared B_j A_j x + sum_{i in topk, i real} p_i B_i A_i x
//! ```
//!
//! The backward pass is exact for every parameter, treating the top-k mask
//! as constant (straight-through): gradients reach the kept probabilities,
//! flow through the full softmax Jacobian, and land on `W_g`.

use crate::error::{Error, Result};
use crate::numeric::{dot, softmax, Matrix, SeededRng};

/// Expert pool sizes and dimensions for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MorConfig {
    pub d_in: usize,
    pub d_out: usize,
    /// Dimension of the conditioning score vector fed to the router.
    pub score_dim: usize,
    /// Always-active ungated experts.
    pub n_shared: usize,
    /// Routed experts with parameters.
    pub n_real: usize,
    /// Routed experts that contribute nothing when selected.
    pub n_zero: usize,
    /// Experts kept per input among the `n_real + n_zero` candidates.
    pub top_k: usize,
}

impl MorConfig {
    /// Number of routing candidates.
    pub fn n_routed(&self) -> usize {
        self.n_real + self.n_zero
    }

    /// Trainable parameter count (adapters plus router; `W0` is frozen).
    pub fn param_count(&self) -> usize {
        (self.n_shared + self.n_real) * (self.d_in + self.d_out)
            + self.n_routed() * self.score_dim
    }

    pub fn validate(&self) -> Result<()> {
        let inv = |why: String| Error::InvalidArgument {
            what: "MorConfig",
            why,
        };
        if self.d_in == 0 || self.d_out == 0 {
            return Err(inv("d_in and d_out must be positive".into()));
        }
        if self.score_dim == 0 {
            return Err(inv("score_dim must be positive".into()));
        }
        if self.n_routed() == 0 {
            if self.top_k != 0 {
                return Err(inv(format!(
                    "top_k {} with no routed experts",
                    self.top_k
                )));
            }
        } else if self.top_k == 0 || self.top_k > self.n_routed() {
            return Err(inv(format!(
                "top_k {} outside 1..={} routed experts",
                self.top_k,
                self.n_routed()
            )));
        }
        Ok(())
    }
}

/// Outcome of routing one input: full softmax probabilities, the kept
/// expert indices (ascending), and their gates (the kept probabilities,
/// not renormalized). Indices `>= n_real` are zero experts.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub probs: Vec<f64>,
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

impl RoutingDecision {
    fn empty() -> Self {
        RoutingDecision {
            probs: Vec::new(),
            selected: Vec::new(),
            gates: Vec::new(),
        }
    }

    /// How many of the kept experts are zero experts.
    pub fn zero_active(&self, n_real: usize) -> usize {
        self.selected.iter().filter(|&&i| i >= n_real).count()
    }
}

/// One mixture-of-ranks layer. See the module docs for the math.
#[derive(Debug, Clone, PartialEq)]
pub struct MorLayer {
    config: MorConfig,
    /// Frozen base weight, `d_out x d_in`.
    w0: Matrix,
    /// Shared adapter down-projections, `n_shared x d_in` (row per expert).
    shared_a: Matrix,
    /// Shared adapter up-projections, `d_out x n_shared` (column per expert).
    shared_b: Matrix,
    /// Routed adapter down-projections, `n_real x d_in`.
    real_a: Matrix,
    /// Routed adapter up-projections, `d_out x n_real`.
    real_b: Matrix,
    /// Router weight, `(n_real + n_zero) x score_dim`.
    w_g: Matrix,
}

/// Gradients of a scalar loss with respect to one layer's trainable tensors
/// and its input. Shapes mirror the layer's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct MorBackward {
    pub d_x: Vec<f64>,
    pub d_shared_a: Matrix,
    pub d_shared_b: Matrix,
    pub d_real_a: Matrix,
    pub d_real_b: Matrix,
    pub d_w_g: Matrix,
}

impl MorBackward {
    pub fn zeros(config: &MorConfig) -> Self {
        MorBackward {
            d_x: vec![0.0; config.d_in],
            d_shared_a: Matrix::zeros(config.n_shared, config.d_in),
            d_shared_b: Matrix::zeros(config.d_out, config.n_shared),
            d_real_a: Matrix::zeros(config.n_real, config.d_in),
            d_real_b: Matrix::zeros(config.d_out, config.n_real),
            d_w_g: Matrix::zeros(config.n_routed(), config.score_dim),
        }
    }

    /// `self += other`, for accumulating over a batch.
    pub fn accumulate(&mut self, other: &MorBackward) -> Result<()> {
        if self.d_x.len() != other.d_x.len() {
            return Err(Error::ShapeMismatch {
                op: "MorBackward::accumulate",
                left: format!("d_x len {}", self.d_x.len()),
                right: format!("d_x len {}", other.d_x.len()),
            });
        }
        for (a, b) in self.d_x.iter_mut().zip(&other.d_x) {
            *a += b;
        }
        self.d_shared_a.add_scaled(&other.d_shared_a, 1.0)?;
        self.d_shared_b.add_scaled(&other.d_shared_b, 1.0)?;
        self.d_real_a.add_scaled(&other.d_real_a, 1.0)?;
        self.d_real_b.add_scaled(&other.d_real_b, 1.0)?;
        self.d_w_g.add_scaled(&other.d_w_g, 1.0)?;
        Ok(())
    }

    /// Scale every gradient, e.g. by `1 / batch`.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.d_x {
            *v *= factor;
        }
        for m in [
            &mut self.d_shared_a,
            &mut self.d_shared_b,
            &mut self.d_real_a,
            &mut self.d_real_b,
            &mut self.d_w_g,
        ] {
            for v in m.as_mut_slice() {
                *v *= factor;
            }
        }
    }

    /// Trainable gradients in the same order as [`MorLayer::tensors`].
    pub fn tensors(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("shared_a", &self.d_shared_a),
            ("shared_b", &self.d_shared_b),
            ("real_a", &self.d_real_a),
            ("real_b", &self.d_real_b),
            ("w_g", &self.d_w_g),
        ]
    }
}

/// Dot product of `u` with column `col` of `m`.
fn col_dot(m: &Matrix, u: &[f64], col: usize) -> f64 {
    (0..m.rows()).map(|r| u[r] * m.get(r, col)).sum()
}

impl MorLayer {
    /// Build a layer around a frozen base weight.
    ///
    /// Adapter down-projections start at `N(0, 1/d_in)`, up-projections at
    /// zero (so the layer initially computes exactly `W0 x`), and the router
    /// at `N(0, 1/score_dim)`. Draw order is fixed: shared A rows, real A
    /// rows, router rows.
    pub fn new(config: MorConfig, w0: Matrix, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if w0.shape() != (config.d_out, config.d_in) {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::new",
                left: format!("w0 {}x{}", w0.rows(), w0.cols()),
                right: format!("config {}x{}", config.d_out, config.d_in),
            });
        }
        let a_std = (1.0 / config.d_in as f64).sqrt();
        let g_std = (1.0 / config.score_dim as f64).sqrt();
        let shared_a = Matrix::from_fn(config.n_shared, config.d_in, |_, _| {
            rng.normal(0.0, a_std)
        });
        let real_a = Matrix::from_fn(config.n_real, config.d_in, |_, _| rng.normal(0.0, a_std));
        let w_g = Matrix::from_fn(config.n_routed(), config.score_dim, |_, _| {
            rng.normal(0.0, g_std)
        });
        Ok(MorLayer {
            shared_b: Matrix::zeros(config.d_out, config.n_shared),
            real_b: Matrix::zeros(config.d_out, config.n_real),
            shared_a,
            real_a,
            w_g,
            w0,
            config,
        })
    }

    /// Rebuild from checkpointed tensors.
    pub fn from_tensors(
        config: MorConfig,
        w0: Matrix,
        shared_a: Matrix,
        shared_b: Matrix,
        real_a: Matrix,
        real_b: Matrix,
        w_g: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let expect: [(&str, (usize, usize), (usize, usize)); 6] = [
            ("w0", w0.shape(), (config.d_out, config.d_in)),
            ("shared_a", shared_a.shape(), (config.n_shared, config.d_in)),
            ("shared_b", shared_b.shape(), (config.d_out, config.n_shared)),
            ("real_a", real_a.shape(), (config.n_real, config.d_in)),
            ("real_b", real_b.shape(), (config.d_out, config.n_real)),
            ("w_g", w_g.shape(), (config.n_routed(), config.score_dim)),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(Error::ShapeMismatch {
                    op: "MorLayer::from_tensors",
                    left: format!("{name} {}x{}", got.0, got.1),
                    right: format!("expected {}x{}", want.0, want.1),
                });
            }
        }
        Ok(MorLayer {
            config,
            w0,
            shared_a,
            shared_b,
            real_a,
            real_b,
            w_g,
        })
    }

    pub fn config(&self) -> &MorConfig {
        &self.config
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    /// Trainable tensors with their checkpoint names (`W0` excluded).
    pub fn tensors(&self) -> [(&'static str, &Matrix); 5] {
        [
            ("shared_a", &self.shared_a),
            ("shared_b", &self.shared_b),
            ("real_a", &self.real_a),
            ("real_b", &self.real_b),
            ("w_g", &self.w_g),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 5] {
        [
            ("shared_a", &mut self.shared_a),
            ("shared_b", &mut self.shared_b),
            ("real_a", &mut self.real_a),
            ("real_b", &mut self.real_b),
            ("w_g", &mut self.w_g),
        ]
    }

    /// Route one score vector: softmax over the router logits, keep the top
    /// k probabilities (ties to the lowest index), gates unrenormalized.
    pub fn route(&self, scores: &[f64]) -> Result<RoutingDecision> {
        if scores.len() != self.config.score_dim {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::route",
                left: format!("score_dim {}", self.config.score_dim),
                right: format!("scores len {}", scores.len()),
            });
        }
        if self.config.n_routed() == 0 {
            return Ok(RoutingDecision::empty());
        }
        let logits = self.w_g.matvec(scores)?;
        let probs = softmax(&logits)?;

        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .expect("softmax output is finite")
                .then(a.cmp(&b))
        });
        let mut selected = order[..self.config.top_k].to_vec();
        selected.sort_unstable();
        let gates = selected.iter().map(|&i| probs[i]).collect();
        Ok(RoutingDecision {
            probs,
            selected,
            gates,
        })
    }

    /// Forward pass for one input; also returns the routing decision so
    /// callers can reuse it for the backward pass and for usage statistics.
    pub fn forward(&self, x: &[f64], scores: &[f64]) -> Result<(Vec<f64>, RoutingDecision)> {
        let routing = self.route(scores)?;
        let y = self.forward_routed(x, &routing)?;
        Ok((y, routing))
    }

    /// Forward pass with a fixed routing decision.
    pub fn forward_routed(&self, x: &[f64], routing: &RoutingDecision) -> Result<Vec<f64>> {
        if x.len() != self.config.d_in {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::forward",
                left: format!("d_in {}", self.config.d_in),
                right: format!("x len {}", x.len()),
            });
        }
        let mut y = self.w0.matvec(x)?;

        for i in 0..self.config.n_shared {
            let c = dot(self.shared_a.row(i), x);
            for r in 0..self.config.d_out {
                y[r] += c * self.shared_b.get(r, i);
            }
        }

        for (&idx, &gate) in routing.selected.iter().zip(&routing.gates) {
            if idx >= self.config.n_real {
                continue; // zero expert: contributes exactly nothing
            }
            let c = gate * dot(self.real_a.row(idx), x);
            for r in 0..self.config.d_out {
                y[r] += c * self.real_b.get(r, idx);
            }
        }
        Ok(y)
    }

    /// Exact gradients for one input.
    ///
    /// `upstream` is `dL/dy`. `d_probs_extra`, if given, is an additional
    /// `dL/dprobs` over all routed candidates (the balance penalties produce
    /// one); it joins the output-path gradient before the softmax Jacobian.
    /// The top-k mask is treated as constant.
    pub fn backward(
        &self,
        x: &[f64],
        scores: &[f64],
        routing: &RoutingDecision,
        upstream: &[f64],
        d_probs_extra: Option<&[f64]>,
    ) -> Result<MorBackward> {
        let cfg = &self.config;
        if x.len() != cfg.d_in || upstream.len() != cfg.d_out {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::backward",
                left: format!("d_in {}, d_out {}", cfg.d_in, cfg.d_out),
                right: format!("x len {}, upstream len {}", x.len(), upstream.len()),
            });
        }
        if scores.len() != cfg.score_dim {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::backward",
                left: format!("score_dim {}", cfg.score_dim),
                right: format!("scores len {}", scores.len()),
            });
        }
        if routing.probs.len() != cfg.n_routed() {
            return Err(Error::ShapeMismatch {
                op: "MorLayer::backward",
                left: format!("n_routed {}", cfg.n_routed()),
                right: format!("routing over {}", routing.probs.len()),
            });
        }
        if let Some(extra) = d_probs_extra {
            if extra.len() != cfg.n_routed() {
                return Err(Error::ShapeMismatch {
                    op: "MorLayer::backward",
                    left: format!("n_routed {}", cfg.n_routed()),
                    right: format!("d_probs_extra len {}", extra.len()),
                });
            }
        }

        let mut grad = MorBackward::zeros(cfg);

        // Base path: dx += W0^T u.
        grad.d_x = self.w0.matvec_t(upstream)?;

        // Shared experts.
        for i in 0..cfg.n_shared {
            let c = dot(self.shared_a.row(i), x); // A_i x
            let ub = col_dot(&self.shared_b, upstream, i); // u . B_i
            for (col, &xv) in x.iter().enumerate() {
                grad.d_shared_a.set(i, col, ub * xv);
            }
            for r in 0..cfg.d_out {
                grad.d_shared_b.set(r, i, c * upstream[r]);
            }
            for (dx, &av) in grad.d_x.iter_mut().zip(self.shared_a.row(i)) {
                *dx += ub * av;
            }
        }

        // Routed real experts and the gate gradient.
        let mut d_probs = vec![0.0; cfg.n_routed()];
        for (&idx, &gate) in routing.selected.iter().zip(&routing.gates) {
            if idx >= cfg.n_real {
                continue;
            }
            let c = dot(self.real_a.row(idx), x);
            let ub = col_dot(&self.real_b, upstream, idx);
            for (col, &xv) in x.iter().enumerate() {
                grad.d_real_a.set(idx, col, gate * ub * xv);
            }
            for r in 0..cfg.d_out {
                grad.d_real_b.set(r, idx, gate * c * upstream[r]);
            }
            for (dx, &av) in grad.d_x.iter_mut().zip(self.real_a.row(idx)) {
                *dx += gate * ub * av;
            }
            d_probs[idx] = ub * c;
        }

        if let Some(extra) = d_probs_extra {
            for (d, e) in d_probs.iter_mut().zip(extra) {
                *d += e;
            }
        }

        // Softmax Jacobian: dlogit_j = p_j (dp_j - sum_k dp_k p_k).
        if cfg.n_routed() > 0 {
            let inner: f64 = d_probs
                .iter()
                .zip(&routing.probs)
                .map(|(d, p)| d * p)
                .sum();
            for j in 0..cfg.n_routed() {
                let d_logit = routing.probs[j] * (d_probs[j] - inner);
                for (col, &sv) in scores.iter().enumerate() {
                    grad.d_w_g.set(j, col, d_logit * sv);
                }
            }
        }

        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{finite_diff_grad, max_rel_err};

    fn small_config() -> MorConfig {
        MorConfig {
            d_in: 5,
            d_out: 4,
            score_dim: 3,
            n_shared: 2,
            n_real: 6,
            n_zero: 2,
            top_k: 3,
        }
    }

    /// A layer with non-zero B matrices so every path carries signal.
    fn warmed_layer(seed: u64) -> (MorLayer, MorConfig) {
        let config = small_config();
        let mut rng = SeededRng::new(seed);
        let w0 = Matrix::from_fn(config.d_out, config.d_in, |_, _| rng.uniform(-0.5, 0.5));
        let mut layer = MorLayer::new(config.clone(), w0, &mut rng).unwrap();
        for (_, t) in layer.tensors_mut() {
            if t.as_slice().iter().all(|v| *v == 0.0) {
                for v in t.as_mut_slice() {
                    *v = rng.uniform(-0.8, 0.8);
                }
            }
        }
        (layer, config)
    }

    fn vecn(rng: &mut SeededRng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.uniform(lo, hi)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let mut c = small_config();
        c.top_k = 9;
        assert!(c.validate().is_err(), "top_k beyond pool");
        c = small_config();
        c.top_k = 0;
        assert!(c.validate().is_err(), "top_k zero with routed experts");
        c = small_config();
        c.n_real = 0;
        c.n_zero = 0;
        c.top_k = 0;
        assert!(c.validate().is_ok(), "pure shared (plain adapter) is legal");
        c.d_in = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_count_matches_tensor_sizes() {
        let (layer, config) = warmed_layer(1);
        let total: usize = layer
            .tensors()
            .iter()
            .map(|(_, t)| t.as_slice().len())
            .sum();
        assert_eq!(total, config.param_count());
    }

    #[test]
    fn fresh_layer_computes_exactly_w0x() {
        // B matrices start at zero, so adapters add nothing.
        let config = small_config();
        let mut rng = SeededRng::new(7);
        let w0 = Matrix::from_fn(4, 5, |_, _| rng.uniform(-1.0, 1.0));
        let layer = MorLayer::new(config, w0.clone(), &mut rng).unwrap();
        let x = vecn(&mut rng, 5, -1.0, 1.0);
        let s = vecn(&mut rng, 3, 0.0, 1.0);
        let (y, _) = layer.forward(&x, &s).unwrap();
        assert_eq!(y, w0.matvec(&x).unwrap());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let config = small_config();
        let w0 = Matrix::zeros(4, 5);
        let a = MorLayer::new(config.clone(), w0.clone(), &mut SeededRng::new(3)).unwrap();
        let b = MorLayer::new(config, w0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn routing_selects_top_k_with_unrenormalized_gates() {
        let (layer, config) = warmed_layer(11);
        let mut rng = SeededRng::new(5);
        let s = vecn(&mut rng, 3, 0.0, 1.0);
        let routing = layer.route(&s).unwrap();
        assert_eq!(routing.probs.len(), config.n_routed());
        assert_eq!(routing.selected.len(), config.top_k);
        assert!((routing.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // Every unselected prob must not exceed any selected prob.
        let min_kept = routing.gates.iter().cloned().fold(f64::INFINITY, f64::min);
        for (i, &p) in routing.probs.iter().enumerate() {
            if !routing.selected.contains(&i) {
                assert!(p <= min_kept + 1e-15);
            }
        }
        // Gates are the raw probabilities (sum strictly below 1 here).
        for (&idx, &gate) in routing.selected.iter().zip(&routing.gates) {
            assert_eq!(gate, routing.probs[idx]);
        }
        assert!(routing.gates.iter().sum::<f64>() < 1.0);
    }

    #[test]
    fn routing_ties_break_to_lowest_index() {
        // Identical router rows make every logit equal.
        let config = MorConfig {
            d_in: 2,
            d_out: 2,
            score_dim: 2,
            n_shared: 0,
            n_real: 4,
            n_zero: 2,
            top_k: 3,
        };
        let mut rng = SeededRng::new(1);
        let mut layer = MorLayer::new(config, Matrix::identity(2), &mut rng).unwrap();
        let row: Vec<f64> = vec![0.3, -0.2];
        for (name, t) in layer.tensors_mut() {
            if name == "w_g" {
                for r in 0..6 {
                    t.set(r, 0, row[0]);
                    t.set(r, 1, row[1]);
                }
            }
        }
        let routing = layer.route(&[0.5, 0.5]).unwrap();
        assert_eq!(routing.selected, vec![0, 1, 2]);
        for &g in &routing.gates {
            assert!((g - 1.0 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_experts_contribute_nothing() {
        // All candidates are zero experts: output reduces to W0 + shared.
        let config = MorConfig {
            d_in: 4,
            d_out: 4,
            score_dim: 2,
            n_shared: 2,
            n_real: 0,
            n_zero: 5,
            top_k: 2,
        };
        let mut rng = SeededRng::new(9);
        let w0 = Matrix::from_fn(4, 4, |_, _| rng.uniform(-1.0, 1.0));
        let mut layer = MorLayer::new(config, w0.clone(), &mut rng).unwrap();
        for (name, t) in layer.tensors_mut() {
            if name == "shared_b" {
                for v in t.as_mut_slice() {
                    *v = 0.5;
                }
            }
        }
        let x = vecn(&mut rng, 4, -1.0, 1.0);
        let (y, routing) = layer.forward(&x, &[0.2, 0.9]).unwrap();
        assert_eq!(routing.zero_active(0), 2);

        // Reference: same shared adapters, no routed pool at all.
        let mut manual = w0.matvec(&x).unwrap();
        for i in 0..2 {
            let c = dot(layer.shared_a.row(i), &x);
            for r in 0..4 {
                manual[r] += c * 0.5;
            }
        }
        for (a, b) in y.iter().zip(&manual) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_dense_equivalent() {
        // Collapse the selected adapters into a dense matrix and compare.
        let (layer, config) = warmed_layer(21);
        let mut rng = SeededRng::new(2);
        for _ in 0..20 {
            let x = vecn(&mut rng, config.d_in, -1.0, 1.0);
            let s = vecn(&mut rng, config.score_dim, 0.0, 1.0);
            let (y, routing) = layer.forward(&x, &s).unwrap();

            let mut dense = layer.w0().clone();
            for i in 0..config.n_shared {
                for r in 0..config.d_out {
                    for c in 0..config.d_in {
                        let add = layer.shared_b.get(r, i) * layer.shared_a.get(i, c);
                        dense.set(r, c, dense.get(r, c) + add);
                    }
                }
            }
            for (&idx, &gate) in routing.selected.iter().zip(&routing.gates) {
                if idx >= config.n_real {
                    continue;
                }
                for r in 0..config.d_out {
                    for c in 0..config.d_in {
                        let add = gate * layer.real_b.get(r, idx) * layer.real_a.get(idx, c);
                        dense.set(r, c, dense.get(r, c) + add);
                    }
                }
            }
            let want = dense.matvec(&x).unwrap();
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    /// Smallest probability gap around the top-k boundary; finite-difference
    /// checks need this comfortably above the probe step.
    fn topk_gap(routing: &RoutingDecision) -> f64 {
        let mut sorted = routing.probs.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let k = routing.selected.len();
        if k == 0 || k == sorted.len() {
            f64::INFINITY
        } else {
            sorted[k - 1] - sorted[k]
        }
    }

    /// Find a (layer, x, s, u) tuple whose routing is stable under small
    /// parameter perturbations.
    fn stable_case(mut seed: u64) -> (MorLayer, Vec<f64>, Vec<f64>, Vec<f64>) {
        loop {
            let (layer, config) = warmed_layer(seed);
            let mut rng = SeededRng::new(seed ^ 0xABCD);
            let x = vecn(&mut rng, config.d_in, -1.0, 1.0);
            let s = vecn(&mut rng, config.score_dim, 0.0, 1.0);
            let u = vecn(&mut rng, config.d_out, -1.0, 1.0);
            let routing = layer.route(&s).unwrap();
            if topk_gap(&routing) > 1e-3 {
                return (layer, x, s, u);
            }
            seed += 1000;
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in [31, 32, 33] {
            let (layer, x, s, u) = stable_case(seed);
            let routing = layer.route(&s).unwrap();
            let grad = layer.backward(&x, &s, &routing, &u, None).unwrap();

            // Loss L = u . forward(x): linear in the output, so dL/dy = u.
            for (name, analytic) in grad.tensors() {
                let base = layer
                    .tensors()
                    .iter()
                    .find(|(n, _)| *n == name)
                    .unwrap()
                    .1
                    .as_slice()
                    .to_vec();
                let f = |theta: &[f64]| {
                    let mut probe = layer.clone();
                    for (pname, t) in probe.tensors_mut() {
                        if pname == name {
                            t.as_mut_slice().copy_from_slice(theta);
                        }
                    }
                    let (y, _) = probe.forward(&x, &s).unwrap();
                    dot(&y, &u)
                };
                let numeric = finite_diff_grad(f, &base, 1e-5);
                let err = max_rel_err(analytic.as_slice(), &numeric, 1e-6);
                assert!(err < 1e-6, "seed {seed} tensor {name}: rel err {err}");
            }

            // Input gradient.
            let f = |xv: &[f64]| {
                let (y, _) = layer.forward(xv, &s).unwrap();
                dot(&y, &u)
            };
            let numeric = finite_diff_grad(f, &x, 1e-5);
            let err = max_rel_err(&grad.d_x, &numeric, 1e-6);
            assert!(err < 1e-6, "seed {seed} d_x: rel err {err}");
        }
    }

    #[test]
    fn balance_gradient_joins_before_softmax_jacobian() {
        let (layer, x, s, u) = stable_case(77);
        let routing = layer.route(&s).unwrap();
        let n = layer.config().n_routed();
        let mut rng = SeededRng::new(99);
        let extra = vecn(&mut rng, n, -0.5, 0.5);

        let grad = layer
            .backward(&x, &s, &routing, &u, Some(&extra))
            .unwrap();

        // FD on a loss that includes the extra probability term:
        // L = u . y + extra . probs.
        let base = layer
            .tensors()
            .iter()
            .find(|(n, _)| *n == "w_g")
            .unwrap()
            .1
            .as_slice()
            .to_vec();
        let f = |theta: &[f64]| {
            let mut probe = layer.clone();
            for (pname, t) in probe.tensors_mut() {
                if pname == "w_g" {
                    t.as_mut_slice().copy_from_slice(theta);
                }
            }
            let (y, routing) = probe.forward(&x, &s).unwrap();
            dot(&y, &u) + dot(&extra, &routing.probs)
        };
        let numeric = finite_diff_grad(f, &base, 1e-5);
        let err = max_rel_err(grad.d_w_g.as_slice(), &numeric, 1e-6);
        assert!(err < 1e-6, "w_g with extra: rel err {err}");
    }

    #[test]
    fn router_gets_no_output_gradient_when_only_zeros_selected() {
        // If every kept expert is a zero expert, the output path cannot
        // influence the router; without a balance term d_w_g must vanish.
        let config = MorConfig {
            d_in: 3,
            d_out: 3,
            score_dim: 2,
            n_shared: 1,
            n_real: 2,
            n_zero: 3,
            top_k: 2,
        };
        let mut rng = SeededRng::new(15);
        let mut layer = MorLayer::new(config, Matrix::identity(3), &mut rng).unwrap();
        // Force logits so that zero experts (indices 2, 3, 4) win.
        for (name, t) in layer.tensors_mut() {
            if name == "w_g" {
                for r in 0..5 {
                    let bias = if r >= 2 { 5.0 } else { -5.0 };
                    t.set(r, 0, bias);
                    t.set(r, 1, bias);
                }
            }
            if name == "real_b" || name == "shared_b" {
                for v in t.as_mut_slice() {
                    *v = 0.7;
                }
            }
        }
        let s = [0.4, 0.6];
        let (_, routing) = layer.forward(&[1.0, -1.0, 0.5], &s).unwrap();
        assert_eq!(routing.zero_active(2), 2);
        let grad = layer
            .backward(&[1.0, -1.0, 0.5], &s, &routing, &[1.0, 1.0, 1.0], None)
            .unwrap();
        assert!(grad.d_w_g.as_slice().iter().all(|&v| v == 0.0));
        // Real adapters saw no selection either.
        assert!(grad.d_real_a.as_slice().iter().all(|&v| v == 0.0));
        // Shared path still carries gradient.
        assert!(grad.d_shared_a.as_slice().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn accumulate_and_scale_combine_batches() {
        let (layer, x, s, u) = stable_case(41);
        let routing = layer.route(&s).unwrap();
        let g1 = layer.backward(&x, &s, &routing, &u, None).unwrap();
        let mut acc = MorBackward::zeros(layer.config());
        acc.accumulate(&g1).unwrap();
        acc.accumulate(&g1).unwrap();
        acc.scale(0.5);
        for ((_, a), (_, b)) in acc.tensors().iter().zip(g1.tensors().iter()) {
            for (av, bv) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((av - bv).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn shape_errors_are_reported() {
        let (layer, _) = warmed_layer(1);
        assert!(layer.route(&[0.1]).is_err());
        assert!(layer.forward(&[0.0; 3], &[0.0; 3]).is_err());
        let routing = layer.route(&[0.1, 0.2, 0.3]).unwrap();
        assert!(layer
            .backward(&[0.0; 5], &[0.1, 0.2, 0.3], &routing, &[0.0; 2], None)
            .is_err());
        assert!(layer
            .backward(
                &[0.0; 5],
                &[0.1, 0.2, 0.3],
                &routing,
                &[0.0; 4],
                Some(&[0.0; 3])
            )
            .is_err());
    }
}
