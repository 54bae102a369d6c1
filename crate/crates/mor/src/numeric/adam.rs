use crate::error::{Error, Result};

/// Per-tensor Adam optimizer state (first/second moment estimates and step
/// count), with bias correction.
///
/// The step count is stored rather than running powers of the betas so that a
/// checkpointed state resumes bit-exactly: correction factors are recomputed
/// as `beta^t` each step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(m: Vec<f64>, v: Vec<f64>, t: u64) -> Result<Self> {
        if m.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "AdamState::from_parts",
                left: format!("m len {}", m.len()),
                right: format!("v len {}", v.len()),
            });
        }
        Ok(AdamState { m, v, t })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update in place:
    ///
    /// ```text
    /// m <- b1 m + (1 - b1) g        mhat = m / (1 - b1^t)
    /// v <- b2 v + (1 - b2) g^2      vhat = v / (1 - b2^t)
    /// p <- p - lr * mhat / (sqrt(vhat) + eps)
    /// ```
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "AdamState::step",
                left: format!("state len {}", self.m.len()),
                right: format!("params len {}, grads len {}", params.len(), grads.len()),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to Adam"));
        }
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}
