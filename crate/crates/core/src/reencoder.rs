//! Residual visual-feature re-encoder: `ĥ = h + β·g(h)` where `g` is a
//! one-hidden-layer GELU MLP.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::nn::{gelu, gelu_backward, linear_backward, linear_forward, Matrix, ParamStore, RngStream};

pub const W1: &str = "g.w1";
pub const B1: &str = "g.b1";
pub const W2: &str = "g.w2";
pub const B2: &str = "g.b2";

#[derive(Debug, Clone, PartialEq)]
pub struct ReEncoderModel {
    pub params: ParamStore,
    beta: f64,
    dim: usize,
    hidden: usize,
}

/// Activations from [`ReEncoderModel::forward`], consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ReEncoderCache {
    input: Matrix,
    pre: Matrix,
    act: Matrix,
}

/// `h + β·correction`
pub fn residual_update(h: &[f64], correction: &[f64], beta: f64) -> Vec<f64> {
    h.iter().zip(correction).map(|(a, c)| a + beta * c).collect()
}

impl ReEncoderModel {
    /// Fresh model with normal(0, 1/fan_in) weights and zero biases.
    pub fn new(dim: usize, hidden: usize, beta: f64, rng: &mut RngStream) -> Result<Self> {
        let mut m = Self::zeros(dim, hidden, beta)?;
        for (name, fan_in) in [(W1, dim), (W2, hidden)] {
            let w = m.params.get_mut(name)?;
            let std = 1.0 / libm::sqrt(fan_in as f64);
            w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        }
        Ok(m)
    }

    /// All-zero MLP: the re-encoding is the identity for any β.
    pub fn zeros(dim: usize, hidden: usize, beta: f64) -> Result<Self> {
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and non-negative, got {beta}")));
        }
        if dim == 0 || hidden == 0 {
            return Err(Error::Config("re-encoder dimensions must be positive".into()));
        }
        let mut params = ParamStore::new();
        params.insert(W1, Matrix::zeros(dim, hidden))?;
        params.insert(B1, Matrix::zeros(1, hidden))?;
        params.insert(W2, Matrix::zeros(hidden, dim))?;
        params.insert(B2, Matrix::zeros(1, dim))?;
        Ok(Self {
            params,
            beta,
            dim,
            hidden,
        })
    }

    /// Rebuilds a model from stored parameters, checking shapes.
    pub fn from_params(params: ParamStore, beta: f64) -> Result<Self> {
        let w1 = params.get(W1)?.shape();
        let w2 = params.get(W2)?.shape();
        let (dim, hidden) = w1;
        if w2 != (hidden, dim)
            || params.get(B1)?.shape() != (1, hidden)
            || params.get(B2)?.shape() != (1, dim)
        {
            return Err(contract("ReEncoderModel::from_params", "inconsistent MLP shapes"));
        }
        let mut m = Self::zeros(dim, hidden, beta)?;
        m.params = params;
        Ok(m)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// `g(h)` for every row.
    pub fn correction(&self, h: &Matrix) -> Result<Matrix> {
        self.forward(h).map(|(g, _)| g)
    }

    /// Returns `g(h)` (not the re-encoded feature) and the cache for backprop.
    pub fn forward(&self, h: &Matrix) -> Result<(Matrix, ReEncoderCache)> {
        if h.cols() != self.dim {
            return Err(contract(
                "reencode",
                format!("feature dimension {} vs model dimension {}", h.cols(), self.dim),
            ));
        }
        let pre = linear_forward(h, self.params.get(W1)?, self.params.get(B1)?.data())?;
        let act = gelu(&pre);
        let g = linear_forward(&act, self.params.get(W2)?, self.params.get(B2)?.data())?;
        Ok((
            g,
            ReEncoderCache {
                input: h.clone(),
                pre,
                act,
            },
        ))
    }

    /// Re-encodes every row of `h`.
    pub fn reencode_batch(&self, h: &Matrix) -> Result<Matrix> {
        let mut out = self.correction(h)?;
        out.scale(self.beta);
        out.add_assign(h)?;
        Ok(out)
    }

    pub fn reencode(&self, h: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reencode_batch(&Matrix::row_vector(h))?.into_vec())
    }

    /// Accumulates parameter gradients given `∂L/∂ĥ` for the batch in `cache`.
    /// The identity path of the residual carries no parameters.
    pub fn backward(&mut self, cache: &ReEncoderCache, d_reencoded: &Matrix) -> Result<()> {
        let mut d_g = d_reencoded.clone();
        d_g.scale(self.beta);
        let w2 = self.params.get(W2)?.clone();
        let g2 = linear_backward(&cache.act, &w2, &d_g)?;
        let d_pre = gelu_backward(&cache.pre, &g2.dx);
        let w1 = self.params.get(W1)?.clone();
        let g1 = linear_backward(&cache.input, &w1, &d_pre)?;
        self.params.accumulate(W2, &g2.dw)?;
        self.params.accumulate(B2, &g2.db)?;
        self.params.accumulate(W1, &g1.dw)?;
        self.params.accumulate(B1, &g1.db)?;
        Ok(())
    }
}
