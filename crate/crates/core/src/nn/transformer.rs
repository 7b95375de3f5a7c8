//! Pre-normalization transformer encoder with hand-written backward pass.
//!
//! Each layer computes
//!
//! ```text
//! x1 = x0 + MHA(LN1(x0))
//! x2 = x1 + W2·gelu(W1·LN2(x1))
//! ```
//!
//! No positional encoding is added, so the encoder is equivariant under any
//! permutation of its input rows.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::layers::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, softmax_in_place, LayerNormCache,
};
use super::{Matrix, ParamStore, RngStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub ln_eps: f64,
}

impl TransformerConfig {
    pub fn new(d_model: usize, heads: usize, layers: usize, d_ff: usize) -> Self {
        Self {
            d_model,
            heads,
            layers,
            d_ff,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by head count {}",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if self.d_ff == 0 {
            return Err(Error::Config("feed-forward width must be positive".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

fn pname(prefix: &str, layer: usize, part: &str) -> String {
    format!("{prefix}.{layer}.{part}")
}

fn normal_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    m.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
    m
}

/// Registers encoder parameters under `prefix` with scaled normal initialization.
pub fn init_encoder(
    params: &mut ParamStore,
    cfg: &TransformerConfig,
    prefix: &str,
    rng: &mut RngStream,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let std_in = 1.0 / libm::sqrt(d as f64);
    let depth_scale = 1.0 / libm::sqrt(2.0 * cfg.layers as f64);
    for l in 0..cfg.layers {
        let mut ones = Matrix::zeros(1, d);
        ones.fill(1.0);
        params.insert(&pname(prefix, l, "ln1.g"), ones.clone())?;
        params.insert(&pname(prefix, l, "ln1.b"), Matrix::zeros(1, d))?;
        for w in ["wq", "wk", "wv"] {
            params.insert(&pname(prefix, l, w), normal_matrix(d, d, std_in, rng))?;
        }
        for b in ["bq", "bk", "bv"] {
            params.insert(&pname(prefix, l, b), Matrix::zeros(1, d))?;
        }
        params.insert(
            &pname(prefix, l, "wo"),
            normal_matrix(d, d, std_in * depth_scale, rng),
        )?;
        params.insert(&pname(prefix, l, "bo"), Matrix::zeros(1, d))?;
        params.insert(&pname(prefix, l, "ln2.g"), ones)?;
        params.insert(&pname(prefix, l, "ln2.b"), Matrix::zeros(1, d))?;
        params.insert(&pname(prefix, l, "w1"), normal_matrix(d, cfg.d_ff, std_in, rng))?;
        params.insert(&pname(prefix, l, "b1"), Matrix::zeros(1, cfg.d_ff))?;
        params.insert(
            &pname(prefix, l, "w2"),
            normal_matrix(
                cfg.d_ff,
                d,
                depth_scale / libm::sqrt(cfg.d_ff as f64),
                rng,
            ),
        )?;
        params.insert(&pname(prefix, l, "b2"), Matrix::zeros(1, d))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: LayerNormCache,
    normed1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    // one (n x n) attention matrix per head
    attn: Vec<Matrix>,
    mixed: Matrix,
    ln2: LayerNormCache,
    normed2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
}

/// Activations retained by [`encoder_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    prefix: String,
    cfg: TransformerConfig,
    layers: Vec<LayerCache>,
}

fn attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &TransformerConfig,
) -> Result<(Matrix, Vec<Matrix>)> {
    let n = q.rows();
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut mixed = Matrix::zeros(n, cfg.d_model);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = q.column_block(h * dh, dh);
        let kh = k.column_block(h * dh, dh);
        let vh = v.column_block(h * dh, dh);
        let mut scores = qh.matmul_t(&kh)?;
        scores.scale(scale);
        for i in 0..n {
            softmax_in_place(scores.row_mut(i));
        }
        let out = scores.matmul(&vh)?;
        mixed.add_column_block(h * dh, &out);
        attn.push(scores);
    }
    Ok((mixed, attn))
}

/// Runs all encoder layers and keeps the activations needed for backprop.
pub fn encoder_forward(
    tokens: &Matrix,
    params: &ParamStore,
    cfg: &TransformerConfig,
    prefix: &str,
) -> Result<(Matrix, EncoderCache)> {
    cfg.validate()?;
    if tokens.cols() != cfg.d_model {
        return Err(crate::error::shape(
            "encoder_forward",
            format!("token width {} vs model width {}", tokens.cols(), cfg.d_model),
        ));
    }
    let mut x = tokens.clone();
    let mut caches = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |part: &str| params.get(&pname(prefix, l, part));
        let (normed1, ln1) =
            layer_norm_forward(&x, p("ln1.g")?.data(), p("ln1.b")?.data(), cfg.ln_eps)?;
        let q = linear_forward(&normed1, p("wq")?, p("bq")?.data())?;
        let k = linear_forward(&normed1, p("wk")?, p("bk")?.data())?;
        let v = linear_forward(&normed1, p("wv")?, p("bv")?.data())?;
        let (mixed, attn) = attention_forward(&q, &k, &v, cfg)?;
        let attn_out = linear_forward(&mixed, p("wo")?, p("bo")?.data())?;
        x.add_assign(&attn_out)?;

        let (normed2, ln2) =
            layer_norm_forward(&x, p("ln2.g")?.data(), p("ln2.b")?.data(), cfg.ln_eps)?;
        let ff_pre = linear_forward(&normed2, p("w1")?, p("b1")?.data())?;
        let ff_act = gelu(&ff_pre);
        let ff_out = linear_forward(&ff_act, p("w2")?, p("b2")?.data())?;
        x.add_assign(&ff_out)?;

        caches.push(LayerCache {
            ln1,
            normed1,
            q,
            k,
            v,
            attn,
            mixed,
            ln2,
            normed2,
            ff_pre,
            ff_act,
        });
    }
    Ok((
        x,
        EncoderCache {
            prefix: String::from(prefix),
            cfg: *cfg,
            layers: caches,
        },
    ))
}

/// Accumulates parameter gradients into `params` and returns the gradient
/// with respect to the input tokens.
pub fn encoder_backward(
    cache: &EncoderCache,
    d_out: &Matrix,
    params: &mut ParamStore,
) -> Result<Matrix> {
    let cfg = &cache.cfg;
    let prefix = cache.prefix.as_str();
    let dh = cfg.head_dim();
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dx = d_out.clone();

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        // feed-forward branch
        let w2 = params.get(&pname(prefix, l, "w2"))?.clone();
        let g2 = linear_backward(&lc.ff_act, &w2, &dx)?;
        params.accumulate(&pname(prefix, l, "w2"), &g2.dw)?;
        params.accumulate(&pname(prefix, l, "b2"), &g2.db)?;
        let d_pre = gelu_backward(&lc.ff_pre, &g2.dx);
        let w1 = params.get(&pname(prefix, l, "w1"))?.clone();
        let g1 = linear_backward(&lc.normed2, &w1, &d_pre)?;
        params.accumulate(&pname(prefix, l, "w1"), &g1.dw)?;
        params.accumulate(&pname(prefix, l, "b1"), &g1.db)?;
        let gain2 = params.get(&pname(prefix, l, "ln2.g"))?.clone();
        let (d_resid, dg, db) = layer_norm_backward(&lc.ln2, gain2.data(), &g1.dx)?;
        params.accumulate(&pname(prefix, l, "ln2.g"), &dg)?;
        params.accumulate(&pname(prefix, l, "ln2.b"), &db)?;
        dx.add_assign(&d_resid)?;

        // attention branch
        let wo = params.get(&pname(prefix, l, "wo"))?.clone();
        let go = linear_backward(&lc.mixed, &wo, &dx)?;
        params.accumulate(&pname(prefix, l, "wo"), &go.dw)?;
        params.accumulate(&pname(prefix, l, "bo"), &go.db)?;

        let n = lc.q.rows();
        let mut dq = Matrix::zeros(n, cfg.d_model);
        let mut dk = Matrix::zeros(n, cfg.d_model);
        let mut dv = Matrix::zeros(n, cfg.d_model);
        for (h, probs) in lc.attn.iter().enumerate() {
            let d_head = go.dx.column_block(h * dh, dh);
            let qh = lc.q.column_block(h * dh, dh);
            let kh = lc.k.column_block(h * dh, dh);
            let vh = lc.v.column_block(h * dh, dh);
            dv.add_column_block(h * dh, &probs.t_matmul(&d_head)?);
            let d_probs = d_head.matmul_t(&vh)?;
            let mut d_scores = Matrix::zeros(n, n);
            for i in 0..n {
                let p = probs.row(i);
                let dp = d_probs.row(i);
                let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
                for (j, ds) in d_scores.row_mut(i).iter_mut().enumerate() {
                    *ds = p[j] * (dp[j] - inner) * scale;
                }
            }
            dq.add_column_block(h * dh, &d_scores.matmul(&kh)?);
            dk.add_column_block(h * dh, &d_scores.t_matmul(&qh)?);
        }

        let mut d_normed1 = Matrix::zeros(n, cfg.d_model);
        for (w, b, grad) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
            let wm = params.get(&pname(prefix, l, w))?.clone();
            let g = linear_backward(&lc.normed1, &wm, grad)?;
            params.accumulate(&pname(prefix, l, w), &g.dw)?;
            params.accumulate(&pname(prefix, l, b), &g.db)?;
            d_normed1.add_assign(&g.dx)?;
        }
        let gain1 = params.get(&pname(prefix, l, "ln1.g"))?.clone();
        let (d_resid, dg, db) = layer_norm_backward(&lc.ln1, gain1.data(), &d_normed1)?;
        params.accumulate(&pname(prefix, l, "ln1.g"), &dg)?;
        params.accumulate(&pname(prefix, l, "ln1.b"), &db)?;
        dx.add_assign(&d_resid)?;
    }
    Ok(dx)
}

/// Prefix used by [`transformer_encoder_forward`].
pub const DEFAULT_PREFIX: &str = "enc";

/// Forward pass over parameters registered under [`DEFAULT_PREFIX`]; the
/// feed-forward width is read from the stored weights.
pub fn transformer_encoder_forward(
    tokens: &Matrix,
    params: &ParamStore,
    layers: usize,
    heads: usize,
) -> Result<Matrix> {
    let d_ff = params
        .get(&pname(DEFAULT_PREFIX, 0, "w1"))
        .map(|w| w.cols())
        .unwrap_or(0);
    let cfg = TransformerConfig::new(tokens.cols(), heads, layers, d_ff);
    cfg.validate()?;
    encoder_forward(tokens, params, &cfg, DEFAULT_PREFIX).map(|(y, _)| y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(d: usize, heads: usize, layers: usize, seed: u64) -> (ParamStore, TransformerConfig) {
        let cfg = TransformerConfig::new(d, heads, layers, 2 * d);
        let mut p = ParamStore::new();
        init_encoder(&mut p, &cfg, DEFAULT_PREFIX, &mut RngStream::new(seed, "t")).unwrap();
        (p, cfg)
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed, "tok");
        let mut m = Matrix::zeros(n, d);
        m.data_mut().iter_mut().for_each(|v| *v = rng.normal());
        m
    }

    #[test]
    fn zero_projections_are_identity() {
        let (mut p, cfg) = setup(8, 2, 2, 1);
        let names: Vec<String> = p.names().map(String::from).collect();
        for name in names {
            let is_proj = ["wq", "wk", "wv", "wo", "bo", "w1", "b1", "w2", "b2"]
                .iter()
                .any(|s| name.ends_with(s));
            if is_proj {
                let shape = p.get(&name).unwrap().shape();
                p.set(&name, Matrix::zeros(shape.0, shape.1)).unwrap();
            }
        }
        let x = tokens(5, 8, 2);
        let y = transformer_encoder_forward(&x, &p, cfg.layers, cfg.heads).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn rows_permute_with_input() {
        let (p, cfg) = setup(8, 4, 2, 3);
        let x = tokens(6, 8, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let y = transformer_encoder_forward(&x, &p, cfg.layers, cfg.heads).unwrap();
        let yp = transformer_encoder_forward(&x.select_rows(&perm), &p, cfg.layers, cfg.heads)
            .unwrap();
        assert!(y.select_rows(&perm).max_abs_diff(&yp) <= 1e-9);
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let cfg = TransformerConfig::new(10, 4, 1, 8);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = TransformerConfig::new(8, 2, 0, 8);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn backward_matches_finite_differences_on_inputs() {
        let (mut p, cfg) = setup(8, 2, 2, 9);
        let x = tokens(4, 8, 10);
        let weights = tokens(4, 8, 11);
        let objective = |x: &Matrix, p: &ParamStore| {
            let (y, _) = encoder_forward(x, p, &cfg, DEFAULT_PREFIX).unwrap();
            y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = encoder_forward(&x, &p, &cfg, DEFAULT_PREFIX).unwrap();
        let dx = encoder_backward(&cache, &weights, &mut p).unwrap();
        let h = 1e-5;
        for idx in [0usize, 7, 13, 31] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp, &p) - objective(&xm, &p)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6, "{fd} vs {}", dx.data()[idx]);
        }
    }
}
