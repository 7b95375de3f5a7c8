//! Flat `key=value` experiment configuration.
//!
//! Every key has a default; a file may set any subset and command-line
//! overrides are applied on top. The effective configuration is echoed into
//! every output artifact.

use std::fmt::Write as _;
use std::path::Path;

use divrank_core::augmentation::AugmentationConfig;
use divrank_core::corpus::GeneratorConfig;
use divrank_core::nn::transformer::TransformerConfig;
use divrank_core::retrieval::{DbscanConfig, PostProcessConfig};
use divrank_core::scl::{PairFamilies, SclHyper};
use divrank_core::token_classifier::{TtcConfig, TtcHyper};

use crate::error::{io_err, Error, Result};

trait Value: Sized {
    fn parse(s: &str) -> Option<Self>;
    fn render(&self) -> String;
}

impl Value for f64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| v.is_finite())
    }
    fn render(&self) -> String {
        format!("{self}")
    }
}

impl Value for usize {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for u64 {
    fn parse(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for bool {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "true" | "1" | "yes" | "on" => Some(true),
            "false" | "0" | "no" | "off" => Some(false),
            _ => None,
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl Value for Vec<usize> {
    fn parse(s: &str) -> Option<Self> {
        s.split(',').map(|p| p.trim().parse().ok()).collect()
    }
    fn render(&self) -> String {
        self.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! config {
    ($($(#[$doc:meta])* $name:ident : $ty:ty = $default:expr,)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $($(#[$doc])* pub $name: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl ExperimentConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name),)*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    $(stringify!($name) => {
                        self.$name = <$ty as Value>::parse(value).ok_or_else(|| {
                            Error::Config(format!("bad value {value:?} for {}", stringify!($name)))
                        })?;
                    })*
                    other => return Err(Error::Config(format!("unknown key {other:?}"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), Value::render(&self.$name)),)*]
            }
        }
    };
}

config! {
    seed: u64 = 1,

    // synthetic corpus
    queries: usize = 70,
    test_queries: usize = 20,
    dim: usize = 64,
    mean_categories: f64 = 11.8,
    zipf_exponent: f64 = 1.2,
    max_category_size: usize = 16,
    noise_sigma: f64 = 0.15,
    irrelevant_per_query: usize = 24,
    category_pool: usize = 64,
    popularity_exponent: f64 = 1.0,
    background_affinity: f64 = 0.25,

    // contrastive stage
    tau: f64 = 0.2,
    alpha: f64 = 0.01,
    beta: f64 = 0.02,
    /// Reserved; has no effect.
    epsilon: f64 = 0.01,
    ema_swap_convention: bool = false,
    scl_lr: f64 = 1e-5,
    scl_batch: usize = 32,
    scl_epochs: usize = 10,
    /// Re-encoder hidden width; 0 means twice the feature width.
    hidden: usize = 0,
    max_irrelevant: usize = 64,
    prototype_positive: bool = true,
    prototype_negative: bool = true,
    skip_scl: bool = false,

    // token classifier
    ttc_lr: f64 = 1e-4,
    ttc_batch: usize = 32,
    ttc_epochs: usize = 10,
    layers: usize = 8,
    heads: usize = 4,
    /// Feed-forward width; 0 means twice the feature width.
    d_ff: usize = 0,
    seq_len: usize = 200,
    skip_ttc: bool = false,

    // augmentation
    augment: bool = true,
    p_query: f64 = 0.5,
    p_image: f64 = 0.2,
    p_delete: f64 = 0.2,
    p_copy: f64 = 0.2,

    // retrieval and evaluation
    per_category: usize = 1,
    k: usize = 20,
    ks: Vec<usize> = vec![10, 20],
    mmr_lambda: f64 = 0.7,
    mmr_pool: usize = 200,
    dbscan_eps: f64 = 0.4,
    dbscan_min_pts: usize = 3,
    dbscan_sim_threshold: f64 = 0.5,
}

impl ExperimentConfig {
    /// Parses `key=value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Applies `key=value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k, v)
    }

    /// File form, one key per line; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.pairs() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    /// Single-line form used in artifact headers.
    pub fn echo(&self) -> String {
        self.pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map = self
            .pairs()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            queries: self.queries,
            test_queries: self.test_queries,
            dim: self.dim,
            mean_categories: self.mean_categories,
            zipf_exponent: self.zipf_exponent,
            max_category_size: self.max_category_size,
            noise_sigma: self.noise_sigma,
            irrelevant_per_query: self.irrelevant_per_query,
            category_pool: (self.category_pool > 0).then_some(self.category_pool),
            popularity_exponent: self.popularity_exponent,
            background_affinity: self.background_affinity,
            forced_sizes: None,
        }
    }

    pub fn scl_hyper(&self) -> SclHyper {
        SclHyper {
            tau: self.tau,
            alpha: self.alpha,
            lr: self.scl_lr,
            batch: self.scl_batch,
            epochs: self.scl_epochs,
            max_irrelevant: self.max_irrelevant,
            pairs: PairFamilies {
                prototype_positive: self.prototype_positive,
                prototype_negative: self.prototype_negative,
            },
            ema_swap_convention: self.ema_swap_convention,
            epsilon: self.epsilon,
        }
    }

    pub fn hidden_width(&self, dim: usize) -> usize {
        if self.hidden == 0 {
            2 * dim
        } else {
            self.hidden
        }
    }

    pub fn ttc_config(&self, dim: usize) -> TtcConfig {
        let d_ff = if self.d_ff == 0 { 2 * dim } else { self.d_ff };
        TtcConfig {
            transformer: TransformerConfig::new(dim, self.heads, self.layers, d_ff),
            seq_len: self.seq_len,
        }
    }

    pub fn ttc_hyper(&self) -> TtcHyper {
        TtcHyper {
            lr: self.ttc_lr,
            batch: self.ttc_batch,
            epochs: self.ttc_epochs,
        }
    }

    pub fn augmentation(&self) -> AugmentationConfig {
        AugmentationConfig {
            p_query: self.p_query,
            p_image: self.p_image,
            p_delete: self.p_delete,
            p_copy: self.p_copy,
            enabled: self.augment,
        }
    }

    pub fn post_process(&self) -> PostProcessConfig {
        PostProcessConfig {
            per_category: self.per_category,
            k: self.k,
        }
    }

    pub fn dbscan(&self) -> DbscanConfig {
        DbscanConfig {
            eps: self.dbscan_eps,
            min_pts: self.dbscan_min_pts,
            sim_threshold: self.dbscan_sim_threshold,
        }
    }

    /// Checks every range owned by the core modules.
    pub fn validate(&self) -> Result<()> {
        self.generator().validate()?;
        self.scl_hyper().validate()?;
        self.augmentation().validate()?;
        self.post_process().validate()?;
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        if self.ttc_lr <= 0.0 || self.ttc_batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("ttc_lr, ttc_batch and seq_len must be positive".into()));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a nonempty list of positive cutoffs".into()));
        }
        if !(0.0..=1.0).contains(&self.mmr_lambda) || self.mmr_pool == 0 {
            return Err(Error::Config("mmr_lambda must lie in [0, 1] and mmr_pool be positive".into()));
        }
        if !(self.dbscan_eps > 0.0) || self.dbscan_min_pts == 0 {
            return Err(Error::Config("dbscan_eps and dbscan_min_pts must be positive".into()));
        }
        Ok(())
    }
}
