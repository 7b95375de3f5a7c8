//! Training, retrieval, evaluation and ablation sweeps over a corpus.

use std::str::FromStr;

use divrank_core::corpus::{EmbeddingCorpus, QueryRecord, Split};
use divrank_core::metrics::{evaluate_run, RunMetrics};
use divrank_core::nn::RngStream;
use divrank_core::reencoder::ReEncoderModel;
use divrank_core::retrieval::{retrieve_cluster, retrieve_colt, retrieve_mmr, retrieve_topk, RankedList, Strategy};
use divrank_core::scl::{train_reencoder, CategoryMap, PrototypeBank};
use divrank_core::token_classifier::{train_ttc, LabelSpace, TokenClassifierModel};
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "DIVRANK_THREADS";

/// Worker count: the flag (or all cores), capped by `DIVRANK_THREADS`.
pub fn worker_count(flag: Option<usize>) -> usize {
    let base = flag
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    cap.map_or(base, |c| base.min(c)).max(1)
}

/// Runs `f` on a pool of `threads` workers.
pub fn with_workers<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Contrastive stage. With `skip_scl` the re-encoder is the identity
/// (`β = 0`) and the bank keeps its description-initialised rows.
pub fn train_scl_stage(corpus: &EmbeddingCorpus, cfg: &ExperimentConfig) -> Result<(ReEncoderModel, PrototypeBank, usize)> {
    let d = corpus.dim();
    let hidden = cfg.hidden_width(d);
    let bank = PrototypeBank::init_bank(corpus.descriptors())?;
    if cfg.skip_scl {
        return Ok((ReEncoderModel::zeros(d, hidden, 0.0)?, bank, 0));
    }
    let mut rng = RngStream::new(cfg.seed, "scl");
    let model = ReEncoderModel::new(d, hidden, cfg.beta, &mut rng)?;
    let map = CategoryMap::from_corpus(corpus);
    let mut out = train_reencoder(corpus, model, bank, &map, &cfg.scl_hyper(), &mut rng)?;
    out.model.params.zero_grads();
    Ok((out.model, out.bank, out.steps))
}

/// Classifier stage on top of a frozen re-encoder; `None` with `skip_ttc`.
pub fn train_ttc_stage(
    corpus: &EmbeddingCorpus,
    reencoder: &ReEncoderModel,
    cfg: &ExperimentConfig,
) -> Result<Option<(TokenClassifierModel, usize)>> {
    if cfg.skip_ttc {
        return Ok(None);
    }
    let labels = LabelSpace::new(corpus.descriptors().iter().map(|d| d.category_id).collect())?;
    let mut rng = RngStream::new(cfg.seed, "ttc");
    let model = TokenClassifierModel::new(cfg.ttc_config(corpus.dim()), labels, &mut rng)?;
    let mut out = train_ttc(corpus, reencoder, model, &cfg.augmentation(), &cfg.ttc_hyper(), &mut rng)?;
    out.model.params.zero_grads();
    Ok(Some((out.model, out.steps)))
}

/// Both stages in order.
pub fn train(corpus: &EmbeddingCorpus, cfg: &ExperimentConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let (reencoder, bank, scl_steps) = train_scl_stage(corpus, cfg)?;
    let ttc = train_ttc_stage(corpus, &reencoder, cfg)?;
    let mut rng_streams = Vec::new();
    if !cfg.skip_scl {
        rng_streams.push("scl".to_string());
    }
    if ttc.is_some() {
        rng_streams.push("ttc".to_string());
    }
    let (ttc, ttc_steps) = match ttc {
        Some((m, s)) => (Some(m), s),
        None => (None, 0),
    };
    Ok(Checkpoint {
        config: cfg.clone(),
        reencoder,
        bank,
        ttc,
        scl_steps,
        ttc_steps,
        rng_streams,
    })
}

fn retrieve_one(
    q: &QueryRecord,
    corpus: &EmbeddingCorpus,
    ckpt: Option<&Checkpoint>,
    strategy: Strategy,
    cfg: &ExperimentConfig,
) -> Result<RankedList> {
    let reencoder = ckpt.map(|c| &c.reencoder);
    Ok(match strategy {
        Strategy::Colt => {
            let ckpt = ckpt.ok_or_else(|| Error::Config("strategy colt needs a checkpoint".into()))?;
            let ttc = ckpt
                .ttc
                .as_ref()
                .ok_or_else(|| Error::Config("checkpoint has no token classifier (trained with skip_ttc)".into()))?;
            retrieve_colt(q, corpus, &ckpt.reencoder, ttc, &cfg.post_process())?
        }
        Strategy::TopK => retrieve_topk(q, corpus, cfg.k, reencoder)?,
        Strategy::Mmr => retrieve_mmr(q, corpus, cfg.k, cfg.mmr_lambda, cfg.mmr_pool, reencoder)?,
        Strategy::Dbscan => retrieve_cluster(q, corpus, cfg.k, &cfg.dbscan(), reencoder)?,
    })
}

/// One list per query of `split` (all queries when `None`), in corpus order.
pub fn retrieve(
    corpus: &EmbeddingCorpus,
    ckpt: Option<&Checkpoint>,
    strategy: Strategy,
    cfg: &ExperimentConfig,
    split: Option<Split>,
    threads: usize,
) -> Result<Vec<RankedList>> {
    cfg.post_process().validate()?;
    let queries: Vec<&QueryRecord> = corpus
        .queries()
        .iter()
        .filter(|q| split.is_none_or(|s| q.split == s))
        .collect();
    with_workers(threads, || {
        queries
            .par_iter()
            .map(|q| retrieve_one(q, corpus, ckpt, strategy, cfg))
            .collect::<Result<Vec<_>>>()
    })?
}

pub fn evaluate(lists: &[RankedList], corpus: &EmbeddingCorpus, ks: &[usize]) -> Result<RunMetrics> {
    Ok(evaluate_run(lists, corpus, ks)?)
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Images per category in post-processing.
    PerCategory,
    /// Transformer depth.
    Layers,
    /// Tokens per sequence.
    SeqLen,
    /// Prototype pair families in the contrastive loss.
    Pairs,
    /// Token augmentation on/off.
    Augment,
    /// Contrastive stage on/off.
    Scl,
}

impl Axis {
    pub fn as_str(&self) -> &'static str {
        match self {
            Axis::PerCategory => "X",
            Axis::Layers => "L",
            Axis::SeqLen => "N",
            Axis::Pairs => "pairs",
            Axis::Augment => "da",
            Axis::Scl => "scl",
        }
    }

    /// Applies one sweep value to a copy of `base`.
    pub fn apply(&self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            Axis::PerCategory => cfg.set("per_category", value)?,
            Axis::Layers => cfg.set("layers", value)?,
            Axis::SeqLen => cfg.set("seq_len", value)?,
            Axis::Augment => cfg.set("augment", value)?,
            Axis::Scl => {
                // the value says whether the stage runs
                cfg.set("skip_scl", value)?;
                cfg.skip_scl = !cfg.skip_scl;
            }
            Axis::Pairs => {
                let (pos, neg) = match value {
                    "both" => (true, true),
                    "no-positive" => (false, true),
                    "no-negative" => (true, false),
                    "none" => (false, false),
                    other => {
                        return Err(Error::Config(format!(
                            "pairs value {other:?}; expected both, no-positive, no-negative or none"
                        )))
                    }
                };
                cfg.prototype_positive = pos;
                cfg.prototype_negative = neg;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn retrains_scl(&self) -> bool {
        matches!(self, Axis::Pairs | Axis::Scl)
    }

    fn retrains_ttc(&self) -> bool {
        !matches!(self, Axis::PerCategory)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "X" | "x" => Axis::PerCategory,
            "L" | "l" => Axis::Layers,
            "N" | "n" => Axis::SeqLen,
            "pairs" => Axis::Pairs,
            "da" => Axis::Augment,
            "scl" => Axis::Scl,
            other => return Err(Error::Config(format!("unknown axis {other:?}; expected X, L, N, pairs, da or scl"))),
        })
    }
}

/// Sweeps one axis, retraining only the stages the axis touches, and scores
/// CoLT lists on the test split.
pub fn ablate(
    corpus: &EmbeddingCorpus,
    base: &ExperimentConfig,
    axis: Axis,
    values: &[String],
    threads: usize,
) -> Result<Vec<(String, RunMetrics)>> {
    base.validate()?;
    let configs: Vec<ExperimentConfig> = values.iter().map(|v| axis.apply(base, v)).collect::<Result<_>>()?;
    let shared_scl = if axis.retrains_scl() { None } else { Some(train_scl_stage(corpus, base)?) };
    let shared_ttc = match (&shared_scl, axis.retrains_ttc()) {
        (Some((re, _, _)), false) => train_ttc_stage(corpus, re, base)?,
        _ => None,
    };
    let mut rows = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(&configs) {
        let (reencoder, bank, scl_steps) = match &shared_scl {
            Some(s) => s.clone(),
            None => train_scl_stage(corpus, cfg)?,
        };
        let ttc = match &shared_ttc {
            Some(t) => Some(t.clone()),
            None => train_ttc_stage(corpus, &reencoder, cfg)?,
        };
        let (ttc, ttc_steps) = match ttc {
            Some((m, s)) => (Some(m), s),
            None => (None, 0),
        };
        let ckpt = Checkpoint {
            config: cfg.clone(),
            reencoder,
            bank,
            ttc,
            scl_steps,
            ttc_steps,
            rng_streams: Vec::new(),
        };
        let lists = retrieve(corpus, Some(&ckpt), Strategy::Colt, cfg, Some(Split::Test), threads)?;
        rows.push((value.clone(), evaluate(&lists, corpus, &cfg.ks)?));
    }
    Ok(rows)
}
