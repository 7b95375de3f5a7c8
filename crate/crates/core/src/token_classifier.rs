//! Token classification over `[query, top-N candidates]`.
//!
//! Every token is labelled with a global category, `IRRELEVANT`, or (for the
//! query row only) `QUERY`. The classifier is a transformer encoder followed
//! by a per-token linear head.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::augmentation::{augment_sequence, AugmentationConfig};
use crate::corpus::{cosine_similarity, CategoryId, EmbeddingCorpus, ImageId, QueryId, QueryRecord, Split};
use crate::error::{contract, Error, Result};
use crate::nn::{
    encoder_backward, encoder_forward, init_encoder, layer_norm_backward, layer_norm_forward,
    linear_backward, linear_forward, LayerNormCache,
    softmax_cross_entropy, softmax_in_place, Adam, AdamConfig, EncoderCache, Matrix, ParamStore,
    RngStream, TransformerConfig,
};
use crate::reencoder::ReEncoderModel;
use crate::scl::CategoryMap;

const ENCODER_PREFIX: &str = "ttc";
pub const HEAD_W: &str = "head.w";
pub const HEAD_B: &str = "head.b";
pub const HEAD_LN_G: &str = "head.ln.g";
pub const HEAD_LN_B: &str = "head.ln.b";

/// Classes `0..M` are categories (in bank order), then `IRRELEVANT = M`,
/// `QUERY = M + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    category_ids: Vec<CategoryId>,
}

impl LabelSpace {
    pub fn new(category_ids: Vec<CategoryId>) -> Result<Self> {
        if category_ids.is_empty() {
            return Err(contract("LabelSpace", "no categories"));
        }
        let mut sorted = category_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != category_ids.len() {
            return Err(contract("LabelSpace", "duplicate category ids"));
        }
        Ok(Self { category_ids })
    }

    pub fn num_categories(&self) -> usize {
        self.category_ids.len()
    }

    pub fn num_classes(&self) -> usize {
        self.category_ids.len() + 2
    }

    pub fn irrelevant(&self) -> usize {
        self.category_ids.len()
    }

    pub fn query(&self) -> usize {
        self.category_ids.len() + 1
    }

    pub fn category_ids(&self) -> &[CategoryId] {
        &self.category_ids
    }

    pub fn class_of(&self, category: CategoryId) -> Option<usize> {
        self.category_ids.iter().position(|c| *c == category)
    }

    /// The category of a class, or `None` for the two special classes.
    pub fn category_of(&self, class: usize) -> Option<CategoryId> {
        self.category_ids.get(class).copied()
    }

    pub fn is_category(&self, class: usize) -> bool {
        class < self.category_ids.len()
    }
}

/// Row 0 is the query; rows `1..=N` are candidates in non-increasing
/// similarity order followed by zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub query_id: QueryId,
    pub tokens: Matrix,
    /// One entry per image row; `None` marks padding.
    pub image_ids: Vec<Option<ImageId>>,
    /// Cosine similarity of each image row to the query; `-inf` for padding.
    pub similarities: Vec<f64>,
    /// `N + 1` class labels, present in training mode.
    pub labels: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn image_rows(&self) -> usize {
        self.image_ids.len()
    }
}

/// Sorts candidates by cosine similarity to the query (ties: lower id), keeps
/// the first `n`, prepends the query and pads to `n` image rows.
pub fn build_sequence(
    query_id: QueryId,
    query: &[f64],
    ids: &[ImageId],
    features: &Matrix,
    n: usize,
    labels: Option<(&CategoryMap, &LabelSpace)>,
) -> Result<TokenSequence> {
    if ids.is_empty() {
        return Err(contract("build_sequence", "no candidates"));
    }
    if ids.len() != features.rows() || features.cols() != query.len() {
        return Err(crate::error::shape("build_sequence", "candidate ids, features and query disagree"));
    }
    if n == 0 {
        return Err(contract("build_sequence", "sequence budget must be positive"));
    }
    let sims = (0..ids.len())
        .map(|i| cosine_similarity(query, features.row(i)))
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(n);

    let d = query.len();
    let mut tokens = Matrix::zeros(n + 1, d);
    tokens.row_mut(0).copy_from_slice(query);
    let mut image_ids = vec![None; n];
    let mut similarities = vec![f64::NEG_INFINITY; n];
    for (slot, &i) in order.iter().enumerate() {
        tokens.row_mut(slot + 1).copy_from_slice(features.row(i));
        image_ids[slot] = Some(ids[i]);
        similarities[slot] = sims[i];
    }
    let labels = match labels {
        None => None,
        Some((map, space)) => {
            let mut l = Vec::with_capacity(n + 1);
            l.push(space.query());
            for id in &image_ids {
                let class = match id.and_then(|id| map.get(id)) {
                    Some(c) => space.class_of(c).ok_or_else(|| {
                        contract("build_sequence", format!("category {c} missing from label space"))
                    })?,
                    None => space.irrelevant(),
                };
                l.push(class);
            }
            Some(l)
        }
    };
    Ok(TokenSequence {
        query_id,
        tokens,
        image_ids,
        similarities,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtcConfig {
    pub transformer: TransformerConfig,
    /// Image tokens per sequence (N).
    pub seq_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenClassifierModel {
    pub config: TtcConfig,
    pub params: ParamStore,
    pub labels: LabelSpace,
}

/// Intermediate results of a forward pass.
#[derive(Debug, Clone)]
pub struct TtcForward {
    pub logits: Matrix,
    normed: Matrix,
    ln: LayerNormCache,
    cache: EncoderCache,
}

impl TokenClassifierModel {
    pub fn new(config: TtcConfig, labels: LabelSpace, rng: &mut RngStream) -> Result<Self> {
        config.transformer.validate()?;
        if config.seq_len == 0 {
            return Err(Error::Config("sequence length must be positive".into()));
        }
        let mut params = ParamStore::new();
        init_encoder(&mut params, &config.transformer, ENCODER_PREFIX, rng)?;
        let d = config.transformer.d_model;
        let c = labels.num_classes();
        let std = 1.0 / libm::sqrt(d as f64);
        let mut w = Matrix::zeros(d, c);
        w.data_mut().iter_mut().for_each(|v| *v = std * rng.normal());
        let mut ones = Matrix::zeros(1, d);
        ones.fill(1.0);
        params.insert(HEAD_LN_G, ones)?;
        params.insert(HEAD_LN_B, Matrix::zeros(1, d))?;
        params.insert(HEAD_W, w)?;
        params.insert(HEAD_B, Matrix::zeros(1, c))?;
        Ok(Self {
            config,
            params,
            labels,
        })
    }

    /// Rebuilds a model from stored parameters after checking the head shape.
    pub fn from_params(config: TtcConfig, labels: LabelSpace, params: ParamStore) -> Result<Self> {
        config.transformer.validate()?;
        let c = labels.num_classes();
        if params.get(HEAD_W)?.shape() != (config.transformer.d_model, c)
            || params.get(HEAD_B)?.shape() != (1, c)
            || params.get(HEAD_LN_G)?.shape() != (1, config.transformer.d_model)
        {
            return Err(contract("TokenClassifierModel", "head shape does not match label space"));
        }
        Ok(Self {
            config,
            params,
            labels,
        })
    }

    /// Unit-norm features have coordinates of size `1/√d`; scaling by `√d`
    /// puts the residual stream on the same footing as the sublayer outputs.
    fn scaled_tokens(&self, seq: &TokenSequence) -> Matrix {
        let mut t = seq.tokens.clone();
        t.scale(libm::sqrt(self.config.transformer.d_model as f64));
        t
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<TtcForward> {
        if seq.tokens.cols() != self.config.transformer.d_model {
            return Err(contract(
                "classify_tokens",
                format!(
                    "token width {} vs model width {}",
                    seq.tokens.cols(),
                    self.config.transformer.d_model
                ),
            ));
        }
        let (encoded, cache) =
            encoder_forward(&self.scaled_tokens(seq), &self.params, &self.config.transformer, ENCODER_PREFIX)?;
        let (normed, ln) = layer_norm_forward(
            &encoded,
            self.params.get(HEAD_LN_G)?.data(),
            self.params.get(HEAD_LN_B)?.data(),
            self.config.transformer.ln_eps,
        )?;
        let logits = linear_forward(&normed, self.params.get(HEAD_W)?, self.params.get(HEAD_B)?.data())?;
        Ok(TtcForward {
            logits,
            normed,
            ln,
            cache,
        })
    }

    /// Accumulates gradients for `∂L/∂logits`.
    pub fn backward(&mut self, fwd: &TtcForward, d_logits: &Matrix) -> Result<()> {
        let w = self.params.get(HEAD_W)?.clone();
        let g = linear_backward(&fwd.normed, &w, d_logits)?;
        self.params.accumulate(HEAD_W, &g.dw)?;
        self.params.accumulate(HEAD_B, &g.db)?;
        let gain = self.params.get(HEAD_LN_G)?.data().to_vec();
        let (dx, dgain, dbias) = layer_norm_backward(&fwd.ln, &gain, &g.dx)?;
        self.params.accumulate(HEAD_LN_G, &dgain)?;
        self.params.accumulate(HEAD_LN_B, &dbias)?;
        encoder_backward(&fwd.cache, &dx, &mut self.params)?;
        Ok(())
    }
}

/// Row-wise softmax of logits.
pub fn probabilities(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for i in 0..p.rows() {
        softmax_in_place(p.row_mut(i));
    }
    p
}

/// Per-token class probabilities, shape `(N+1) × C`.
pub fn classify_tokens(seq: &TokenSequence, model: &TokenClassifierModel) -> Result<Matrix> {
    Ok(probabilities(&model.forward(seq)?.logits))
}

/// Summed token cross-entropy, computed from logits, with its gradient.
pub fn ttc_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows() {
        return Err(contract(
            "ttc_loss",
            format!("{} labels for {} tokens", labels.len(), logits.rows()),
        ));
    }
    let mut total = 0.0;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    for (i, &y) in labels.iter().enumerate() {
        let (l, g) = softmax_cross_entropy(logits.row(i), y)?;
        total += l;
        grad.row_mut(i).copy_from_slice(&g);
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("token classification loss".into()));
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtcHyper {
    pub lr: f64,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub epochs: usize,
}

impl Default for TtcHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 32,
            epochs: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TtcTrainOutput {
    pub model: TokenClassifierModel,
    /// Mean per-sequence loss per optimizer step.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

/// Re-encodes a query's candidates and builds its token sequence.
pub fn sequence_for_query(
    query: &QueryRecord,
    corpus: &EmbeddingCorpus,
    reencoder: &ReEncoderModel,
    n: usize,
    labels: Option<(&CategoryMap, &LabelSpace)>,
) -> Result<TokenSequence> {
    let ids: Vec<ImageId> = corpus.candidates(query).map(|img| img.image_id).collect();
    let rows: Vec<&[f64]> = corpus.candidates(query).map(|img| img.feature.as_slice()).collect();
    let raw = Matrix::from_rows(&rows)?;
    let features = reencoder.reencode_batch(&raw)?;
    build_sequence(query.query_id, &query.feature, &ids, &features, n, labels)
}

/// Trains the classifier on the training split with the re-encoder frozen.
pub fn train_ttc(
    corpus: &EmbeddingCorpus,
    reencoder: &ReEncoderModel,
    mut model: TokenClassifierModel,
    aug: &AugmentationConfig,
    hyper: &TtcHyper,
    rng: &mut RngStream,
) -> Result<TtcTrainOutput> {
    aug.validate()?;
    if !(hyper.lr > 0.0) || hyper.batch == 0 {
        return Err(Error::Config("learning rate and batch size must be positive".into()));
    }
    let map = CategoryMap::from_corpus(corpus);
    let space = model.labels.clone();
    let n = model.config.seq_len;
    let base: Vec<TokenSequence> = corpus
        .queries_in(Split::Train)
        .filter(|q| !q.candidate_ids.is_empty())
        .map(|q| sequence_for_query(q, corpus, reencoder, n, Some((&map, &space))))
        .collect::<Result<_>>()?;

    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr), &model.params);
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut loss_history = Vec::new();
    let mut steps = 0usize;
    for _ in 0..hyper.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(hyper.batch) {
            model.params.zero_grads();
            let mut total = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let (seq, _) = augment_sequence(&base[i], aug, &space, rng)?;
                let labels = seq.labels.as_deref().ok_or_else(|| contract("train_ttc", "unlabelled sequence"))?;
                let fwd = model.forward(&seq)?;
                let (loss, mut d_logits) = ttc_loss(&fwd.logits, labels)?;
                d_logits.scale(scale);
                model.backward(&fwd, &d_logits)?;
                total += loss;
            }
            let mean = total * scale;
            if !mean.is_finite() {
                return Err(Error::Diverged { step: steps, loss: mean });
            }
            opt.step(&mut model.params);
            if !model.params.all_finite() {
                return Err(Error::Diverged { step: steps, loss: mean });
            }
            loss_history.push(mean);
            steps += 1;
        }
    }
    Ok(TtcTrainOutput {
        model,
        loss_history,
        steps,
    })
}

/// Fraction of real image tokens whose argmax class equals the label, over
/// the queries of `split`.
pub fn token_accuracy(
    corpus: &EmbeddingCorpus,
    split: Split,
    reencoder: &ReEncoderModel,
    model: &TokenClassifierModel,
) -> Result<f64> {
    let map = CategoryMap::from_corpus(corpus);
    let mut hits = 0usize;
    let mut total = 0usize;
    for q in corpus.queries_in(split) {
        let seq = sequence_for_query(q, corpus, reencoder, model.config.seq_len, Some((&map, &model.labels)))?;
        let probs = classify_tokens(&seq, model)?;
        let labels = seq.labels.as_ref().expect("labelled");
        for (row, id) in seq.image_ids.iter().enumerate() {
            if id.is_none() {
                continue;
            }
            total += 1;
            if argmax(probs.row(row + 1)) == labels[row + 1] {
                hits += 1;
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
