//! Prototype-aware contrastive training of the re-encoder.
//!
//! For one query with re-encoded relevant features `r_i` and irrelevant
//! features `u_i`, a bank of category prototypes `B(j)` and the category map
//! `G`, the loss is
//!
//! ```text
//!            S1 + S2
//! L = −log ─────────────────────
//!          S3 + S4 + S1 + S2
//!
//! S1 = Σ_i exp(q·r_i/τ)          S2 = Σ_i exp(B(G(r_i))·r_i/τ)
//! S3 = Σ_i exp(q·u_i/τ)          S4 = Σ_{i,j} exp(B(j)·u_i/τ)
//! ```
//!
//! evaluated in log-sum-exp form. Gradients flow to the features only; the
//! bank moves by the moving-average rule in [`ema_update`].

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::corpus::{CategoryDescriptor, CategoryId, EmbeddingCorpus, ImageId, Split};
use crate::error::{contract, Error, Result};
use crate::nn::{dot, Adam, AdamConfig, Matrix, RngStream};
use crate::reencoder::ReEncoderModel;

/// One prototype row per global category. Row order never changes.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Matrix,
    category_ids: Vec<CategoryId>,
    index: BTreeMap<CategoryId, usize>,
}

impl PrototypeBank {
    /// Builds the bank with `B(i)` equal to each category's description feature.
    pub fn init_bank(descriptors: &[CategoryDescriptor]) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(contract("init_bank", "no category descriptors"));
        }
        let rows: Vec<&[f64]> = descriptors
            .iter()
            .map(|d| d.description_feature.as_slice())
            .collect();
        let prototypes = Matrix::from_rows(&rows)?;
        Self::from_parts(descriptors.iter().map(|d| d.category_id).collect(), prototypes)
    }

    pub fn from_parts(category_ids: Vec<CategoryId>, prototypes: Matrix) -> Result<Self> {
        if category_ids.is_empty() || category_ids.len() != prototypes.rows() {
            return Err(contract(
                "PrototypeBank",
                format!("{} ids for {} rows", category_ids.len(), prototypes.rows()),
            ));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("prototype bank".into()));
        }
        let mut index = BTreeMap::new();
        for (i, c) in category_ids.iter().enumerate() {
            if index.insert(*c, i).is_some() {
                return Err(contract("init_bank", format!("duplicate category {c}")));
            }
        }
        Ok(Self {
            prototypes,
            category_ids,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.category_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.category_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn category_ids(&self) -> &[CategoryId] {
        &self.category_ids
    }

    pub fn slot(&self, category: CategoryId) -> Option<usize> {
        self.index.get(&category).copied()
    }

    pub fn prototype(&self, category: CategoryId) -> Option<&[f64]> {
        self.slot(category).map(|i| self.prototypes.row(i))
    }
}

/// Image → global category, defined for relevant images only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoryMap(BTreeMap<ImageId, CategoryId>);

impl CategoryMap {
    pub fn from_corpus(corpus: &EmbeddingCorpus) -> Self {
        Self(
            corpus
                .images()
                .iter()
                .filter_map(|img| img.category.map(|c| (img.image_id, c)))
                .collect(),
        )
    }

    pub fn insert(&mut self, image: ImageId, category: CategoryId) {
        self.0.insert(image, category);
    }

    pub fn get(&self, image: ImageId) -> Option<CategoryId> {
        self.0.get(&image).copied()
    }
}

/// Features for one query, already re-encoded.
#[derive(Debug, Clone)]
pub struct SclBatch {
    pub query: Vec<f64>,
    pub relevant: Matrix,
    pub relevant_ids: Vec<ImageId>,
    pub irrelevant: Matrix,
    pub tau: f64,
}

/// Which prototype pair families enter the loss. The query pairs are always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairFamilies {
    /// relevant image ↔ own prototype (numerator)
    pub prototype_positive: bool,
    /// irrelevant image ↔ every prototype (denominator)
    pub prototype_negative: bool,
}

impl Default for PairFamilies {
    fn default() -> Self {
        Self {
            prototype_positive: true,
            prototype_negative: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SclLoss {
    pub loss: f64,
    pub d_relevant: Matrix,
    pub d_irrelevant: Matrix,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + libm::log(values.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}

pub fn scl_loss(
    batch: &SclBatch,
    bank: &PrototypeBank,
    map: &CategoryMap,
    pairs: PairFamilies,
) -> Result<SclLoss> {
    let n_rel = batch.relevant.rows();
    let n_irr = batch.irrelevant.rows();
    if n_rel == 0 {
        return Err(contract("scl_loss", "no relevant features"));
    }
    if !(batch.tau > 0.0) {
        return Err(contract("scl_loss", format!("temperature must be positive, got {}", batch.tau)));
    }
    if batch.relevant_ids.len() != n_rel {
        return Err(contract("scl_loss", "relevant ids and features differ in length"));
    }
    let d = batch.query.len();
    if batch.relevant.cols() != d || (n_irr > 0 && batch.irrelevant.cols() != d) || bank.dim() != d {
        return Err(crate::error::shape("scl_loss", "feature, query and bank widths differ"));
    }
    let inv_tau = 1.0 / batch.tau;
    let q = batch.query.as_slice();

    let own_slots: Vec<usize> = batch
        .relevant_ids
        .iter()
        .map(|id| {
            map.get(*id)
                .and_then(|c| bank.slot(c))
                .ok_or_else(|| contract("scl_loss", format!("image {id} has no prototype")))
        })
        .collect::<Result<_>>()?;

    // positive logits: [q·r_i ...] then [B(G(r_i))·r_i ...]
    let mut pos = Vec::with_capacity(2 * n_rel);
    for i in 0..n_rel {
        pos.push(dot(q, batch.relevant.row(i)) * inv_tau);
    }
    if pairs.prototype_positive {
        for (i, &s) in own_slots.iter().enumerate() {
            pos.push(dot(bank.prototypes.row(s), batch.relevant.row(i)) * inv_tau);
        }
    }
    // negative logits: [q·u_i ...] then [B(j)·u_i for i, j]
    let m = bank.len();
    let mut neg = Vec::with_capacity(n_irr * (1 + m));
    for i in 0..n_irr {
        neg.push(dot(q, batch.irrelevant.row(i)) * inv_tau);
    }
    if pairs.prototype_negative && n_irr > 0 {
        let proto_dots = batch.irrelevant.matmul_t(&bank.prototypes)?;
        neg.extend(proto_dots.data().iter().map(|v| v * inv_tau));
    }

    let lse_pos = log_sum_exp(&pos);
    let lse_all = {
        let mut all = pos.clone();
        all.extend_from_slice(&neg);
        log_sum_exp(&all)
    };
    let loss = lse_all - lse_pos;
    if !loss.is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }

    let w_pos = |z: f64| libm::exp(z - lse_all) - libm::exp(z - lse_pos);
    let w_neg = |z: f64| libm::exp(z - lse_all);

    let mut d_relevant = Matrix::zeros(n_rel, d);
    for i in 0..n_rel {
        let c_query = w_pos(pos[i]) * inv_tau;
        let row = d_relevant.row_mut(i);
        for (r, qv) in row.iter_mut().zip(q) {
            *r += c_query * qv;
        }
        if pairs.prototype_positive {
            let c_proto = w_pos(pos[n_rel + i]) * inv_tau;
            for (r, b) in row.iter_mut().zip(bank.prototypes.row(own_slots[i])) {
                *r += c_proto * b;
            }
        }
    }
    let mut d_irrelevant = Matrix::zeros(n_irr, d);
    if n_irr > 0 {
        for i in 0..n_irr {
            let c_query = w_neg(neg[i]) * inv_tau;
            for (r, qv) in d_irrelevant.row_mut(i).iter_mut().zip(q) {
                *r += c_query * qv;
            }
        }
        if pairs.prototype_negative {
            let mut coeff = Matrix::zeros(n_irr, m);
            for (c, &z) in coeff.data_mut().iter_mut().zip(&neg[n_irr..]) {
                *c = w_neg(z) * inv_tau;
            }
            d_irrelevant.add_assign(&coeff.matmul(&bank.prototypes)?)?;
        }
    }
    Ok(SclLoss {
        loss,
        d_relevant,
        d_irrelevant,
    })
}

/// `B(c) ← α·B(c) + (1−α)·x` for each `(x, c)` in order.
///
/// With `swap_convention` the roles flip to `B(c) ← (1−α)·B(c) + α·x`.
pub fn ema_update(
    bank: &mut PrototypeBank,
    features: &Matrix,
    categories: &[CategoryId],
    alpha: f64,
    swap_convention: bool,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract("ema_update", format!("alpha {alpha} outside [0, 1]")));
    }
    if features.rows() != categories.len() || features.cols() != bank.dim() {
        return Err(crate::error::shape("ema_update", "features do not match categories or bank width"));
    }
    let (keep, take) = if swap_convention {
        (1.0 - alpha, alpha)
    } else {
        (alpha, 1.0 - alpha)
    };
    for (i, c) in categories.iter().enumerate() {
        let slot = bank
            .slot(*c)
            .ok_or_else(|| contract("ema_update", format!("unknown category {c}")))?;
        let x = features.row(i);
        for (b, v) in bank.prototypes.row_mut(slot).iter_mut().zip(x) {
            *b = keep * *b + take * v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclHyper {
    pub tau: f64,
    pub alpha: f64,
    pub lr: f64,
    /// Queries per optimizer step.
    pub batch: usize,
    pub epochs: usize,
    /// Cap on irrelevant images sampled per query.
    pub max_irrelevant: usize,
    pub pairs: PairFamilies,
    pub ema_swap_convention: bool,
    /// Reserved; accepted for configuration compatibility, has no effect.
    pub epsilon: f64,
}

impl Default for SclHyper {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 0.01,
            lr: 1e-5,
            batch: 32,
            epochs: 10,
            max_irrelevant: 64,
            pairs: PairFamilies::default(),
            ema_swap_convention: false,
            epsilon: 0.01,
        }
    }
}

impl SclHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("learning rate and batch size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SclTrainOutput {
    pub model: ReEncoderModel,
    pub bank: PrototypeBank,
    /// Mean batch loss per optimizer step.
    pub loss_history: Vec<f64>,
    pub steps: usize,
}

struct QueryFeatures {
    query: Vec<f64>,
    relevant: Matrix,
    relevant_ids: Vec<ImageId>,
    relevant_cats: Vec<CategoryId>,
    irrelevant: Matrix,
}

fn gather(
    corpus: &EmbeddingCorpus,
    query_index: usize,
    max_irrelevant: Option<usize>,
    rng: Option<&mut RngStream>,
) -> Result<Option<QueryFeatures>> {
    let q = &corpus.queries()[query_index];
    let mut rel_rows = Vec::new();
    let mut relevant_ids = Vec::new();
    let mut relevant_cats = Vec::new();
    let mut irr_rows = Vec::new();
    for img in corpus.candidates(q) {
        match img.category {
            Some(c) => {
                rel_rows.push(img.feature.as_slice());
                relevant_ids.push(img.image_id);
                relevant_cats.push(c);
            }
            None => irr_rows.push(img.feature.as_slice()),
        }
    }
    if rel_rows.is_empty() {
        return Ok(None);
    }
    if let (Some(cap), Some(rng)) = (max_irrelevant, rng) {
        if irr_rows.len() > cap {
            rng.shuffle(&mut irr_rows);
            irr_rows.truncate(cap);
        }
    }
    let d = corpus.dim();
    Ok(Some(QueryFeatures {
        query: q.feature.clone(),
        relevant: Matrix::from_rows(&rel_rows)?,
        relevant_ids,
        relevant_cats,
        irrelevant: if irr_rows.is_empty() {
            Matrix::zeros(0, d)
        } else {
            Matrix::from_rows(&irr_rows)?
        },
    }))
}

fn stack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
}

/// Mean contrastive loss over all training queries, using every irrelevant
/// candidate. Deterministic; does not touch the model or bank.
pub fn mean_scl_loss(
    corpus: &EmbeddingCorpus,
    model: &ReEncoderModel,
    bank: &PrototypeBank,
    map: &CategoryMap,
    hyper: &SclHyper,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (qi, q) in corpus.queries().iter().enumerate() {
        if q.split != Split::Train {
            continue;
        }
        let Some(f) = gather(corpus, qi, None, None)? else {
            continue;
        };
        let batch = SclBatch {
            query: f.query,
            relevant: model.reencode_batch(&f.relevant)?,
            relevant_ids: f.relevant_ids,
            irrelevant: model.reencode_batch(&f.irrelevant)?,
            tau: hyper.tau,
        };
        total += scl_loss(&batch, bank, map, hyper.pairs)?.loss;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Trains the re-encoder on the training split. Each step averages the loss
/// over up to `hyper.batch` queries, applies Adam to the MLP, then folds the
/// pre-step relevant features into the bank.
pub fn train_reencoder(
    corpus: &EmbeddingCorpus,
    mut model: ReEncoderModel,
    mut bank: PrototypeBank,
    map: &CategoryMap,
    hyper: &SclHyper,
    rng: &mut RngStream,
) -> Result<SclTrainOutput> {
    hyper.validate()?;
    let mut opt = Adam::new(AdamConfig::with_lr(hyper.lr), &model.params);
    let mut order: Vec<usize> = corpus
        .queries()
        .iter()
        .enumerate()
        .filter(|(_, q)| q.split == Split::Train)
        .map(|(i, _)| i)
        .collect();
    let mut loss_history = Vec::new();
    let mut steps = 0usize;

    for _ in 0..hyper.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(hyper.batch) {
            model.params.zero_grads();
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            let mut bank_updates: Vec<(Matrix, Vec<CategoryId>)> = Vec::new();
            let mut pending = Vec::new();
            for &qi in chunk {
                let Some(f) = gather(corpus, qi, Some(hyper.max_irrelevant), Some(rng))? else {
                    continue;
                };
                let inputs = stack(&f.relevant, &f.irrelevant)?;
                let (g, cache) = model.forward(&inputs)?;
                let mut encoded = g;
                encoded.scale(model.beta());
                encoded.add_assign(&inputs)?;
                let n_rel = f.relevant.rows();
                let rel_idx: Vec<usize> = (0..n_rel).collect();
                let irr_idx: Vec<usize> = (n_rel..inputs.rows()).collect();
                let batch = SclBatch {
                    query: f.query,
                    relevant: encoded.select_rows(&rel_idx),
                    relevant_ids: f.relevant_ids,
                    irrelevant: encoded.select_rows(&irr_idx),
                    tau: hyper.tau,
                };
                let out = scl_loss(&batch, &bank, map, hyper.pairs)?;
                batch_loss += out.loss;
                used += 1;
                pending.push((cache, stack(&out.d_relevant, &out.d_irrelevant)?));
                bank_updates.push((batch.relevant, f.relevant_cats));
            }
            if used == 0 {
                continue;
            }
            let scale = 1.0 / used as f64;
            for (cache, mut d) in pending {
                d.scale(scale);
                model.backward(&cache, &d)?;
            }
            let mean = batch_loss * scale;
            if !mean.is_finite() {
                return Err(Error::Diverged { step: steps, loss: mean });
            }
            opt.step(&mut model.params);
            if !model.params.all_finite() {
                return Err(Error::Diverged { step: steps, loss: mean });
            }
            for (feats, cats) in &bank_updates {
                ema_update(&mut bank, feats, cats, hyper.alpha, hyper.ema_swap_convention)?;
            }
            loss_history.push(mean);
            steps += 1;
        }
    }
    Ok(SclTrainOutput {
        model,
        bank,
        loss_history,
        steps,
    })
}
