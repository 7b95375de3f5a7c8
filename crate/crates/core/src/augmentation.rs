//! Token-wise augmentation of labelled sequences: query mixup, deletion, copy
//! and image mixup, sampled in that order.

use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::nn::{Matrix, RngStream};
use crate::token_classifier::{LabelSpace, TokenSequence};
use crate::corpus::ImageId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    pub p_query: f64,
    pub p_image: f64,
    pub p_delete: f64,
    pub p_copy: f64,
    pub enabled: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_query: 0.5,
            p_image: 0.2,
            p_delete: 0.2,
            p_copy: 0.2,
            enabled: true,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_query, self.p_image, self.p_delete, self.p_copy] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(alloc::format!("augmentation probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

fn mix(major: &[f64], minor: &[f64], lambda: f64) -> Vec<f64> {
    let hi = lambda.max(1.0 - lambda);
    let lo = lambda.min(1.0 - lambda);
    major.iter().zip(minor).map(|(a, b)| hi * a + lo * b).collect()
}

/// `max(λ, 1−λ)·query + min(λ, 1−λ)·image`
pub fn perturb_query(query: &[f64], image: &[f64], lambda: f64) -> Vec<f64> {
    mix(query, image, lambda)
}

/// `max(λ, 1−λ)·image + min(λ, 1−λ)·query`
pub fn perturb_image(image: &[f64], query: &[f64], lambda: f64) -> Vec<f64> {
    mix(image, query, lambda)
}

/// What one call to [`augment_sequence`] did.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AugmentStats {
    pub query_perturbed: bool,
    pub image_tokens: usize,
    pub deleted: usize,
    pub copied: usize,
    /// Relevant tokens (copies included) eligible for image mixup.
    pub relevant_after_copy: usize,
    pub image_perturbed: usize,
}

struct Row {
    feature: Vec<f64>,
    label: usize,
    id: Option<ImageId>,
    sim: f64,
}

/// Applies the four operations and re-pads to the original length.
///
/// Deleted tokens are dropped and the sequence is refilled with zero rows
/// labelled `IRRELEVANT`; copies sit directly after their source. The encoder
/// has no positional information, so where padding sits does not matter.
pub fn augment_sequence(
    seq: &TokenSequence,
    cfg: &AugmentationConfig,
    space: &LabelSpace,
    rng: &mut RngStream,
) -> Result<(TokenSequence, AugmentStats)> {
    let labels = seq
        .labels
        .as_ref()
        .ok_or_else(|| contract("augment_sequence", "sequence has no labels"))?;
    let mut stats = AugmentStats::default();
    if !cfg.enabled {
        return Ok((seq.clone(), stats));
    }
    let n = seq.image_rows();
    let d = seq.tokens.cols();

    let mut rows: Vec<Row> = (0..n)
        .filter(|&i| seq.image_ids[i].is_some())
        .map(|i| Row {
            feature: seq.tokens.row(i + 1).to_vec(),
            label: labels[i + 1],
            id: seq.image_ids[i],
            sim: seq.similarities[i],
        })
        .collect();
    stats.image_tokens = rows.len();

    let mut query = seq.tokens.row(0).to_vec();
    if rng.bernoulli(cfg.p_query) {
        let relevant: Vec<usize> = (0..rows.len()).filter(|&i| space.is_category(rows[i].label)).collect();
        if !relevant.is_empty() {
            let pick = relevant[rng.index(relevant.len())];
            let lambda = rng.uniform();
            query = perturb_query(&query, &rows[pick].feature, lambda);
            stats.query_perturbed = true;
        }
    }

    rows.retain(|_| {
        let drop = rng.bernoulli(cfg.p_delete);
        if drop {
            stats.deleted += 1;
        }
        !drop
    });

    let mut with_copies = Vec::with_capacity(rows.len() * 2);
    for row in rows {
        let copy = rng.bernoulli(cfg.p_copy);
        if copy {
            stats.copied += 1;
            let dup = Row {
                feature: row.feature.clone(),
                label: row.label,
                id: row.id,
                sim: row.sim,
            };
            with_copies.push(row);
            with_copies.push(dup);
        } else {
            with_copies.push(row);
        }
    }

    for row in with_copies.iter_mut().filter(|r| space.is_category(r.label)) {
        stats.relevant_after_copy += 1;
        if rng.bernoulli(cfg.p_image) {
            let lambda = rng.uniform();
            row.feature = perturb_image(&row.feature, &query, lambda);
            stats.image_perturbed += 1;
        }
    }

    with_copies.truncate(n);
    let mut tokens = Matrix::zeros(n + 1, d);
    tokens.row_mut(0).copy_from_slice(&query);
    let mut image_ids = alloc::vec![None; n];
    let mut similarities = alloc::vec![f64::NEG_INFINITY; n];
    let mut new_labels = alloc::vec![space.irrelevant(); n + 1];
    new_labels[0] = labels[0];
    for (i, row) in with_copies.into_iter().enumerate() {
        tokens.row_mut(i + 1).copy_from_slice(&row.feature);
        image_ids[i] = row.id;
        similarities[i] = row.sim;
        new_labels[i + 1] = row.label;
    }
    Ok((
        TokenSequence {
            query_id: seq.query_id,
            tokens,
            image_ids,
            similarities,
            labels: Some(new_labels),
        },
        stats,
    ))
}
