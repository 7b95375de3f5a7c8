//! Two-dimensional PCA of raw and re-encoded image features.

use std::fmt::Write as _;

use divrank_core::corpus::EmbeddingCorpus;
use divrank_core::nn::Matrix;
use divrank_core::reencoder::ReEncoderModel;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

pub const EXPORT_HEADER: &str = "space,image_id,query_id,category,pc1,pc2";

/// Leading two principal axes of `rows` with their mean. Each axis is signed
/// so its largest-magnitude coordinate is positive, which makes the output
/// independent of the eigen-solver's sign choice.
pub fn principal_axes(rows: &[&[f64]]) -> Result<(Vec<f64>, [Vec<f64>; 2])> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n < 2 || d < 2 {
        return Err(Error::Config("PCA needs at least two rows of width two".into()));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / n as f64);
    }
    let centred = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axis = |k: usize| {
        let mut v: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        v
    };
    Ok((mean, [axis(0), axis(1)]))
}

fn project(row: &[f64], mean: &[f64], axis: &[f64]) -> f64 {
    row.iter().zip(mean).zip(axis).map(|((x, m), a)| (x - m) * a).sum()
}

/// CSV of every image in both spaces, projected onto axes fitted to the
/// union of the two so the coordinates are comparable.
pub fn pca_csv(corpus: &EmbeddingCorpus, reencoder: &ReEncoderModel, cfg: &ExperimentConfig) -> Result<String> {
    let images = corpus.images();
    let raw_rows: Vec<&[f64]> = images.iter().map(|i| i.feature.as_slice()).collect();
    let raw = Matrix::from_rows(&raw_rows)?;
    let encoded = reencoder.reencode_batch(&raw)?;
    let mut all: Vec<&[f64]> = raw_rows.clone();
    all.extend(encoded.iter_rows());
    let (mean, axes) = principal_axes(&all)?;

    let mut out = format!("# config: {}\n{EXPORT_HEADER}\n", cfg.echo());
    for (space, m) in [("raw", &raw), ("reencoded", &encoded)] {
        for (img, row) in images.iter().zip(m.iter_rows()) {
            let category = img.category.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{space},{},{},{category},{:.6},{:.6}",
                img.image_id,
                img.query_id,
                project(row, &mean, &axes[0]),
                project(row, &mean, &axes[1])
            );
        }
    }
    Ok(out)
}
