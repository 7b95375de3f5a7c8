//! Independent reference implementations and random instance builders shared
//! by the integration tests. Everything here is written as plain loops over
//! `Vec<f64>` so it shares no code paths with the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use divrank_core::corpus::{CategoryId, ImageId, QueryId};
use divrank_core::metrics::RelevanceTruth;
use divrank_core::nn::{Matrix, ParamStore, RngStream};

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_unit(d: usize, rng: &mut RngStream) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn affine(x: &[Vec<f64>], w: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let mut s = b.data()[j];
                    for (k, xv) in row.iter().enumerate() {
                        s += xv * w[(k, j)];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], g: &Matrix, b: &Matrix, eps: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * g.data()[j] + b.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Straight-line pre-norm encoder: LN → multi-head attention → residual,
/// LN → GELU MLP → residual, no positional information.
pub fn scalar_encoder(tokens: &Matrix, params: &ParamStore, prefix: &str, layers: usize, heads: usize) -> Vec<Vec<f64>> {
    let mut x = rows_of(tokens);
    let n = x.len();
    let d = tokens.cols();
    let dh = d / heads;
    for l in 0..layers {
        let p = |s: &str| params.get(&format!("{prefix}.{l}.{s}")).unwrap();
        let h1 = layer_norm(&x, p("ln1.g"), p("ln1.b"), 1e-5);
        let q = affine(&h1, p("wq"), p("bq"));
        let k = affine(&h1, p("wk"), p("bk"));
        let v = affine(&h1, p("wv"), p("bv"));
        let mut mixed = vec![vec![0.0; d]; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let mut scores: Vec<f64> = (0..n)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for s in scores.iter_mut() {
                    *s = (*s - m).exp() / z;
                }
                for c in cols.clone() {
                    mixed[i][c] = (0..n).map(|j| scores[j] * v[j][c]).sum();
                }
            }
        }
        let attn = affine(&mixed, p("wo"), p("bo"));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += attn[i][c];
            }
        }
        let h2 = layer_norm(&x, p("ln2.g"), p("ln2.b"), 1e-5);
        let hidden: Vec<Vec<f64>> = affine(&h2, p("w1"), p("b1"))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let out = affine(&hidden, p("w2"), p("b2"));
        for i in 0..n {
            for c in 0..d {
                x[i][c] += out[i][c];
            }
        }
    }
    x
}

/// Classifier probabilities: scaled tokens → encoder → LN → linear → softmax.
pub fn scalar_classifier(tokens: &Matrix, params: &ParamStore, layers: usize, heads: usize) -> Vec<Vec<f64>> {
    let d = tokens.cols();
    let mut scaled = tokens.clone();
    scaled.scale((d as f64).sqrt());
    let enc = scalar_encoder(&scaled, params, "ttc", layers, heads);
    let normed = layer_norm(&enc, params.get("head.ln.g").unwrap(), params.get("head.ln.b").unwrap(), 1e-5);
    affine(&normed, params.get("head.w").unwrap(), params.get("head.b").unwrap())
        .into_iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter().map(|v| (v - m).exp() / z).collect()
        })
        .collect()
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss written directly from its definition: positives are
/// query·relevant and prototype·relevant, negatives are query·irrelevant and
/// every prototype·irrelevant, all divided by the temperature.
pub fn scalar_scl(
    query: &[f64],
    relevant: &[Vec<f64>],
    own_prototype: &[Vec<f64>],
    irrelevant: &[Vec<f64>],
    prototypes: &[Vec<f64>],
    tau: f64,
    prototype_positive: bool,
    prototype_negative: bool,
) -> f64 {
    let mut pos = Vec::new();
    for r in relevant {
        pos.push(dotv(query, r) / tau);
    }
    if prototype_positive {
        for (r, b) in relevant.iter().zip(own_prototype) {
            pos.push(dotv(b, r) / tau);
        }
    }
    let mut all = pos.clone();
    for u in irrelevant {
        all.push(dotv(query, u) / tau);
    }
    if prototype_negative {
        for u in irrelevant {
            for b in prototypes {
                all.push(dotv(b, u) / tau);
            }
        }
    }
    lse(&all) - lse(&pos)
}

/// Ground truth backed by explicit maps.
#[derive(Debug, Clone, Default)]
pub struct TableTruth {
    pub categories: BTreeMap<(QueryId, ImageId), CategoryId>,
    pub gt_counts: BTreeMap<QueryId, usize>,
}

impl RelevanceTruth for TableTruth {
    fn category_of(&self, query: QueryId, image: ImageId) -> Option<CategoryId> {
        self.categories.get(&(query, image)).copied()
    }
    fn gt_category_count(&self, query: QueryId) -> Option<usize> {
        self.gt_counts.get(&query).copied()
    }
}

/// One pass over the list: `(P@k, CR@k)`.
pub fn oracle_p_cr(ids: &[ImageId], query: QueryId, truth: &TableTruth, k: usize) -> (f64, f64) {
    let mut hits = 0;
    let mut seen = BTreeSet::new();
    for (rank, id) in ids.iter().enumerate() {
        if rank == k {
            break;
        }
        if let Some(c) = truth.categories.get(&(query, *id)) {
            hits += 1;
            seen.insert(*c);
        }
    }
    (hits as f64 / k as f64, seen.len() as f64 / truth.gt_counts[&query] as f64)
}

pub fn oracle_f1(p: f64, cr: f64) -> f64 {
    if p == 0.0 && cr == 0.0 {
        0.0
    } else {
        2.0 * p * cr / (p + cr)
    }
}

fn before(a: (f64, ImageId), b: (f64, ImageId)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Category-balanced selection expressed as a sort: each token gets the key
/// `(round, category position, position within category)` and the first `k`
/// keys win; leftover slots go to discarded tokens by similarity.
/// `classes[i] = None` marks a discarded token.
pub fn oracle_post_process(
    ids: &[ImageId],
    sims: &[f64],
    classes: &[Option<usize>],
    per_category: usize,
    k: usize,
) -> Vec<ImageId> {
    let mut groups: BTreeMap<usize, Vec<(f64, ImageId)>> = BTreeMap::new();
    let mut discarded = Vec::new();
    for i in 0..ids.len() {
        match classes[i] {
            Some(c) => groups.entry(c).or_default().push((sims[i], ids[i])),
            None => discarded.push((sims[i], ids[i])),
        }
    }
    let sort = |v: &mut Vec<(f64, ImageId)>| {
        // insertion sort with the tie rule spelled out
        for i in 1..v.len() {
            let mut j = i;
            while j > 0 && before(v[j], v[j - 1]) {
                v.swap(j, j - 1);
                j -= 1;
            }
        }
    };
    let mut cats: Vec<Vec<(f64, ImageId)>> = groups.into_values().collect();
    for g in cats.iter_mut() {
        sort(g);
    }
    // category order by best member
    let mut order: Vec<usize> = (0..cats.len()).collect();
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && before(cats[order[j]][0], cats[order[j - 1]][0]) {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut keyed: Vec<((usize, usize, usize), ImageId)> = Vec::new();
    for (pos, &c) in order.iter().enumerate() {
        for (within, &(_, id)) in cats[c].iter().enumerate() {
            keyed.push(((within / per_category, pos, within), id));
        }
    }
    keyed.sort();
    let mut out: Vec<ImageId> = keyed.into_iter().take(k).map(|(_, id)| id).collect();
    sort(&mut discarded);
    for (_, id) in discarded {
        if out.len() == k {
            break;
        }
        out.push(id);
    }
    out
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    (dotv(a, b) / (dotv(a, a).sqrt() * dotv(b, b).sqrt())).clamp(-1.0, 1.0)
}

/// Greedy MMR with the full candidate similarity matrix and every redundancy
/// maximum recomputed from scratch at each step.
pub fn oracle_mmr(
    ids: &[ImageId],
    query: &[f64],
    features: &[Vec<f64>],
    k: usize,
    lambda: f64,
    pool: usize,
) -> Vec<ImageId> {
    let n = ids.len();
    let sim_q: Vec<f64> = features.iter().map(|f| cosine(query, f)).collect();
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| sim_q[b].total_cmp(&sim_q[a]).then(ids[a].cmp(&ids[b])));
    ranked.truncate(pool);
    let pair: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| cosine(&features[i], &features[j])).collect()).collect();
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k && chosen.len() < ranked.len() {
        let mut best: Option<(f64, usize)> = None;
        for &c in &ranked {
            if chosen.contains(&c) {
                continue;
            }
            let score = if chosen.is_empty() {
                sim_q[c]
            } else {
                let red = chosen.iter().map(|&s| pair[c][s]).fold(f64::NEG_INFINITY, f64::max);
                lambda * sim_q[c] - (1.0 - lambda) * red
            };
            let better = match best {
                None => true,
                Some((bs, b)) => {
                    score > bs || (score == bs && (sim_q[c] > sim_q[b] || (sim_q[c] == sim_q[b] && ids[c] < ids[b])))
                }
            };
            if better {
                best = Some((score, c));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen.into_iter().map(|i| ids[i]).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    parent[x] = r;
    r
}

/// DBSCAN from its graph characterisation: clusters are connected components
/// of core points (cores within `eps` are linked), numbered by the first core
/// met in `order`; a border point joins the lowest-numbered cluster among its
/// core neighbours; everything else is noise.
pub fn oracle_dbscan(points: &[Vec<f64>], order: &[usize], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| euclid(&points[i], &points[j]) <= eps).collect()).collect();
    let core: Vec<bool> = (0..n).map(|i| adj[i].iter().filter(|&&b| b).count() >= min_pts).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && adj[i][j] {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    let mut number: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in order {
        if core[p] {
            let root = find(&mut parent, p);
            let next = number.len();
            number.entry(root).or_insert(next);
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(number[&find(&mut parent, i)])
            } else {
                (0..n)
                    .filter(|&j| core[j] && adj[i][j])
                    .map(|j| number[&find(&mut parent, j)])
                    .min()
            }
        })
        .collect()
}

/// Filter + DBSCAN + round-robin, expressed as a sort on
/// `(position within cluster, cluster position)`.
pub fn oracle_cluster_rerank(
    ids: &[ImageId],
    query: &[f64],
    features: &[Vec<f64>],
    k: usize,
    eps: f64,
    min_pts: usize,
    threshold: f64,
) -> Vec<ImageId> {
    let sims: Vec<f64> = features.iter().map(|f| cosine(query, f)).collect();
    let mut kept: Vec<usize> = (0..ids.len()).filter(|&i| sims[i] >= threshold).collect();
    kept.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(ids[a].cmp(&ids[b])));
    let pts: Vec<Vec<f64>> = kept.iter().map(|&i| features[i].clone()).collect();
    let order: Vec<usize> = (0..kept.len()).collect();
    let labels = oracle_dbscan(&pts, &order, eps, min_pts);
    // cluster position = rank of its first member in `kept`; noise goes last
    let mut first_seen: Vec<Option<usize>> = Vec::new();
    let mut position: BTreeMap<usize, usize> = BTreeMap::new();
    for c in labels.iter().flatten() {
        if !position.contains_key(c) {
            position.insert(*c, first_seen.len());
            first_seen.push(Some(*c));
        }
    }
    let noise_pos = first_seen.len();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut keyed = Vec::new();
    for (local, l) in labels.iter().enumerate() {
        let pos = l.map(|c| position[&c]).unwrap_or(noise_pos);
        let within = counts.entry(pos).or_insert(0);
        keyed.push(((*within, pos), ids[kept[local]]));
        *within += 1;
    }
    keyed.sort();
    keyed.into_iter().take(k).map(|(_, id)| id).collect()
}
