//! Final list construction: category-balanced post-processing of classifier
//! output, plus top-k, MMR and filter + DBSCAN baselines.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::corpus::{cosine_similarity, CategoryId, EmbeddingCorpus, ImageId, QueryId, QueryRecord};
use crate::error::{contract, Error, Result};
use crate::nn::Matrix;
use crate::reencoder::ReEncoderModel;
use crate::token_classifier::{argmax, classify_tokens, sequence_for_query, LabelSpace, TokenClassifierModel, TokenSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Colt,
    TopK,
    Mmr,
    Dbscan,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Colt => "colt",
            Strategy::TopK => "topk",
            Strategy::Mmr => "mmr",
            Strategy::Dbscan => "dbscan",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colt" => Ok(Strategy::Colt),
            "topk" => Ok(Strategy::TopK),
            "mmr" => Ok(Strategy::Mmr),
            "dbscan" => Ok(Strategy::Dbscan),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem {
    pub image_id: ImageId,
    pub similarity: f64,
    pub predicted: Option<CategoryId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: QueryId,
    pub strategy: Strategy,
    pub k: usize,
    pub items: Vec<RankedItem>,
    /// Set when the strategy could not produce its normal output: a short
    /// list, an empty filter result, or a similarity-only fallback.
    pub flagged: bool,
}

impl RankedList {
    pub fn ids(&self) -> Vec<ImageId> {
        self.items.iter().map(|i| i.image_id).collect()
    }
}

/// Images taken per predicted category (`X`) and list length (`k`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostProcessConfig {
    pub per_category: usize,
    pub k: usize,
}

impl PostProcessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_category == 0 || self.k < self.per_category {
            return Err(Error::Config(format!(
                "need 1 <= X <= k, got X = {}, k = {}",
                self.per_category, self.k
            )));
        }
        Ok(())
    }
}

/// `(similarity desc, id asc)`
fn by_rank(a: &(f64, ImageId), b: &(f64, ImageId)) -> core::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// Builds the final list from per-token class probabilities.
///
/// Image tokens are grouped by argmax class; tokens predicted `IRRELEVANT` or
/// `QUERY` and padding are set aside. Categories are visited in order of their
/// most query-similar member. Round `r` takes members `r·X .. (r+1)·X` of each
/// category in that order until `k` images are collected. Any remaining
/// shortfall is filled from the set-aside tokens by similarity.
pub fn post_process(
    probs: &Matrix,
    seq: &TokenSequence,
    labels: &LabelSpace,
    cfg: &PostProcessConfig,
) -> Result<RankedList> {
    cfg.validate()?;
    let n = seq.image_rows();
    if probs.rows() != n + 1 || probs.cols() != labels.num_classes() {
        return Err(crate::error::shape(
            "post_process",
            format!(
                "probabilities {:?} for {} tokens and {} classes",
                probs.shape(),
                n + 1,
                labels.num_classes()
            ),
        ));
    }
    let mut groups: BTreeMap<usize, Vec<(f64, ImageId)>> = BTreeMap::new();
    let mut discarded: Vec<(f64, ImageId)> = Vec::new();
    for (i, id) in seq.image_ids.iter().enumerate() {
        let Some(id) = *id else { continue };
        let class = argmax(probs.row(i + 1));
        let entry = (seq.similarities[i], id);
        if labels.is_category(class) {
            groups.entry(class).or_default().push(entry);
        } else {
            discarded.push(entry);
        }
    }
    let mut ordered: Vec<(usize, Vec<(f64, ImageId)>)> = groups
        .into_iter()
        .map(|(c, mut members)| {
            members.sort_by(by_rank);
            (c, members)
        })
        .collect();
    ordered.sort_by(|a, b| by_rank(&a.1[0], &b.1[0]));
    discarded.sort_by(by_rank);

    let mut items = Vec::with_capacity(cfg.k);
    let mut taken = BTreeSet::new();
    let x = cfg.per_category;
    let mut round = 0;
    'rounds: loop {
        let mut any = false;
        for (class, members) in &ordered {
            let start = round * x;
            if start >= members.len() {
                continue;
            }
            any = true;
            for &(sim, id) in &members[start..members.len().min(start + x)] {
                if items.len() == cfg.k {
                    break 'rounds;
                }
                if taken.insert(id) {
                    items.push(RankedItem {
                        image_id: id,
                        similarity: sim,
                        predicted: labels.category_of(*class),
                    });
                }
            }
        }
        if !any || items.len() == cfg.k {
            break;
        }
        round += 1;
    }
    for &(sim, id) in &discarded {
        if items.len() == cfg.k {
            break;
        }
        if taken.insert(id) {
            items.push(RankedItem {
                image_id: id,
                similarity: sim,
                predicted: None,
            });
        }
    }
    Ok(RankedList {
        query_id: seq.query_id,
        strategy: Strategy::Colt,
        k: cfg.k,
        items,
        flagged: ordered.is_empty(),
    })
}

/// Full evaluation path: re-encode, build the sequence, classify, post-process.
pub fn retrieve_colt(
    query: &QueryRecord,
    corpus: &EmbeddingCorpus,
    reencoder: &ReEncoderModel,
    ttc: &TokenClassifierModel,
    cfg: &PostProcessConfig,
) -> Result<RankedList> {
    if query.candidate_ids.is_empty() {
        return Err(contract("retrieve_colt", format!("query {} has no candidates", query.query_id)));
    }
    let seq = sequence_for_query(query, corpus, reencoder, ttc.config.seq_len, None)?;
    let probs = classify_tokens(&seq, ttc)?;
    post_process(&probs, &seq, &ttc.labels, cfg)
}

/// A query's candidate pool with features and query similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub query_id: QueryId,
    pub ids: Vec<ImageId>,
    pub features: Matrix,
    pub similarities: Vec<f64>,
}

impl Candidates {
    pub fn from_parts(query_id: QueryId, query: &[f64], ids: Vec<ImageId>, features: Matrix) -> Result<Self> {
        if ids.len() != features.rows() {
            return Err(crate::error::shape("Candidates", "ids and feature rows differ"));
        }
        let similarities = (0..ids.len())
            .map(|i| cosine_similarity(query, features.row(i)))
            .collect::<Result<_>>()?;
        Ok(Self {
            query_id,
            ids,
            features,
            similarities,
        })
    }

    /// Candidates of `query`, optionally passed through the re-encoder.
    pub fn gather(query: &QueryRecord, corpus: &EmbeddingCorpus, reencoder: Option<&ReEncoderModel>) -> Result<Self> {
        let ids: Vec<ImageId> = corpus.candidates(query).map(|i| i.image_id).collect();
        let rows: Vec<&[f64]> = corpus.candidates(query).map(|i| i.feature.as_slice()).collect();
        let raw = if rows.is_empty() {
            Matrix::zeros(0, corpus.dim())
        } else {
            Matrix::from_rows(&rows)?
        };
        let features = match reencoder {
            Some(m) if raw.rows() > 0 => m.reencode_batch(&raw)?,
            _ => raw,
        };
        Self::from_parts(query.query_id, &query.feature, ids, features)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices by descending similarity, ties to the lower id.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| by_rank(&(self.similarities[a], self.ids[a]), &(self.similarities[b], self.ids[b])));
        order
    }

    fn item(&self, i: usize) -> RankedItem {
        RankedItem {
            image_id: self.ids[i],
            similarity: self.similarities[i],
            predicted: None,
        }
    }
}

/// The `k` most query-similar candidates.
pub fn topk(c: &Candidates, k: usize) -> RankedList {
    let items: Vec<RankedItem> = c.ranked().into_iter().take(k).map(|i| c.item(i)).collect();
    RankedList {
        query_id: c.query_id,
        strategy: Strategy::TopK,
        k,
        flagged: items.len() < k,
        items,
    }
}

pub fn retrieve_topk(
    query: &QueryRecord,
    corpus: &EmbeddingCorpus,
    k: usize,
    reencoder: Option<&ReEncoderModel>,
) -> Result<RankedList> {
    Ok(topk(&Candidates::gather(query, corpus, reencoder)?, k))
}

/// Greedy maximal marginal relevance over the `pool` most similar candidates:
/// each pick maximizes `λ·sim(q, d) − (1−λ)·max_s sim(d, s)`. The first pick
/// is the most similar candidate. Score ties go to higher similarity, then
/// lower id.
pub fn mmr(c: &Candidates, k: usize, lambda: f64, pool: usize) -> Result<RankedList> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract("mmr", format!("lambda {lambda} outside [0, 1]")));
    }
    let mut remaining: Vec<usize> = c.ranked().into_iter().take(pool).collect();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    // running max similarity of each remaining candidate to the chosen set
    let mut redundancy: BTreeMap<usize, f64> = remaining.iter().map(|&i| (i, f64::NEG_INFINITY)).collect();
    while chosen.len() < k && !remaining.is_empty() {
        let pos = if chosen.is_empty() {
            0
        } else {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (p, &i) in remaining.iter().enumerate() {
                let score = lambda * c.similarities[i] - (1.0 - lambda) * redundancy[&i];
                // `remaining` is in rank order, so strict `>` keeps the tie rule
                if score > best_score {
                    best = p;
                    best_score = score;
                }
            }
            best
        };
        let pick = remaining.remove(pos);
        chosen.push(pick);
        for &i in &remaining {
            let s = cosine_similarity(c.features.row(i), c.features.row(pick))?;
            let r = redundancy.get_mut(&i).expect("tracked");
            if s > *r {
                *r = s;
            }
        }
    }
    let items: Vec<RankedItem> = chosen.into_iter().map(|i| c.item(i)).collect();
    Ok(RankedList {
        query_id: c.query_id,
        strategy: Strategy::Mmr,
        k,
        flagged: items.len() < k,
        items,
    })
}

pub fn retrieve_mmr(
    query: &QueryRecord,
    corpus: &EmbeddingCorpus,
    k: usize,
    lambda: f64,
    pool: usize,
    reencoder: Option<&ReEncoderModel>,
) -> Result<RankedList> {
    mmr(&Candidates::gather(query, corpus, reencoder)?, k, lambda, pool)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub sim_threshold: f64,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        Self {
            eps: 0.4,
            min_pts: 3,
            sim_threshold: 0.5,
        }
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Density clustering of the rows of `points`, visiting seeds in `order`.
/// Neighbourhoods are closed Euclidean balls of radius `eps` that include the
/// point itself; a point is core when its neighbourhood has at least `min_pts`
/// members. Returns a cluster index per row, `None` for noise.
pub fn dbscan(points: &Matrix, order: &[usize], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) || min_pts == 0 {
        return Err(contract("dbscan", format!("need eps > 0 and min_pts >= 1, got {eps}, {min_pts}")));
    }
    let n = points.rows();
    let region = |p: usize| -> Vec<usize> {
        (0..n)
            .filter(|&q| euclidean(points.row(p), points.row(q)) <= eps)
            .collect()
    };
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Unvisited,
        Noise,
        Member(usize),
    }
    let mut state = alloc::vec![State::Unvisited; n];
    let mut next_cluster = 0;
    for &p in order {
        if state[p] != State::Unvisited {
            continue;
        }
        let neighbours = region(p);
        if neighbours.len() < min_pts {
            state[p] = State::Noise;
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        state[p] = State::Member(cluster);
        let mut seeds: VecDeque<usize> = neighbours.into_iter().filter(|&q| q != p).collect();
        while let Some(q) = seeds.pop_front() {
            match state[q] {
                State::Noise => state[q] = State::Member(cluster),
                State::Member(_) => continue,
                State::Unvisited => {
                    state[q] = State::Member(cluster);
                    let nq = region(q);
                    if nq.len() >= min_pts {
                        seeds.extend(nq);
                    }
                }
            }
        }
    }
    Ok(state
        .into_iter()
        .map(|s| match s {
            State::Member(c) => Some(c),
            _ => None,
        })
        .collect())
}

/// Filters by query similarity, clusters the survivors with DBSCAN, then
/// takes one image per cluster per round (noise last).
pub fn cluster_rerank(c: &Candidates, k: usize, cfg: &DbscanConfig) -> Result<RankedList> {
    let kept: Vec<usize> = c
        .ranked()
        .into_iter()
        .filter(|&i| c.similarities[i] >= cfg.sim_threshold)
        .collect();
    if kept.is_empty() {
        return Ok(RankedList {
            query_id: c.query_id,
            strategy: Strategy::Dbscan,
            k,
            items: Vec::new(),
            flagged: true,
        });
    }
    let points = c.features.select_rows(&kept);
    let local_order: Vec<usize> = (0..kept.len()).collect();
    let labels = dbscan(&points, &local_order, cfg.eps, cfg.min_pts)?;

    // clusters in order of first (most similar) member; noise pseudo-cluster last
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut noise = Vec::new();
    for (local, &global) in kept.iter().enumerate() {
        match labels[local] {
            Some(cl) => {
                let s = *slot_of.entry(cl).or_insert_with(|| {
                    clusters.push(Vec::new());
                    clusters.len() - 1
                });
                clusters[s].push(global);
            }
            None => noise.push(global),
        }
    }
    if !noise.is_empty() {
        clusters.push(noise);
    }
    let mut items = Vec::with_capacity(k);
    let mut round = 0;
    while items.len() < k {
        let mut any = false;
        for members in &clusters {
            if let Some(&i) = members.get(round) {
                any = true;
                if items.len() < k {
                    items.push(c.item(i));
                }
            }
        }
        if !any {
            break;
        }
        round += 1;
    }
    Ok(RankedList {
        query_id: c.query_id,
        strategy: Strategy::Dbscan,
        k,
        flagged: items.len() < k,
        items,
    })
}

pub fn retrieve_cluster(
    query: &QueryRecord,
    corpus: &EmbeddingCorpus,
    k: usize,
    cfg: &DbscanConfig,
    reencoder: Option<&ReEncoderModel>,
) -> Result<RankedList> {
    cluster_rerank(&Candidates::gather(query, corpus, reencoder)?, k, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CategoryId;
    use alloc::vec;

    fn space() -> LabelSpace {
        LabelSpace::new(vec![CategoryId(10), CategoryId(20)]).unwrap()
    }

    /// Five tokens: A = {0.9, 0.8, 0.7}, B = {0.6, 0.5}.
    fn fixture() -> (Matrix, TokenSequence) {
        let s = space();
        let sims = [0.9, 0.8, 0.7, 0.6, 0.5];
        let classes = [0, 0, 0, 1, 1];
        let mut probs = Matrix::zeros(6, s.num_classes());
        probs[(0, s.query())] = 1.0;
        for (i, c) in classes.iter().enumerate() {
            probs[(i + 1, *c)] = 1.0;
        }
        let seq = TokenSequence {
            query_id: QueryId(1),
            tokens: Matrix::zeros(6, 2),
            image_ids: (0..5).map(|i| Some(ImageId(i))).collect(),
            similarities: sims.to_vec(),
            labels: None,
        };
        (probs, seq)
    }

    #[test]
    fn one_per_category() {
        let (p, seq) = fixture();
        let out = post_process(&p, &seq, &space(), &PostProcessConfig { per_category: 1, k: 2 }).unwrap();
        assert_eq!(out.ids(), vec![ImageId(0), ImageId(3)]);
        assert_eq!(out.items[1].predicted, Some(CategoryId(20)));
    }

    #[test]
    fn two_per_category() {
        let (p, seq) = fixture();
        let out = post_process(&p, &seq, &space(), &PostProcessConfig { per_category: 2, k: 4 }).unwrap();
        assert_eq!(out.ids(), vec![ImageId(0), ImageId(1), ImageId(3), ImageId(4)]);
    }

    #[test]
    fn single_category_uses_rounds() {
        let (mut p, seq) = fixture();
        for i in 4..6 {
            p.row_mut(i).fill(0.0);
            p[(i, 0)] = 1.0;
        }
        let out = post_process(&p, &seq, &space(), &PostProcessConfig { per_category: 1, k: 3 }).unwrap();
        assert_eq!(out.ids(), vec![ImageId(0), ImageId(1), ImageId(2)]);
    }

    #[test]
    fn all_irrelevant_falls_back_to_similarity() {
        let (mut p, seq) = fixture();
        let s = space();
        for i in 1..6 {
            p.row_mut(i).fill(0.0);
            p[(i, s.irrelevant())] = 1.0;
        }
        let out = post_process(&p, &seq, &s, &PostProcessConfig { per_category: 1, k: 3 }).unwrap();
        assert!(out.flagged);
        assert_eq!(out.ids(), vec![ImageId(0), ImageId(1), ImageId(2)]);
    }

    #[test]
    fn invalid_config_rejected() {
        let (p, seq) = fixture();
        assert!(post_process(&p, &seq, &space(), &PostProcessConfig { per_category: 0, k: 3 }).is_err());
        assert!(post_process(&p, &seq, &space(), &PostProcessConfig { per_category: 4, k: 3 }).is_err());
    }

    fn cands(sims: &[f64]) -> Candidates {
        let rows: Vec<[f64; 2]> = sims.iter().map(|&s| [s, libm::sqrt(1.0 - s * s)]).collect();
        Candidates::from_parts(
            QueryId(0),
            &[1.0, 0.0],
            (0..sims.len() as u32).map(ImageId).collect(),
            Matrix::from_rows(&rows).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn topk_cases() {
        let c = cands(&[0.1, 0.9, 0.5]);
        assert_eq!(topk(&c, 2).ids(), vec![ImageId(1), ImageId(2)]);
        let all = topk(&c, 5);
        assert_eq!(all.ids(), vec![ImageId(1), ImageId(2), ImageId(0)]);
        assert!(all.flagged);
        let tie = cands(&[0.5, 0.5]);
        assert_eq!(topk(&tie, 1).ids(), vec![ImageId(0)]);
    }

    #[test]
    fn mmr_relevance_only_equals_topk() {
        let c = cands(&[0.1, 0.9, 0.5, 0.7, 0.3]);
        assert_eq!(mmr(&c, 4, 1.0, 200).unwrap().ids(), topk(&c, 4).ids());
        assert!(mmr(&c, 4, 1.5, 200).is_err());
    }

    #[test]
    fn mmr_skips_duplicate() {
        let feats = Matrix::from_rows(&[[0.9, 0.435_889_894_354_067_4], [0.9, 0.435_889_894_354_067_4], [0.6, -0.8]]).unwrap();
        let c = Candidates::from_parts(QueryId(0), &[1.0, 0.0], vec![ImageId(0), ImageId(1), ImageId(2)], feats).unwrap();
        assert_eq!(mmr(&c, 2, 0.5, 200).unwrap().ids(), vec![ImageId(0), ImageId(2)]);
    }

    #[test]
    fn dbscan_degenerate_cases() {
        let c = cands(&[0.99, 0.98, 0.97, 0.96]);
        let huge = DbscanConfig { eps: 10.0, min_pts: 1, sim_threshold: 0.0 };
        assert_eq!(cluster_rerank(&c, 3, &huge).unwrap().ids(), topk(&c, 3).ids());
        let sparse = DbscanConfig { eps: 0.01, min_pts: 9, sim_threshold: 0.0 };
        assert_eq!(cluster_rerank(&c, 4, &sparse).unwrap().ids(), topk(&c, 4).ids());
        let strict = DbscanConfig { eps: 0.1, min_pts: 1, sim_threshold: 0.999 };
        let out = cluster_rerank(&c, 2, &strict).unwrap();
        assert!(out.flagged && out.items.is_empty());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [Strategy::Colt, Strategy::TopK, Strategy::Mmr, Strategy::Dbscan] {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("bm25".parse::<Strategy>().is_err());
    }
}
