mod common;

use std::collections::BTreeSet;

use common::{oracle_cluster_rerank, oracle_dbscan, oracle_f1, oracle_mmr, oracle_p_cr, oracle_post_process, TableTruth};
use divrank_core::corpus::{CategoryId, ImageId, QueryId};
use divrank_core::metrics::{cluster_recall_at_k, evaluate_run, f1_at_k, precision_at_k};
use divrank_core::nn::{Matrix, RngStream};
use divrank_core::retrieval::{
    cluster_rerank, dbscan, mmr, post_process, topk, Candidates, DbscanConfig, PostProcessConfig, RankedItem,
    RankedList, Strategy,
};
use divrank_core::token_classifier::{LabelSpace, TokenSequence};
use proptest::prelude::*;

const INSTANCES: u64 = 1000;

fn distinct_ids(n: usize, rng: &mut RngStream) -> Vec<ImageId> {
    let mut all: Vec<u32> = (0..40).collect();
    rng.shuffle(&mut all);
    all.into_iter().take(n).map(ImageId).collect()
}

fn list(query: QueryId, ids: &[ImageId], k: usize) -> RankedList {
    RankedList {
        query_id: query,
        strategy: Strategy::TopK,
        k,
        items: ids
            .iter()
            .map(|&image_id| RankedItem {
                image_id,
                similarity: 0.0,
                predicted: None,
            })
            .collect(),
        flagged: false,
    }
}

/// A query with `g` ground-truth categories over `pool` ids; roughly half of
/// the ids are relevant. Returns the truth table and a random list.
fn metric_instance(rng: &mut RngStream) -> (TableTruth, Vec<ImageId>, usize) {
    let q = QueryId(7);
    let pool = 1 + rng.index(12);
    let g = 1 + rng.index(5);
    let ids = distinct_ids(pool, rng);
    let mut truth = TableTruth::default();
    truth.gt_counts.insert(q, g);
    for id in &ids {
        if rng.bernoulli(0.6) {
            truth.categories.insert((q, *id), CategoryId(rng.index(g) as u32));
        }
    }
    let len = rng.index(pool + 1);
    let k = 1 + rng.index(6);
    (truth, ids[..len].to_vec(), k)
}

#[test]
fn metrics_match_one_pass_oracle() {
    let mut rng = RngStream::new(1, "metrics");
    for _ in 0..INSTANCES {
        let (truth, ids, k) = metric_instance(&mut rng);
        let l = list(QueryId(7), &ids, k);
        let (p, cr) = oracle_p_cr(&ids, QueryId(7), &truth, k);
        let gp = precision_at_k(&l, &truth, k).unwrap();
        let gcr = cluster_recall_at_k(&l, &truth, k).unwrap();
        assert!((gp - p).abs() <= 1e-12 && (gcr - cr).abs() <= 1e-12);
        assert!((f1_at_k(gp, gcr) - oracle_f1(p, cr)).abs() <= 1e-12);
    }
}

#[test]
fn run_aggregation_matches_oracle() {
    let mut rng = RngStream::new(2, "runs");
    for _ in 0..100 {
        let mut truth = TableTruth::default();
        let mut runs = Vec::new();
        let mut pairs = Vec::new();
        let k = 1 + rng.index(6);
        for qi in 0..1 + rng.index(8) as u32 {
            let (t, ids, _) = metric_instance(&mut rng);
            let q = QueryId(qi);
            truth.gt_counts.insert(q, t.gt_counts[&QueryId(7)]);
            for ((_, id), c) in t.categories {
                truth.categories.insert((q, id), c);
            }
            pairs.push(oracle_p_cr(&ids, q, &truth, k));
            runs.push(list(q, &ids, k));
        }
        let got = evaluate_run(&runs, &truth, &[k]).unwrap();
        let s = got.at(k).unwrap();
        let n = pairs.len() as f64;
        let p = pairs.iter().map(|x| x.0).sum::<f64>() / n;
        let cr = pairs.iter().map(|x| x.1).sum::<f64>() / n;
        let per_query = pairs.iter().map(|&(a, b)| oracle_f1(a, b)).sum::<f64>() / n;
        assert!((s.precision - p).abs() <= 1e-12);
        assert!((s.cluster_recall - cr).abs() <= 1e-12);
        assert!((s.f1 - oracle_f1(p, cr)).abs() <= 1e-12);
        assert!((s.f1_per_query_mean - per_query).abs() <= 1e-12);
        assert_eq!(s.n_queries, pairs.len());
    }
}

const CATEGORIES: u32 = 4;

fn space() -> LabelSpace {
    LabelSpace::new((0..CATEGORIES).map(CategoryId).collect()).unwrap()
}

/// Token sequence with `real` images (similarities on a coarse grid so ties
/// occur) and `pad` padding rows, plus the class each row is predicted as.
fn post_instance(rng: &mut RngStream) -> (TokenSequence, Matrix, Vec<usize>) {
    let real = 1 + rng.index(12);
    let pad = rng.index(3);
    let ids = distinct_ids(real, rng);
    let mut sims: Vec<f64> = (0..real).map(|_| rng.index(6) as f64 / 5.0).collect();
    sims.sort_by(|a, b| b.total_cmp(a));
    let n = real + pad;
    let classes_total = CATEGORIES as usize + 2;
    let mut probs = Matrix::zeros(n + 1, classes_total);
    let mut classes = Vec::new();
    for i in 0..=n {
        // mostly categories, sometimes IRRELEVANT or QUERY
        let c = if rng.bernoulli(0.75) { rng.index(CATEGORIES as usize) } else { CATEGORIES as usize + rng.index(2) };
        for j in 0..classes_total {
            probs[(i, j)] = if j == c { 0.6 } else { 0.4 / (classes_total - 1) as f64 };
        }
        classes.push(c);
    }
    let mut image_ids: Vec<Option<ImageId>> = ids.into_iter().map(Some).collect();
    image_ids.extend(std::iter::repeat_n(None, pad));
    sims.extend(std::iter::repeat_n(0.0, pad));
    let seq = TokenSequence {
        query_id: QueryId(0),
        tokens: Matrix::zeros(n + 1, 2),
        image_ids,
        similarities: sims,
        labels: None,
    };
    (seq, probs, classes)
}

fn post_oracle(seq: &TokenSequence, classes: &[usize], x: usize, k: usize) -> Vec<ImageId> {
    let mut ids = Vec::new();
    let mut sims = Vec::new();
    let mut cls = Vec::new();
    for (i, id) in seq.image_ids.iter().enumerate() {
        if let Some(id) = id {
            ids.push(*id);
            sims.push(seq.similarities[i]);
            let c = classes[i + 1];
            cls.push((c < CATEGORIES as usize).then_some(c));
        }
    }
    oracle_post_process(&ids, &sims, &cls, x, k)
}

#[test]
fn post_process_matches_sort_key_oracle() {
    let mut rng = RngStream::new(3, "post");
    let labels = space();
    for _ in 0..INSTANCES {
        let (seq, probs, classes) = post_instance(&mut rng);
        let k = 1 + rng.index(6);
        let x = 1 + rng.index(k);
        let cfg = PostProcessConfig { per_category: x, k };
        let got = post_process(&probs, &seq, &labels, &cfg).unwrap();
        assert_eq!(got.ids(), post_oracle(&seq, &classes, x, k));
        let any_category = classes[1..]
            .iter()
            .zip(&seq.image_ids)
            .any(|(&c, id)| id.is_some() && c < CATEGORIES as usize);
        assert_eq!(got.flagged, !any_category);
    }
}

fn candidates(rng: &mut RngStream, dim: usize, duplicates: bool) -> (Candidates, Vec<f64>, Vec<Vec<f64>>) {
    let n = 1 + rng.index(12);
    let ids = distinct_ids(n, rng);
    let query: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let mut feats: Vec<Vec<f64>> = Vec::new();
    for i in 0..n {
        if duplicates && i > 0 && rng.bernoulli(0.2) {
            let j = rng.index(i);
            feats.push(feats[j].clone());
        } else {
            feats.push((0..dim).map(|_| rng.normal()).collect());
        }
    }
    let c = Candidates::from_parts(QueryId(1), &query, ids, Matrix::from_rows(&feats).unwrap()).unwrap();
    (c, query, feats)
}

#[test]
fn mmr_matches_exhaustive_greedy_oracle() {
    let mut rng = RngStream::new(4, "mmr");
    for _ in 0..INSTANCES {
        let (c, q, feats) = candidates(&mut rng, 3, true);
        let k = 1 + rng.index(6);
        let lambda = [0.0, 0.3, 0.5, 0.7, 1.0][rng.index(5)];
        let pool = 1 + rng.index(12);
        let got = mmr(&c, k, lambda, pool).unwrap();
        assert_eq!(got.ids(), oracle_mmr(&c.ids, &q, &feats, k, lambda, pool));
    }
}

#[test]
fn dbscan_matches_union_find_oracle() {
    let mut rng = RngStream::new(5, "dbscan");
    for _ in 0..INSTANCES {
        let n = 1 + rng.index(12);
        // a few blobs so that clusters, borders and noise all occur
        let centres: Vec<[f64; 2]> = (0..3).map(|_| [3.0 * rng.normal(), 3.0 * rng.normal()]).collect();
        let pts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = centres[rng.index(3)];
                vec![c[0] + rng.normal(), c[1] + rng.normal()]
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let eps = 0.3 + 1.5 * rng.uniform();
        let min_pts = 1 + rng.index(4);
        let got = dbscan(&Matrix::from_rows(&pts).unwrap(), &order, eps, min_pts).unwrap();
        assert_eq!(got, oracle_dbscan(&pts, &order, eps, min_pts));
    }
}

#[test]
fn cluster_rerank_matches_oracle() {
    let mut rng = RngStream::new(6, "cluster");
    for _ in 0..INSTANCES {
        let (c, q, feats) = candidates(&mut rng, 2, false);
        let k = 1 + rng.index(6);
        let cfg = DbscanConfig {
            eps: 0.3 + 1.5 * rng.uniform(),
            min_pts: 1 + rng.index(4),
            sim_threshold: rng.uniform() * 1.2 - 0.6,
        };
        let got = cluster_rerank(&c, k, &cfg).unwrap();
        let want = oracle_cluster_rerank(&c.ids, &q, &feats, k, cfg.eps, cfg.min_pts, cfg.sim_threshold);
        assert_eq!(got.ids(), want);
        assert_eq!(got.flagged, want.len() < k);
    }
}

fn no_duplicates(ids: &[ImageId]) -> bool {
    ids.iter().collect::<BTreeSet<_>>().len() == ids.len()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn lists_are_short_and_duplicate_free(seed in 0u64..100_000, k in 1usize..8) {
        let mut rng = RngStream::new(seed, "inv");
        let (c, _, _) = candidates(&mut rng, 3, true);
        let (seq, probs, _) = post_instance(&mut rng);
        let lists = [
            topk(&c, k),
            mmr(&c, k, 0.7, 12).unwrap(),
            cluster_rerank(&c, k, &DbscanConfig::default()).unwrap(),
            post_process(&probs, &seq, &space(), &PostProcessConfig { per_category: 1, k }).unwrap(),
        ];
        for l in &lists {
            prop_assert!(l.items.len() <= k);
            prop_assert!(no_duplicates(&l.ids()));
        }
    }

    #[test]
    fn relevance_only_mmr_is_topk(seed in 0u64..100_000, k in 1usize..8) {
        let (c, _, _) = candidates(&mut RngStream::new(seed, "lam"), 4, true);
        prop_assert_eq!(mmr(&c, k, 1.0, c.len()).unwrap().ids(), topk(&c, k).ids());
    }

    #[test]
    fn one_per_category_covers_k_categories(seed in 0u64..100_000, k in 1usize..5) {
        let (seq, probs, classes) = post_instance(&mut RngStream::new(seed, "cover"));
        let predicted: BTreeSet<usize> = classes[1..]
            .iter()
            .zip(&seq.image_ids)
            .filter(|(c, id)| id.is_some() && **c < CATEGORIES as usize)
            .map(|(c, _)| *c)
            .collect();
        prop_assume!(predicted.len() >= k);
        let got = post_process(&probs, &seq, &space(), &PostProcessConfig { per_category: 1, k }).unwrap();
        let covered: BTreeSet<_> = got.items.iter().map(|i| i.predicted).collect();
        prop_assert_eq!(covered.len(), k);
        prop_assert!(covered.iter().all(Option::is_some));
    }

    #[test]
    fn metric_invariants(seed in 0u64..100_000) {
        let mut rng = RngStream::new(seed, "m");
        let (truth, ids, k) = metric_instance(&mut rng);
        let q = QueryId(7);
        let l = list(q, &ids, k);
        let p = precision_at_k(&l, &truth, k).unwrap();
        let cr = cluster_recall_at_k(&l, &truth, k).unwrap();
        let f1 = f1_at_k(p, cr);
        for v in [p, cr, f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(f1 <= 2.0 * p.min(cr) + 1e-15);
        // CR never falls as k grows
        let mut prev = 0.0;
        for kk in 1..=12 {
            let v = cluster_recall_at_k(&l, &truth, kk).unwrap();
            prop_assert!(v >= prev);
            prev = v;
        }
        // an irrelevant item after rank k changes nothing at k
        let mut longer: Vec<ImageId> = ids.iter().take(k).copied().collect();
        while longer.len() < k {
            longer.push(ImageId(1000 + longer.len() as u32));
        }
        let base = list(q, &longer, k);
        longer.push(ImageId(999));
        let ext = list(q, &longer, k);
        prop_assert_eq!(precision_at_k(&base, &truth, k).unwrap(), precision_at_k(&ext, &truth, k).unwrap());
        prop_assert_eq!(cluster_recall_at_k(&base, &truth, k).unwrap(), cluster_recall_at_k(&ext, &truth, k).unwrap());
    }
}
