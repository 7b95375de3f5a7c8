use divrank_core::augmentation::{augment_sequence, perturb_image, perturb_query, AugmentationConfig};
use divrank_core::corpus::{CategoryId, ImageId, QueryId};
use divrank_core::nn::{Matrix, RngStream};
use divrank_core::token_classifier::{LabelSpace, TokenSequence};
use proptest::prelude::*;

fn space() -> LabelSpace {
    LabelSpace::new(vec![CategoryId(0), CategoryId(1), CategoryId(2)]).unwrap()
}

/// Six image tokens, at least one relevant, sometimes a padding tail.
fn sequence(rng: &mut RngStream, space: &LabelSpace) -> TokenSequence {
    let n = 6;
    let real = 1 + rng.index(n);
    let mut tokens = Matrix::zeros(n + 1, 4);
    for i in 0..=real {
        tokens.row_mut(i).iter_mut().for_each(|v| *v = rng.normal());
    }
    let mut labels = vec![space.query()];
    labels.push(rng.index(3));
    for i in 1..n {
        labels.push(if i < real {
            if rng.bernoulli(0.5) {
                rng.index(3)
            } else {
                space.irrelevant()
            }
        } else {
            space.irrelevant()
        });
    }
    TokenSequence {
        query_id: QueryId(0),
        tokens,
        image_ids: (0..n).map(|i| (i < real).then_some(ImageId(i as u32))).collect(),
        similarities: (0..n).map(|i| if i < real { 1.0 - 0.1 * i as f64 } else { 0.0 }).collect(),
        labels: Some(labels),
    }
}

#[test]
fn operation_frequencies_match_configuration() {
    let cfg = AugmentationConfig::default();
    let space = space();
    let mut data = RngStream::new(1, "seq");
    let mut rng = RngStream::new(1, "aug");
    let (mut seqs, mut queries) = (0usize, 0usize);
    let (mut images, mut deleted, mut copied, mut relevant, mut mixed) = (0, 0, 0, 0, 0);
    for _ in 0..100_000 {
        let seq = sequence(&mut data, &space);
        let (_, stats) = augment_sequence(&seq, &cfg, &space, &mut rng).unwrap();
        seqs += 1;
        queries += usize::from(stats.query_perturbed);
        images += stats.image_tokens;
        deleted += stats.deleted;
        copied += stats.copied;
        relevant += stats.relevant_after_copy;
        mixed += stats.image_perturbed;
    }
    let freq = [
        queries as f64 / seqs as f64,
        deleted as f64 / images as f64,
        copied as f64 / (images - deleted) as f64,
        mixed as f64 / relevant as f64,
    ];
    let want = [cfg.p_query, cfg.p_delete, cfg.p_copy, cfg.p_image];
    assert_eq!(want, [0.5, 0.2, 0.2, 0.2]);
    for (f, w) in freq.iter().zip(want) {
        assert!((f - w).abs() <= 0.01, "{freq:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn labels_stay_aligned(seed in 0u64..100_000) {
        let space = space();
        let seq = sequence(&mut RngStream::new(seed, "seq"), &space);
        let (out, _) = augment_sequence(&seq, &AugmentationConfig::default(), &space, &mut RngStream::new(seed, "aug")).unwrap();
        let labels = out.labels.as_ref().unwrap();
        prop_assert_eq!(out.tokens.rows(), seq.tokens.rows());
        prop_assert_eq!(labels.len(), out.tokens.rows());
        prop_assert_eq!(labels[0], space.query());
        for i in 0..out.image_rows() {
            let label = labels[i + 1];
            prop_assert!(label != space.query());
            match out.image_ids[i] {
                None => {
                    prop_assert_eq!(label, space.irrelevant());
                    prop_assert!(out.tokens.row(i + 1).iter().all(|v| *v == 0.0));
                }
                Some(id) => {
                    // a surviving token keeps its original label
                    let src = seq.image_ids.iter().position(|x| *x == Some(id)).unwrap();
                    prop_assert_eq!(label, seq.labels.as_ref().unwrap()[src + 1]);
                }
            }
        }
    }

    #[test]
    fn mixup_keeps_the_larger_share(lambda in 0.0f64..=1.0, a in prop::collection::vec(-2.0f64..2.0, 3), b in prop::collection::vec(-2.0f64..2.0, 3)) {
        let hi = lambda.max(1.0 - lambda);
        let q = perturb_query(&a, &b, lambda);
        let v = perturb_image(&a, &b, lambda);
        for i in 0..3 {
            let want = hi * a[i] + (1.0 - hi) * b[i];
            prop_assert!((q[i] - want).abs() <= 1e-12);
            prop_assert!((v[i] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn disabled_is_identity(seed in 0u64..100_000) {
        let space = space();
        let seq = sequence(&mut RngStream::new(seed, "seq"), &space);
        let (out, _) = augment_sequence(&seq, &AugmentationConfig::disabled(), &space, &mut RngStream::new(seed, "aug")).unwrap();
        prop_assert_eq!(out, seq);
    }
}
