use platter::checkpoint::Container;
use platter::corpus::{generate_synthetic_corpus, SyntheticConfig};
use platter::title::{
    finetune_title_model, generate_title, lcs_length, lcs_similarity, mean_lcs, normalize_title, sample_fraction, CaptionerConfig,
    CaptionerHandle, TitleTrainConfig,
};
use proptest::prelude::*;

/// Plain recursive LCS over characters, for short strings.
fn lcs_brute(a: &[char], b: &[char]) -> usize {
    match (a.split_first(), b.split_first()) {
        (Some((x, ra)), Some((y, rb))) if x == y => 1 + lcs_brute(ra, rb),
        (Some((_, ra)), Some((_, rb))) => lcs_brute(ra, b).max(lcs_brute(a, rb)),
        _ => 0,
    }
}

#[test]
fn similarity_examples() {
    let s = lcs_similarity("black bean and rice", "black bean and rice salad").unwrap();
    assert!((s - 0.76).abs() < 1e-12);
    assert_eq!(lcs_similarity("Muffin", "muffin").unwrap(), 1.0);
    assert_eq!(lcs_similarity("xyz", "abc").unwrap(), 0.0);
    assert_eq!(lcs_similarity("black bean and rice salad", "black bean and rice").unwrap(), 1.0);
    assert!(lcs_similarity("muffin", "   ").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn lcs_matches_the_recursive_oracle(a in "[abc ]{0,8}", b in "[abc ]{0,8}") {
        let (x, y): (Vec<char>, Vec<char>) = (a.chars().collect(), b.chars().collect());
        prop_assert_eq!(lcs_length(&x, &y), lcs_brute(&x, &y));
    }

    #[test]
    fn similarity_lies_in_the_unit_interval(a in "[a-e ]{0,12}", b in "[a-e]{1,12}") {
        let s = lcs_similarity(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let n = normalize_title(&b).chars().count() as f64;
        // always a whole number of matched characters over the reference length
        prop_assert!((s * n - (s * n).round()).abs() < 1e-9);
    }

    #[test]
    fn fractions_sample_sorted_distinct_indices(n in 1usize..60, fraction in 0.001f64..1.0, seed in any::<u64>()) {
        let idx = sample_fraction(n, fraction, seed).unwrap();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);
        prop_assert_eq!(idx.len(), k);
        prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(idx.iter().all(|&i| i < n));
    }
}

#[test]
fn toy_captioner_learns_its_training_titles() {
    let ds = generate_synthetic_corpus(&SyntheticConfig::new(16, 24, 64, 5), 0).unwrap();
    let handle = CaptionerHandle::new(CaptionerConfig::toy(), 0).unwrap();
    let config = TitleTrainConfig {
        epochs: 200,
        batch_size: 8,
        learning_rate: 1e-3,
        seed: 0,
    };
    let trained = finetune_title_model(&ds, 1.0, handle, &config, None).unwrap();
    assert_eq!(trained.subset_ids.len(), 16);
    assert_eq!(trained.history.len(), 200);
    let samples: Vec<_> = ds
        .records()
        .iter()
        .map(|r| (trained.handle.image_tensor(&ds, r).unwrap(), r.title.clone()))
        .collect();
    let score = mean_lcs(&trained.handle, &samples).unwrap();
    assert!(score >= 0.9, "mean train LCS {score}");
    assert_eq!(trained.history[trained.best_epoch - 1].dev_lcs, score);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("title.json");
    trained.checkpoint().unwrap().save(&path).unwrap();
    let restored = CaptionerHandle::from_checkpoint(&Container::load(&path).unwrap()).unwrap();
    for (img, _) in &samples {
        assert_eq!(generate_title(img, &restored).unwrap(), generate_title(img, &trained.handle).unwrap());
    }
}

#[test]
fn zero_epochs_keep_the_initial_captioner() {
    let ds = generate_synthetic_corpus(&SyntheticConfig::new(4, 8, 64, 3), 0).unwrap();
    let handle = CaptionerHandle::new(CaptionerConfig::toy(), 5).unwrap();
    let config = TitleTrainConfig {
        epochs: 0,
        ..TitleTrainConfig::default()
    };
    let trained = finetune_title_model(&ds, 0.5, handle.clone(), &config, None).unwrap();
    assert_eq!(trained.handle, handle);
    assert_eq!(trained.best_epoch, 0);
    assert_eq!(trained.subset_ids.len(), 2);
}
