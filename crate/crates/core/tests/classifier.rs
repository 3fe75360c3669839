use cgbc_core::classifier::{
    argmax, classify_all, evaluate, read_labels, score_image, write_labels, ClassPromptSet,
    ClassifierError, ProbMode,
};
use cgbc_core::embedding::{dot, l2_normalize, sim_to_prob, EmbeddingContainer, Role};
use cgbc_core::rng::stream;
use cgbc_core::soft_trim::{AggregatorConfig, AggregatorMode};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

fn unit_rows(n: usize, dim: usize, seed: u64, prefix: &str, role: Role) -> EmbeddingContainer {
    let mut rng = stream(seed, &[]);
    let rows = (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect::<Vec<f32>>()
        })
        .collect();
    let names = (0..n).map(|i| format!("{prefix}{i}")).collect();
    l2_normalize(&EmbeddingContainer::from_rows(role, names, rows, false).unwrap()).unwrap()
}

fn prompt_set(k: usize, m: usize, dim: usize, seed: u64) -> ClassPromptSet {
    let prompts = (0..k)
        .map(|c| unit_rows(m + c, dim, seed + c as u64, "p", Role::Prompt))
        .collect();
    ClassPromptSet::new((0..k).map(|c| format!("class{c}")).collect(), prompts).unwrap()
}

proptest! {
    #[test]
    fn prior_mean_matches_brute_force(seed in any::<u64>()) {
        let set = prompt_set(3, 4, 8, seed);
        let image = unit_rows(1, 8, seed ^ 1, "i", Role::Image);
        let cfg = AggregatorConfig::with_mode(AggregatorMode::PriorMean);
        let rec = score_image("i0", image.row(0), &set, &cfg, ProbMode::Affine, 1.0).unwrap();
        for c in 0..3 {
            let p = set.prompts(c);
            let want = p.rows().map(|r| sim_to_prob(dot(image.row(0), r))).sum::<f64>() / p.count() as f64;
            prop_assert!((rec.class_scores[c] - want).abs() < 1e-12);
        }
        prop_assert_eq!(rec.predicted, argmax(&rec.class_scores));
    }

    #[test]
    fn prompt_order_does_not_matter(seed in any::<u64>()) {
        let set = prompt_set(3, 6, 8, seed);
        let mut rng = stream(seed, &[9]);
        let shuffled: Vec<EmbeddingContainer> = (0..3)
            .map(|c| {
                let mut idx: Vec<usize> = (0..set.prompts(c).count()).collect();
                idx.shuffle(&mut rng);
                set.prompts(c).select(&idx).unwrap()
            })
            .collect();
        let other = ClassPromptSet::new(set.class_names().to_vec(), shuffled).unwrap();
        let images = unit_rows(5, 8, seed ^ 2, "i", Role::Image);
        let cfg = AggregatorConfig::default();
        let a = classify_all(&images, &set, &cfg, ProbMode::Affine, 1.0).unwrap();
        let b = classify_all(&images, &other, &cfg, ProbMode::Affine, 1.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(x.predicted, y.predicted);
            for (p, q) in x.class_scores.iter().zip(&y.class_scores) {
                prop_assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_scores_form_a_distribution(seed in any::<u64>(), scale in 0.1f64..200.0) {
        let set = prompt_set(4, 5, 6, seed);
        let image = unit_rows(1, 6, seed ^ 3, "i", Role::Image);
        let cfg = AggregatorConfig::default();
        let soft = score_image("i", image.row(0), &set, &cfg, ProbMode::SoftmaxOverClasses, scale).unwrap();
        let affine = score_image("i", image.row(0), &set, &cfg, ProbMode::Affine, scale).unwrap();
        prop_assert!((soft.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(soft.class_scores.iter().all(|p| *p >= 0.0));
        prop_assert!(affine.class_scores.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

#[test]
fn argmax_prefers_the_lowest_index_on_ties() {
    assert_eq!(argmax(&[0.2, 0.7, 0.7, 0.1]), 1);
    assert_eq!(argmax(&[0.5]), 0);
}

#[test]
fn records_keep_image_order() {
    let set = prompt_set(2, 3, 4, 1);
    let images = unit_rows(20, 4, 2, "img", Role::Image);
    let recs = classify_all(
        &images,
        &set,
        &AggregatorConfig::default(),
        ProbMode::Affine,
        1.0,
    )
    .unwrap();
    let names: Vec<&str> = recs.iter().map(|r| r.image_name.as_str()).collect();
    assert_eq!(
        names,
        images
            .names()
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
    );
}

#[test]
fn evaluation_counts_correct_predictions() {
    let set = prompt_set(3, 4, 6, 4);
    let images = unit_rows(12, 6, 5, "img", Role::Image);
    let cfg = AggregatorConfig::default();
    let recs = classify_all(&images, &set, &cfg, ProbMode::Affine, 1.0).unwrap();
    let labels: Vec<usize> = recs.iter().map(|r| r.predicted).collect();
    let (_, report) = evaluate(&images, &labels, &set, &cfg, ProbMode::Affine, 1.0).unwrap();
    assert_eq!(report.correct, 12);
    assert_eq!(report.top1_accuracy, 1.0);
    assert_eq!(report.per_class_support.iter().sum::<usize>(), 12);
}

#[test]
fn labels_round_trip_by_image_name() {
    let dir = tempfile::tempdir().unwrap();
    let images = unit_rows(4, 3, 6, "img", Role::Image);
    let path = dir.path().join("labels.json");
    write_labels(&path, &images, &[2, 0, 1, 2]).unwrap();
    assert_eq!(read_labels(&path, &images).unwrap(), vec![2, 0, 1, 2]);
    let reordered = images.select(&[3, 1]).unwrap();
    assert_eq!(read_labels(&path, &reordered).unwrap(), vec![2, 0]);
    std::fs::write(&path, "{\"img0\": 1}").unwrap();
    assert!(matches!(
        read_labels(&path, &images),
        Err(ClassifierError::Labels { .. })
    ));
}

#[test]
fn mismatched_inputs_are_errors() {
    let a = unit_rows(2, 4, 1, "p", Role::Prompt);
    let b = unit_rows(2, 5, 2, "p", Role::Prompt);
    assert!(ClassPromptSet::new(vec!["a".into(), "b".into()], vec![a.clone(), b]).is_err());
    assert!(ClassPromptSet::new(vec!["a".into()], vec![a.clone(), a.clone()]).is_err());
    let set = ClassPromptSet::new(vec!["a".into()], vec![a]).unwrap();
    let cfg = AggregatorConfig::default();
    assert!(score_image("x", &[1.0, 0.0], &set, &cfg, ProbMode::Affine, 1.0).is_err());
}
