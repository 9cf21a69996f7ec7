use std::sync::Arc;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scendbg_core::anchors::{explain_instance, AnchorConfig, Discretizer};
use scendbg_core::detector::{Detection, FaultModelConfig, SyntheticDetector};
use scendbg_core::dsl::{feature_schema, parse};
use scendbg_core::evaluator::{
    iou, match_and_score, EvaluationConfig, ImageEvaluation, Label, LabeledExample,
};
use scendbg_core::pipeline::learnable_space;
use scendbg_core::refine::{feature_space_coverage, splice, validate, ValidationConfig};
use scendbg_core::rules::{normalize, select_best, Method, Predicate, Provenance, Rule, Target, View};
use scendbg_core::sampler::{FeatureVector, Sampler, SamplerConfig, Value};
use scendbg_core::trees::{
    fit_tree, gini, FeatureInfo, FeatureSpace, TrainingSet, TreeConfig, BINARY_CLASSES,
};
use scendbg_core::whitebox::{augment_labels, binarize, mine_pattern};
use scendbg_core::world::BoundingBox;

const DT: Provenance = Provenance::new(Method::Dt, View::BlackBox);

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..300.0f64, 0.0..300.0f64, 1.0..100.0f64, 1.0..100.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h))
}

fn max_matching(gt: &[BoundingBox], det: &[Detection], i: usize, used: &mut [bool]) -> usize {
    if i == gt.len() {
        return 0;
    }
    let mut best = max_matching(gt, det, i + 1, used);
    for j in 0..det.len() {
        if !used[j] && iou(&gt[i], &det[j].bbox) > 0.5 {
            used[j] = true;
            best = best.max(1 + max_matching(gt, det, i + 1, used));
            used[j] = false;
        }
    }
    best
}

fn detections(boxes: Vec<BoundingBox>) -> Vec<Detection> {
    boxes
        .into_iter()
        .map(|bbox| Detection {
            bbox,
            confidence: 1.0,
        })
        .collect()
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn match_counts_are_consistent(
        gt in prop::collection::vec(bbox(), 0..5),
        det in prop::collection::vec(bbox(), 0..5),
    ) {
        let d = detections(det);
        let e = match_and_score(&gt, &d, 0.5);
        prop_assert_eq!(e.tp + e.fn_, gt.len());
        prop_assert_eq!(e.tp + e.fp, d.len());
        prop_assert!(e.tp <= gt.len().min(d.len()));
        prop_assert!((0.0..=1.0).contains(&e.f1));
    }

    // Detections are jittered copies, so many pairs clear the threshold.
    #[test]
    fn greedy_is_optimal_with_one_candidate_per_box(
        gt in prop::collection::vec(bbox(), 0..5),
        picks in prop::collection::vec((0usize..4, -0.3..0.3f64, -0.3..0.3f64), 0..5),
    ) {
        let det: Vec<BoundingBox> = picks
            .iter()
            .filter(|(i, ..)| *i < gt.len())
            .map(|&(i, dx, dy)| {
                let g = &gt[i];
                BoundingBox::new(g.x_min + dx * g.width(), g.y_min + dy * g.height(), g.x_max + dx * g.width(), g.y_max + dy * g.height())
            })
            .collect();
        let d = detections(det);
        let candidates_ok = gt
            .iter()
            .all(|g| d.iter().filter(|x| iou(g, &x.bbox) > 0.5).count() <= 1);
        prop_assume!(candidates_ok);
        let e = match_and_score(&gt, &d, 0.5);
        prop_assert_eq!(e.tp, max_matching(&gt, &d, 0, &mut vec![false; d.len()]));
    }
}

fn predicate() -> impl Strategy<Value = Predicate> {
    let feature = prop::sample::select(vec!["a", "b"]).prop_map(String::from);
    prop_oneof![
        (feature.clone(), -10.0..10.0f64).prop_map(|(feature, value)| Predicate::Ge { feature, value }),
        (feature.clone(), -10.0..10.0f64).prop_map(|(feature, value)| Predicate::Gt { feature, value }),
        (feature.clone(), -10.0..10.0f64).prop_map(|(feature, value)| Predicate::Le { feature, value }),
        (feature, -10.0..10.0f64).prop_map(|(feature, value)| Predicate::Lt { feature, value }),
        prop::sample::subsequence(vec!["x", "y", "z"], 1..=3).prop_map(|v| Predicate::In {
            feature: "c".into(),
            values: v.into_iter().map(String::from).collect(),
        }),
    ]
}

const ABC: &str = "param a = uniform(-10, 10)\nparam b = uniform(-10, 10)\nparam c = choice(\"x\", \"y\", \"z\")\nego = car(x: 0, y: 0)\n";

fn labelled(n: usize, seed: u64) -> (Arc<scendbg_core::dsl::Schema>, Vec<LabeledExample>) {
    let p = parse(ABC).unwrap();
    let sampler = Sampler::new(&p);
    let a = sampler.schema().index_of("a").unwrap();
    let data = sampler
        .sample(n, &SamplerConfig::with_seed(seed))
        .unwrap()
        .into_iter()
        .map(|f| {
            let label = if f.values[a].as_num().unwrap() > 2.0 {
                Label::Incorrect
            } else {
                Label::Correct
            };
            LabeledExample {
                features: f,
                evaluation: ImageEvaluation::from_counts(1, 0, 0),
                label,
                activations: None,
                augmented: None,
            }
        })
        .collect();
    (sampler.schema().clone(), data)
}

proptest! {
    #[test]
    fn normalization_is_idempotent(preds in prop::collection::vec(predicate(), 0..6)) {
        let once = normalize(&preds);
        prop_assert_eq!(normalize(&once), once.clone());
        let features: Vec<&str> = once.iter().map(|p| p.feature()).collect();
        let mut dedup = features.clone();
        dedup.dedup();
        prop_assert_eq!(features.len(), dedup.len());
    }

    #[test]
    fn normalization_preserves_matches(preds in prop::collection::vec(predicate(), 1..6), seed in 0u64..1000) {
        let (schema, data) = labelled(50, seed);
        let raw = Rule::new(Target::Incorrect, preds.clone(), DT);
        let norm = Rule::new(Target::Incorrect, normalize(&preds), DT);
        for e in &data {
            prop_assert_eq!(raw.matches(&schema, &e.features).unwrap(), norm.matches(&schema, &e.features).unwrap());
        }
    }

    #[test]
    fn lower_and_upper_bounds_merge_into_an_interval(lo in -10.0..0.0f64, hi in 0.0..10.0f64) {
        let n = normalize(&[
            Predicate::Ge { feature: "a".into(), value: lo },
            Predicate::Le { feature: "a".into(), value: hi },
        ]);
        prop_assert_eq!(n, vec![Predicate::Interval {
            feature: "a".into(),
            lo,
            hi,
            lo_inclusive: true,
            hi_inclusive: true,
        }]);
    }

    #[test]
    fn measuring_ignores_data_order(preds in prop::collection::vec(predicate(), 0..4), seed in 0u64..1000) {
        let (schema, mut data) = labelled(120, seed);
        let rule = Rule::new(Target::Incorrect, preds, DT);
        let before = rule.measure(&schema, &data).unwrap();
        data.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(before, rule.measure(&schema, &data).unwrap());
    }

    #[test]
    fn best_rule_ignores_input_order(
        rules in prop::collection::vec(
            (prop::collection::vec(predicate(), 0..3), 0u8..4, 0u8..4),
            1..8,
        ),
        seed in 0u64..1000,
    ) {
        // Coarse precision and coverage values force ties.
        let mut rules: Vec<Rule> = rules
            .into_iter()
            .map(|(p, prec, cov)| {
                let mut r = Rule::new(Target::Incorrect, p, DT);
                r.precision = prec as f64 / 4.0;
                r.coverage = cov as f64 / 4.0;
                r
            })
            .collect();
        let best = select_best(&rules).unwrap().clone();
        rules.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(select_best(&rules).unwrap(), &best);
    }
}

fn dataset() -> impl Strategy<Value = TrainingSet> {
    (2usize..150, 1usize..4, any::<u64>()).prop_map(|(n, p, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = vec![FeatureInfo::numeric("x0", 0)];
        for j in 1..p {
            if j == 1 {
                features.push(FeatureInfo {
                    name: "c1".into(),
                    slot: 1,
                    levels: Some(["a", "b", "c", "d"].iter().map(|s| Arc::from(*s)).collect()),
                });
            } else {
                features.push(FeatureInfo::numeric(format!("x{j}"), j));
            }
        }
        let space = Arc::new(FeatureSpace::new(features).unwrap());
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..p)
                    .map(|j| {
                        if j == 1 {
                            rng.random_range(0..4) as f64
                        } else {
                            rng.random_range(0.0..1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let y = rows
            .iter()
            .map(|r| usize::from(r[0] + rng.random_range(-0.3..0.3) > 0.5))
            .collect();
        TrainingSet::new(space, rows, y, BINARY_CLASSES.to_vec()).unwrap()
    })
}

fn row_value(space: &FeatureSpace, row: &[f64], name: &str) -> Value {
    let j = space.features.iter().position(|f| f.name == name).unwrap();
    match &space.features[j].levels {
        Some(l) => Value::Cat(l[row[j] as usize].clone()),
        None => Value::Num(row[j]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn two_class_gini(p in 0.0..=1.0f64, w in 0.1..100.0f64) {
        prop_assert!((gini(&[p * w, (1.0 - p) * w]) - 2.0 * p * (1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn leaves_partition_the_training_rows(ts in dataset(), seed in any::<u64>()) {
        let cfg = TreeConfig { min_split: 4, min_bucket: 2, complexity_penalty: 0.0, ..TreeConfig::default() };
        let tree = fit_tree(&ts, &cfg, seed).unwrap();
        let paths = tree.leaf_paths();
        let mut leaf_rows = vec![0usize; tree.nodes.len()];
        for row in &ts.rows {
            let matching: Vec<usize> = paths
                .iter()
                .filter(|(_, preds)| preds.iter().all(|p| p.holds(&row_value(&ts.space, row, p.feature()))))
                .map(|(id, _)| *id)
                .collect();
            prop_assert_eq!(matching.len(), 1);
            prop_assert_eq!(matching[0], tree.leaf_of(row));
            leaf_rows[matching[0]] += 1;
        }
        let counted: usize = paths.iter().map(|(id, _)| tree.nodes[*id].counts().iter().sum::<usize>()).sum();
        prop_assert_eq!(counted, ts.len());
        for (id, _) in &paths {
            prop_assert_eq!(tree.nodes[*id].counts().iter().sum::<usize>(), leaf_rows[*id]);
        }
    }
}

fn activation_data(n: usize, seed: u64, flip: f64) -> Vec<LabeledExample> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let incorrect = rng.random::<f64>() < 0.3;
            let mut acts: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            let on = incorrect != (rng.random::<f64>() < flip);
            acts[2] = if on { 0.7 } else { -0.7 };
            LabeledExample {
                features: FeatureVector {
                    values: Vec::new(),
                    seed_index: i as u64,
                },
                evaluation: ImageEvaluation::from_counts(0, 0, 1),
                label: if incorrect {
                    Label::Incorrect
                } else {
                    Label::Correct
                },
                activations: Some(acts),
                augmented: None,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn binarize_keeps_length(v in prop::collection::vec(-5.0..5.0f64, 0..40)) {
        let b = binarize(&v);
        prop_assert_eq!(b.len(), v.len());
        prop_assert_eq!(b, binarize(&v));
    }

    #[test]
    fn pattern_support_matches_recount_and_augmentation_partitions(
        seed in any::<u64>(),
        flip in 0.0..0.3f64,
    ) {
        let mut data = activation_data(200, seed, flip);
        let cp = mine_pattern(&data, Label::Correct, &TreeConfig::default(), seed).ok();
        let ip = mine_pattern(&data, Label::Incorrect, &TreeConfig::default(), seed).ok();
        for p in cp.iter().chain(ip.iter()) {
            let recount = p.support_on(&data);
            prop_assert!((recount - p.support).abs() < 1e-12);
        }
        augment_labels(&mut data, cp.as_ref(), ip.as_ref());
        for label in [Label::Correct, Label::Incorrect] {
            let total = data.iter().filter(|e| e.label == label).count();
            let split = data
                .iter()
                .filter(|e| e.augmented.is_some_and(|t| t.binary() == label))
                .count();
            prop_assert_eq!(total, split);
        }
        for e in &data {
            prop_assert_eq!(e.augmented.unwrap().binary(), e.label);
        }
    }
}

const UVCD: &str = r#"
param u = uniform(0, 1)
param v = uniform(0, 1)
param c = choice("a", "b", "c")
param d = choice("x", "y")
ego = car(x: 0, y: 0)
"#;

/// Probability of `u` falling inside the bounds of an interval-like predicate.
fn interval_mass(p: &Predicate, lo0: f64, hi0: f64) -> f64 {
    let (lo, hi) = p.bounds().unwrap();
    let lo = lo.map_or(lo0, |(v, _)| v.max(lo0));
    let hi = hi.map_or(hi0, |(v, _)| v.min(hi0));
    (hi - lo).max(0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn anchors_cover_their_instance(index in 0u64..10_000, seed in any::<u64>()) {
        let p = parse(UVCD).unwrap();
        let sampler = Sampler::new(&p);
        let schema = sampler.schema().clone();
        let rows = sampler.sample(300, &SamplerConfig::with_seed(1)).unwrap();
        let disc = Discretizer::fit(&learnable_space(&schema), &rows, 4);
        let (u, c) = (schema.index_of("u").unwrap(), schema.index_of("c").unwrap());
        let surrogate = move |f: &FeatureVector| {
            if f.values[u].as_num().unwrap() < 0.6 && f.values[c].as_cat() == Some("a") {
                Target::Incorrect
            } else {
                Target::Correct
            }
        };
        let inst = sampler.sample_one(&SamplerConfig::with_seed(2), index).unwrap();
        let target = surrogate(&inst);
        let a = explain_instance(&inst, target, &surrogate, &sampler, &disc, &rows, &AnchorConfig::default(), seed).unwrap();
        let rule = Rule::new(target, a.predicates.clone(), DT);
        prop_assert!(rule.matches(&schema, &inst).unwrap());
    }

    // The positive region u <= cut ∧ c = a lines up with the bins, so every
    // bin predicate of an instance inside it can only raise exact precision.
    #[test]
    fn bin_predicates_raise_exact_precision(index in 0u64..10_000, order_seed in any::<u64>()) {
        let p = parse(UVCD).unwrap();
        let sampler = Sampler::new(&p);
        let schema = sampler.schema().clone();
        let rows = sampler.sample(300, &SamplerConfig::with_seed(1)).unwrap();
        let disc = Discretizer::fit(&learnable_space(&schema), &rows, 4);
        let cut = disc.cuts("u").unwrap()[1];
        let (u, c) = (schema.index_of("u").unwrap(), schema.index_of("c").unwrap());
        let mut inst = sampler.sample_one(&SamplerConfig::with_seed(3), index).unwrap();
        inst.values[u] = Value::Num(inst.values[u].as_num().unwrap() * cut);
        inst.values[c] = Value::Cat("a".into());
        let mut preds: Vec<Predicate> = disc.predicates(&inst).into_iter().map(|(_, p)| p).collect();
        preds.shuffle(&mut ChaCha8Rng::seed_from_u64(order_seed));
        // Exact precision of a conjunction under independent features.
        let precision = |anchor: &[Predicate]| {
            let mut p_u = cut;
            let mut p_c = 1.0 / 3.0;
            for q in anchor {
                match q.feature() {
                    "u" => p_u = interval_mass(q, 0.0, cut) / interval_mass(q, 0.0, 1.0),
                    "c" => p_c = if q.holds(&Value::Cat("a".into())) { 1.0 } else { 0.0 },
                    _ => {}
                }
            }
            p_u * p_c
        };
        let mut last = precision(&[]);
        for k in 1..=preds.len() {
            let now = precision(&preds[..k]);
            prop_assert!(now >= last - 1e-12, "{now} < {last}");
            last = now;
        }
        prop_assert!((last - 1.0).abs() < 1e-12);
    }
}

const PLANTED_SCN: &str = include_str!("../../../scenarios/planted.scn");

#[test]
fn empirical_rule_coverage_agrees_with_feature_space_coverage() {
    let p = parse(PLANTED_SCN).unwrap();
    let schema = feature_schema(&p);
    let rule = Rule::new(
        Target::Incorrect,
        vec![
            Predicate::Le {
                feature: "dist(ego,otherCar)".into(),
                value: 9.0,
            },
            Predicate::In {
                feature: "weather".into(),
                values: vec!["RAIN".into(), "SNOW".into(), "CLEAR".into()],
            },
        ],
        DT,
    );
    let est = feature_space_coverage(&p, &rule, 10_000, 8).unwrap();
    let test = Sampler::new(&p)
        .sample(5_000, &SamplerConfig::with_seed(99))
        .unwrap();
    let empirical =
        test.iter().filter(|f| rule.matches(&schema, f).unwrap()).count() as f64 / test.len() as f64;
    let se = (est.std_error.powi(2) + empirical * (1.0 - empirical) / test.len() as f64).sqrt();
    assert!(
        (est.estimate - empirical).abs() <= 3.0 * se,
        "{} vs {empirical}",
        est.estimate
    );
}

#[test]
fn planted_rule_validates_near_its_drop_rate() {
    let p = parse(PLANTED_SCN).unwrap();
    let schema = feature_schema(&p);
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../scenarios/planted_detector.toml"
    ))
    .unwrap();
    let cfg: FaultModelConfig = toml::from_str(&text).unwrap();
    let rule = Rule::new(Target::Incorrect, cfg.failure_rules[0].predicates.clone(), DT);
    let detector = SyntheticDetector::new(cfg, &schema).unwrap();
    let rp = splice(&p, &rule).unwrap();
    let report = validate(
        &rp,
        &detector,
        &Default::default(),
        &ValidationConfig {
            n_samples: 500,
            seed: 4,
            evaluation: EvaluationConfig::default(),
            ..ValidationConfig::default()
        },
    )
    .unwrap();
    // Drop probability 0.95 inside the region; binomial sampling error.
    let se = (0.95f64 * 0.05 / 500.0).sqrt();
    assert!(
        report.incorrect_ratio >= 0.95 - 3.0 * se,
        "{}",
        report.incorrect_ratio
    );
    assert_eq!(report.rule_match_ratio, 1.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn spliced_programs_only_produce_matching_samples(
        lo in 5.0..15.0f64,
        width in 1.0..5.0f64,
        x_cut in -2.5..2.5f64,
    ) {
        let p = parse(PLANTED_SCN).unwrap();
        let schema = feature_schema(&p);
        let rule = Rule::new(
            Target::Correct,
            vec![
                Predicate::Interval { feature: "dist(ego,otherCar)".into(), lo, hi: lo + width, lo_inclusive: false, hi_inclusive: true },
                Predicate::Gt { feature: "otherCar.x".into(), value: x_cut },
            ],
            DT,
        );
        let rp = splice(&p, &rule).unwrap();
        let refined = Sampler::new(&rp.spliced);
        for f in refined.sample(300, &SamplerConfig::with_seed(2)).unwrap() {
            prop_assert!(rule.matches(&schema, &f).unwrap());
        }
    }
}
