//! Checks against independently computed reference values.

use amnesic_core::pipeline::{cmd_intervene, prepare};
use amnesic_core::{
    amnesic_project, evaluate_probe, generate, head_accuracy, majority_baseline, mnestic_project, planted_subspace,
    random_basis, run_inlp, subspace_alignment, train_head, train_probe, AccumulatedBasis, DataSource,
    ExperimentConfig, Feature, HeadSource, InlpConfig, LabelVector, LinearProbe, Mode, ProbeConfig,
    RepresentationMatrix, SyntheticSpec,
};
use nalgebra::DMatrix;
use ndarray::{array, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

fn clusters(per_class: usize, seed: u64) -> (RepresentationMatrix, LabelVector) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.1).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        let mean = if class == 0 { -5.0 } else { 5.0 };
        for _ in 0..per_class {
            rows.push([mean + noise.sample(&mut rng), noise.sample(&mut rng)]);
            labels.push(class);
        }
    }
    (RepresentationMatrix::from_rows(&rows).unwrap(), LabelVector::new(labels, 2).unwrap())
}

fn split(x: &RepresentationMatrix, y: &LabelVector, seed: u64) -> [(RepresentationMatrix, LabelVector); 2] {
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = x.rows() * 4 / 5;
    let (a, b) = order.split_at(cut);
    [
        (x.select_rows(a).unwrap(), y.select(a).unwrap()),
        (x.select_rows(b).unwrap(), y.select(b).unwrap()),
    ]
}

fn spec(n: usize, dim: usize, redundancy: usize, sigma: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_examples: n,
        dim,
        redundancy,
        noise_sigma: sigma,
        nuisance_dim: 0,
        seed,
    }
}

#[test]
fn separable_clusters_reach_099_after_the_midline_oracle() {
    let (x, y) = clusters(200, 1);
    let midline = LinearProbe::from_parts(array![[1.0, 0.0]], array![0.0], 2).unwrap();
    assert!(evaluate_probe(&midline, &x, &y).unwrap() >= 0.99);

    let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    let (held_x, held_y) = clusters(200, 2);
    assert!(probe.train_accuracy >= 0.99);
    assert!(evaluate_probe(&probe, &held_x, &held_y).unwrap() >= 0.99);
}

#[test]
fn permuted_labels_score_near_the_majority_baseline() {
    let (x, y) = generate(&spec(1000, 32, 1, 0.05, 4)).unwrap();
    let y = y.labels(Feature::Relation);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut gaps = Vec::new();
    for p in 0..20 {
        let mut shuffled = y.values().to_vec();
        shuffled.shuffle(&mut rng);
        let shuffled = LabelVector::new(shuffled, 3).unwrap();
        let [(xt, yt), (xe, ye)] = split(&x, &shuffled, p);
        let probe = train_probe(&xt, &yt, &ProbeConfig::default().with_seed(p)).unwrap();
        gaps.push(evaluate_probe(&probe, &xe, &ye).unwrap() - majority_baseline(&ye).unwrap());
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    assert!(mean.abs() <= 0.05, "mean gap {mean}");
}

#[test]
fn monotonicity_and_relation_are_independent() {
    let (_, labels) = generate(&spec(10_000, 16, 1, 0.0, 11)).unwrap();
    let m = labels.labels(Feature::Monotonicity);
    let r = labels.labels(Feature::Relation);
    let n = m.len() as f64;
    let mut joint = [[0.0f64; 3]; 2];
    for (&a, &b) in m.values().iter().zip(r.values()) {
        joint[a][b] += 1.0 / n;
    }
    let pm: Vec<f64> = joint.iter().map(|row| row.iter().sum()).collect();
    let pr: Vec<f64> = (0..3).map(|j| joint[0][j] + joint[1][j]).collect();
    let mut mi = 0.0;
    for i in 0..2 {
        for j in 0..3 {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] * (joint[i][j] / (pm[i] * pr[j])).ln();
            }
        }
    }
    assert!(mi <= 0.01, "mutual information {mi} nats");

    let e = labels.labels(Feature::Entailment);
    let entail = e.values().iter().filter(|&&v| v == 0).count() as f64 / n;
    assert!((entail - 2.0 / 6.0).abs() <= 0.03, "entail fraction {entail}");
}

#[test]
fn noiseless_matrix_rank_is_bounded_by_planted_directions() {
    for r in [1, 3, 6] {
        let (x, _) = generate(&spec(300, 40, r, 0.0, r as u64)).unwrap();
        let m = DMatrix::from_row_slice(x.rows(), x.cols(), x.view().as_slice().unwrap());
        let rank = m.singular_values().iter().filter(|&&s| s > 1e-8).count();
        assert!(rank <= 5 * r, "rank {rank} for r = {r}");
    }
}

#[test]
fn noiseless_monotonicity_is_exactly_separable() {
    let s = spec(600, 24, 1, 0.0, 3);
    let (x, labels) = generate(&s).unwrap();
    let y = labels.labels(Feature::Monotonicity);
    let planted = planted_subspace(&s, Feature::Monotonicity).unwrap();
    let diff = &planted.direction(1) - &planted.direction(0);
    let oracle = LinearProbe::from_parts(diff.insert_axis(Axis(0)), array![0.0], 2).unwrap();
    assert_eq!(evaluate_probe(&oracle, &x, &y).unwrap(), 1.0);

    let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
    assert_eq!(probe.train_accuracy, 1.0);
}

#[test]
fn removing_the_planted_monotonicity_code_reaches_baseline() {
    let s = spec(2000, 64, 2, 0.05, 5);
    let (x, labels) = generate(&s).unwrap();
    let y = labels.labels(Feature::Monotonicity);
    let planted = planted_subspace(&s, Feature::Monotonicity).unwrap();
    let removed = amnesic_project(&x, &planted).unwrap();
    let [(xt, yt), (xe, ye)] = split(&removed, &y, 0);
    let probe = train_probe(&xt, &yt, &ProbeConfig::default()).unwrap();
    let acc = evaluate_probe(&probe, &xe, &ye).unwrap();
    assert!(acc <= majority_baseline(&ye).unwrap() + 0.02, "accuracy {acc}");
}

#[test]
fn entailment_is_not_linear_in_the_monotonicity_code() {
    let s = spec(4000, 32, 1, 0.05, 6);
    let (x, labels) = generate(&s).unwrap();
    let only_mono = mnestic_project(&x, &planted_subspace(&s, Feature::Monotonicity).unwrap()).unwrap();
    let y = labels.labels(Feature::Entailment);
    let [(xt, yt), (xe, ye)] = split(&only_mono, &y, 1);
    let probe = train_probe(&xt, &yt, &ProbeConfig::default()).unwrap();
    let acc = evaluate_probe(&probe, &xe, &ye).unwrap();
    assert!(acc <= 0.67 + 0.03, "accuracy {acc}");
}

#[test]
fn random_singletons_align_with_five_dims_as_sqrt_k_over_d() {
    let probe_basis = random_basis(100, 5, 77).unwrap();
    let scores: Vec<f64> = (0..200)
        .map(|seed| subspace_alignment(random_basis(100, 1, seed).unwrap().direction(0), &probe_basis).unwrap().value())
        .collect();
    let mean = scores.iter().sum::<f64>() / 200.0;
    assert!((mean - (0.05f64).sqrt()).abs() <= 0.05, "mean {mean}");
}

#[test]
fn noiseless_inlp_directions_lie_in_the_planted_subspace() {
    for feature in [Feature::Monotonicity, Feature::Relation, Feature::Composite] {
        let s = spec(1500, 40, 2, 0.0, 8);
        let (x, labels) = generate(&s).unwrap();
        let y = labels.labels(feature);
        let [(xt, yt), (xe, ye)] = split(&x, &y, 2);
        let (basis, _) = run_inlp(&xt, &yt, &xe, &ye, &InlpConfig::default()).unwrap();
        assert!(!basis.is_empty());
        let planted = planted_subspace(&s, Feature::Composite).unwrap();
        let mean = (0..basis.len())
            .map(|i| subspace_alignment(basis.direction(i), &planted).unwrap().value())
            .sum::<f64>()
            / basis.len() as f64;
        assert!(mean >= 0.95, "{feature}: mean alignment {mean}");
    }
}

/// Binary labels written as the same one-hot code in three orthogonal
/// planted copies. The class-mean difference spans the removed directions.
#[test]
fn redundant_binary_code_is_removed_with_its_class_mean_difference() {
    let d = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let planted = random_basis(d, 6, 99).unwrap();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..900 {
        let c = rng.random_range(0..2usize);
        let mut row = Array1::<f64>::zeros(d);
        for copy in 0..3 {
            row += &planted.direction(2 * copy + c);
        }
        rows.push(row.to_vec());
        labels.push(c);
    }
    let x = RepresentationMatrix::from_rows(&rows).unwrap();
    let y = LabelVector::new(labels, 2).unwrap();
    let [(xt, yt), (xe, ye)] = split(&x, &y, 3);
    let (basis, trace) = run_inlp(&xt, &yt, &xe, &ye, &InlpConfig::default()).unwrap();
    assert!(!basis.is_empty());
    let last = trace.steps.last().unwrap();
    assert!(last.probe_accuracy <= last.majority_baseline + 0.02);

    let mean = |class: usize| {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| y.values()[i] == class).collect();
        x.select_rows(&idx).unwrap().view().mean_axis(Axis(0)).unwrap()
    };
    let diff = mean(1) - mean(0);
    let kept = mnestic_project(&RepresentationMatrix::new(diff.clone().insert_axis(Axis(0))).unwrap(), &basis).unwrap();
    let ratio = kept.row(0).dot(&kept.row(0)).sqrt() / diff.dot(&diff).sqrt();
    assert!(ratio >= 0.99, "retained norm {ratio}");
}

#[test]
fn independent_labels_stop_inlp_almost_immediately() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n = 3000;
    let d = 20;
    let values: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    let x = RepresentationMatrix::from_shape_vec(n, d, values).unwrap();
    let classes = 3;
    let y = LabelVector::new((0..n).map(|_| rng.random_range(0..classes)).collect(), classes).unwrap();
    let [(xt, yt), (xe, ye)] = split(&x, &y, 4);
    let cfg = InlpConfig::default();
    let (basis, trace) = run_inlp(&xt, &yt, &xe, &ye, &cfg).unwrap();
    assert!(basis.len() <= cfg.patience * classes, "k = {}", basis.len());
    let adding_steps = trace.steps.iter().filter(|s| s.directions_added > 0).count();
    assert!(adding_steps <= cfg.patience);
}

#[test]
fn removing_directions_never_helps_the_probe_on_average() {
    let mut before = 0.0;
    let mut after = 0.0;
    for seed in 0..10 {
        let (x, labels) = generate(&spec(1200, 32, 1, 0.3, seed)).unwrap();
        let y = labels.labels(Feature::Relation);
        let removed = amnesic_project(&x, &random_basis(32, 8, seed + 100).unwrap()).unwrap();
        for (data, total) in [(&x, &mut before), (&removed, &mut after)] {
            let [(xt, yt), (xe, ye)] = split(data, &y, seed);
            let probe = train_probe(&xt, &yt, &ProbeConfig::default().with_seed(seed)).unwrap();
            *total += evaluate_probe(&probe, &xe, &ye).unwrap() / 10.0;
        }
    }
    assert!(after <= before, "before {before}, after {after}");
}

#[test]
fn linear_head_learns_separable_entailment_clusters() {
    let (x, y) = clusters(200, 21);
    let head = train_head(&x, &y, &ProbeConfig::default(), None).unwrap();
    let (held_x, held_y) = clusters(200, 22);
    assert!(head_accuracy(&head, &held_x, &held_y).unwrap() >= 0.99);
}

#[test]
fn head_on_random_labels_stays_near_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (x, _) = generate(&spec(2000, 32, 1, 0.05, 23)).unwrap();
    let y = LabelVector::new((0..2000).map(|_| rng.random_range(0..2)).collect(), 2).unwrap();
    let [(xt, yt), (xe, ye)] = split(&x, &y, 5);
    let head = train_head(&xt, &yt, &ProbeConfig::default(), None).unwrap();
    let acc = head_accuracy(&head, &xe, &ye).unwrap();
    assert!((acc - majority_baseline(&ye).unwrap()).abs() <= 0.05, "accuracy {acc}");
}

fn noiseless_composite_config(modes: Vec<Mode>) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(spec(1500, 32, 1, 0.0, 31)),
        feature: Feature::Composite,
        modes,
        head: HeadSource::Tanh(16),
        repetitions: 3,
        out_dir: tempfile::tempdir().unwrap().keep(),
        ..ExperimentConfig::default()
    }
}

#[test]
fn amnesic_composite_removal_collapses_the_downstream_head() {
    let cfg = noiseless_composite_config(vec![Mode::Amnesic]);
    let out = cmd_intervene(&cfg).unwrap();
    let row = &out.summary[0];
    assert!(row.downstream_start.unwrap() >= 0.95);
    assert!(row.downstream_delta.unwrap() <= -0.30, "{row:?}");
    let _ = std::fs::remove_dir_all(&cfg.out_dir);
}

#[test]
fn reports_satisfy_start_and_stop_rule_invariants() {
    let cfg = noiseless_composite_config(vec![Mode::Amnesic, Mode::Mnestic, Mode::ControlKeep]);
    let prep = prepare(&cfg).unwrap();
    let raw = head_accuracy(&prep.head, &prep.x_eval, &prep.task_eval).unwrap();
    let out = cmd_intervene(&cfg).unwrap();
    for report in &out.reports {
        report.validate().unwrap();
        let start = report.start().unwrap();
        assert_eq!(start.step, -1);
        assert_eq!(start.downstream_accuracy, Some(raw));
    }
    for row in out.summary.iter().filter(|r| r.mode == Mode::Amnesic) {
        let report = out.reports.iter().find(|r| r.start().unwrap().mode == Mode::Amnesic).unwrap();
        let baseline = report.start().unwrap().majority_baseline;
        let start = row.probing_start.unwrap();
        assert!(row.probing_delta.unwrap() <= -(start - baseline) + InlpConfig::default().stop_margin);
    }
    let _ = std::fs::remove_dir_all(&cfg.out_dir);
}

#[test]
fn planted_subspace_is_disjoint_across_features() {
    let s = spec(10, 30, 3, 0.0, 40);
    let mono = planted_subspace(&s, Feature::Monotonicity).unwrap();
    let rel = planted_subspace(&s, Feature::Relation).unwrap();
    assert_eq!((mono.len(), mono.step_count()), (6, 3));
    assert_eq!((rel.len(), rel.step_count()), (9, 3));
    let cross: Array2<f64> = mono.directions().dot(&rel.directions().t());
    assert!(cross.iter().all(|v| v.abs() < 1e-12));
    let empty = AccumulatedBasis::empty(30);
    assert_eq!(subspace_alignment(mono.direction(0), &empty).unwrap().value(), 0.0);
}
