//! Acceptance suite: every check prints one `[acceptance] criterion N ...
//! PASS/FAIL` line (visible under `cargo test --test acceptance --
//! --nocapture`) and asserts the stated tolerance.

use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scer::cli::{
    cmd_generate, cmd_report, cmd_sweep, cmd_theory, cmd_train, spearman, verify_logistic_direction,
    GenerateConfig, ReportConfig, SweepConfig, TheoryConfig,
};
use scer::data::{ColorSurrogateSpec, DatasetConfig, GroupKey};
use scer::model::{backward_into, ParamGradients, Params};
use scer::numerics::{SpdMatrix, Vector};
use scer::regularizer::{
    build_directions, embedding_loss, group_means, weight_alignment, DirectionMode, NormMode,
};
use scer::robust::{eg_update, GroupLossTable, RobustState};
use scer::theory::{
    margin_table, random_binary_instance, random_multiclass_instance, subgroup_error,
    subgroup_error_bounds, verify_binary_worst_group, verify_multiclass_bounds, BinaryTheoryInstance,
};
use scer::trainer::{
    frozen_step_loss, init_params, train, ModelSpec, ObjectiveSpec, TrainConfig, BATCH_STREAM_SALT,
};

fn report(criterion: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[acceptance] criterion {criterion} ({name}): {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn surrogate_config(
    rho: f64,
    eta: f64,
    lambda_spur: f64,
    lambda_core: f64,
    seed: u64,
    omitted: bool,
) -> TrainConfig {
    TrainConfig {
        seed,
        steps: 3000,
        batch_size: 128,
        learning_rate: 1e-3,
        momentum: 0.9,
        eta,
        lambda_spur,
        lambda_core,
        norm_mode: NormMode::Sigma,
        direction_mode: DirectionMode::Signed,
        model: ModelSpec::Identity,
        dataset: DatasetConfig::ColorSurrogate {
            spec: ColorSurrogateSpec {
                rho_train: rho,
                rho_test: 1.0 - rho,
                train_group_weights: omitted.then_some([50.0, 0.0, 10.0, 40.0]),
                n_train: 20_000,
                n_val: 2_000,
                n_test: 20_000,
                ..Default::default()
            },
        },
        eval_every: 1000,
        ema_decay: None,
        record_step: None,
    }
}

// -------------------------------------------------------------------------
// 1. Binary worst-group error: closed form vs Monte Carlo.
// -------------------------------------------------------------------------
#[test]
fn criterion_01_binary_worst_group_closed_form() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
    let mut worst_gap = 0.0f64;
    let mut all_pass = true;
    for i in 0..20usize {
        let dim = 2 + (i % 7); // p in {2..8}
        let inst = random_binary_instance(&mut rng, dim, 100.0, (0.2, 3.0));
        let check = verify_binary_worst_group(&inst, 500_000, 0xACC1_0000 + i as u64).unwrap();
        worst_gap = worst_gap.max((check.closed_form_wge - check.mc_worst_observed).abs());
        all_pass &= check.pass;
        assert!(
            check.z_identity_gap <= 1e-12,
            "instance {i}: alignment identity gap {}",
            check.z_identity_gap
        );
    }
    let elapsed = start.elapsed();
    report(
        1,
        "binary worst-group closed form",
        all_pass && elapsed.as_secs() <= 120,
        &format!("20 instances, max |closed - mc| = {worst_gap:.2e}, elapsed {elapsed:.1?}"),
    );
}

// -------------------------------------------------------------------------
// 2. Logistic training recovers the population direction.
// -------------------------------------------------------------------------
#[test]
fn criterion_02_logistic_direction_direction_recovery() {
    let start = Instant::now();
    let inst = BinaryTheoryInstance {
        delta_core: Vector::new(vec![0.8, 0.2, -0.1]).unwrap(),
        delta_spur: Vector::new(vec![0.3, -0.9, 0.5]).unwrap(),
        sigma: SpdMatrix::from_entries(vec![
            vec![1.4, 0.3, -0.2],
            vec![0.3, 0.9, 0.1],
            vec![-0.2, 0.1, 1.2],
        ])
        .unwrap(),
    };
    let check = verify_logistic_direction(&inst, 200_000, 3.0, 0xACC2).unwrap();
    let elapsed = start.elapsed();
    report(
        2,
        "logistic direction recovery",
        check.pass && elapsed.as_secs() <= 120,
        &format!(
            "angle {:.3} deg (tolerance 3 deg), elapsed {elapsed:.1?}",
            check.angle_degrees
        ),
    );
}

// -------------------------------------------------------------------------
// 3. Multiclass margin bounds sandwich Monte Carlo subgroup errors.
// -------------------------------------------------------------------------
#[test]
fn criterion_03_multiclass_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
    let mut all_pass = true;
    for i in 0..10usize {
        let k = 1 + (i % 3);
        let (spec, head) = random_multiclass_instance(&mut rng, 3, k, 3 + (i % 3), 30.0);
        let check = verify_multiclass_bounds(&spec, &head, 100_000, 0xACC3_0000 + i as u64).unwrap();
        all_pass &= check.pass;
    }
    // m = 2: bounds coincide and equal the sign-classifier error exactly
    let mut max_gap = 0.0f64;
    for i in 0..10usize {
        let (spec, head) = random_multiclass_instance(&mut rng, 2, 1, 3, 10.0);
        let mu = spec.mean(GroupKey::new(i % 2, 0));
        let table = margin_table(&head, mu, &spec.covariance).unwrap();
        let (lower, upper) = subgroup_error_bounds(&table, i % 2);
        let beta = head.columns[i % 2].sub(&head.columns[1 - (i % 2)]);
        let beta0 = head.biases[i % 2] - head.biases[1 - (i % 2)];
        let direct = subgroup_error(&beta, beta0, mu, &spec.covariance, 1).unwrap();
        max_gap = max_gap
            .max((lower - upper).abs())
            .max((lower - direct).abs());
    }
    report(
        3,
        "multiclass subgroup bounds",
        all_pass && max_gap <= 1e-12,
        &format!("10 multiclass instances sandwiched; m=2 coincidence gap {max_gap:.2e}"),
    );
}

// -------------------------------------------------------------------------
// 4. Gradient integrity of the combined objective.
// -------------------------------------------------------------------------
#[test]
fn criterion_04_gradient_integrity() {
    // 52 random small instances covering both norm modes and both direction
    // modes; the analytic gradient is recovered exactly from the recorded
    // first step (velocity starts at zero and lr = 0.25 scales without
    // rounding), then compared against central differences of the frozen
    // step objective.
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
    let mut checked_params = 0usize;
    let mut max_rel = 0.0f64;
    let modes = [
        (NormMode::Sigma, DirectionMode::Signed),
        (NormMode::Sigma, DirectionMode::ElementwiseAbs),
        (NormMode::Euclidean, DirectionMode::Signed),
        (NormMode::Euclidean, DirectionMode::ElementwiseAbs),
    ];
    for case in 0..52usize {
        let (norm_mode, direction_mode) = modes[case % 4];
        let dim = 2 + (case % 3);
        let spec = scer::data::GroupGaussianSpec {
            num_classes: 2,
            num_domains: 2,
            means: (0..4)
                .map(|g| {
                    Vector::new(
                        (0..dim)
                            .map(|_| rng.random_range(-1.0..1.0) + 0.3 * (g as f64 - 1.5))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect(),
            covariance: SpdMatrix::identity(dim),
            group_probs: vec![0.25; 4],
        };
        let config = TrainConfig {
            seed: 0xACC4_0000 + case as u64,
            steps: 1,
            batch_size: usize::MAX >> 1, // full batch
            learning_rate: 0.25,
            momentum: 0.9,
            eta: 0.05,
            lambda_spur: rng.random_range(0.2..1.5),
            lambda_core: rng.random_range(0.2..1.5),
            norm_mode,
            direction_mode,
            model: if case % 2 == 0 {
                ModelSpec::Identity
            } else {
                ModelSpec::AffineTanh { hidden: 3 }
            },
            dataset: DatasetConfig::GroupGaussian {
                spec,
                n_train: 48,
                n_test: 16,
                test_spec: None,
            },
            eval_every: 10,
            ema_decay: None,
            record_step: Some(1),
        };
        let history = train(&config).unwrap();
        let rec = history.recorded.expect("recorded step");
        let (train_ds, _, _) = config.dataset.materialize(config.seed).unwrap();
        if train_ds.group_counts().iter().any(|&c| c < 2) {
            // needs every group twice for stable directions; the seeded draw
            // at n = 48 makes this effectively impossible, but keep the
            // check honest
            panic!("degenerate draw for case {case}");
        }
        let inputs: Vec<&Vector> = rec
            .batch_indices
            .iter()
            .map(|&i| &train_ds.features[i])
            .collect();
        let labels: Vec<usize> = rec
            .batch_indices
            .iter()
            .map(|&i| train_ds.labels[i])
            .collect();
        let keys: Vec<GroupKey> = rec
            .batch_indices
            .iter()
            .map(|&i| train_ds.group_key(i))
            .collect();
        let objective = ObjectiveSpec {
            lambda_spur: config.lambda_spur,
            lambda_core: config.lambda_core,
            norm_mode,
            direction_mode,
            num_classes: 2,
            num_domains: 2,
            plain_mean: false,
        };
        let loss_at = |params: &Params| -> f64 {
            frozen_step_loss(
                params,
                &inputs,
                &labels,
                &keys,
                &rec.q_used,
                &rec.sigma,
                &objective,
            )
            .unwrap()
        };
        // analytic gradient from the applied first-step delta
        let analytic = |before: &Params, after: &Params| -> Vec<f64> {
            let mut g = Vec::new();
            let collect = |p: &Params, out: &mut Vec<f64>| {
                if let scer::model::FeatureMap::AffineTanh { weight, bias } = &p.fmap {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias);
                }
                for c in &p.head.columns {
                    out.extend_from_slice(c.as_slice());
                }
                out.extend_from_slice(&p.head.biases);
            };
            let mut b = Vec::new();
            collect(before, &mut b);
            let mut a = Vec::new();
            collect(after, &mut a);
            for (x, y) in b.iter().zip(&a) {
                g.push((x - y) / config.learning_rate);
            }
            g
        };
        let grads = analytic(&rec.params_before, &rec.params_after);
        // finite differences over a flattened view of the parameters
        let h = 1e-5;
        let mut flat_index = 0usize;
        let mut perturb = |f: &dyn Fn(&mut Params, f64)| {
            let mut plus = rec.params_before.clone();
            f(&mut plus, h);
            let mut minus = rec.params_before.clone();
            f(&mut minus, -h);
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let g = grads[flat_index];
            let denom = g.abs().max(fd.abs());
            let err = (g - fd).abs();
            let rel = if denom > 1e-8 { err / denom } else { 0.0 };
            assert!(
                err <= 1e-5 * denom + 1e-8,
                "case {case} param {flat_index}: analytic {g} vs fd {fd}"
            );
            max_rel = max_rel.max(rel);
            flat_index += 1;
            checked_params += 1;
        };
        if let scer::model::FeatureMap::AffineTanh { weight, bias } = &rec.params_before.fmap {
            for i in 0..weight.rows() {
                for j in 0..weight.cols() {
                    perturb(&|p: &mut Params, d: f64| {
                        if let scer::model::FeatureMap::AffineTanh { weight, .. } = &mut p.fmap {
                            weight.set(i, j, weight.get(i, j) + d);
                        }
                    });
                }
            }
            for i in 0..bias.len() {
                perturb(&|p: &mut Params, d: f64| {
                    if let scer::model::FeatureMap::AffineTanh { bias, .. } = &mut p.fmap {
                        bias[i] += d;
                    }
                });
            }
        }
        for j in 0..rec.params_before.head.num_classes() {
            for i in 0..rec.params_before.head.embed_dim() {
                perturb(&|p: &mut Params, d: f64| {
                    p.head.columns[j][i] += d;
                });
            }
        }
        for j in 0..rec.params_before.head.num_classes() {
            perturb(&|p: &mut Params, d: f64| {
                p.head.biases[j] += d;
            });
        }
    }
    report(
        4,
        "gradient integrity",
        true,
        &format!("52 instances, {checked_params} parameters, max rel err {max_rel:.2e}"),
    );
}

// -------------------------------------------------------------------------
// 5. Exponentiated-gradient update: closed form and simplex invariants.
// -------------------------------------------------------------------------
#[test]
fn criterion_05_eg_update() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC5);
    let mut max_gap = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(2..8usize);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let eta = rng.random_range(0.0..1.0);
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..4.0)).collect();
        let state = RobustState {
            num_classes: 1,
            num_domains: n,
            q: q.clone(),
            eta,
        };
        let table = GroupLossTable {
            num_classes: 1,
            num_domains: n,
            mean_loss: losses.clone(),
            counts: vec![1; n],
        };
        let next = eg_update(&state, &table).unwrap();
        let unnorm: Vec<f64> = q
            .iter()
            .zip(&losses)
            .map(|(w, l)| w * (eta * l).exp())
            .collect();
        let z: f64 = unnorm.iter().sum();
        for (a, b) in next.q.iter().zip(&unnorm) {
            max_gap = max_gap.max((a - b / z).abs());
        }
    }
    // simplex invariants over a 5000-step recorded trajectory
    let mut config = surrogate_config(0.9, 0.05, 0.0, 0.0, 17, false);
    config.steps = 5000;
    config.batch_size = 64;
    let history = train(&config).unwrap();
    let mut simplex_ok = true;
    for log in &history.steps {
        let s: f64 = log.q.iter().sum();
        simplex_ok &= (s - 1.0).abs() <= 1e-12 && log.q.iter().all(|&w| w > 0.0 && w < 1.0);
    }
    report(
        5,
        "exponentiated-gradient update",
        max_gap <= 1e-12 && simplex_ok,
        &format!("closed-form gap {max_gap:.2e}; simplex held over 5000 steps: {simplex_ok}"),
    );
}

// -------------------------------------------------------------------------
// 6. Surrogate benchmark ordering across correlation levels.
// -------------------------------------------------------------------------
#[test]
fn criterion_06_surrogate_ordering() {
    let start = Instant::now();
    let mut detail = String::new();
    let mut pass = true;
    for rho in [0.8, 0.9, 0.95] {
        let mean_worst = |eta: f64, ls: f64, lc: f64| -> f64 {
            let mut total = 0.0;
            for seed in [0u64, 1, 2] {
                let run_start = Instant::now();
                let h = train(&surrogate_config(rho, eta, ls, lc, seed, false)).unwrap();
                assert!(
                    run_start.elapsed().as_secs() <= 180,
                    "run exceeded 3 minutes"
                );
                total += h.final_metrics.worst_acc;
            }
            total / 3.0
        };
        let erm = mean_worst(0.0, 0.0, 0.0);
        let dro = mean_worst(0.01, 0.0, 0.0);
        let scer_acc = mean_worst(0.01, 1.0, 1.0);
        let ok = erm <= 0.35 && scer_acc >= 0.65 && scer_acc >= dro - 0.01;
        pass &= ok;
        detail.push_str(&format!(
            "rho={rho}: erm={erm:.3} dro={dro:.3} scer={scer_acc:.3}; "
        ));
    }
    report(
        6,
        "surrogate worst-group ordering",
        pass,
        &format!("{detail}elapsed {:.1?}", start.elapsed()),
    );
}

// -------------------------------------------------------------------------
// 7. Omitted-subpopulation robustness.
// -------------------------------------------------------------------------
#[test]
fn criterion_07_omitted_subpopulation() {
    let mean_worst = |eta: f64, ls: f64, lc: f64| -> f64 {
        let mut total = 0.0;
        for seed in [0u64, 1, 2] {
            let h = train(&surrogate_config(0.9, eta, ls, lc, seed, true)).unwrap();
            total += h.final_metrics.worst_acc;
        }
        total / 3.0
    };
    let erm = mean_worst(0.0, 0.0, 0.0);
    let scer_acc = mean_worst(0.01, 1.0, 1.0);
    report(
        7,
        "omitted-subpopulation robustness",
        scer_acc >= erm + 0.20,
        &format!(
            "scer worst {scer_acc:.3} vs erm worst {erm:.3} (gap {:.3})",
            scer_acc - erm
        ),
    );
}

// -------------------------------------------------------------------------
// 8. Scatter property: spurious loss anti-correlates with worst-group
//    accuracy, core loss correlates, over a 30-run sweep.
// -------------------------------------------------------------------------
#[test]
fn criterion_08_scatter_correlations() {
    let dir = tempfile::tempdir().unwrap();
    let mut base = surrogate_config(0.9, 0.01, 1.0, 1.0, 0, true);
    base.steps = 2000;
    if let DatasetConfig::ColorSurrogate { spec } = &mut base.dataset {
        spec.n_train = 12_000;
        spec.n_val = 1_000;
        spec.n_test = 12_000;
    }
    let sweep = SweepConfig {
        base,
        lambda_spur: vec![],
        lambda_core: vec![],
        lambda_pairs: Some([0.0, 0.05, 0.1, 0.3, 1.0].iter().map(|&l| (l, l)).collect()),
        rho: None,
        norm_modes: None,
        seeds: (0..6).collect(),
    };
    let sweep_dir = dir.path().join("sweep");
    let summary = cmd_sweep(&sweep, &sweep_dir, 4).unwrap();
    assert_eq!(summary.runs.len(), 30);
    assert_eq!(summary.failures, 0);
    let report_summary = cmd_report(
        &ReportConfig {
            results_dir: sweep_dir,
        },
        &dir.path().join("report"),
    )
    .unwrap();
    let rho_spur = report_summary.spearman_worst_vs_loss_spur.unwrap();
    let rho_core = report_summary.spearman_worst_vs_loss_core.unwrap();
    report(
        8,
        "scatter correlations",
        rho_spur <= -0.2 && rho_core >= 0.2,
        &format!("spearman(worst, loss_spur) = {rho_spur:.3}, spearman(worst, loss_core) = {rho_core:.3}"),
    );
}

// -------------------------------------------------------------------------
// 9. Degeneracies: exact ERM reproduction and norm-mode equivalence at the
//    identity covariance.
// -------------------------------------------------------------------------
#[test]
fn criterion_09_equivalence_degeneracies() {
    // (a) eta = 0 with both lambdas 0 reproduces an independent ERM loop
    // bit for bit
    let mut config = surrogate_config(0.9, 0.0, 0.0, 0.0, 29, false);
    config.steps = 300;
    config.batch_size = 64;
    if let DatasetConfig::ColorSurrogate { spec } = &mut config.dataset {
        spec.n_train = 3_000;
        spec.n_val = 100;
        spec.n_test = 1_000;
    }
    let history = train(&config).unwrap();

    // reference loop: sample batches from the same stream, take the mean
    // cross-entropy gradient, apply SGD with momentum — no group machinery
    let (train_ds, _, _) = config.dataset.materialize(config.seed).unwrap();
    let mut params = init_params(&config.model, train_ds.dim(), 2, config.seed).unwrap();
    let mut velocity = ParamGradients::zeros_like(&params.fmap, &params.head);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ BATCH_STREAM_SALT);
    let mut ref_losses = Vec::new();
    for _ in 0..config.steps {
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| rng.random_range(0..train_ds.len()))
            .collect();
        let mut grads = ParamGradients::zeros_like(&params.fmap, &params.head);
        let inv_n = 1.0 / indices.len() as f64;
        let mut losses = Vec::with_capacity(indices.len());
        for &i in &indices {
            let emb = scer::model::embed(&params.fmap, &train_ds.features[i]).unwrap();
            let loss = backward_into(
                &params.fmap,
                &params.head,
                &train_ds.features[i],
                &emb,
                train_ds.labels[i],
                inv_n,
                &mut grads,
            )
            .unwrap();
            losses.push(loss);
        }
        ref_losses.push(losses.iter().sum::<f64>() / losses.len() as f64);
        velocity.scale(config.momentum);
        velocity.axpy(1.0, &grads);
        params.apply_update(config.learning_rate, &velocity);
    }
    let mut bitwise = true;
    for (log, ref_loss) in history.steps.iter().zip(&ref_losses) {
        bitwise &= log.l_wge.to_bits() == ref_loss.to_bits();
    }
    for (a, b) in history
        .final_params
        .head
        .columns
        .iter()
        .zip(&params.head.columns)
    {
        for i in 0..a.dim() {
            bitwise &= a[i].to_bits() == b[i].to_bits();
        }
    }
    for (a, b) in history
        .final_params
        .head
        .biases
        .iter()
        .zip(&params.head.biases)
    {
        bitwise &= a.to_bits() == b.to_bits();
    }

    // (b) sigma norms with identity covariance equal euclidean norms
    let mut rng = ChaCha8Rng::seed_from_u64(0xACC9);
    let mut max_gap = 0.0f64;
    for _ in 0..50 {
        let dim = rng.random_range(2..5usize);
        let eye = SpdMatrix::identity(dim);
        let embeddings: Vec<Vector> = (0..16)
            .map(|_| Vector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let keys: Vec<GroupKey> = (0..16).map(|i| GroupKey::new(i % 2, (i / 2) % 2)).collect();
        let gm = group_means(&embeddings, &keys).unwrap();
        let head = scer::model::SoftmaxHead::new(
            (0..2)
                .map(|_| {
                    Vector::new((0..dim).map(|_| rng.random_range(0.1..1.0)).collect()).unwrap()
                })
                .collect(),
            vec![0.0, 0.0],
        )
        .unwrap();
        for dmode in [DirectionMode::Signed, DirectionMode::ElementwiseAbs] {
            let ds = build_directions(&gm, &eye, dmode, NormMode::Sigma).unwrap();
            let de = build_directions(&gm, &eye, dmode, NormMode::Euclidean).unwrap();
            let rs = embedding_loss(&head, &ds, &eye, 0.7, 1.1).unwrap();
            let re = embedding_loss(&head, &de, &eye, 0.7, 1.1).unwrap();
            max_gap = max_gap
                .max((rs.cor_spur - re.cor_spur).abs())
                .max((rs.cor_core - re.cor_core).abs())
                .max((rs.loss_embedding - re.loss_embedding).abs());
            let ws = weight_alignment(&head, &ds.delta_spur, &eye, NormMode::Sigma).unwrap();
            let we = weight_alignment(&head, &ds.delta_spur, &eye, NormMode::Euclidean).unwrap();
            max_gap = max_gap.max((ws - we).abs());
        }
    }
    report(
        9,
        "equivalence degeneracies",
        bitwise && max_gap <= 1e-12,
        &format!("erm bitwise identical: {bitwise}; norm-mode gap at identity: {max_gap:.2e}"),
    );
}

// -------------------------------------------------------------------------
// 10. Determinism: every command rerun byte-identically.
// -------------------------------------------------------------------------
#[test]
fn criterion_10_determinism() {
    fn snapshot(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<(String, Vec<u8>)> = walkdir::WalkDir::new(dir)
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| {
                (
                    e.path().strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect();
        files.sort();
        files
    }

    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();

    // generate
    let gen_config = GenerateConfig {
        seed: 12,
        dataset: DatasetConfig::ColorSurrogate {
            spec: ColorSurrogateSpec {
                rho_train: 0.8,
                n_train: 400,
                n_val: 100,
                n_test: 200,
                noise_dims: 2,
                ..Default::default()
            },
        },
    };
    let gen_dir = dir.path().join("gen");
    cmd_generate(&gen_config, &gen_dir).unwrap();
    let first = snapshot(&gen_dir);
    cmd_generate(&gen_config, &gen_dir).unwrap();
    details.push(("generate", first == snapshot(&gen_dir)));

    // train
    let mut train_config = surrogate_config(0.9, 0.01, 1.0, 1.0, 7, false);
    train_config.steps = 60;
    if let DatasetConfig::ColorSurrogate { spec } = &mut train_config.dataset {
        spec.n_train = 1_000;
        spec.n_val = 100;
        spec.n_test = 500;
    }
    let train_dir = dir.path().join("train");
    cmd_train(&train_config, &train_dir).unwrap();
    let first = snapshot(&train_dir);
    cmd_train(&train_config, &train_dir).unwrap();
    details.push(("train", first == snapshot(&train_dir)));

    // theory (reduced size; determinism is about bytes, not power)
    let theory_config = TheoryConfig {
        seed: 5,
        mc_samples: 20_000,
        binary_instances: 2,
        multiclass_instances: 1,
        multiclass_mc_samples: 10_000,
        logistic: false,
        ..Default::default()
    };
    let theory_dir = dir.path().join("theory");
    cmd_theory(&theory_config, &theory_dir).unwrap();
    let first = snapshot(&theory_dir);
    cmd_theory(&theory_config, &theory_dir).unwrap();
    details.push(("theory", first == snapshot(&theory_dir)));

    // sweep (parallel execution must not affect bytes)
    let mut sweep_base = train_config.clone();
    sweep_base.steps = 30;
    let sweep_config = SweepConfig {
        base: sweep_base,
        lambda_spur: vec![0.0, 1.0],
        lambda_core: vec![1.0],
        lambda_pairs: None,
        rho: None,
        norm_modes: None,
        seeds: vec![0, 1],
    };
    let sweep_dir = dir.path().join("sweep");
    cmd_sweep(&sweep_config, &sweep_dir, 4).unwrap();
    let first = snapshot(&sweep_dir);
    cmd_sweep(&sweep_config, &sweep_dir, 2).unwrap();
    details.push(("sweep", first == snapshot(&sweep_dir)));

    // report
    let report_config = ReportConfig {
        results_dir: sweep_dir.clone(),
    };
    let report_dir = dir.path().join("report");
    cmd_report(&report_config, &report_dir).unwrap();
    let first = snapshot(&report_dir);
    cmd_report(&report_config, &report_dir).unwrap();
    details.push(("report", first == snapshot(&report_dir)));

    let pass = details.iter().all(|(_, ok)| *ok);
    let detail: Vec<String> = details
        .iter()
        .map(|(name, ok)| format!("{name}: {}", if *ok { "identical" } else { "DIFFERS" }))
        .collect();
    report(10, "byte-identical reruns", pass, &detail.join(", "));
}

// -------------------------------------------------------------------------
// Spearman implementation oracle (supports criterion 8's reporting path).
// -------------------------------------------------------------------------
#[test]
fn spearman_agrees_with_brute_force_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCA);
    for _ in 0..50 {
        let n = rng.random_range(3..20usize);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = spearman(&xs, &ys).unwrap();
        // brute force: Pearson correlation of rank vectors built by sorting
        let rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|x| {
                    let below = v.iter().filter(|y| *y < x).count() as f64;
                    let equal = v.iter().filter(|y| *y == x).count() as f64;
                    below + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let rx = rank(&xs);
        let ry = rank(&ys);
        let n_f = n as f64;
        let mx = rx.iter().sum::<f64>() / n_f;
        let my = ry.iter().sum::<f64>() / n_f;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
        let want = cov / (vx.sqrt() * vy.sqrt());
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}
