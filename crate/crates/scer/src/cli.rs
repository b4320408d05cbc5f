//! Command implementations behind the `scer` binary: dataset generation,
//! single training runs, theory verification, hyperparameter sweeps, and
//! report emission.
//!
//! Every command consumes one JSON config document with a top-level
//! `command` discriminator and writes into an output directory. Outputs are
//! deterministic: rerunning a command with the same config and seed
//! overwrites every file with identical bytes. CSV files open with a
//! schema-version comment line; JSON files carry a `schema` field.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical/runtime failure,
//! 4 verification failure in the theory command.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dataset_manifest, spec_digest, write_dataset_csv, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::CheckpointJson;
use crate::numerics::{sigma_norm, SpdMatrix, Vector};
use crate::regularizer::{AlignmentReport, NormMode};
use crate::robust::Metrics;
use crate::theory::{
    erm_direction, extreme_shift_spec, random_binary_instance, random_multiclass_instance,
    verify_binary_worst_group, verify_multiclass_bounds, wge_binary, BinaryTheoryInstance, BinaryWorstGroupCheck,
    MulticlassBoundsCheck,
};
use crate::trainer::{train, RunHistory, TrainConfig};

pub const HISTORY_CSV_SCHEMA: &str = "# scer-csv v1 history";
pub const SWEEP_CSV_SCHEMA: &str = "# scer-csv v1 sweep";
pub const SCATTER_CSV_SCHEMA: &str = "# scer-csv v1 scatter";
pub const FINAL_JSON_SCHEMA: &str = "scer-final v1";
pub const THEORY_JSON_SCHEMA: &str = "scer-theory v1";
pub const MANIFEST_JSON_SCHEMA: &str = "scer-manifest v1";

/// Top-level config document; the `command` field selects the subcommand.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum RunConfig {
    Generate(GenerateConfig),
    Train(TrainConfig),
    Theory(TheoryConfig),
    Sweep(SweepConfig),
    Report(ReportConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
}

fn default_mc_samples() -> usize {
    500_000
}
fn default_binary_instances() -> usize {
    20
}
fn default_dims() -> (usize, usize) {
    (2, 8)
}
fn default_cond_max() -> f64 {
    100.0
}
fn default_mag_range() -> (f64, f64) {
    (0.2, 3.0)
}
fn default_multiclass_instances() -> usize {
    10
}
fn default_multiclass_mc_samples() -> usize {
    100_000
}
fn default_true() -> bool {
    true
}
fn default_logistic_samples() -> usize {
    200_000
}
fn default_logistic_tolerance() -> f64 {
    3.0
}

/// Configuration of the closed-form-vs-Monte-Carlo verification suite.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoryConfig {
    pub seed: u64,
    /// Draws per group for the binary worst-group checks.
    pub mc_samples: usize,
    pub binary_instances: usize,
    /// Inclusive dimension range for random binary instances.
    pub dims: (usize, usize),
    pub cond_max: f64,
    /// Sigma-norm range for the random direction magnitudes.
    pub mag_range: (f64, f64),
    pub multiclass_instances: usize,
    pub multiclass_mc_samples: usize,
    /// Run the logistic-training direction-recovery check (slowest part).
    pub logistic: bool,
    pub logistic_samples: usize,
    pub logistic_tolerance_degrees: f64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 20260101,
            mc_samples: default_mc_samples(),
            binary_instances: default_binary_instances(),
            dims: default_dims(),
            cond_max: default_cond_max(),
            mag_range: default_mag_range(),
            multiclass_instances: default_multiclass_instances(),
            multiclass_mc_samples: default_multiclass_mc_samples(),
            logistic: default_true(),
            logistic_samples: default_logistic_samples(),
            logistic_tolerance_degrees: default_logistic_tolerance(),
        }
    }
}

/// Grid sweep over regularization strengths, correlation levels, norm modes,
/// and seeds around a base training config.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: TrainConfig,
    #[serde(default)]
    pub lambda_spur: Vec<f64>,
    #[serde(default)]
    pub lambda_core: Vec<f64>,
    /// When set, overrides the two lambda lists with explicit
    /// `(lambda_spur, lambda_core)` pairs (a diagonal sweep).
    #[serde(default)]
    pub lambda_pairs: Option<Vec<(f64, f64)>>,
    /// Spurious correlation levels; requires a color-surrogate dataset.
    /// Each level sets `rho_train = rho` and `rho_test = 1 - rho`.
    #[serde(default)]
    pub rho: Option<Vec<f64>>,
    #[serde(default)]
    pub norm_modes: Option<Vec<NormMode>>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportConfig {
    pub results_dir: PathBuf,
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub command: String,
    pub config_path: String,
    pub out_dir: String,
    pub config_digest: String,
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidConfig {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidConfig {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_manifest(
    command: &str,
    config_digest: String,
    config_path: &Path,
    out_dir: &Path,
) -> Result<()> {
    let manifest = RunManifest {
        schema: MANIFEST_JSON_SCHEMA.to_string(),
        command: command.to_string(),
        config_path: config_path.display().to_string(),
        out_dir: out_dir.display().to_string(),
        config_digest,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn cmd_generate(config: &GenerateConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (train_ds, val_ds, test_ds) = config.dataset.materialize(config.seed)?;
    write_dataset_csv(&train_ds, &out_dir.join("train.csv"))?;
    if let Some(val) = &val_ds {
        write_dataset_csv(val, &out_dir.join("val.csv"))?;
    }
    write_dataset_csv(&test_ds, &out_dir.join("test.csv"))?;
    let kind = match &config.dataset {
        DatasetConfig::ColorSurrogate { .. } => "color_surrogate",
        DatasetConfig::GroupGaussian { .. } => "group_gaussian",
        DatasetConfig::Csv { .. } => "csv",
    };
    let mut manifest = dataset_manifest(kind, &config.dataset, &train_ds);
    manifest.rows = train_ds.len() + val_ds.as_ref().map_or(0, |v| v.len()) + test_ds.len();
    write_json(&out_dir.join("dataset_manifest.json"), &manifest)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinalJson {
    pub schema: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub final_params: CheckpointJson,
    pub final_metrics: Metrics,
    pub final_train_alignment: Option<AlignmentReport>,
    pub q_final: Vec<f64>,
    pub missing_pair_steps: usize,
}

pub fn history_csv(history: &RunHistory) -> String {
    let m = history.num_classes;
    let k = history.num_domains;
    let mut out = String::new();
    out.push_str(HISTORY_CSV_SCHEMA);
    out.push('\n');
    out.push_str("step,l_wge,l_total,loss_spur,loss_core,loss_embedding,cor_spur,cor_core,mag_spur,mag_core,sigma_cond_est,missing_pairs");
    for c in 0..m {
        for d in 0..k {
            out.push_str(&format!(",q_c{c}_d{d}"));
        }
    }
    out.push_str(",eval_avg_acc,eval_worst_acc");
    for c in 0..m {
        for d in 0..k {
            out.push_str(&format!(",eval_acc_c{c}_d{d}"));
        }
    }
    out.push('\n');
    for log in &history.steps {
        let r = &log.report;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            log.step,
            log.l_wge,
            log.l_total,
            r.loss_spur,
            r.loss_core,
            r.loss_embedding,
            r.cor_spur,
            r.cor_core,
            r.mag_spur,
            r.mag_core,
            log.sigma_cond_est,
            log.missing_pairs
        ));
        for q in &log.q {
            out.push_str(&format!(",{q}"));
        }
        match &log.eval {
            Some(metrics) => {
                out.push_str(&format!(",{},{}", metrics.avg_acc, metrics.worst_acc));
                for acc in &metrics.per_group_acc {
                    match acc {
                        Some(a) => out.push_str(&format!(",{a}")),
                        None => out.push(','),
                    }
                }
            }
            None => {
                for _ in 0..(2 + m * k) {
                    out.push(',');
                }
            }
        }
        out.push('\n');
    }
    out
}

pub fn final_json(config: &TrainConfig, history: &RunHistory) -> FinalJson {
    FinalJson {
        schema: FINAL_JSON_SCHEMA.to_string(),
        config_digest: history.config_digest.clone(),
        config: serde_json::to_value(config).expect("config serialization cannot fail"),
        final_params: CheckpointJson::from_params(&history.final_params),
        final_metrics: history.final_metrics.clone(),
        final_train_alignment: history.final_train_alignment,
        q_final: history
            .steps
            .last()
            .map(|s| s.q.clone())
            .unwrap_or_default(),
        missing_pair_steps: history.missing_pair_steps,
    }
}

pub fn cmd_train(config: &TrainConfig, out_dir: &Path) -> Result<RunHistory> {
    std::fs::create_dir_all(out_dir)?;
    let history = train(config)?;
    write_file(
        &out_dir.join("history.csv"),
        history_csv(&history).as_bytes(),
    )?;
    write_json(&out_dir.join("final.json"), &final_json(config, &history))?;
    Ok(history)
}

// ---------------------------------------------------------------------------
// theory
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct LogisticDirectionCheck {
    pub n_samples: usize,
    pub steps: usize,
    pub angle_degrees: f64,
    pub tolerance_degrees: f64,
    pub cosine: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NearSingularCheck {
    pub condition_estimate: f64,
    pub ridged: bool,
    pub closed_form_wge: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpurZeroCheck {
    pub z_identity_gap: f64,
    pub exact: bool,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TheoryReport {
    pub schema: String,
    pub config: TheoryConfig,
    pub worked_instance: BinaryWorstGroupCheck,
    pub spur_zero: SpurZeroCheck,
    pub near_singular: NearSingularCheck,
    pub binary_checks: Vec<BinaryWorstGroupCheck>,
    pub multiclass_checks: Vec<MulticlassBoundsCheck>,
    pub logistic_direction: Option<LogisticDirectionCheck>,
    pub pass: bool,
}

/// The fixed two-dimensional instance used for spot checks:
/// identity covariance, core difference `(1, 0)`, spurious `(0, 2)`.
pub fn worked_instance() -> BinaryTheoryInstance {
    BinaryTheoryInstance {
        delta_core: Vector::new(vec![1.0, 0.0]).expect("finite"),
        delta_spur: Vector::new(vec![0.0, 2.0]).expect("finite"),
        sigma: SpdMatrix::identity(2),
    }
}

/// Direction-recovery check: train a two-class softmax on samples from the two
/// observed extreme-shift groups and compare the learned column difference
/// against `Sigma^{-1} (d_core + d_spur)` up to sign.
pub fn verify_logistic_direction(
    inst: &BinaryTheoryInstance,
    n_samples: usize,
    tolerance_degrees: f64,
    seed: u64,
) -> Result<LogisticDirectionCheck> {
    let spec = extreme_shift_spec(inst)?;
    let steps = 1500;
    let config = TrainConfig {
        seed,
        steps,
        batch_size: 32_768,
        learning_rate: 0.6,
        momentum: 0.9,
        eta: 0.0,
        lambda_spur: 0.0,
        lambda_core: 0.0,
        norm_mode: NormMode::Sigma,
        direction_mode: Default::default(),
        model: crate::trainer::ModelSpec::Identity,
        dataset: DatasetConfig::GroupGaussian {
            spec,
            n_train: n_samples,
            n_test: 2_000,
            test_spec: None,
        },
        eval_every: usize::MAX >> 1,
        ema_decay: None,
        record_step: None,
    };
    let history = train(&config)?;
    let learned = history.final_params.head.columns[1].sub(&history.final_params.head.columns[0]);
    let target = erm_direction(inst)?;
    let cosine = learned.dot(&target) / (learned.norm2() * target.norm2());
    // the solution is determined only up to an overall sign
    let angle_degrees = cosine.abs().min(1.0).acos().to_degrees();
    Ok(LogisticDirectionCheck {
        n_samples,
        steps,
        angle_degrees,
        tolerance_degrees,
        cosine,
        pass: angle_degrees <= tolerance_degrees,
    })
}

pub fn cmd_theory(config: &TheoryConfig, out_dir: &Path) -> Result<TheoryReport> {
    std::fs::create_dir_all(out_dir)?;
    let mut pass = true;

    let worked = verify_binary_worst_group(&worked_instance(), config.mc_samples, config.seed)?;
    pass &= worked.pass;

    // spurious direction zero: the decomposition must agree with the direct
    // z exactly (both reduce to the core term alone)
    let spur_zero_inst = BinaryTheoryInstance {
        delta_core: Vector::new(vec![1.0, 0.0]).expect("finite"),
        delta_spur: Vector::zeros(2),
        sigma: SpdMatrix::identity(2),
    };
    let beta = erm_direction(&spur_zero_inst)?;
    let z =
        0.5 * beta.dot(&spur_zero_inst.delta_tilde()) / sigma_norm(&beta, &spur_zero_inst.sigma)?;
    let z_id = crate::theory::wge_binary_z_via_alignments(&beta, &spur_zero_inst)?;
    let gap = (z - z_id).abs();
    let spur_zero = SpurZeroCheck {
        z_identity_gap: gap,
        exact: gap == 0.0,
        pass: gap <= 1e-12,
    };
    pass &= spur_zero.pass;

    // adversarially ill-conditioned covariance: diag(1, 1e-8) has condition
    // 1e8; the pipeline must complete, falling back to a ridge only if the
    // factorization fails outright
    let near_singular = {
        let sigma = SpdMatrix::diagonal(&[1.0, 1e-8]);
        let inst = BinaryTheoryInstance {
            delta_core: Vector::new(vec![0.5, 1e-5]).expect("finite"),
            delta_spur: Vector::new(vec![0.2, -1e-5]).expect("finite"),
            sigma,
        };
        let (inst, ridged) = match erm_direction(&inst) {
            Ok(_) => (inst, false),
            Err(Error::NotPositiveDefinite { .. }) => {
                let ridge = 1e-4 * inst.sigma.trace() / inst.sigma.dim() as f64;
                eprintln!("warning: near-singular covariance, adding ridge {ridge}");
                (
                    BinaryTheoryInstance {
                        sigma: inst.sigma.with_ridge(ridge),
                        ..inst
                    },
                    true,
                )
            }
            Err(e) => return Err(e),
        };
        let chol = inst.sigma.cholesky()?;
        let cond = chol.condition_estimate();
        if cond > 1e6 {
            eprintln!("warning: covariance condition estimate {cond:.3e}; results may be noisy");
        }
        let beta = erm_direction(&inst)?;
        let wge = wge_binary(&beta, &inst)?;
        NearSingularCheck {
            condition_estimate: cond,
            ridged,
            closed_form_wge: wge,
            pass: wge.is_finite() && (0.5..=1.0).contains(&wge),
        }
    };
    pass &= near_singular.pass;

    // random binary instances
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7E57_0001);
    let mut binary_checks = Vec::with_capacity(config.binary_instances);
    for i in 0..config.binary_instances {
        let dim = config.dims.0 + (i % (config.dims.1 - config.dims.0 + 1));
        let inst = random_binary_instance(&mut rng, dim, config.cond_max, config.mag_range);
        let check = verify_binary_worst_group(&inst, config.mc_samples, config.seed.wrapping_add(i as u64))?;
        pass &= check.pass;
        binary_checks.push(check);
    }

    // multiclass bound checks, m = 3 with k cycling through 1..3
    let mut multiclass_checks = Vec::with_capacity(config.multiclass_instances);
    for i in 0..config.multiclass_instances {
        let k = 1 + (i % 3);
        let (spec, head) = random_multiclass_instance(&mut rng, 3, k, 3 + (i % 3), 20.0);
        let check = verify_multiclass_bounds(
            &spec,
            &head,
            config.multiclass_mc_samples,
            config.seed.wrapping_add(1000 + i as u64),
        )?;
        pass &= check.pass;
        multiclass_checks.push(check);
    }

    let logistic_direction = if config.logistic {
        let inst = BinaryTheoryInstance {
            delta_core: Vector::new(vec![0.8, 0.2, -0.1]).expect("finite"),
            delta_spur: Vector::new(vec![0.3, -0.9, 0.5]).expect("finite"),
            sigma: SpdMatrix::from_entries(vec![
                vec![1.4, 0.3, -0.2],
                vec![0.3, 0.9, 0.1],
                vec![-0.2, 0.1, 1.2],
            ])?,
        };
        let check = verify_logistic_direction(
            &inst,
            config.logistic_samples,
            config.logistic_tolerance_degrees,
            config.seed ^ 0x1061571C,
        )?;
        pass &= check.pass;
        Some(check)
    } else {
        None
    };

    let report = TheoryReport {
        schema: THEORY_JSON_SCHEMA.to_string(),
        config: config.clone(),
        worked_instance: worked,
        spur_zero,
        near_singular,
        binary_checks,
        multiclass_checks,
        logistic_direction,
        pass,
    };
    write_json(&out_dir.join("theory_report.json"), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SweepRunRow {
    pub name: String,
    pub lambda_spur: f64,
    pub lambda_core: f64,
    pub rho: Option<f64>,
    pub norm_mode: NormMode,
    pub seed: u64,
    pub status: String,
    pub avg_acc: Option<f64>,
    pub worst_acc: Option<f64>,
    pub alignment: Option<AlignmentReport>,
}

#[derive(Clone, Debug)]
pub struct SweepSummary {
    pub runs: Vec<SweepRunRow>,
    pub failures: usize,
}

struct GridPoint {
    lambda_spur: f64,
    lambda_core: f64,
    rho: Option<f64>,
    norm_mode: NormMode,
}

fn format_float_token(v: f64) -> String {
    format!("{v}").replace('.', "p").replace('-', "m")
}

fn norm_mode_token(mode: NormMode) -> &'static str {
    match mode {
        NormMode::Sigma => "sigma",
        NormMode::Euclidean => "euclidean",
    }
}

fn grid_points(config: &SweepConfig) -> Result<Vec<GridPoint>> {
    let lambdas: Vec<(f64, f64)> = match &config.lambda_pairs {
        Some(pairs) => pairs.clone(),
        None => {
            let ls = if config.lambda_spur.is_empty() {
                vec![config.base.lambda_spur]
            } else {
                config.lambda_spur.clone()
            };
            let lc = if config.lambda_core.is_empty() {
                vec![config.base.lambda_core]
            } else {
                config.lambda_core.clone()
            };
            ls.iter()
                .flat_map(|&a| lc.iter().map(move |&b| (a, b)))
                .collect()
        }
    };
    let rhos: Vec<Option<f64>> = match &config.rho {
        Some(list) => {
            if !matches!(config.base.dataset, DatasetConfig::ColorSurrogate { .. }) {
                return Err(Error::InvalidConfig {
                    path: "rho".into(),
                    message: "rho sweeps require a color_surrogate dataset".into(),
                });
            }
            list.iter().map(|&r| Some(r)).collect()
        }
        None => vec![None],
    };
    let norm_modes = config
        .norm_modes
        .clone()
        .unwrap_or_else(|| vec![config.base.norm_mode]);
    let mut points = Vec::new();
    for &(lambda_spur, lambda_core) in &lambdas {
        for &rho in &rhos {
            for &norm_mode in &norm_modes {
                points.push(GridPoint {
                    lambda_spur,
                    lambda_core,
                    rho,
                    norm_mode,
                });
            }
        }
    }
    Ok(points)
}

fn point_config(base: &TrainConfig, point: &GridPoint, seed: u64) -> TrainConfig {
    let mut config = base.clone();
    config.lambda_spur = point.lambda_spur;
    config.lambda_core = point.lambda_core;
    config.norm_mode = point.norm_mode;
    config.seed = seed;
    if let (Some(rho), DatasetConfig::ColorSurrogate { spec }) = (point.rho, &mut config.dataset) {
        spec.rho_train = rho;
        spec.rho_test = 1.0 - rho;
    }
    config
}

fn point_name(point: &GridPoint, seed: u64) -> String {
    let mut name = format!(
        "ls{}-lc{}",
        format_float_token(point.lambda_spur),
        format_float_token(point.lambda_core)
    );
    if let Some(rho) = point.rho {
        name.push_str(&format!("-rho{}", format_float_token(rho)));
    }
    name.push_str(&format!("-{}-s{seed}", norm_mode_token(point.norm_mode)));
    name
}

pub fn sweep_csv(summary: &SweepSummary, seeds: &[u64]) -> String {
    let mut out = String::new();
    out.push_str(SWEEP_CSV_SCHEMA);
    out.push('\n');
    out.push_str("row_kind,name,lambda_spur,lambda_core,rho,norm_mode,seed,status,avg_acc,worst_acc,loss_spur,loss_core,cor_spur,cor_core,mag_spur,mag_core,avg_acc_mean,avg_acc_sd,worst_acc_mean,worst_acc_sd,n_seeds\n");
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for row in &summary.runs {
        let al = row.alignment.as_ref();
        out.push_str(&format!(
            "run,{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},,,,,\n",
            row.name,
            row.lambda_spur,
            row.lambda_core,
            fmt_opt(row.rho),
            norm_mode_token(row.norm_mode),
            row.seed,
            row.status,
            fmt_opt(row.avg_acc),
            fmt_opt(row.worst_acc),
            fmt_opt(al.map(|a| a.loss_spur)),
            fmt_opt(al.map(|a| a.loss_core)),
            fmt_opt(al.map(|a| a.cor_spur)),
            fmt_opt(al.map(|a| a.cor_core)),
            fmt_opt(al.map(|a| a.mag_spur)),
            fmt_opt(al.map(|a| a.mag_core)),
        ));
    }
    // aggregate rows: mean +- sd over seeds per grid point, in first-seen
    // grid order
    let mut seen: Vec<String> = Vec::new();
    for row in &summary.runs {
        let point_key = row
            .name
            .rsplit_once("-s")
            .map(|(head, _)| head.to_string())
            .unwrap_or_else(|| row.name.clone());
        if seen.contains(&point_key) {
            continue;
        }
        seen.push(point_key.clone());
        let members: Vec<&SweepRunRow> = summary
            .runs
            .iter()
            .filter(|r| r.name.starts_with(&format!("{point_key}-s")) && r.status == "ok")
            .collect();
        if members.is_empty() {
            out.push_str(&format!(
                "aggregate,{point_key},,,,,,no_successful_runs,,,,,,,,,,,,,{}\n",
                0
            ));
            continue;
        }
        let mean_sd = |f: &dyn Fn(&SweepRunRow) -> f64| -> (f64, f64) {
            let vals: Vec<f64> = members.iter().map(|r| f(r)).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            (mean, var.sqrt())
        };
        let (avg_mean, avg_sd) = mean_sd(&|r| r.avg_acc.unwrap_or(f64::NAN));
        let (worst_mean, worst_sd) = mean_sd(&|r| r.worst_acc.unwrap_or(f64::NAN));
        let first = members[0];
        out.push_str(&format!(
            "aggregate,{point_key},{},{},{},{},,ok,,,,,,,,,{},{},{},{},{}\n",
            first.lambda_spur,
            first.lambda_core,
            fmt_opt(first.rho),
            norm_mode_token(first.norm_mode),
            avg_mean,
            avg_sd,
            worst_mean,
            worst_sd,
            members.len(),
        ));
    }
    let _ = seeds;
    out
}

pub fn cmd_sweep(config: &SweepConfig, out_dir: &Path, jobs: usize) -> Result<SweepSummary> {
    std::fs::create_dir_all(out_dir)?;
    if config.seeds.is_empty() {
        return Err(Error::InvalidConfig {
            path: "seeds".into(),
            message: "sweep needs at least one seed".into(),
        });
    }
    let points = grid_points(config)?;
    let mut tasks: Vec<(String, TrainConfig)> = Vec::new();
    for point in &points {
        for &seed in &config.seeds {
            tasks.push((
                point_name(point, seed),
                point_config(&config.base, point, seed),
            ));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Schema {
            context: format!("worker pool: {e}"),
        })?;
    let results: Vec<(usize, std::result::Result<RunHistory, Error>)> = pool.install(|| {
        use rayon::prelude::*;
        tasks
            .par_iter()
            .enumerate()
            .map(|(i, (name, cfg))| {
                let run_dir = out_dir.join("runs").join(name);
                (i, cmd_train(cfg, &run_dir))
            })
            .collect()
    });
    let mut by_index: Vec<Option<std::result::Result<RunHistory, Error>>> =
        results.into_iter().fold(
            (0..tasks.len()).map(|_| None).collect(),
            |mut acc, (i, r)| {
                acc[i] = Some(r);
                acc
            },
        );
    let mut runs = Vec::with_capacity(tasks.len());
    let mut failures = 0usize;
    for (i, (name, cfg)) in tasks.iter().enumerate() {
        let point = &points[i / config.seeds.len()];
        let row = match by_index[i].take().expect("every task produced a result") {
            Ok(history) => SweepRunRow {
                name: name.clone(),
                lambda_spur: cfg.lambda_spur,
                lambda_core: cfg.lambda_core,
                rho: point.rho,
                norm_mode: cfg.norm_mode,
                seed: cfg.seed,
                status: "ok".to_string(),
                avg_acc: Some(history.final_metrics.avg_acc),
                worst_acc: Some(history.final_metrics.worst_acc),
                alignment: history.final_train_alignment,
            },
            Err(e) => {
                failures += 1;
                SweepRunRow {
                    name: name.clone(),
                    lambda_spur: cfg.lambda_spur,
                    lambda_core: cfg.lambda_core,
                    rho: point.rho,
                    norm_mode: cfg.norm_mode,
                    seed: cfg.seed,
                    status: format!("error: {e}").replace(',', ";"),
                    avg_acc: None,
                    worst_acc: None,
                    alignment: None,
                }
            }
        };
        runs.push(row);
    }
    let summary = SweepSummary { runs, failures };
    write_file(
        &out_dir.join("sweep.csv"),
        sweep_csv(&summary, &config.seeds).as_bytes(),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &pos in &idx[i..=j] {
            ranks[pos] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, Serialize)]
pub struct ScatterPoint {
    pub name: String,
    pub worst_acc: f64,
    pub avg_acc: f64,
    pub loss_spur: f64,
    pub loss_core: f64,
    pub cor_spur: f64,
    pub cor_core: f64,
    pub mag_spur: f64,
    pub mag_core: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportSummary {
    pub points: Vec<ScatterPoint>,
    pub spearman_worst_vs_loss_spur: Option<f64>,
    pub spearman_worst_vs_loss_core: Option<f64>,
}

pub fn cmd_report(config: &ReportConfig, out_dir: &Path) -> Result<ReportSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(&config.results_dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "final.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput {
            context: format!("no final.json files under {}", config.results_dir.display()),
        });
    }
    let mut points = Vec::with_capacity(paths.len());
    for path in &paths {
        let text = std::fs::read_to_string(path)?;
        let parsed: FinalJson = serde_json::from_str(&text).map_err(|e| Error::Schema {
            context: format!("{}: {e}", path.display()),
        })?;
        if parsed.schema != FINAL_JSON_SCHEMA {
            return Err(Error::Schema {
                context: format!(
                    "{}: schema `{}` does not match `{FINAL_JSON_SCHEMA}`",
                    path.display(),
                    parsed.schema
                ),
            });
        }
        let alignment = parsed.final_train_alignment.ok_or_else(|| Error::Schema {
            context: format!("{}: missing final_train_alignment", path.display()),
        })?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        points.push(ScatterPoint {
            name,
            worst_acc: parsed.final_metrics.worst_acc,
            avg_acc: parsed.final_metrics.avg_acc,
            loss_spur: alignment.loss_spur,
            loss_core: alignment.loss_core,
            cor_spur: alignment.cor_spur,
            cor_core: alignment.cor_core,
            mag_spur: alignment.mag_spur,
            mag_core: alignment.mag_core,
        });
    }
    let worst: Vec<f64> = points.iter().map(|p| p.worst_acc).collect();
    let loss_spur: Vec<f64> = points.iter().map(|p| p.loss_spur).collect();
    let loss_core: Vec<f64> = points.iter().map(|p| p.loss_core).collect();
    let summary = ReportSummary {
        spearman_worst_vs_loss_spur: spearman(&worst, &loss_spur),
        spearman_worst_vs_loss_core: spearman(&worst, &loss_core),
        points,
    };

    let mut csv = String::new();
    csv.push_str(SCATTER_CSV_SCHEMA);
    csv.push('\n');
    csv.push_str(
        "name,worst_acc,avg_acc,loss_spur,loss_core,cor_spur,cor_core,mag_spur,mag_core\n",
    );
    for p in &summary.points {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.name,
            p.worst_acc,
            p.avg_acc,
            p.loss_spur,
            p.loss_core,
            p.cor_spur,
            p.cor_core,
            p.mag_spur,
            p.mag_core
        ));
    }
    write_file(&out_dir.join("scatter.csv"), csv.as_bytes())?;

    let fmt_rho = |v: Option<f64>| {
        v.map(|x| format!("{x:+.4}"))
            .unwrap_or_else(|| "n/a".to_string())
    };
    let mut md = String::new();
    md.push_str("# Run report\n\n");
    md.push_str(&format!(
        "{} runs scanned from `{}`.\n\n",
        summary.points.len(),
        config.results_dir.display()
    ));
    md.push_str("| metric pair | Spearman rank correlation |\n|---|---|\n");
    md.push_str(&format!(
        "| worst-group accuracy vs spurious loss | {} |\n",
        fmt_rho(summary.spearman_worst_vs_loss_spur)
    ));
    md.push_str(&format!(
        "| worst-group accuracy vs core loss | {} |\n\n",
        fmt_rho(summary.spearman_worst_vs_loss_core)
    ));
    md.push_str("Per-run points are in `scatter.csv`.\n");
    write_file(&out_dir.join("summary.md"), md.as_bytes())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

/// Applies a `--seed` override to whichever seed the command carries.
pub fn apply_seed_override(config: &mut RunConfig, seed: u64) {
    match config {
        RunConfig::Generate(c) => c.seed = seed,
        RunConfig::Train(c) => c.seed = seed,
        RunConfig::Theory(c) => c.seed = seed,
        RunConfig::Sweep(c) => c.base.seed = seed,
        RunConfig::Report(_) => {}
    }
}

/// Runs a parsed config; returns the process exit code.
pub fn execute(config: RunConfig, config_path: &Path, out_dir: &Path, jobs: usize) -> Result<i32> {
    std::fs::create_dir_all(out_dir)?;
    match &config {
        RunConfig::Generate(c) => {
            write_manifest("generate", spec_digest(c), config_path, out_dir)?;
            cmd_generate(c, out_dir)?;
            Ok(0)
        }
        RunConfig::Train(c) => {
            c.validate()?;
            write_manifest("train", spec_digest(c), config_path, out_dir)?;
            cmd_train(c, out_dir)?;
            Ok(0)
        }
        RunConfig::Theory(c) => {
            write_manifest("theory", spec_digest(c), config_path, out_dir)?;
            let report = cmd_theory(c, out_dir)?;
            Ok(if report.pass { 0 } else { 4 })
        }
        RunConfig::Sweep(c) => {
            c.base.validate()?;
            write_manifest("sweep", spec_digest(c), config_path, out_dir)?;
            let summary = cmd_sweep(c, out_dir, jobs)?;
            Ok(if summary.failures == 0 { 0 } else { 3 })
        }
        RunConfig::Report(c) => {
            write_manifest("report", spec_digest(c), config_path, out_dir)?;
            cmd_report(c, out_dir)?;
            Ok(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColorSurrogateSpec;
    use crate::regularizer::DirectionMode;
    use crate::trainer::ModelSpec;

    fn tiny_train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            steps: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            eta: 0.01,
            lambda_spur: 1.0,
            lambda_core: 1.0,
            norm_mode: NormMode::Sigma,
            direction_mode: DirectionMode::Signed,
            model: ModelSpec::Identity,
            dataset: DatasetConfig::ColorSurrogate {
                spec: ColorSurrogateSpec {
                    n_train: 1500,
                    n_val: 100,
                    n_test: 800,
                    noise_dims: 3,
                    ..Default::default()
                },
            },
            eval_every: 10,
            ema_decay: None,
            record_step: None,
        }
    }

    #[test]
    fn spearman_matches_definition() {
        // perfectly monotone
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [10.0, 20.0, 30.0, 40.0];
        assert!((spearman(&xs, &ys).unwrap() - 1.0).abs() < 1e-12);
        let ys_rev = [40.0, 30.0, 20.0, 10.0];
        assert!((spearman(&xs, &ys_rev).unwrap() + 1.0).abs() < 1e-12);
        // hand-computed with a tie: ranks x = (1, 2.5, 2.5, 4)
        let xs = [1.0, 2.0, 2.0, 3.0];
        let ys = [1.0, 4.0, 2.0, 3.0];
        // rank y = (1, 4, 2, 3); covariance of centered ranks:
        // x - 2.5 = (-1.5, 0, 0, 1.5); y - 2.5 = (-1.5, 1.5, -0.5, 0.5)
        // cov = 2.25 + 0 + 0 + 0.75 = 3.0; vx = 4.5; vy = 5.0
        let want = 3.0 / (4.5f64.sqrt() * 5.0f64.sqrt());
        assert!((spearman(&xs, &ys).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn history_csv_is_schema_complete() {
        let config = tiny_train_config(5);
        let history = train(&config).unwrap();
        let csv = history_csv(&history);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), HISTORY_CSV_SCHEMA);
        let header = lines.next().unwrap();
        let cols = header.split(',').count();
        for line in lines {
            assert_eq!(line.split(',').count(), cols, "ragged row: {line}");
        }
    }

    #[test]
    fn generate_train_report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gen_dir = dir.path().join("data");
        cmd_generate(
            &GenerateConfig {
                seed: 9,
                dataset: DatasetConfig::ColorSurrogate {
                    spec: ColorSurrogateSpec {
                        rho_train: 0.8,
                        n_train: 500,
                        n_val: 100,
                        n_test: 300,
                        noise_dims: 2,
                        ..Default::default()
                    },
                },
            },
            &gen_dir,
        )
        .unwrap();
        assert!(gen_dir.join("train.csv").exists());
        assert!(gen_dir.join("val.csv").exists());
        assert!(gen_dir.join("test.csv").exists());
        let manifest: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(gen_dir.join("dataset_manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest["spec"]["spec"]["rho_train"], 0.8);

        let run_dir = dir.path().join("run");
        cmd_train(&tiny_train_config(5), &run_dir).unwrap();
        let report_dir = dir.path().join("report");
        let summary = cmd_report(
            &ReportConfig {
                results_dir: dir.path().join("run"),
            },
            &report_dir,
        )
        .unwrap();
        assert_eq!(summary.points.len(), 1);
        assert!(report_dir.join("scatter.csv").exists());
        assert!(report_dir.join("summary.md").exists());
    }

    #[test]
    fn report_errors_on_empty_dir() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("nothing");
        std::fs::create_dir_all(&empty).unwrap();
        let out = dir.path().join("out");
        assert!(matches!(
            cmd_report(&ReportConfig { results_dir: empty }, &out),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn report_refuses_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let run_dir = dir.path().join("runs").join("x");
        std::fs::create_dir_all(&run_dir).unwrap();
        std::fs::write(
            run_dir.join("final.json"),
            r#"{"schema":"scer-final v999","config_digest":"x","config":{},
                "final_params":{"feature_map":{"kind":"identity"},
                "head_weights":{"rows":1,"cols":2,"data":[0.0,0.0]},"head_biases":[0.0,0.0]},
                "final_metrics":{"avg_acc":1.0,"worst_acc":1.0,"per_group_acc":[],"per_group_counts":[]},
                "final_train_alignment":null,"q_final":[],"missing_pair_steps":0}"#,
        )
        .unwrap();
        let out = dir.path().join("out");
        assert!(matches!(
            cmd_report(
                &ReportConfig {
                    results_dir: dir.path().join("runs")
                },
                &out
            ),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn sweep_produces_expected_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut base = tiny_train_config(0);
        base.steps = 10;
        let config = SweepConfig {
            base,
            lambda_spur: vec![0.0, 0.5, 1.0],
            lambda_core: vec![0.0, 0.5, 1.0],
            lambda_pairs: None,
            rho: None,
            norm_modes: None,
            seeds: vec![0, 1, 2],
        };
        let summary = cmd_sweep(&config, dir.path(), 2).unwrap();
        assert_eq!(summary.runs.len(), 27);
        assert_eq!(summary.failures, 0);
        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        let run_rows = csv.lines().filter(|l| l.starts_with("run,")).count();
        let agg_rows = csv.lines().filter(|l| l.starts_with("aggregate,")).count();
        assert_eq!(run_rows, 27);
        assert_eq!(agg_rows, 9);
    }

    #[test]
    fn commands_are_deterministic_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let config = tiny_train_config(11);
        cmd_train(&config, &out).unwrap();
        let history1 = std::fs::read(out.join("history.csv")).unwrap();
        let final1 = std::fs::read(out.join("final.json")).unwrap();
        cmd_train(&config, &out).unwrap();
        assert_eq!(history1, std::fs::read(out.join("history.csv")).unwrap());
        assert_eq!(final1, std::fs::read(out.join("final.json")).unwrap());
    }

    #[test]
    fn run_config_json_round_trip() {
        let json = r#"{
            "command": "train",
            "seed": 3,
            "dataset": {"kind": "color_surrogate", "spec": {"rho_train": 0.9}}
        }"#;
        let parsed: RunConfig = serde_json::from_str(json).unwrap();
        match &parsed {
            RunConfig::Train(c) => {
                assert_eq!(c.seed, 3);
                assert_eq!(c.steps, 5000, "default steps");
                assert_eq!(c.eta, 0.01, "default eta");
                assert_eq!(c.lambda_spur, 1.0, "default lambda");
            }
            other => panic!("wrong command: {other:?}"),
        }
    }
}
