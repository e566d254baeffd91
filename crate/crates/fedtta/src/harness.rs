//! Experiment runner: the baseline ladder under leave-one-domain-out.
//!
//! Every domain takes a turn as the held-out user while the rest act as data
//! centers. Five baselines cover the ladder from isolated training to
//! federated training with test-time adaptation:
//!
//! * `single`: one model per center, trained on that center alone. Reported
//!   per (center, user) pair.
//! * `fused`: the per-center models' scores averaged sample-wise.
//! * `all`: one model trained on the concatenation of all center data. This
//!   pools raw samples across centers, so it is an upper reference, not a
//!   deployable protocol.
//! * `fed`: federated training, scored with running statistics.
//! * `fedtta`: federated training plus entropy-driven adaptation on the
//!   user stream, scored with batch statistics.
//!
//! Thresholds always come from the centers' pooled dev scores; user labels
//! are touched only by the metrics.

use std::fmt;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::datagen::{
    leave_one_out_split, make_domain, DomainDataset, DomainSpec, Split, UserDomain,
};
use crate::federation::{run_federated_training, FedConfig};
use crate::metrics::{evaluate, select_threshold, MetricsReport, ScoredSet};
use crate::nn::{NetworkSpec, Parameters};
use crate::tta::{adapt, predict, StatsSource, TtaConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    Single,
    Fused,
    All,
    Fed,
    FedTta,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Single,
        Baseline::Fused,
        Baseline::All,
        Baseline::Fed,
        Baseline::FedTta,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Baseline::Single => "single",
            Baseline::Fused => "fused",
            Baseline::All => "all",
            Baseline::Fed => "fed",
            Baseline::FedTta => "fedtta",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Baseline::Single),
            "fused" => Ok(Baseline::Fused),
            "all" => Ok(Baseline::All),
            "fed" => Ok(Baseline::Fed),
            "fedtta" => Ok(Baseline::FedTta),
            other => Err(Error::InvalidConfig(format!(
                "unknown baseline {other:?} (expected single, fused, all, fed, fedtta)"
            ))),
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub domain_specs: Vec<DomainSpec>,
    pub data_seed: u64,
    pub hidden_dims: Vec<usize>,
    pub fed: FedConfig,
    pub tta: TtaConfig,
    pub baselines: Vec<Baseline>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.baselines.is_empty() {
            return Err(Error::InvalidConfig("no baselines requested".into()));
        }
        if self.domain_specs.len() < 2 {
            return Err(Error::InvalidConfig(
                "need at least 2 domains for leave-one-out".into(),
            ));
        }
        for (i, a) in self.domain_specs.iter().enumerate() {
            a.validate()?;
            for b in &self.domain_specs[i + 1..] {
                if a.id == b.id {
                    return Err(Error::InvalidConfig(format!(
                        "duplicate domain id {:?}",
                        a.id
                    )));
                }
            }
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidConfig(
                "hidden_dims must be nonempty positive sizes".into(),
            ));
        }
        self.fed.validate()?;
        self.tta.validate()?;
        Ok(())
    }

    /// Canonical text form, the basis of the config hash.
    pub fn config_lines(&self) -> Vec<String> {
        let mut lines = Vec::new();
        lines.push(format!("data_seed={}", self.data_seed));
        lines.push(format!(
            "hidden_dims={}",
            self.hidden_dims
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        lines.push(format!("fed.rounds={}", self.fed.rounds));
        lines.push(format!("fed.local_epochs={}", self.fed.local_epochs));
        lines.push(format!("fed.lr={}", self.fed.lr));
        lines.push(format!("fed.batch_size={}", self.fed.batch_size));
        lines.push(format!("fed.seed={}", self.fed.seed));
        lines.push(format!("fed.early_stop={}", self.fed.early_stop));
        lines.push(format!("tta.lr={}", self.tta.lr));
        lines.push(format!("tta.steps_per_batch={}", self.tta.steps_per_batch));
        lines.push(format!("tta.adapt_batch_size={}", self.tta.adapt_batch_size));
        lines.push(format!("tta.mode={:?}", self.tta.mode));
        lines.push(format!(
            "baselines={}",
            self.baselines
                .iter()
                .map(|b| b.as_str())
                .collect::<Vec<_>>()
                .join(",")
        ));
        for d in &self.domain_specs {
            let vec = |a: &Array1<f64>| {
                a.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            };
            lines.push(format!(
                "domain {} n_real={} n_attack={} base_dim={} rotation={} translation={} scale={} attack_offset={} noise_sigma={} style={}",
                d.id,
                d.n_real,
                d.n_attack,
                d.base_dim,
                d.shift.rotation,
                vec(&d.shift.translation),
                vec(&d.shift.scale),
                vec(&d.attack_offset),
                d.noise_sigma,
                d.attack_style
            ));
        }
        lines
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for line in self.config_lines() {
            hasher.update(line.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

/// One evaluated (baseline, user) pair; `center` is set for single rows.
/// A failed evaluation keeps its place with the error message.
#[derive(Debug, Clone)]
pub struct EvaluationRow {
    pub baseline: Baseline,
    pub center: Option<String>,
    pub user: String,
    pub outcome: std::result::Result<MetricsReport, String>,
}

impl EvaluationRow {
    fn header(&self) -> String {
        match &self.center {
            Some(c) => format!("[{} center={} user={}]", self.baseline, c, self.user),
            None => format!("[{} user={}]", self.baseline, self.user),
        }
    }

    fn roc_file_name(&self) -> String {
        match &self.center {
            Some(c) => format!("roc_{}_{}_{}.csv", self.baseline, c, self.user),
            None => format!("roc_{}_{}.csv", self.baseline, self.user),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineSummary {
    pub baseline: Baseline,
    pub rows: usize,
    pub avg_hter: f64,
    pub avg_eer: f64,
    pub avg_auc: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub rows: Vec<EvaluationRow>,
    pub summaries: Vec<BaselineSummary>,
    pub config_hash: String,
    pub wall_secs: f64,
}

impl ExperimentReport {
    pub fn summary_for(&self, baseline: Baseline) -> Option<&BaselineSummary> {
        self.summaries.iter().find(|s| s.baseline == baseline)
    }

    /// The report file body. Wall time is kept out so identical configs
    /// produce identical bytes.
    pub fn report_lines(&self) -> Vec<String> {
        let mut lines = vec![format!("config_hash={}", self.config_hash)];
        for row in &self.rows {
            lines.push(String::new());
            lines.push(row.header());
            match &row.outcome {
                Ok(report) => lines.extend(report.key_value_lines()),
                Err(msg) => lines.push(format!("FAILED {msg}")),
            }
        }
        for s in &self.summaries {
            lines.push(String::new());
            lines.push(format!("[{} avg]", s.baseline));
            lines.push(format!("rows={}", s.rows));
            lines.push(format!("avg_hter={:.6}", s.avg_hter));
            lines.push(format!("avg_eer={:.6}", s.avg_eer));
            lines.push(format!("avg_auc={:.6}", s.avg_auc));
        }
        lines
    }
}

fn network_for(centers: &[DomainDataset], hidden: &[usize]) -> Result<NetworkSpec> {
    let first = centers
        .first()
        .ok_or_else(|| Error::EmptyInput("no data centers".into()))?;
    NetworkSpec::new(first.dim(), hidden.to_vec())
}

fn train_on(datasets: &[DomainDataset], net: &NetworkSpec, fed: &FedConfig) -> Result<Parameters> {
    Ok(run_federated_training(datasets, net, fed)?.params)
}

/// Scores every center's dev split with running statistics and pools them.
fn pooled_dev_running(
    model: &Parameters,
    net: &NetworkSpec,
    centers: &[DomainDataset],
) -> Result<ScoredSet> {
    let mut sets = Vec::with_capacity(centers.len());
    for c in centers {
        let (x, y) = c.split_xy(Split::Dev);
        let probs = predict(model, net, &x, StatsSource::Running)?;
        sets.push(ScoredSet::from_probs(&probs, &y)?);
    }
    ScoredSet::pooled(&sets)
}

fn mean_probs(per_model: &[Array1<f64>]) -> Array1<f64> {
    let n = per_model[0].len();
    let mut out = Array1::zeros(n);
    for probs in per_model {
        out += probs;
    }
    out / per_model.len() as f64
}

fn single_models(
    centers: &[DomainDataset],
    net: &NetworkSpec,
    fed: &FedConfig,
) -> Result<Vec<Parameters>> {
    centers
        .iter()
        .map(|c| train_on(std::slice::from_ref(c), net, fed))
        .collect()
}

fn eval_running(
    model: &Parameters,
    net: &NetworkSpec,
    centers: &[DomainDataset],
    user: &UserDomain,
) -> Result<MetricsReport> {
    let dev = pooled_dev_running(model, net, centers)?;
    let tau = select_threshold(&dev)?;
    let probs = predict(model, net, user.features(), StatsSource::Running)?;
    let test = ScoredSet::from_probs(&probs, user.labels().reveal_for_metrics())?;
    evaluate(&test, tau)
}

/// Runs one baseline for one leave-one-out partition. `single` yields one
/// row per center; every other baseline yields one row.
pub fn run_baseline(
    baseline: Baseline,
    centers: &[DomainDataset],
    user: &UserDomain,
    hidden: &[usize],
    fed: &FedConfig,
    tta: &TtaConfig,
) -> Result<Vec<EvaluationRow>> {
    let net = network_for(centers, hidden)?;
    let row = |center: Option<String>, report: MetricsReport| EvaluationRow {
        baseline,
        center,
        user: user.id().to_string(),
        outcome: Ok(report),
    };
    match baseline {
        Baseline::Single => {
            let models = single_models(centers, &net, fed)?;
            let mut rows = Vec::with_capacity(centers.len());
            for (c, model) in centers.iter().zip(&models) {
                let report = eval_running(model, &net, centers, user)?;
                rows.push(row(Some(c.id().to_string()), report));
            }
            Ok(rows)
        }
        Baseline::Fused => {
            let models = single_models(centers, &net, fed)?;
            let mut dev_sets = Vec::with_capacity(centers.len());
            for c in centers {
                let (x, y) = c.split_xy(Split::Dev);
                let per_model: Vec<Array1<f64>> = models
                    .iter()
                    .map(|m| predict(m, &net, &x, StatsSource::Running))
                    .collect::<Result<_>>()?;
                dev_sets.push(ScoredSet::from_probs(&mean_probs(&per_model), &y)?);
            }
            let tau = select_threshold(&ScoredSet::pooled(&dev_sets)?)?;
            let per_model: Vec<Array1<f64>> = models
                .iter()
                .map(|m| predict(m, &net, user.features(), StatsSource::Running))
                .collect::<Result<_>>()?;
            let test = ScoredSet::from_probs(
                &mean_probs(&per_model),
                user.labels().reveal_for_metrics(),
            )?;
            Ok(vec![row(None, evaluate(&test, tau)?)])
        }
        Baseline::All => {
            let merged = DomainDataset::merge("all".to_string(), centers)?;
            let model = train_on(std::slice::from_ref(&merged), &net, fed)?;
            Ok(vec![row(None, eval_running(&model, &net, centers, user)?)])
        }
        Baseline::Fed => {
            let model = train_on(centers, &net, fed)?;
            Ok(vec![row(None, eval_running(&model, &net, centers, user)?)])
        }
        Baseline::FedTta => {
            let model = train_on(centers, &net, fed)?;
            if tta.steps_per_batch == 0 {
                return Ok(vec![row(None, eval_running(&model, &net, centers, user)?)]);
            }
            let stream = user.batches(tta.adapt_batch_size)?;
            let adapted = adapt(&model, &net, &stream, tta)?.params;
            let mut dev_sets = Vec::with_capacity(centers.len());
            for c in centers {
                let (x, y) = c.split_xy(Split::Dev);
                let probs = predict(&adapted, &net, &x, StatsSource::Batch)?;
                dev_sets.push(ScoredSet::from_probs(&probs, &y)?);
            }
            let tau = select_threshold(&ScoredSet::pooled(&dev_sets)?)?;
            let probs = predict(&adapted, &net, user.features(), StatsSource::Batch)?;
            let test = ScoredSet::from_probs(&probs, user.labels().reveal_for_metrics())?;
            Ok(vec![row(None, evaluate(&test, tau)?)])
        }
    }
}

fn summarize(rows: &[EvaluationRow], baselines: &[Baseline]) -> Vec<BaselineSummary> {
    let mut out = Vec::new();
    for &b in baselines {
        let reports: Vec<&MetricsReport> = rows
            .iter()
            .filter(|r| r.baseline == b)
            .filter_map(|r| r.outcome.as_ref().ok())
            .collect();
        if reports.is_empty() {
            continue;
        }
        let n = reports.len() as f64;
        out.push(BaselineSummary {
            baseline: b,
            rows: reports.len(),
            avg_hter: reports.iter().map(|r| r.hter).sum::<f64>() / n,
            avg_eer: reports.iter().map(|r| r.eer).sum::<f64>() / n,
            avg_auc: reports.iter().map(|r| r.auc).sum::<f64>() / n,
        });
    }
    out
}

/// Generates the benchmark data, rotates every domain through the user role,
/// runs the requested baselines, and writes `report.txt`, one ROC CSV per
/// row, and `timings.txt` to the output directory. A failed baseline run
/// becomes a FAILED marker instead of aborting the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let started = Instant::now();
    let domains: Vec<DomainDataset> = cfg
        .domain_specs
        .iter()
        .enumerate()
        .map(|(i, spec)| make_domain(spec, cfg.data_seed.wrapping_add(i as u64)))
        .collect::<Result<_>>()?;

    let per_user: Vec<(Vec<EvaluationRow>, f64)> = (0..domains.len())
        .into_par_iter()
        .map(|user_index| {
            let user_started = Instant::now();
            let mut rows = Vec::new();
            match leave_one_out_split(&domains, user_index) {
                Ok((centers, user)) => {
                    for &baseline in &cfg.baselines {
                        match run_baseline(
                            baseline,
                            &centers,
                            &user,
                            &cfg.hidden_dims,
                            &cfg.fed,
                            &cfg.tta,
                        ) {
                            Ok(mut r) => rows.append(&mut r),
                            Err(e) => rows.push(EvaluationRow {
                                baseline,
                                center: None,
                                user: user.id().to_string(),
                                outcome: Err(e.to_string()),
                            }),
                        }
                    }
                }
                Err(e) => {
                    for &baseline in &cfg.baselines {
                        rows.push(EvaluationRow {
                            baseline,
                            center: None,
                            user: domains[user_index].id().to_string(),
                            outcome: Err(e.to_string()),
                        });
                    }
                }
            }
            (rows, user_started.elapsed().as_secs_f64())
        })
        .collect();

    // Regroup user-major results into baseline-major report order.
    let mut rows = Vec::new();
    for &baseline in &cfg.baselines {
        for (user_rows, _) in &per_user {
            rows.extend(user_rows.iter().filter(|r| r.baseline == baseline).cloned());
        }
    }
    let summaries = summarize(&rows, &cfg.baselines);
    let report = ExperimentReport {
        rows,
        summaries,
        config_hash: cfg.config_hash(),
        wall_secs: started.elapsed().as_secs_f64(),
    };

    fs::create_dir_all(&cfg.out_dir)?;
    let mut body = report.report_lines().join("\n");
    body.push('\n');
    fs::write(cfg.out_dir.join("report.txt"), body)?;
    for row in &report.rows {
        if let Ok(metrics) = &row.outcome {
            fs::write(cfg.out_dir.join(row.roc_file_name()), metrics.roc_csv())?;
        }
    }
    let mut timings = String::new();
    for (i, (_, secs)) in per_user.iter().enumerate() {
        timings.push_str(&format!("user {} secs {secs:.3}\n", domains[i].id()));
    }
    timings.push_str(&format!("total secs {:.3}\n", report.wall_secs));
    fs::write(cfg.out_dir.join("timings.txt"), timings)?;

    Ok(report)
}
