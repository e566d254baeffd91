use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use fedtta::checkpoint;
use fedtta::datagen::{
    attack_split_benchmark, default_benchmark, make_domain, stream_batches, sweep_benchmark,
    DomainDataset, DomainSpec,
};
use fedtta::federation::{run_federated_training, FedConfig};
use fedtta::harness::{run_experiment, Baseline, ExperimentConfig};
use fedtta::metrics::{evaluate, select_threshold, ScoredSet};
use fedtta::nn::NetworkSpec;
use fedtta::tta::{adapt, TtaConfig, TtaMode};
use fedtta::{Error, Result};

const DEFAULT_HIDDEN: &str = "16,8";
const DEFAULT_DATA_SEED: u64 = 11;

#[derive(Parser)]
#[command(name = "fedtta", about = "Federated anti-spoofing simulator with test-time adaptation")]
struct Cli {
    /// Optional key=value config file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the benchmark datasets as CSV files.
    Gen(GenArgs),
    /// Federated training over center CSVs; writes a model checkpoint.
    Train(TrainArgs),
    /// Test-time adaptation of a checkpoint on an unlabeled stream.
    Adapt(AdaptArgs),
    /// Metrics for a persisted score file.
    Eval(EvalArgs),
    /// The full baseline ladder; writes report and ROC files.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FedArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long = "lr-fed")]
    lr_fed: Option<f64>,
    #[arg(long = "local-epochs")]
    local_epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "early-stop")]
    early_stop: bool,
}

impl FedArgs {
    fn build(&self, file: &FileConfig) -> Result<FedConfig> {
        let d = FedConfig::default();
        Ok(FedConfig {
            rounds: pick(self.rounds, file.get("rounds")?, d.rounds),
            local_epochs: pick(self.local_epochs, file.get("local_epochs")?, d.local_epochs),
            lr: pick(self.lr_fed, file.get("lr_fed")?, d.lr),
            batch_size: pick(self.batch_size, file.get("batch_size")?, d.batch_size),
            seed: pick(self.seed, file.get("seed")?, d.seed),
            early_stop: self.early_stop || file.get("early_stop")?.unwrap_or(false),
        })
    }
}

#[derive(Args)]
struct TtaArgs {
    #[arg(long = "lr-tta")]
    lr_tta: Option<f64>,
    #[arg(long = "tta-steps")]
    tta_steps: Option<usize>,
    #[arg(long = "tta-batch-size")]
    tta_batch_size: Option<usize>,
    /// online or episodic
    #[arg(long = "tta-mode")]
    tta_mode: Option<String>,
}

impl TtaArgs {
    fn build(&self, file: &FileConfig) -> Result<TtaConfig> {
        let d = TtaConfig::default();
        let mode_name: Option<String> = match &self.tta_mode {
            Some(m) => Some(m.clone()),
            None => file.get("tta_mode")?,
        };
        let mode = match mode_name.as_deref() {
            None => d.mode,
            Some("online") => TtaMode::Online,
            Some("episodic") => TtaMode::Episodic,
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "unknown tta mode {other:?} (expected online or episodic)"
                )))
            }
        };
        Ok(TtaConfig {
            lr: pick(self.lr_tta, file.get("lr_tta")?, d.lr),
            steps_per_batch: pick(self.tta_steps, file.get("tta_steps")?, d.steps_per_batch),
            adapt_batch_size: pick(
                self.tta_batch_size,
                file.get("tta_batch_size")?,
                d.adapt_batch_size,
            ),
            mode,
        })
    }
}

#[derive(Args)]
struct GenArgs {
    /// default, sweep, or attack-split
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    #[arg(long = "out-dir", default_value = "data")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of center CSVs (every file is one data center).
    #[arg(long = "data-dir")]
    data_dir: PathBuf,
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    #[arg(long)]
    hidden: Option<String>,
    #[command(flatten)]
    fed: FedArgs,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    model: PathBuf,
    /// CSV whose feature columns form the unlabeled stream.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "adapted.ckpt")]
    out: PathBuf,
    #[command(flatten)]
    tta: TtaArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// CSV of score,label rows (label 1 = real).
    #[arg(long)]
    scores: PathBuf,
    /// Dev score CSV; picks the threshold when given.
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long = "roc-out")]
    roc_out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// default, sweep, or attack-split
    #[arg(long)]
    benchmark: Option<String>,
    #[arg(long = "data-seed")]
    data_seed: Option<u64>,
    #[arg(long)]
    hidden: Option<String>,
    /// Comma-separated subset of single,fused,all,fed,fedtta.
    #[arg(long)]
    baselines: Option<String>,
    #[arg(long = "out-dir", default_value = "bench_out")]
    out_dir: PathBuf,
    #[command(flatten)]
    fed: FedArgs,
    #[command(flatten)]
    tta: TtaArgs,
}

/// key=value lines; # starts a comment.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| Error::DataFile {
                    path: path.display().to_string(),
                    reason: format!("line {}: expected key=value", lineno + 1),
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Self(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                Error::InvalidConfig(format!("config key {key} has unusable value {raw:?}"))
            }),
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_hidden(raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad hidden layer size {p:?}")))
        })
        .collect()
}

fn parse_baselines(raw: &str) -> Result<Vec<Baseline>> {
    raw.split(',').map(|p| Baseline::parse(p.trim())).collect()
}

fn benchmark_specs(name: &str) -> Result<Vec<DomainSpec>> {
    match name {
        "default" => Ok(default_benchmark()),
        "sweep" => Ok(sweep_benchmark()),
        "attack-split" | "attack_split" => Ok(attack_split_benchmark()),
        other => Err(Error::InvalidConfig(format!(
            "unknown benchmark {other:?} (expected default, sweep, attack-split)"
        ))),
    }
}

fn load_center_dir(dir: &Path) -> Result<Vec<DomainDataset>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "csv").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no .csv files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| DomainDataset::read_csv(p)).collect()
}

fn read_scores(path: &Path) -> Result<ScoredSet> {
    let bad = |reason: String| Error::DataFile {
        path: path.display().to_string(),
        reason,
    };
    let text = fs::read_to_string(path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (score, label) = line
            .split_once(',')
            .ok_or_else(|| bad(format!("line {}: expected score,label", lineno + 1)))?;
        scores.push(
            score
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("line {}: bad score {score:?}", lineno + 1)))?,
        );
        labels.push(match label.trim() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("line {}: bad label {other:?}", lineno + 1))),
        });
    }
    ScoredSet::new(scores, labels)
}

fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.cmd {
        Cmd::Gen(args) => {
            let name = args
                .benchmark
                .or(file.get("benchmark")?)
                .unwrap_or_else(|| "default".to_string());
            let specs = benchmark_specs(&name)?;
            let data_seed = pick(args.data_seed, file.get("data_seed")?, DEFAULT_DATA_SEED);
            fs::create_dir_all(&args.out_dir)?;
            for (i, spec) in specs.iter().enumerate() {
                let ds = make_domain(spec, data_seed.wrapping_add(i as u64))?;
                let path = args.out_dir.join(format!("{}.csv", ds.id()));
                ds.write_csv(&path)?;
                println!("wrote {} ({} rows)", path.display(), ds.len());
            }
        }
        Cmd::Train(args) => {
            let centers = load_center_dir(&args.data_dir)?;
            let hidden = parse_hidden(&pick(
                args.hidden,
                file.get("hidden")?,
                DEFAULT_HIDDEN.to_string(),
            ))?;
            let net = NetworkSpec::new(centers[0].dim(), hidden)?;
            let fed = args.fed.build(&file)?;
            let run = run_federated_training(&centers, &net, &fed)?;
            for line in run.history_lines() {
                println!("{line}");
            }
            if run.stopped_early {
                println!("stopped early after {} rounds", run.history.len());
            }
            checkpoint::save(&args.out, &run.params, &net)?;
            println!("wrote {}", args.out.display());
        }
        Cmd::Adapt(args) => {
            let (params, net) = checkpoint::load(&args.model)?;
            let ds = DomainDataset::read_csv(&args.data)?;
            let tta = args.tta.build(&file)?;
            let stream = stream_batches(ds.full_xy().0, tta.adapt_batch_size)?;
            let out = adapt(&params, &net, &stream, &tta)?;
            for line in out.trace_lines() {
                println!("{line}");
            }
            checkpoint::save(&args.out, &out.params, &net)?;
            println!("wrote {}", args.out.display());
        }
        Cmd::Eval(args) => {
            let test = read_scores(&args.scores)?;
            let tau = match (&args.dev, args.threshold) {
                (Some(dev), _) => select_threshold(&read_scores(dev)?)?,
                (None, Some(t)) => t,
                (None, None) => {
                    return Err(Error::InvalidConfig(
                        "eval needs --dev or --threshold".into(),
                    ))
                }
            };
            let report = evaluate(&test, tau)?;
            for line in report.key_value_lines() {
                println!("{line}");
            }
            if let Some(path) = args.roc_out {
                fs::write(&path, report.roc_csv())?;
                println!("wrote {}", path.display());
            }
        }
        Cmd::Bench(args) => {
            let name = args
                .benchmark
                .or(file.get("benchmark")?)
                .unwrap_or_else(|| "default".to_string());
            let baselines = match args.baselines.or(file.get("baselines")?) {
                Some(raw) => parse_baselines(&raw)?,
                None => Baseline::ALL.to_vec(),
            };
            let cfg = ExperimentConfig {
                domain_specs: benchmark_specs(&name)?,
                data_seed: pick(args.data_seed, file.get("data_seed")?, DEFAULT_DATA_SEED),
                hidden_dims: parse_hidden(&pick(
                    args.hidden,
                    file.get("hidden")?,
                    DEFAULT_HIDDEN.to_string(),
                ))?,
                fed: args.fed.build(&file)?,
                tta: args.tta.build(&file)?,
                baselines,
                out_dir: args.out_dir,
            };
            let report = run_experiment(&cfg)?;
            for s in &report.summaries {
                println!(
                    "{}: rows {} avg_hter {:.4} avg_eer {:.4} avg_auc {:.4}",
                    s.baseline, s.rows, s.avg_hter, s.avg_eer, s.avg_auc
                );
            }
            println!("wrote {}", cfg.out_dir.join("report.txt").display());
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
