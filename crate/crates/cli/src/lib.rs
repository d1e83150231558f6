//! The `cgap` command line: train, evaluate, cost, visualize and inspect models.

use std::io::Write;
use std::path::{Path, PathBuf};

use cgap_core::checkpoint::{load_checkpoint, save_trainer, Checkpoint};
use cgap_core::config::{load_hw_config, ExperimentConfig};
use cgap_core::cost::{compare, model_costs, traffic_latency_energy, Architecture, Comparison, CostReport, HwConfig};
use cgap_core::data::{load_mnist, synthetic_dataset_with, Dataset, Split, SynthSpec};
use cgap_core::export::{export_heatmap, export_metrics, heatmap_csv};
use cgap_core::graph::DynamicNetwork;
use cgap_core::trainer::{evaluate, EpochMetrics, Trainer};
use cgap_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable naming the MNIST directory.
pub const MNIST_DIR_ENV: &str = "CGAP_MNIST_DIR";
const DEFAULT_MNIST_DIR: &str = "data/mnist";

#[derive(Debug, Parser)]
#[command(
    name = "cgap",
    version,
    about = "Grow-then-prune CNN training and inference cost estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a config file or resume a training checkpoint.
    Train(TrainArgs),
    /// Print the test accuracy of a checkpoint.
    Eval(EvalArgs),
    /// Estimate inference cost, optionally against a baseline model.
    Cost(CostArgs),
    /// Write the |w| heatmap of one layer as CSV.
    Heatmap(HeatmapArgs),
    /// Print a model's widths, parameter counts and structural checks.
    Describe(ModelArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training checkpoint to resume from.
    #[arg(long, conflicts_with = "config")]
    ckpt: Option<PathBuf>,
    /// Where to write the final training checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-epoch metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Training data source, overriding the config.
    #[arg(long)]
    data: Option<String>,
    /// Evaluation data source, overriding the config.
    #[arg(long)]
    test_data: Option<String>,
    /// Seed for initialization, shuffling and plasticity.
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this epoch; the checkpoint can be resumed later.
    #[arg(long)]
    until: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `mnist:train`, `mnist:test` or `synth:SPEC`.
    #[arg(long, default_value = "mnist:test")]
    data: String,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Model checkpoint.
    #[arg(long, required_unless_present = "config")]
    ckpt: Option<PathBuf>,
    /// Experiment TOML whose freshly built model is used.
    #[arg(long, conflicts_with = "ckpt")]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Hardware TOML.
    #[arg(long)]
    hw: Option<PathBuf>,
    /// Baseline checkpoint to compare against.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct HeatmapArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Index of a conv or fc layer.
    #[arg(long)]
    layer: usize,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 for usage errors, 1 for any other failure.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_to(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn dispatch_to<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
                let _ = writeln!(err, "{line}");
            }
            return code;
        }
    };
    match run(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.to_string().replace('\n', " "));
            1
        }
    }
}

fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Cost(a) => cost(a, out),
        Command::Heatmap(a) => heatmap(a, out),
        Command::Describe(a) => describe(a, out),
    }
}

/// Where MNIST lives: the environment variable, then the config, then `data/mnist`.
fn mnist_dir(config: Option<&ExperimentConfig>) -> PathBuf {
    if let Some(dir) = std::env::var_os(MNIST_DIR_ENV) {
        return PathBuf::from(dir);
    }
    config
        .and_then(|c| c.data.mnist_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
}

/// Loads `mnist:train`, `mnist:test` or `synth:k=v,...`.
pub fn load_source(source: &str, mnist: &Path) -> Result<Dataset> {
    match source.split_once(':') {
        Some(("mnist", "train")) => load_mnist(mnist, Split::Train),
        Some(("mnist", "test")) => load_mnist(mnist, Split::Test),
        Some(("synth", spec)) => synthetic_dataset_with(&SynthSpec::parse(spec)?),
        _ => Err(Error::InvalidInput(format!(
            "unknown data source {source:?}; expected mnist:train, mnist:test or synth:SPEC"
        ))),
    }
}

fn build_network(cfg: &ExperimentConfig) -> Result<DynamicNetwork> {
    let spec = cfg.model.network_spec()?;
    DynamicNetwork::build(&spec, &mut ChaCha8Rng::seed_from_u64(cfg.model.init_seed))
}

fn epoch_line(net: &DynamicNetwork, m: &EpochMetrics) -> String {
    let test = m.test_accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    format!(
        "epoch {:>3}  loss {:.4}  train_acc {:.4}  test_acc {test}  params {}  flops {}  {:<5}  {}",
        m.epoch,
        m.train_loss,
        m.train_accuracy,
        m.active_params,
        m.flops,
        m.event.as_str(),
        net.describe()
    )
}

fn train(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let (mut trainer, cfg) = match &a.ckpt {
        Some(path) => {
            if a.seed.is_some() {
                return Err(Error::Config("--seed cannot change a resumed run".into()));
            }
            (load_checkpoint(path)?.into_trainer()?, None)
        }
        None => {
            let mut cfg = match &a.config {
                Some(path) => ExperimentConfig::load(path)?,
                None => ExperimentConfig::default(),
            };
            if let Some(seed) = a.seed {
                cfg.model.init_seed = seed;
                cfg.train.seed = seed;
                cfg.growth.rng_seed = seed;
            }
            let trainer = Trainer::new(build_network(&cfg)?, cfg.train_config()?)?;
            (trainer, Some(cfg))
        }
    };
    let mnist = mnist_dir(cfg.as_ref());
    let data_cfg = cfg.as_ref().map(|c| c.data.clone()).unwrap_or_default();
    let train_src = a.data.or(data_cfg.train).unwrap_or_else(|| "mnist:train".into());
    let train_data = load_source(&train_src, &mnist)?;
    let test_data = match a.test_data.or(data_cfg.test) {
        Some(src) => Some(load_source(&src, &mnist)?),
        None => None,
    };
    let until = a.until.unwrap_or(trainer.config().epochs);
    let mut io_result = Ok(());
    trainer.run_until(&train_data, test_data.as_ref(), until, |t, m| {
        if io_result.is_ok() {
            io_result = writeln!(out, "{}", epoch_line(t.net(), m));
        }
    })?;
    io_result?;
    save_trainer(&trainer, &a.out)?;
    if let Some(path) = &a.metrics {
        export_metrics(trainer.metrics(), path)?;
    }
    Ok(())
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let ckpt = load_checkpoint(&a.ckpt)?;
    let data = load_source(&a.data, &mnist_dir(None))?;
    writeln!(out, "{:.4}", evaluate(&ckpt.net, &data)?)?;
    Ok(())
}

fn load_model(m: &ModelArgs) -> Result<(String, DynamicNetwork)> {
    match (&m.ckpt, &m.config) {
        (Some(path), _) => {
            let Checkpoint { net, .. } = load_checkpoint(path)?;
            Ok((path.display().to_string(), net))
        }
        (None, Some(path)) => Ok((
            path.display().to_string(),
            build_network(&ExperimentConfig::load(path)?)?,
        )),
        (None, None) => Err(Error::InvalidInput("either --ckpt or --config is required".into())),
    }
}

fn cost(a: CostArgs, out: &mut dyn Write) -> Result<()> {
    let hw = match &a.hw {
        Some(path) => load_hw_config(path)?,
        None => HwConfig::default(),
    };
    let (name, net) = load_model(&a.model)?;
    let arch = Architecture::of(&net);
    match &a.compare {
        Some(base_path) => {
            let base = load_checkpoint(base_path)?.net;
            let models = [(base_path.display().to_string(), Architecture::of(&base)), (name, arch)];
            let cmp = compare(&models, &hw)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&cmp)?)?;
            } else {
                write_comparison(&cmp, out)?;
            }
        }
        None => {
            let report = traffic_latency_energy(&arch, &hw)?;
            if a.json {
                writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            } else {
                write_report(&report, out)?;
            }
        }
    }
    Ok(())
}

fn write_report(r: &CostReport, out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "{:>5} {:<5} {:>14} {:>12} {:>14} {:>14} {:>12}",
        "layer", "kind", "flops", "params", "dram_bytes", "energy_pj", "latency_s"
    )?;
    for l in &r.layers {
        let c = &l.costs;
        writeln!(
            out,
            "{:>5} {:<5} {:>14} {:>12} {:>14} {:>14.1} {:>12.4e}",
            l.layer,
            format!("{:?}", l.kind).to_lowercase(),
            c.flops,
            c.params,
            c.dram_bytes,
            c.energy_pj,
            c.latency_s
        )?;
    }
    let t = &r.total;
    writeln!(
        out,
        "{:>5} {:<5} {:>14} {:>12} {:>14} {:>14.1} {:>12.4e}",
        "total", "", t.flops, t.params, t.dram_bytes, t.energy_pj, t.latency_s
    )?;
    Ok(())
}

fn write_comparison(cmp: &Comparison, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "baseline: {}", cmp.baseline)?;
    writeln!(
        out,
        "{:<32} {:>14} {:>12} {:>14} {:>12} {:>10} {:>10} {:>10}",
        "model", "flops", "params", "dram_bytes", "latency_s", "d_flops%", "d_dram%", "d_lat%"
    )?;
    for e in &cmp.entries {
        let t = &e.report.total;
        writeln!(
            out,
            "{:<32} {:>14} {:>12} {:>14} {:>12.4e} {:>10.2} {:>10.2} {:>10.2}",
            e.name,
            t.flops,
            t.params,
            t.dram_bytes,
            t.latency_s,
            e.delta_pct.flops,
            e.delta_pct.dram_bytes,
            e.delta_pct.latency_s
        )?;
    }
    Ok(())
}

fn heatmap(a: HeatmapArgs, out: &mut dyn Write) -> Result<()> {
    let net = load_checkpoint(&a.ckpt)?.net;
    match &a.out {
        Some(path) => export_heatmap(&net, a.layer, path),
        None => Ok(out.write_all(&heatmap_csv(&net, a.layer)?)?),
    }
}

fn describe(a: ModelArgs, out: &mut dyn Write) -> Result<()> {
    let (name, net) = load_model(&a)?;
    let d = net.describe();
    let costs = model_costs(&Architecture::of(&net), false)?;
    writeln!(out, "model: {name}")?;
    writeln!(out, "widths: {d}")?;
    writeln!(out, "params: {}", d.params)?;
    writeln!(out, "effective_params: {}", d.effective_params)?;
    writeln!(out, "flops: {}", costs.flops)?;
    for (i, node) in net.layers().iter().enumerate() {
        writeln!(
            out,
            "  {i:>2} {:<8} {:?} -> {:?}",
            format!("{:?}", node.kind()).to_lowercase(),
            node.in_shape(),
            node.out_shape()
        )?;
    }
    let violations = net.validate();
    if violations.is_empty() {
        writeln!(out, "valid: yes")?;
    } else {
        for v in violations {
            writeln!(out, "violation: {v}")?;
        }
    }
    Ok(())
}
