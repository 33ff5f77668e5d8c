use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use botfuse::eval::{self, CvConfig, FoldGranularity, MetricMeans};
use botfuse::features::extract_node_features;
use botfuse::flow::{filter_tcp_udp, parse_flow_file, slice_windows, write_canonical_csv, FlowRecord, WindowSlice};
use botfuse::gcn::{deserialize_model, serialize_model, GcnModel};
use botfuse::graph::{write_graph, Architecture};
use botfuse::pipeline::{self, FeatureSource, PipelineConfig};
use botfuse::pretrain::{load_graph_dataset, pretrain_gcn, TrainConfig};
use botfuse::synth::{self, generate_flows, SyntheticGraphSpec, TrafficSpec};
use botfuse::trees::TreeEnsemble;

#[derive(Parser)]
#[command(name = "botfuse", version, about = "Botnet node detection from flow features and graph topology")]
struct Cli {
    /// Seed for every random choice (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML or JSON file with `pipeline`, `train` and `cv` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file (or directory for `synth --kind graphs`); stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the GCN on labelled topologies and write the frozen model.
    Pretrain(PretrainArgs),
    /// Dump per-window node flow features as CSV.
    Features(FlowArgs),
    /// Fit the Extra-Trees classifier on labelled flows.
    Train(TrainArgs),
    /// Classify every node of every window.
    Detect(DetectArgs),
    /// Cross-validate the classifier on labelled flows.
    Eval(EvalArgs),
    /// Pretrain and cross-validate at several depths.
    Sweep(SweepArgs),
    /// Generate synthetic graphs or flow traces.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct FlowArgs {
    /// Flow file, or `synth` for a generated trace.
    #[arg(long)]
    flows: String,
    #[arg(long, default_value = "canonical")]
    format: String,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    stride: Option<f64>,
    /// Architecture of the generated trace when `--flows synth`.
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Architecture>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_parser = parse_arch, default_value = "c2")]
    arch: Architecture,
    #[arg(long)]
    depth: Option<usize>,
    /// Interchange file or directory, or `synth`.
    #[arg(long, default_value = "synth")]
    data: String,
    /// Number of generated graphs when `--data synth`.
    #[arg(long, default_value_t = 5)]
    graphs: usize,
    /// Per-epoch report as JSON lines; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flows: FlowArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    features: Option<Source>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    flows: FlowArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long, value_enum)]
    features: Option<Source>,
    /// Include per-stage timings in each window line.
    #[arg(long)]
    timings: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    flows: FlowArgs,
    /// Frozen model; pretrained on synthetic graphs when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Feature sources to compare.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "fused")]
    features: Vec<Source>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long, value_enum)]
    granularity: Option<Granularity>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    flows: FlowArgs,
    /// Comma-separated depths; 10,12,14,16 for C2 and 16,20,24,28 for P2P by default.
    #[arg(long, value_delimiter = ',')]
    depths: Vec<usize>,
    /// Pretraining data: interchange file or directory, or `synth`.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value_t = 5)]
    graphs: usize,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_arch, default_value = "c2")]
    arch: Architecture,
    #[arg(long, value_enum, default_value = "flows")]
    kind: SynthKind,
    /// Number of graphs for `--kind graphs`.
    #[arg(long, default_value_t = 5)]
    count: usize,
    #[arg(long)]
    background: Option<usize>,
    #[arg(long)]
    bots: Option<usize>,
    #[arg(long)]
    controllers: Option<usize>,
    #[arg(long)]
    mesh_degree: Option<usize>,
    /// Trace length in seconds for `--kind flows`.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Graphs,
    Flows,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Source {
    Fused,
    Topology,
    Flow,
}

impl From<Source> for FeatureSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Fused => FeatureSource::Fused,
            Source::Topology => FeatureSource::TopologyOnly,
            Source::Flow => FeatureSource::FlowOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Granularity {
    Node,
    Window,
}

fn parse_arch(s: &str) -> std::result::Result<Architecture, String> {
    s.parse().map_err(|e: botfuse::Error| e.to_string())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    pipeline: PipelineConfig,
    train: TrainConfig,
    cv: CvConfig,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text)?
        };
        Ok(cfg)
    }

    fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.train.seed = s;
            self.cv.seed = s;
            self.cv.trees.seed = s;
            self.pipeline.trees.seed = s;
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = FileConfig::load(cli.config.as_deref())?;
    cfg.apply_seed(cli.seed);
    let seed = cli.seed.unwrap_or(cfg.train.seed);
    let out = cli.out.as_deref();
    match cli.command {
        Command::Pretrain(a) => pretrain(a, &cfg, seed, out),
        Command::Features(a) => features(a, &cfg, seed, out),
        Command::Train(a) => train(a, &cfg, seed, out),
        Command::Detect(a) => detect(a, &cfg, seed, out),
        Command::Eval(a) => evaluate(a, &cfg, seed, out),
        Command::Sweep(a) => sweep(a, &cfg, seed, out),
        Command::Synth(a) => synthesize(a, seed, out),
    }
}

fn writer(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn load_flows(a: &FlowArgs, seed: u64, default_arch: Architecture) -> Result<Vec<FlowRecord>> {
    if a.flows == "synth" {
        let arch = a.arch.unwrap_or(default_arch);
        let spec = TrafficSpec::new(SyntheticGraphSpec::preset(arch, 400, seed));
        return Ok(generate_flows(&spec)?.0);
    }
    let report = parse_flow_file(&a.flows, &a.format)?;
    if report.malformed > 0 {
        eprintln!("{}: skipped {} malformed lines", a.flows, report.malformed);
    }
    Ok(filter_tcp_udp(&report.records))
}

fn windows_of(a: &FlowArgs, cfg: &mut PipelineConfig, seed: u64) -> Result<Vec<WindowSlice>> {
    if let Some(w) = a.window {
        cfg.window_len = w;
    }
    if let Some(s) = a.stride {
        cfg.stride = s;
    }
    if let Some(arch) = a.arch {
        cfg.architecture = arch;
    }
    let flows = load_flows(a, seed, cfg.architecture)?;
    let windows = slice_windows(&flows, cfg.window_len, cfg.stride)?;
    if windows.is_empty() {
        bail!("no TCP/UDP flows left after filtering");
    }
    Ok(windows)
}

fn load_model(path: &Path) -> Result<GcnModel> {
    let bytes = std::fs::read(path).with_context(|| format!("reading model {}", path.display()))?;
    Ok(deserialize_model(&bytes)?)
}

fn load_pretraining(data: &str, arch: Architecture, graphs: usize, seed: u64) -> Result<Vec<botfuse::graph::CommGraph>> {
    if data == "synth" {
        Ok(synth::pretraining_set(arch, graphs, seed)?)
    } else {
        Ok(load_graph_dataset(data)?)
    }
}

fn pretrain(a: PretrainArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let Some(out) = out else {
        bail!("pretrain needs --out for the model file");
    };
    let depth = a.depth.unwrap_or(a.arch.default_depth());
    let data = load_pretraining(&a.data, a.arch, a.graphs, seed)?;
    let (mut model, report) = pretrain_gcn(&data, depth, &cfg.train)?;
    model.architecture = Some(a.arch);
    model.normalization = cfg.pipeline.normalization;
    std::fs::write(out, serialize_model(&model))
        .with_context(|| format!("writing {}", out.display()))?;
    let mut w = writer(a.report.as_deref())?;
    report.write_json_lines(&mut w)?;
    w.flush()?;
    eprintln!(
        "depth {depth}: best validation accuracy {:.4} at epoch {} of {}{}",
        report.best_val_acc,
        report.best_epoch,
        report.epochs.len(),
        if report.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn features(a: FlowArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut pcfg = cfg.pipeline.clone();
    let windows = windows_of(&a, &mut pcfg, seed)?;
    let mut w = writer(out)?;
    writeln!(w, "window_start,node_id,conn,fail_conn,dur,src_bytes_avg,dst_bytes_avg")?;
    for win in &windows {
        for f in extract_node_features(win)?.values() {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                win.window_start, f.node_id, f.conn, f.fail_conn, f.dur, f.src_bytes_avg, f.dst_bytes_avg
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn pipeline_for(cfg: &FileConfig, model: &GcnModel, source: Option<Source>) -> PipelineConfig {
    let mut p = cfg.pipeline.clone();
    if let Some(arch) = model.architecture {
        p.architecture = arch;
    }
    if p.depth.is_none() && model.depth != p.architecture.default_depth() {
        p.depth = Some(model.depth);
    }
    if let Some(s) = source {
        p.features = s.into();
    }
    p
}

fn train(a: TrainArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let Some(out) = out else {
        bail!("train needs --out for the ensemble file");
    };
    let model = load_model(&a.model)?;
    let mut pcfg = pipeline_for(cfg, &model, a.features);
    let windows = windows_of(&a.flows, &mut pcfg, seed)?;
    let ensemble = pipeline::train_detector(&windows, &model, &pcfg)?;
    std::fs::write(out, ensemble.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    eprintln!("{} trees over {} windows", ensemble.trees.len(), windows.len());
    Ok(())
}

fn detect(a: DetectArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let model = load_model(&a.model)?;
    let text = std::fs::read_to_string(&a.ensemble)
        .with_context(|| format!("reading ensemble {}", a.ensemble.display()))?;
    let ensemble = TreeEnsemble::from_json(&text)?;
    let mut pcfg = pipeline_for(cfg, &model, a.features);
    let windows = windows_of(&a.flows, &mut pcfg, seed)?;
    let report = pipeline::detect(&windows, &model, &ensemble, &pcfg)?;
    let mut w = writer(out)?;
    w.write_all(report.to_json_lines(a.timings)?.as_bytes())?;
    w.flush()?;
    eprintln!("{} node verdicts flagged over {} windows", report.flagged(), report.windows.len());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow<'a> {
    features: &'a str,
    cv: &'a eval::CvSummary,
}

fn cv_config(cfg: &FileConfig, folds: Option<usize>, granularity: Option<Granularity>) -> CvConfig {
    let mut cv = cfg.cv;
    if let Some(k) = folds {
        cv.k = k;
    }
    if let Some(g) = granularity {
        cv.granularity = match g {
            Granularity::Node => FoldGranularity::Node,
            Granularity::Window => FoldGranularity::Window,
        };
    }
    cv
}

fn emit_metrics<T: Serialize>(rows: &[(String, MetricMeans)], json: &T, out: Option<&Path>) -> Result<()> {
    let table = eval::metrics_table(rows);
    let text = serde_json::to_string_pretty(json)?;
    match out {
        Some(p) => {
            std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            println!("{text}");
        }
    }
    Ok(())
}

fn evaluate(a: EvalArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let arch = a.flows.arch.unwrap_or(cfg.pipeline.architecture);
    let model = match &a.model {
        Some(p) => load_model(p)?,
        None => {
            let data = synth::pretraining_set(arch, 5, seed)?;
            let (mut m, report) = pretrain_gcn(&data, cfg.pipeline.depth.unwrap_or(arch.default_depth()), &cfg.train)?;
            m.architecture = Some(arch);
            eprintln!("pretrained on synthetic graphs: validation accuracy {:.4}", report.best_val_acc);
            m
        }
    };
    let cv = cv_config(cfg, a.folds, a.granularity);
    let mut names = Vec::new();
    let mut summaries = Vec::new();
    for source in &a.features {
        let mut pcfg = pipeline_for(cfg, &model, Some(*source));
        let windows = windows_of(&a.flows, &mut pcfg, seed)?;
        let embedded = pipeline::embed_windows(&windows, &model, &pcfg)?;
        let samples = pipeline::pool_labeled(&embedded, pcfg.normalization);
        summaries.push(eval::kfold_cv(&samples, &cv)?);
        names.push(
            source
                .to_possible_value()
                .map(|v| v.get_name().to_string())
                .unwrap_or_default(),
        );
    }
    let rows: Vec<(String, MetricMeans)> = names.iter().cloned().zip(summaries.iter().map(|s| s.mean)).collect();
    let json: Vec<EvalRow> = names
        .iter()
        .zip(&summaries)
        .map(|(n, cv)| EvalRow { features: n, cv })
        .collect();
    emit_metrics(&rows, &json, out)
}

fn sweep(a: SweepArgs, cfg: &FileConfig, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut pcfg = cfg.pipeline.clone();
    let windows = windows_of(&a.flows, &mut pcfg, seed)?;
    let arch = pcfg.architecture;
    let depths = if a.depths.is_empty() {
        match arch {
            Architecture::C2 => vec![10, 12, 14, 16],
            Architecture::P2P => vec![16, 20, 24, 28],
        }
    } else {
        a.depths.clone()
    };
    let data = load_pretraining(&a.data, arch, a.graphs, seed)?;
    let cv = cv_config(cfg, a.folds, None);
    let rows = eval::depth_sweep(arch, &depths, &data, &cfg.train, &windows, &pcfg, &cv)?;
    let table: Vec<(String, MetricMeans)> = rows
        .iter()
        .map(|r| (format!("depth {}", r.depth), r.cv.mean))
        .collect();
    emit_metrics(&table, &rows, out)
}

fn synthesize(a: SynthArgs, seed: u64, out: Option<&Path>) -> Result<()> {
    let spec = |s: u64, default_background: usize| -> SyntheticGraphSpec {
        let mut spec = SyntheticGraphSpec::preset(a.arch, a.background.unwrap_or(default_background), s);
        if let Some(b) = a.bots {
            spec.n_bots = b;
        }
        if let Some(c) = a.controllers {
            spec.controllers = c;
        }
        if let Some(k) = a.mesh_degree {
            spec.mesh_degree = k;
        }
        spec
    };
    match a.kind {
        SynthKind::Graphs => {
            let Some(dir) = out else {
                bail!("synth --kind graphs needs --out <directory>");
            };
            std::fs::create_dir_all(dir)?;
            for i in 0..a.count {
                let g = synth::generate_synthetic_graph(&spec(seed + i as u64, 900))?;
                write_graph(dir.join(format!("graph_{i:03}.json")), &g)?;
            }
        }
        SynthKind::Flows => {
            let mut traffic = TrafficSpec::new(spec(seed, 400));
            if let Some(d) = a.duration {
                traffic.duration = d;
            }
            let (flows, _) = generate_flows(&traffic)?;
            let mut w = writer(out)?;
            write_canonical_csv(&mut w, &flows)?;
            w.flush()?;
        }
    }
    Ok(())
}
