use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io::{self, Curve, DecodeMode, Meta, NoseReport};
use crate::parallel;
use crate::pipeline::{self, Ablation, Metric};
use clap::{Parser, Subcommand, ValueEnum};
use reina_core::decoder::{DecodeConfig, PolicyKind};
use reina_core::metrics::{nose, CurveSpec};
use reina_core::synth::Split;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "reina-lab", version, about = "Streaming translation policy lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by a config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; receives dataset.jsonl.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to start from (required for stages 2 and 3).
        #[arg(long, required_if_eq_any([("stage", "2"), ("stage", "3")]))]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dataset file or directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Decode one split and write a per-utterance log.
    Decode {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, required_if_eq("mode", "waitk"))]
        k: Option<usize>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Trace a latency/quality curve over thresholds (or wait-k lags).
    Sweep {
        #[arg(long, value_delimiter = ',', conflicts_with = "waitk")]
        alphas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        waitk: Option<Vec<usize>>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score a decode log.
    Score {
        #[arg(long, value_enum)]
        metric: MetricArg,
        #[arg(long)]
        log: PathBuf,
    },
    /// Normalized streaming efficiency of a curve between two AL bounds.
    Nose {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, num_args = 2, value_names = ["X", "Y"], allow_negative_numbers = true)]
        bounds: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Gradient checks of every op and of the whole-model losses.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a paired ablation and print a comparison table.
    Ablate {
        #[arg(long, value_enum)]
        which: AblationArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Offline,
    Stream,
    Waitk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Bleu,
    Al,
    Laal,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AblationArg {
    Monotonicity,
    Truncation,
    Baseline,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => ExperimentConfig::default().resolved(),
    }
}

fn load_data(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<io::Dataset> {
    match data {
        Some(p) => {
            let ds = io::read_dataset(p)?;
            pipeline::check_task(cfg, &ds)?;
            Ok(ds)
        }
        None => pipeline::generate(cfg),
    }
}

fn with_inputs(mut m: Meta, inputs: &[Option<&Path>]) -> Meta {
    for p in inputs.iter().flatten() {
        m = m.input(p);
    }
    m
}

pub fn execute(cmd: Command) -> Result<()> {
    let threads = parallel::threads()?;
    match cmd {
        Command::GenData { config, out, force } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ds = pipeline::generate(&cfg)?;
            let path = out.join("dataset.jsonl");
            io::check_distinct(&path, &[&config])?;
            io::write_dataset(&path, &ds, force)?;
            io::write_json(&out.join("config.json"), &cfg, force)?;
            io::write_meta(&path, &Meta::new("gen-data", Some(cfg.data.seed), Some(&cfg)).input(&config), force)?;
            println!("{} utterances -> {}", ds.utterances.len(), path.display());
        }
        Command::Train {
            stage,
            config,
            init,
            out,
            data,
            seed,
            force,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seed = seed.unwrap_or(cfg.seed());
            let mut inputs: Vec<&Path> = vec![&config];
            inputs.extend(init.as_deref());
            inputs.extend(data.as_deref());
            io::check_distinct(&out, &inputs)?;
            if out.exists() && !force {
                return Err(LabError::Exists(out));
            }
            let ds = load_data(&cfg, data.as_deref())?;
            let init_ck = init.as_deref().map(io::load_checkpoint).transpose()?;
            let ck = pipeline::train(&cfg, stage, seed, init_ck.as_ref(), &ds.utterances)?;
            io::save_checkpoint(&out, &ck, force)?;
            let meta = with_inputs(
                Meta::new(&format!("train --stage {stage}"), Some(seed), Some(&cfg)),
                &[Some(&config), init.as_deref(), data.as_deref()],
            );
            io::write_meta(&out, &meta, force)?;
            let last = ck.log.last().map_or(f64::NAN, |r| r.loss);
            println!("stage {stage}: {} steps, final loss {last:.6} -> {}", ck.log.len(), out.display());
        }
        Command::Decode {
            mode,
            alpha,
            k,
            ckpt,
            split,
            out,
            config,
            data,
            force,
        } => {
            let cfg = load_config(config.as_deref())?;
            let mut inputs: Vec<&Path> = vec![&ckpt];
            inputs.extend(config.as_deref());
            inputs.extend(data.as_deref());
            io::check_distinct(&out, &inputs)?;
            let ck = io::load_checkpoint(&ckpt)?;
            let ds = load_data(&cfg, data.as_deref())?;
            pipeline::check_model(&ck.params, &ds.task)?;
            let utts = pipeline::select(&ds.utterances, split.into(), 0);
            let (mode, dc) = match mode {
                ModeArg::Offline => (DecodeMode::Offline, cfg.decode),
                ModeArg::Stream => (
                    DecodeMode::Stream,
                    DecodeConfig {
                        alpha: alpha.unwrap_or(cfg.decode.alpha),
                        policy: PolicyKind::Learned,
                        ..cfg.decode
                    },
                ),
                ModeArg::Waitk => (
                    DecodeMode::Waitk,
                    DecodeConfig {
                        policy: PolicyKind::WaitK { k: k.unwrap_or(1) },
                        ..cfg.decode
                    },
                ),
            };
            dc.validate()?;
            let recs = pipeline::decode_records(&ck.params, &utts, mode, &dc, threads)?;
            io::write_decode_log(&out, &recs, force)?;
            let mut resolved = cfg.clone();
            resolved.decode = dc;
            let meta = with_inputs(
                Meta::new("decode", ckpt_seed(&ck), Some(&resolved)),
                &[Some(&ckpt), config.as_deref(), data.as_deref()],
            );
            io::write_meta(&out, &meta, force)?;
            println!("{} utterances -> {}", recs.len(), out.display());
        }
        Command::Sweep {
            alphas,
            waitk,
            ckpt,
            out,
            split,
            config,
            data,
            force,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(a) = alphas {
                cfg.sweep.alphas = a;
            }
            if let Some(s) = split {
                cfg.sweep.split = s.into();
            }
            if let Some(k) = &waitk {
                cfg.sweep.waitk = k.clone();
            }
            cfg.validate()?;
            let mut inputs: Vec<&Path> = vec![&ckpt];
            inputs.extend(config.as_deref());
            inputs.extend(data.as_deref());
            io::check_distinct(&out, &inputs)?;
            let ck = io::load_checkpoint(&ckpt)?;
            let ds = load_data(&cfg, data.as_deref())?;
            pipeline::check_model(&ck.params, &ds.task)?;
            let utts = pipeline::select(&ds.utterances, cfg.sweep.split, cfg.sweep.max_utterances);
            let sw = if waitk.is_some() {
                pipeline::sweep_lags(&ck.params, &utts, &cfg.waitk_lags()?, &cfg.decode, threads)?
            } else {
                pipeline::sweep_alphas(&ck.params, &utts, &cfg.sweep.alphas, &cfg.decode, threads)?
            };
            for w in &sw.warnings {
                eprintln!("warning: {w}");
            }
            let curve = Curve {
                points: sw.points,
                offline_bleu: sw.offline_bleu,
            };
            io::write_curve(&out, &curve, force)?;
            let meta = with_inputs(
                Meta::new("sweep", ckpt_seed(&ck), Some(&cfg)),
                &[Some(&ckpt), config.as_deref(), data.as_deref()],
            );
            io::write_meta(&out, &meta, force)?;
            println!("{} points -> {}", curve.points.len(), out.display());
        }
        Command::Score { metric, log } => {
            let recs = io::read_decode_log(&log)?;
            let m = match metric {
                MetricArg::Bleu => Metric::Bleu,
                MetricArg::Al => Metric::Al,
                MetricArg::Laal => Metric::Laal,
            };
            println!("{}", pipeline::score(&recs, m)?);
        }
        Command::Nose {
            curve,
            bounds,
            out,
            force,
        } => {
            let c = io::read_curve(&curve)?;
            let (x, y) = (bounds[0], bounds[1]);
            let v = nose(&CurveSpec::new(c.points, x, y, c.offline_bleu))?;
            if let Some(out) = out {
                io::check_distinct(&out, &[&curve])?;
                let report = NoseReport {
                    x,
                    y,
                    offline_bleu: c.offline_bleu,
                    nose: v,
                };
                io::write_json(&out, &report, force)?;
                io::write_meta(&out, &Meta::new("nose", None, None).input(&curve), force)?;
            }
            println!("{v}");
        }
        Command::Gradcheck { seed } => {
            let results = reina_core::checks::run_gradient_checks(seed)?;
            let mut failed = Vec::new();
            for r in &results {
                let ok = r.passed();
                println!(
                    "{:<18} max_rel_error {:.3e} over {:>3} coords  {}",
                    r.name,
                    r.report.max_rel_error,
                    r.report.coords_checked,
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                return Err(LabError::Check(failed.join(", ")));
            }
        }
        Command::Ablate {
            which,
            config,
            out,
            data,
            force,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let which = match which {
                AblationArg::Monotonicity => Ablation::Monotonicity,
                AblationArg::Truncation => Ablation::Truncation,
                AblationArg::Baseline => Ablation::Baseline,
            };
            let table = out.join("comparison.csv");
            if table.exists() && !force {
                return Err(LabError::Exists(table));
            }
            let ds = load_data(&cfg, data.as_deref())?;
            let rows = ablate(&cfg, which, &ds.utterances, &out, force, threads)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            println!("{:<6} {:<18} {:>8} {:>10} {:>8}", "seed", "arm", "nose", "min_al_95", "offline");
            for r in &rows {
                let al = r.min_al_95.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!(
                    "{:<6} {:<18} {:>8.4} {:>10} {:>8.2}",
                    r.seed,
                    r.arm.name(),
                    r.nose,
                    al,
                    r.offline_bleu
                );
                w.serialize(r).map_err(|e| LabError::format(&table, e))?;
            }
            let bytes = w.into_inner().map_err(|e| LabError::format(&table, e.to_string()))?;
            io::write_output(&table, &bytes, force)?;
            io::write_json(&out.join("config.json"), &cfg, force)?;
            let meta = with_inputs(
                Meta::new(&format!("ablate --which {}", ablation_name(which)), Some(cfg.seed()), Some(&cfg)),
                &[Some(&config), data.as_deref()],
            );
            io::write_meta(&table, &meta, force)?;
        }
    }
    Ok(())
}

fn ckpt_seed(ck: &reina_core::trainer::Checkpoint) -> Option<u64> {
    ck.provenance.last().map(|p| p.seed)
}

fn ablation_name(a: Ablation) -> &'static str {
    match a {
        Ablation::Monotonicity => "monotonicity",
        Ablation::Truncation => "truncation",
        Ablation::Baseline => "baseline",
    }
}

/// Runs the paired arms for every configured seed, writing each arm's
/// checkpoint and curve under `out/seed<N>/`.
pub fn ablate(
    cfg: &ExperimentConfig,
    which: Ablation,
    data: &[reina_core::synth::Utterance],
    out: &Path,
    force: bool,
    threads: usize,
) -> Result<Vec<pipeline::ComparisonRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let run = pipeline::run_study(cfg, seed, data, which.arms(), threads)?;
        let dir = out.join(format!("seed{seed}"));
        for a in &run.arms {
            io::save_checkpoint(&dir.join(format!("{}.ckpt.json", a.arm.name())), &a.checkpoint, force)?;
            let curve = Curve {
                points: a.sweep.points.clone(),
                offline_bleu: a.sweep.offline_bleu,
            };
            io::write_curve(&dir.join(format!("{}.csv", a.arm.name())), &curve, force)?;
        }
        rows.extend(pipeline::compare(&run, which.arms(), cfg.sweep.bounds)?);
    }
    Ok(rows)
}
