//! Experiment steps shared by the command line and the test suites.

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::io::{Dataset, DecodeMode, DecodeRecord};
use crate::parallel::par_map;
use reina_core::decoder::{offline_beam_decode, stream_decode, DecodeConfig, PolicyKind, StreamOutput};
use reina_core::losses::PolicyLossKind;
use reina_core::metrics::{
    average_lagging, corpus_bleu, curve_point, dedup_alphas, laal, min_al_reaching, nose, shared_bounds, CurvePoint,
    CurveSpec, Sweep,
};
use reina_core::model::ModelParams;
use reina_core::synth::{gen_task, Split, TaskParams, Utterance};
use reina_core::trainer::{resume_stage1, train_stage1, train_stage2, train_stage3_policy, Checkpoint};
use serde::{Deserialize, Serialize};

pub fn generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(Dataset {
        task: cfg.task,
        seed: cfg.data.seed,
        utterances: gen_task(&cfg.task, cfg.data.count, cfg.data.seed)?,
    })
}

/// The configured task must match the dataset it is run on.
pub fn check_task(cfg: &ExperimentConfig, ds: &Dataset) -> Result<()> {
    if cfg.task != ds.task {
        return Err(LabError::Config("dataset task differs from the config's task section".into()));
    }
    Ok(())
}

pub fn check_model(params: &ModelParams, task: &TaskParams) -> Result<()> {
    let a = &params.config;
    if a.frame_vocab != task.frame_vocab()
        || a.src_vocab != task.src_vocab
        || a.tgt_vocab != task.tgt_vocab
        || a.max_frames < task.total_frames()
    {
        return Err(LabError::Config("checkpoint was trained for a different task".into()));
    }
    Ok(())
}

/// Utterances of one split in dataset order, capped at `max` (0 = all).
pub fn select(utts: &[Utterance], split: Split, max: usize) -> Vec<Utterance> {
    let it = utts.iter().filter(|u| u.split == split).cloned();
    if max == 0 {
        it.collect()
    } else {
        it.take(max).collect()
    }
}

/// Runs one training stage; stage 1 resumes when given a checkpoint.
pub fn train(
    cfg: &ExperimentConfig,
    stage: u8,
    seed: u64,
    init: Option<&Checkpoint>,
    data: &[Utterance],
) -> Result<Checkpoint> {
    let tc = cfg.stage(stage, seed)?;
    Ok(match (stage, init) {
        (1, None) => train_stage1(&cfg.arch(), &tc, data)?,
        (1, Some(c)) => resume_stage1(c, &tc, data)?,
        (2, Some(c)) => train_stage2(c, &tc, data)?,
        (3, Some(c)) => train_stage3_policy(c, &tc, data)?,
        _ => return Err(LabError::Config(format!("stage {stage} needs an initial checkpoint"))),
    })
}

fn record(u: &Utterance, mode: DecodeMode, alpha: Option<f64>, k: Option<usize>, out: StreamOutput) -> DecodeRecord {
    DecodeRecord {
        id: u.id.clone(),
        mode,
        alpha,
        k,
        tokens: out.tokens,
        delays: out.trace.delays,
        total_s: out.trace.total_s,
        ref_tokens: u.tgt_tokens.clone(),
    }
}

pub fn decode_records(
    params: &ModelParams,
    utts: &[Utterance],
    mode: DecodeMode,
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Vec<DecodeRecord>> {
    par_map(utts, threads, |u| {
        Ok(match mode {
            DecodeMode::Offline => {
                let o = offline_beam_decode(params, &u.frames, cfg)?;
                let t = u.duration_s();
                DecodeRecord {
                    id: u.id.clone(),
                    mode,
                    alpha: None,
                    k: None,
                    delays: vec![t; o.tokens.len()],
                    tokens: o.tokens,
                    total_s: t,
                    ref_tokens: u.tgt_tokens.clone(),
                }
            }
            DecodeMode::Stream => {
                let c = DecodeConfig {
                    policy: PolicyKind::Learned,
                    ..*cfg
                };
                record(u, mode, Some(cfg.alpha), None, stream_decode(params, &u.frames, u.frame_dur_s, &c)?)
            }
            DecodeMode::Waitk => {
                let PolicyKind::WaitK { k } = cfg.policy else {
                    return Err(LabError::Config("wait-k decoding needs a lag".into()));
                };
                record(u, mode, None, Some(k), stream_decode(params, &u.frames, u.frame_dur_s, cfg)?)
            }
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    Al,
    Laal,
}

/// Corpus BLEU, or AL / LAAL averaged over sentences.
pub fn score(records: &[DecodeRecord], metric: Metric) -> Result<f64> {
    if records.is_empty() {
        return Err(LabError::Config("nothing to score".into()));
    }
    Ok(match metric {
        Metric::Bleu => {
            let h: Vec<Vec<usize>> = records.iter().map(|r| r.tokens.clone()).collect();
            let r: Vec<Vec<usize>> = records.iter().map(|r| r.ref_tokens.clone()).collect();
            corpus_bleu(&h, &r)?
        }
        Metric::Al | Metric::Laal => {
            let mut sum = 0.0;
            for r in records {
                sum += match metric {
                    Metric::Al => average_lagging(&r.trace(), r.ref_tokens.len())?,
                    _ => laal(&r.trace(), r.ref_tokens.len(), r.tokens.len())?,
                };
            }
            sum / records.len() as f64
        }
    })
}

pub fn offline_bleu(params: &ModelParams, utts: &[Utterance], cfg: &DecodeConfig, threads: usize) -> Result<f64> {
    let recs = decode_records(params, utts, DecodeMode::Offline, cfg, threads)?;
    score(&recs, Metric::Bleu)
}

fn sweep_settings(
    params: &ModelParams,
    utts: &[Utterance],
    settings: &[f64],
    cfg: &DecodeConfig,
    threads: usize,
    make: impl Fn(f64) -> DecodeConfig,
) -> Result<Sweep> {
    if settings.is_empty() || utts.is_empty() {
        return Err(LabError::Config("a sweep needs settings and utterances".into()));
    }
    let (settings, warnings) = dedup_alphas(settings);
    let mut points = Vec::with_capacity(settings.len());
    for &s in &settings {
        let c = make(s);
        let outs = par_map(utts, threads, |u| Ok(stream_decode(params, &u.frames, u.frame_dur_s, &c)?))?;
        points.push(curve_point(s, &outs, utts)?);
    }
    points.sort_by(|a, b| a.al.total_cmp(&b.al));
    Ok(Sweep {
        points,
        offline_bleu: offline_bleu(params, utts, cfg, threads)?,
        warnings,
    })
}

/// Learned-policy curve over thresholds.
pub fn sweep_alphas(
    params: &ModelParams,
    utts: &[Utterance],
    alphas: &[f64],
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Sweep> {
    sweep_settings(params, utts, alphas, cfg, threads, |a| DecodeConfig {
        alpha: a,
        policy: PolicyKind::Learned,
        ..*cfg
    })
}

/// Wait-k curve; each point stores its lag in `alpha`.
pub fn sweep_lags(
    params: &ModelParams,
    utts: &[Utterance],
    ks: &[usize],
    cfg: &DecodeConfig,
    threads: usize,
) -> Result<Sweep> {
    let as_f: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    sweep_settings(params, utts, &as_f, cfg, threads, |k| DecodeConfig {
        policy: PolicyKind::WaitK { k: k as usize },
        ..*cfg
    })
}

// ---- paired studies

/// One system in a comparison. Every arm shares the seed's base models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Reina,
    ReinaNoMono,
    Divergence,
    /// REINA policy trained on the stage-1 model, skipping truncated adaptation.
    ReinaStage1Base,
    Waitk,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Reina => "reina",
            Arm::ReinaNoMono => "reina_no_mono",
            Arm::Divergence => "divergence",
            Arm::ReinaStage1Base => "reina_stage1_base",
            Arm::Waitk => "waitk",
        }
    }

    fn policy_loss(self) -> Option<PolicyLossKind> {
        match self {
            Arm::Reina | Arm::ReinaStage1Base => Some(PolicyLossKind::Reina),
            Arm::ReinaNoMono => Some(PolicyLossKind::ReinaNoMono),
            Arm::Divergence => Some(PolicyLossKind::Divergence),
            Arm::Waitk => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Monotonicity,
    Truncation,
    Baseline,
}

impl Ablation {
    pub fn arms(self) -> &'static [Arm] {
        match self {
            Ablation::Monotonicity => &[Arm::Reina, Arm::ReinaNoMono],
            Ablation::Truncation => &[Arm::Reina, Arm::ReinaStage1Base],
            Ablation::Baseline => &[Arm::Reina, Arm::Divergence, Arm::Waitk],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArmRun {
    pub arm: Arm,
    /// The policy checkpoint (the stage-2 base for wait-k).
    pub checkpoint: Checkpoint,
    pub sweep: Sweep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyRun {
    pub seed: u64,
    pub stage1: Checkpoint,
    pub stage2: Option<Checkpoint>,
    pub arms: Vec<ArmRun>,
}

impl StudyRun {
    pub fn arm(&self, a: Arm) -> Option<&ArmRun> {
        self.arms.iter().find(|r| r.arm == a)
    }
}

/// Trains the base models once, then every requested arm, and sweeps each
/// on the configured evaluation split.
pub fn run_study(cfg: &ExperimentConfig, seed: u64, data: &[Utterance], arms: &[Arm], threads: usize) -> Result<StudyRun> {
    let eval = select(data, cfg.sweep.split, cfg.sweep.max_utterances);
    let stage1 = train(cfg, 1, seed, None, data)?;
    let needs_s2 = arms.iter().any(|&a| a != Arm::ReinaStage1Base);
    let stage2 = if needs_s2 { Some(train(cfg, 2, seed, Some(&stage1), data)?) } else { None };
    let mut runs = Vec::with_capacity(arms.len());
    for &arm in arms {
        let base = if arm == Arm::ReinaStage1Base { &stage1 } else { stage2.as_ref().expect("trained above") };
        let (checkpoint, sweep) = match arm.policy_loss() {
            Some(kind) => {
                let tc = reina_core::trainer::TrainConfig {
                    policy_loss: kind,
                    ..cfg.stage(3, seed)?
                };
                let ck = train_stage3_policy(base, &tc, data)?;
                let sw = sweep_alphas(&ck.params, &eval, &cfg.sweep.alphas, &cfg.decode, threads)?;
                (ck, sw)
            }
            None => {
                let sw = sweep_lags(&base.params, &eval, &cfg.waitk_lags()?, &cfg.decode, threads)?;
                (base.clone(), sw)
            }
        };
        runs.push(ArmRun { arm, checkpoint, sweep });
    }
    Ok(StudyRun {
        seed,
        stage1,
        stage2,
        arms: runs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub arm: Arm,
    pub nose: f64,
    /// Lowest AL at which the curve reaches 95% of its offline BLEU.
    pub min_al_95: Option<f64>,
    pub offline_bleu: f64,
    pub x: f64,
    pub y: f64,
}

/// Fraction of offline BLEU that defines the matched-quality operating point.
pub const MATCHED_BLEU: f64 = 0.95;

/// NoSE of `arms` over `bounds`, or over their shared AL range.
pub fn compare(run: &StudyRun, arms: &[Arm], bounds: Option<[f64; 2]>) -> Result<Vec<ComparisonRow>> {
    let picked: Vec<&ArmRun> = arms
        .iter()
        .map(|&a| run.arm(a).ok_or_else(|| LabError::Config(format!("arm {} was not run", a.name()))))
        .collect::<Result<_>>()?;
    let (x, y) = match bounds {
        Some([x, y]) => (x, y),
        None => {
            let curves: Vec<&[CurvePoint]> = picked.iter().map(|r| r.sweep.points.as_slice()).collect();
            shared_bounds(&curves).ok_or_else(|| {
                LabError::Core(reina_core::Error::OutOfDomain("curves share no AL range".into()))
            })?
        }
    };
    picked
        .iter()
        .map(|r| {
            let s = &r.sweep;
            Ok(ComparisonRow {
                seed: run.seed,
                arm: r.arm,
                nose: nose(&CurveSpec::new(s.points.clone(), x, y, s.offline_bleu))?,
                min_al_95: min_al_reaching(&s.points, MATCHED_BLEU * s.offline_bleu),
                offline_bleu: s.offline_bleu,
                x,
                y,
            })
        })
        .collect()
}
