//! The three-stage training recipe.
//!
//! Stage 1 trains the base model with teacher-forced cross-entropy on full
//! utterances, optionally mixing in a source-transcription task. Stage 2
//! continues the same objective on randomly truncated frame prefixes.
//! Stage 3 freezes the base and trains only the policy head.
//!
//! All randomness comes from counter-based streams keyed by `(seed, step)`,
//! so a run is a pure function of its inputs.

use crate::autodiff::{clip_grad_norm, AdamWConfig, Gradients, OptimizerState, Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    cross_entropy_on_tape, divergence_on_tape, divergence_targets, reina_on_tape, LossConfig, PolicyLossKind,
};
use crate::model::{self, init_params, ArchConfig, Graph, ModelParams, States, EOS, SRC_TAG, TGT_TAG};
use crate::rng::{self, purpose, Rng};
use crate::synth::{truncate_sample, Utterance};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Stage 2: probability of keeping an utterance whole.
    pub p_full: f64,
    pub policy_loss: PolicyLossKind,
    /// Weight of the source-transcription task; 0 disables it.
    pub asr_weight: f64,
    /// Stage 3 learning-rate warmup; the rate then decays as `1/sqrt(step)`.
    pub warmup_steps: usize,
    /// Steps between dev evaluations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Dev utterances used per evaluation (0 = all).
    pub eval_samples: usize,
    /// Return the parameters of the best dev evaluation instead of the last step.
    pub keep_best: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 16,
            lr: 1e-4,
            weight_decay: 1e-4,
            clip_norm: 10.0,
            seed: 0,
            p_full: 0.2,
            policy_loss: PolicyLossKind::Reina,
            asr_weight: 1.0,
            warmup_steps: 500,
            eval_every: 0,
            eval_samples: 200,
            keep_best: false,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage) {
            return Err(invalid!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be positive"));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid!("weight_decay must be >= 0 and clip_norm > 0"));
        }
        if !(0.0..=1.0).contains(&self.p_full) {
            return Err(invalid!("p_full must lie in [0, 1]"));
        }
        if !(self.asr_weight >= 0.0 && self.asr_weight.is_finite()) {
            return Err(invalid!("asr_weight must be a finite non-negative number"));
        }
        self.loss.validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Learning rate applied at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.stage < 3 || self.warmup_steps == 0 {
            return self.lr;
        }
        let s = (step + 1) as f64;
        let w = self.warmup_steps as f64;
        self.lr * f64::min(s / w, libm::sqrt(w / s))
    }
}

/// One link of a checkpoint's lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub stage: u8,
    pub steps: usize,
    pub seed: u64,
    pub policy_loss: Option<PolicyLossKind>,
}

/// Position of the counter-based generators: the next step would draw from
/// streams keyed by `(seed, next_step)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub l_p: f64,
    pub l_m: f64,
    pub l_r: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub stage: u8,
    pub step: usize,
    /// `dev_ce` for stages 1-2, `dev_cov` for stage 3.
    pub metric: String,
    pub value: f64,
}

/// Sample counters of the most recent stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStats {
    pub translation_samples: usize,
    pub transcription_samples: usize,
    pub full_samples: usize,
    pub truncated_samples: usize,
    pub clipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub params: ModelParams,
    pub provenance: Vec<Provenance>,
    pub train: TrainConfig,
    pub rng: RngState,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRow>,
    pub stats: TrainStats,
}

impl Checkpoint {
    /// Stage of the most recent training run.
    pub fn stage(&self) -> Option<u8> {
        self.provenance.last().map(|p| p.stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(invalid!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            ));
        }
        let rebuilt = ModelParams::from_parts(
            self.params.config,
            self.params.names.iter().cloned().zip(self.params.tensors.iter().cloned()).collect(),
        )?;
        if rebuilt.policy_start != self.params.policy_start {
            return Err(invalid!("policy_start does not match the architecture"));
        }
        Ok(())
    }
}

/// Decoder input and label sequences for one task.
pub fn teacher_forcing(cfg: &ArchConfig, utt: &Utterance, transcribe: bool) -> (Vec<usize>, Vec<usize>) {
    let (tag, body): (usize, Vec<usize>) = if transcribe {
        (SRC_TAG, utt.src_tokens.iter().map(|&z| cfg.src_id(z)).collect())
    } else {
        (TGT_TAG, utt.tgt_tokens.iter().map(|&s| cfg.tgt_id(s)).collect())
    };
    let mut input = Vec::with_capacity(body.len() + 1);
    input.push(tag);
    input.extend_from_slice(&body);
    let mut labels = body;
    labels.push(EOS);
    (input, labels)
}

/// Mean per-token negative log-likelihood of the translation labels,
/// evaluation mode, unsmoothed.
pub fn eval_cross_entropy(params: &ModelParams, utts: &[Utterance]) -> Result<f64> {
    if utts.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for u in utts {
        let enc = model::encode(params, &u.frames)?;
        let (input, labels) = teacher_forcing(&params.config, u, false);
        let out = model::decode_logprobs(params, &enc, &input)?;
        for (row, &l) in out.logprobs.iter().zip(&labels) {
            total -= row[l];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Cyclic pass over shuffled epochs: batch `step` takes the next
/// `batch_size` indices, each epoch drawing a fresh permutation.
fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let start = step * batch;
    let mut epoch = usize::MAX;
    let mut perm: Vec<usize> = Vec::new();
    for k in start..start + batch {
        let e = k / n;
        if e != epoch {
            epoch = e;
            perm = (0..n).collect();
            perm.shuffle(&mut rng::stream(seed, purpose::BATCH, e as u64));
        }
        out.push(perm[k % n]);
    }
    out
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::InvalidArgument(d) if d.contains("finite") => Error::Diverged { step, detail: d },
        other => other,
    }
}

fn apply(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    mut grads: Gradients,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, f64, bool)> {
    let norm = clip_grad_norm(&mut grads, cfg.clip_norm);
    if !norm.is_finite() {
        return Err(Error::Diverged {
            step,
            detail: "gradient norm is not finite".to_string(),
        });
    }
    let lr = cfg.lr_at(step);
    opt.step(&mut params.tensors, &grads, lr)?;
    Ok((lr, norm, norm > cfg.clip_norm))
}

fn split_train_dev(data: &[Utterance]) -> (Vec<&Utterance>, Vec<&Utterance>) {
    use crate::synth::Split;
    let train = data.iter().filter(|u| u.split == Split::Train).collect();
    let dev = data.iter().filter(|u| u.split == Split::Dev).collect();
    (train, dev)
}

fn eval_subset<'d>(dev: &[&'d Utterance], cfg: &TrainConfig) -> Vec<Utterance> {
    let take = if cfg.eval_samples == 0 { dev.len() } else { cfg.eval_samples.min(dev.len()) };
    dev[..take].iter().map(|&u| u.clone()).collect()
}

// ---------------------------------------------------------------------------
// Stages 1 and 2.

/// Stage 1 from a fresh initialization drawn from `cfg.seed`.
pub fn train_stage1(arch: &ArchConfig, cfg: &TrainConfig, data: &[Utterance]) -> Result<Checkpoint> {
    check_stage(cfg, 1)?;
    let params = init_params(arch, cfg.seed)?;
    run_ce(params, Vec::new(), cfg, data, None)
}

/// Stage-1 objective continued from an existing checkpoint.
pub fn resume_stage1(ckpt: &Checkpoint, cfg: &TrainConfig, data: &[Utterance]) -> Result<Checkpoint> {
    check_stage(cfg, 1)?;
    run_ce(ckpt.params.clone(), ckpt.provenance.clone(), cfg, data, None)
}

/// Stage 2: the stage-1 objective on truncated frame prefixes.
pub fn train_stage2(ckpt: &Checkpoint, cfg: &TrainConfig, data: &[Utterance]) -> Result<Checkpoint> {
    check_stage(cfg, 2)?;
    if ckpt.stage() != Some(1) {
        return Err(invalid!("stage 2 starts from a stage-1 checkpoint, got {:?}", ckpt.stage()));
    }
    run_ce(ckpt.params.clone(), ckpt.provenance.clone(), cfg, data, Some(cfg.p_full))
}

fn check_stage(cfg: &TrainConfig, stage: u8) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != stage {
        return Err(invalid!("config is for stage {}, not stage {stage}", cfg.stage));
    }
    Ok(())
}

fn run_ce(
    mut params: ModelParams,
    mut provenance: Vec<Provenance>,
    cfg: &TrainConfig,
    data: &[Utterance],
    p_full: Option<f64>,
) -> Result<Checkpoint> {
    let (train, dev) = split_train_dev(data);
    if train.is_empty() {
        return Err(invalid!("dataset has no train split"));
    }
    let dev = eval_subset(&dev, cfg);
    let mut opt = OptimizerState::new(cfg.optimizer(), &params.tensors);
    let mut stats = TrainStats::default();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, Vec<crate::autodiff::Tensor>)> = None;
    let p_asr = cfg.asr_weight / (1.0 + cfg.asr_weight);

    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
        let mut task_rng = rng::stream(cfg.seed, purpose::BATCH, (1 << 40) + step as u64);
        let mut trunc_rng = rng::stream(cfg.seed, purpose::TRUNCATE, step as u64);
        let mut samples = Vec::with_capacity(idx.len());
        for &i in &idx {
            let u = train[i];
            let u = match p_full {
                Some(p) => {
                    let cut = truncate_sample(u, &mut trunc_rng, p)?;
                    if cut.frames.len() < u.frames.len() {
                        stats.truncated_samples += 1;
                    } else {
                        stats.full_samples += 1;
                    }
                    cut
                }
                None => {
                    stats.full_samples += 1;
                    u.clone()
                }
            };
            let transcribe = p_asr > 0.0 && task_rng.gen_bool(p_asr);
            if transcribe {
                stats.transcription_samples += 1;
            } else {
                stats.translation_samples += 1;
            }
            let (input, labels) = teacher_forcing(&params.config, &u, transcribe);
            samples.push((u.frames, input, labels));
        }

        let mut drop_rng = rng::stream(cfg.seed, purpose::DROPOUT, step as u64);
        let (loss, grads) = ce_step(&params, &samples, cfg.loss.label_smoothing, &mut drop_rng)
            .map_err(|e| diverged(step, e))?;
        let (lr, norm, clipped) = apply(&mut params, &mut opt, grads, cfg, step)?;
        stats.clipped_steps += clipped as usize;
        log.push(LogRow {
            stage: cfg.stage,
            step,
            lr,
            loss,
            grad_norm: norm,
            clipped,
            ..LogRow::default()
        });

        let last = step + 1 == cfg.steps;
        if !dev.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
            let ce = eval_cross_entropy(&params, &dev)?;
            evals.push(EvalRow {
                stage: cfg.stage,
                step: step + 1,
                metric: "dev_ce".to_string(),
                value: ce,
            });
            if cfg.keep_best && best.as_ref().map_or(true, |(b, _)| ce < *b) {
                best = Some((ce, params.tensors.clone()));
            }
        }
    }
    if let Some((_, tensors)) = best {
        params.tensors = tensors;
    }
    provenance.push(Provenance {
        stage: cfg.stage,
        steps: cfg.steps,
        seed: cfg.seed,
        policy_loss: None,
    });
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        params,
        provenance,
        train: *cfg,
        rng: RngState {
            seed: cfg.seed,
            next_step: cfg.steps,
        },
        log,
        evals,
        stats,
    })
}

type Sample = (Vec<usize>, Vec<usize>, Vec<usize>);

fn ce_step(params: &ModelParams, samples: &[Sample], smoothing: f64, drop_rng: &mut Rng) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |i| !params.is_policy(i));
    let total: usize = samples.iter().map(|s| s.2.len()).sum();
    let mut g = Graph::new(&mut tape, params, &vars, Some(drop_rng));
    let mut acc: Option<Var> = None;
    for (frames, input, labels) in samples {
        let enc = g.encode(frames)?;
        let (lp, _) = g.decode(enc, input)?;
        let mask = alloc::vec![true; labels.len()];
        let l = cross_entropy_on_tape(g.tape, lp, labels, &mask, smoothing)?;
        let l = g.tape.scale(l, labels.len() as f64 / total as f64);
        acc = Some(match acc {
            Some(a) => g.tape.add(a, l),
            None => l,
        });
    }
    let loss = acc.ok_or_else(|| invalid!("empty batch"))?;
    let grads = tape.backward(loss)?;
    Ok((tape.scalar(loss), grads))
}

// ---------------------------------------------------------------------------
// Stage 3.

/// Frozen-base outputs for one frame prefix of one utterance.
#[derive(Debug, Clone)]
struct BaseView {
    /// Log-probability of each translation label.
    label_logp: Vec<f64>,
    /// Full next-token distributions (divergence baseline only).
    dists: Vec<Vec<f64>>,
    states: States,
}

/// Lazily filled table of frozen-base passes, keyed by utterance and frame
/// count. The base is fixed during stage 3, so every entry is computed once.
struct BaseCache<'p> {
    params: &'p ModelParams,
    keep_dists: bool,
    entries: Vec<Vec<Option<BaseView>>>,
    enc: Vec<Option<States>>,
}

impl<'p> BaseCache<'p> {
    fn new(params: &'p ModelParams, utts: &[&Utterance], keep_dists: bool) -> Self {
        Self {
            params,
            keep_dists,
            entries: utts.iter().map(|u| alloc::vec![None; u.frames.len()]).collect(),
            enc: alloc::vec![None; utts.len()],
        }
    }

    fn get(&mut self, i: usize, u: &Utterance, t: usize) -> Result<&BaseView> {
        if self.entries[i][t - 1].is_none() {
            let enc = if self.params.config.causal_encoder {
                if self.enc[i].is_none() {
                    self.enc[i] = Some(model::encode(self.params, &u.frames)?);
                }
                self.enc[i].as_ref().expect("filled").prefix(t)
            } else {
                model::encode(self.params, &u.frames[..t])?
            };
            let (input, labels) = teacher_forcing(&self.params.config, u, false);
            let out = model::decode_logprobs(self.params, &enc, &input)?;
            let label_logp = out.logprobs.iter().zip(&labels).map(|(r, &l)| r[l]).collect();
            let dists = if self.keep_dists {
                out.logprobs.iter().map(|r| r.iter().map(|&x| libm::exp(x)).collect()).collect()
            } else {
                Vec::new()
            };
            self.entries[i][t - 1] = Some(BaseView {
                label_logp,
                dists,
                states: out.states,
            });
        }
        Ok(self.entries[i][t - 1].as_ref().expect("filled"))
    }
}

/// Stage 3: trains the policy head on a frozen base from a stage-1 or
/// stage-2 checkpoint.
pub fn train_stage3_policy(ckpt: &Checkpoint, cfg: &TrainConfig, data: &[Utterance]) -> Result<Checkpoint> {
    check_stage(cfg, 3)?;
    match ckpt.stage() {
        Some(1) | Some(2) => {}
        other => return Err(invalid!("stage 3 starts from a stage-1 or stage-2 checkpoint, got {other:?}")),
    }
    let (train, dev) = split_train_dev(data);
    if train.is_empty() {
        return Err(invalid!("dataset has no train split"));
    }
    let dev: Vec<&Utterance> = {
        let take = if cfg.eval_samples == 0 { dev.len() } else { cfg.eval_samples.min(dev.len()) };
        dev[..take].to_vec()
    };
    let base = ckpt.params.clone();
    let keep_dists = cfg.policy_loss == PolicyLossKind::Divergence;
    let mut cache = BaseCache::new(&base, &train, keep_dists);
    let mut dev_cache = BaseCache::new(&base, &dev, false);

    let mut params = ckpt.params.clone();
    let mut opt = OptimizerState::new(cfg.optimizer(), &params.tensors);
    let mut stats = TrainStats::default();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let mut best: Option<(f64, Vec<crate::autodiff::Tensor>)> = None;

    for step in 0..cfg.steps {
        let idx = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
        let mut trunc_rng = rng::stream(cfg.seed, purpose::TRUNCATE, step as u64);
        let mut views: Vec<(BaseView, Vec<f64>, Vec<Vec<f64>>)> = Vec::with_capacity(idx.len());
        for &i in &idx {
            let u = train[i];
            let total = u.frames.len();
            let t = trunc_rng.gen_range(1..=total);
            if t < total {
                stats.truncated_samples += 1;
            } else {
                stats.full_samples += 1;
            }
            stats.translation_samples += 1;
            let full = cache.get(i, u, total)?;
            let full_logp = full.label_logp.clone();
            let full_dists = full.dists.clone();
            let part = cache.get(i, u, t)?.clone();
            views.push((part, full_logp, full_dists));
        }

        let mut drop_rng = rng::stream(cfg.seed, purpose::DROPOUT, step as u64);
        let (row, grads) = policy_step(&params, &views, cfg, &mut drop_rng).map_err(|e| diverged(step, e))?;
        let (lr, norm, clipped) = apply(&mut params, &mut opt, grads, cfg, step)?;
        stats.clipped_steps += clipped as usize;
        log.push(LogRow {
            stage: 3,
            step,
            lr,
            grad_norm: norm,
            clipped,
            ..row
        });

        let last = step + 1 == cfg.steps;
        if dev.len() >= 2 && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
            let cov = dev_covariance(&params, &dev, &mut dev_cache, cfg)?;
            evals.push(EvalRow {
                stage: 3,
                step: step + 1,
                metric: "dev_cov".to_string(),
                value: cov,
            });
            if cfg.keep_best && best.as_ref().map_or(true, |(b, _)| cov > *b) {
                best = Some((cov, params.tensors[params.policy_start..].to_vec()));
            }
        }
    }
    if let Some((_, tensors)) = best {
        let start = params.policy_start;
        params.tensors.truncate(start);
        params.tensors.extend(tensors);
    }
    let mut provenance = ckpt.provenance.clone();
    provenance.push(Provenance {
        stage: 3,
        steps: cfg.steps,
        seed: cfg.seed,
        policy_loss: Some(cfg.policy_loss),
    });
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        params,
        provenance,
        train: *cfg,
        rng: RngState {
            seed: cfg.seed,
            next_step: cfg.steps,
        },
        log,
        evals,
        stats,
    })
}

fn policy_step(
    params: &ModelParams,
    views: &[(BaseView, Vec<f64>, Vec<Vec<f64>>)],
    cfg: &TrainConfig,
    drop_rng: &mut Rng,
) -> Result<(LogRow, Gradients)> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |i| params.is_policy(i));
    let mut g = Graph::new(&mut tape, params, &vars, Some(drop_rng));
    let mut qs = Vec::with_capacity(views.len());
    for (part, _, _) in views {
        let s = &part.states;
        let sv = g.tape.constant(s.rows, s.cols, s.data.clone());
        qs.push(g.policy(sv));
    }
    let mut row = LogRow::default();
    let loss = match cfg.policy_loss {
        PolicyLossKind::Reina | PolicyLossKind::ReinaNoMono => {
            let delta: Vec<Vec<f64>> = views
                .iter()
                .map(|(part, full, _)| part.label_logp.iter().zip(full).map(|(p, f)| p - f).collect())
                .collect();
            let with_mono = cfg.policy_loss == PolicyLossKind::Reina;
            let v = reina_on_tape(&mut tape, &qs, &delta, &cfg.loss, with_mono)?;
            row.l_p = tape.scalar(v.l_p);
            row.l_m = v.l_m.map_or(0.0, |m| tape.scalar(m));
            row.l_r = tape.scalar(v.l_r);
            v.total
        }
        PolicyLossKind::Divergence => {
            let partial: Vec<Vec<f64>> = views.iter().flat_map(|(p, _, _)| p.dists.iter().cloned()).collect();
            let full: Vec<Vec<f64>> = views.iter().flat_map(|(_, _, f)| f.iter().cloned()).collect();
            let targets = divergence_targets(&partial, &full)?;
            divergence_on_tape(&mut tape, &qs, &targets)?
        }
    };
    let grads = tape.backward(loss)?;
    row.loss = tape.scalar(loss);
    Ok((row, grads))
}

/// Dev-set `mean(q * BN(F_hat))` at one fixed frame cut per utterance;
/// larger is better.
fn dev_covariance(
    params: &ModelParams,
    dev: &[&Utterance],
    cache: &mut BaseCache<'_>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut q = Vec::new();
    let mut gain = Vec::new();
    for (i, u) in dev.iter().enumerate() {
        let total = u.frames.len();
        let t = rng::stream(cfg.seed, purpose::TRUNCATE, (1 << 40) + i as u64).gen_range(1..=total);
        let full = cache.get(i, u, total)?.label_logp.clone();
        let part = cache.get(i, u, t)?;
        gain.extend(full.iter().zip(&part.label_logp).map(|(f, p)| f - p));
        q.extend(model::policy_scores(params, &part.states)?.0);
    }
    let bn = crate::autodiff::batch_norm(&gain, cfg.loss.bn_eps)?;
    Ok(q.iter().zip(&bn).fold(0.0, |s, (a, b)| s + a * b) / q.len() as f64)
}

#[cfg(test)]
mod tests;
