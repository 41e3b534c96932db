//! Offline beam search, the chunked policy-gated streaming decoder, and the
//! wait-k baseline.
//!
//! Audio arrives in chunks of `chunk_s` seconds. After each chunk the
//! streaming decoder runs an inner beam search from the committed prefix.
//! A beam whose policy score exceeds `alpha` stops and waits for more audio
//! (READ); the best waited or completed hypothesis is committed and never
//! revised. Once the audio has ended the policy is switched off and an
//! ordinary beam search finishes the sentence.
//!
//! Search is restricted to target symbols and EOS under the translation tag.
//! Returned tokens are target symbols; EOS is never included.

use crate::error::{invalid, Result};
use crate::model::{self, ModelParams, States, EOS, TGT_TAG};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    /// READ iff the policy head's score exceeds `alpha`.
    Learned,
    WaitK { k: usize },
    AlwaysRead,
    NeverRead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub chunk_s: f64,
    pub beam: usize,
    /// Multiplier on the beam size: a search ends once this many
    /// hypotheses (`ceil(beam * patience)`) have waited or completed.
    pub patience: f64,
    pub alpha: f64,
    /// Maximum generated tokens including EOS; 0 takes the model limit.
    pub max_len: usize,
    pub policy: PolicyKind,
    /// Re-encode every audio prefix from scratch instead of slicing the
    /// causal encoder's states.
    pub full_reencode: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            chunk_s: 0.25,
            beam: 3,
            patience: 3.0,
            alpha: 0.5,
            max_len: 0,
            policy: PolicyKind::Learned,
            full_reencode: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(invalid!("beam must be at least 1"));
        }
        if !(self.patience >= 1.0 && self.patience.is_finite()) {
            return Err(invalid!("patience must be at least 1"));
        }
        if !(self.chunk_s > 0.0 && self.chunk_s.is_finite()) {
            return Err(invalid!("chunk_s must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid!("alpha {} outside [0, 1]", self.alpha));
        }
        if let PolicyKind::WaitK { k: 0 } = self.policy {
            return Err(invalid!("wait-k needs k >= 1"));
        }
        Ok(())
    }

    fn finish_limit(&self) -> usize {
        libm::ceil(self.beam as f64 * self.patience) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Alive,
    Waited,
    Completed,
}

/// Tokens generated beyond the committed prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Model token ids, EOS included when completed.
    pub tokens: Vec<usize>,
    pub logprob: f64,
    pub token_logprobs: Vec<f64>,
    /// Policy score observed before each generated token.
    pub scores: Vec<f64>,
    pub status: Status,
}

impl Hypothesis {
    fn root() -> Self {
        Self {
            tokens: Vec::new(),
            logprob: 0.0,
            token_logprobs: Vec::new(),
            scores: Vec::new(),
            status: Status::Alive,
        }
    }

    /// Mean log-probability per generated token; `-inf` when empty.
    pub fn avg_logprob(&self) -> f64 {
        if self.tokens.is_empty() {
            f64::NEG_INFINITY
        } else {
            self.logprob / self.tokens.len() as f64
        }
    }

    fn extend(&self, token: usize, lp: f64, score: Option<f64>) -> Self {
        let mut h = self.clone();
        h.tokens.push(token);
        h.logprob += lp;
        h.token_logprobs.push(lp);
        h.scores.extend(score);
        h.status = if token == EOS { Status::Completed } else { Status::Alive };
        h
    }
}

/// Emission time of each committed token, in seconds of consumed audio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayTrace {
    pub delays: Vec<f64>,
    pub total_s: f64,
}

impl DelayTrace {
    pub fn validate(&self) -> Result<()> {
        if self.delays.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid!("delays decrease"));
        }
        if self.delays.iter().any(|&d| !(d >= 0.0) || d > self.total_s) {
            return Err(invalid!("delay outside [0, total]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineOutput {
    /// Target symbols.
    pub tokens: Vec<usize>,
    /// Average log-probability of the chosen hypothesis.
    pub score: f64,
    /// The length limit was hit and the result was force-completed.
    pub forced: bool,
}

/// Bookkeeping of one inner search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SearchStats {
    pub expansions: usize,
    pub waited: usize,
    pub completed: usize,
    pub patience_stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamOutput {
    pub tokens: Vec<usize>,
    pub trace: DelayTrace,
    /// EOS was committed before the audio ended.
    pub early_stop: bool,
    pub forced: bool,
    /// One entry per chunk that ran a policy-gated search.
    pub searches: Vec<SearchStats>,
}

/// Encoder states for growing audio prefixes.
struct Audio<'p> {
    params: &'p ModelParams,
    frames: &'p [usize],
    full: Option<States>,
}

impl<'p> Audio<'p> {
    fn new(params: &'p ModelParams, frames: &'p [usize], reencode: bool) -> Result<Self> {
        if frames.is_empty() {
            return Err(invalid!("no frames to decode"));
        }
        let full = if params.config.causal_encoder && !reencode {
            Some(model::encode(params, frames)?)
        } else {
            None
        };
        Ok(Self { params, frames, full })
    }

    fn prefix(&self, t: usize) -> Result<States> {
        match &self.full {
            Some(s) => Ok(s.prefix(t)),
            None => model::encode(self.params, &self.frames[..t]),
        }
    }
}

/// One decoder step for a hypothesis: log-probabilities of the next token
/// and, if requested, the policy score at the last position.
fn step(
    params: &ModelParams,
    enc: &States,
    prefix: &[usize],
    hyp: &Hypothesis,
    with_policy: bool,
) -> Result<(Vec<f64>, Option<f64>)> {
    let mut input = Vec::with_capacity(prefix.len() + hyp.tokens.len());
    input.extend_from_slice(prefix);
    input.extend_from_slice(&hyp.tokens);
    let out = model::decode_logprobs(params, enc, &input)?;
    let last = out.logprobs.last().expect("non-empty input").clone();
    let score = if with_policy {
        Some(*model::policy_scores(params, &out.states)?.0.last().expect("non-empty"))
    } else {
        None
    };
    Ok((last, score))
}

fn allowed(params: &ModelParams) -> Vec<usize> {
    let cfg = &params.config;
    let mut ids: Vec<usize> = (0..cfg.tgt_vocab).map(|s| cfg.tgt_id(s)).collect();
    ids.push(EOS);
    ids
}

fn max_new(params: &ModelParams, cfg: &DecodeConfig, prefix_len: usize) -> usize {
    let room = params.config.max_tokens.saturating_sub(prefix_len);
    if cfg.max_len == 0 {
        room
    } else {
        cfg.max_len.min(room)
    }
}

/// Shared beam search. With `gate` set, alive beams whose score exceeds
/// `alpha` are parked as waited before expansion.
fn search(
    params: &ModelParams,
    enc: &States,
    prefix: &[usize],
    cfg: &DecodeConfig,
    gate: Option<&dyn Fn(f64) -> bool>,
) -> Result<(Vec<Hypothesis>, SearchStats, bool)> {
    let vocab = allowed(params);
    let limit = cfg.finish_limit();
    let max_len = max_new(params, cfg, prefix.len());
    let mut alive = alloc::vec![Hypothesis::root()];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut stats = SearchStats::default();
    let mut forced = false;

    while !alive.is_empty() && finished.len() < limit {
        if alive[0].tokens.len() >= max_len {
            forced = true;
            for mut h in alive.drain(..) {
                h.status = Status::Completed;
                finished.push(h);
            }
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for h in alive.drain(..) {
            let (lp, score) = step(params, enc, prefix, &h, gate.is_some())?;
            stats.expansions += 1;
            if let (Some(read), Some(r)) = (gate, score) {
                if read(r) {
                    let mut w = h;
                    w.status = Status::Waited;
                    stats.waited += 1;
                    finished.push(w);
                    continue;
                }
            }
            let mut options: Vec<(usize, f64)> = vocab.iter().map(|&id| (id, lp[id])).collect();
            options.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(id, l) in options.iter().take(cfg.beam) {
                candidates.push(h.extend(id, l, score));
            }
        }
        // Stable sort keeps parent order on ties, so results are deterministic.
        candidates.sort_by(|a, b| b.logprob.total_cmp(&a.logprob));
        for (rank, c) in candidates.into_iter().enumerate() {
            if c.status == Status::Completed {
                if rank < cfg.beam {
                    stats.completed += 1;
                    finished.push(c);
                }
            } else if alive.len() < cfg.beam {
                alive.push(c);
            }
        }
    }
    stats.patience_stop = !alive.is_empty() && finished.len() >= limit;
    Ok((finished, stats, forced))
}

fn best(hyps: &[Hypothesis]) -> Option<&Hypothesis> {
    // First maximum wins.
    hyps.iter().fold(None, |acc: Option<&Hypothesis>, h| match acc {
        Some(b) if b.avg_logprob() >= h.avg_logprob() => Some(b),
        _ => Some(h),
    })
}

fn symbols(params: &ModelParams, ids: &[usize]) -> Vec<usize> {
    ids.iter().filter_map(|&id| params.config.tgt_symbol(id)).collect()
}

fn offline_from(params: &ModelParams, enc: &States, prefix: &[usize], cfg: &DecodeConfig) -> Result<(Hypothesis, bool)> {
    let (finished, _, forced) = search(params, enc, prefix, cfg, None)?;
    let h = best(&finished).cloned().unwrap_or_else(Hypothesis::root);
    Ok((h, forced))
}

/// Beam search over the whole utterance.
pub fn offline_beam_decode(params: &ModelParams, frames: &[usize], cfg: &DecodeConfig) -> Result<OfflineOutput> {
    cfg.validate()?;
    let audio = Audio::new(params, frames, cfg.full_reencode)?;
    let enc = audio.prefix(frames.len())?;
    let (h, forced) = offline_from(params, &enc, &[TGT_TAG], cfg)?;
    Ok(OfflineOutput {
        tokens: symbols(params, &h.tokens),
        score: h.avg_logprob(),
        forced,
    })
}

/// Frames per streaming chunk; the chunk must span whole frames.
pub fn frames_per_chunk(frame_dur_s: f64, cfg: &DecodeConfig) -> Result<usize> {
    if !(frame_dur_s > 0.0) {
        return Err(invalid!("frame duration must be positive"));
    }
    let ratio = cfg.chunk_s / frame_dur_s;
    let n = libm::round(ratio);
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(invalid!("chunk_s {} is not a whole number of {frame_dur_s}s frames", cfg.chunk_s));
    }
    Ok(n as usize)
}

struct Commit {
    prefix: Vec<usize>,
    delays: Vec<f64>,
}

impl Commit {
    fn new() -> Self {
        Self {
            prefix: alloc::vec![TGT_TAG],
            delays: Vec::new(),
        }
    }

    /// Appends tokens at time `d`; returns whether EOS was among them.
    fn push(&mut self, tokens: &[usize], d: f64) -> bool {
        for &t in tokens {
            if t == EOS {
                return true;
            }
            self.prefix.push(t);
            self.delays.push(d);
        }
        false
    }
}

/// Chunked streaming decode with the policy named in `cfg.policy`
/// (wait-k is delegated to [`waitk_decode`]).
pub fn stream_decode(
    params: &ModelParams,
    frames: &[usize],
    frame_dur_s: f64,
    cfg: &DecodeConfig,
) -> Result<StreamOutput> {
    cfg.validate()?;
    if let PolicyKind::WaitK { k } = cfg.policy {
        return waitk_decode(params, frames, frame_dur_s, k, cfg);
    }
    let audio = Audio::new(params, frames, cfg.full_reencode)?;
    let total = frames.len();
    let total_s = total as f64 * frame_dur_s;
    let fpc = frames_per_chunk(frame_dur_s, cfg)?;
    let chunks = total.div_ceil(fpc);
    let alpha = cfg.alpha;
    let learned = |r: f64| r > alpha;
    let always = |_: f64| true;
    let never = |_: f64| false;
    let gate: &dyn Fn(f64) -> bool = match cfg.policy {
        PolicyKind::Learned => &learned,
        PolicyKind::AlwaysRead => &always,
        PolicyKind::NeverRead => &never,
        PolicyKind::WaitK { .. } => unreachable!("handled above"),
    };

    let mut commit = Commit::new();
    let mut searches = Vec::new();
    let mut forced = false;
    for c in 1..chunks {
        let t = c * fpc;
        let d = t as f64 * frame_dur_s;
        let enc = audio.prefix(t)?;
        let (finished, stats, f) = search(params, &enc, &commit.prefix, cfg, Some(gate))?;
        searches.push(stats);
        forced |= f;
        if let Some(h) = best(&finished) {
            if commit.push(&h.tokens, d) {
                return Ok(StreamOutput {
                    tokens: symbols(params, &commit.prefix[1..]),
                    trace: DelayTrace {
                        delays: commit.delays,
                        total_s,
                    },
                    early_stop: true,
                    forced,
                    searches,
                });
            }
        }
    }
    let enc = audio.prefix(total)?;
    let (h, f) = offline_from(params, &enc, &commit.prefix, cfg)?;
    commit.push(&h.tokens, total_s);
    Ok(StreamOutput {
        tokens: symbols(params, &commit.prefix[1..]),
        trace: DelayTrace {
            delays: commit.delays,
            total_s,
        },
        early_stop: false,
        forced: forced || f,
        searches,
    })
}

/// Reads `k` chunks, then writes one greedy token per further chunk; the
/// rest is decoded offline once the audio has ended.
pub fn waitk_decode(
    params: &ModelParams,
    frames: &[usize],
    frame_dur_s: f64,
    k: usize,
    cfg: &DecodeConfig,
) -> Result<StreamOutput> {
    cfg.validate()?;
    if k == 0 {
        return Err(invalid!("wait-k needs k >= 1"));
    }
    let audio = Audio::new(params, frames, cfg.full_reencode)?;
    let total = frames.len();
    let total_s = total as f64 * frame_dur_s;
    let fpc = frames_per_chunk(frame_dur_s, cfg)?;
    let chunks = total.div_ceil(fpc);
    let greedy = DecodeConfig {
        beam: 1,
        patience: 1.0,
        max_len: 1,
        ..*cfg
    };
    let mut commit = Commit::new();
    for c in k..chunks {
        if commit.prefix.len() >= params.config.max_tokens {
            break;
        }
        let t = c * fpc;
        let enc = audio.prefix(t)?;
        let (h, _) = offline_from(params, &enc, &commit.prefix, &greedy)?;
        if commit.push(&h.tokens, t as f64 * frame_dur_s) {
            return Ok(StreamOutput {
                tokens: symbols(params, &commit.prefix[1..]),
                trace: DelayTrace {
                    delays: commit.delays,
                    total_s,
                },
                early_stop: true,
                forced: false,
                searches: Vec::new(),
            });
        }
    }
    let enc = audio.prefix(total)?;
    let (h, forced) = offline_from(params, &enc, &commit.prefix, cfg)?;
    commit.push(&h.tokens, total_s);
    Ok(StreamOutput {
        tokens: symbols(params, &commit.prefix[1..]),
        trace: DelayTrace {
            delays: commit.delays,
            total_s,
        },
        early_stop: false,
        forced,
        searches: Vec::new(),
    })
}
