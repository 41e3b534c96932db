//! Synthetic streaming-translation tasks and their exact Bayes oracle.
//!
//! A source sentence of `M` symbols is streamed as `k` frames per symbol.
//! Every frame shows its symbol with probability `1 - noise_rate`, otherwise a
//! symbol from a disjoint noise alphabet of the same size. The target is the
//! symbol-wise bijection `g(z) = |V_t| - 1 - z` of the source, optionally with
//! blocks of `b` symbols reversed. Because the generative process is tiny, the
//! posterior over the next target token can be computed exactly by
//! enumerating every source sentence and reorder pattern.

use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

/// Largest enumeration the oracle will attempt.
pub const ORACLE_LIMIT: f64 = 1e7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    BlockReorder,
    NoisyChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskParams {
    pub kind: TaskKind,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Source (and target) tokens per utterance.
    pub tokens: usize,
    pub frames_per_token: usize,
    pub noise_rate: f64,
    pub block_size: usize,
    /// Probability that a block is reversed (`block_reorder` only).
    pub swap_prob: f64,
    pub frame_dur_s: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            kind: TaskKind::Copy,
            src_vocab: 5,
            tgt_vocab: 5,
            tokens: 4,
            frames_per_token: 1,
            noise_rate: 0.0,
            block_size: 2,
            swap_prob: 1.0,
            frame_dur_s: 0.25,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab == 0 || self.tokens == 0 || self.frames_per_token == 0 || self.block_size == 0 {
            return Err(invalid!("vocabulary, token count, frames per token and block size must be positive"));
        }
        if self.tgt_vocab != self.src_vocab {
            return Err(invalid!(
                "target vocabulary ({}) must match source vocabulary ({}) for the bijection",
                self.tgt_vocab,
                self.src_vocab
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(invalid!("noise rate {} outside [0, 1)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return Err(invalid!("swap probability {} outside [0, 1]", self.swap_prob));
        }
        if self.kind == TaskKind::Copy && self.noise_rate != 0.0 {
            return Err(invalid!("the copy task is noiseless; use noisy_channel for noise"));
        }
        if !(self.frame_dur_s > 0.0) || !self.frame_dur_s.is_finite() {
            return Err(invalid!("frame duration must be positive"));
        }
        Ok(())
    }

    /// Size of the frame alphabet: clean symbols then noise symbols.
    pub fn frame_vocab(&self) -> usize {
        2 * self.src_vocab
    }

    pub fn total_frames(&self) -> usize {
        self.tokens * self.frames_per_token
    }

    pub fn duration_s(&self) -> f64 {
        self.total_frames() as f64 * self.frame_dur_s
    }

    /// Target symbol for a source symbol.
    pub fn g(&self, z: usize) -> usize {
        self.tgt_vocab - 1 - z
    }

    pub fn num_blocks(&self) -> usize {
        self.tokens.div_ceil(self.block_size)
    }

    /// `order[i]` is the source index emitted at target position `i`.
    pub fn target_order(&self, reversed: &[bool]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tokens).collect();
        if self.kind == TaskKind::BlockReorder {
            for (b, &rev) in reversed.iter().enumerate() {
                let start = b * self.block_size;
                let end = (start + self.block_size).min(self.tokens);
                if rev {
                    order[start..end].reverse();
                }
            }
        }
        order
    }

    /// Number of (source, reorder) configurations the oracle enumerates.
    pub fn oracle_size(&self) -> f64 {
        libm::pow(self.src_vocab as f64, self.tokens as f64) * libm::pow(2.0, self.num_blocks() as f64)
    }

    pub fn check_oracle_feasible(&self) -> Result<()> {
        let size = self.oracle_size();
        if size > ORACLE_LIMIT {
            return Err(Error::ResourceLimit(format!(
                "oracle enumeration of {size:.3e} configurations exceeds {ORACLE_LIMIT:.0e}"
            )));
        }
        Ok(())
    }

    /// `P(frame | token)` under the noisy channel.
    fn frame_likelihood(&self, frame: usize, token: usize) -> f64 {
        if frame == token {
            1.0 - self.noise_rate
        } else if frame >= self.src_vocab {
            self.noise_rate / self.src_vocab as f64
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    /// 80/10/10 assignment from a stable hash of the utterance id.
    pub fn of_id(id: &str) -> Self {
        match rng::fnv1a(id.as_bytes()) % 10 {
            8 => Split::Dev,
            9 => Split::Test,
            _ => Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    pub split: Split,
    pub src_tokens: Vec<usize>,
    pub frames: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
    pub frame_dur_s: f64,
}

impl Utterance {
    pub fn duration_s(&self) -> f64 {
        self.frames.len() as f64 * self.frame_dur_s
    }

    /// Checks the generated-utterance invariants against `params`.
    pub fn validate(&self, params: &TaskParams) -> Result<()> {
        if self.src_tokens.len() != params.tokens || self.tgt_tokens.len() != self.src_tokens.len() {
            return Err(invalid!("utterance {} has wrong token counts", self.id));
        }
        if self.frames.len() != params.total_frames() {
            return Err(invalid!("utterance {} has {} frames", self.id, self.frames.len()));
        }
        if self.src_tokens.iter().any(|&z| z >= params.src_vocab)
            || self.tgt_tokens.iter().any(|&s| s >= params.tgt_vocab)
            || self.frames.iter().any(|&f| f >= params.frame_vocab())
        {
            return Err(invalid!("utterance {} has out-of-vocabulary symbols", self.id));
        }
        Ok(())
    }
}

pub fn utterance_id(index: usize) -> String {
    format!("u{index:06}")
}

/// Generates `count` utterances; utterance `i` draws from its own stream
/// derived from `(seed, i)`.
pub fn gen_task(params: &TaskParams, count: usize, seed: u64) -> Result<Vec<Utterance>> {
    params.validate()?;
    if count == 0 {
        return Err(invalid!("count must be positive"));
    }
    Ok((0..count).map(|i| gen_one(params, i, seed)).collect())
}

fn gen_one(params: &TaskParams, index: usize, seed: u64) -> Utterance {
    let mut r = rng::stream(seed, rng::purpose::DATASET, index as u64);
    let src: Vec<usize> = (0..params.tokens).map(|_| r.gen_range(0..params.src_vocab)).collect();
    let reversed: Vec<bool> = (0..params.num_blocks()).map(|_| r.gen_bool(params.swap_prob)).collect();
    let order = params.target_order(&reversed);
    let tgt = order.iter().map(|&i| params.g(src[i])).collect();
    let mut frames = Vec::with_capacity(params.total_frames());
    for &z in &src {
        for _ in 0..params.frames_per_token {
            if r.gen_bool(params.noise_rate) {
                frames.push(params.src_vocab + r.gen_range(0..params.src_vocab));
            } else {
                frames.push(z);
            }
        }
    }
    let id = utterance_id(index);
    Utterance {
        split: Split::of_id(&id),
        id,
        src_tokens: src,
        frames,
        tgt_tokens: tgt,
        frame_dur_s: params.frame_dur_s,
    }
}

/// Distribution over the next target token.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPosterior {
    pub probs: Vec<f64>,
    pub frames_seen: usize,
    pub tokens_given: usize,
}

/// `p(s_{n+1} | frames_prefix, tgt_prefix)` with `n = tgt_prefix.len()`, by
/// summing over every source sentence and reorder pattern.
pub fn exact_posterior(params: &TaskParams, frames_prefix: &[usize], tgt_prefix: &[usize]) -> Result<ExactPosterior> {
    params.validate()?;
    params.check_oracle_feasible()?;
    let n = tgt_prefix.len();
    if n >= params.tokens {
        return Err(invalid!("target prefix of {n} tokens leaves no next token"));
    }
    if frames_prefix.len() > params.total_frames() {
        return Err(invalid!("{} frames exceed the utterance length", frames_prefix.len()));
    }
    if frames_prefix.iter().any(|&f| f >= params.frame_vocab()) || tgt_prefix.iter().any(|&s| s >= params.tgt_vocab) {
        return Err(invalid!("symbol outside the vocabulary"));
    }

    let m = params.tokens;
    let k = params.frames_per_token;
    let nb = params.num_blocks();
    let patterns: Vec<(Vec<usize>, f64)> = (0..1usize << nb)
        .filter_map(|mask| {
            let reversed: Vec<bool> = (0..nb).map(|b| mask >> b & 1 == 1).collect();
            let prior = match params.kind {
                TaskKind::BlockReorder => reversed.iter().fold(1.0, |acc, &r| {
                    acc * if r { params.swap_prob } else { 1.0 - params.swap_prob }
                }),
                _ if mask == 0 => 1.0,
                _ => 0.0,
            };
            (prior > 0.0).then(|| (params.target_order(&reversed), prior))
        })
        .collect();

    // Frame likelihood per (source position, symbol), shared by all sentences.
    let mut lik = alloc::vec![1.0; m * params.src_vocab];
    for (j, &f) in frames_prefix.iter().enumerate() {
        let pos = j / k;
        for z in 0..params.src_vocab {
            lik[pos * params.src_vocab + z] *= params.frame_likelihood(f, z);
        }
    }

    let mut probs = alloc::vec![0.0; params.tgt_vocab];
    let mut src = alloc::vec![0usize; m];
    loop {
        let mut w_src = 1.0;
        for (pos, &z) in src.iter().enumerate() {
            w_src *= lik[pos * params.src_vocab + z];
        }
        if w_src > 0.0 {
            for (order, prior) in &patterns {
                let consistent = tgt_prefix.iter().enumerate().all(|(i, &s)| params.g(src[order[i]]) == s);
                if consistent {
                    probs[params.g(src[order[n]])] += prior * w_src;
                }
            }
        }
        // odometer over V_s^M
        let mut pos = 0;
        while pos < m {
            src[pos] += 1;
            if src[pos] < params.src_vocab {
                break;
            }
            src[pos] = 0;
            pos += 1;
        }
        if pos == m {
            break;
        }
    }
    let total: f64 = probs.iter().fold(0.0, |a, &b| a + b);
    if !(total > 0.0) {
        return Err(invalid!("observation has zero probability under the task"));
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    Ok(ExactPosterior {
        probs,
        frames_seen: frames_prefix.len(),
        tokens_given: n,
    })
}

/// Expected log-probability gain on `s_{n+1}` from hearing the whole utterance
/// instead of its first `t` frames: `KL(p(. | a_T, S_n) || p(. | a_t, S_n))`.
pub fn exact_info_gain(params: &TaskParams, utt: &Utterance, n: usize, t: usize) -> Result<f64> {
    let total = utt.frames.len();
    if n >= utt.tgt_tokens.len() {
        return Err(invalid!("token index {n} out of range {}", utt.tgt_tokens.len()));
    }
    if t > total {
        return Err(invalid!("frame index {t} out of range {total}"));
    }
    let prefix = &utt.tgt_tokens[..n];
    let full = exact_posterior(params, &utt.frames, prefix)?;
    let partial = exact_posterior(params, &utt.frames[..t], prefix)?;
    Ok(kl_divergence(&full.probs, &partial.probs))
}

/// `sum_s p(s) (ln p(s) - ln q(s))` over the support of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .fold(0.0, |acc, (&pi, &qi)| acc + pi * (libm::log(pi) - libm::log(qi)))
}

/// Keeps the utterance whole with probability `p_full`, otherwise cuts its
/// frames to a length drawn uniformly from `1..=T-1`. Tokens are untouched.
pub fn truncate_sample(utt: &Utterance, rng: &mut Rng, p_full: f64) -> Result<Utterance> {
    if !(0.0..=1.0).contains(&p_full) {
        return Err(invalid!("p_full {p_full} outside [0, 1]"));
    }
    let total = utt.frames.len();
    if total <= 1 || rng.gen_bool(p_full) {
        return Ok(utt.clone());
    }
    let keep = rng.gen_range(1..total);
    let mut out = utt.clone();
    out.frames.truncate(keep);
    Ok(out)
}
