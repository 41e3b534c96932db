//! Training objectives.
//!
//! Each objective exists twice: a tape builder used by the trainer, and a
//! value-level function over plain slices. The value-level functions replay
//! the tape builders on constants, so both paths produce identical numbers.
//!
//! Policy losses operate on a batch of sequences. Scores, log-probabilities
//! and masks come as one slice per sequence; masked-out positions are dropped
//! before anything is computed, so they cannot influence any loss.

use crate::autodiff::{self, Tape, Var};
use crate::error::{invalid, Result};
use crate::model::PolicyScores;
use crate::synth::kl_divergence;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the L2 score penalty.
    pub lambda: f64,
    /// Slack of the weak monotonicity hinge.
    pub epsilon: f64,
    pub bn_eps: f64,
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            epsilon: 0.5,
            bn_eps: 1e-5,
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid!("lambda must be a finite non-negative number"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid!("epsilon must be non-negative"));
        }
        if !(self.bn_eps >= 0.0 && self.bn_eps.is_finite()) {
            return Err(invalid!("bn_eps must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(invalid!("label_smoothing must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyLossKind {
    Reina,
    /// REINA without the monotonicity term.
    ReinaNoMono,
    /// Regression onto normalized partial-vs-full output divergence.
    Divergence,
}

/// Per-position information-gain estimates for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGainBatch {
    /// `log p(y | partial) - log p(y | full)` per position, flattened.
    pub delta: Vec<f64>,
    /// `delta` normalized over the valid positions; 0 where masked.
    pub normalized: Vec<f64>,
    pub mask: Vec<bool>,
}

impl InfoGainBatch {
    pub fn new(logp_partial: &[Vec<f64>], logp_full: &[Vec<f64>], mask: &[Vec<bool>], bn_eps: f64) -> Result<Self> {
        aligned(&[logp_partial, logp_full], mask)?;
        let delta: Vec<f64> = logp_partial
            .iter()
            .zip(logp_full)
            .flat_map(|(p, f)| p.iter().zip(f).map(|(a, b)| a - b))
            .collect();
        let mask: Vec<bool> = mask.iter().flatten().copied().collect();
        if delta.iter().zip(&mask).any(|(d, &m)| m && !d.is_finite()) {
            return Err(invalid!("log-probability difference is not finite"));
        }
        let valid: Vec<f64> = delta.iter().zip(&mask).filter(|(_, &m)| m).map(|(&d, _)| d).collect();
        if valid.len() < 2 {
            return Err(invalid!("batch normalization needs at least 2 valid positions, got {}", valid.len()));
        }
        let bn = autodiff::batch_norm(&valid, bn_eps)?;
        let mut it = bn.into_iter();
        let normalized = mask.iter().map(|&m| if m { it.next().unwrap_or(0.0) } else { 0.0 }).collect();
        Ok(Self { delta, normalized, mask })
    }

    /// Normalized values at valid positions only.
    pub fn valid_normalized(&self) -> Vec<f64> {
        self.normalized.iter().zip(&self.mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect()
    }
}

/// Scalar components of a policy loss with per-position diagnostics over
/// valid positions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_p: f64,
    pub l_m: f64,
    pub l_r: f64,
    pub total: f64,
    pub q: Vec<f64>,
    pub delta: Vec<f64>,
    pub bn_delta: Vec<f64>,
}

fn aligned<T>(values: &[&[Vec<T>]], mask: &[Vec<bool>]) -> Result<()> {
    for v in values {
        if v.len() != mask.len() || v.iter().zip(mask).any(|(a, m)| a.len() != m.len()) {
            return Err(invalid!("sequences and mask are not aligned"));
        }
    }
    Ok(())
}

fn compress(values: &[Vec<f64>], mask: &[Vec<bool>]) -> Vec<Vec<f64>> {
    values
        .iter()
        .zip(mask)
        .map(|(v, m)| v.iter().zip(m).filter(|(_, &k)| k).map(|(&x, _)| x).collect())
        .collect()
}

fn scores(q: &[PolicyScores]) -> Vec<Vec<f64>> {
    q.iter().map(|s| s.0.clone()).collect()
}

fn column(tape: &mut Tape<'_>, v: Vec<f64>) -> Var {
    tape.constant(v.len(), 1, v)
}

// ---------------------------------------------------------------------------
// Tape builders. Sequences passed here contain valid positions only.

/// Smoothed negative log-likelihood averaged over rows with `mask` set.
/// The smoothing mass is spread uniformly over the whole vocabulary.
pub fn cross_entropy_on_tape(
    tape: &mut Tape<'_>,
    logprobs: Var,
    labels: &[usize],
    mask: &[bool],
    smoothing: f64,
) -> Result<Var> {
    let (rows, cols) = tape.shape(logprobs);
    if labels.len() != rows || mask.len() != rows {
        return Err(invalid!("{rows} rows, {} labels and {} mask entries", labels.len(), mask.len()));
    }
    if let Some(&l) = labels.iter().zip(mask).find(|(&l, &m)| m && l >= cols).map(|(l, _)| l) {
        return Err(invalid!("label {l} outside vocabulary of {cols}"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(invalid!("cross-entropy over an all-masked batch"));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let safe: Vec<usize> = labels.iter().zip(mask).map(|(&l, &m)| if m { l } else { 0 }).collect();
    let picked = tape.pick(logprobs, &safe);
    let picked = tape.mul_const(picked, weights.clone());
    let nll = tape.sum(picked);
    let mut loss = tape.scale(nll, -(1.0 - smoothing) / count as f64);
    if smoothing > 0.0 {
        let avg = tape.row_mean(logprobs);
        let avg = tape.mul_const(avg, weights);
        let s = tape.sum(avg);
        let s = tape.scale(s, -smoothing / count as f64);
        loss = tape.add(loss, s);
    }
    Ok(loss)
}

/// Tape nodes of one policy objective.
#[derive(Debug, Clone, Copy)]
pub struct PolicyLossVars {
    pub total: Var,
    pub l_p: Var,
    pub l_m: Option<Var>,
    pub l_r: Var,
}

/// REINA objective `L_p + L_m + lambda L_r` over per-sequence score columns
/// and the matching constant `delta` values. `with_mono = false` drops `L_m`.
pub fn reina_on_tape(
    tape: &mut Tape<'_>,
    q: &[Var],
    delta: &[Vec<f64>],
    cfg: &LossConfig,
    with_mono: bool,
) -> Result<PolicyLossVars> {
    if q.len() != delta.len() || q.iter().zip(delta).any(|(&v, d)| tape.value(v).len() != d.len()) {
        return Err(invalid!("scores and delta values are not aligned"));
    }
    let n: usize = delta.iter().map(Vec::len).sum();
    if n < 2 {
        return Err(invalid!("batch normalization needs at least 2 valid positions, got {n}"));
    }
    let flat: Vec<f64> = delta.iter().flatten().copied().collect();
    let bn = autodiff::batch_norm(&flat, cfg.bn_eps)?;
    let parts: Vec<Var> = q.iter().copied().filter(|&v| !tape.value(v).is_empty()).collect();
    let all = tape.concat_rows(&parts);

    let weighted = tape.mul_const(all, bn);
    let l_p = tape.mean(weighted);

    let sq = tape.square(all);
    let l_r = tape.mean(sq);

    let mut total = l_p;
    let l_m = if with_mono {
        let hinges: Vec<Var> = parts.iter().map(|&v| tape.mono_hinge(v, cfg.epsilon)).collect();
        let h = tape.concat_rows(&hinges);
        let l_m = tape.mean(h);
        total = tape.add(total, l_m);
        Some(l_m)
    } else {
        None
    };
    let reg = tape.scale(l_r, cfg.lambda);
    total = tape.add(total, reg);
    Ok(PolicyLossVars { total, l_p, l_m, l_r })
}

/// Min-max normalized `KL(full || partial)` targets; a batch whose
/// divergences are all equal gets 0.5 everywhere.
pub fn divergence_targets(dist_partial: &[Vec<f64>], dist_full: &[Vec<f64>]) -> Result<Vec<f64>> {
    if dist_partial.len() != dist_full.len() {
        return Err(invalid!("partial and full distributions are not aligned"));
    }
    let mut kl = Vec::with_capacity(dist_full.len());
    for (p, f) in dist_partial.iter().zip(dist_full) {
        if p.len() != f.len() || p.is_empty() {
            return Err(invalid!("distribution rows differ in length"));
        }
        let v = kl_divergence(f, p);
        if !v.is_finite() {
            return Err(invalid!("divergence is not finite"));
        }
        kl.push(v);
    }
    let lo = kl.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = kl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo > 1e-12) {
        return Ok(alloc::vec![0.5; kl.len()]);
    }
    Ok(kl.iter().map(|&v| (v - lo) / (hi - lo)).collect())
}

/// Mean squared error between the concatenated score columns and `targets`.
pub fn divergence_on_tape(tape: &mut Tape<'_>, q: &[Var], targets: &[f64]) -> Result<Var> {
    let parts: Vec<Var> = q.iter().copied().filter(|&v| !tape.value(v).is_empty()).collect();
    if parts.is_empty() {
        return Err(invalid!("divergence loss over an empty batch"));
    }
    let all = tape.concat_rows(&parts);
    if tape.value(all).len() != targets.len() {
        return Err(invalid!("scores and targets are not aligned"));
    }
    let y = column(tape, targets.to_vec());
    let d = tape.sub(all, y);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

// ---------------------------------------------------------------------------
// Value-level objectives.

/// Mean smoothed negative log-likelihood over unmasked rows.
pub fn cross_entropy_loss(rows: &[Vec<f64>], labels: &[usize], mask: &[bool], smoothing: f64) -> Result<f64> {
    if rows.len() != labels.len() || rows.len() != mask.len() {
        return Err(invalid!("rows, labels and mask lengths differ"));
    }
    if rows.is_empty() {
        return Err(invalid!("cross-entropy over an all-masked batch"));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(invalid!("log-probability rows differ in width"));
    }
    let mut tape = Tape::new();
    let lp = tape.constant(rows.len(), cols, rows.iter().flatten().copied().collect());
    let loss = cross_entropy_on_tape(&mut tape, lp, labels, mask, smoothing)?;
    tape.check_finite()?;
    Ok(tape.scalar(loss))
}

/// Mean over valid positions of `q * BN(logp_partial - logp_full)`, with the
/// normalization statistics pooled over the whole batch.
pub fn reina_policy_loss(
    q: &[PolicyScores],
    logp_partial: &[Vec<f64>],
    logp_full: &[Vec<f64>],
    mask: &[Vec<bool>],
    bn_eps: f64,
) -> Result<f64> {
    let qs = scores(q);
    aligned(&[&qs], mask)?;
    let ig = InfoGainBatch::new(logp_partial, logp_full, mask, bn_eps)?;
    let q = compress(&qs, mask).concat();
    let mut tape = Tape::new();
    let qv = column(&mut tape, q);
    let w = tape.mul_const(qv, ig.valid_normalized());
    let l = tape.mean(w);
    Ok(tape.scalar(l))
}

/// Hinge sum of `max(max_{m<n} q_m - q_n - epsilon, 0)` within each sequence,
/// divided by the number of valid positions in the batch. Masked positions
/// are removed before the running maximum is taken.
pub fn monotonicity_loss(q: &[PolicyScores], epsilon: f64, mask: &[Vec<bool>]) -> Result<f64> {
    let qs = scores(q);
    aligned(&[&qs], mask)?;
    let seqs = compress(&qs, mask);
    let n: usize = seqs.iter().map(Vec::len).sum();
    if n == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let hinges: Vec<Var> = seqs
        .into_iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            let v = column(&mut tape, s);
            tape.mono_hinge(v, epsilon)
        })
        .collect();
    let h = tape.concat_rows(&hinges);
    let l = tape.mean(h);
    Ok(tape.scalar(l))
}

/// Mean squared score over valid positions.
pub fn l2_policy_loss(q: &[PolicyScores], mask: &[Vec<bool>]) -> Result<f64> {
    let qs = scores(q);
    aligned(&[&qs], mask)?;
    let flat = compress(&qs, mask).concat();
    if flat.is_empty() {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let v = column(&mut tape, flat);
    let sq = tape.square(v);
    let l = tape.mean(sq);
    Ok(tape.scalar(l))
}

pub fn reina_total(l_p: f64, l_m: f64, l_r: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(invalid!("lambda must be non-negative"));
    }
    Ok(l_p + l_m + lambda * l_r)
}

/// All REINA components with diagnostics.
pub fn reina_report(
    q: &[PolicyScores],
    logp_partial: &[Vec<f64>],
    logp_full: &[Vec<f64>],
    mask: &[Vec<bool>],
    cfg: &LossConfig,
    with_mono: bool,
) -> Result<LossReport> {
    cfg.validate()?;
    let l_p = reina_policy_loss(q, logp_partial, logp_full, mask, cfg.bn_eps)?;
    let l_m = if with_mono { monotonicity_loss(q, cfg.epsilon, mask)? } else { 0.0 };
    let l_r = l2_policy_loss(q, mask)?;
    let ig = InfoGainBatch::new(logp_partial, logp_full, mask, cfg.bn_eps)?;
    let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(&ig.mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect() };
    Ok(LossReport {
        l_p,
        l_m,
        l_r,
        total: reina_total(l_p, l_m, l_r, cfg.lambda)?,
        q: compress(&scores(q), mask).concat(),
        delta: keep(&ig.delta),
        bn_delta: keep(&ig.normalized),
    })
}

/// Mean squared error between scores and min-max normalized
/// `KL(full || partial)` targets. Distribution rows are flattened across
/// the batch in the same order as `q`.
pub fn divergence_baseline_loss(
    q: &[PolicyScores],
    dist_partial: &[Vec<Vec<f64>>],
    dist_full: &[Vec<Vec<f64>>],
    mask: &[Vec<bool>],
) -> Result<f64> {
    let qs = scores(q);
    aligned(&[&qs], mask)?;
    if dist_partial.len() != mask.len() || dist_full.len() != mask.len() {
        return Err(invalid!("distributions and mask are not aligned"));
    }
    let mut partial = Vec::new();
    let mut full = Vec::new();
    for ((p, f), m) in dist_partial.iter().zip(dist_full).zip(mask) {
        if p.len() != m.len() || f.len() != m.len() {
            return Err(invalid!("distributions and mask are not aligned"));
        }
        for ((pr, fr), &k) in p.iter().zip(f).zip(m) {
            if k {
                partial.push(pr.clone());
                full.push(fr.clone());
            }
        }
    }
    let targets = divergence_targets(&partial, &full)?;
    let mut tape = Tape::new();
    let cols: Vec<Var> = compress(&qs, mask).into_iter().map(|s| column(&mut tape, s)).collect();
    let l = divergence_on_tape(&mut tape, &cols, &targets)?;
    Ok(tape.scalar(l))
}
