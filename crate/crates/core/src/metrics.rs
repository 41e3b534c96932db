//! Quality and latency metrics: corpus BLEU, Average Lagging, LAAL, and the
//! normalized area under an AL/BLEU curve (NoSE).

use crate::decoder::{offline_beam_decode, stream_decode, DecodeConfig, DelayTrace, PolicyKind, StreamOutput};
use crate::error::{invalid, Error, Result};
use crate::model::ModelParams;
use crate::synth::Utterance;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU on a 0-100 scale: geometric mean of clipped 1-4-gram
/// precisions (a zero count for n >= 2 becomes `1 / (total + 1)`) times the
/// brevity penalty `exp(min(0, 1 - r/c))`.
pub fn corpus_bleu<T: Ord + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(invalid!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        ));
    }
    if hypotheses.is_empty() {
        return Err(invalid!("BLEU of an empty corpus"));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += libm::log(p);
    }
    let bp = f64::min(0.0, 1.0 - ref_len as f64 / hyp_len as f64);
    Ok(100.0 * libm::exp(bp + log_sum / MAX_ORDER as f64))
}

fn lagging(trace: &DelayTrace, rate_len: usize) -> Result<f64> {
    if rate_len == 0 {
        return Err(invalid!("reference length must be at least 1"));
    }
    trace.validate()?;
    let d = &trace.delays;
    if d.is_empty() {
        return Ok(trace.total_s);
    }
    let tau = d.iter().position(|&x| x >= trace.total_s).map_or(d.len(), |i| i + 1);
    let step = trace.total_s / rate_len as f64;
    let lag = d[..tau]
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &di)| acc + (di - i as f64 * step));
    Ok(lag / tau as f64)
}

/// Average Lagging in seconds. An empty hypothesis lags by the whole
/// utterance.
pub fn average_lagging(trace: &DelayTrace, ref_len: usize) -> Result<f64> {
    lagging(trace, ref_len)
}

/// Length-adaptive Average Lagging: pacing by `max(ref_len, hyp_len)`.
pub fn laal(trace: &DelayTrace, ref_len: usize, hyp_len: usize) -> Result<f64> {
    lagging(trace, ref_len.max(hyp_len))
}

/// One operating point of a latency/quality curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Threshold that produced the point (wait-k curves store `k`).
    pub alpha: f64,
    pub al: f64,
    pub laal: f64,
    pub bleu: f64,
    pub n_sentences: usize,
    /// Sentences decoded to nothing; they count with AL = T_s.
    pub empty_hypotheses: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub points: Vec<CurvePoint>,
    pub x: f64,
    pub y: f64,
    pub offline_bleu: f64,
}

impl CurveSpec {
    /// Sorts points by AL (stable, so equal-AL points keep their order).
    pub fn new(mut points: Vec<CurvePoint>, x: f64, y: f64, offline_bleu: f64) -> Self {
        points.sort_by(|a, b| a.al.total_cmp(&b.al));
        Self {
            points,
            x,
            y,
            offline_bleu,
        }
    }
}

/// Area under the piecewise-linear AL/BLEU curve over `[x, y]`, divided by
/// `(y - x) * offline_bleu`. The curve must cover `[x, y]`; nothing is
/// extrapolated.
pub fn nose(curve: &CurveSpec) -> Result<f64> {
    let (x, y) = (curve.x, curve.y);
    if !(x < y) || !x.is_finite() || !y.is_finite() {
        return Err(invalid!("NoSE bounds must satisfy x < y, got [{x}, {y}]"));
    }
    if !(curve.offline_bleu > 0.0) {
        return Err(invalid!("offline BLEU must be positive"));
    }
    let pts = &curve.points;
    if pts.len() < 2 {
        return Err(Error::OutOfDomain(format!("a curve needs at least 2 points, got {}", pts.len())));
    }
    if pts.iter().any(|p| !p.al.is_finite() || !(0.0..=100.0).contains(&p.bleu)) {
        return Err(invalid!("curve points need finite AL and BLEU in [0, 100]"));
    }
    if pts.windows(2).any(|w| w[1].al < w[0].al) {
        return Err(invalid!("curve points must be sorted by AL"));
    }
    let (lo, hi) = (pts[0].al, pts[pts.len() - 1].al);
    if x < lo || y > hi {
        return Err(Error::OutOfDomain(format!(
            "curve spans [{lo}, {hi}] which does not cover [{x}, {y}]"
        )));
    }
    // Heights are taken relative to the offline BLEU and divided by the summed
    // segment widths (which add up to y - x), so a flat curve at the offline
    // BLEU comes out as exactly 1.
    let (mut area, mut width) = (0.0, 0.0);
    for w in pts.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (l, r) = (a.al.max(x), b.al.min(y));
        if r <= l {
            continue;
        }
        let at = |s: f64| (a.bleu + (b.bleu - a.bleu) * (s - a.al) / (b.al - a.al)) / curve.offline_bleu;
        area += 0.5 * (at(l) + at(r)) * (r - l);
        width += r - l;
    }
    Ok(area / width)
}

/// `[max of minimum ALs, min of maximum ALs]` over several curves, or `None`
/// when the curves share no interval.
pub fn shared_bounds(curves: &[&[CurvePoint]]) -> Option<(f64, f64)> {
    let mut x = f64::NEG_INFINITY;
    let mut y = f64::INFINITY;
    for c in curves {
        let lo = c.iter().map(|p| p.al).fold(f64::INFINITY, f64::min);
        let hi = c.iter().map(|p| p.al).fold(f64::NEG_INFINITY, f64::max);
        x = x.max(lo);
        y = y.min(hi);
    }
    (x < y).then_some((x, y))
}

/// Lowest AL at which the piecewise-linear curve (points sorted by AL)
/// reaches `target` BLEU.
pub fn min_al_reaching(points: &[CurvePoint], target: f64) -> Option<f64> {
    let first = points.first()?;
    if first.bleu >= target {
        return Some(first.al);
    }
    for w in points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if b.bleu >= target {
            if b.al == a.al || b.bleu == a.bleu {
                return Some(b.al);
            }
            return Some(a.al + (target - a.bleu) * (b.al - a.al) / (b.bleu - a.bleu));
        }
    }
    None
}

/// Aggregates one decoding setting over a set of utterances (inputs in order).
pub fn curve_point(alpha: f64, outputs: &[StreamOutput], utts: &[Utterance]) -> Result<CurvePoint> {
    if outputs.len() != utts.len() || utts.is_empty() {
        return Err(invalid!("need one decode per utterance"));
    }
    let mut al = 0.0;
    let mut la = 0.0;
    let mut empty = 0;
    for (o, u) in outputs.iter().zip(utts) {
        al += average_lagging(&o.trace, u.tgt_tokens.len())?;
        la += laal(&o.trace, u.tgt_tokens.len(), o.tokens.len())?;
        empty += o.tokens.is_empty() as usize;
    }
    let hyps: Vec<Vec<usize>> = outputs.iter().map(|o| o.tokens.clone()).collect();
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.tgt_tokens.clone()).collect();
    let n = utts.len() as f64;
    Ok(CurvePoint {
        alpha,
        al: al / n,
        laal: la / n,
        bleu: corpus_bleu(&hyps, &refs)?,
        n_sentences: utts.len(),
        empty_hypotheses: empty,
    })
}

/// Corpus BLEU of offline beam decodes.
pub fn offline_bleu(params: &ModelParams, utts: &[Utterance], cfg: &DecodeConfig) -> Result<f64> {
    let mut hyps = Vec::with_capacity(utts.len());
    for u in utts {
        hyps.push(offline_beam_decode(params, &u.frames, cfg)?.tokens);
    }
    let refs: Vec<Vec<usize>> = utts.iter().map(|u| u.tgt_tokens.clone()).collect();
    corpus_bleu(&hyps, &refs)
}

/// Removes repeated thresholds, keeping first occurrences; returns the
/// kept list and a warning per dropped value.
pub fn dedup_alphas(alphas: &[f64]) -> (Vec<f64>, Vec<String>) {
    let mut kept: Vec<f64> = Vec::new();
    let mut warnings = Vec::new();
    for &a in alphas {
        if kept.iter().any(|&k| k == a) {
            warnings.push(format!("duplicate alpha {a} ignored"));
        } else {
            kept.push(a);
        }
    }
    (kept, warnings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// Sorted by AL.
    pub points: Vec<CurvePoint>,
    pub offline_bleu: f64,
    pub warnings: Vec<String>,
}

/// Stream-decodes `utts` with the learned policy at every threshold.
pub fn sweep_curve(params: &ModelParams, utts: &[Utterance], alphas: &[f64], cfg: &DecodeConfig) -> Result<Sweep> {
    sweep_settings(params, utts, alphas, cfg, |a| DecodeConfig {
        alpha: a,
        policy: PolicyKind::Learned,
        ..*cfg
    })
}

/// Wait-k curve over the given lags; each point stores `k` as its alpha.
pub fn sweep_waitk(params: &ModelParams, utts: &[Utterance], ks: &[usize], cfg: &DecodeConfig) -> Result<Sweep> {
    let as_f: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    sweep_settings(params, utts, &as_f, cfg, |k| DecodeConfig {
        policy: PolicyKind::WaitK { k: k as usize },
        ..*cfg
    })
}

fn sweep_settings(
    params: &ModelParams,
    utts: &[Utterance],
    settings: &[f64],
    cfg: &DecodeConfig,
    make: impl Fn(f64) -> DecodeConfig,
) -> Result<Sweep> {
    if settings.is_empty() {
        return Err(invalid!("sweep needs at least one setting"));
    }
    if utts.is_empty() {
        return Err(invalid!("sweep needs at least one utterance"));
    }
    let (settings, warnings) = dedup_alphas(settings);
    let mut points = Vec::with_capacity(settings.len());
    for &s in &settings {
        let c = make(s);
        let mut outs = Vec::with_capacity(utts.len());
        for u in utts {
            outs.push(stream_decode(params, &u.frames, u.frame_dur_s, &c)?);
        }
        points.push(curve_point(s, &outs, utts)?);
    }
    points.sort_by(|a, b| a.al.total_cmp(&b.al));
    Ok(Sweep {
        points,
        offline_bleu: offline_bleu(params, utts, cfg)?,
        warnings,
    })
}

#[cfg(test)]
mod tests;
