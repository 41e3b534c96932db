use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::rng;
use alloc::vec::Vec;
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(parameter index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` with central differences of step `h`
/// on up to `coords` coordinates drawn without replacement.
///
/// With `min_abs_grad > 0` only coordinates whose analytic gradient reaches
/// that magnitude are eligible. Central differences cannot resolve a gradient
/// much smaller than `ulp(f) / 2h`, so whole-model checks set a floor well
/// above that; op-level checks use 0 and sample every coordinate.
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    coords: usize,
    seed: u64,
    h: f64,
    min_abs_grad: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.check_finite()?;
        Ok(tape.scalar(loss))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut eligible: Vec<(usize, usize)> = Vec::new();
    for (p, t) in params.iter().enumerate() {
        let g = grads.get(p);
        for i in 0..t.numel() {
            let a = g.map_or(0.0, |g| g[i]);
            if min_abs_grad <= 0.0 || a.abs() >= min_abs_grad {
                eligible.push((p, i));
            }
        }
    }
    let mut r = rng::stream(seed, rng::purpose::GRADCHECK, 0);
    let take = coords.min(eligible.len());
    for k in 0..take {
        let j = r.gen_range(k..eligible.len());
        eligible.swap(k, j);
    }
    let picks = &eligible[..take];

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: picks.len(),
        worst: None,
    };
    let mut work = params.to_vec();
    for &(p, i) in picks {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + h;
        let up = eval(&work)?;
        work[p].data_mut()[i] = orig - h;
        let down = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.get(p).map_or(0.0, |g| g[i]);
        let err = relative_error(analytic, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
