//! Gradient-check suite run by the `gradcheck` command and the acceptance
//! tests: every tape op on random inputs, then the whole model under the
//! translation cross-entropy and under the policy objective.

use crate::autodiff::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{cross_entropy_on_tape, reina_on_tape, LossConfig};
use crate::model::{grad_check_point, Graph, EOS, TGT_TAG};
use crate::rng;
use crate::synth::TaskParams;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Whole-model checks skip coordinates whose gradient is below this; see
/// [`grad_check`] for why.
pub const MODEL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE && self.report.coords_checked > 0
    }
}

type Build = fn(&mut Tape<'_>, &[Var]) -> Var;

fn rand_tensor(r: &mut rng::Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn weighted_sum(t: &mut Tape<'_>, x: Var, seed: u64) -> Var {
    let (m, n) = t.shape(x);
    let mut r = rng::stream(seed, rng::purpose::GRADCHECK, 1 << 32);
    let w: Vec<f64> = (0..m * n).map(|_| r.gen_range(0.5..1.5)).collect();
    let y = t.mul_const(x, w);
    t.sum(y)
}

fn ops() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    fn s(v: &[&[usize]]) -> Vec<Vec<usize>> {
        v.iter().map(|x| x.to_vec()).collect()
    }
    alloc::vec![
        ("matmul", s(&[&[4, 5], &[5, 3]]), |t, v| t.matmul(v[0], v[1])),
        ("add", s(&[&[4, 6], &[4, 6]]), |t, v| t.add(v[0], v[1])),
        ("sub", s(&[&[4, 6], &[4, 6]]), |t, v| t.sub(v[0], v[1])),
        ("mul", s(&[&[4, 6], &[4, 6]]), |t, v| t.mul(v[0], v[1])),
        ("add_row", s(&[&[5, 6], &[1, 6]]), |t, v| t.add_row(v[0], v[1])),
        ("scale", s(&[&[8, 8]]), |t, v| t.scale(v[0], -1.7)),
        ("add_scalar", s(&[&[8, 8]]), |t, v| {
            let a = t.add_scalar(v[0], 0.3);
            t.square(a)
        }),
        ("gelu", s(&[&[8, 8]]), |t, v| t.gelu(v[0])),
        ("sigmoid", s(&[&[8, 8]]), |t, v| t.sigmoid(v[0])),
        ("square", s(&[&[8, 8]]), |t, v| t.square(v[0])),
        ("relu", s(&[&[8, 8]]), |t, v| t.relu(v[0])),
        ("layer_norm", s(&[&[5, 12], &[1, 12], &[1, 12]]), |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("attention_causal", s(&[&[6, 4], &[6, 4], &[6, 5]]), |t, v| t.attention(v[0], v[1], v[2], 0.5, true)),
        ("attention_cross", s(&[&[3, 4], &[7, 4], &[7, 5]]), |t, v| t.attention(v[0], v[1], v[2], 0.5, false)),
        ("log_softmax", s(&[&[6, 9]]), |t, v| t.log_softmax_rows(v[0])),
        ("gather", s(&[&[7, 9]]), |t, v| t.gather(v[0], &[3, 0, 3, 6, 1, 2, 2, 5])),
        ("pick", s(&[&[6, 9]]), |t, v| {
            let l = t.log_softmax_rows(v[0]);
            t.pick(l, &[0, 8, 3, 3, 1, 7])
        }),
        ("row_mean", s(&[&[6, 9]]), |t, v| t.row_mean(v[0])),
        ("concat_slice", s(&[&[3, 6], &[4, 6]]), |t, v| {
            let c = t.concat_rows(&[v[0], v[1]]);
            t.slice_rows(c, 2, 4)
        }),
        ("batch_norm", s(&[&[60, 1]]), |t, v| t.batch_norm(v[0], 1e-5)),
        ("mono_hinge", s(&[&[60, 1]]), |t, v| t.mono_hinge(v[0], 0.1)),
        ("mean", s(&[&[7, 8]]), |t, v| {
            let s = t.square(v[0]);
            t.mean(s)
        }),
    ]
}

/// Names of the checks in the order [`run_gradient_checks`] reports them.
pub fn check_names() -> Vec<&'static str> {
    let mut v: Vec<&'static str> = ops().iter().map(|o| o.0).collect();
    v.extend(["model_ce", "model_reina"]);
    v
}

pub fn run_gradient_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, (name, shapes, build)) in ops().into_iter().enumerate() {
        let mut r = rng::stream(seed, rng::purpose::GRADCHECK, 1000 + i as u64);
        let params: Vec<Tensor> = shapes.iter().map(|s| rand_tensor(&mut r, s)).collect();
        let report = grad_check(
            |t, v| {
                let o = build(t, v);
                Ok(weighted_sum(t, o, seed ^ i as u64))
            },
            &params,
            64,
            seed,
            STEP,
            0.0,
        )?;
        out.push(CheckResult { name: name.into(), report });
    }

    let p = grad_check_point(&TaskParams::default(), seed)?;
    let cfg = p.config;
    let frames = [3, 1, 7, 4];
    let toks = [TGT_TAG, cfg.tgt_id(4), cfg.tgt_id(0), cfg.tgt_id(2)];
    let labels = [cfg.tgt_id(4), cfg.tgt_id(0), cfg.tgt_id(2), EOS];
    let model = |loss: &dyn Fn(&mut Tape<'_>, Var, Var) -> Result<Var>| {
        grad_check(
            |t, vars| {
                let mut g = Graph::new(t, &p, vars, None);
                let enc = g.encode(&frames)?;
                let (lp, states) = g.decode(enc, &toks)?;
                let q = g.policy(states);
                loss(t, lp, q)
            },
            &p.tensors,
            300,
            seed,
            STEP,
            MODEL_FLOOR,
        )
    };
    let report = model(&|t, lp, _| cross_entropy_on_tape(t, lp, &labels, &[true; 4], 0.1))?;
    out.push(CheckResult { name: "model_ce".into(), report });
    let delta = alloc::vec![alloc::vec![-0.7, 0.1, -1.9, 0.0]];
    let lc = LossConfig {
        epsilon: 0.0,
        ..LossConfig::default()
    };
    let report = model(&|t, _, q| Ok(reina_on_tape(t, &[q], &delta, &lc, true)?.total))?;
    out.push(CheckResult { name: "model_reina".into(), report });
    Ok(out)
}
