//! Micro encoder-decoder with a READ/WRITE policy head.
//!
//! Pre-norm transformer blocks throughout. The frame encoder is causal, so the
//! states for a prefix of the stream are exactly the first rows of the states
//! for the whole stream. The decoder is causal over tokens and cross-attends to
//! every available encoder state. The policy head is a small causal
//! transformer over the decoder's last-layer states followed by a linear map
//! and a sigmoid, producing one READ score per decoder position.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::synth::TaskParams;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const TGT_TAG: usize = 2;
pub const SRC_TAG: usize = 3;
const NUM_SPECIAL: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub policy_layers: usize,
    pub policy_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub max_frames: usize,
    pub max_tokens: usize,
    pub frame_vocab: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// `false` switches the frame encoder to full (bidirectional) attention,
    /// in which case every chunk is re-encoded from scratch.
    pub causal_encoder: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            enc_layers: 2,
            dec_layers: 2,
            policy_layers: 2,
            policy_heads: 2,
            ff_mult: 4,
            dropout: 0.1,
            max_frames: 64,
            max_tokens: 64,
            frame_vocab: 10,
            src_vocab: 5,
            tgt_vocab: 5,
            causal_encoder: true,
        }
    }
}

impl ArchConfig {
    /// Defaults with vocabularies and lengths taken from a task.
    pub fn for_task(task: &TaskParams) -> Self {
        Self {
            frame_vocab: task.frame_vocab(),
            src_vocab: task.src_vocab,
            tgt_vocab: task.tgt_vocab,
            max_frames: task.total_frames().max(1),
            max_tokens: task.tokens + 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.d_model,
            self.heads,
            self.policy_heads,
            self.ff_mult,
            self.max_frames,
            self.max_tokens,
            self.frame_vocab,
            self.src_vocab,
            self.tgt_vocab,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(invalid!("architecture sizes must be positive"));
        }
        if self.d_model % self.heads != 0 || self.d_model % self.policy_heads != 0 {
            return Err(invalid!("d_model {} not divisible by the head counts", self.d_model));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid!("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Decoder vocabulary: specials, target symbols, then source symbols.
    pub fn vocab_size(&self) -> usize {
        NUM_SPECIAL + self.tgt_vocab + self.src_vocab
    }

    pub fn tgt_id(&self, s: usize) -> usize {
        NUM_SPECIAL + s
    }

    pub fn src_id(&self, z: usize) -> usize {
        NUM_SPECIAL + self.tgt_vocab + z
    }

    /// Target symbol for a decoder id, if it is one.
    pub fn tgt_symbol(&self, id: usize) -> Option<usize> {
        (NUM_SPECIAL..NUM_SPECIAL + self.tgt_vocab).contains(&id).then(|| id - NUM_SPECIAL)
    }
}

#[derive(Debug, Clone, Copy)]
struct LnIdx {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct AttnIdx {
    /// `[w_q, w_k, w_v, w_o]` per head.
    heads: Vec<[usize; 4]>,
}

#[derive(Debug, Clone, Copy)]
struct FfIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: LnIdx,
    self_attn: AttnIdx,
    cross: Option<(LnIdx, AttnIdx)>,
    ln_ff: LnIdx,
    ff: FfIdx,
}

/// Where every parameter lives in the flat list, derived from the config.
#[derive(Debug, Clone)]
struct Layout {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    frame_emb: usize,
    enc_pos: usize,
    enc: Vec<Block>,
    enc_ln: LnIdx,
    tok_emb: usize,
    dec_pos: usize,
    dec: Vec<Block>,
    dec_ln: LnIdx,
    out_w: usize,
    out_b: usize,
    policy_start: usize,
    pol: Vec<Block>,
    pol_ln: LnIdx,
    pol_w: usize,
    pol_b: usize,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: &[usize]) -> usize {
        self.names.push(name);
        self.shapes.push(shape.to_vec());
        self.names.len() - 1
    }

    fn ln(&mut self, prefix: &str, d: usize) -> LnIdx {
        LnIdx {
            g: self.add(format!("{prefix}.gain"), &[1, d]),
            b: self.add(format!("{prefix}.bias"), &[1, d]),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize, heads: usize) -> AttnIdx {
        let dh = d / heads;
        let heads = (0..heads)
            .map(|h| {
                [
                    self.add(format!("{prefix}.h{h}.w_q"), &[d, dh]),
                    self.add(format!("{prefix}.h{h}.w_k"), &[d, dh]),
                    self.add(format!("{prefix}.h{h}.w_v"), &[d, dh]),
                    self.add(format!("{prefix}.h{h}.w_o"), &[dh, d]),
                ]
            })
            .collect();
        AttnIdx { heads }
    }

    fn ff(&mut self, prefix: &str, d: usize, mult: usize) -> FfIdx {
        FfIdx {
            w1: self.add(format!("{prefix}.w1"), &[d, d * mult]),
            b1: self.add(format!("{prefix}.b1"), &[1, d * mult]),
            w2: self.add(format!("{prefix}.w2"), &[d * mult, d]),
            b2: self.add(format!("{prefix}.b2"), &[1, d]),
        }
    }

    fn block(&mut self, prefix: &str, cfg: &ArchConfig, heads: usize, cross: bool) -> Block {
        let d = cfg.d_model;
        let ln_self = self.ln(&format!("{prefix}.ln_self"), d);
        let self_attn = self.attn(&format!("{prefix}.self_attn"), d, heads);
        let cross = cross.then(|| {
            (
                self.ln(&format!("{prefix}.ln_cross"), d),
                self.attn(&format!("{prefix}.cross_attn"), d, heads),
            )
        });
        let ln_ff = self.ln(&format!("{prefix}.ln_ff"), d);
        let ff = self.ff(&format!("{prefix}.ff"), d, cfg.ff_mult);
        Block {
            ln_self,
            self_attn,
            cross,
            ln_ff,
            ff,
        }
    }
}

impl Layout {
    fn new(cfg: &ArchConfig) -> Self {
        let d = cfg.d_model;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            shapes: Vec::new(),
        };
        let frame_emb = b.add("enc.frame_emb".into(), &[cfg.frame_vocab, d]);
        let enc_pos = b.add("enc.pos_emb".into(), &[cfg.max_frames, d]);
        let enc = (0..cfg.enc_layers)
            .map(|l| b.block(&format!("enc.l{l}"), cfg, cfg.heads, false))
            .collect();
        let enc_ln = b.ln("enc.ln_final", d);
        let tok_emb = b.add("dec.tok_emb".into(), &[cfg.vocab_size(), d]);
        let dec_pos = b.add("dec.pos_emb".into(), &[cfg.max_tokens, d]);
        let dec = (0..cfg.dec_layers)
            .map(|l| b.block(&format!("dec.l{l}"), cfg, cfg.heads, true))
            .collect();
        let dec_ln = b.ln("dec.ln_final", d);
        let out_w = b.add("dec.out.w".into(), &[d, cfg.vocab_size()]);
        let out_b = b.add("dec.out.b".into(), &[1, cfg.vocab_size()]);
        let policy_start = b.names.len();
        let pol = (0..cfg.policy_layers)
            .map(|l| b.block(&format!("policy.l{l}"), cfg, cfg.policy_heads, false))
            .collect();
        let pol_ln = b.ln("policy.ln_final", d);
        let pol_w = b.add("policy.out.w".into(), &[d, 1]);
        let pol_b = b.add("policy.out.b".into(), &[1, 1]);
        Self {
            names: b.names,
            shapes: b.shapes,
            frame_emb,
            enc_pos,
            enc,
            enc_ln,
            tok_emb,
            dec_pos,
            dec,
            dec_ln,
            out_w,
            out_b,
            policy_start,
            pol,
            pol_ln,
            pol_w,
            pol_b,
        }
    }
}

/// Every learnable array, in a fixed order. Indices at or past
/// `policy_start` form the policy head; the rest is the base model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ArchConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
    pub policy_start: usize,
}

impl ModelParams {
    pub fn is_policy(&self, index: usize) -> bool {
        index >= self.policy_start
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Rebuilds from named arrays, checking names and shapes against the config.
    pub fn from_parts(config: ArchConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if tensors.len() != layout.names.len() {
            return Err(invalid!(
                "expected {} parameter arrays, found {}",
                layout.names.len(),
                tensors.len()
            ));
        }
        let mut out = Vec::with_capacity(tensors.len());
        for ((name, t), (want, shape)) in tensors.into_iter().zip(layout.names.iter().zip(&layout.shapes)) {
            if &name != want || t.shape() != shape.as_slice() {
                return Err(invalid!("parameter {name} {:?} does not match {want} {shape:?}", t.shape()));
            }
            out.push(t);
        }
        Ok(Self {
            config,
            names: layout.names,
            tensors: out,
            policy_start: layout.policy_start,
        })
    }

    /// Registers every array on `tape`, trainable where `trainable(i)` holds.
    pub fn register<'a>(&'a self, tape: &mut Tape<'a>, trainable: impl Fn(usize) -> bool) -> Vec<Var> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if trainable(i) { tape.param(i, t) } else { tape.frozen(t) })
            .collect()
    }
}

/// Deterministic fan-in scaled initialization.
pub fn init_params(cfg: &ArchConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut r = crate::rng::stream(seed, crate::rng::purpose::INIT, 0);
    let sqrt3 = libm::sqrt(3.0);
    let mut tensors = Vec::with_capacity(layout.names.len());
    for (name, shape) in layout.names.iter().zip(&layout.shapes) {
        let numel: usize = shape.iter().product();
        let std = if name.ends_with(".gain") {
            None
        } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") || name.ends_with(".b") {
            Some(0.0)
        } else if name.contains("emb") {
            Some(0.3)
        } else if name == "dec.out.w" || name == "policy.out.w" {
            Some(0.1 / libm::sqrt(shape[0] as f64))
        } else {
            Some(1.0 / libm::sqrt(shape[0] as f64))
        };
        let data = match std {
            None => alloc::vec![1.0; numel],
            Some(s) if s == 0.0 => alloc::vec![0.0; numel],
            Some(s) => (0..numel).map(|_| r.gen_range(-1.0..1.0) * sqrt3 * s).collect(),
        };
        tensors.push(Tensor::new(shape.clone(), data)?);
    }
    Ok(ModelParams {
        config: *cfg,
        names: layout.names,
        tensors,
        policy_start: layout.policy_start,
    })
}

/// Narrow configuration and parameter point used for finite-difference
/// checks of whole-model losses: output layers are redrawn at unit fan-in
/// scale so upstream gradients stay well above the loss's rounding floor.
pub fn grad_check_point(task: &TaskParams, seed: u64) -> Result<ModelParams> {
    let cfg = ArchConfig {
        d_model: 8,
        dropout: 0.0,
        ..ArchConfig::for_task(task)
    };
    let mut p = init_params(&cfg, seed)?;
    for name in ["dec.out.w", "policy.out.w"] {
        let i = p.index_of(name).expect("output layer present");
        for x in p.tensors[i].data_mut() {
            *x *= 10.0;
        }
    }
    Ok(p)
}

/// Dense row-major matrix of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct States {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl States {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// First `rows` rows.
    pub fn prefix(&self, rows: usize) -> States {
        States {
            rows,
            cols: self.cols,
            data: self.data[..rows * self.cols].to_vec(),
        }
    }

    fn from_tape(tape: &Tape<'_>, v: Var) -> Self {
        let (rows, cols) = tape.shape(v);
        Self {
            rows,
            cols,
            data: tape.value(v).to_vec(),
        }
    }
}

/// Per-position READ scores in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyScores(pub Vec<f64>);

/// Teacher-forced decoder output: one log-distribution row per input
/// position (row `n` predicts the token after input `n`) and the matching
/// last-layer states that feed the policy head.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub logprobs: Vec<Vec<f64>>,
    pub states: States,
}

/// Forward graph builder over registered parameter vars.
pub struct Graph<'g, 'a, 'r> {
    pub tape: &'g mut Tape<'a>,
    vars: &'g [Var],
    layout: Layout,
    cfg: ArchConfig,
    dropout: Option<(f64, &'r mut Rng)>,
}

impl<'g, 'a, 'r> Graph<'g, 'a, 'r> {
    /// `dropout` is applied only when a generator is supplied and the rate is positive.
    pub fn new(tape: &'g mut Tape<'a>, params: &ModelParams, vars: &'g [Var], dropout: Option<&'r mut Rng>) -> Self {
        let cfg = params.config;
        let dropout = dropout.filter(|_| cfg.dropout > 0.0).map(|r| (cfg.dropout, r));
        Self {
            tape,
            vars,
            layout: Layout::new(&cfg),
            cfg,
            dropout,
        }
    }

    fn p(&self, i: usize) -> Var {
        self.vars[i]
    }

    fn drop(&mut self, x: Var) -> Var {
        let Some((rate, r)) = self.dropout.as_mut() else { return x };
        let (m, n) = self.tape.shape(x);
        let keep = 1.0 / (1.0 - *rate);
        let mask = (0..m * n).map(|_| if r.gen_bool(*rate) { 0.0 } else { keep }).collect();
        self.tape.mul_const(x, mask)
    }

    fn ln(&mut self, x: Var, idx: LnIdx) -> Var {
        let (g, b) = (self.p(idx.g), self.p(idx.b));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    fn attn(&mut self, x: Var, mem: Var, idx: &AttnIdx, causal: bool) -> Var {
        let dh = self.tape.shape(self.p(idx.heads[0][0])).1;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut acc: Option<Var> = None;
        for &[wq, wk, wv, wo] in &idx.heads {
            let q = self.tape.matmul(x, self.vars[wq]);
            let k = self.tape.matmul(mem, self.vars[wk]);
            let v = self.tape.matmul(mem, self.vars[wv]);
            let o = self.tape.attention(q, k, v, scale, causal);
            let proj = self.tape.matmul(o, self.vars[wo]);
            acc = Some(match acc {
                Some(a) => self.tape.add(a, proj),
                None => proj,
            });
        }
        acc.expect("at least one head")
    }

    fn ff(&mut self, x: Var, idx: FfIdx) -> Var {
        let h = self.tape.matmul(x, self.p(idx.w1));
        let h = self.tape.add_row(h, self.p(idx.b1));
        let h = self.tape.gelu(h);
        let h = self.tape.matmul(h, self.p(idx.w2));
        self.tape.add_row(h, self.p(idx.b2))
    }

    fn block(&mut self, x: Var, blk: &Block, mem: Option<Var>, causal: bool) -> Var {
        let h = self.ln(x, blk.ln_self);
        let a = self.attn(h, h, &blk.self_attn, causal);
        let a = self.drop(a);
        let mut x = self.tape.add(x, a);
        if let (Some((ln, idx)), Some(mem)) = (&blk.cross, mem) {
            let h = self.ln(x, *ln);
            let a = self.attn(h, mem, idx, false);
            let a = self.drop(a);
            x = self.tape.add(x, a);
        }
        let h = self.ln(x, blk.ln_ff);
        let f = self.ff(h, blk.ff);
        let f = self.drop(f);
        self.tape.add(x, f)
    }

    fn embed(&mut self, table: usize, pos: usize, ids: &[usize]) -> Var {
        let e = self.tape.gather(self.p(table), ids);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = self.tape.gather(self.p(pos), &positions);
        let x = self.tape.add(e, p);
        self.drop(x)
    }

    /// Encoder states, one row per frame.
    pub fn encode(&mut self, frames: &[usize]) -> Result<Var> {
        if frames.is_empty() {
            return Err(invalid!("cannot encode an empty frame prefix"));
        }
        if frames.len() > self.cfg.max_frames {
            return Err(invalid!("{} frames exceed max_frames {}", frames.len(), self.cfg.max_frames));
        }
        if let Some(&f) = frames.iter().find(|&&f| f >= self.cfg.frame_vocab) {
            return Err(invalid!("frame symbol {f} outside the frame vocabulary"));
        }
        let mut x = self.embed(self.layout.frame_emb, self.layout.enc_pos, frames);
        let blocks = self.layout.enc.clone();
        for blk in &blocks {
            x = self.block(x, blk, None, self.cfg.causal_encoder);
        }
        Ok(self.ln(x, self.layout.enc_ln))
    }

    /// Log-probability rows and last-layer states for a tagged token prefix.
    pub fn decode(&mut self, enc: Var, tokens: &[usize]) -> Result<(Var, Var)> {
        match tokens.first() {
            Some(&TGT_TAG) | Some(&SRC_TAG) => {}
            _ => return Err(invalid!("token prefix must start with a task tag")),
        }
        if tokens.len() > self.cfg.max_tokens {
            return Err(invalid!("{} tokens exceed max_tokens {}", tokens.len(), self.cfg.max_tokens));
        }
        let vocab = self.cfg.vocab_size();
        if let Some(&t) = tokens.iter().find(|&&t| t >= vocab || t == PAD) {
            return Err(invalid!("unknown token id {t}"));
        }
        let mut y = self.embed(self.layout.tok_emb, self.layout.dec_pos, tokens);
        let blocks = self.layout.dec.clone();
        for blk in &blocks {
            y = self.block(y, blk, Some(enc), true);
        }
        let states = self.ln(y, self.layout.dec_ln);
        let logits = self.tape.matmul(states, self.p(self.layout.out_w));
        let logits = self.tape.add_row(logits, self.p(self.layout.out_b));
        Ok((self.tape.log_softmax_rows(logits), states))
    }

    /// Column of READ scores, one per decoder state row.
    pub fn policy(&mut self, states: Var) -> Var {
        let mut z = states;
        let blocks = self.layout.pol.clone();
        for blk in &blocks {
            z = self.block(z, blk, None, true);
        }
        let z = self.ln(z, self.layout.pol_ln);
        let s = self.tape.matmul(z, self.p(self.layout.pol_w));
        let s = self.tape.add_row(s, self.p(self.layout.pol_b));
        self.tape.sigmoid(s)
    }
}

/// Evaluation-mode encoder pass.
pub fn encode(params: &ModelParams, frames: &[usize]) -> Result<States> {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let mut g = Graph::new(&mut tape, params, &vars, None);
    let enc = g.encode(frames)?;
    tape.check_finite()?;
    Ok(States::from_tape(&tape, enc))
}

/// Evaluation-mode teacher-forced decoder pass.
pub fn decode_logprobs(params: &ModelParams, enc: &States, tokens: &[usize]) -> Result<DecoderOutput> {
    if enc.cols != params.config.d_model || enc.rows == 0 {
        return Err(invalid!("encoder states have the wrong shape"));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let enc_var = tape.constant(enc.rows, enc.cols, enc.data.clone());
    let mut g = Graph::new(&mut tape, params, &vars, None);
    let (lp, states) = g.decode(enc_var, tokens)?;
    tape.check_finite()?;
    let (rows, cols) = tape.shape(lp);
    let v = tape.value(lp);
    let logprobs = (0..rows).map(|i| v[i * cols..(i + 1) * cols].to_vec()).collect();
    Ok(DecoderOutput {
        logprobs,
        states: States::from_tape(&tape, states),
    })
}

/// Evaluation-mode policy head pass.
pub fn policy_scores(params: &ModelParams, states: &States) -> Result<PolicyScores> {
    if states.rows == 0 || states.cols != params.config.d_model {
        return Err(invalid!("policy head needs at least one decoder state of width d_model"));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, |_| false);
    let s = tape.constant(states.rows, states.cols, states.data.clone());
    let mut g = Graph::new(&mut tape, params, &vars, None);
    let q = g.policy(s);
    tape.check_finite()?;
    Ok(PolicyScores(tape.value(q).to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::synth::{gen_task, TaskKind};

    fn small() -> ArchConfig {
        ArchConfig {
            max_frames: 12,
            max_tokens: 8,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let a = init_params(&small(), 1).unwrap();
        let b = init_params(&small(), 1).unwrap();
        let c = init_params(&small(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.tensors, c.tensors);
        assert!(a.policy_start > 0 && a.policy_start < a.tensors.len());
        assert!(a.names[a.policy_start..].iter().all(|n| n.starts_with("policy.")));
        assert!(a.names[..a.policy_start].iter().all(|n| !n.starts_with("policy.")));
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = ArchConfig { d_model: 30, heads: 4, ..small() };
        assert!(init_params(&cfg, 0).is_err());
    }

    #[test]
    fn encoder_is_causal_bit_for_bit() {
        let p = init_params(&small(), 3).unwrap();
        let frames = [1, 7, 3, 3, 0, 9, 2, 4];
        let full = encode(&p, &frames).unwrap();
        assert_eq!(full.rows, 8);
        for t in 1..frames.len() {
            let part = encode(&p, &frames[..t]).unwrap();
            assert_eq!(part.data, full.data[..t * full.cols]);
        }
        assert_eq!(encode(&p, &frames[..1]).unwrap().rows, 1);
        assert!(encode(&p, &[]).is_err());
        assert!(encode(&p, &[10]).is_err());
    }

    #[test]
    fn decoder_rows_are_distributions_and_near_uniform_at_init() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let enc = encode(&p, &[1, 2, 3, 4]).unwrap();
        let out = decode_logprobs(&p, &enc, &[TGT_TAG, cfg.tgt_id(2), cfg.tgt_id(0)]).unwrap();
        assert_eq!(out.logprobs.len(), 3);
        let v = cfg.vocab_size() as f64;
        for row in &out.logprobs {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-10);
            let max = row.iter().cloned().fold(f64::MIN, f64::max).exp();
            assert!(max < 3.0 / v, "max prob {max}");
        }
        assert!(decode_logprobs(&p, &enc, &[cfg.tgt_id(1)]).is_err());
        assert!(decode_logprobs(&p, &enc, &[TGT_TAG, 999]).is_err());
        assert!(decode_logprobs(&p, &enc, &[TGT_TAG, PAD]).is_err());
    }

    #[test]
    fn policy_is_causal_and_bounded() {
        let cfg = small();
        let p = init_params(&cfg, 5).unwrap();
        let enc = encode(&p, &[1, 2, 3]).unwrap();
        let toks = [TGT_TAG, cfg.tgt_id(1), cfg.tgt_id(4), cfg.tgt_id(3), EOS];
        let dec = decode_logprobs(&p, &enc, &toks).unwrap();
        let full = policy_scores(&p, &dec.states).unwrap();
        assert!(full.0.iter().all(|&r| r > 0.0 && r < 1.0));
        for n in 1..toks.len() {
            let part = policy_scores(&p, &dec.states.prefix(n)).unwrap();
            assert_eq!(part.0[..], full.0[..n]);
            // the decoder is causal too, so shorter prefixes give the same states
            let short = decode_logprobs(&p, &enc, &toks[..n]).unwrap();
            assert_eq!(short.states.data[..], dec.states.data[..short.states.data.len()]);
        }
    }

    #[test]
    fn zero_policy_output_weights_give_one_half() {
        let cfg = small();
        let mut p = init_params(&cfg, 6).unwrap();
        for name in ["policy.out.w", "policy.out.b"] {
            let i = p.index_of(name).unwrap();
            p.tensors[i].data_mut().fill(0.0);
        }
        let enc = encode(&p, &[0, 1]).unwrap();
        let dec = decode_logprobs(&p, &enc, &[TGT_TAG, cfg.tgt_id(0)]).unwrap();
        assert_eq!(policy_scores(&p, &dec.states).unwrap().0, [0.5, 0.5]);
    }

    #[test]
    fn random_inputs_give_finite_outputs() {
        let task = TaskParams {
            kind: TaskKind::NoisyChannel,
            noise_rate: 0.2,
            frames_per_token: 2,
            ..TaskParams::default()
        };
        let cfg = ArchConfig::for_task(&task);
        let p = init_params(&cfg, 7).unwrap();
        for u in gen_task(&task, 5, 1).unwrap() {
            let enc = encode(&p, &u.frames).unwrap();
            let mut toks = alloc::vec![TGT_TAG];
            toks.extend(u.tgt_tokens.iter().map(|&s| cfg.tgt_id(s)));
            let dec = decode_logprobs(&p, &enc, &toks).unwrap();
            assert!(dec.logprobs.iter().flatten().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn full_model_loss_passes_grad_check() {
        let p = grad_check_point(&TaskParams::default(), 8).unwrap();
        let cfg = p.config;
        let toks = [TGT_TAG, cfg.tgt_id(1), cfg.tgt_id(3)];
        let labels = [cfg.tgt_id(1), cfg.tgt_id(3), EOS];
        let rep = grad_check(
            |t, vars| {
                let mut g = Graph::new(t, &p, vars, None);
                let enc = g.encode(&[0, 5, 2, 2])?;
                let (lp, states) = g.decode(enc, &toks)?;
                let q = g.policy(states);
                let picked = t.pick(lp, &labels);
                let ce = t.mean(picked);
                let qs = t.mean(q);
                Ok(t.add(ce, qs))
            },
            &p.tensors,
            400,
            3,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?} {}", p.names[rep.worst.unwrap().0]);
    }
}
