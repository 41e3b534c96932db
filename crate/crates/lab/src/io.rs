//! On-disk formats: JSONL datasets and decode logs, JSON checkpoints and
//! reports, CSV curves, and the `.meta.json` sidecar next to every artifact.

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use reina_core::decoder::DelayTrace;
use reina_core::metrics::CurvePoint;
use reina_core::synth::{TaskParams, Utterance};
use reina_core::trainer::{Checkpoint, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

pub const DATASET_FORMAT: &str = "reina-dataset";
pub const DATASET_VERSION: u32 = 1;

pub fn version_string() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Writes `bytes` to `path` through a temporary sibling, refusing to replace
/// an existing file unless `force` is set.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(LabError::Exists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| LabError::io(path, e))
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, v: &T, force: bool) -> Result<()> {
    write_output(path, to_json_pretty(v).as_bytes(), force)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| LabError::format(path, e))
}

fn jsonl<T: Serialize>(head: Option<&DatasetHeader>, rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    if let Some(h) = head {
        serde_json::to_writer(&mut out, h).expect("plain data serializes");
        out.push(b'\n');
    }
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("plain data serializes");
        out.push(b'\n');
    }
    out
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = fs::File::open(path).map_err(|e| LabError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| LabError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, no: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| LabError::format(path, format!("line {no}: {e}")))
}

// ---- datasets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub task: TaskParams,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskParams,
    pub seed: u64,
    pub utterances: Vec<Utterance>,
}

/// A dataset argument may name the JSONL file or the directory holding it.
pub fn dataset_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("dataset.jsonl")
    } else {
        p.to_path_buf()
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset, force: bool) -> Result<()> {
    let head = DatasetHeader {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        task: ds.task,
        seed: ds.seed,
        count: ds.utterances.len(),
    };
    write_output(path, &jsonl(Some(&head), &ds.utterances), force)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let path = &dataset_path(path);
    let lines = read_lines(path)?;
    let Some(((no, first), rest)) = lines.split_first() else {
        return Err(LabError::format(path, "empty dataset"));
    };
    let head: DatasetHeader = parse_line(path, *no, first)?;
    if head.format != DATASET_FORMAT || head.version != DATASET_VERSION {
        return Err(LabError::format(
            path,
            format!("unsupported dataset {} v{}", head.format, head.version),
        ));
    }
    head.task.validate()?;
    let mut utterances = Vec::with_capacity(rest.len());
    for (no, line) in rest {
        let u: Utterance = parse_line(path, *no, line)?;
        u.validate(&head.task).map_err(|e| LabError::format(path, format!("line {no}: {e}")))?;
        utterances.push(u);
    }
    if utterances.len() != head.count {
        return Err(LabError::format(
            path,
            format!("header promises {} utterances, found {}", head.count, utterances.len()),
        ));
    }
    Ok(Dataset {
        task: head.task,
        seed: head.seed,
        utterances,
    })
}

// ---- checkpoints

pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut v = serde_json::to_vec(ckpt).expect("plain data serializes");
    v.push(b'\n');
    v
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint, force: bool) -> Result<()> {
    ckpt.validate()?;
    write_output(path, &checkpoint_bytes(ckpt), force)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = read(path)?;
    let ckpt: Checkpoint = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            // Name a version mismatch rather than whichever field moved.
            let found = serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("version").and_then(|v| v.as_u64()));
            return Err(match found {
                Some(v) if v != u64::from(CHECKPOINT_VERSION) => LabError::format(
                    path,
                    format!("checkpoint version {v}, expected {CHECKPOINT_VERSION}"),
                ),
                _ => LabError::format(path, e),
            });
        }
    };
    ckpt.validate().map_err(|e| LabError::format(path, e))?;
    Ok(ckpt)
}

// ---- decode logs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Offline,
    Stream,
    Waitk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeRecord {
    pub id: String,
    pub mode: DecodeMode,
    pub alpha: Option<f64>,
    pub k: Option<usize>,
    pub tokens: Vec<usize>,
    pub delays: Vec<f64>,
    pub total_s: f64,
    pub ref_tokens: Vec<usize>,
}

impl DecodeRecord {
    pub fn trace(&self) -> DelayTrace {
        DelayTrace {
            delays: self.delays.clone(),
            total_s: self.total_s,
        }
    }
}

pub fn decode_log_bytes(records: &[DecodeRecord]) -> Vec<u8> {
    jsonl(None, records)
}

pub fn write_decode_log(path: &Path, records: &[DecodeRecord], force: bool) -> Result<()> {
    write_output(path, &decode_log_bytes(records), force)
}

pub fn read_decode_log(path: &Path) -> Result<Vec<DecodeRecord>> {
    let mut out = Vec::new();
    for (no, line) in read_lines(path)? {
        let r: DecodeRecord = parse_line(path, no, &line)?;
        if r.delays.len() != r.tokens.len() {
            return Err(LabError::format(path, format!("line {no}: one delay per token required")));
        }
        r.trace().validate().map_err(|e| LabError::format(path, format!("line {no}: {e}")))?;
        out.push(r);
    }
    if out.is_empty() {
        return Err(LabError::format(path, "empty decode log"));
    }
    Ok(out)
}

// ---- curves

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub alpha: f64,
    #[serde(rename = "AL_s")]
    pub al_s: f64,
    #[serde(rename = "LAAL_s")]
    pub laal_s: f64,
    #[serde(rename = "BLEU")]
    pub bleu: f64,
    pub n_sentences: usize,
    pub empty_hypotheses: usize,
    pub offline_bleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<CurvePoint>,
    pub offline_bleu: f64,
}

pub fn curve_bytes(curve: &Curve) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &curve.points {
        w.serialize(CurveRow {
            alpha: p.alpha,
            al_s: p.al,
            laal_s: p.laal,
            bleu: p.bleu,
            n_sentences: p.n_sentences,
            empty_hypotheses: p.empty_hypotheses,
            offline_bleu: curve.offline_bleu,
        })
        .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

pub fn write_curve(path: &Path, curve: &Curve, force: bool) -> Result<()> {
    write_output(path, &curve_bytes(curve), force)
}

/// Reads a curve; `empty_hypotheses` may be omitted by hand-written files.
pub fn read_curve(path: &Path) -> Result<Curve> {
    #[derive(Deserialize)]
    struct Row {
        alpha: f64,
        #[serde(rename = "AL_s")]
        al_s: f64,
        #[serde(rename = "LAAL_s")]
        laal_s: Option<f64>,
        #[serde(rename = "BLEU")]
        bleu: f64,
        n_sentences: Option<usize>,
        empty_hypotheses: Option<usize>,
        offline_bleu: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| LabError::format(path, e))?;
    let mut points = Vec::new();
    let mut offline: Option<f64> = None;
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| LabError::format(path, e))?;
        match offline {
            Some(o) if o != row.offline_bleu => {
                return Err(LabError::format(path, format!("row {}: offline_bleu differs", i + 1)))
            }
            _ => offline = Some(row.offline_bleu),
        }
        points.push(CurvePoint {
            alpha: row.alpha,
            al: row.al_s,
            laal: row.laal_s.unwrap_or(row.al_s),
            bleu: row.bleu,
            n_sentences: row.n_sentences.unwrap_or(0),
            empty_hypotheses: row.empty_hypotheses.unwrap_or(0),
        });
    }
    let Some(offline_bleu) = offline else {
        return Err(LabError::format(path, "curve has no rows"));
    };
    Ok(Curve { points, offline_bleu })
}

// ---- reports and sidecars

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoseReport {
    pub x: f64,
    pub y: f64,
    pub offline_bleu: f64,
    pub nose: f64,
}

/// Provenance written next to every artifact as `<artifact>.meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub config: Option<ExperimentConfig>,
}

impl Meta {
    pub fn new(command: &str, seed: Option<u64>, config: Option<&ExperimentConfig>) -> Self {
        Self {
            version: version_string(),
            command: command.into(),
            seed,
            inputs: Vec::new(),
            config: config.cloned(),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }
}

pub fn meta_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn write_meta(artifact: &Path, meta: &Meta, force: bool) -> Result<()> {
    write_json(&meta_path(artifact), meta, force)
}

/// Refuses outputs that would overwrite one of the command's inputs.
pub fn check_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let o = canon(out);
    for i in inputs {
        if canon(i) == o {
            return Err(LabError::Config(format!("output {} is also an input", out.display())));
        }
    }
    Ok(())
}
