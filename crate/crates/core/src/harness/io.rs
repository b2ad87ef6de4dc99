//! On-disk formats: JSONL pools and traces (optionally gzipped) and the CSV
//! summary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TestbedSpec;
use crate::backbone::TaskInstance;
use crate::error::{Error, Result};
use crate::filter::{InferenceConfig, RunTrace, StepRecord};
use crate::state::{JointState, LatentTensor, TokenGrid};

const TOKEN_ALPHABET_LEN: u32 = 35;

/// Clue mask as text: the token character for given cells and `.` for
/// blanks (dot-separated decimals with `_` blanks when `C > 35`).
pub fn clue_string(clues: &[Option<u32>], classes: u32) -> Result<String> {
    if classes <= TOKEN_ALPHABET_LEN {
        clues
            .iter()
            .map(|c| match c {
                Some(t) => Ok(TokenGrid::new(vec![*t], classes)?.to_token_string()),
                None => Ok(".".to_string()),
            })
            .collect()
    } else {
        Ok(clues
            .iter()
            .map(|c| c.map_or_else(|| "_".to_string(), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join("."))
    }
}

pub fn parse_clue_string(s: &str, classes: u32) -> Result<Vec<Option<u32>>> {
    let parts: Vec<String> = if classes <= TOKEN_ALPHABET_LEN {
        s.chars().map(String::from).collect()
    } else if s.is_empty() {
        Vec::new()
    } else {
        s.split('.').map(String::from).collect()
    };
    parts
        .iter()
        .map(|p| match p.as_str() {
            "." | "_" => Ok(None),
            tok => match TokenGrid::parse_token_string(tok, classes)?.tokens() {
                [t] => Ok(Some(*t)),
                _ => Err(Error::parse(format!("bad clue token {tok:?}"))),
            },
        })
        .collect()
}

fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(BufReader::new(GzDecoder::new(file))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(GzEncoder::new(BufWriter::new(file), Compression::default())))
    } else {
        Ok(Box::new(BufWriter::new(file)))
    }
}

fn write_line<T: Serialize>(out: &mut dyn Write, path: &Path, record: &T) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::parse(e.to_string()))?;
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))
}

/// Reads a whole file (decompressing `.gz`) into memory.
pub fn read_to_string(path: &Path) -> Result<String> {
    let mut s = String::new();
    open_reader(path)?
        .read_to_string(&mut s)
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}

// ---------------------------------------------------------------- pools

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolHeader {
    pub testbed: TestbedSpec,
    pub seed: u64,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRecord {
    id: u64,
    /// Latents are omitted when all-zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    solution: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clues: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pool {
    pub header: PoolHeader,
    pub tasks: Vec<TaskInstance>,
}

fn dense(t: &LatentTensor) -> Option<Vec<f64>> {
    t.as_slice().iter().any(|&v| v != 0.0).then(|| t.as_slice().to_vec())
}

fn latent(v: Option<Vec<f64>>, shape: (usize, usize)) -> Result<LatentTensor> {
    match v {
        Some(v) => LatentTensor::new(v, shape.0, shape.1).map_err(|e| Error::parse(e.to_string())),
        None => Ok(LatentTensor::zeros(shape.0, shape.1)),
    }
}

impl Pool {
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::parse("empty pool file"))?;
        let header: PoolHeader =
            serde_json::from_str(first).map_err(|e| Error::parse(format!("pool header: {e}")))?;
        header.testbed.validate()?;
        let shape = header.testbed.shape();
        let classes = header.testbed.classes();
        let mut tasks = Vec::new();
        for (i, line) in lines {
            let r: PoolRecord =
                serde_json::from_str(line).map_err(|e| Error::parse(format!("pool line {}: {e}", i + 1)))?;
            let solution = r
                .solution
                .as_deref()
                .map(|s| TokenGrid::parse_token_string(s, classes))
                .transpose()?;
            if solution.as_ref().is_some_and(|s| s.len() != shape.0) {
                return Err(Error::parse(format!("pool line {}: solution length", i + 1)));
            }
            let clues = r
                .clues
                .as_deref()
                .map(|s| parse_clue_string(s, classes))
                .transpose()?
                .unwrap_or_default();
            if !clues.is_empty() && clues.len() != shape.0 {
                return Err(Error::parse(format!("pool line {}: clue length", i + 1)));
            }
            tasks.push(TaskInstance {
                id: r.id,
                x: latent(r.x, shape)?,
                h0: JointState {
                    y: latent(r.y, shape)?,
                    z: latent(r.z, shape)?,
                },
                solution,
                clues,
            });
        }
        let mut ids: Vec<u64> = tasks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != tasks.len() {
            return Err(Error::parse("duplicate instance ids in pool"));
        }
        Ok(Self { header, tasks })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let classes = self.header.testbed.classes();
        let mut out = open_writer(path)?;
        write_line(&mut *out, path, &self.header)?;
        for t in &self.tasks {
            let record = PoolRecord {
                id: t.id,
                x: dense(&t.x),
                y: dense(&t.h0.y),
                z: dense(&t.h0.z),
                solution: t.solution.as_ref().map(TokenGrid::to_token_string),
                clues: if t.clues.is_empty() {
                    None
                } else {
                    Some(clue_string(&t.clues, classes)?)
                },
            };
            write_line(&mut *out, path, &record)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

// ---------------------------------------------------------------- traces

/// `-inf` log-weights travel as JSON `null`.
mod log_weights_json {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let mapped: Vec<Option<f64>> = v.iter().map(|&x| (x != f64::NEG_INFINITY).then_some(x)).collect();
        mapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let raw: Vec<Option<f64>> = Vec::deserialize(d)?;
        Ok(raw.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect())
    }
}

/// Which inference a run performed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One particle, no noise.
    Deterministic,
    /// `beta = 0`, same seed as the guided run.
    Unguided,
    Guided,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Deterministic => "deterministic",
            RunMode::Unguided => "unguided",
            RunMode::Guided => "guided",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceLine {
    Run {
        run: String,
        instance: u64,
        point: usize,
        fold: usize,
        seed: usize,
        mode: RunMode,
        classes: u32,
        config: InferenceConfig,
    },
    Step {
        run: String,
        n: usize,
        #[serde(with = "log_weights_json")]
        log_weights: Vec<f64>,
        scores: Vec<f64>,
        ess_ratio: f64,
        resampled: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        ancestors: Option<Vec<usize>>,
        answers: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inner_deviation: Option<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        degenerate: bool,
    },
    Result {
        run: String,
        answer: String,
        solved: Option<bool>,
        oracle: Option<bool>,
    },
}

/// One run read back from a trace file.
#[derive(Clone, Debug, PartialEq)]
pub struct TracedRun {
    pub run: String,
    pub instance: u64,
    pub point: usize,
    pub fold: usize,
    pub seed: usize,
    pub mode: RunMode,
    pub classes: u32,
    pub config: InferenceConfig,
    pub trace: RunTrace,
    /// As recorded in the result line.
    pub answer: TokenGrid,
    pub solved: Option<bool>,
    pub oracle: Option<bool>,
}

impl TracedRun {
    pub fn lines(&self) -> Vec<TraceLine> {
        let mut out = vec![TraceLine::Run {
            run: self.run.clone(),
            instance: self.instance,
            point: self.point,
            fold: self.fold,
            seed: self.seed,
            mode: self.mode,
            classes: self.classes,
            config: self.config.clone(),
        }];
        for s in &self.trace.steps {
            out.push(TraceLine::Step {
                run: self.run.clone(),
                n: s.step,
                log_weights: s.log_weights.clone(),
                scores: s.scores.clone(),
                ess_ratio: s.ess_ratio,
                resampled: s.resampled,
                ancestors: s.ancestors.clone(),
                answers: s.answers.iter().map(TokenGrid::to_token_string).collect(),
                inner_deviation: s.inner_deviation.clone(),
                degenerate: s.degenerate,
            });
        }
        out.push(TraceLine::Result {
            run: self.run.clone(),
            answer: self.answer.to_token_string(),
            solved: self.solved,
            oracle: self.oracle,
        });
        out
    }
}

pub fn write_traces(path: &Path, runs: &[TracedRun]) -> Result<()> {
    let mut out = open_writer(path)?;
    for r in runs {
        for line in r.lines() {
            write_line(&mut *out, path, &line)?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a trace file's text. Every run must open with a `run` line, carry
/// consecutive steps, and close with a `result` line.
pub fn parse_traces(text: &str) -> Result<Vec<TracedRun>> {
    let mut runs = Vec::new();
    let mut open: Option<TracedRun> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::parse(format!("trace line {}: {m}", i + 1));
        let rec: TraceLine = serde_json::from_str(line).map_err(|e| err(&e.to_string()))?;
        match rec {
            TraceLine::Run {
                run,
                instance,
                point,
                fold,
                seed,
                mode,
                classes,
                config,
            } => {
                if open.is_some() {
                    return Err(err("run opened before the previous one closed"));
                }
                if classes == 0 {
                    return Err(err("class count must be positive"));
                }
                open = Some(TracedRun {
                    trace: RunTrace {
                        task_id: instance,
                        steps: Vec::new(),
                    },
                    run,
                    instance,
                    point,
                    fold,
                    seed,
                    mode,
                    classes,
                    config,
                    answer: TokenGrid::new(Vec::new(), classes.max(1))?,
                    solved: None,
                    oracle: None,
                });
            }
            TraceLine::Step {
                run,
                n,
                log_weights,
                scores,
                ess_ratio,
                resampled,
                ancestors,
                answers,
                inner_deviation,
                degenerate,
            } => {
                let cur = open.as_mut().ok_or_else(|| err("step outside a run"))?;
                if run != cur.run || n != cur.trace.steps.len() + 1 {
                    return Err(err("step out of sequence"));
                }
                let s = answers.len();
                if s == 0 || log_weights.len() != s || scores.len() != s {
                    return Err(err("per-particle fields disagree in length"));
                }
                if ancestors.is_some() != resampled {
                    return Err(err("ancestors present iff resampled"));
                }
                if ancestors.as_ref().is_some_and(|a| a.len() != s || a.iter().any(|&j| j >= s)) {
                    return Err(err("ancestor index out of range"));
                }
                if log_weights.iter().any(|l| l.is_nan() || *l > 0.0) || scores.iter().any(|q| q.is_nan()) {
                    return Err(err("invalid weight or score"));
                }
                let answers = answers
                    .iter()
                    .map(|a| TokenGrid::parse_token_string(a, cur.classes))
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| err(&e.to_string()))?;
                let len = cur.trace.steps.first().map_or(answers[0].len(), |s| s.answers[0].len());
                if answers.iter().any(|a| a.len() != len) {
                    return Err(err("answers differ in length"));
                }
                if inner_deviation.as_ref().is_some_and(|d| d.len() != s) {
                    return Err(err("inner deviations per particle"));
                }
                cur.trace.steps.push(StepRecord {
                    step: n,
                    scores,
                    log_weights,
                    ess_ratio,
                    resampled,
                    ancestors,
                    answers,
                    inner_deviation,
                    degenerate,
                });
            }
            TraceLine::Result {
                run,
                answer,
                solved,
                oracle,
            } => {
                let mut cur = open.take().ok_or_else(|| err("result outside a run"))?;
                if run != cur.run {
                    return Err(err("result for a different run"));
                }
                if cur.trace.steps.is_empty() {
                    return Err(err("run without steps"));
                }
                cur.answer = TokenGrid::parse_token_string(&answer, cur.classes).map_err(|e| err(&e.to_string()))?;
                if cur.answer.len() != cur.trace.steps[0].answers[0].len() {
                    return Err(err("answer length differs from the steps"));
                }
                cur.solved = solved;
                cur.oracle = oracle;
                runs.push(cur);
            }
        }
    }
    if open.is_some() {
        return Err(Error::parse("trace ends inside a run"));
    }
    Ok(runs)
}

pub fn read_traces(path: &Path) -> Result<Vec<TracedRun>> {
    parse_traces(&read_to_string(path)?)
}

// ---------------------------------------------------------------- summary

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryRow {
    pub point: usize,
    pub sigma: f64,
    pub beta: f64,
    pub particles: usize,
    pub tau_ess: f64,
    pub resample: bool,
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub split: String,
    pub instances: usize,
    pub cells: usize,
    pub deterministic_mean: Option<f64>,
    pub deterministic_sd: Option<f64>,
    pub unguided_mean: Option<f64>,
    pub unguided_sd: Option<f64>,
    pub oracle_mean: Option<f64>,
    pub oracle_sd: Option<f64>,
    pub guided_mean: Option<f64>,
    pub guided_sd: Option<f64>,
}

pub fn summary_to_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::parse(e.to_string()))?;
    }
    if rows.is_empty() {
        // header only
        return Ok(SUMMARY_HEADER.join(",") + "\n");
    }
    let bytes = w.into_inner().map_err(|e| Error::parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::parse(e.to_string()))
}

const SUMMARY_HEADER: [&str; 19] = [
    "point",
    "sigma",
    "beta",
    "particles",
    "tau_ess",
    "resample",
    "outer_steps",
    "inner_steps",
    "split",
    "instances",
    "cells",
    "deterministic_mean",
    "deterministic_sd",
    "unguided_mean",
    "unguided_sd",
    "oracle_mean",
    "oracle_sd",
    "guided_mean",
    "guided_sd",
];

pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| Error::parse(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != SUMMARY_HEADER {
        return Err(Error::parse("unexpected summary header"));
    }
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<SummaryRow>, _>>()
        .map_err(|e| Error::parse(e.to_string()))?;
    for row in &rows {
        let rates = [
            row.deterministic_mean,
            row.unguided_mean,
            row.oracle_mean,
            row.guided_mean,
        ];
        if rates.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::parse(format!("rate outside [0, 1] at point {}", row.point)));
        }
    }
    Ok(rows)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
