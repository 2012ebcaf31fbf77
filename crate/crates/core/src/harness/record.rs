//! Run records and their on-disk layout.
//!
//! A run directory holds:
//!
//! - `run.json`: config, seed, wall time, eval-data fingerprint and (for
//!   JTT) the frozen error set;
//! - `metrics.jsonl`: one [`EpochMetrics`] object per line;
//! - `summary.csv`: per-epoch overall / worst-group / per-group accuracy;
//! - `params.bin`: the final parameters (see [`encode_params`]).
//!
//! Floats go through shortest round-trip formatting, so
//! save → load → save reproduces every file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::EpochMetrics;
use crate::baselines::ErrorSet;
use crate::diffmodel::ParamVector;
use crate::error::{Error, Result};

const PARAMS_MAGIC: &[u8; 8] = b"RSATPRM1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub final_params: ParamVector,
    /// Seconds. The only field that varies between identical runs.
    pub wall_time: f64,
    /// Fingerprint of the evaluation split, used to refuse mixing runs.
    pub eval_fingerprint: String,
    pub jtt_error_set: Option<ErrorSet>,
}

#[derive(Serialize, Deserialize)]
struct RunHeader {
    config: TrainConfig,
    seed: u64,
    wall_time: f64,
    eval_fingerprint: String,
    jtt_error_set: Option<ErrorSet>,
}

impl RunRecord {
    pub fn label(&self) -> String {
        self.config.label()
    }

    pub fn final_metrics(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }

    /// Copy with the wall time zeroed, for comparing runs.
    pub fn without_timing(&self) -> RunRecord {
        RunRecord {
            wall_time: 0.0,
            ..self.clone()
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = RunHeader {
            config: self.config.clone(),
            seed: self.seed,
            wall_time: self.wall_time,
            eval_fingerprint: self.eval_fingerprint.clone(),
            jtt_error_set: self.jtt_error_set.clone(),
        };
        let mut run = serde_json::to_string_pretty(&header)?;
        run.push('\n');
        write(&dir.join("run.json"), run.as_bytes())?;

        let mut lines = String::new();
        for m in &self.epochs {
            lines.push_str(&serde_json::to_string(m)?);
            lines.push('\n');
        }
        write(&dir.join("metrics.jsonl"), lines.as_bytes())?;
        write(&dir.join("summary.csv"), self.summary_csv().as_bytes())?;
        write(
            &dir.join("params.bin"),
            &encode_params(&self.config.model.fingerprint(), &self.final_params),
        )
    }

    pub fn load(dir: &Path) -> Result<RunRecord> {
        let header: RunHeader = serde_json::from_slice(&read(&dir.join("run.json"))?)?;
        let metrics_path = dir.join("metrics.jsonl");
        let text = String::from_utf8(read(&metrics_path)?)
            .map_err(|e| Error::Data(format!("{}: {e}", metrics_path.display())))?;
        let epochs = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<EpochMetrics>, _>>()?;
        let (fingerprint, final_params) = decode_params(&read(&dir.join("params.bin"))?)?;
        if fingerprint != header.config.model.fingerprint() {
            return Err(Error::Data(format!(
                "{}: parameters are for `{fingerprint}`, config describes `{}`",
                dir.display(),
                header.config.model.fingerprint()
            )));
        }
        Ok(RunRecord {
            config: header.config,
            seed: header.seed,
            epochs,
            final_params,
            wall_time: header.wall_time,
            eval_fingerprint: header.eval_fingerprint,
            jtt_error_set: header.jtt_error_set,
        })
    }

    fn summary_csv(&self) -> String {
        let groups: Vec<usize> = self
            .epochs
            .iter()
            .flat_map(|m| m.per_group_accuracy.keys().copied())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut out = String::from("epoch,overall_accuracy,worst_group_accuracy");
        for g in &groups {
            out.push_str(&format!(",group_{g}_accuracy"));
        }
        out.push('\n');
        for m in &self.epochs {
            out.push_str(&format!(
                "{},{:?},{:?}",
                m.epoch, m.overall_accuracy, m.worst_group_accuracy
            ));
            for g in &groups {
                match m.per_group_accuracy.get(g) {
                    Some(a) => out.push_str(&format!(",{a:?}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `RSATPRM1`, u32 LE fingerprint length, fingerprint bytes, u64 LE value
/// count, then the values as f64 LE.
pub fn encode_params(model_fingerprint: &str, params: &ParamVector) -> Vec<u8> {
    let fp = model_fingerprint.as_bytes();
    let mut out = Vec::with_capacity(8 + 4 + fp.len() + 8 + 8 * params.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(fp.len() as u32).to_le_bytes());
    out.extend_from_slice(fp);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<(String, ParamVector)> {
    let bad = |msg: &str| Error::Data(format!("parameter file: {msg}"));
    let rest = bytes
        .strip_prefix(PARAMS_MAGIC.as_slice())
        .ok_or_else(|| bad("bad magic"))?;
    let (len, rest) = rest
        .split_first_chunk::<4>()
        .ok_or_else(|| bad("truncated"))?;
    let len = u32::from_le_bytes(*len) as usize;
    if rest.len() < len {
        return Err(bad("truncated"));
    }
    let (fp, rest) = rest.split_at(len);
    let fp = String::from_utf8(fp.to_vec()).map_err(|_| bad("fingerprint is not utf-8"))?;
    let (count, rest) = rest
        .split_first_chunk::<8>()
        .ok_or_else(|| bad("truncated"))?;
    let count = u64::from_le_bytes(*count) as usize;
    if rest.len() != count.checked_mul(8).ok_or_else(|| bad("bad count"))? {
        return Err(bad("value count does not match file size"));
    }
    let values = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((fp, ParamVector::from_vec(values)))
}
