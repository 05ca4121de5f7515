use std::fmt::Write as _;
use std::path::Path;

use super::config::TrainConfig;
use super::step::{RunningLoss, TrainState};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::{AdamW, ParamStore};
use crate::objectives::LossReport;

const MAGIC: &str = "XWINCKPT1";

/// Tensor groups stored in a checkpoint, in file order.
const GROUPS: [&str; 4] = ["student", "teacher", "adam_m", "adam_v"];

fn bits(x: f64) -> String {
    format!("{:016x}", x.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Checkpoint(format!("bad float field {s:?}")))
}

fn group<'a>(state: &'a TrainState, name: &str) -> &'a ParamStore {
    match name {
        "student" => &state.student,
        "teacher" => &state.teacher,
        "adam_m" => &state.opt.m,
        _ => &state.opt.v,
    }
}

/// Serialized checkpoint: a text header line, a text manifest (config
/// snapshot, counters, one line per tensor with its byte offset) and a
/// little-endian f64 blob.
pub fn encode_checkpoint(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let mut manifest = String::new();
    for line in cfg.to_text().lines() {
        let _ = writeln!(manifest, "config {line}");
    }
    let _ = writeln!(manifest, "step {}", state.step);
    let _ = writeln!(
        manifest,
        "adam {} {} {} {}",
        state.opt.t,
        bits(state.opt.beta1),
        bits(state.opt.beta2),
        bits(state.opt.eps)
    );
    let r = &state.running;
    let s = &r.sum;
    let _ = writeln!(
        manifest,
        "running {} {} {} {} {} {} {} {}",
        r.count,
        bits(s.infonce),
        bits(s.affinity),
        bits(s.align),
        bits(s.mim),
        bits(s.cls),
        bits(s.domain),
        bits(s.total)
    );
    let mut blob = Vec::new();
    for name in GROUPS {
        for (k, t) in &group(state, name).tensors {
            let _ = writeln!(manifest, "tensor {name} {k} {} {} f64 {}", t.rows, t.cols, blob.len());
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut out = format!("{MAGIC} {} {}\n", manifest.len(), blob.len()).into_bytes();
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&blob);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(TrainConfig, TrainState)> {
    let err = |m: String| Error::Checkpoint(m);
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| err("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| err("header is not text".into()))?;
    let mut h = header.split(' ');
    if h.next() != Some(MAGIC) {
        return Err(err(format!("bad magic in header {header:?}")));
    }
    let mut num = || -> Result<usize> {
        h.next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err(format!("bad header {header:?}")))
    };
    let (mlen, blen) = (num()?, num()?);
    let body = &bytes[nl + 1..];
    if body.len() != mlen + blen {
        return Err(err(format!(
            "expected {} bytes of manifest and blob, found {}",
            mlen + blen,
            body.len()
        )));
    }
    let manifest =
        std::str::from_utf8(&body[..mlen]).map_err(|_| err("manifest is not text".into()))?;
    let blob = &body[mlen..];

    let mut cfg_text = String::new();
    let mut step = None;
    let mut opt = AdamW::new();
    let mut running = RunningLoss::default();
    let mut stores: [ParamStore; 4] = Default::default();
    let mut cursor = 0usize;
    for line in manifest.lines() {
        let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
        let f: Vec<&str> = rest.split(' ').collect();
        let int = |s: &str| -> Result<u64> { s.parse().map_err(|_| err(format!("bad integer {s:?}"))) };
        match kind {
            "config" => {
                cfg_text.push_str(rest);
                cfg_text.push('\n');
            }
            "step" => step = Some(int(rest)?),
            "adam" if f.len() == 4 => {
                opt.t = int(f[0])?;
                opt.beta1 = unbits(f[1])?;
                opt.beta2 = unbits(f[2])?;
                opt.eps = unbits(f[3])?;
            }
            "running" if f.len() == 8 => {
                running.count = int(f[0])?;
                running.sum = LossReport {
                    infonce: unbits(f[1])?,
                    affinity: unbits(f[2])?,
                    align: unbits(f[3])?,
                    mim: unbits(f[4])?,
                    cls: unbits(f[5])?,
                    domain: unbits(f[6])?,
                    total: unbits(f[7])?,
                };
            }
            "tensor" if f.len() == 6 => {
                let gi = GROUPS
                    .iter()
                    .position(|g| *g == f[0])
                    .ok_or_else(|| err(format!("unknown tensor group {:?}", f[0])))?;
                let (rows, cols) = (int(f[2])? as usize, int(f[3])? as usize);
                if f[4] != "f64" {
                    return Err(err(format!("unsupported dtype {:?}", f[4])));
                }
                let offset = int(f[5])? as usize;
                if offset != cursor {
                    return Err(err(format!("tensor {} at offset {offset}, expected {cursor}", f[1])));
                }
                let end = offset + 8 * rows * cols;
                if end > blob.len() {
                    return Err(err(format!("tensor {} runs past the blob", f[1])));
                }
                let data = blob[offset..end]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect();
                if stores[gi].tensors.contains_key(f[1]) {
                    return Err(err(format!("tensor {} listed twice", f[1])));
                }
                stores[gi].insert(f[1], Tensor::from_vec(rows, cols, data));
                cursor = end;
            }
            _ => return Err(err(format!("unrecognized manifest line {line:?}"))),
        }
    }
    if cursor != blob.len() {
        return Err(err(format!("blob holds {} bytes, manifest covers {cursor}", blob.len())));
    }
    let cfg = TrainConfig::from_text(&cfg_text)?;
    let [student, teacher, m, v] = stores;
    opt.m = m;
    opt.v = v;
    let state = TrainState {
        student,
        teacher,
        opt,
        step: step.ok_or_else(|| err("missing step".into()))?,
        running,
    };
    for (k, t) in &state.teacher.tensors {
        match state.student.try_get(k) {
            Some(s) if s.shape() == t.shape() => {}
            _ => return Err(err(format!("teacher tensor {k} does not mirror the student"))),
        }
    }
    Ok((cfg, state))
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, encode_checkpoint(cfg, state))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainConfig, TrainState)> {
    decode_checkpoint(&std::fs::read(path)?)
}
