//! Binary parameter files and resume state.
//!
//! A parameter file starts with the magic `RLQ1`, then a dimension table
//! (`u32` group count; per group a `u32` name length, the UTF-8 name, a
//! `u32` rank and `u64` dims), then every group's values as little-endian
//! `f64` in table order. Model checkpoints list `<layer>.weight` and
//! `<layer>.bias` for each layer in declaration order and carry a JSON
//! sidecar (`<file>.json`) with the architecture.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rlq_core::model::{Layer, LayerParams, ModelConfig, ModelParams};
use rlq_core::optim::{Adam, Moments};
use rlq_core::tensor::Tensor;
use rlq_core::trainer::{Best, EvalSummary, TrainState};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{read_json, write_json};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLQ1";

pub fn write_groups(path: &Path, groups: &[(String, &Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(groups.len() as u32).to_le_bytes())?;
    for (name, t) in groups {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in groups {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::runtime(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize)
    }
}

pub fn read_groups(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let buf = fs::read(path).map_err(|e| Error::runtime(format!("{}: {e}", path.display())))?;
    let mut c = Cursor {
        buf: &buf,
        pos: 0,
        path,
    };
    if c.take(4)? != MAGIC {
        return Err(Error::runtime(format!(
            "{}: not an RLQ1 file",
            path.display()
        )));
    }
    let n = c.u32()?;
    let mut table = Vec::with_capacity(n);
    for _ in 0..n {
        let len = c.u32()?;
        let name = String::from_utf8(c.take(len)?.to_vec())
            .map_err(|_| Error::runtime(format!("{}: bad group name", path.display())))?;
        let rank = c.u32()?;
        let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let mut out = Vec::with_capacity(n);
    for (name, dims) in table {
        let len: usize = dims.iter().product();
        let raw = c.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::runtime(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::runtime(format!(
            "{}: trailing bytes",
            path.display()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: String,
    pub model: ModelConfig,
    pub frozen: Vec<String>,
    pub parameters: usize,
    pub checksum: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    let mut groups = Vec::with_capacity(2 * Layer::ALL.len());
    for l in Layer::ALL {
        let p = params.layer(l);
        groups.push((format!("{}.weight", l.name()), &p.weight));
        groups.push((format!("{}.bias", l.name()), &p.bias));
    }
    write_groups(path, &groups)?;
    let side = Sidecar {
        format: "RLQ1".into(),
        model: params.config.clone(),
        frozen: Layer::ALL
            .iter()
            .filter(|l| params.layer(**l).frozen)
            .map(|l| l.name().to_string())
            .collect(),
        parameters: params.num_parameters(),
        checksum: params.checksum(),
    };
    write_json(&sidecar_path(path), &side)
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    let side: Sidecar = read_json(&sidecar_path(path))?;
    let groups = read_groups(path)?;
    if groups.len() != 2 * Layer::ALL.len() {
        return Err(Error::runtime(format!(
            "{}: {} groups, expected {}",
            path.display(),
            groups.len(),
            2 * Layer::ALL.len()
        )));
    }
    let mut it = groups.into_iter();
    let mut layers = Vec::with_capacity(Layer::ALL.len());
    for l in Layer::ALL {
        let (wn, weight) = it.next().expect("counted");
        let (bn, bias) = it.next().expect("counted");
        let (fi, fo) = side.model.layer_shape(l);
        if wn != format!("{}.weight", l.name())
            || bn != format!("{}.bias", l.name())
            || weight.shape() != [fi, fo]
            || bias.shape() != [1, fo]
        {
            return Err(Error::runtime(format!(
                "{}: group {wn} does not match the architecture",
                path.display()
            )));
        }
        layers.push(LayerParams {
            weight,
            bias,
            frozen: side.frozen.iter().any(|f| f == l.name()),
        });
    }
    let params = ModelParams {
        config: side.model,
        layers,
    };
    if params.checksum() != side.checksum {
        return Err(Error::runtime(format!(
            "{}: checksum mismatch",
            path.display()
        )));
    }
    Ok(params)
}

/// Scalar part of the resume state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMeta {
    pub epoch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub steps: Vec<u64>,
    pub best_epoch: Option<usize>,
    pub best_summary: Option<EvalSummary>,
}

pub const STATE_META: &str = "state.json";
pub const STATE_STUDENT: &str = "student.rlq";
pub const STATE_MOMENTS: &str = "moments.rlq";
pub const BEST: &str = "best.rlq";

/// Writes everything needed to continue a run into `dir`. The best
/// parameters are only rewritten when `best_changed`.
pub fn save_state(dir: &Path, state: &TrainState, best_changed: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_params(&dir.join(STATE_STUDENT), &state.student)?;
    let mut groups = Vec::new();
    for (l, m) in Layer::ALL.iter().zip(&state.optimizer.moments) {
        groups.push((format!("{}.m_w", l.name()), &m.m_w));
        groups.push((format!("{}.v_w", l.name()), &m.v_w));
        groups.push((format!("{}.m_b", l.name()), &m.m_b));
        groups.push((format!("{}.v_b", l.name()), &m.v_b));
    }
    write_groups(&dir.join(STATE_MOMENTS), &groups)?;
    if best_changed {
        if let Some(b) = &state.best {
            save_params(&dir.join(BEST), &b.params)?;
        }
    }
    let opt = &state.optimizer;
    let meta = StateMeta {
        epoch: state.epoch,
        beta1: opt.beta1,
        beta2: opt.beta2,
        eps: opt.eps,
        base_lr: opt.base_lr,
        steps: opt.moments.iter().map(|m| m.steps).collect(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_summary: state.best.as_ref().map(|b| b.summary.clone()),
    };
    // Written last: its presence marks a complete state.
    write_json(&dir.join(STATE_META), &meta)
}

pub fn load_state(dir: &Path) -> Result<TrainState> {
    let meta: StateMeta = read_json(&dir.join(STATE_META))?;
    let student = load_params(&dir.join(STATE_STUDENT))?;
    let groups = read_groups(&dir.join(STATE_MOMENTS))?;
    if groups.len() != 4 * Layer::ALL.len() || meta.steps.len() != Layer::ALL.len() {
        return Err(Error::runtime("optimizer state does not match the model"));
    }
    let mut it = groups.into_iter().map(|(_, t)| t);
    let moments = meta
        .steps
        .iter()
        .map(|&steps| Moments {
            m_w: it.next().expect("counted"),
            v_w: it.next().expect("counted"),
            m_b: it.next().expect("counted"),
            v_b: it.next().expect("counted"),
            steps,
        })
        .collect();
    let best = match (meta.best_epoch, meta.best_summary) {
        (Some(epoch), Some(summary)) => Some(Best {
            epoch,
            summary,
            params: load_params(&dir.join(BEST))?,
        }),
        _ => None,
    };
    Ok(TrainState {
        student,
        optimizer: Adam {
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            base_lr: meta.base_lr,
            moments,
        },
        epoch: meta.epoch,
        best,
    })
}
