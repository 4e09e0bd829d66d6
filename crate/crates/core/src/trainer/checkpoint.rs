//! Binary training checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, JSON header,
//! then every float as little-endian `f64`, then a CRC-32 of all preceding
//! bytes. Floats live in the payload rather than the header so they
//! round-trip exactly.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdamMoments, Model, TrainState};
use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::ode::OdeSystem;

const MAGIC: &[u8; 8] = b"VIDPHYS\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: EncoderDims,
    system: OdeSystem,
    learnable: usize,
    step: u64,
    epoch: usize,
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let header = Header {
        dims: state.model.encoder.dims(),
        system: state.model.system.clone(),
        learnable: state.gamma_init.len(),
        step: state.step,
        epoch: state.epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let mut put = |xs: &[f64]| {
        for x in xs {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    };
    for t in state.model.encoder.tensors() {
        put(t);
    }
    put(&state.model.system.gammas());
    put(&state.gamma_init);
    put(&state.encoder_moments.m);
    put(&state.encoder_moments.v);
    put(&state.gamma_moments.m);
    put(&state.gamma_moments.v);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("bad length".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() + 4 + 8 + 4 {
        return Err(Error::Checkpoint("file is too short".into()));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupt".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let header: Header =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let EncoderDims {
        input,
        hidden1,
        hidden2,
        output,
    } = header.dims;
    let mat = |r: &mut Reader, rows: usize, cols: usize| -> Result<Array2<f64>> {
        Ok(Array2::from_shape_vec((rows, cols), r.floats(rows * cols)?).expect("matching length"))
    };
    let vec = |r: &mut Reader, n: usize| -> Result<Array1<f64>> { Ok(Array1::from(r.floats(n)?)) };
    let encoder = EncoderParams {
        w1: mat(&mut r, hidden1, input)?,
        b1: vec(&mut r, hidden1)?,
        w2: mat(&mut r, hidden2, hidden1)?,
        b2: vec(&mut r, hidden2)?,
        w3: mat(&mut r, output, hidden2)?,
        b3: vec(&mut r, output)?,
    };
    let p = header.learnable;
    let mut system = header.system;
    if system.learnable_names().len() != p {
        return Err(Error::Checkpoint("learnable parameter count disagrees with system".into()));
    }
    system.set_gammas(&r.floats(p)?)?;
    let gamma_init = r.floats(p)?;
    let n = encoder.num_params();
    let encoder_moments = AdamMoments {
        m: r.floats(n)?,
        v: r.floats(n)?,
    };
    let gamma_moments = AdamMoments {
        m: r.floats(p)?,
        v: r.floats(p)?,
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(TrainState {
        model: Model { encoder, system },
        gamma_init,
        encoder_moments,
        gamma_moments,
        step: header.step,
        epoch: header.epoch,
    })
}
