//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "LPRIORCK"
//! version    u32 LE
//! header     u32 LE length + JSON (model config, optimizer config, step, rng position)
//! tensors    u32 LE count, then per tensor:
//!              u16 LE name length, UTF-8 name, u8 rank, rank × u64 LE dims,
//!              row-major f32 LE values
//! checksum   u32 LE CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::Parameters;
use super::train::{OptimConfig, TrainState};
use super::{ModelConfig, ModelError};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LPRIORCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    optim: OptimConfig,
    step: u64,
    rng_seed: [u8; 32],
    rng_stream: u64,
    /// u128 word position, as decimal text.
    rng_word_pos: String,
}

fn malformed(what: &str) -> ModelError {
    ModelError::VersionMismatch(format!("malformed checkpoint: {what}"))
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_bytes(state: &TrainState<f32>) -> Vec<u8> {
    let header = Header {
        model: state.params.config.clone(),
        optim: state.optim.clone(),
        step: state.step,
        rng_seed: state.rng.get_seed(),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + 12 * state.params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let specs = state.params.tensors();
    out.extend_from_slice(&(specs.len() as u32 + 2).to_le_bytes());
    for spec in specs {
        put_tensor(
            &mut out,
            &spec.name,
            &spec.shape,
            &state.params.data[spec.range()],
        );
    }
    put_tensor(&mut out, "adam.m", &[state.m.len()], &state.m);
    put_tensor(&mut out, "adam.v", &[state.v.len()], &state.v);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_checkpoint(state: &TrainState<f32>, path: &Path) -> Result<(), ModelError> {
    fs::write(path, checkpoint_bytes(state))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| malformed("unexpected end"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState<f32>, ModelError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 {
        return Err(ModelError::ChecksumMismatch);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ModelError::VersionMismatch("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch(format!(
            "file version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let hlen = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| malformed(&e.to_string()))?;
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u16()? as usize;
        let name =
            String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| malformed("tensor name"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| malformed("tensor size"))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, shape, values));
    }
    if r.pos != body.len() {
        return Err(malformed("trailing bytes"));
    }

    let probe = Parameters::<f32>::init(&ModelConfig {
        seed: 0,
        ..header.model.clone()
    })?;
    let specs = probe.tensors();
    if tensors.len() != specs.len() + 2 {
        return Err(malformed("tensor count"));
    }
    let mut data = Vec::with_capacity(probe.len());
    for (spec, (name, shape, values)) in specs.iter().zip(&tensors) {
        if &spec.name != name || &spec.shape != shape {
            return Err(malformed(&format!(
                "tensor {name} does not match the configuration"
            )));
        }
        data.extend_from_slice(values);
    }
    let params = Parameters::from_parts(&header.model, data)?;
    let take_moment = |(name, _, values): &(String, Vec<usize>, Vec<f32>), want: &str| {
        if name != want || values.len() != params.len() {
            Err(malformed(want))
        } else {
            Ok(values.clone())
        }
    };
    let m = take_moment(&tensors[specs.len()], "adam.m")?;
    let v = take_moment(&tensors[specs.len() + 1], "adam.v")?;
    let mut rng = ChaCha8Rng::from_seed(header.rng_seed);
    rng.set_stream(header.rng_stream);
    rng.set_word_pos(
        header
            .rng_word_pos
            .parse()
            .map_err(|_| malformed("rng position"))?,
    );
    Ok(TrainState {
        params,
        optim: header.optim,
        m,
        v,
        step: header.step,
        rng,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState<f32>, ModelError> {
    checkpoint_from_bytes(&fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it was trained for `vocab_size` tokens.
pub fn load_checkpoint_expecting(
    path: &Path,
    vocab_size: usize,
) -> Result<TrainState<f32>, ModelError> {
    let state = load_checkpoint(path)?;
    let found = state.params.config.vocab_size;
    if found != vocab_size {
        return Err(ModelError::VersionMismatch(format!(
            "checkpoint vocabulary has {found} tokens, expected {vocab_size}"
        )));
    }
    Ok(state)
}
