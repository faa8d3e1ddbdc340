//! Model checkpoints.
//!
//! Layout, little-endian, strings as `u32` length plus UTF-8 bytes:
//!
//! ```text
//! "SFDK"  u32 version
//! string  resolved configuration (key=value lines)
//! u32 × 6 corpus header: d_v, d_t, H, d_g, k, d_r
//! u32     word count, then each word
//! u32     tensor count, then (name, u32 rows, u32 cols, f64[rows*cols])*
//! u8      1 if optimizer state follows
//!   string  stage, u64 epoch, u64 step
//!   tensors first moments, then second moments, in parameter order
//! ```

use std::fs;
use std::path::Path;

use crate::config::{RunConfig, Stage};
use crate::data::bundle::{put_str, u32_field, Reader};
use crate::data::{CorpusHeader, Vocabulary};
use crate::error::{Error, Result};
use crate::model::SfdrModel;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SFDK";
const VERSION: u32 = 1;

/// Optimizer progress needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    /// Completed epochs in `stage`.
    pub epoch: u64,
    /// Optimizer steps taken in `stage`.
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub struct Checkpoint {
    pub model: SfdrModel,
    pub state: Option<TrainState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_str(out, name)?;
    out.extend_from_slice(&u32_field(t.rows(), "rows")?.to_le_bytes());
    out.extend_from_slice(&u32_field(t.cols(), "cols")?.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn read_tensor(r: &mut Reader<'_>) -> Result<(String, Tensor)> {
    let name = r.string("tensor name")?;
    let rows = r.u32("rows")? as usize;
    let cols = r.u32("cols")? as usize;
    let t = r.f64_tensor(rows, cols, &name)?;
    Ok((name, t))
}

pub fn encode_checkpoint(model: &SfdrModel, state: Option<&TrainState>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &model.config.to_text())?;
    for (_, v) in model.header.fields() {
        out.extend_from_slice(&u32_field(v, "header dimension")?.to_le_bytes());
    }
    let words = model.vocab.words();
    out.extend_from_slice(&u32_field(words.len(), "word count")?.to_le_bytes());
    for w in words {
        put_str(&mut out, w)?;
    }
    out.extend_from_slice(&u32_field(model.store.len(), "tensor count")?.to_le_bytes());
    for (name, t) in model.store.iter() {
        put_tensor(&mut out, name, t)?;
    }
    match state {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_str(&mut out, &s.stage.to_string())?;
            out.extend_from_slice(&s.epoch.to_le_bytes());
            out.extend_from_slice(&s.step.to_le_bytes());
            for (prefix, moments) in [("m", &s.m), ("v", &s.v)] {
                if moments.len() != model.store.len() {
                    return Err(Error::Shape(format!("{} optimizer moments for {} parameters", moments.len(), model.store.len())));
                }
                for ((name, _), t) in model.store.iter().zip(moments) {
                    put_tensor(&mut out, &format!("{prefix}.{name}"), t)?;
                }
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
    }
    let config = RunConfig::from_text(RunConfig::default(), &r.string("config")?)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32("header")? as usize;
    }
    let header = CorpusHeader { d_v: dims[0], d_t: dims[1], h: dims[2], d_g: dims[3], k: dims[4], d_r: dims[5] };
    let n_words = r.u32("word count")? as usize;
    let words = (0..n_words).map(|_| r.string("word")).collect::<Result<Vec<_>>>()?;
    let mut model = SfdrModel::new(&config, header, Vocabulary::from_words(words))?;

    let count = r.u32("tensor count")? as usize;
    if count != model.store.len() {
        return Err(r.error(format!("{count} tensors stored, architecture has {}", model.store.len())));
    }
    let mut tensors = model.store.tensors().to_vec();
    for _ in 0..count {
        let at = r.offset();
        let (name, t) = read_tensor(&mut r)?;
        let id = model.store.id(&name).ok_or_else(|| Error::Format { offset: at, msg: format!("unknown parameter {name}") })?;
        tensors[id.index()] = t;
    }
    model.store.set_tensors(tensors)?;

    let state = match r.u8("state flag")? {
        0 => None,
        1 => {
            let stage = r.string("stage")?.parse()?;
            let epoch = r.u64("epoch")?;
            let step = r.u64("step")?;
            let read_moments = |r: &mut Reader<'_>| -> Result<Vec<Tensor>> {
                (0..count).map(|_| read_tensor(r).map(|(_, t)| t)).collect()
            };
            let m = read_moments(&mut r)?;
            let v = read_moments(&mut r)?;
            Some(TrainState { stage, epoch, step, m, v })
        }
        f => return Err(r.error(format!("bad state flag {f}"))),
    };
    if !r.at_end() {
        return Err(r.error("trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { model, state })
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &SfdrModel, state: Option<&TrainState>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, state)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
