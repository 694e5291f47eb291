//! Binary checkpoint format.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic   "GFB1" (4 bytes)
//! version u32 (currently 1)
//! arch    family tag u8 + family-specific u32 sizes
//! bits    L, r_W[L], r_X[L]            (current allocation)
//! state   parameter tensors in model order, then batch-norm stats
//! v       current log-precision vector (f64s)
//! best    optional best-so-far block (state + v + bits + objective)
//! rng     master seed u64 + stream-state table
//!         (tag u32, seed[32], word_pos u128, stream u64)
//! counters rounds_completed u32, epoch u64, step u64
//! crc     CRC-32 of every preceding byte
//! ```
//!
//! The checksum is verified before anything is decoded; a version or
//! magic mismatch is a hard error.

use crate::error::{Error, Result};
use crate::network::{build_model, Arch, Model, ModelState};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GFB1";
pub const VERSION: u32 = 1;

/// Saved state of one named RNG stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStreamState {
    pub tag: u32,
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestRecord {
    pub state: ModelState,
    pub v: Vec<f64>,
    pub bits: (Vec<u32>, Vec<u32>),
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Arch,
    pub bits: (Vec<u32>, Vec<u32>),
    pub state: ModelState,
    pub v: Vec<f64>,
    pub best: Option<BestRecord>,
    pub master_seed: u64,
    pub rng_states: Vec<RngStreamState>,
    pub rounds_completed: u32,
    pub epoch: u64,
    pub step: u64,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint describes: architecture, then
    /// weights, alphas, running stats, and the stored bit allocation.
    pub fn instantiate_model(&self) -> Result<Model> {
        let mut model = build_model(&self.arch, self.master_seed)?;
        model.load_state(&self.state)?;
        model.set_bit_allocation(&self.bits.0, &self.bits.1)?;
        Ok(model)
    }
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    write_arch(&mut w, &ckpt.arch);
    write_bits(&mut w, &ckpt.bits);
    write_state(&mut w, &ckpt.state);
    write_f64s(&mut w, &ckpt.v);
    match &ckpt.best {
        None => w.u8(0),
        Some(b) => {
            w.u8(1);
            write_state(&mut w, &b.state);
            write_f64s(&mut w, &b.v);
            write_bits(&mut w, &b.bits);
            w.f64(b.objective);
        }
    }
    w.u64(ckpt.master_seed);
    w.u32(ckpt.rng_states.len() as u32);
    for r in &ckpt.rng_states {
        w.u32(r.tag);
        w.bytes(&r.seed);
        w.bytes(&r.word_pos.to_le_bytes());
        w.u64(r.stream);
    }
    w.u32(ckpt.rounds_completed);
    w.u64(ckpt.epoch);
    w.u64(ckpt.step);
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.buf
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "checkpoint truncated".into(),
        });
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Format {
            offset: payload.len() as u64,
            msg: format!("checksum mismatch: stored {stored:08x}, computed {computed:08x}"),
        });
    }
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}"),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version} (expected {VERSION})"),
        });
    }
    let arch = read_arch(&mut r)?;
    let bits = read_bits(&mut r)?;
    let state = read_state(&mut r)?;
    let v = read_f64s(&mut r)?;
    let best = match r.u8()? {
        0 => None,
        1 => {
            let state = read_state(&mut r)?;
            let v = read_f64s(&mut r)?;
            let bits = read_bits(&mut r)?;
            let objective = r.f64()?;
            Some(BestRecord {
                state,
                v,
                bits,
                objective,
            })
        }
        other => {
            return Err(r.fail(format!("bad best-record flag {other}")));
        }
    };
    let master_seed = r.u64()?;
    let n_rng = r.u32()? as usize;
    let mut rng_states = Vec::with_capacity(n_rng);
    for _ in 0..n_rng {
        let tag = r.u32()?;
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let stream = r.u64()?;
        rng_states.push(RngStreamState {
            tag,
            seed,
            word_pos,
            stream,
        });
    }
    let rounds_completed = r.u32()?;
    let epoch = r.u64()?;
    let step = r.u64()?;
    if r.pos != r.buf.len() {
        return Err(r.fail(format!("{} trailing bytes", r.buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        arch,
        bits,
        state,
        v,
        best,
        master_seed,
        rng_states,
        rounds_completed,
        epoch,
        step,
    })
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: String) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg,
        }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!("need {n} bytes, have {}", self.buf.len() - self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize32(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
}

fn write_arch(w: &mut Writer, arch: &Arch) {
    match arch {
        Arch::Mlp {
            input,
            hidden,
            hidden_layers,
            classes,
        } => {
            w.u8(1);
            for v in [input, hidden, hidden_layers, classes] {
                w.u32(*v as u32);
            }
        }
        Arch::CnnSmall {
            input_shape,
            channels,
            classes,
        } => {
            w.u8(2);
            for v in input_shape {
                w.u32(*v as u32);
            }
            for v in channels {
                w.u32(*v as u32);
            }
            w.u32(*classes as u32);
        }
        Arch::ResnetTiny {
            input_shape,
            width,
            blocks,
            classes,
        } => {
            w.u8(3);
            for v in input_shape {
                w.u32(*v as u32);
            }
            w.u32(*width as u32);
            w.u32(*blocks as u32);
            w.u32(*classes as u32);
        }
    }
}

fn read_arch(r: &mut Reader) -> Result<Arch> {
    match r.u8()? {
        1 => Ok(Arch::Mlp {
            input: r.usize32()?,
            hidden: r.usize32()?,
            hidden_layers: r.usize32()?,
            classes: r.usize32()?,
        }),
        2 => Ok(Arch::CnnSmall {
            input_shape: [r.usize32()?, r.usize32()?, r.usize32()?],
            channels: [r.usize32()?, r.usize32()?, r.usize32()?, r.usize32()?],
            classes: r.usize32()?,
        }),
        3 => Ok(Arch::ResnetTiny {
            input_shape: [r.usize32()?, r.usize32()?, r.usize32()?],
            width: r.usize32()?,
            blocks: r.usize32()?,
            classes: r.usize32()?,
        }),
        other => Err(r.fail(format!("unknown architecture tag {other}"))),
    }
}

fn write_bits(w: &mut Writer, bits: &(Vec<u32>, Vec<u32>)) {
    w.u32(bits.0.len() as u32);
    for b in bits.0.iter().chain(&bits.1) {
        w.u32(*b);
    }
}

fn read_bits(r: &mut Reader) -> Result<(Vec<u32>, Vec<u32>)> {
    let l = r.usize32()?;
    let mut r_w = Vec::with_capacity(l);
    let mut r_x = Vec::with_capacity(l);
    for _ in 0..l {
        r_w.push(r.u32()?);
    }
    for _ in 0..l {
        r_x.push(r.u32()?);
    }
    Ok((r_w, r_x))
}

fn write_state(w: &mut Writer, state: &ModelState) {
    w.u32(state.params.len() as u32);
    for p in &state.params {
        write_f64s(w, p);
    }
    w.u32(state.bn_stats.len() as u32);
    for (mean, var) in &state.bn_stats {
        write_f64s(w, mean);
        write_f64s(w, var);
    }
}

fn read_state(r: &mut Reader) -> Result<ModelState> {
    let n = r.usize32()?;
    let mut params = Vec::with_capacity(n);
    for _ in 0..n {
        params.push(read_f64s(r)?);
    }
    let n_bn = r.usize32()?;
    let mut bn_stats = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let mean = read_f64s(r)?;
        let var = read_f64s(r)?;
        bn_stats.push((mean, var));
    }
    Ok(ModelState { params, bn_stats })
}

fn write_f64s(w: &mut Writer, xs: &[f64]) {
    w.u32(xs.len() as u32);
    for x in xs {
        w.f64(*x);
    }
}

fn read_f64s(r: &mut Reader) -> Result<Vec<f64>> {
    let n = r.usize32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.f64()?);
    }
    Ok(out)
}
