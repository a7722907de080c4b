//! Flat binary snapshots of backbones and heads.
//!
//! Layout (all integers and reals little-endian):
//!
//! ```text
//! magic  "LLSNAP\0\0"   8 bytes
//! version u32           currently 1
//! kind    u8            1 = backbone, 2 = head
//! header  kind-specific counts and tags
//! payload f64 values
//! ```

use std::fs;
use std::path::Path;

use crate::backbone::{Activation, MlpBackbone, Parameterization};
use crate::error::{Error, Result};
use crate::head::{HeadState, InitPolicy, Regularization};
use crate::linalg::Matrix;

const MAGIC: &[u8; 8] = b"LLSNAP\0\0";
const VERSION: u32 = 1;
const KIND_BACKBONE: u8 = 1;
const KIND_HEAD: u8 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        let mut w = Writer(MAGIC.to_vec());
        w.u32(VERSION);
        w.u8(kind);
        w
    }

    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], kind: u8) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Snapshot("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Snapshot(format!("unsupported version {version}")));
        }
        let got = r.u8()?;
        if got != kind {
            return Err(Error::Snapshot(format!("expected record kind {kind}, found {got}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Snapshot(format!("truncated record at byte {}", self.pos))),
        }
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

    fn count(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&c| c <= self.buf.len())
            .ok_or_else(|| Error::Snapshot(format!("implausible count {v}")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Snapshot("overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_backbone(bb: &MlpBackbone) -> Vec<u8> {
    let mut w = Writer::new(KIND_BACKBONE);
    w.u8(match bb.activation() {
        Activation::Relu => 0,
        Activation::Tanh => 1,
    });
    w.u8(match bb.parameterization() {
        Parameterization::Standard => 0,
        Parameterization::Ntk => 1,
    });
    w.u64(bb.layer_dims().len() as u64);
    for &d in bb.layer_dims() {
        w.u64(d as u64);
    }
    for (wm, b) in bb.weights().iter().zip(bb.biases()) {
        w.f64s(wm.data());
        w.f64s(b);
    }
    w.0
}

pub fn decode_backbone(buf: &[u8]) -> Result<MlpBackbone> {
    let mut r = Reader::open(buf, KIND_BACKBONE)?;
    let activation = match r.u8()? {
        0 => Activation::Relu,
        1 => Activation::Tanh,
        t => return Err(Error::Snapshot(format!("unknown activation tag {t}"))),
    };
    let parameterization = match r.u8()? {
        0 => Parameterization::Standard,
        1 => Parameterization::Ntk,
        t => return Err(Error::Snapshot(format!("unknown parameterization tag {t}"))),
    };
    let n = r.count()?;
    let dims = (0..n).map(|_| r.count()).collect::<Result<Vec<_>>>()?;
    if dims.len() < 2 {
        return Err(Error::Snapshot("backbone needs at least two layer widths".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in dims.windows(2) {
        let data = r.f64s(pair[0] * pair[1])?;
        weights.push(Matrix::from_vec(pair[1], pair[0], data)?);
        biases.push(r.f64s(pair[1])?);
    }
    r.finish()?;
    MlpBackbone::from_parts(weights, biases, activation, parameterization)
}

pub fn encode_head(head: &HeadState) -> Vec<u8> {
    let mut w = Writer::new(KIND_HEAD);
    w.u8(u8::from(head.has_bias));
    w.u8(match head.init_policy {
        InitPolicy::Zeros => 0,
        InitPolicy::Lecun => 1,
        InitPolicy::Xavier => 2,
        InitPolicy::He => 3,
    });
    let (tag, coef) = match head.reg {
        Regularization::Ridge { beta } => (0, beta),
        Regularization::Proximal { lambda } => (1, lambda),
    };
    w.u8(tag);
    w.f64s(&[coef]);
    w.u64(head.w.rows() as u64);
    w.u64(head.w.cols() as u64);
    w.f64s(head.w.data());
    w.0
}

pub fn decode_head(buf: &[u8]) -> Result<HeadState> {
    let mut r = Reader::open(buf, KIND_HEAD)?;
    let has_bias = match r.u8()? {
        0 => false,
        1 => true,
        t => return Err(Error::Snapshot(format!("bad bias flag {t}"))),
    };
    let init_policy = match r.u8()? {
        0 => InitPolicy::Zeros,
        1 => InitPolicy::Lecun,
        2 => InitPolicy::Xavier,
        3 => InitPolicy::He,
        t => return Err(Error::Snapshot(format!("unknown init tag {t}"))),
    };
    let tag = r.u8()?;
    let coef = r.f64()?;
    let reg = match tag {
        0 => Regularization::Ridge { beta: coef },
        1 => Regularization::Proximal { lambda: coef },
        t => return Err(Error::Snapshot(format!("unknown regularization tag {t}"))),
    }
    .validate()?;
    let rows = r.count()?;
    let cols = r.count()?;
    if has_bias && cols == 0 {
        return Err(Error::Snapshot("bias head with no columns".into()));
    }
    let w = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?)?;
    r.finish()?;
    Ok(HeadState {
        w,
        has_bias,
        init_policy,
        reg,
    })
}

pub fn save_backbone(path: impl AsRef<Path>, bb: &MlpBackbone) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_backbone(bb)).map_err(|e| Error::io(path, e))
}

pub fn load_backbone(path: impl AsRef<Path>) -> Result<MlpBackbone> {
    let path = path.as_ref();
    decode_backbone(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_head(path: impl AsRef<Path>, head: &HeadState) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_head(head)).map_err(|e| Error::io(path, e))
}

pub fn load_head(path: impl AsRef<Path>) -> Result<HeadState> {
    let path = path.as_ref();
    decode_head(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
