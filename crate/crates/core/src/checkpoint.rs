//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `LSEGCKPT`, `u32` version, the run config as text, epoch and
//! step counters, the trainer's RNG position, then parameter and buffer
//! records (`name`, rank, dims, f64 payload) and the Adam moments. Strings
//! and sequences carry a `u64` length prefix.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Named, ParamStore};
use crate::optim::Adam;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<Named>,
    pub buffers: Vec<Named>,
    pub adam: Adam,
}

fn strip(items: &[Named]) -> Vec<Named> {
    items
        .iter()
        .map(|n| Named {
            name: n.name.clone(),
            tensor: Tensor::from_vec(n.tensor.shape(), n.tensor.data().to_vec())
                .expect("shape already valid"),
        })
        .collect()
}

impl Checkpoint {
    pub fn capture(
        config_text: String,
        ps: &ParamStore,
        adam: &Adam,
        epoch: u64,
        step: u64,
        rng: RngState,
    ) -> Self {
        Self {
            config_text,
            epoch,
            step,
            rng,
            params: strip(ps.params()),
            buffers: strip(ps.buffers()),
            adam: adam.clone(),
        }
    }

    /// Copies the stored tensors into a store built for the same model.
    pub fn restore_into(&self, ps: &mut ParamStore) -> Result<()> {
        fn copy(dst: &mut [Named], src: &[Named], what: &str) -> Result<()> {
            if dst.len() != src.len() {
                return Err(Error::Checkpoint(format!(
                    "{what} count mismatch: checkpoint has {}, model has {}",
                    src.len(),
                    dst.len()
                )));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if d.name != s.name || d.tensor.shape() != s.tensor.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{what} {} {:?} does not match model {} {:?}",
                        s.name,
                        s.tensor.shape(),
                        d.name,
                        d.tensor.shape()
                    )));
                }
                d.tensor.data_mut().copy_from_slice(s.tensor.data());
                d.tensor.zero_grad();
            }
            Ok(())
        }
        copy(ps.params_mut(), &self.params, "parameter")?;
        copy(ps.buffers_mut(), &self.buffers, "buffer")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.bytes(self.config_text.as_bytes());
        w.u64(self.epoch);
        w.u64(self.step);
        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        for set in [&self.params, &self.buffers] {
            w.u64(set.len() as u64);
            for n in set {
                w.bytes(n.name.as_bytes());
                w.u32(n.tensor.shape().len() as u32);
                for &d in n.tensor.shape() {
                    w.u64(d as u64);
                }
                w.f64s(n.tensor.data());
            }
        }
        w.f64(self.adam.beta1);
        w.f64(self.adam.beta2);
        w.f64(self.adam.eps);
        w.u64(self.adam.step);
        for moments in [&self.adam.m, &self.adam.v] {
            w.u64(moments.len() as u64);
            for buf in moments {
                w.f64s(buf);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads version {VERSION})"
            )));
        }
        let config_text = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("config text is not UTF-8".into()))?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut sets = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.len()?;
            let mut set = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let name = String::from_utf8(r.bytes()?.to_vec())
                    .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
                let rank = r.u32()? as usize;
                let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
                let data = r.f64s()?;
                let tensor = Tensor::from_vec(&shape, data)
                    .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
                set.push(Named { name, tensor });
            }
            sets.push(set);
        }
        let buffers = sets.pop().expect("two sets");
        let params = sets.pop().expect("two sets");
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let adam_step = r.u64()?;
        let mut moments = Vec::with_capacity(2);
        for _ in 0..2 {
            let count = r.len()?;
            let mut bufs = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                bufs.push(r.f64s()?);
            }
            moments.push(bufs);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let v = moments.pop().expect("two moment sets");
        let m = moments.pop().expect("two moment sets");
        Ok(Self {
            config_text,
            epoch,
            step,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            params,
            buffers,
            adam: Adam {
                beta1,
                beta2,
                eps,
                step: adam_step,
                m,
                v,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // write then rename so a crash never leaves a truncated file
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn f64s(&mut self, xs: &[f64]) {
        self.u64(xs.len() as u64);
        for &x in xs {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .map_err(|_| Error::Checkpoint(format!("length {v} does not fit in memory")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len()?;
        self.take(n)
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("payload too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
