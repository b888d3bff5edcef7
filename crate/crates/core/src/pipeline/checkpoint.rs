//! Little-endian binary checkpoints.
//!
//! ```text
//! "EDRN"  u32 version
//! config:  u32 levels, u32 base_channels, u32 kernel_width, u32 input_channels,
//!          u8 normalize_kernels, u32 n_dilations, u32 dilation * n
//! params:  u32 count, tensor * count
//! adam:    f64 lr, f64 beta1, f64 beta2, f64 eps, u64 step,
//!          u32 count, tensor * count (first moments), tensor * count (second moments)
//! rng:     [u8; 32] seed, u64 stream, u128 word_pos
//! u64 iteration
//! tensor:  u32 ndim, u64 dim * ndim, f64 value * product(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::filtering::DilationFactors;
use crate::kpn::{KpnConfig, KpnParams};
use crate::rng::RngState;
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"EDRN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: KpnParams,
    pub adam: AdamState,
    pub rng: RngState,
    pub iteration: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);

        let c = &self.params.config;
        w.u32(c.levels as u32);
        w.u32(c.base_channels as u32);
        w.u32(c.kernel_width as u32);
        w.u32(c.input_channels as u32);
        w.0.push(u8::from(c.normalize_kernels));
        w.u32(c.dilations.len() as u32);
        for &d in c.dilations.as_slice() {
            w.u32(d as u32);
        }

        let tensors = self.params.tensors();
        w.u32(tensors.len() as u32);
        tensors.into_iter().for_each(|t| w.tensor(t));

        let a = &self.adam.config;
        for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
            w.f64(v);
        }
        w.u64(self.adam.step_count());
        w.u32(self.adam.first_moment().len() as u32);
        self.adam.first_moment().iter().for_each(|t| w.tensor(t));
        self.adam.second_moment().iter().for_each(|t| w.tensor(t));

        w.0.extend_from_slice(&self.rng.seed);
        w.u64(self.rng.stream);
        w.0.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.u64(self.iteration);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("missing EDRN magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }

        let levels = r.usize32()?;
        let base_channels = r.usize32()?;
        let kernel_width = r.usize32()?;
        let input_channels = r.usize32()?;
        let normalize_kernels = match r.take(1)?[0] {
            0 => false,
            1 => true,
            other => return Err(Error::Checkpoint(format!("bad normalize flag {other}"))),
        };
        let n_dil = r.usize32()?;
        let dilations = (0..n_dil)
            .map(|_| r.usize32())
            .collect::<Result<Vec<_>>>()?;
        let config = KpnConfig {
            levels,
            base_channels,
            kernel_width,
            dilations: DilationFactors::new(dilations)
                .map_err(|e| Error::Checkpoint(e.to_string()))?,
            input_channels,
            normalize_kernels,
        };
        config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let count = r.usize32()?;
        let tensors = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
        let params = KpnParams::from_tensors(&config, tensors)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let adam_config = AdamConfig {
            learning_rate: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            epsilon: r.f64()?,
        };
        let step = r.u64()?;
        let moments = r.usize32()?;
        let first = (0..moments)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        let second = (0..moments)
            .map(|_| r.tensor())
            .collect::<Result<Vec<_>>>()?;
        let adam = AdamState::from_parts(adam_config, step, first, second)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;

        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let iteration = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            adam,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
            iteration,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
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

    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn usize32(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.usize32()?;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible tensor rank {ndim}")));
        }
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l.saturating_mul(8) <= self.bytes.len() - self.pos)
            .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} exceeds the file")))?;
        let raw = self.take(len * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
