//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "RVNPCKPT"
//! version    u32      currently 1
//! kind       u32 length + UTF-8 bytes     e.g. "flow", "error-model"
//! header     u32 length + UTF-8 TOML      architecture description
//! n_params   u64
//! params     n_params × f64
//! has_opt    u8       0 or 1
//! [step u64, n u64, first moments n × f64, second moments n × f64]
//! ```
//!
//! Floats are written with `to_le_bytes`, so a reload is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::binio::{put_f64s, put_str, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RVNPCKPT";
pub const VERSION: u32 = 1;

/// Saved optimizer moments so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: String,
    pub params: Vec<f64>,
    pub optimizer: Option<OptimizerSnapshot>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.params.len() * 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut buf, &self.kind);
        put_str(&mut buf, &self.header);
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        put_f64s(&mut buf, &self.params);
        match &self.optimizer {
            None => buf.push(0),
            Some(o) => {
                buf.push(1);
                buf.extend_from_slice(&o.step.to_le_bytes());
                buf.extend_from_slice(&(o.first.len() as u64).to_le_bytes());
                put_f64s(&mut buf, &o.first);
                put_f64s(&mut buf, &o.second);
            }
        }
        buf
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        if r.take(8)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let kind = r.string()?;
        let header = r.string()?;
        let n = r.u64()? as usize;
        let params = r.f64s(n)?;
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let m = r.u64()? as usize;
                let first = r.f64s(m)?;
                let second = r.f64s(m)?;
                Some(OptimizerSnapshot {
                    step,
                    first,
                    second,
                })
            }
            t => return Err(r.fail(format!("bad optimizer tag {t}"))),
        };
        if !r.at_end() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self {
            kind,
            header,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut data = Vec::new();
        fs::File::open(path)?.read_to_end(&mut data)?;
        Self::from_bytes(&data, path)
    }

    /// Errors unless the checkpoint holds the expected kind.
    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} checkpoint, found {}", self.kind),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_roundtrip_bit_exact(params in proptest::collection::vec(any::<f64>(), 0..40),
                                     step in any::<u64>(), with_opt in any::<bool>()) {
            let ck = Checkpoint {
                kind: "flow".into(),
                header: "event_dim = 2".into(),
                optimizer: with_opt.then(|| OptimizerSnapshot {
                    step,
                    first: params.iter().map(|v| v * 0.5).collect(),
                    second: params.clone(),
                }),
                params,
            };
            let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
            let a: Vec<u64> = ck.params.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.params.iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back.kind, ck.kind);
            prop_assert_eq!(back.optimizer.is_some(), with_opt);
        }
    }

    #[test]
    fn truncated_input_is_rejected() {
        let ck = Checkpoint {
            kind: "flow".into(),
            header: String::new(),
            params: vec![1.0, 2.0],
            optimizer: None,
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem")).is_err());
    }
}
