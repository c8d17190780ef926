//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 8     | magic `SRMXCKPT`                          |
//! | 2     | major version                             |
//! | 2     | minor version                             |
//! | 4     | header length `h`                         |
//! | h     | UTF-8 JSON [`CheckpointHeader`]           |
//! | rest  | `n_params` values, `f32` or `f64` per header |
//!
//! Readers accept any minor version of the same major version and ignore
//! unknown header fields.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, SeparatorModel};
use crate::error::{ensure, io_err, Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SRMXCKPT";
pub const FORMAT_MAJOR: u16 = 1;
pub const FORMAT_MINOR: u16 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Shuffler,
    #[default]
    Solver,
    Averaged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub role: Role,
    pub step: u64,
    pub epoch: u64,
    /// `"f32"` or `"f64"`.
    pub scalar: String,
    pub n_params: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub params: Vec<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: &SeparatorModel<T>, role: Role, step: u64, epoch: u64) -> Self {
        Self {
            header: CheckpointHeader {
                arch: *model.architecture(),
                role,
                step,
                epoch,
                scalar: T::NAME.to_string(),
                n_params: model.params().len(),
            },
            params: model.params().to_vec(),
        }
    }

    pub fn into_model(self) -> Result<SeparatorModel<T>> {
        SeparatorModel::from_params(self.header.arch, self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let width = if self.header.scalar == "f32" { 4 } else { 8 };
        let mut out = Vec::with_capacity(16 + header.len() + width * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_MAJOR.to_le_bytes());
        out.extend_from_slice(&FORMAT_MINOR.to_le_bytes());
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Format("checkpoint header too large".into()))?;
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            if width == 4 {
                out.extend_from_slice(&(p.f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&p.f64().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let mut u16b = [0u8; 2];
        read_exact(&mut r, &mut u16b)?;
        let major = u16::from_le_bytes(u16b);
        read_exact(&mut r, &mut u16b)?;
        if major != FORMAT_MAJOR {
            return Err(Error::Format(format!(
                "checkpoint format major version {major} unsupported (expected {FORMAT_MAJOR})"
            )));
        }
        let mut u32b = [0u8; 4];
        read_exact(&mut r, &mut u32b)?;
        let header_len = u32::from_le_bytes(u32b) as usize;
        if r.len() < header_len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..header_len])?;
        r = &r[header_len..];
        let width = match header.scalar.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Format(format!("unknown scalar type {other:?}"))),
        };
        ensure!(
            header.n_params == header.arch.n_params(),
            Format,
            "header declares {} parameters but architecture needs {}",
            header.n_params,
            header.arch.n_params()
        );
        ensure!(
            r.len() == width * header.n_params,
            Format,
            "parameter block holds {} bytes, expected {}",
            r.len(),
            width * header.n_params
        );
        let params = r
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    T::c(f32::from_le_bytes(c.try_into().unwrap()) as f64)
                } else {
                    T::c(f64::from_le_bytes(c.try_into().unwrap()))
                }
            })
            .collect();
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
        f.write_all(&bytes)
            .map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(format!("reading {}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::separator::stft::StftConfig;

    fn small() -> Architecture {
        Architecture {
            n_outputs: 2,
            hidden: 4,
            context: 0,
            mask: Default::default(),
            stft: StftConfig {
                fft_size: 32,
                window_length: 24,
                hop_length: 8,
            },
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let model = SeparatorModel::<f64>::random(small(), 4).unwrap();
        let ck = Checkpoint::from_model(&model, Role::Shuffler, 17, 2);
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.header, ck.header);
        assert_eq!(back.params, model.params());
    }

    #[test]
    fn file_round_trip_across_scalars() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SeparatorModel::<f32>::random(small(), 4).unwrap();
        Checkpoint::from_model(&model, Role::Solver, 1, 0).save(&path).unwrap();
        let back = Checkpoint::<f64>::load(&path).unwrap();
        assert_eq!(back.header.scalar, "f32");
        for (a, b) in back.params.iter().zip(model.params()) {
            assert_eq!(*a as f32, *b);
        }
        back.into_model().unwrap();
    }

    #[test]
    fn rejects_corruption() {
        let model = SeparatorModel::<f64>::uniform(small()).unwrap();
        let bytes = Checkpoint::from_model(&model, Role::Solver, 0, 0).to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bad), Err(Error::Format(_))));
        let mut future = bytes.clone();
        future[8] = 2;
        assert!(matches!(Checkpoint::<f64>::from_bytes(&future), Err(Error::Format(_))));
        assert!(Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut newer_minor = bytes;
        newer_minor[10] = 9;
        assert!(Checkpoint::<f64>::from_bytes(&newer_minor).is_ok());
    }
}
