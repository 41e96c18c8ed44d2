//! Single-file binary checkpoints holding both models, optimizer moments and
//! loop counters.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SSCKPT01"
//! network config: in_channels u32, base_width u32, depth u32, n_classes u32, fusion u32
//! counters: epoch u64, global_step u64, rng_seed u64, optimizer step u64, best validation dsc f64
//! sections "student", "teacher", "adam.first", "adam.second", each:
//!     name_len u32, name, n_params u32, then per parameter:
//!     name_len u32, name, dtype u32 (1 = f32), rank u32, dims u32 * rank, data f32 * prod(dims)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::mean_teacher::{AdamState, TrainState};
use crate::network::{FusionMode, ModelState, NetworkConfig, ParamEntry};

const MAGIC: &[u8; 8] = b"SSCKPT01";
const DTYPE_F32: u32 = 1;
const SECTIONS: [&str; 4] = ["student", "teacher", "adam.first", "adam.second"];

/// Which model of a checkpoint to use for inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSection {
    Student,
    Teacher,
}

impl ModelSection {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "student" => Some(Self::Student),
            "teacher" => Some(Self::Teacher),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Student => "student",
            Self::Teacher => "teacher",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub state: TrainState<f32>,
    /// Best validation DSC seen so far; NaN before the first validation.
    pub best_validation_dsc: f64,
}

impl Checkpoint {
    pub fn model(&self, section: ModelSection) -> &ModelState<f32> {
        match section {
            ModelSection::Student => &self.state.student,
            ModelSection::Teacher => &self.state.teacher,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let fusion = match self.network.fusion {
            FusionMode::SpatialAttention => 0u32,
            FusionMode::Concat => 1,
        };
        for v in [
            self.network.in_channels_per_modality as u32,
            self.network.base_width as u32,
            self.network.depth as u32,
            self.network.n_classes as u32,
            fusion,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let s = &self.state;
        for v in [s.epoch as u64, s.global_step, s.rng_seed, s.optimizer.step] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.best_validation_dsc.to_le_bytes());

        let names: Vec<&str> = s
            .student
            .entries()
            .iter()
            .map(|e| e.name.as_str())
            .collect();
        let moments = |m: &[Vec<f32>]| -> Vec<(String, Vec<usize>, Vec<f32>)> {
            names
                .iter()
                .zip(m)
                .map(|(n, d)| (n.to_string(), vec![d.len()], d.clone()))
                .collect()
        };
        let model = |st: &ModelState<f32>| -> Vec<(String, Vec<usize>, Vec<f32>)> {
            st.entries()
                .iter()
                .map(|e| (e.name.clone(), e.shape.clone(), e.data.clone()))
                .collect()
        };
        let sections = [
            model(&s.student),
            model(&s.teacher),
            moments(&s.optimizer.first),
            moments(&s.optimizer.second),
        ];
        for (title, params) in SECTIONS.iter().zip(sections) {
            put_str(&mut out, title);
            out.extend_from_slice(&(params.len() as u32).to_le_bytes());
            for (name, shape, data) in params {
                put_str(&mut out, &name);
                out.extend_from_slice(&DTYPE_F32.to_le_bytes());
                out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                for d in shape {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(r.corrupt("bad magic"));
        }
        let mut cfg = [0usize; 5];
        for v in &mut cfg {
            *v = r.u32()? as usize;
        }
        let fusion = match cfg[4] {
            0 => FusionMode::SpatialAttention,
            1 => FusionMode::Concat,
            other => return Err(r.corrupt(&format!("unknown fusion code {other}"))),
        };
        let network = NetworkConfig {
            in_channels_per_modality: cfg[0],
            base_width: cfg[1],
            depth: cfg[2],
            n_classes: cfg[3],
            fusion,
        };
        network.validate().map_err(|e| r.corrupt(&e.to_string()))?;
        let epoch = r.u64()? as usize;
        let global_step = r.u64()?;
        let rng_seed = r.u64()?;
        let adam_step = r.u64()?;
        let best_validation_dsc = f64::from_le_bytes(r.take(8)?.try_into().unwrap());

        let mut sections = Vec::with_capacity(SECTIONS.len());
        for expected in SECTIONS {
            let title = r.string()?;
            if title != expected {
                return Err(r.corrupt(&format!("expected section `{expected}`, found `{title}`")));
            }
            let count = r.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                let name = r.string()?;
                if r.u32()? != DTYPE_F32 {
                    return Err(r.corrupt(&format!("parameter `{name}` has an unsupported dtype")));
                }
                let rank = r.u32()? as usize;
                let shape = (0..rank)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let len: usize = shape.iter().product();
                let raw = r.take(
                    len.checked_mul(4)
                        .ok_or_else(|| r.corrupt("parameter too large"))?,
                )?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                entries.push(ParamEntry { name, shape, data });
            }
            sections.push(entries);
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt("trailing bytes"));
        }
        let second: Vec<Vec<f32>> = sections
            .pop()
            .unwrap()
            .into_iter()
            .map(|e| e.data)
            .collect();
        let first: Vec<Vec<f32>> = sections
            .pop()
            .unwrap()
            .into_iter()
            .map(|e| e.data)
            .collect();
        let teacher = ModelState::new(sections.pop().unwrap())?;
        let student = ModelState::new(sections.pop().unwrap())?;
        student.check_same_structure(&teacher)?;
        if first.len() != student.len() || second.len() != student.len() {
            return Err(r.corrupt("optimizer state does not match the model"));
        }
        Ok(Self {
            network,
            state: TrainState {
                student,
                teacher,
                optimizer: AdamState {
                    step: adam_step,
                    first,
                    second,
                },
                global_step,
                epoch,
                rng_seed,
            },
            best_validation_dsc,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: &str) -> Error {
        Error::Corrupt {
            path: self.path.to_path_buf(),
            reason: format!("{reason} (offset {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt("unexpected end of file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.corrupt("name is not UTF-8"))
    }
}
