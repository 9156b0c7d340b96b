use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Model, ModelConfig, Params, TrainConfig};
use crate::{Error, Matrix, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KNNATTN1";
const FORMAT_VERSION: u32 = 1;

/// Model, optional optimizer state and training position.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: usize,
    pub adam: Option<AdamState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    /// Position of the first entry in the data block, in `f64` units.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    model: ModelConfig,
    train: Option<TrainConfig>,
    epoch: usize,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// `magic ‖ header length (u64 LE) ‖ JSON header ‖ f64 LE data`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data: Vec<f64> = Vec::new();
        let mut push = |name: &str, m: &Matrix| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: [m.rows(), m.cols()],
                offset: data.len(),
            });
            data.extend_from_slice(m.as_slice());
        };
        self.model.params.visit(|n, m| push(n, m));
        if let Some(a) = &self.adam {
            push("adam.m", &Matrix::from_vec(1, a.m.len(), a.m.clone())?);
            push("adam.v", &Matrix::from_vec(1, a.v.len(), a.v.clone())?);
        }
        let header = Header {
            format: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * data.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic: not a checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", header.format)));
        }
        header.model.validate()?;
        let raw = &bytes[16 + hlen..];
        if !raw.len().is_multiple_of(8) {
            return Err(bad("data block is not a whole number of f64 values"));
        }
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let slice = |e: &TensorEntry| -> Result<Matrix> {
            let n = e.shape[0] * e.shape[1];
            let part = data
                .get(e.offset..e.offset + n)
                .ok_or_else(|| bad(format!("tensor {} runs past the data block", e.name)))?;
            Matrix::from_vec(e.shape[0], e.shape[1], part.to_vec())
        };
        let find = |name: &str| header.tensors.iter().find(|e| e.name == name);

        let mut params = Params::init(&header.model, &mut crate::RngStream::new(0));
        let mut err = None;
        params.visit_mut(|name, m| {
            if err.is_some() {
                return;
            }
            match find(name) {
                None => err = Some(bad(format!("missing tensor {name}"))),
                Some(e) if e.shape != [m.rows(), m.cols()] => {
                    err = Some(bad(format!(
                        "tensor {name} has shape {:?}, model expects {:?}",
                        e.shape,
                        [m.rows(), m.cols()]
                    )))
                }
                Some(e) => match slice(e) {
                    Ok(v) => *m = v,
                    Err(e) => err = Some(e),
                },
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        let adam = match header.adam_step {
            None => None,
            Some(step) => {
                let get = |n: &str| -> Result<Vec<f64>> {
                    let e = find(n).ok_or_else(|| bad(format!("missing tensor {n}")))?;
                    Ok(slice(e)?.into_vec())
                };
                let a = AdamState {
                    step,
                    m: get("adam.m")?,
                    v: get("adam.v")?,
                };
                if a.m.len() != params.len() || a.v.len() != params.len() {
                    return Err(bad("optimizer state does not match the parameter count"));
                }
                Some(a)
            }
        };
        Ok(Self {
            model: Model {
                config: header.model,
                params,
            },
            train: header.train,
            epoch: header.epoch,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::{build_model, Pooling};
    use crate::RngStream;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig { pooling: Pooling::Cls, ..Default::default() };
        let model = build_model(&cfg, &mut RngStream::new(3)).unwrap();
        let n = model.n_params();
        Checkpoint {
            model,
            train: Some(TrainConfig::default()),
            epoch: 4,
            adam: Some(AdamState {
                step: 17,
                m: (0..n).map(|i| i as f64 * 1e-3).collect(),
                v: vec![0.5; n],
            }),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn layout_is_magic_length_header_data() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"KNNATTN1");
        let h = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + h]).unwrap();
        assert_eq!(header["epoch"], 4);
        let first = f64::from_le_bytes(bytes[16 + h..24 + h].try_into().unwrap());
        assert_eq!(first, c.model.params.embed_w.as_slice()[0]);
        assert_eq!(bytes.len() - 16 - h, 8 * (2 * c.model.n_params() + c.model.n_params()));
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT00000000"), Err(Error::Checkpoint(_))));
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
