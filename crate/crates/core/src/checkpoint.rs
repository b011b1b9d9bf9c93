//! Versioned binary checkpoints: the magic `WSRPN1`, a little-endian `u64`
//! header length, a JSON header, then raw little-endian float payloads.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wsrpn_autodiff::{Float, Precision, Tensor};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::NormStats;
use crate::error::{Result, WsrpnError};
use crate::model::Wsrpn;
use crate::optim::AdamState;
use crate::params::ParamStore;

pub const MAGIC: &[u8; 6] = b"WSRPN1";
const FAMILY: &[u8; 5] = b"WSRPN";

/// A model plus everything needed to resume or reproduce it.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub model: Wsrpn<F>,
    pub class_names: Vec<String>,
    pub norm: NormStats,
    pub train_config: Option<TrainConfig>,
    pub iteration: usize,
    pub best_val_map: Option<f64>,
    pub optimizer: Option<AdamState<F>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    /// First moments then second moments, in parameter order.
    moments: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    precision: String,
    model: ModelConfig,
    num_classes: usize,
    class_names: Vec<String>,
    norm: NormStats,
    train_config: Option<TrainConfig>,
    iteration: usize,
    best_val_map: Option<f64>,
    tensors: Vec<Entry>,
    optimizer: Option<OptimizerHeader>,
    payload_bytes: u64,
    payload_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn push<F: Float>(
    entries: &mut Vec<Entry>,
    payload: &mut Vec<u8>,
    count: &mut usize,
    name: &str,
    t: &Tensor<F>,
) {
    entries.push(Entry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        offset: *count,
    });
    *count += t.numel();
    for &v in t.data() {
        v.write_le(payload);
    }
}

fn decode<P: Float, F: Float>(payload: &[u8], e: &Entry) -> Result<Tensor<F>> {
    let n: usize = e.shape.iter().product();
    let b = P::PRECISION.bytes();
    let (start, end) = (e.offset * b, (e.offset + n) * b);
    let bytes = payload.get(start..end).ok_or_else(|| {
        WsrpnError::Checkpoint(format!("tensor {} lies outside the payload", e.name))
    })?;
    let data: Vec<P> = bytes.chunks_exact(b).map(P::read_le).collect();
    Ok(Tensor::new(e.shape.clone(), data)?.cast())
}

fn decode_any<F: Float>(precision: Precision, payload: &[u8], e: &Entry) -> Result<Tensor<F>> {
    match precision {
        Precision::F32 => decode::<f32, F>(payload, e),
        Precision::F64 => decode::<f64, F>(payload, e),
    }
}

impl<F: Float> Checkpoint<F> {
    /// Fresh checkpoint of an untrained or externally trained model.
    pub fn new(model: Wsrpn<F>, class_names: Vec<String>, norm: NormStats) -> Self {
        Self {
            model,
            class_names,
            norm,
            train_config: None,
            iteration: 0,
            best_val_map: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut count = 0;
        let mut tensors = Vec::new();
        for (name, t) in self.model.params.iter() {
            push(&mut tensors, &mut payload, &mut count, name, t);
        }
        let optimizer = self.optimizer.as_ref().map(|st| {
            let mut moments = Vec::new();
            for (kind, list) in [("m", &st.m), ("v", &st.v)] {
                for ((name, _), t) in self.model.params.iter().zip(list.iter()) {
                    push(
                        &mut moments,
                        &mut payload,
                        &mut count,
                        &format!("{kind}:{name}"),
                        t,
                    );
                }
            }
            OptimizerHeader {
                step: st.step,
                moments,
            }
        });
        let header = Header {
            precision: F::PRECISION.as_str().to_string(),
            model: self.model.config.clone(),
            num_classes: self.model.num_classes,
            class_names: self.class_names.clone(),
            norm: self.norm,
            train_config: self.train_config.clone(),
            iteration: self.iteration,
            best_val_map: self.best_val_map,
            tensors,
            optimizer,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint saved at any precision, casting values to `F`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| WsrpnError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() || &bytes[..FAMILY.len()] != FAMILY {
            return Err(corrupt("missing WSRPN magic"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(WsrpnError::VersionMismatch {
                found: String::from_utf8_lossy(&bytes[..MAGIC.len()]).into_owned(),
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
            });
        }
        let rest = &bytes[MAGIC.len()..];
        let len_bytes: [u8; 8] = rest
            .get(..8)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| corrupt("truncated before the header length"))?;
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes))
            .map_err(|_| corrupt("header length overflows"))?;
        let json = rest
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| corrupt("truncated inside the header"))?;
        let header: Header = serde_json::from_slice(json)?;
        let payload = &rest[8 + hlen..];
        if payload.len() as u64 != header.payload_bytes {
            return Err(WsrpnError::Checkpoint(format!(
                "payload has {} bytes, header declares {} (truncated file?)",
                payload.len(),
                header.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != header.payload_sha256 {
            return Err(corrupt("payload checksum mismatch"));
        }
        let precision: Precision = header.precision.parse().map_err(|_| {
            WsrpnError::Checkpoint(format!("unknown precision {:?}", header.precision))
        })?;
        let mut params = ParamStore::<F>::new();
        for e in &header.tensors {
            params.add(e.name.clone(), decode_any(precision, payload, e)?);
        }
        let model =
            Wsrpn::<F>::new(header.model.clone(), header.num_classes, 0)?.replace_params(params)?;
        let optimizer = match &header.optimizer {
            None => None,
            Some(o) => {
                let n = model.params.len();
                if o.moments.len() != 2 * n {
                    return Err(corrupt("optimizer moments do not match the parameter list"));
                }
                let ts = o
                    .moments
                    .iter()
                    .map(|e| decode_any(precision, payload, e))
                    .collect::<Result<Vec<Tensor<F>>>>()?;
                for (t, p) in ts.iter().zip(model.params.tensors().iter().cycle()) {
                    if t.shape() != p.shape() {
                        return Err(corrupt(
                            "optimizer moment shape does not match its parameter",
                        ));
                    }
                }
                let (m, v) = ts.split_at(n);
                Some(AdamState {
                    step: o.step,
                    m: m.to_vec(),
                    v: v.to_vec(),
                })
            }
        };
        if header.class_names.len() != header.num_classes {
            return Err(corrupt(
                "class name count differs from the model's class count",
            ));
        }
        Ok(Self {
            model,
            class_names: header.class_names,
            norm: header.norm,
            train_config: header.train_config,
            iteration: header.iteration,
            best_val_map: header.best_val_map,
            optimizer,
        })
    }

    /// Writes through a temporary sibling file that is renamed into place, or
    /// removed if anything fails.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        let mut name = path
            .file_name()
            .map(|n| n.to_os_string())
            .unwrap_or_default();
        name.push(".tmp");
        tmp.set_file_name(name);
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            WsrpnError::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| WsrpnError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn tiny() -> Wsrpn<f64> {
        let mut cfg = TrainConfig::synthetic().model;
        cfg.image_size = 16;
        cfg.backbone.stages.truncate(1);
        cfg.dim = 8;
        cfg.num_heads = 2;
        cfg.num_tokens = 2;
        cfg.classifier_hidden = 8;
        Wsrpn::new(cfg, 2, 3).unwrap()
    }

    #[test]
    fn bytes_roundtrip_is_exact() {
        let m = tiny();
        let mut ck = Checkpoint::new(
            m.clone(),
            vec!["a".into(), "b".into()],
            NormStats {
                mean: 0.3,
                std: 0.1,
            },
        );
        ck.optimizer = Some(AdamState::zeros_like(&m.params));
        ck.iteration = 7;
        let back = Checkpoint::<f64>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.model.params, m.params);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.iteration, 7);
        assert_eq!(back.norm, ck.norm);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let ck = Checkpoint::new(tiny(), vec!["a".into(), "b".into()], NormStats::default());
        let bytes = ck.to_bytes().unwrap();
        let cut = Checkpoint::<f64>::from_bytes(&bytes[..bytes.len() - 3]);
        assert!(matches!(cut, Err(WsrpnError::Checkpoint(_))));
        let mut v2 = bytes.clone();
        v2[5] = b'2';
        match Checkpoint::<f64>::from_bytes(&v2) {
            Err(WsrpnError::VersionMismatch { found, expected }) => {
                assert_eq!((found.as_str(), expected.as_str()), ("WSRPN2", "WSRPN1"));
            }
            other => panic!("{other:?}"),
        }
        let mut flipped = bytes;
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&flipped),
            Err(WsrpnError::Checkpoint(_))
        ));
    }

    #[test]
    fn loads_across_precision() {
        let ck = Checkpoint::new(tiny(), vec!["a".into(), "b".into()], NormStats::default());
        let low = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(low.model.params, ck.model.params.cast::<f32>());
    }
}
