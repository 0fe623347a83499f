//! Training checkpoints with exact-resume semantics.
//!
//! Layout of a `CDN-CKPT-1` file:
//!
//! ```text
//! magic   b"CDN-CKPT-1\0"
//! u32     header length (little endian)
//! bytes   JSON header: config, next epoch, loss weights, adam step
//!         counters, tensor manifest, payload digest
//! bytes   payload: the manifest's tensors back to back, f64 LE
//! ```
//!
//! Everything the loop needs to continue bit-for-bit lives here: network
//! parameters, optimizer moments and step counters, and the loss weights
//! in force for the next epoch. Batch schedules are pure functions of
//! `(seed, epoch)`, so no generator state needs saving. The payload is
//! integrity-checked against a SHA-256 digest stored in the header.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::nn::Adam;

use super::{TrainConfig, N_LOSS_TERMS};

const MAGIC: &[u8; 11] = b"CDN-CKPT-1\0";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    next_epoch: usize,
    lambdas: Vec<f64>,
    adam_steps: Vec<(String, u64)>,
    tensors: Vec<TensorEntry>,
    payload_sha256: String,
}

/// Optimizer state bundle mirroring the five networks.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub predictor: Adam,
    pub consistency: Option<Adam>,
    pub fusion: Option<Adam>,
    pub disc_full: Adam,
    pub disc_low: Adam,
}

/// Everything needed to continue a run.
#[derive(Debug)]
pub struct CheckpointState {
    pub config: TrainConfig,
    pub next_epoch: usize,
    pub lambdas: [f64; N_LOSS_TERMS],
    pub params: ModelParams,
    pub optim: OptimState,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn push_tensor(tensors: &mut Vec<TensorEntry>, payload: &mut Vec<u8>, name: &str, data: &[f64]) {
    tensors.push(TensorEntry {
        name: name.to_string(),
        len: data.len(),
    });
    payload.reserve(data.len() * 8);
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_adam(
    tensors: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
    steps: &mut Vec<(String, u64)>,
    name: &str,
    adam: &Adam,
) {
    let (t, m, v) = adam.state();
    steps.push((name.to_string(), t));
    push_tensor(tensors, payload, &format!("{name}.m"), m);
    push_tensor(tensors, payload, &format!("{name}.v"), v);
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(path: &Path, state: &CheckpointState) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut adam_steps = Vec::new();

    let p = &state.params;
    push_tensor(&mut tensors, &mut payload, "predictor", &p.predictor.params);
    if let Some(n) = &p.consistency {
        push_tensor(&mut tensors, &mut payload, "consistency", &n.params);
    }
    if let Some(n) = &p.fusion {
        push_tensor(&mut tensors, &mut payload, "fusion", &n.params);
    }
    push_tensor(&mut tensors, &mut payload, "disc_full", &p.disc_full.params);
    push_tensor(&mut tensors, &mut payload, "disc_low", &p.disc_low.params);

    let o = &state.optim;
    push_adam(&mut tensors, &mut payload, &mut adam_steps, "opt_predictor", &o.predictor);
    if let Some(a) = &o.consistency {
        push_adam(&mut tensors, &mut payload, &mut adam_steps, "opt_consistency", a);
    }
    if let Some(a) = &o.fusion {
        push_adam(&mut tensors, &mut payload, &mut adam_steps, "opt_fusion", a);
    }
    push_adam(&mut tensors, &mut payload, &mut adam_steps, "opt_disc_full", &o.disc_full);
    push_adam(&mut tensors, &mut payload, &mut adam_steps, "opt_disc_low", &o.disc_low);

    let digest = Sha256::digest(&payload);
    let header = Header {
        config: state.config.clone(),
        next_epoch: state.next_epoch,
        lambdas: state.lambdas.to_vec(),
        adam_steps,
        tensors,
        payload_sha256: format!("{digest:x}"),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
        path: path_str(path),
        reason: format!("header serialization: {e}"),
    })?;

    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_json.len() as u32).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&payload)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct TensorReader<'a> {
    path: &'a Path,
    entries: std::collections::HashMap<String, Vec<f64>>,
}

impl<'a> TensorReader<'a> {
    fn take(&mut self, name: &str) -> Result<Vec<f64>> {
        self.entries.remove(name).ok_or_else(|| Error::Checkpoint {
            path: path_str(self.path),
            reason: format!("missing tensor {name}"),
        })
    }

    fn take_sized(&mut self, name: &str, want: usize) -> Result<Vec<f64>> {
        let t = self.take(name)?;
        if t.len() != want {
            return Err(Error::Checkpoint {
                path: path_str(self.path),
                reason: format!("tensor {name} has {} values, model wants {want}", t.len()),
            });
        }
        Ok(t)
    }
}

fn restore_adam(
    reader: &mut TensorReader,
    steps: &std::collections::HashMap<String, u64>,
    name: &str,
    lr: f64,
    beta1: f64,
    beta2: f64,
    n_params: usize,
) -> Result<Adam> {
    let t = *steps.get(name).ok_or_else(|| Error::Checkpoint {
        path: path_str(reader.path),
        reason: format!("missing optimizer step counter {name}"),
    })?;
    let m = reader.take_sized(&format!("{name}.m"), n_params)?;
    let v = reader.take_sized(&format!("{name}.v"), n_params)?;
    let mut adam = Adam::new(lr, beta1, beta2, n_params);
    adam.restore(t, m, v)?;
    Ok(adam)
}

/// Reads and fully validates a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointState> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 11];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            path: path_str(path),
            expected: "CDN-CKPT-1".to_string(),
        });
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let header_len = u32::from_le_bytes(len4) as usize;
    let mut header_raw = vec![0u8; header_len];
    f.read_exact(&mut header_raw)?;
    let header: Header = serde_json::from_slice(&header_raw).map_err(|e| Error::Checkpoint {
        path: path_str(path),
        reason: format!("header parse: {e}"),
    })?;

    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    let want: usize = header.tensors.iter().map(|t| t.len * 8).sum();
    if payload.len() != want {
        return Err(Error::Checkpoint {
            path: path_str(path),
            reason: format!("payload holds {} bytes, manifest wants {want}", payload.len()),
        });
    }
    let digest = format!("{:x}", Sha256::digest(&payload));
    if digest != header.payload_sha256 {
        return Err(Error::HashMismatch {
            path: path_str(path),
        });
    }

    let mut entries = std::collections::HashMap::new();
    let mut off = 0usize;
    for t in &header.tensors {
        let mut vals = Vec::with_capacity(t.len);
        for i in 0..t.len {
            let b: [u8; 8] = payload[off + i * 8..off + i * 8 + 8].try_into().unwrap();
            let v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::Checkpoint {
                    path: path_str(path),
                    reason: format!("tensor {} holds a non-finite value", t.name),
                });
            }
            vals.push(v);
        }
        off += t.len * 8;
        if entries.insert(t.name.clone(), vals).is_some() {
            return Err(Error::Checkpoint {
                path: path_str(path),
                reason: format!("duplicate tensor {}", t.name),
            });
        }
    }

    let config = header.config;
    config.validate()?;
    if header.lambdas.len() != N_LOSS_TERMS {
        return Err(Error::Checkpoint {
            path: path_str(path),
            reason: format!("{} loss weights, expected {N_LOSS_TERMS}", header.lambdas.len()),
        });
    }
    let mut lambdas = [0.0; N_LOSS_TERMS];
    lambdas.copy_from_slice(&header.lambdas);

    // rebuild the architecture, then overwrite every parameter buffer
    let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ModelParams::init(config.model.clone(), &mut seed_rng)?;
    let mut reader = TensorReader {
        path,
        entries,
    };
    params.predictor.params = reader.take_sized("predictor", params.predictor.n_params())?;
    if let Some(n) = params.consistency.as_mut() {
        n.params = reader.take_sized("consistency", n.n_params())?;
    }
    if let Some(n) = params.fusion.as_mut() {
        n.params = reader.take_sized("fusion", n.n_params())?;
    }
    params.disc_full.params = reader.take_sized("disc_full", params.disc_full.n_params())?;
    params.disc_low.params = reader.take_sized("disc_low", params.disc_low.n_params())?;

    let steps: std::collections::HashMap<String, u64> = header.adam_steps.into_iter().collect();
    let optim = OptimState {
        predictor: restore_adam(
            &mut reader,
            &steps,
            "opt_predictor",
            config.lr_g,
            config.beta1,
            config.beta2,
            params.predictor.n_params(),
        )?,
        consistency: match &params.consistency {
            Some(n) => Some(restore_adam(
                &mut reader,
                &steps,
                "opt_consistency",
                config.lr_g,
                config.beta1,
                config.beta2,
                n.n_params(),
            )?),
            None => None,
        },
        fusion: match &params.fusion {
            Some(n) => Some(restore_adam(
                &mut reader,
                &steps,
                "opt_fusion",
                config.lr_g,
                config.beta1,
                config.beta2,
                n.n_params(),
            )?),
            None => None,
        },
        disc_full: restore_adam(
            &mut reader,
            &steps,
            "opt_disc_full",
            config.lr_d,
            config.beta1,
            config.beta2,
            params.disc_full.n_params(),
        )?,
        disc_low: restore_adam(
            &mut reader,
            &steps,
            "opt_disc_low",
            config.lr_d,
            config.beta1,
            config.beta2,
            params.disc_low.n_params(),
        )?,
    };

    Ok(CheckpointState {
        config,
        next_epoch: header.next_epoch,
        lambdas,
        params,
        optim,
    })
}
