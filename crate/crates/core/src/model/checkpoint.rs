//! Binary checkpoint: magic, format version, JSON header, raw tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, Network};
use crate::nncore::{AdamConfig, AdamState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFUS";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A model together with its optimizer state.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: AdamState<f32>,
}

impl Checkpoint {
    pub fn fresh(config: &ModelConfig, adam: AdamConfig) -> Result<Self, ModelError> {
        let mut network = Network::new(config)?;
        let optimizer = AdamState::new(adam, &network.param_sizes());
        Ok(Self { network, optimizer })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    adam: AdamHeader,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

fn named_tensors(ckpt: &mut Checkpoint) -> Vec<(String, Vec<usize>, &mut [f32])> {
    let Checkpoint { network, optimizer } = ckpt;
    let mut out = Vec::new();
    let mut names = Vec::new();
    let (params, buffers) = network.state_mut();
    for (name, t) in params {
        names.push((name.clone(), t.shape().to_vec()));
        out.push((name, t.shape().to_vec(), t.data_mut()));
    }
    for (name, t) in buffers {
        out.push((name, t.shape().to_vec(), t.data_mut()));
    }
    for ((name, shape), m) in names.iter().zip(optimizer.m.iter_mut()) {
        out.push((format!("adam.m.{name}"), shape.clone(), m.as_mut_slice()));
    }
    for ((name, shape), v) in names.iter().zip(optimizer.v.iter_mut()) {
        out.push((format!("adam.v.{name}"), shape.clone(), v.as_mut_slice()));
    }
    out
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let mut ckpt = ckpt.clone();
    let config = ckpt.network.config().clone();
    let c = ckpt.optimizer.config;
    let adam = AdamHeader { lr: c.lr, beta1: c.beta1, beta2: c.beta2, eps: c.eps, t: ckpt.optimizer.t };
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, data) in named_tensors(&mut ckpt) {
        tensors.push(TensorEntry { name, shape, dtype: "f32".into(), offset: payload.len() as u64 });
        for v in data.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header { config, adam, tensors }).map_err(|e| ModelError::Io(e.into()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let corrupt = |reason: &str| ModelError::CorruptFile { path: path.to_path_buf(), reason: reason.to_string() };
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::VersionMismatch(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(&e.to_string()))?;
    let payload = &bytes[header_end..];

    let adam = AdamConfig { lr: header.adam.lr, beta1: header.adam.beta1, beta2: header.adam.beta2, eps: header.adam.eps };
    let mut ckpt = Checkpoint::fresh(&header.config, adam).map_err(|e| corrupt(&e.to_string()))?;
    ckpt.optimizer.t = header.adam.t;
    let slots = named_tensors(&mut ckpt);
    if slots.len() != header.tensors.len() {
        return Err(corrupt("tensor count does not match the configuration"));
    }
    for ((name, shape, data), entry) in slots.into_iter().zip(&header.tensors) {
        if entry.name != name || entry.shape != shape || entry.dtype != "f32" {
            return Err(corrupt(&format!("unexpected tensor {}", entry.name)));
        }
        let start = entry.offset as usize;
        let end = start + data.len() * 4;
        let raw = payload.get(start..end).ok_or_else(|| corrupt("truncated payload"))?;
        for (d, b) in data.iter_mut().zip(raw.chunks_exact(4)) {
            *d = f32::from_le_bytes(b.try_into().expect("4 bytes"));
        }
    }
    Ok(ckpt)
}

/// Loads a checkpoint and refuses it unless its architecture matches
/// `expected` (modalities, attention, sex).
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint, ModelError> {
    let ckpt = load_checkpoint(path)?;
    let got = ckpt.network.config();
    if got.modalities != expected.modalities || got.use_attention != expected.use_attention || got.use_sex != expected.use_sex {
        return Err(ModelError::VersionMismatch(format!(
            "checkpoint is {} {}, runner expects {} {}",
            got.modality_label(),
            got.variant_label(),
            expected.modality_label(),
            expected.variant_label()
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::SoundType::*;
    use crate::nncore::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn trained_a_bit(config: &ModelConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::fresh(config, AdamConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs: Vec<Tensor<f32>> = (0..config.arity())
            .map(|_| Tensor::from_vec(&[4, 3, 16, 16], (0..4 * 768).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let sex = config.use_sex.then(|| vec![0.0, 1.0, 0.0, 1.0]);
        for _ in 0..2 {
            ckpt.network.zero_grad();
            ckpt.network.train_step(&inputs, sex.as_deref(), &[0, 1, 0, 1], &mut rng).unwrap();
            let mut ps: Vec<&mut Tensor<f32>> = ckpt.network.params_mut().into_iter().map(|(_, t)| t).collect();
            ckpt.optimizer.step(&mut ps).unwrap();
        }
        ckpt
    }

    fn probe(ckpt: &mut Checkpoint) -> Vec<f32> {
        let k = ckpt.network.config().arity();
        let inputs: Vec<Tensor<f32>> = (0..k)
            .map(|m| {
                Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| ((i * (m + 3)) % 17) as f32 / 9.0 - 1.0).collect()).unwrap()
            })
            .collect();
        let sex = ckpt.network.config().use_sex.then(|| vec![1.0, 0.0]);
        ckpt.network.predict(&inputs, sex.as_deref()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfus");
        let config = ModelConfig::new(&[Breath, Speech], true, true, 3).unwrap();
        let mut ckpt = trained_a_bit(&config);
        save_checkpoint(&path, &ckpt).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.network.config(), &config);
        assert_eq!(loaded.optimizer, ckpt.optimizer);
        let a: Vec<Vec<f32>> = ckpt.network.params_mut().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        let b: Vec<Vec<f32>> = loaded.network.params_mut().into_iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(a, b);
        assert_eq!(probe(&mut ckpt), probe(&mut loaded));
        save_checkpoint(&dir.path().join("again.rfus"), &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(dir.path().join("again.rfus")).unwrap());
    }

    #[test]
    fn altered_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfus");
        save_checkpoint(
            &path,
            &Checkpoint::fresh(&ModelConfig::new(&[Cough], false, false, 0).unwrap(), AdamConfig::default()).unwrap(),
        )
        .unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CorruptFile { .. })));
    }

    #[test]
    fn config_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rfus");
        let bs = ModelConfig::new(&[Breath, Speech], true, false, 0).unwrap();
        save_checkpoint(&path, &Checkpoint::fresh(&bs, AdamConfig::default()).unwrap()).unwrap();
        let c = ModelConfig::new(&[Cough], false, false, 0).unwrap();
        assert!(matches!(load_checkpoint_for(&path, &c), Err(ModelError::VersionMismatch(_))));
        assert!(load_checkpoint_for(&path, &bs).is_ok());
    }
}
