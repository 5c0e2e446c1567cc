//! Checkpoint file: `SVCK` magic, u32 version, u32 header length, a JSON
//! header (architecture input size, training config, seed, tensor names
//! and shapes), then every tensor's data as little-endian f32 in header
//! order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::PolicyNet;
use super::train::TrainConfig;
use crate::error::NeuralError;

pub const MAGIC: &[u8; 4] = b"SVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// What the network was trained on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub demo_minutes: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub input_width: usize,
    pub input_height: usize,
    pub twist_scales: [f64; 6],
    pub seed: u64,
    pub train_config: TrainConfig,
    pub data: Option<DataSummary>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes(net: &PolicyNet<f32>, cfg: &TrainConfig, data: Option<DataSummary>) -> Vec<u8> {
    let (input_width, input_height) = net.input_dims();
    let header = CheckpointHeader {
        input_width,
        input_height,
        twist_scales: net.twist_scales(),
        seed: cfg.seed,
        train_config: cfg.clone(),
        data,
        tensors: net
            .names()
            .iter()
            .zip(net.params())
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + net.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in net.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(PolicyNet<f32>, CheckpointHeader), NeuralError> {
    let fail = |reason: String| NeuralError::Checkpoint { path: path.to_path_buf(), reason };
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(fail("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + header_len).ok_or_else(|| fail("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| fail(format!("bad header: {e}")))?;
    let mut net = PolicyNet::<f32>::zeroed(header.input_width, header.input_height, header.twist_scales)?;
    if header.tensors.len() != net.params().len() {
        return Err(fail(format!(
            "expected {} tensors, header lists {}",
            net.params().len(),
            header.tensors.len()
        )));
    }
    let mut offset = 12 + header_len;
    let names = net.names().to_vec();
    for ((entry, name), param) in header.tensors.iter().zip(&names).zip(net.params_mut()) {
        if &entry.name != name || entry.shape != param.shape() {
            return Err(fail(format!(
                "tensor {} {:?} does not match architecture {} {:?}",
                entry.name,
                entry.shape,
                name,
                param.shape()
            )));
        }
        let n = param.len() * 4;
        let chunk = bytes.get(offset..offset + n).ok_or_else(|| fail(format!("truncated data for {name}")))?;
        for (dst, src) in param.data_mut().iter_mut().zip(chunk.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().unwrap());
        }
        offset += n;
    }
    if offset != bytes.len() {
        return Err(fail(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((net, header))
}

pub fn save(
    net: &PolicyNet<f32>,
    cfg: &TrainConfig,
    data: Option<DataSummary>,
    path: &Path,
) -> Result<(), NeuralError> {
    std::fs::write(path, to_bytes(net, cfg, data)).map_err(|source| NeuralError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<(PolicyNet<f32>, CheckpointHeader), NeuralError> {
    let bytes = std::fs::read(path).map_err(|source| NeuralError::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::train::DEFAULT_TWIST_SCALES;

    #[test]
    fn round_trip_is_exact() {
        let net = PolicyNet::<f32>::new(32, 24, DEFAULT_TWIST_SCALES, 12).unwrap();
        let cfg = TrainConfig { seed: 12, ..Default::default() };
        let bytes = to_bytes(&net, &cfg, Some(DataSummary { demo_minutes: 4.0, frames: 720 }));
        let (back, header) = from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(header.train_config, cfg);
        assert_eq!(to_bytes(&back, &cfg, Some(DataSummary { demo_minutes: 4.0, frames: 720 })), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let net = PolicyNet::<f32>::new(16, 16, DEFAULT_TWIST_SCALES, 1).unwrap();
        let bytes = to_bytes(&net, &TrainConfig::default(), None);
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad, p).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        // header claiming a different input size no longer matches the data
        let text = String::from_utf8_lossy(&bytes).replace("\"input_width\":16", "\"input_width\":32");
        assert!(from_bytes(text.as_bytes(), p).is_err());
    }
}
