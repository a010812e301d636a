//! Weight file: `AEVW`, version u32 LE, manifest length u32 LE, JSON manifest,
//! then every tensor as raw little-endian f32 in manifest order.

use serde::{Deserialize, Serialize};

use super::network::{Architecture, ConvLstmNet};
use super::ReconError;

const MAGIC: &[u8; 4] = b"AEVW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct Manifest {
    levels: usize,
    channels: Vec<usize>,
    global_dim: usize,
    bins: usize,
    tensors: Vec<ManifestTensor>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
}

impl Manifest {
    fn of(arch: &Architecture) -> Self {
        Self {
            levels: arch.levels,
            channels: (1..=arch.levels).map(|l| arch.channels(l)).collect(),
            global_dim: arch.global_dim,
            bins: arch.bins,
            tensors: arch
                .tensor_manifest()
                .into_iter()
                .map(|(name, shape)| ManifestTensor { name, shape })
                .collect(),
        }
    }
}

pub fn save_weights(net: &ConvLstmNet) -> Vec<u8> {
    let manifest = serde_json::to_vec(&Manifest::of(&net.arch)).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for conv in net.convs() {
        for v in conv.weight.iter().chain(&conv.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a weight file and checks it against the expected architecture.
pub fn load_weights(bytes: &[u8], arch: Architecture) -> Result<ConvLstmNet, ReconError> {
    let corrupt = |why: &str| ReconError::CorruptFile(why.to_string());
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("missing AEVW header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(ReconError::CorruptFile(format!("unsupported version {version}")));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("manifest length exceeds file"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[12..body_start])
        .map_err(|e| ReconError::CorruptFile(format!("manifest: {e}")))?;
    let expected = Manifest::of(&arch);
    if manifest != expected {
        return Err(ReconError::ShapeMismatch(format!(
            "file has levels={} channels={:?} K={} B={}, expected levels={} channels={:?} K={} B={}",
            manifest.levels,
            manifest.channels,
            manifest.global_dim,
            manifest.bins,
            expected.levels,
            expected.channels,
            expected.global_dim,
            expected.bins
        )));
    }
    let body = &bytes[body_start..];
    let mut net = ConvLstmNet::zeros(arch);
    let total: usize = net.convs().iter().map(|c| c.weight.len() + c.bias.len()).sum();
    if body.len() != total * 4 {
        return Err(ReconError::CorruptFile(format!(
            "tensor payload is {} bytes, manifest needs {}",
            body.len(),
            total * 4
        )));
    }
    let mut values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()));
    for conv in net.convs_mut() {
        for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture {
            levels: 2,
            base_channels: 2,
            global_dim: 3,
            bins: 5,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let net = ConvLstmNet::seeded(arch(), 5);
        let bytes = save_weights(&net);
        assert_eq!(&bytes[..4], b"AEVW");
        assert_eq!(load_weights(&bytes, arch()).unwrap(), net);
    }

    #[test]
    fn tampered_length_is_corrupt() {
        let mut bytes = save_weights(&ConvLstmNet::seeded(arch(), 5));
        bytes.pop();
        assert!(matches!(load_weights(&bytes, arch()), Err(ReconError::CorruptFile(_))));
        bytes.extend([0u8; 5]);
        assert!(matches!(load_weights(&bytes, arch()), Err(ReconError::CorruptFile(_))));
        assert!(matches!(load_weights(b"AEVW", arch()), Err(ReconError::CorruptFile(_))));
    }

    #[test]
    fn architecture_mismatch_is_reported() {
        let bytes = save_weights(&ConvLstmNet::seeded(arch(), 5));
        let other = Architecture { global_dim: 4, ..arch() };
        assert!(matches!(load_weights(&bytes, other), Err(ReconError::ShapeMismatch(_))));
    }
}
