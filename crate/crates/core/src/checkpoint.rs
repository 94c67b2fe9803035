//! Binary checkpoints of named f64 tensors.
//!
//! Layout (little endian): magic `MIDC`, u32 format version, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims,
//! f64 payload. The model description travels as a tensor named `config`
//! holding the bytes of a JSON document, one byte per element.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dccnn::DccnnConfig;
use crate::error::{io_err, CheckpointError, Error, Result};
use crate::mil::MilConfig;
use crate::model::Network;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

pub const MAGIC: [u8; 4] = *b"MIDC";
pub const FORMAT_VERSION: u32 = 1;
pub const CONFIG_TENSOR: &str = "config";

/// Everything needed to rebuild the network around the stored tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub dccnn: DccnnConfig,
    pub mil: MilConfig,
    pub class_names: Vec<String>,
    pub train: Option<TrainConfig>,
}

pub fn encode_tensors(tensors: &[(&str, &Tensor)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 8 + n.len() + 4 * t.rank() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, tensor: Option<&str>) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            CheckpointError::UnexpectedEnd {
                tensor: tensor.map(str::to_owned),
            }
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, tensor: Option<&str>) -> std::result::Result<u32, CheckpointError> {
        let b = self.take(4, tensor)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> std::result::Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, None)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic([magic[0], magic[1], magic[2], magic[3]]));
    }
    let version = r.u32(None)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32(None)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32(None)? as usize;
        let name = std::str::from_utf8(r.take(len, None)?)
            .map_err(|_| CheckpointError::InvalidName)?
            .to_owned();
        let rank = r.u32(Some(&name))? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u32(Some(&name))? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some())
            .ok_or_else(|| CheckpointError::DimensionOverflow { tensor: name.clone() })?;
        if shape.contains(&0) {
            return Err(CheckpointError::DimensionOverflow { tensor: name });
        }
        let raw = r.take(numel * 8, Some(&name))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    Ok(out)
}

fn bytes_tensor(bytes: &[u8]) -> Tensor {
    Tensor::from_parts(vec![bytes.len().max(1)], bytes.iter().map(|&b| b as f64).collect())
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::InvalidArgument(format!("config tensor holds non-byte value {v}")))
            }
        })
        .collect()
}

/// Serializes the network, its metadata and (optionally) the optimizer state.
pub fn checkpoint_bytes(net: &Network, class_names: &[String], train: Option<&TrainConfig>, adam: Option<&AdamState>) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        dccnn: net.config.clone(),
        mil: net.mil.clone(),
        class_names: class_names.to_vec(),
        train: train.cloned(),
    };
    let config = bytes_tensor(serde_json::to_string(&meta)?.as_bytes());
    let mut owned: Vec<(String, Tensor)> = Vec::new();
    if let Some(adam) = adam {
        owned.push(("adam.t".into(), Tensor::scalar(adam.t as f64)));
        for (id, p) in net.store.iter() {
            let m = &adam.m[id.index()];
            if m.is_empty() {
                continue;
            }
            owned.push((format!("adam.m.{}", p.name), Tensor::from_parts(p.tensor.shape().to_vec(), m.clone())));
            owned.push((
                format!("adam.v.{}", p.name),
                Tensor::from_parts(p.tensor.shape().to_vec(), adam.v[id.index()].clone()),
            ));
        }
    }
    let mut refs: Vec<(&str, &Tensor)> = vec![(CONFIG_TENSOR, &config)];
    refs.extend(net.store.iter().map(|(_, p)| (p.name.as_str(), &p.tensor)));
    refs.extend(owned.iter().map(|(n, t)| (n.as_str(), t)));
    Ok(encode_tensors(&refs))
}

pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    class_names: &[String],
    train: Option<&TrainConfig>,
    adam: Option<&AdamState>,
) -> Result<()> {
    let bytes = checkpoint_bytes(net, class_names, train, adam)?;
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub network: Network,
    pub adam: Option<AdamState>,
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    let tensors = decode_tensors(bytes)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(CheckpointError::MissingTensor(name.to_owned())))
    };
    let meta: CheckpointMeta = serde_json::from_slice(&tensor_bytes(find(CONFIG_TENSOR)?)?)?;
    let mut network = Network::build(&meta.dccnn, &meta.mil)?;
    let ids: Vec<_> = network.store.ids().collect();
    for &id in &ids {
        let name = network.store.param(id).name.clone();
        let t = find(&name)?;
        let target = network.store.tensor_mut(id);
        if t.shape() != target.shape() {
            return Err(Error::Checkpoint(CheckpointError::TensorShape {
                tensor: name,
                expected: target.shape().to_vec(),
                found: t.shape().to_vec(),
            }));
        }
        target.data_mut().copy_from_slice(t.data());
    }
    let adam = match find("adam.t") {
        Err(_) => None,
        Ok(t) => {
            let mut state = AdamState::new(&network.store);
            state.t = t.data()[0] as u64;
            for &id in &ids {
                if state.m[id.index()].is_empty() {
                    continue;
                }
                let name = &network.store.param(id).name;
                state.m[id.index()] = find(&format!("adam.m.{name}"))?.data().to_vec();
                state.v[id.index()] = find(&format!("adam.v.{name}"))?.data().to_vec();
            }
            Some(state)
        }
    };
    Ok(LoadedCheckpoint { meta, network, adam })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::PoolingMethod;
    use crate::nn::{Forward, Mode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network {
        let cfg = DccnnConfig {
            input_size: 32,
            init_channels: 4,
            growth_rate: 2,
            num_classes: 3,
            seed,
            ..DccnnConfig::default()
        };
        Network::new(&cfg, &MilConfig::default()).unwrap()
    }

    fn names() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    #[test]
    fn raw_format_layout() {
        let t = Tensor::new(vec![2], vec![1.5, -2.0]).unwrap();
        let bytes = encode_tensors(&[("w", &t)]);
        let mut expect = b"MIDC".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.5f64.to_le_bytes());
        expect.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, expect);
        assert_eq!(decode_tensors(&bytes).unwrap(), vec![("w".to_string(), t)]);
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut net = small_net(4);
        // Perturb running stats so buffers are checked too.
        let id = net.store.find("stem.norm.running_var").unwrap();
        net.store.tensor_mut(id).data_mut()[0] = 0.123456789;
        let mut adam = AdamState::new(&net.store);
        adam.t = 7;
        adam.m[0][0] = 0.5;
        let bytes = checkpoint_bytes(&net, &names(), Some(&TrainConfig::default()), Some(&adam)).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.meta.class_names, names());
        assert_eq!(back.adam.as_ref(), Some(&adam));
        for ((_, a), (_, b)) in net.store.iter().zip(back.network.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[10, 3, 32, 32], |_| rng.gen_range(0.0..1.0));
        let p = |net: &Network| {
            let mut fwd = Forward::new(&net.store, Mode::Eval);
            let xv = fwd.input(x.clone());
            let out = net.forward(&mut fwd, xv).unwrap();
            fwd.tape.value(out.p_bag).data().to_vec()
        };
        assert_eq!(p(&net), p(&back.network));
        let again = checkpoint_bytes(&back.network, &names(), Some(&TrainConfig::default()), back.adam.as_ref()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn distinct_errors() {
        let net = small_net(1);
        let bytes = checkpoint_bytes(&net, &names(), None, None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = checkpoint_from_bytes(&bad).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            checkpoint_from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::VersionMismatch { found: 9, expected: 1 }))
        ));
        let cut = &bytes[..bytes.len() - 3];
        let err = checkpoint_from_bytes(cut).unwrap_err();
        let last = net.store.iter().last().unwrap().1.name.clone();
        assert!(err.to_string().contains("unexpected end"), "{err}");
        assert!(err.to_string().contains(&last), "{err}");
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..6]),
            Err(Error::Checkpoint(CheckpointError::UnexpectedEnd { tensor: None }))
        ));

        let huge = {
            let mut b = b"MIDC".to_vec();
            b.extend_from_slice(&1u32.to_le_bytes());
            b.extend_from_slice(&1u32.to_le_bytes());
            b.extend_from_slice(&1u32.to_le_bytes());
            b.push(b'h');
            b.extend_from_slice(&3u32.to_le_bytes());
            for _ in 0..3 {
                b.extend_from_slice(&u32::MAX.to_le_bytes());
            }
            b
        };
        assert!(matches!(
            decode_tensors(&huge),
            Err(CheckpointError::DimensionOverflow { tensor }) if tensor == "h"
        ));
        let only_config = encode_tensors(&[(CONFIG_TENSOR, &bytes_tensor(
            serde_json::to_string(&CheckpointMeta {
                dccnn: net.config.clone(),
                mil: net.mil.clone(),
                class_names: names(),
                train: None,
            })
            .unwrap()
            .as_bytes(),
        ))]);
        assert!(matches!(
            checkpoint_from_bytes(&only_config),
            Err(Error::Checkpoint(CheckpointError::MissingTensor(_)))
        ));
    }

    #[test]
    fn pooling_method_survives() {
        let cfg = DccnnConfig {
            input_size: 32,
            init_channels: 4,
            growth_rate: 2,
            num_classes: 2,
            ..DccnnConfig::default()
        };
        let mil = MilConfig {
            method: PoolingMethod::Max,
            ..MilConfig::default()
        };
        let net = Network::new(&cfg, &mil).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.midc");
        save_checkpoint(&path, &net, &["x".into(), "y".into()], None, None).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.network.mil.method, PoolingMethod::Max);
        assert!(back.adam.is_none());
        assert!(load_checkpoint(&dir.path().join("missing")).is_err());
    }
}
