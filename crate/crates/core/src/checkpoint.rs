//! Checkpoint files: `CGAP1`, a little-endian `u32` header length, a JSON
//! header, then raw blobs.
//!
//! Per parameterized layer the blobs are weights, bias, weight velocity and
//! bias velocity (little-endian `f32`) followed by the mask as an LSB-first
//! bitset. A training checkpoint appends the saliency accumulators as
//! little-endian `f64`, one blob per parameterized layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::write_atomic;
use crate::graph::{DynamicNetwork, Layer, LayerSpec, Trainable};
use crate::nn::{ConvParams, FcParams, WeightMask};
use crate::plasticity::SaliencyLedger;
use crate::tensor::Tensor;
use crate::trainer::{RngState, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 5] = b"CGAP1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    input: (usize, usize, usize),
    class_count: usize,
    layers: Vec<LayerHeader>,
    /// Last completed epoch (0 for a bare network).
    epoch: usize,
    training: Option<TrainingHeader>,
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    #[serde(flatten)]
    spec: LayerSpec,
    /// Weight shape of conv/fc layers.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    weight_shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainingHeader {
    config: TrainConfig,
    state: TrainState,
    shuffle_rng: RngState,
    plasticity_rng: RngState,
    ledger_batch_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    F64,
    Bits,
}

impl Dtype {
    fn bytes_for(self, count: usize) -> usize {
        match self {
            Dtype::F32 => 4 * count,
            Dtype::F64 => 8 * count,
            Dtype::Bits => count.div_ceil(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    dtype: Dtype,
    count: usize,
    offset: usize,
    bytes: usize,
}

/// A loaded checkpoint: the network plus, for training checkpoints, the
/// state needed to resume.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub net: DynamicNetwork,
    pub epoch: usize,
    training: Option<Training>,
}

#[derive(Debug, Clone)]
struct Training {
    header: TrainingHeader,
    ledger_sums: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn has_training_state(&self) -> bool {
        self.training.is_some()
    }

    pub fn train_config(&self) -> Option<&TrainConfig> {
        self.training.as_ref().map(|t| &t.header.config)
    }

    pub fn train_state(&self) -> Option<&TrainState> {
        self.training.as_ref().map(|t| &t.header.state)
    }

    /// Rebuilds the trainer exactly as it was when saved.
    pub fn into_trainer(self) -> Result<Trainer> {
        let t = self
            .training
            .ok_or_else(|| Error::Checkpoint("checkpoint holds no training state".into()))?;
        let ledger = SaliencyLedger::from_parts(&self.net, t.ledger_sums, t.header.ledger_batch_count)?;
        Trainer::from_parts(
            self.net,
            ledger,
            t.header.config,
            t.header.state,
            t.header.shuffle_rng.restore()?,
            t.header.plasticity_rng.restore()?,
        )
    }
}

struct BlobWriter {
    entries: Vec<BlobEntry>,
    data: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, name: String, dtype: Dtype, count: usize, bytes: Vec<u8>) {
        debug_assert_eq!(bytes.len(), dtype.bytes_for(count));
        self.entries.push(BlobEntry {
            name,
            dtype,
            count,
            offset: self.data.len(),
            bytes: bytes.len(),
        });
        self.data.extend_from_slice(&bytes);
    }

    fn f32s(&mut self, name: String, v: &[f32]) {
        let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.push(name, Dtype::F32, v.len(), bytes);
    }

    fn f64s(&mut self, name: String, v: &[f64]) {
        let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        self.push(name, Dtype::F64, v.len(), bytes);
    }

    fn bits(&mut self, name: String, v: &[bool]) {
        let mut bytes = vec![0u8; v.len().div_ceil(8)];
        for (i, &b) in v.iter().enumerate() {
            if b {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        self.push(name, Dtype::Bits, v.len(), bytes);
    }
}

fn encode(net: &DynamicNetwork, trainer: Option<&Trainer>) -> Result<Vec<u8>> {
    let mut blobs = BlobWriter {
        entries: Vec::new(),
        data: Vec::new(),
    };
    let mut layers = Vec::with_capacity(net.layers().len());
    let spec = net.spec();
    for (l, (node, ls)) in net.layers().iter().zip(&spec.layers).enumerate() {
        let weight_shape = node.weights().map(|w| w.shape().to_vec());
        if let (Some(w), Some(b), Some(t)) = (node.weights(), node.bias(), node.trainable()) {
            blobs.f32s(format!("layer{l}.weights"), w.data());
            blobs.f32s(format!("layer{l}.bias"), b.data());
            blobs.f32s(format!("layer{l}.velocity_w"), t.velocity_w.data());
            blobs.f32s(format!("layer{l}.velocity_b"), t.velocity_b.data());
            blobs.bits(format!("layer{l}.mask"), t.mask.bits());
        }
        layers.push(LayerHeader {
            spec: *ls,
            weight_shape,
        });
    }
    let training = match trainer {
        Some(tr) => {
            for l in net.param_layers() {
                blobs.f64s(format!("layer{l}.saliency"), tr.ledger().sums(l));
            }
            Some(TrainingHeader {
                config: tr.config().clone(),
                state: tr.state().clone(),
                shuffle_rng: RngState::capture(tr.shuffle_rng()),
                plasticity_rng: RngState::capture(tr.plasticity_rng()),
                ledger_batch_count: tr.ledger().batch_count(),
            })
        }
        None => None,
    };
    let header = Header {
        version: VERSION,
        input: net.input_shape(),
        class_count: net.class_count(),
        layers,
        epoch: trainer.map_or(0, |t| t.state().epoch),
        training,
        blobs: blobs.entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + json.len() + blobs.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs.data);
    Ok(out)
}

/// Serializes a bare network (no training state).
pub fn network_to_bytes(net: &DynamicNetwork) -> Result<Vec<u8>> {
    encode(net, None)
}

/// Serializes a trainer with everything needed to resume it bit-exactly.
pub fn trainer_to_bytes(trainer: &Trainer) -> Result<Vec<u8>> {
    encode(trainer.net(), Some(trainer))
}

pub fn save_network(net: &DynamicNetwork, path: &Path) -> Result<()> {
    write_atomic(path, &network_to_bytes(net)?)
}

pub fn save_trainer(trainer: &Trainer, path: &Path) -> Result<()> {
    write_atomic(path, &trainer_to_bytes(trainer)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

struct BlobReader<'a> {
    entries: std::slice::Iter<'a, BlobEntry>,
    data: &'a [u8],
}

impl BlobReader<'_> {
    fn next(&mut self, name: &str, dtype: Dtype, count: usize) -> Result<&[u8]> {
        let e = self
            .entries
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing blob {name}")))?;
        if e.name != name || e.dtype != dtype || e.count != count {
            return Err(Error::Checkpoint(format!(
                "blob {:?} ({:?} x{}) where {name} ({dtype:?} x{count}) was expected",
                e.name, e.dtype, e.count
            )));
        }
        Ok(&self.data[e.offset..e.offset + e.bytes])
    }

    fn f32s(&mut self, name: String, shape: &[usize]) -> Result<Tensor> {
        let raw = self.next(&name, Dtype::F32, shape.iter().product())?;
        let v = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::from_vec(shape, v)
    }

    fn f64s(&mut self, name: String, count: usize) -> Result<Vec<f64>> {
        let raw = self.next(&name, Dtype::F64, count)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn bits(&mut self, name: String, count: usize) -> Result<Vec<bool>> {
        let raw = self.next(&name, Dtype::Bits, count)?;
        let bits: Vec<bool> = (0..count).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect();
        let padding = raw
            .last()
            .map_or(0, |&b| if count.is_multiple_of(8) { 0 } else { b >> (count % 8) });
        if padding != 0 {
            return Err(Error::Checkpoint(format!("blob {name} has set padding bits")));
        }
        Ok(bits)
    }
}

/// Parses and validates a checkpoint image.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let len_at = MAGIC.len();
    let header_len = u32::from_le_bytes(bytes[len_at..len_at + 4].try_into().expect("4 bytes")) as usize;
    let body = len_at + 4;
    if body + header_len > bytes.len() {
        return Err(Error::Checkpoint(format!(
            "header length {header_len} runs past the end of a {}-byte file",
            bytes.len()
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[body..body + header_len])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            header.version
        )));
    }
    let data = &bytes[body + header_len..];
    let mut expected_offset = 0;
    for e in &header.blobs {
        if e.offset != expected_offset || e.bytes != e.dtype.bytes_for(e.count) {
            return Err(Error::Checkpoint(format!("blob {} has inconsistent extent", e.name)));
        }
        expected_offset += e.bytes;
    }
    if expected_offset != data.len() {
        return Err(Error::Checkpoint(format!(
            "blob directory covers {expected_offset} bytes, file holds {}",
            data.len()
        )));
    }

    let mut reader = BlobReader {
        entries: header.blobs.iter(),
        data,
    };
    let mut layers = Vec::with_capacity(header.layers.len());
    for (l, lh) in header.layers.iter().enumerate() {
        let layer = match (lh.spec, &lh.weight_shape) {
            (
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                },
                Some(ws),
            ) if ws.len() == 4 && ws[0] == out && ws[2] == kernel && ws[3] == kernel => {
                let (p, t) = read_param_blobs(&mut reader, l, ws)?;
                Layer::Conv(ConvParams::new(p.0, p.1, stride, padding)?, t)
            }
            (LayerSpec::Fc { out }, Some(ws)) if ws.len() == 2 && ws[0] == out => {
                let (p, t) = read_param_blobs(&mut reader, l, ws)?;
                Layer::Fc(FcParams::new(p.0, p.1)?, t)
            }
            (LayerSpec::Relu, None) => Layer::Relu,
            (LayerSpec::Maxpool, None) => Layer::Maxpool,
            (LayerSpec::Flatten, None) => Layer::Flatten,
            _ => {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: header entry {lh:?} is inconsistent"
                )))
            }
        };
        layers.push(layer);
    }
    let net = DynamicNetwork::from_layers(header.input, header.class_count, layers)
        .map_err(|e| Error::Checkpoint(format!("stored structure is invalid: {e}")))?;
    if let Some(v) = net.validate().first() {
        return Err(Error::Checkpoint(format!("stored network is inconsistent: {v}")));
    }
    let training = match header.training {
        Some(th) => {
            let mut sums = vec![Vec::new(); net.layers().len()];
            for l in net.param_layers() {
                let n = net.layer(l).and_then(|n| n.weights()).map_or(0, |w| w.len());
                sums[l] = reader.f64s(format!("layer{l}.saliency"), n)?;
            }
            Some(Training {
                header: th,
                ledger_sums: sums,
            })
        }
        None => None,
    };
    if reader.entries.next().is_some() {
        return Err(Error::Checkpoint("unexpected trailing blobs".into()));
    }
    Ok(Checkpoint {
        net,
        epoch: header.epoch,
        training,
    })
}

type ParamPair = (Tensor, Tensor);

fn read_param_blobs(reader: &mut BlobReader<'_>, l: usize, ws: &[usize]) -> Result<(ParamPair, Trainable)> {
    let units = ws[0];
    let w = reader.f32s(format!("layer{l}.weights"), ws)?;
    let b = reader.f32s(format!("layer{l}.bias"), &[units])?;
    let velocity_w = reader.f32s(format!("layer{l}.velocity_w"), ws)?;
    let velocity_b = reader.f32s(format!("layer{l}.velocity_b"), &[units])?;
    let bits = reader.bits(format!("layer{l}.mask"), w.len())?;
    let mask = WeightMask::from_bits(ws, bits)?;
    Ok((
        (w, b),
        Trainable {
            mask,
            velocity_w,
            velocity_b,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NetworkSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net() -> DynamicNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = DynamicNetwork::build(&NetworkSpec::lenet5(3, 4, 5, 10), &mut rng).unwrap();
        let (w, _, t) = net.layer_mut(0).unwrap().parts_mut().unwrap();
        for i in [0, 3, 7, 70] {
            t.mask.clear(i);
            w.data_mut()[i] = 0.0;
        }
        net
    }

    #[test]
    fn network_round_trip_is_byte_identical() {
        let n = net();
        let bytes = network_to_bytes(&n).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.net.layers(), n.layers());
        assert_eq!(back.net.describe(), n.describe());
        assert!(!back.has_training_state());
        assert_eq!(network_to_bytes(&back.net).unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let bytes = network_to_bytes(&net()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Checkpoint(m)) if m.contains("magic")));

        let mut long = bytes.clone();
        long[5..9].copy_from_slice(&(u32::MAX).to_le_bytes());
        assert!(matches!(from_bytes(&long), Err(Error::Checkpoint(m)) if m.contains("header length")));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(from_bytes(truncated), Err(Error::Checkpoint(_))));

        let key = b"\"version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        let mut newer = bytes.clone();
        newer[at + key.len() - 1] = b'9';
        assert!(matches!(from_bytes(&newer), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn atomic_save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let n = net();
        save_network(&n, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.net.layers(), n.layers());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
