//! Checkpoint format.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the raw
//! little-endian tensor payload. The header records configs, the vocabulary
//! id, and per-tensor shapes, offsets, and sha256 digests, so a loader can
//! validate compatibility and integrity before touching any weight. Saving
//! the same state twice produces identical bytes.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{EncoderConfig, TextConfig};
use crate::error::{Error, Result};
use crate::model::{FusionConfig, Model};
use crate::nn::NnModule;
use crate::real::{Dtype, Real};
use crate::rng::rng_from_seed;
use crate::training::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "lavaman.ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Pretext,
    Affordance,
    Action,
    Bbox,
}

impl CheckpointKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CheckpointKind::Pretext => "pretext",
            CheckpointKind::Affordance => "affordance",
            CheckpointKind::Action => "action",
            CheckpointKind::Bbox => "bbox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub byte_len: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub dtype: Dtype,
    pub step: u64,
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    pub vocab_size: usize,
    pub vocabulary_id: String,
    /// Hash of (encoder, text, fusion, vocab_size); two checkpoints with the
    /// same hash hold weight-compatible models.
    pub config_hash: String,
    pub train: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Weight-compatibility fingerprint of a model architecture.
pub fn config_hash(
    encoder: &EncoderConfig,
    text: &TextConfig,
    fusion: &FusionConfig,
    vocab_size: usize,
) -> String {
    let canon = serde_json::to_string(&(encoder, text, fusion, vocab_size))
        .expect("configs are plain data");
    hex(&Sha256::digest(canon.as_bytes()))
}

/// Conventional path of the vocabulary sidecar next to a checkpoint.
pub fn vocab_sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab.txt")
}

/// Hex digest of a file's bytes, recorded in reports for provenance.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn collect_tensors<F: Real>(
    prefix: &str,
    module: &mut dyn NnModule<F>,
) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    let mut out = Vec::new();
    module.visit_params(prefix, &mut |name, p| {
        let mut bytes = Vec::with_capacity(p.value().len() * F::DTYPE.byte_width());
        F::write_le(p.value(), &mut bytes);
        out.push((name.to_string(), p.shape().to_vec(), bytes));
    });
    out
}

/// Serializes the model (and optionally one head module under its own
/// prefix) to `path`.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    kind: CheckpointKind,
    step: u64,
    train: Option<&TrainConfig>,
    model: &mut Model<F>,
    head: Option<(&str, &mut dyn NnModule<F>)>,
) -> Result<()> {
    let mut tensors = collect_tensors("model", model);
    if let Some((prefix, module)) = head {
        tensors.extend(collect_tensors(prefix, module));
    }
    let mut names = std::collections::BTreeSet::new();
    for (name, _, _) in &tensors {
        if !names.insert(name.clone()) {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
    }

    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, bytes) in tensors {
        entries.push(TensorEntry {
            name,
            shape,
            offset: payload.len() as u64,
            byte_len: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
        });
        payload.extend_from_slice(&bytes);
    }

    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        kind,
        dtype: F::DTYPE,
        step,
        encoder: model.encoder_config(),
        text: model.text_config(),
        fusion: model.fusion_config(),
        vocab_size: model.vocab_size(),
        vocabulary_id: model.vocabulary_id().to_string(),
        config_hash: config_hash(
            &model.encoder_config(),
            &model.text_config(),
            &model.fusion_config(),
            model.vocab_size(),
        ),
        train: train.copied(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::invalid(format!("header serialization failed: {e}")))?;

    let mut file = Vec::with_capacity(8 + header_json.len() + payload.len());
    file.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    file.extend_from_slice(&header_json);
    file.extend_from_slice(&payload);
    std::fs::write(path, file).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Tensors not yet claimed by a module fill.
#[derive(Debug)]
pub struct TensorBag<F: Real> {
    path: PathBuf,
    map: HashMap<String, (Vec<usize>, Vec<F>)>,
}

impl<F: Real> TensorBag<F> {
    /// Copies every parameter of `module` (visited under `prefix`) out of the
    /// bag, consuming the entries. Missing names or shape disagreements fail.
    pub fn fill(&mut self, prefix: &str, module: &mut dyn NnModule<F>) -> Result<()> {
        let mut err = None;
        let map = &mut self.map;
        module.visit_params(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match map.remove(name) {
                None => err = Some(Error::mismatch(format!("checkpoint is missing tensor {name}"))),
                Some((shape, values)) => {
                    if shape != p.shape() {
                        err = Some(Error::mismatch(format!(
                            "tensor {name} has shape {shape:?}, module expects {:?}",
                            p.shape()
                        )));
                        return;
                    }
                    p.value_mut().copy_from_slice(&values);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    /// Fails if any tensor was never claimed.
    pub fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let mut names: Vec<&String> = self.map.keys().collect();
        names.sort();
        Err(Error::corrupt(
            &self.path,
            format!("unclaimed tensors: {}", names.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")),
        ))
    }
}

/// Reads a checkpoint, reconstructs the model, and returns any remaining
/// (head) tensors for the caller to claim via [`TensorBag::fill`].
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<(CheckpointHeader, Model<F>, TensorBag<F>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::corrupt(path, "file shorter than length prefix"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::corrupt(path, "header extends past end of file"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::corrupt(path, format!("header parse failed: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::corrupt(path, format!("unknown format {:?}", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {}", header.version)));
    }
    if header.dtype != F::DTYPE {
        return Err(Error::mismatch(format!(
            "checkpoint dtype is {}, loader expects {}",
            header.dtype.as_str(),
            F::DTYPE.as_str()
        )));
    }
    let expected_hash = config_hash(&header.encoder, &header.text, &header.fusion, header.vocab_size);
    if header.config_hash != expected_hash {
        return Err(Error::corrupt(path, "config hash does not match stored configs"));
    }

    let payload = &bytes[8 + header_len..];
    let width = F::DTYPE.byte_width();
    let mut map = HashMap::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let (off, len) = (t.offset as usize, t.byte_len as usize);
        if off + len > payload.len() {
            return Err(Error::corrupt(path, format!("tensor {} extends past payload", t.name)));
        }
        let numel: usize = t.shape.iter().product();
        if numel * width != len {
            return Err(Error::corrupt(
                path,
                format!("tensor {} byte length disagrees with shape", t.name),
            ));
        }
        let chunk = &payload[off..off + len];
        if hex(&Sha256::digest(chunk)) != t.sha256 {
            return Err(Error::corrupt(path, format!("tensor {} failed its digest", t.name)));
        }
        if map.insert(t.name.clone(), (t.shape.clone(), F::read_le(chunk))).is_some() {
            return Err(Error::corrupt(path, format!("duplicate tensor {}", t.name)));
        }
    }

    // Fresh weights are fully overwritten by the fill below.
    let mut model = Model::new(
        &mut rng_from_seed(0),
        header.encoder,
        header.text,
        header.fusion,
        header.vocab_size,
        header.vocabulary_id.clone(),
    )?;
    let mut bag = TensorBag { path: path.to_path_buf(), map };
    bag.fill("model", &mut model)?;
    Ok((header, model, bag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_model<F: Real>(seed: u64) -> Model<F> {
        let enc = EncoderConfig {
            image_size: 16,
            patch_size: 8,
            embed_dim: 16,
            depth_self: 1,
            depth_bidir: 1,
            heads: 2,
            mlp_ratio: 2.0,
        };
        let text = TextConfig { embed_dim: 8, depth: 1, heads: 2, mlp_ratio: 2.0, max_len: 4 };
        let fusion = FusionConfig {
            stages: 1,
            heads: 2,
            decoder_depth: 1,
            decoder_dim: 12,
            decoder_heads: 2,
            mlp_ratio: 2.0,
        };
        Model::new(&mut rng_from_seed(seed), enc, text, fusion, 11, "v0123456789abcdef".into()).unwrap()
    }

    fn sample_image(seed: u64) -> Array3<f32> {
        use rand::Rng;
        let mut rng = rng_from_seed(seed);
        let mut img = Array3::zeros((16, 16, 3));
        for v in img.iter_mut() {
            *v = rng.gen::<f32>();
        }
        img
    }

    #[test]
    fn checkpoint_roundtrips_weights_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model::<f32>(5);
        let cfg = TrainConfig::pretext();
        save_checkpoint(&path, CheckpointKind::Pretext, 42, Some(&cfg), &mut model, None).unwrap();

        let (header, loaded, bag) = load_checkpoint::<f32>(&path).unwrap();
        bag.finish().unwrap();
        assert_eq!(header.step, 42);
        assert_eq!(header.kind, CheckpointKind::Pretext);
        assert_eq!(header.vocabulary_id, "v0123456789abcdef");
        assert_eq!(header.train, Some(cfg));

        let img = sample_image(1);
        let ids = vec![1usize, 2, 3];
        let a = model.infer(&img, &ids).unwrap();
        let b = loaded.infer(&img, &ids).unwrap();
        assert_eq!(a.goal.per_patch, b.goal.per_patch, "loaded model must be bit-identical");
    }

    #[test]
    fn checkpoint_bytes_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let mut model = tiny_model::<f32>(9);
        save_checkpoint(&p1, CheckpointKind::Pretext, 7, None, &mut model, None).unwrap();
        save_checkpoint(&p2, CheckpointKind::Pretext, 7, None, &mut model, None).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model::<f32>(5);
        save_checkpoint(&path, CheckpointKind::Pretext, 0, None, &mut model, None).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert_eq!(err.code(), "corrupt");

        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn checkpoint_rejects_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model::<f32>(5);
        save_checkpoint(&path, CheckpointKind::Pretext, 0, None, &mut model, None).unwrap();
        let err = load_checkpoint::<f64>(&path).unwrap_err();
        assert_eq!(err.code(), "mismatch");
    }

    #[test]
    fn bag_reports_unclaimed_and_missing_tensors() {
        use crate::heads::ActionHead;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model::<f32>(5);
        let mut head = ActionHead::<f32>::new(&mut rng_from_seed(1), 16, 8);
        save_checkpoint(
            &path,
            CheckpointKind::Action,
            0,
            None,
            &mut model,
            Some(("action", &mut head)),
        )
        .unwrap();

        // Ignoring the head leaves unclaimed tensors.
        let (_, _, bag) = load_checkpoint::<f32>(&path).unwrap();
        assert!(bag.finish().is_err());

        // Claiming restores the exact weights.
        let (_, _, mut bag) = load_checkpoint::<f32>(&path).unwrap();
        let mut head2 = ActionHead::<f32>::new(&mut rng_from_seed(2), 16, 8);
        bag.fill("action", &mut head2).unwrap();
        bag.finish().unwrap();
        let probe = ndarray::Array1::linspace(0.0f32, 1.0, 16);
        let (a, _) = head.forward(&probe);
        let (b, _) = head2.forward(&probe);
        assert_eq!(a, b);

        // A head with different dims fails with a shape mismatch.
        let (_, _, mut bag) = load_checkpoint::<f32>(&path).unwrap();
        let mut wrong = ActionHead::<f32>::new(&mut rng_from_seed(2), 16, 16);
        assert!(bag.fill("action", &mut wrong).is_err());
    }

    #[test]
    fn pretext_checkpoint_supports_masked_forward() {
        // A loaded model keeps working end to end (not just parameter bytes).
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model::<f32>(3);
        save_checkpoint(&path, CheckpointKind::Pretext, 0, None, &mut model, None).unwrap();
        let (_, loaded, bag) = load_checkpoint::<f32>(&path).unwrap();
        bag.finish().unwrap();
        let grid = *loaded.grid();
        let mask = crate::mask::sample_mask(&grid, 0.5, 1).unwrap();
        let start = sample_image(2);
        let goal = sample_image(3);
        let (a, _) = model.forward(&start, Some(&goal), &mask, &[1, 2]).unwrap();
        let (b, _) = loaded.forward(&start, Some(&goal), &mask, &[1, 2]).unwrap();
        assert_eq!(a.goal.per_patch, b.goal.per_patch);
    }
}
