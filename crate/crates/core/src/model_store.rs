//! Model persistence: JSON manifest plus one little-endian float32
//! weight blob, weights then bias per layer.

use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Activation, Layer, MlpNet};

/// Whether a model consumes one voxel or a flattened 3x3x3 patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Voxel,
    Neighborhood,
}

/// Input layout of the neighborhood model, recorded so training and
/// inference can never disagree.
pub const FLATTEN_ORDER: &str = "((i*3+j)*3+k)*n+c";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: String,
    pub output_activation: String,
    pub dropout_rate: f64,
    pub mode: ModelMode,
    /// Checksum of the acquisition protocol used at training.
    pub protocol_hash: String,
    pub dictionary_m: usize,
    pub dictionary_checksum: String,
    /// Patch flatten order; always FLATTEN_ORDER for neighborhood models.
    pub flatten_order: String,
}

impl ModelManifest {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Format(format!(
                "manifest needs at least 2 layer dims, has {}",
                self.layer_dims.len()
            )));
        }
        if *self.layer_dims.last().unwrap() != self.dictionary_m {
            return Err(Error::Format(format!(
                "output width {} does not match dictionary size {}",
                self.layer_dims.last().unwrap(),
                self.dictionary_m
            )));
        }
        let first = self.layer_dims[0];
        if self.mode == ModelMode::Neighborhood && first % 27 != 0 {
            return Err(Error::Format(format!(
                "neighborhood input width {first} is not a multiple of 27"
            )));
        }
        Activation::from_tag(&self.hidden_activation)?;
        Activation::from_tag(&self.output_activation)?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Format(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Signal channels the model consumes per voxel.
    pub fn signals_per_voxel(&self) -> usize {
        match self.mode {
            ModelMode::Voxel => self.layer_dims[0],
            ModelMode::Neighborhood => self.layer_dims[0] / 27,
        }
    }
}

pub fn save_model(net: &MlpNet<f32>, manifest: &ModelManifest, dir: &Path) -> Result<()> {
    manifest.validate()?;
    if net.layer_dims() != manifest.layer_dims {
        return Err(Error::Format(format!(
            "model dims {:?} do not match manifest dims {:?}",
            net.layer_dims(),
            manifest.layer_dims
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;

    let weights_path = dir.join("weights.bin");
    let file = fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for layer in &net.layers {
        for &v in &layer.weights {
            w.write_f32::<LittleEndian>(v).map_err(|e| Error::io(&weights_path, e))?;
        }
        for &v in &layer.bias {
            w.write_f32::<LittleEndian>(v).map_err(|e| Error::io(&weights_path, e))?;
        }
    }
    use std::io::Write as _;
    w.flush().map_err(|e| Error::io(&weights_path, e))
}

pub fn load_model(dir: &Path) -> Result<(MlpNet<f32>, ModelManifest)> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(&manifest_path, e.to_string()))?;
    manifest.validate()?;

    let weights_path = dir.join("weights.bin");
    let blob = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let hidden = Activation::from_tag(&manifest.hidden_activation)?;
    let output = Activation::from_tag(&manifest.output_activation)?;

    let mut cursor = std::io::Cursor::new(&blob);
    let mut layers = Vec::with_capacity(manifest.layer_dims.len() - 1);
    let last = manifest.layer_dims.len() - 2;
    for (l, pair) in manifest.layer_dims.windows(2).enumerate() {
        let (in_dim, out_dim) = (pair[0], pair[1]);
        let need = (in_dim * out_dim + out_dim) * 4;
        let remaining = blob.len() - cursor.position() as usize;
        if remaining < need {
            return Err(Error::Format(format!(
                "weight blob ends inside layer {l} ({in_dim}x{out_dim}): needs {need} more bytes, {remaining} left"
            )));
        }
        let mut weights = vec![0.0f32; in_dim * out_dim];
        cursor
            .read_f32_into::<LittleEndian>(&mut weights)
            .map_err(|e| Error::io(&weights_path, e))?;
        let mut bias = vec![0.0f32; out_dim];
        cursor
            .read_f32_into::<LittleEndian>(&mut bias)
            .map_err(|e| Error::io(&weights_path, e))?;
        layers.push(Layer {
            weights,
            bias,
            activation: if l == last { output } else { hidden },
            in_dim,
            out_dim,
        });
    }
    let leftover = blob.len() - cursor.position() as usize;
    if leftover != 0 {
        return Err(Error::Format(format!(
            "weight blob has {leftover} bytes beyond the final layer"
        )));
    }
    Ok((MlpNet { layers, dropout_rate: manifest.dropout_rate }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::init_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_manifest(dims: Vec<usize>, mode: ModelMode) -> ModelManifest {
        ModelManifest {
            dictionary_m: *dims.last().unwrap(),
            layer_dims: dims,
            hidden_activation: "relu".into(),
            output_activation: "sigmoid".into(),
            dropout_rate: 0.2,
            mode,
            protocol_hash: "deadbeef".into(),
            dictionary_checksum: "cafe".into(),
            flatten_order: FLATTEN_ORDER.into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let dims = vec![12, 16, 10, 8];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net: MlpNet<f32> =
            init_model(&dims, Activation::Relu, Activation::Sigmoid, 0.2, &mut rng).unwrap();
        let manifest = sample_manifest(dims, ModelMode::Voxel);
        save_model(&net, &manifest, dir.path()).unwrap();
        let (back, back_manifest) = load_model(dir.path()).unwrap();
        assert_eq!(back_manifest.layer_dims, manifest.layer_dims);
        for (a, b) in net.layers.iter().zip(&back.layers) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
            assert_eq!(a.activation, b.activation);
        }
        // Identical predictions on a fixed batch.
        let batch: Vec<f32> = (0..24).map(|i| i as f32 * 0.1).collect();
        assert_eq!(
            net.forward_inference(&batch).unwrap(),
            back.forward_inference(&batch).unwrap()
        );
    }

    #[test]
    fn short_blob_names_offending_layer() {
        let dir = tempfile::tempdir().unwrap();
        let dims = vec![4, 6, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net: MlpNet<f32> =
            init_model(&dims, Activation::Relu, Activation::Sigmoid, 0.1, &mut rng).unwrap();
        save_model(&net, &sample_manifest(dims, ModelMode::Voxel), dir.path()).unwrap();
        let blob_path = dir.path().join("weights.bin");
        let blob = fs::read(&blob_path).unwrap();
        fs::write(&blob_path, &blob[..blob.len() - 4]).unwrap();
        let err = load_model(dir.path()).unwrap_err().to_string();
        assert!(err.contains("layer 1"), "error should name the layer: {err}");
    }

    #[test]
    fn oversized_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dims = vec![4, 6, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net: MlpNet<f32> =
            init_model(&dims, Activation::Relu, Activation::Sigmoid, 0.1, &mut rng).unwrap();
        save_model(&net, &sample_manifest(dims, ModelMode::Voxel), dir.path()).unwrap();
        let blob_path = dir.path().join("weights.bin");
        let mut blob = fs::read(&blob_path).unwrap();
        blob.extend_from_slice(&[0u8; 8]);
        fs::write(&blob_path, blob).unwrap();
        assert!(load_model(dir.path()).unwrap_err().to_string().contains("beyond"));
    }

    #[test]
    fn unknown_activation_tag_rejected() {
        let mut m = sample_manifest(vec![4, 3], ModelMode::Voxel);
        m.output_activation = "softmax".into();
        assert!(m.validate().is_err());
    }

    #[test]
    fn neighborhood_width_must_divide_27() {
        let m = sample_manifest(vec![27 * 5, 8, 3], ModelMode::Neighborhood);
        assert!(m.validate().is_ok());
        assert_eq!(m.signals_per_voxel(), 5);
        let bad = sample_manifest(vec![28, 8, 3], ModelMode::Neighborhood);
        assert!(bad.validate().is_err());
    }
}
