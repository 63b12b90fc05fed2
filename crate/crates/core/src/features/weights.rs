//! Weight container: a JSON manifest plus one raw little-endian `f32` blob.
//!
//! ```json
//! { "blob": "weights.bin",
//!   "tensors": [ { "name": "conv1.weight", "shape": [96, 3, 11, 11],
//!                  "dtype": "f32", "offset": 0, "length": 139392 } ] }
//! ```
//!
//! Offsets and lengths are in bytes and the blob is the tensors concatenated
//! in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::cnn::ConvNetSpec;
use crate::error::{Error, Result, WeightStoreError};

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl StoredTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named `f32` tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, StoredTensor>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    blob: Option<String>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    length: usize,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor `{name}` of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        self.tensors.insert(name, StoredTensor { shape, data });
        Ok(())
    }

    /// Inserts `f64` values, narrowing to the container's `f32`.
    pub fn insert_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.insert(name, shape, data.iter().map(|v| *v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    /// Values of `name` widened to `f64`, checking the shape.
    pub fn get_f64(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>, WeightStoreError> {
        let t = self
            .get(name)
            .ok_or_else(|| WeightStoreError::MissingTensor(name.to_string()))?;
        if t.shape != shape {
            return Err(WeightStoreError::ShapeMismatch {
                name: name.to_string(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t.data.iter().map(|v| f64::from(*v)).collect())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Appends every tensor of `other`, replacing same-named entries.
    pub fn merge(&mut self, other: WeightStore) {
        self.tensors.extend(other.tensors);
    }

    /// Checks that every tensor the network needs is present with the right shape.
    pub fn validate_for(&self, spec: &ConvNetSpec) -> Result<(), WeightStoreError> {
        for (name, shape) in spec.tensor_shapes() {
            match self.get(&name) {
                None => return Err(WeightStoreError::MissingTensor(name)),
                Some(t) if t.shape != shape => {
                    return Err(WeightStoreError::ShapeMismatch {
                        name,
                        expected: shape,
                        found: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Deterministic init: each kernel, viewed as `out × (in·kh·kw)`, gets
    /// orthonormal rows (or columns when `out` exceeds the fan-in); biases are zero.
    pub fn random_orthogonal(spec: &ConvNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for (name, shape) in spec.tensor_shapes() {
            let data = if shape.len() == 4 {
                let rows = shape[0];
                let cols = shape[1] * shape[2] * shape[3];
                orthogonal(rows, cols, &mut rng)
            } else {
                vec![0.0; shape.iter().product()]
            };
            store.insert(name, shape, data)?;
        }
        Ok(store)
    }
}

fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    // Orthonormalize along the shorter dimension with modified Gram-Schmidt.
    let (n, len, transposed) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n);
    while vecs.len() < n {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0f32; rows * cols];
    for (i, v) in vecs.iter().enumerate() {
        for (j, x) in v.iter().enumerate() {
            let (r, c) = if transposed { (j, i) } else { (i, j) };
            out[r * cols + c] = *x as f32;
        }
    }
    out
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes the manifest to `path` and the blob next to it with extension `.bin`.
pub fn save_weight_store(store: &WeightStore, path: &Path) -> Result<(), WeightStoreError> {
    let blob_path = blob_path_for(path);
    let blob_name = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| WeightStoreError::MalformedManifest(format!("bad path {}", path.display())))?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let offset = blob.len();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        blob: Some(blob_name),
        tensors: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| WeightStoreError::MalformedManifest(e.to_string()))?;
    text.push('\n');
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| WeightStoreError::Io { path: p, source }
    };
    fs::write(path, text).map_err(io(path))?;
    fs::write(&blob_path, blob).map_err(io(&blob_path))?;
    Ok(())
}

pub fn load_weight_store(path: &Path) -> Result<WeightStore, WeightStoreError> {
    let text = fs::read_to_string(path).map_err(|source| WeightStoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| WeightStoreError::MalformedManifest(e.to_string()))?;
    let blob_path = match &manifest.blob {
        Some(name) => path.parent().unwrap_or(Path::new(".")).join(name),
        None => blob_path_for(path),
    };
    let blob = fs::read(&blob_path).map_err(|source| WeightStoreError::Io {
        path: blob_path.clone(),
        source,
    })?;

    let mut store = WeightStore::new();
    let mut expected_offset = 0usize;
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(WeightStoreError::MalformedManifest(format!(
                "tensor `{}` has dtype `{}`, only f32 is supported",
                e.name, e.dtype
            )));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 4 {
            return Err(WeightStoreError::MalformedManifest(format!(
                "tensor `{}` of shape {:?} declares {} bytes",
                e.name, e.shape, e.length
            )));
        }
        if e.offset != expected_offset {
            return Err(WeightStoreError::MalformedManifest(format!(
                "tensor `{}` at offset {} breaks manifest order (expected {})",
                e.name, e.offset, expected_offset
            )));
        }
        let end = e.offset + e.length;
        if end > blob.len() {
            return Err(WeightStoreError::TruncatedBlob {
                name: e.name.clone(),
                start: e.offset,
                end,
                len: blob.len(),
            });
        }
        if store.get(&e.name).is_some() {
            return Err(WeightStoreError::MalformedManifest(format!(
                "duplicate tensor `{}`",
                e.name
            )));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.tensors.insert(
            e.name.clone(),
            StoredTensor {
                shape: e.shape.clone(),
                data,
            },
        );
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(WeightStoreError::MalformedManifest(format!(
            "blob has {} bytes beyond the last tensor",
            blob.len() - expected_offset
        )));
    }
    Ok(store)
}
