//! Named parameter tensors, initializers and the on-disk tensor archive.
//!
//! # Archive layout
//!
//! Archives use the safetensors container:
//!
//! ```text
//! u64 LE   header length N
//! N bytes  UTF-8 JSON header: { "<name>": { "dtype": "F64", "shape": [r, c],
//!          "data_offsets": [begin, end] }, ..., "__metadata__": { "lid": "<json>" } }
//! ...      raw little-endian tensor data, concatenated
//! ```
//!
//! All tensors are stored as `F64` with a rank-2 shape. Model bundles keep
//! their configuration as a JSON string under the single metadata key `lid`.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

const METADATA_KEY: &str = "lid";

/// Ordered collection of named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a tensor; returns its id.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> usize {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.values[id] = value;
            return id;
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn get_by_id(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_by_id_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// Copies every tensor of `other` into `self`, keeping names.
    pub fn extend_from(&mut self, other: &ParamStore) {
        for (n, v) in other.iter() {
            self.insert(n, v.clone());
        }
    }

    /// Replaces values with those in `loaded`, requiring identical names and shapes.
    pub fn assign_checked(&mut self, loaded: &[(String, Mat)]) -> Result<()> {
        for (name, m) in loaded {
            let id = self
                .id(name)
                .ok_or_else(|| Error::UnknownTensor(name.clone()))?;
            let expected = self.values[id].shape();
            if expected != m.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: expected.to_vec(),
                    found: m.shape().to_vec(),
                });
            }
        }
        let provided: std::collections::HashSet<&str> =
            loaded.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(missing) = self.names.iter().find(|n| !provided.contains(n.as_str())) {
            return Err(Error::MissingTensor(missing.clone()));
        }
        for (name, m) in loaded {
            let id = self.index[name];
            self.values[id] = m.clone();
        }
        Ok(())
    }
}

/// Whether decoupled weight decay applies to a parameter: biases and
/// layer-norm tensors are exempt.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with("/b") || name.contains("ln/") || name.ends_with("/gain") || name.ends_with("/beta"))
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn truncated_normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    let data = (0..rows * cols)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Mat::from_vec(rows, cols, data)
}

/// Random `n`×`n` orthogonal matrix (Gram–Schmidt on a Gaussian matrix).
pub fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Mat {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for u in &cols {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            cols.push(v);
        }
    }
    let mut m = Mat::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    m
}

/// Serializes named tensors plus an optional metadata string.
pub fn save_archive<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Mat)>,
    metadata: Option<&str>,
) -> Result<Vec<u8>> {
    let owned: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, m)| {
            let bytes = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.to_string(), m.shape().to_vec(), bytes)
        })
        .collect();
    let views = owned
        .iter()
        .map(|(n, shape, bytes)| {
            TensorView::new(Dtype::F64, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Archive(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = metadata.map(|m| HashMap::from([(METADATA_KEY.to_string(), m.to_string())]));
    safetensors::tensor::serialize(views, info).map_err(|e| Error::Archive(e.to_string()))
}

/// Reads every tensor in an archive, in name order, plus its metadata string.
pub fn load_archive(bytes: &[u8]) -> Result<(Vec<(String, Mat)>, Option<String>)> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| Error::Archive(e.to_string()))?;
    let metadata = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned());
    let mut out = Vec::with_capacity(st.len());
    let mut names = st.names();
    names.sort_unstable();
    for name in names {
        let view = st.tensor(name).map_err(|e| Error::Archive(e.to_string()))?;
        if view.dtype() != Dtype::F64 {
            return Err(Error::Archive(format!(
                "tensor `{name}` has dtype {:?}, expected F64",
                view.dtype()
            )));
        }
        let shape = view.shape();
        let (rows, cols) = match shape {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has rank {}, expected 2",
                    shape.len()
                )))
            }
        };
        let data = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        out.push((name.to_string(), Mat::from_vec(rows, cols, data)));
    }
    Ok((out, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn archive_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("a/w", truncated_normal(3, 4, 1.0, &mut rng));
        store.insert("b/b", Mat::from_vec(1, 2, vec![f64::MIN_POSITIVE, -0.0]));
        let bytes = save_archive(store.iter(), Some("{\"k\":1}")).unwrap();
        let (loaded, meta) = load_archive(&bytes).unwrap();
        assert_eq!(meta.as_deref(), Some("{\"k\":1}"));
        let mut other = store.clone();
        other.get_mut("a/w").unwrap().data_mut()[0] = 99.0;
        other.assign_checked(&loaded).unwrap();
        for ((_, a), (_, b)) in store.iter().zip(other.iter()) {
            let bits = |m: &Mat| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncated_stream_is_a_container_error() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::zeros(2, 2));
        let bytes = save_archive(store.iter(), None).unwrap();
        assert!(matches!(load_archive(&bytes[..bytes.len() - 3]), Err(Error::Archive(_))));
        assert!(matches!(load_archive(&bytes[..4]), Err(Error::Archive(_))));
    }

    #[test]
    fn assign_checks_names_and_shapes() {
        let mut store = ParamStore::new();
        store.insert("w", Mat::zeros(2, 2));
        let err = store.assign_checked(&[("w".into(), Mat::zeros(2, 3))]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref name, .. } if name == "w"));
        let err = store.assign_checked(&[("v".into(), Mat::zeros(2, 2))]).unwrap_err();
        assert!(matches!(err, Error::UnknownTensor(_)));
        assert!(matches!(store.assign_checked(&[]), Err(Error::MissingTensor(_))));
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthogonal(6, &mut rng);
        let qtq = q.transpose().matmul(&q);
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((qtq[(i, j)] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = truncated_normal(50, 50, INIT_STD, &mut rng);
        assert!(m.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
    }

    #[test]
    fn decay_exemptions() {
        assert!(is_decayed("encoder/layer0/attn/q/w"));
        assert!(!is_decayed("encoder/layer0/attn/q/b"));
        assert!(!is_decayed("encoder/emb_ln/gain"));
        assert!(!is_decayed("encoder/layer0/ffn_ln/beta"));
    }
}
