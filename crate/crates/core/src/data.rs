//! Dataset bundles: in-memory model, on-disk layout and a synthetic
//! generator.
//!
//! A bundle directory holds
//!
//! | file               | contents                                        |
//! |--------------------|-------------------------------------------------|
//! | `meta.json`        | dims and splits (keys sorted)                   |
//! | `features.f32`     | `n × c × h × w` little-endian `f32`, row-major  |
//! | `labels.u32`       | `n` little-endian `u32`                         |
//! | `attributes.f32`   | `k × d` class-attribute matrix                  |
//! | `attr_vectors.f32` | `d × g` attribute semantic vectors              |
//! | `clusters.json`    | optional attribute partition                    |

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dedn::ClusterPartition;
use crate::error::{DataError, Error, Result};
use crate::tensor::Tensor;

pub const META_FILE: &str = "meta.json";
pub const FEATURES_FILE: &str = "features.f32";
pub const LABELS_FILE: &str = "labels.u32";
pub const ATTRIBUTES_FILE: &str = "attributes.f32";
pub const ATTR_VECTORS_FILE: &str = "attr_vectors.f32";
pub const CLUSTERS_FILE: &str = "clusters.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

impl SplitSpec {
    pub fn num_classes(&self) -> usize {
        self.seen_classes.len() + self.unseen_classes.len()
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen_classes.binary_search(&class).is_ok()
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen_classes.binary_search(&class).is_ok()
    }

    /// Checks that the class lists are sorted and partition `0..k`.
    pub fn validate_classes(&self, k: usize) -> Result<(), DataError> {
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if !sorted(&self.seen_classes) || !sorted(&self.unseen_classes) {
            return Err(DataError::ClassSplit("class lists must be strictly increasing".into()));
        }
        if self.seen_classes.is_empty() {
            return Err(DataError::ClassSplit("no seen classes".into()));
        }
        if self.unseen_classes.is_empty() {
            return Err(DataError::EmptyUnseen);
        }
        let mut hit = vec![false; k];
        for &c in self.seen_classes.iter().chain(&self.unseen_classes) {
            if c >= k {
                return Err(DataError::ClassSplit(format!("class {c} out of range for {k} classes")));
            }
            if std::mem::replace(&mut hit[c], true) {
                return Err(DataError::ClassSplit(format!("class {c} is both seen and unseen")));
            }
        }
        if let Some(c) = hit.iter().position(|h| !h) {
            return Err(DataError::ClassSplit(format!("class {c} is neither seen nor unseen")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    /// `n × c × h × w`.
    pub features: Tensor,
    pub labels: Vec<u32>,
    /// `k × d`.
    pub attributes: Tensor,
    /// `d × g`.
    pub attr_vectors: Tensor,
    pub splits: SplitSpec,
    pub partition: Option<ClusterPartition>,
}

/// Contents of `meta.json`. Fields are declared in lexicographic order so the
/// serialized keys are sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub c: usize,
    pub d: usize,
    pub g: usize,
    pub h: usize,
    pub k: usize,
    pub n: usize,
    pub seen_classes: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub unseen_classes: Vec<usize>,
    pub w: usize,
}

impl DatasetBundle {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    fn fdim(&self, i: usize) -> usize {
        self.features.shape().get(i).copied().unwrap_or(0)
    }

    pub fn c(&self) -> usize {
        self.fdim(1)
    }

    pub fn h(&self) -> usize {
        self.fdim(2)
    }

    pub fn w(&self) -> usize {
        self.fdim(3)
    }

    /// Number of regions, `h · w`.
    pub fn r(&self) -> usize {
        self.h() * self.w()
    }

    pub fn k(&self) -> usize {
        self.attributes.rows()
    }

    pub fn d(&self) -> usize {
        self.attributes.cols()
    }

    pub fn g(&self) -> usize {
        self.attr_vectors.cols()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Feature map of sample `i`, flattened to `c × r`.
    pub fn feature(&self, i: usize) -> Tensor {
        let (c, r) = (self.c(), self.r());
        let data = self.features.data()[i * c * r..(i + 1) * c * r].to_vec();
        Tensor::new([c, r], data).expect("feature slice matches its shape")
    }

    pub fn meta(&self) -> Meta {
        Meta {
            c: self.c(),
            d: self.d(),
            g: self.g(),
            h: self.h(),
            k: self.k(),
            n: self.n(),
            seen_classes: self.splits.seen_classes.clone(),
            test_indices: self.splits.test_indices.clone(),
            train_indices: self.splits.train_indices.clone(),
            unseen_classes: self.splits.unseen_classes.clone(),
            w: self.w(),
        }
    }

    /// Scales every sample's feature map to unit Euclidean norm.
    pub fn unit_normalize_features(&mut self) {
        let per = self.c() * self.r();
        if per == 0 {
            return;
        }
        for chunk in self.features.data_mut().chunks_mut(per) {
            let norm = chunk.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 0.0 {
                chunk.iter_mut().for_each(|x| *x /= norm);
            }
        }
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        let shape = self.features.shape();
        if shape.len() != 4 {
            return Err(DataError::Dims(format!("features must be 4-D, got {shape:?}")).into());
        }
        let (n, k, d) = (self.n(), self.k(), self.d());
        if shape[0] != n {
            return Err(DataError::Dims(format!("{} feature maps for {n} labels", shape[0])).into());
        }
        if self.attr_vectors.rows() != d || self.attr_vectors.shape().len() != 2 {
            return Err(DataError::Dims(format!(
                "attribute vectors {:?} do not match {d} attributes",
                self.attr_vectors.shape()
            ))
            .into());
        }
        for (name, t) in [
            ("features", &self.features),
            ("attributes", &self.attributes),
            ("attribute vectors", &self.attr_vectors),
        ] {
            if !t.is_finite() {
                return Err(DataError::Dims(format!("{name} contain non-finite values")).into());
            }
        }
        self.splits.validate_classes(k)?;
        for (sample, &label) in self.labels.iter().enumerate() {
            if label as usize >= k {
                return Err(DataError::LabelOutOfRange { sample, label, k }.into());
            }
        }
        let mut role = vec![0u8; n];
        for (list, tag) in [(&self.splits.train_indices, 1u8), (&self.splits.test_indices, 2u8)] {
            for &index in list {
                if index >= n {
                    return Err(DataError::SampleOutOfRange { index, n }.into());
                }
                if role[index] != 0 {
                    return Err(DataError::TrainTestOverlap(index).into());
                }
                role[index] = tag;
            }
        }
        for &sample in &self.splits.train_indices {
            let label = self.labels[sample];
            if !self.splits.is_seen(label as usize) {
                return Err(DataError::SplitViolation { sample, label }.into());
            }
        }
        let test_seen = self.splits.test_indices.iter().any(|&i| self.splits.is_seen(self.label(i)));
        let test_unseen = self.splits.test_indices.iter().any(|&i| self.splits.is_unseen(self.label(i)));
        if !(test_seen && test_unseen) {
            return Err(DataError::IncompleteTestSplit.into());
        }
        if let Some(p) = &self.partition {
            if p.d() != d {
                return Err(DataError::Dims(format!("partition covers {} attributes, bundle has {d}", p.d())).into());
            }
        }
        Ok(())
    }
}

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_exact_file(dir: &Path, name: &str, expected: u64) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() as u64 != expected {
        return Err(DataError::SizeMismatch {
            file: name.to_string(),
            expected,
            actual: bytes.len() as u64,
        }
        .into());
    }
    Ok(bytes)
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect()
}

/// Writes `bundle` to `dir` (created if needed) after validating it.
pub fn save_bundle(bundle: &DatasetBundle, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&bundle.meta()).expect("meta serializes");
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
    write_f32(&dir.join(FEATURES_FILE), bundle.features.data())?;
    let labels: Vec<u8> = bundle.labels.iter().flat_map(|x| x.to_le_bytes()).collect();
    let labels_path = dir.join(LABELS_FILE);
    fs::write(&labels_path, labels).map_err(|e| Error::io(&labels_path, e))?;
    write_f32(&dir.join(ATTRIBUTES_FILE), bundle.attributes.data())?;
    write_f32(&dir.join(ATTR_VECTORS_FILE), bundle.attr_vectors.data())?;
    if let Some(p) = &bundle.partition {
        crate::clustering::save_partition(p, dir.join(CLUSTERS_FILE))?;
    }
    Ok(())
}

/// Reads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<DatasetBundle> {
    let dir = dir.as_ref();
    for name in [META_FILE, FEATURES_FILE, LABELS_FILE, ATTRIBUTES_FILE, ATTR_VECTORS_FILE] {
        if !dir.join(name).is_file() {
            return Err(DataError::MissingFile(dir.join(name).display().to_string()).into());
        }
    }
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    let Meta { n, c, h, w, k, d, g, .. } = meta;

    let feats = read_exact_file(dir, FEATURES_FILE, 4 * (n * c * h * w) as u64)?;
    let labels = read_exact_file(dir, LABELS_FILE, 4 * n as u64)?;
    let attrs = read_exact_file(dir, ATTRIBUTES_FILE, 4 * (k * d) as u64)?;
    let vecs = read_exact_file(dir, ATTR_VECTORS_FILE, 4 * (d * g) as u64)?;

    let clusters_path = dir.join(CLUSTERS_FILE);
    let partition = if clusters_path.is_file() {
        Some(crate::clustering::load_manual_partition(&clusters_path, d)?)
    } else {
        None
    };

    let bundle = DatasetBundle {
        features: Tensor::new([n, c, h, w], f32s(&feats))?,
        labels: labels
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        attributes: Tensor::new([k, d], f32s(&attrs))?,
        attr_vectors: Tensor::new([d, g], f32s(&vecs))?,
        splits: SplitSpec {
            seen_classes: meta.seen_classes,
            unseen_classes: meta.unseen_classes,
            train_indices: meta.train_indices,
            test_indices: meta.test_indices,
        },
        partition,
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Settings of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub k_seen: usize,
    pub k_unseen: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub g: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 20,
            k_seen: 10,
            k_unseen: 5,
            c: 8,
            h: 3,
            w: 3,
            d: 12,
            g: 6,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_per_class", self.n_per_class),
            ("k_seen", self.k_seen),
            ("k_unseen", self.k_unseen),
            ("c", self.c),
            ("h", self.h),
            ("w", self.w),
            ("d", self.d),
            ("g", self.g),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// Deterministic attribute-linear dataset.
///
/// Each class row of `A` switches on `⌊d/2⌋` (at least one) attributes at
/// random, distinct across classes when the combinations allow it.
/// Attribute vectors are standard normal. Attribute `a` owns region
/// `a mod r` and a random channel signature there; a class pattern is the sum
/// of the signatures of its attributes, and every sample is its class pattern
/// plus Gaussian noise. The last `k_unseen` classes are unseen; 80% of each
/// seen class trains, the rest and every unseen sample are test samples.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<DatasetBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.k_seen + cfg.k_unseen;
    let r = cfg.h * cfg.w;
    let cr = cfg.c * r;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let on = (cfg.d / 2).max(1);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut row = vec![0.0f32; cfg.d];
        for _attempt in 0..100 {
            row.fill(0.0);
            for a in rand::seq::index::sample(&mut rng, cfg.d, on) {
                row[a] = 1.0;
            }
            if !rows.contains(&row) {
                break;
            }
        }
        rows.push(row);
    }
    let attributes: Vec<f32> = rows.concat();
    let attr_vectors: Vec<f32> = (0..cfg.d * cfg.g).map(|_| normal(&mut rng) as f32).collect();
    let sig_scale = 8.0 / (cfg.c as f64).sqrt();
    let signatures: Vec<f64> = (0..cfg.d * cfg.c).map(|_| normal(&mut rng) * sig_scale).collect();

    let patterns: Vec<Vec<f64>> = (0..k)
        .map(|class| {
            let mut p = vec![0.0; cr];
            for a in 0..cfg.d {
                let weight = attributes[class * cfg.d + a] as f64;
                let home = a % r;
                for ch in 0..cfg.c {
                    p[ch * r + home] += weight * signatures[a * cfg.c + ch];
                }
            }
            p
        })
        .collect();

    let n = k * cfg.n_per_class;
    let mut features = Vec::with_capacity(n * cr);
    let mut labels = Vec::with_capacity(n);
    for (class, pattern) in patterns.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            features.extend(pattern.iter().map(|&x| (x + cfg.noise_sigma * normal(&mut rng)) as f32));
            labels.push(class as u32);
        }
    }

    let n_train = ((cfg.n_per_class as f64) * 0.8).round() as usize;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..k {
        let mut ids: Vec<usize> = (class * cfg.n_per_class..(class + 1) * cfg.n_per_class).collect();
        if class < cfg.k_seen {
            ids.shuffle(&mut rng);
            train.extend_from_slice(&ids[..n_train]);
            test.extend_from_slice(&ids[n_train..]);
        } else {
            test.extend(ids);
        }
    }
    train.sort_unstable();
    test.sort_unstable();

    let bundle = DatasetBundle {
        features: Tensor::new([n, cfg.c, cfg.h, cfg.w], features)?,
        labels,
        attributes: Tensor::new([k, cfg.d], attributes)?,
        attr_vectors: Tensor::new([cfg.d, cfg.g], attr_vectors)?,
        splits: SplitSpec {
            seen_classes: (0..cfg.k_seen).collect(),
            unseen_classes: (cfg.k_seen..k).collect(),
            train_indices: train,
            test_indices: test,
        },
        partition: None,
    };
    bundle.validate()?;
    Ok(bundle)
}
