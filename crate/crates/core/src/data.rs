//! Synthetic paired data with graded similarity, and the `CWT1` tensor file.
//!
//! Each sample draws a latent `z = c_k + o_{k,s} + ε`, where `c_k` is a unit
//! superclass centroid, `o_{k,s}` a subclass offset of length `subclass_scale`,
//! and `ε` isotropic Gaussian noise with per-coordinate standard deviation
//! `noise / sqrt(latent_dim)` (so `|ε| ≈ noise`). The two modalities observe
//! `tanh(A z) + η` through fixed random maps `A_u`, `A_v` with independent
//! observation noise `η`.
//!
//! Template descriptors for zero-shot class embeddings are V-modality
//! observations of `c_k + j`, with a random jitter `j` of length
//! `template_jitter`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CwclError, Result};
use crate::numerics::{dot, Matrix, Rng};

pub const TENSOR_MAGIC: &[u8; 4] = b"CWT1";

/// Writes `CWT1`, rows and cols as little-endian `u64`, then the row-major
/// entries as little-endian `f64`.
pub fn write_tensor_file(path: &Path, m: &Matrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for x in m.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor_file(path: &Path) -> Result<Matrix> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn encode_tensor(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * m.data().len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
        return Err(CwclError::Format("bad magic, expected CWT1".into()));
    }
    if bytes.len() < 20 {
        return Err(CwclError::Format("truncated header".into()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| CwclError::Format(format!("dimensions {rows}x{cols} overflow")))?;
    let body = &bytes[20..];
    if body.len() < count {
        return Err(CwclError::Format(format!(
            "truncated: {rows}x{cols} needs {count} bytes, found {}",
            body.len()
        )));
    }
    if body.len() > count {
        return Err(CwclError::Format(format!(
            "{} trailing bytes after data",
            body.len() - count
        )));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_superclasses: usize,
    pub subclasses_per_class: usize,
    pub samples_per_cell: usize,
    pub latent_dim: usize,
    /// Latent noise norm σ.
    pub noise: f64,
    /// Subclass offset length α relative to unit centroids.
    pub subclass_scale: f64,
    pub u_dim: usize,
    pub v_dim: usize,
    /// Per-coordinate observation noise added after each modality map.
    pub modality_noise: f64,
    /// Fraction of seen-class samples assigned to the eval split.
    pub eval_fraction: f64,
    /// Fraction of superclasses held out of training entirely.
    pub held_out_fraction: f64,
    pub templates_per_class: usize,
    pub template_jitter: f64,
    /// Sampling seed (centroids, offsets, noise, splits).
    pub seed: u64,
    /// Seed for the modality maps and the frozen teacher tower.
    pub map_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_superclasses: 8,
            subclasses_per_class: 4,
            samples_per_cell: 40,
            latent_dim: 16,
            noise: 0.6,
            subclass_scale: 0.5,
            u_dim: 24,
            v_dim: 24,
            modality_noise: 0.1,
            eval_fraction: 0.2,
            held_out_fraction: 0.25,
            templates_per_class: 10,
            template_jitter: 0.8,
            seed: 0,
            map_seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CwclError::invalid(m));
        if self.num_superclasses < 2 {
            return fail("num_superclasses must be >= 2");
        }
        if self.subclasses_per_class < 1 {
            return fail("subclasses_per_class must be >= 1");
        }
        if self.samples_per_cell < 1 {
            return fail("samples_per_cell must be >= 1");
        }
        if self.latent_dim < 1 || self.u_dim < 1 || self.v_dim < 1 {
            return fail("dimensions must be >= 1");
        }
        for (name, x) in [
            ("noise", self.noise),
            ("subclass_scale", self.subclass_scale),
            ("modality_noise", self.modality_noise),
            ("template_jitter", self.template_jitter),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(CwclError::invalid(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return fail("eval_fraction must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.held_out_fraction) {
            return fail("held_out_fraction must be in [0, 1)");
        }
        if self.held_out_count() >= self.num_superclasses {
            return fail("at least one superclass must remain for training");
        }
        if self.templates_per_class < 1 {
            return fail("templates_per_class must be >= 1");
        }
        Ok(())
    }

    pub fn held_out_count(&self) -> usize {
        (self.num_superclasses as f64 * self.held_out_fraction).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub u_features: Matrix,
    pub v_features: Matrix,
    pub superclass: Vec<usize>,
    /// Global subclass id `k * S + s`.
    pub subclass: Vec<usize>,
    pub split: Vec<Split>,
    /// V-modality template descriptors, `templates_per_class` rows per class
    /// in class order.
    pub templates: Matrix,
    pub template_class: Vec<usize>,
    pub held_out_classes: Vec<usize>,
    pub num_classes: usize,
    pub spec: SyntheticSpec,
    /// Latent vectors, kept for diagnostics; not written to disk.
    pub latent: Option<Matrix>,
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.superclass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.superclass.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(Split::Train)
    }

    pub fn eval_indices(&self) -> Vec<usize> {
        self.indices(Split::Eval)
    }

    /// Template rows for one class, in their stored order.
    pub fn templates_for(&self, class: usize) -> Matrix {
        let rows: Vec<usize> = (0..self.template_class.len())
            .filter(|&t| self.template_class[t] == class)
            .collect();
        self.templates.select_rows(&rows)
    }

    pub fn teacher_seed(&self) -> u64 {
        self.spec.map_seed
    }
}

fn random_map(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Matrix {
    // Gains near 1.5 keep tanh out of both its linear and saturated regimes.
    Matrix::random_normal(in_dim, out_dim, 1.5 / (in_dim as f64).sqrt(), rng)
}

fn observe(z: &[f64], map: &Matrix, noise: f64, rng: &mut Rng) -> Vec<f64> {
    (0..map.cols())
        .map(|j| {
            let a: f64 = z.iter().enumerate().map(|(k, zk)| zk * map[(k, j)]).sum();
            a.tanh() + noise * rng.normal()
        })
        .collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<PairedDataset> {
    spec.validate()?;
    let k = spec.num_superclasses;
    let s = spec.subclasses_per_class;
    let l = spec.latent_dim;

    let mut class_rng = Rng::derive(spec.seed, "classes");
    let centroids: Vec<Vec<f64>> = (0..k).map(|_| class_rng.unit_vector(l)).collect();
    let offsets: Vec<Vec<f64>> = (0..k * s)
        .map(|_| {
            let d = class_rng.unit_vector(l);
            d.into_iter().map(|x| x * spec.subclass_scale).collect()
        })
        .collect();
    let mut held: Vec<usize> = (0..k).collect();
    class_rng.shuffle(&mut held);
    let mut held_out_classes: Vec<usize> = held[..spec.held_out_count()].to_vec();
    held_out_classes.sort_unstable();

    let mut map_rng = Rng::derive(spec.map_seed, "modality-maps");
    let map_u = random_map(spec.u_dim, l, &mut map_rng);
    let map_v = random_map(spec.v_dim, l, &mut map_rng);

    let mut sample_rng = Rng::derive(spec.seed, "samples");
    let n = k * s * spec.samples_per_cell;
    let per_coord = spec.noise / (l as f64).sqrt();
    let mut latent = Vec::with_capacity(n);
    let mut u_rows = Vec::with_capacity(n);
    let mut v_rows = Vec::with_capacity(n);
    let mut superclass = Vec::with_capacity(n);
    let mut subclass = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for class in 0..k {
        for sub in 0..s {
            let cell = class * s + sub;
            for _ in 0..spec.samples_per_cell {
                let z: Vec<f64> = (0..l)
                    .map(|d| centroids[class][d] + offsets[cell][d] + per_coord * sample_rng.normal())
                    .collect();
                u_rows.push(observe(&z, &map_u, spec.modality_noise, &mut sample_rng));
                v_rows.push(observe(&z, &map_v, spec.modality_noise, &mut sample_rng));
                let to_eval = held_out_classes.contains(&class)
                    || sample_rng.uniform() < spec.eval_fraction;
                split.push(if to_eval { Split::Eval } else { Split::Train });
                latent.push(z);
                superclass.push(class);
                subclass.push(cell);
            }
        }
    }

    let mut tmpl_rng = Rng::derive(spec.seed, "templates");
    let mut t_rows = Vec::with_capacity(k * spec.templates_per_class);
    let mut template_class = Vec::with_capacity(k * spec.templates_per_class);
    for (class, c) in centroids.iter().enumerate() {
        for _ in 0..spec.templates_per_class {
            let j = tmpl_rng.unit_vector(l);
            let z: Vec<f64> = c
                .iter()
                .zip(&j)
                .map(|(ci, ji)| ci + spec.template_jitter * ji)
                .collect();
            t_rows.push(observe(&z, &map_v, spec.modality_noise, &mut tmpl_rng));
            template_class.push(class);
        }
    }

    Ok(PairedDataset {
        u_features: Matrix::from_rows(&u_rows)?,
        v_features: Matrix::from_rows(&v_rows)?,
        superclass,
        subclass,
        split,
        templates: Matrix::from_rows(&t_rows)?,
        template_class,
        held_out_classes,
        num_classes: k,
        spec: spec.clone(),
        latent: Some(Matrix::from_rows(&latent)?),
    })
}

/// Mean cosine similarity of latent vectors over all pairs `i < j`, split
/// into same-superclass and cross-superclass pairs.
pub fn latent_cosine_stats(ds: &PairedDataset) -> Option<(f64, f64)> {
    let z = ds.latent.as_ref()?;
    let norms = z.row_norms();
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..z.rows() {
        for j in i + 1..z.rows() {
            let c = dot(z.row(i), z.row(j)) / (norms[i] * norms[j]);
            if ds.superclass[i] == ds.superclass[j] {
                within += c;
                nw += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    Some((within / nw.max(1) as f64, cross / nc.max(1) as f64))
}

pub const DATASET_FORMAT: &str = "cwcl-dataset-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub counts: Counts,
    pub dims: Dims,
    pub seeds: Seeds,
    pub spec: SyntheticSpec,
    pub held_out_classes: Vec<usize>,
    pub superclass: Vec<usize>,
    pub subclass: Vec<usize>,
    pub split: Vec<Split>,
    pub template_class: Vec<usize>,
    pub files: Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Counts {
    pub samples: usize,
    pub train: usize,
    pub eval: usize,
    pub classes: usize,
    pub templates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub u: usize,
    pub v: usize,
    pub latent: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub sample: u64,
    pub map: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Files {
    pub u_features: String,
    pub v_features: String,
    pub templates: String,
}

impl PairedDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            format: DATASET_FORMAT.into(),
            counts: Counts {
                samples: self.len(),
                train: self.train_indices().len(),
                eval: self.eval_indices().len(),
                classes: self.num_classes,
                templates: self.templates.rows(),
            },
            dims: Dims {
                u: self.u_features.cols(),
                v: self.v_features.cols(),
                latent: self.spec.latent_dim,
            },
            seeds: Seeds {
                sample: self.spec.seed,
                map: self.spec.map_seed,
            },
            spec: self.spec.clone(),
            held_out_classes: self.held_out_classes.clone(),
            superclass: self.superclass.clone(),
            subclass: self.subclass.clone(),
            split: self.split.clone(),
            template_class: self.template_class.clone(),
            files: Files {
                u_features: "u_features.cwt".into(),
                v_features: "v_features.cwt".into(),
                templates: "templates.cwt".into(),
            },
        }
    }

    /// Writes the three tensor files and `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let m = self.manifest();
        write_tensor_file(&dir.join(&m.files.u_features), &self.u_features)?;
        write_tensor_file(&dir.join(&m.files.v_features), &self.v_features)?;
        write_tensor_file(&dir.join(&m.files.templates), &self.templates)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if m.format != DATASET_FORMAT {
            return Err(CwclError::Format(format!("unknown dataset format {}", m.format)));
        }
        let u = read_tensor_file(&dir.join(&m.files.u_features))?;
        let v = read_tensor_file(&dir.join(&m.files.v_features))?;
        let templates = read_tensor_file(&dir.join(&m.files.templates))?;
        let n = m.counts.samples;
        if u.rows() != n
            || v.rows() != n
            || m.superclass.len() != n
            || m.subclass.len() != n
            || m.split.len() != n
            || templates.rows() != m.template_class.len()
        {
            return Err(CwclError::Format("manifest counts disagree with tensor files".into()));
        }
        if templates.cols() != v.cols() {
            return Err(CwclError::Format("templates must live in the V feature space".into()));
        }
        Ok(Self {
            u_features: u,
            v_features: v,
            superclass: m.superclass,
            subclass: m.subclass,
            split: m.split,
            templates,
            template_class: m.template_class,
            held_out_classes: m.held_out_classes,
            num_classes: m.counts.classes,
            spec: m.spec,
            latent: None,
        })
    }
}
