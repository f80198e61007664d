//! Synthetic multi-dose PET slices.
//!
//! A standard-dose slice (SPET) is a blurred brain-like ellipse phantom
//! normalized to a maximum of 1. Low-dose slices (LPET) are produced in the
//! count domain: the expected count of a pixel is `spet * total_counts / drf`,
//! counts are drawn from a Poisson law and scaled back by `drf / total_counts`,
//! then clamped to `[0, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible dose reduction factors, in class-index order.
pub const DRFS: [u32; 3] = [20, 50, 100];

/// Expected counts of a unit-intensity pixel at full dose.
pub const DEFAULT_TOTAL_COUNTS: f64 = 5_000.0;

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Class index of a DRF within [`DRFS`].
pub fn drf_class(drf: u32) -> Result<usize> {
    DRFS.iter().position(|&d| d == drf).ok_or_else(|| {
        Error::invalid(format!("DRF {drf} is not one of {DRFS:?}"))
    })
}

pub fn drf_of_class(class: usize) -> Result<u32> {
    DRFS.get(class)
        .copied()
        .ok_or_else(|| Error::invalid(format!("DRF class {class} out of range 0..{}", DRFS.len())))
}

fn check_size(size: usize) -> Result<()> {
    if size < 16 || size % 16 != 0 {
        return Err(Error::invalid(format!(
            "image size must be a positive multiple of 16, got {size}"
        )));
    }
    Ok(())
}

/// splitmix64 finalizer used to derive independent child seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivityMap {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ActivityMap {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width {
            return Err(Error::shape(
                "activity map",
                format!("{} pixels", height * width),
                pixels.len(),
            ));
        }
        if pixels.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid("activity values must be finite and nonnegative"));
        }
        if !pixels.iter().any(|&p| p > 0.0) {
            return Err(Error::invalid("activity map has no positive pixel"));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    /// Normalized radius: < 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        (u * u + v * v).sqrt()
    }
}

fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let o = k as isize - r;
                    let (sx, sy) = if horizontal {
                        (x as isize + o, y as isize)
                    } else {
                        (x as isize, y as isize + o)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < size && (sy as usize) < size {
                        acc += w * src[sy as usize * size + sx as usize];
                    }
                }
                out[y * size + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Brain-like phantom: a background ellipse with a brighter cortical rim and
/// 3 to 8 hot or cold elliptical inserts, blurred to soften every boundary.
pub fn generate_activity(seed: u64, size: usize) -> Result<ActivityMap> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Ellipse {
        cx: rng.random_range(-0.05..0.05),
        cy: rng.random_range(-0.05..0.05),
        a: rng.random_range(0.70..0.88),
        b: rng.random_range(0.58..0.80),
        theta: rng.random_range(-0.3..0.3),
    };
    let background = rng.random_range(0.30..0.45);
    let rim = rng.random_range(0.60..0.80);
    let rim_width = rng.random_range(0.10..0.18);

    let n_inserts = rng.random_range(3..=8);
    let mut inserts = Vec::with_capacity(n_inserts);
    for _ in 0..n_inserts {
        let rho = 0.6 * rng.random::<f64>().sqrt();
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let e = Ellipse {
            cx: head.cx + rho * head.a * phi.cos(),
            cy: head.cy + rho * head.b * phi.sin(),
            a: rng.random_range(0.07..0.25),
            b: rng.random_range(0.07..0.25),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        };
        let value = if rng.random_bool(0.6) {
            rng.random_range(0.75..1.0)
        } else {
            rng.random_range(0.02..0.15)
        };
        inserts.push((e, value));
    }

    let mut img = vec![0.0; size * size];
    for py in 0..size {
        for px in 0..size {
            let x = (px as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let y = (py as f64 + 0.5) / size as f64 * 2.0 - 1.0;
            let r = head.radius(x, y);
            if r >= 1.0 {
                continue;
            }
            let mut v = if r > 1.0 - rim_width { rim } else { background };
            for (e, value) in &inserts {
                if e.radius(x, y) < 1.0 {
                    v = *value;
                }
            }
            img[py * size + px] = v;
        }
    }
    let sigma = size as f64 / 40.0;
    let img = gaussian_blur(&img, size, sigma.max(0.6))
        .into_iter()
        .map(|v| v.clamp(0.0, 1.0))
        .collect();
    ActivityMap::new(size, size, img)
}

/// One training example: LPET at a given DRF and its SPET target.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub size: usize,
    pub lpet: Vec<f32>,
    pub spet: Vec<f32>,
    pub drf: u32,
    pub drf_class: usize,
    pub subject_id: u32,
    pub slice_index: u32,
}

fn check_counts(total_counts: f64) -> Result<()> {
    if !(total_counts > 0.0) || !total_counts.is_finite() {
        return Err(Error::invalid(format!(
            "total_counts must be positive and finite, got {total_counts}"
        )));
    }
    Ok(())
}

/// Poisson-thinned LPET before clamping, in SPET intensity units.
pub fn thin_counts(spet: &[f64], drf: u32, total_counts: f64, seed: u64) -> Result<Vec<f64>> {
    drf_class(drf)?;
    check_counts(total_counts)?;
    let scale = total_counts / drf as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(spet
        .iter()
        .map(|&v| {
            let expected = v * scale;
            let k = if expected > 0.0 {
                Poisson::new(expected)
                    .expect("positive finite rate")
                    .sample(&mut rng)
            } else {
                0.0
            };
            k / scale
        })
        .collect())
}

pub fn normalized_spet(activity: &ActivityMap) -> Vec<f64> {
    let max = activity.max();
    activity.pixels().iter().map(|&p| p / max).collect()
}

pub fn simulate_pair(
    activity: &ActivityMap,
    drf: u32,
    total_counts: f64,
    seed: u64,
) -> Result<SliceSample> {
    let drf_class = drf_class(drf)?;
    if activity.height() != activity.width() {
        return Err(Error::shape(
            "simulate_pair",
            "square activity map",
            format!("{}x{}", activity.height(), activity.width()),
        ));
    }
    let spet = normalized_spet(activity);
    let lpet = thin_counts(&spet, drf, total_counts, seed)?;
    Ok(SliceSample {
        size: activity.width(),
        lpet: lpet.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect(),
        spet: spet.iter().map(|&v| v as f32).collect(),
        drf,
        drf_class,
        subject_id: 0,
        slice_index: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: u32,
    pub split: Split,
    pub slices: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Spet,
    Lpet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub kind: FileKind,
    pub subject: u32,
    pub slice: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drf: Option<u32>,
    pub shape: Vec<usize>,
    pub byte_order: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub total_counts: f64,
    pub drfs: Vec<u32>,
    pub subjects: Vec<SubjectRecord>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e))
    }

    /// Checks the manifest invariants against the files under `dir`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        let manifest = dir.join(MANIFEST_FILE);
        let ids = |split| -> Vec<u32> {
            self.subjects
                .iter()
                .filter(|s| s.split == split)
                .map(|s| s.id)
                .collect()
        };
        let train = ids(Split::Train);
        if let Some(id) = ids(Split::Test).iter().find(|id| train.contains(id)) {
            return Err(Error::format(
                &manifest,
                format!("subject {id} is in both train and test splits"),
            ));
        }
        for &d in &self.drfs {
            drf_class(d).map_err(|e| Error::format(&manifest, e))?;
        }
        for f in &self.files {
            if f.byte_order != "little" {
                return Err(Error::format(
                    &manifest,
                    format!("{}: unsupported byte order {:?}", f.path, f.byte_order),
                ));
            }
            let path = dir.join(&f.path);
            let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
            let want = f.shape.iter().product::<usize>() as u64 * 4;
            if len != want {
                return Err(Error::format(
                    &path,
                    format!("expected {want} bytes for shape {:?}, found {len}", f.shape),
                ));
            }
        }
        Ok(())
    }
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw little-endian `f32` file, optionally checking its length.
pub fn read_f32_file(path: &Path, expected_len: Option<usize>) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::format(path, "length is not a multiple of 4 bytes"));
    }
    if let Some(n) = expected_len {
        if bytes.len() != n * 4 {
            return Err(Error::format(
                path,
                format!("expected {} bytes, found {}", n * 4, bytes.len()),
            ));
        }
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Parameters of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train_subjects: u32,
    pub test_subjects: u32,
    pub slices_per_subject: u32,
    pub size: usize,
    pub total_counts: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            train_subjects: 8,
            test_subjects: 4,
            slices_per_subject: 4,
            size: 32,
            total_counts: DEFAULT_TOTAL_COUNTS,
        }
    }
}

fn slice_seed(seed: u64, subject: u32, slice: u32) -> u64 {
    mix_seed(mix_seed(seed, subject as u64), slice as u64)
}

/// All samples of one subject: for each slice, one sample per DRF.
fn simulate_subject(spec: &DatasetSpec, subject: u32) -> Result<Vec<SliceSample>> {
    let mut out = Vec::new();
    for slice in 0..spec.slices_per_subject {
        let s = slice_seed(spec.seed, subject, slice);
        let activity = generate_activity(s, spec.size)?;
        for drf in DRFS {
            let mut sample = simulate_pair(&activity, drf, spec.total_counts, mix_seed(s, drf as u64))?;
            sample.subject_id = subject;
            sample.slice_index = slice;
            out.push(sample);
        }
    }
    Ok(out)
}

fn spet_path(subject: u32, slice: u32) -> String {
    format!("sub{subject}/slice{slice}_spet.f32")
}

fn lpet_path(subject: u32, slice: u32, drf: u32) -> String {
    format!("sub{subject}/slice{slice}_lpet_drf{drf}.f32")
}

pub fn build_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.train_subjects == 0 || spec.test_subjects == 0 || spec.slices_per_subject == 0 {
        return Err(Error::invalid(
            "subject and slice counts must all be at least 1",
        ));
    }
    if spec.seed > i64::MAX as u64 {
        return Err(Error::invalid(format!(
            "seed must not exceed {}, got {}",
            i64::MAX,
            spec.seed
        )));
    }
    check_size(spec.size)?;
    check_counts(spec.total_counts)?;

    let n_subjects = spec.train_subjects + spec.test_subjects;
    let per_subject: Vec<Vec<SliceSample>> = (0..n_subjects)
        .into_par_iter()
        .map(|id| simulate_subject(spec, id))
        .collect::<Result<_>>()?;

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let shape = vec![spec.size, spec.size];
    let mut subjects = Vec::new();
    let mut files = Vec::new();
    for (id, samples) in (0..n_subjects).zip(&per_subject) {
        let dir = out_dir.join(format!("sub{id}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        subjects.push(SubjectRecord {
            id,
            split: if id < spec.train_subjects {
                Split::Train
            } else {
                Split::Test
            },
            slices: spec.slices_per_subject,
        });
        for s in samples {
            if s.drf == DRFS[0] {
                let rel = spet_path(id, s.slice_index);
                write_f32_file(&out_dir.join(&rel), &s.spet)?;
                files.push(FileEntry {
                    path: rel,
                    kind: FileKind::Spet,
                    subject: id,
                    slice: s.slice_index,
                    drf: None,
                    shape: shape.clone(),
                    byte_order: "little".into(),
                });
            }
            let rel = lpet_path(id, s.slice_index, s.drf);
            write_f32_file(&out_dir.join(&rel), &s.lpet)?;
            files.push(FileEntry {
                path: rel,
                kind: FileKind::Lpet,
                subject: id,
                slice: s.slice_index,
                drf: Some(s.drf),
                shape: shape.clone(),
                byte_order: "little".into(),
            });
        }
    }
    let manifest = DatasetManifest {
        version: 1,
        seed: spec.seed,
        image_size: spec.size,
        total_counts: spec.total_counts,
        drfs: DRFS.to_vec(),
        subjects,
        files,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A dataset loaded into memory, split by subject.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub train: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(dir)?;
        manifest.validate(dir)?;
        let n = manifest.image_size * manifest.image_size;
        let mut train = Vec::new();
        let mut test = Vec::new();
        for subject in &manifest.subjects {
            for f in manifest
                .files
                .iter()
                .filter(|f| f.subject == subject.id && f.kind == FileKind::Lpet)
            {
                let drf = f.drf.ok_or_else(|| {
                    Error::format(dir.join(MANIFEST_FILE), format!("{} has no drf", f.path))
                })?;
                let spet_rel = manifest
                    .files
                    .iter()
                    .find(|s| s.kind == FileKind::Spet && s.subject == f.subject && s.slice == f.slice)
                    .ok_or_else(|| {
                        Error::format(
                            dir.join(MANIFEST_FILE),
                            format!("no SPET for subject {} slice {}", f.subject, f.slice),
                        )
                    })?;
                let sample = SliceSample {
                    size: manifest.image_size,
                    lpet: read_f32_file(&dir.join(&f.path), Some(n))?,
                    spet: read_f32_file(&dir.join(&spet_rel.path), Some(n))?,
                    drf,
                    drf_class: drf_class(drf)?,
                    subject_id: f.subject,
                    slice_index: f.slice,
                };
                match subject.split {
                    Split::Train => train.push(sample),
                    Split::Test => test.push(sample),
                }
            }
        }
        Ok(Self {
            root: dir.to_path_buf(),
            manifest,
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activity_is_deterministic_and_seed_dependent() {
        let a = generate_activity(7, 32).unwrap();
        assert_eq!(a, generate_activity(7, 32).unwrap());
        assert_eq!(a.pixels().len(), 32 * 32);
        let b = generate_activity(8, 32).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).any(|(x, y)| x != y));
        assert!(a.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn size_must_be_multiple_of_16() {
        let err = generate_activity(1, 20).unwrap_err();
        assert!(err.to_string().contains("multiple of 16"));
        assert!(generate_activity(1, 0).is_err());
        assert!(generate_activity(1, 64).is_ok());
    }

    #[test]
    fn zero_activity_rejected() {
        assert!(ActivityMap::new(2, 2, vec![0.0; 4]).is_err());
        assert!(ActivityMap::new(2, 2, vec![0.0, -1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn invalid_drf_names_admissible_set() {
        let a = generate_activity(3, 16).unwrap();
        let err = simulate_pair(&a, 10, 1e4, 0).unwrap_err();
        assert!(err.to_string().contains("[20, 50, 100]"));
        assert!(simulate_pair(&a, 20, 0.0, 0).is_err());
    }

    #[test]
    fn huge_count_budget_converges_to_spet() {
        let a = generate_activity(11, 32).unwrap();
        let s = simulate_pair(&a, 100, 1e9, 5).unwrap();
        let max_dev = s
            .lpet
            .iter()
            .zip(&s.spet)
            .map(|(l, t)| (l - t).abs())
            .fold(0.0f32, f32::max);
        assert!(max_dev < 0.01, "{max_dev}");
        assert_eq!(s.spet.iter().copied().fold(0.0, f32::max), 1.0);
    }

    #[test]
    fn labels_are_consistent() {
        for (i, &d) in DRFS.iter().enumerate() {
            assert_eq!(drf_class(d).unwrap(), i);
            assert_eq!(drf_of_class(i).unwrap(), d);
        }
        assert!(drf_of_class(3).is_err());
    }

    #[test]
    fn mix_seed_separates_neighbours() {
        assert_ne!(mix_seed(1, 2), mix_seed(2, 1));
        assert_ne!(mix_seed(0, 0), mix_seed(0, 1));
    }
}
