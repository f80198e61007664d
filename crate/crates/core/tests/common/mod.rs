//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dosepet::nn::{ModelParams, ParamKind, Tensor};
use dosepet::phantom::{build_dataset, Dataset, DatasetSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values in `[-1, 1)` kept at least `gap` away from zero, so
/// finite differences do not straddle a ReLU kink.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(gap..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub const FD_STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// Relative disagreement between an analytic and a numerical derivative.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// `sum(w * y)`: turns a tensor-valued op into a scalar whose gradient
/// w.r.t. `y` is `w`.
pub fn weighted_sum(w: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    w.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

/// Central-difference check of the gradient w.r.t. `args[which]`, where
/// `loss` sees all arguments. `coords` defaults to every element.
pub fn check_arg(
    args: &mut [Tensor<f64>],
    which: usize,
    analytic: &[f64],
    coords: Option<&[usize]>,
    loss: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> f64 {
    let all: Vec<usize> = (0..args[which].len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = args[which].data()[i];
        args[which].data_mut()[i] = orig + FD_STEP;
        let up = loss(args);
        args[which].data_mut()[i] = orig - FD_STEP;
        let down = loss(args);
        args[which].data_mut()[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Central-difference check of every trainable tensor of `params` against
/// the gradients currently stored in it. With `per_tensor = Some(k)`, `k`
/// random coordinates of each tensor are checked.
pub fn check_params(
    params: &mut ModelParams<f64>,
    per_tensor: Option<(usize, &mut ChaCha8Rng)>,
    loss: &dyn Fn(&ModelParams<f64>) -> f64,
) -> (f64, usize) {
    let mut picker = per_tensor;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for e in 0..params.entries().len() {
        let entry = &params.entries()[e];
        if entry.kind != ParamKind::Trainable {
            continue;
        }
        let analytic = entry
            .tensor
            .grad()
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; entry.tensor.len()]);
        let len = entry.tensor.len();
        let coords: Vec<usize> = match &mut picker {
            Some((k, rng)) => (0..*k).map(|_| rng.random_range(0..len)).collect(),
            None => (0..len).collect(),
        };
        for i in coords {
            let orig = params.entries()[e].tensor.data()[i];
            params.entries_mut()[e].tensor.data_mut()[i] = orig + FD_STEP;
            let up = loss(params);
            params.entries_mut()[e].tensor.data_mut()[i] = orig - FD_STEP;
            let down = loss(params);
            params.entries_mut()[e].tensor.data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }
    (worst, checked)
}

/// Builds and loads a synthetic dataset in `dir`.
pub fn dataset(dir: &Path, spec: &DatasetSpec) -> Dataset {
    build_dataset(spec, dir).expect("dataset generation");
    Dataset::load(dir).expect("dataset load")
}

/// Every file below `dir`, keyed by relative path.
pub fn read_tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).expect("read_dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).expect("below root").to_path_buf();
                out.insert(rel, fs::read(&path).expect("read file"));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs the command line in-process and returns its exit code.
pub fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["dosepet"];
    full.extend_from_slice(args);
    dosepet::cli::main_with_args(full)
}
