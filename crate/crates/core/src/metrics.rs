//! Image-quality metrics, classification accuracy and paired t-tests, plus
//! the per-DRF report built from them.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::phantom::{SliceSample, DRFS};

/// Dynamic range of normalized images.
pub const DATA_RANGE: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn to_f64<T: Copy + Into<f64>>(v: &[T]) -> impl Iterator<Item = f64> + '_ {
    v.iter().map(|&x| x.into())
}

fn check_pair(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a} values"), format!("{b} values")));
    }
    if a == 0 {
        return Err(Error::invalid(format!("{op}: empty image")));
    }
    Ok(())
}

pub fn mean_squared_error<T: Copy + Into<f64>>(pred: &[T], target: &[T]) -> Result<f64> {
    check_pair("mse", pred.len(), target.len())?;
    let sum: f64 = to_f64(pred).zip(to_f64(target)).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(1 / mse)`; identical images give `f64::INFINITY`.
pub fn psnr<T: Copy + Into<f64>>(pred: &[T], target: &[T]) -> Result<f64> {
    let mse = mean_squared_error(pred, target)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / mse).log10())
}

/// `sum (pred - target)^2 / sum target^2`.
pub fn nmse<T: Copy + Into<f64>>(pred: &[T], target: &[T]) -> Result<f64> {
    check_pair("nmse", pred.len(), target.len())?;
    let energy: f64 = to_f64(target).map(|t| t * t).sum();
    if energy == 0.0 {
        return Err(Error::invalid("nmse: target has zero energy"));
    }
    let err: f64 = to_f64(pred).zip(to_f64(target)).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(err / energy)
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a row-major `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| taps[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| taps[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), averaged
/// over all window positions fully inside the image.
pub fn ssim<T: Copy + Into<f64>>(pred: &[T], target: &[T], height: usize, width: usize) -> Result<f64> {
    check_pair("ssim", pred.len(), target.len())?;
    if pred.len() != height * width {
        return Err(Error::shape("ssim", format!("{height}x{width} image"), format!("{} values", pred.len())));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("image at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{height}x{width}"),
        ));
    }
    let x: Vec<f64> = to_f64(pred).collect();
    let y: Vec<f64> = to_f64(target).collect();
    let taps = gaussian_window();
    let f = |img: &[f64]| filter_valid(img, height, width, &taps);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = f(&x);
    let my = f(&y);
    let sxx = f(&prod(&x, &x));
    let syy = f(&prod(&y, &y));
    let sxy = f(&prod(&x, &y));
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = sxx[i] - a * a;
        let vy = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Row-wise argmax, ties resolved toward the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (_, m) = logits.dims2("argmax")?;
    Ok(logits
        .data()
        .chunks(m)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.dims2("accuracy")?;
    if labels.len() != n {
        return Err(Error::shape("accuracy", format!("{n} labels"), labels.len()));
    }
    let hits = argmax_rows(logits)?
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / n as f64)
}

/// Natural log of the gamma function (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 || !(0.0..=1.0).contains(&x) {
        return Err(Error::invalid(format!(
            "incomplete_beta: need a, b > 0 and x in [0, 1], got a={a} b={b} x={x}"
        )));
    }
    if x == 0.0 || x == 1.0 {
        return Ok(x);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        Ok(front * beta_cf(a, b, x) / a)
    } else {
        Ok(1.0 - front * beta_cf(b, a, 1.0 - x) / b)
    }
}

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if df <= 0.0 {
        return Err(Error::invalid("student_t_two_sided: df must be positive"));
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::shape("paired_t_test", format!("{} values", a.len()), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::invalid("paired_t_test: need at least 2 pairs"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("paired_t_test: non-finite difference".into()));
    }
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::invalid(
            "paired_t_test: differences have zero variance, p-value undefined",
        ));
    }
    let t = mean * (n as f64).sqrt() / var.sqrt();
    let df = n - 1;
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64)?,
        df,
    })
}

/// Metrics of one reconstructed slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceMetrics {
    pub subject: u32,
    pub slice: u32,
    pub drf: u32,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

impl SliceMetrics {
    fn key(&self) -> (u32, u32, u32) {
        (self.subject, self.slice, self.drf)
    }
}

/// Scores `outputs[i]` against `samples[i].spet`.
pub fn score_slices(samples: &[SliceSample], outputs: &[Vec<f32>]) -> Result<Vec<SliceMetrics>> {
    if samples.len() != outputs.len() {
        return Err(Error::shape("score_slices", format!("{} outputs", samples.len()), outputs.len()));
    }
    samples
        .iter()
        .zip(outputs)
        .map(|(s, out)| {
            Ok(SliceMetrics {
                subject: s.subject_id,
                slice: s.slice_index,
                drf: s.drf,
                psnr: psnr(out, &s.spet)?,
                ssim: ssim(out, &s.spet, s.size, s.size)?,
                nmse: nmse(out, &s.spet)?,
            })
        })
        .collect()
}

/// Runs a trained model in eval mode over `samples` and scores its RPET.
pub fn evaluate_model(
    model: &crate::train::PredictionModel,
    samples: &[SliceSample],
) -> Result<Vec<SliceMetrics>> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate_model: test split is empty"));
    }
    score_slices(samples, &model.reconstruct(samples)?)
}

/// Raw LPET scored as if it were the reconstruction.
pub fn score_lpet(samples: &[SliceSample]) -> Result<Vec<SliceMetrics>> {
    let outputs: Vec<Vec<f32>> = samples.iter().map(|s| s.lpet.clone()).collect();
    score_slices(samples, &outputs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PValues {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub nmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrfRow {
    pub drf: u32,
    pub n_slices: usize,
    /// `None` when every slice of this DRF reconstructs perfectly.
    pub psnr: Option<MeanStd>,
    pub ssim: MeanStd,
    pub nmse: MeanStd,
    /// Slices left out of the PSNR statistics because their PSNR is infinite.
    pub psnr_infinite: usize,
    pub p_values: Option<PValues>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub label: String,
    pub baseline: Option<String>,
    pub rows: Vec<DrfRow>,
}

fn t_test_p(a: &[f64], b: &[f64]) -> Option<f64> {
    paired_t_test(a, b).ok().map(|t| t.p)
}

impl MetricsReport {
    /// Groups slices by DRF (ascending). With a baseline, slices are paired
    /// by (subject, slice, drf) and every key must be present in both.
    pub fn from_slices(
        label: &str,
        slices: &[SliceMetrics],
        baseline: Option<(&str, &[SliceMetrics])>,
    ) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::invalid("metrics report: no slices"));
        }
        let mut drfs: Vec<u32> = slices.iter().map(|s| s.drf).collect();
        drfs.sort_unstable();
        drfs.dedup();
        let mut rows = Vec::with_capacity(drfs.len());
        for &drf in &drfs {
            let mut group: Vec<&SliceMetrics> = slices.iter().filter(|s| s.drf == drf).collect();
            group.sort_by_key(|s| s.key());
            let finite: Vec<f64> = group.iter().map(|s| s.psnr).filter(|v| v.is_finite()).collect();
            let ssims: Vec<f64> = group.iter().map(|s| s.ssim).collect();
            let nmses: Vec<f64> = group.iter().map(|s| s.nmse).collect();
            let p_values = match baseline {
                Some((name, base)) => Some(Self::p_values(name, &group, base)?),
                None => None,
            };
            rows.push(DrfRow {
                drf,
                n_slices: group.len(),
                psnr: MeanStd::of(&finite),
                ssim: MeanStd::of(&ssims).expect("group is nonempty"),
                nmse: MeanStd::of(&nmses).expect("group is nonempty"),
                psnr_infinite: group.len() - finite.len(),
                p_values,
            });
        }
        Ok(Self {
            label: label.to_string(),
            baseline: baseline.map(|(n, _)| n.to_string()),
            rows,
        })
    }

    fn p_values(name: &str, group: &[&SliceMetrics], base: &[SliceMetrics]) -> Result<PValues> {
        let mut paired = Vec::with_capacity(group.len());
        for s in group {
            let b = base.iter().find(|b| b.key() == s.key()).ok_or_else(|| {
                Error::invalid(format!(
                    "baseline {name} has no slice for subject {} slice {} drf {}",
                    s.subject, s.slice, s.drf
                ))
            })?;
            paired.push((**s, *b));
        }
        let finite: Vec<_> = paired
            .iter()
            .filter(|(a, b)| a.psnr.is_finite() && b.psnr.is_finite())
            .collect();
        let col = |v: &[&(SliceMetrics, SliceMetrics)], f: fn(&SliceMetrics) -> f64| {
            (
                v.iter().map(|(a, _)| f(a)).collect::<Vec<_>>(),
                v.iter().map(|(_, b)| f(b)).collect::<Vec<_>>(),
            )
        };
        let all: Vec<_> = paired.iter().collect();
        let (pa, pb) = col(&finite, |s| s.psnr);
        let (sa, sb) = col(&all, |s| s.ssim);
        let (na, nb) = col(&all, |s| s.nmse);
        Ok(PValues {
            psnr: t_test_p(&pa, &pb),
            ssim: t_test_p(&sa, &sb),
            nmse: t_test_p(&na, &nb),
        })
    }

    pub fn row(&self, drf: u32) -> Option<&DrfRow> {
        self.rows.iter().find(|r| r.drf == drf)
    }

    /// Mean PSNR over the DRF rows that have a finite PSNR.
    pub fn mean_psnr(&self) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.psnr.map(|p| p.mean)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Aligned plain-text table, one line per DRF.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.label);
        let _ = write!(
            out,
            "{:>5} {:>4} {:>17} {:>17} {:>17}",
            "DRF", "n", "PSNR", "SSIM", "NMSE"
        );
        if self.baseline.is_some() {
            let _ = write!(out, " {:>10} {:>10} {:>10}", "p(PSNR)", "p(SSIM)", "p(NMSE)");
        }
        out.push('\n');
        let mut footnotes = Vec::new();
        for r in &self.rows {
            let psnr = match r.psnr {
                Some(m) => format!("{:.3} ± {:.3}", m.mean, m.std),
                None => "inf".to_string(),
            };
            let mark = if r.psnr_infinite > 0 { "*" } else { "" };
            let _ = write!(
                out,
                "{:>5} {:>4} {:>17} {:>17} {:>17}",
                r.drf,
                r.n_slices,
                format!("{psnr}{mark}"),
                format!("{:.4} ± {:.4}", r.ssim.mean, r.ssim.std),
                format!("{:.4} ± {:.4}", r.nmse.mean, r.nmse.std),
            );
            if let Some(p) = r.p_values {
                for v in [p.psnr, p.ssim, p.nmse] {
                    let _ = write!(out, " {:>10}", fmt_p(v));
                }
            }
            out.push('\n');
            if r.psnr_infinite > 0 {
                footnotes.push(format!(
                    "* DRF {}: {} slice(s) with infinite PSNR excluded from the PSNR statistics",
                    r.drf, r.psnr_infinite
                ));
            }
        }
        if let Some(b) = &self.baseline {
            footnotes.push(format!("p-values: two-sided paired t-test against {b}"));
        }
        for f in footnotes {
            let _ = writeln!(out, "{f}");
        }
        out
    }

    /// One CSV row per DRF.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,drf,n_slices,psnr_mean,psnr_std,psnr_infinite,ssim_mean,ssim_std,nmse_mean,nmse_std,p_psnr,p_ssim,p_nmse\n",
        );
        for r in &self.rows {
            let (pm, ps) = match r.psnr {
                Some(m) => (fmt_f(m.mean), fmt_f(m.std)),
                None => ("inf".to_string(), String::new()),
            };
            let p = r.p_values.unwrap_or(PValues {
                psnr: None,
                ssim: None,
                nmse: None,
            });
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.label,
                r.drf,
                r.n_slices,
                pm,
                ps,
                r.psnr_infinite,
                fmt_f(r.ssim.mean),
                fmt_f(r.ssim.std),
                fmt_f(r.nmse.mean),
                fmt_f(r.nmse.std),
                p.psnr.map(fmt_f).unwrap_or_default(),
                p.ssim.map(fmt_f).unwrap_or_default(),
                p.nmse.map(fmt_f).unwrap_or_default(),
            );
        }
        out
    }
}

fn fmt_f(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.9e}")
    }
}

fn fmt_p(v: Option<f64>) -> String {
    match v {
        Some(p) if p < 1e-4 => format!("{p:.2e}"),
        Some(p) => format!("{p:.4}"),
        None => "n/a".to_string(),
    }
}

const SLICE_HEADER: &str = "subject,slice,drf,psnr,ssim,nmse";

/// Per-slice dump, reusable as a t-test baseline. Values round-trip exactly.
pub fn slices_to_csv(slices: &[SliceMetrics]) -> String {
    let mut out = format!("{SLICE_HEADER}\n");
    for s in slices {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.subject,
            s.slice,
            s.drf,
            if s.psnr.is_infinite() { "inf".to_string() } else { format!("{:?}", s.psnr) },
            format!("{:?}", s.ssim),
            format!("{:?}", s.nmse)
        );
    }
    out
}

pub fn read_slice_csv(path: &Path) -> Result<Vec<SliceMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(SLICE_HEADER) {
        return Err(Error::format(path, format!("expected header {SLICE_HEADER:?}")));
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 2));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let int = |s: &str| s.parse::<u32>().map_err(|_| bad("bad integer"));
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        out.push(SliceMetrics {
            subject: int(f[0])?,
            slice: int(f[1])?,
            drf: int(f[2])?,
            psnr: real(f[3])?,
            ssim: real(f[4])?,
            nmse: real(f[5])?,
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "no slices"));
    }
    Ok(out)
}

/// Checks a report covers exactly the simulator's DRF set.
pub fn has_all_drfs(report: &MetricsReport) -> bool {
    report.rows.len() == DRFS.len() && DRFS.iter().all(|&d| report.row(d).is_some())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn psnr_examples() {
        let t = vec![0.5f64; 100];
        assert_eq!(psnr(&t, &t).unwrap(), f64::INFINITY);
        let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!(close(psnr(&p, &t).unwrap(), 20.0, 1e-12));
        let d = 1e-3f64.sqrt();
        let p: Vec<f64> = t.iter().map(|v| v + d).collect();
        assert!(close(psnr(&p, &t).unwrap(), 30.0, 1e-12));
        assert!(psnr(&t[..3], &t).is_err());
    }

    #[test]
    fn nmse_examples() {
        let t: Vec<f64> = (0..100).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(nmse(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert!(close(nmse(&p, &t).unwrap(), 1.0, 1e-12));
        assert!(nmse(&t, &[0.0; 100]).is_err());
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let n = 16;
        let t: Vec<f64> = (0..n * n).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
        assert!((ssim(&t, &t, n, n).unwrap() - 1.0).abs() < 1e-9);
        let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        assert!(ssim(&inv, &t, n, n).unwrap() < 1.0);
        assert!(ssim(&t[..100], &t[..100], 10, 10).is_err());
    }

    #[test]
    fn gaussian_window_is_normalized_and_symmetric() {
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(w[i], w[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn accuracy_examples() {
        let l = Tensor::new(vec![2, 3], vec![0.1f64, 0.9, 0.0, 2.0, 1.0, 0.0]).unwrap();
        assert_eq!(accuracy(&l, &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&l, &[1, 2]).unwrap(), 0.5);
        let tie = Tensor::full(&[4, 3], 0.3f64);
        assert_eq!(accuracy(&tie, &[2, 2, 2, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&tie, &[0, 0, 0, 0]).unwrap(), 1.0);
        assert!(accuracy(&tie, &[0]).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(close(ln_gamma(1.0), 0.0, 1e-14));
        assert!(close(ln_gamma(5.0), 24f64.ln(), 1e-14));
        assert!(close(ln_gamma(0.5), std::f64::consts::PI.sqrt().ln(), 1e-14));
    }

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(a, 1) = x^a and I_x(1, b) = 1 - (1 - x)^b.
        for &x in &[0.1, 0.37, 0.5, 0.9] {
            assert!(close(incomplete_beta(3.0, 1.0, x).unwrap(), x * x * x, 1e-13));
            assert!(close(incomplete_beta(1.0, 2.5, x).unwrap(), 1.0 - (1.0 - x).powf(2.5), 1e-13));
        }
        assert!(incomplete_beta(1.0, 1.0, 1.5).is_err());
    }

    #[test]
    fn t_test_examples() {
        assert!(paired_t_test(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        let r = paired_t_test(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_eq!(r.t, 0.0);
        assert!(close(r.p, 1.0, 1e-14));
        let r = paired_t_test(&[1.0, 1.1, 0.9, 1.05, 0.95], &[0.0; 5]).unwrap();
        assert!(r.p < 1e-3, "{r:?}");
        assert_eq!(r.df, 4);
        // Cauchy case: df = 1, P(|T| > 1) = 1/2.
        assert!(close(student_t_two_sided(1.0, 1.0).unwrap(), 0.5, 1e-13));
    }

    fn sm(subject: u32, drf: u32, psnr: f64, ssim: f64, nmse: f64) -> SliceMetrics {
        SliceMetrics { subject, slice: 0, drf, psnr, ssim, nmse }
    }

    #[test]
    fn report_groups_by_drf_and_excludes_infinite_psnr() {
        let s = vec![
            sm(1, 50, 20.0, 0.5, 0.1),
            sm(1, 20, f64::INFINITY, 1.0, 0.0),
            sm(2, 20, 30.0, 0.9, 0.2),
            sm(3, 20, 32.0, 0.8, 0.4),
        ];
        let r = MetricsReport::from_slices("m", &s, None).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.drf).collect::<Vec<_>>(), vec![20, 50]);
        let row = r.row(20).unwrap();
        assert_eq!(row.n_slices, 3);
        assert_eq!(row.psnr_infinite, 1);
        assert_eq!(row.psnr.unwrap().mean, 31.0);
        assert!(close(row.psnr.unwrap().std, 2f64.sqrt(), 1e-12));
        assert_eq!(r.row(50).unwrap().ssim.std, 0.0);
        let table = r.to_table();
        assert!(table.contains("31.000 ± 1.414*"), "{table}");
        assert!(table.contains("infinite PSNR excluded"));
        assert!(!has_all_drfs(&r));
    }

    #[test]
    fn report_with_baseline_has_p_values() {
        let a: Vec<_> = (0..6).map(|i| sm(i, 20, 30.0 + i as f64 * 0.1, 0.9, 0.1 + 0.01 * i as f64)).collect();
        let b: Vec<_> = (0..6).map(|i| sm(i, 20, 25.0 + (i % 2) as f64, 0.8, 0.3)).collect();
        let r = MetricsReport::from_slices("m", &a, Some(("base", &b))).unwrap();
        let p = r.rows[0].p_values.unwrap();
        assert!(p.psnr.unwrap() < 1e-3);
        assert_eq!(p.ssim, None);
        assert!(p.nmse.is_some());
        assert!(r.to_table().contains("p(PSNR)"));
        assert!(r.to_csv().lines().nth(1).unwrap().split(',').count() == 13);

        let missing = MetricsReport::from_slices("m", &a, Some(("base", &b[..3])));
        assert!(missing.is_err());
    }

    #[test]
    fn slice_csv_round_trip() {
        let s = vec![sm(1, 20, f64::INFINITY, 0.25, 1.0 / 3.0), sm(2, 100, 22.123456789, -0.1, 0.5)];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("slices.csv");
        fs::write(&path, slices_to_csv(&s)).unwrap();
        assert_eq!(read_slice_csv(&path).unwrap(), s);
        fs::write(&path, "nope\n").unwrap();
        assert!(read_slice_csv(&path).is_err());
    }

    proptest! {
        #[test]
        fn nmse_scale_law(alpha in -3.0f64..3.0, seed in 0u64..1000) {
            let t: Vec<f64> = (0..64).map(|i| ((i as f64 + seed as f64) * 0.77).sin() + 0.1).collect();
            let p: Vec<f64> = t.iter().map(|v| alpha * v).collect();
            let got = nmse(&p, &t).unwrap();
            prop_assert!((got - (alpha - 1.0).powi(2)).abs() < 1e-9);
        }

        #[test]
        fn ssim_symmetric(seed in 0u64..1000) {
            let n = 13;
            let a: Vec<f64> = (0..n * n).map(|i| (((i as u64 * 7919 + seed) % 97) as f64) / 96.0).collect();
            let b: Vec<f64> = (0..n * n).map(|i| (((i as u64 * 104729 + seed * 3) % 89) as f64) / 88.0).collect();
            let ab = ssim(&a, &b, n, n).unwrap();
            let ba = ssim(&b, &a, n, n).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ssim(&a, &a, n, n).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn t_test_sign_symmetry(v in proptest::collection::vec(-5.0f64..5.0, 3..12)) {
            let b: Vec<f64> = v.iter().enumerate().map(|(i, x)| x * 0.5 + i as f64 * 0.1).collect();
            if let (Ok(x), Ok(y)) = (paired_t_test(&v, &b), paired_t_test(&b, &v)) {
                prop_assert!((x.t + y.t).abs() <= 1e-12 * (1.0 + x.t.abs()));
                prop_assert!((x.p - y.p).abs() <= 1e-12);
                prop_assert!((0.0..=1.0).contains(&x.p));
            }
        }
    }
}
