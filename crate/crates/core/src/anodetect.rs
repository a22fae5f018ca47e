//! Reconstruction-based anomaly segmentation: partially noise an image,
//! denoise it back, and threshold the smoothed absolute residual.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{partial_reconstruct, ImageTensor, NoisePredictor};
use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, Label};
use crate::io::{read_bytes, tensor_file, write_bytes};
use crate::metrics::{self, Aggregation, Confusion, EvalItem, MetricsTable};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Default noising depth for a schedule of `steps` steps.
pub fn default_t_ad(steps: usize) -> usize {
    (steps / 4).max(1)
}

pub const DEFAULT_QUANTILE: f64 = 0.95;

/// 3×3 mean filter over each `H×W` plane. Edge pixels average over the
/// part of the window that lies inside the image.
pub fn box_filter3(x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (b, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..b * c {
        let off = plane * h * w;
        for i in 0..h {
            for j in 0..w {
                let (mut sum, mut n) = (0.0f64, 0u32);
                for ii in i.saturating_sub(1)..(i + 2).min(h) {
                    for jj in j.saturating_sub(1)..(j + 2).min(w) {
                        sum += src[off + ii * w + jj] as f64;
                        n += 1;
                    }
                }
                dst[off + i * w + j] = (sum / n as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// |x0 − x̂0| smoothed with [`box_filter3`].
pub fn residual_map(x0: &ImageTensor, xhat0: &ImageTensor) -> Result<Tensor<f32>> {
    x0.ensure_same_shape(xhat0, "residual_map")?;
    let abs = Tensor::from_vec(
        x0.shape(),
        x0.data().iter().zip(xhat0.data()).map(|(a, b)| (a - b).abs()).collect(),
    )?;
    box_filter3(&abs)
}

/// Nearest-rank `quantile` of the pooled residuals, `0 < quantile < 1`.
pub fn choose_threshold(residuals: &[f32], quantile: f64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid("quantile", format!("must lie in (0, 1), got {quantile}")));
    }
    if residuals.is_empty() {
        return Err(Error::invalid("quantile", "no validation residuals to pool"));
    }
    if residuals.iter().any(|r| r.is_nan()) {
        return Err(Error::NonFinite {
            term: "validation residuals".into(),
        });
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_unstable_by(f32::total_cmp);
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Ok(sorted[rank - 1] as f64)
}

/// Dice, IoU, precision and recall of one predicted mask.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl From<Confusion> for ImageMetrics {
    fn from(c: Confusion) -> Self {
        ImageMetrics {
            dice: c.dice(),
            iou: c.iou(),
            precision: c.precision(),
            recall: c.recall(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyResult {
    /// Mean of the `n_recon` reconstructions.
    pub reconstruction: ImageTensor,
    pub residual: Tensor<f32>,
    pub mask: Vec<bool>,
    pub threshold_used: f64,
    pub metrics: Option<ImageMetrics>,
}

impl AnomalyResult {
    pub fn mask_tensor(&self) -> Tensor<f32> {
        let data = self.mask.iter().map(|&m| m as u8 as f32).collect();
        Tensor::from_vec(self.residual.shape(), data).expect("mask matches residual")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    pub t_ad: usize,
    pub threshold: f64,
    pub n_recon: usize,
    pub seed: u64,
}

/// Mean residual over `n_recon` reconstructions with seeds `seed`,
/// `seed + 1`, ... Returns (mean reconstruction, mean residual).
pub fn reconstruct_residual(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    image: &ImageTensor,
    t_ad: usize,
    n_recon: usize,
    seed: u64,
) -> Result<(ImageTensor, Tensor<f32>)> {
    if n_recon == 0 {
        return Err(Error::invalid("n_recon", "must be at least 1"));
    }
    schedule.check_t(t_ad)?;
    let mut recon_sum = vec![0.0f64; image.len()];
    let mut res_sum = vec![0.0f64; image.len()];
    for k in 0..n_recon {
        let recon = partial_reconstruct(denoiser, schedule, image, t_ad, seed.wrapping_add(k as u64))?;
        let res = residual_map(image, &recon)?;
        for (acc, &v) in recon_sum.iter_mut().zip(recon.data()) {
            *acc += v as f64;
        }
        for (acc, &v) in res_sum.iter_mut().zip(res.data()) {
            *acc += v as f64;
        }
    }
    let n = n_recon as f64;
    let mean = |s: Vec<f64>| Tensor::from_vec(image.shape(), s.into_iter().map(|v| (v / n) as f32).collect());
    Ok((mean(recon_sum)?, mean(res_sum)?))
}

/// Full pipeline for one image. `gt` is the ground-truth mask, if known.
pub fn detect(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    image: &ImageTensor,
    params: &DetectParams,
    gt: Option<&[bool]>,
) -> Result<AnomalyResult> {
    if params.threshold.is_nan() || params.threshold < 0.0 {
        return Err(Error::invalid("threshold", format!("must be >= 0, got {}", params.threshold)));
    }
    let (reconstruction, residual) =
        reconstruct_residual(denoiser, schedule, image, params.t_ad, params.n_recon, params.seed)?;
    let mask: Vec<bool> = residual.data().iter().map(|&r| r as f64 > params.threshold).collect();
    let metrics = gt
        .map(|g| Confusion::from_masks(&mask, g).map(ImageMetrics::from))
        .transpose()?;
    Ok(AnomalyResult {
        reconstruction,
        residual,
        mask,
        threshold_used: params.threshold,
        metrics,
    })
}

/// Pooled residuals of the normal records in `manifest`, each reconstructed
/// with seed `seed + record.seed`.
pub fn validation_residuals(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    manifest: &DatasetManifest,
    t_ad: usize,
    n_recon: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let mut pool = Vec::new();
    for r in manifest.records.iter().filter(|r| r.label == Label::Normal) {
        let image = manifest.load_image(r)?;
        let (_, res) = reconstruct_residual(denoiser, schedule, &image, t_ad, n_recon, seed.wrapping_add(r.seed))?;
        pool.extend_from_slice(res.data());
    }
    Ok(pool)
}

/// Threshold at `quantile` of the residuals of `val`'s normal images.
/// Validation draws use seeds apart from the test draws of the same run.
pub fn threshold_from_validation(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    val: &DatasetManifest,
    t_ad: usize,
    n_recon: usize,
    seed: u64,
    quantile: f64,
) -> Result<f64> {
    let pool = validation_residuals(denoiser, schedule, val, t_ad, n_recon, seed ^ 0x5EED_0001)?;
    choose_threshold(&pool, quantile)
}

/// Per-image output record written next to its tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub id: String,
    pub label: Label,
    pub t_ad: usize,
    pub n_recon: usize,
    pub seed: u64,
    pub threshold: f64,
    pub residual_path: PathBuf,
    pub mask_path: PathBuf,
    pub reconstruction_path: PathBuf,
    /// Ground-truth mask copied into the results directory; absent for
    /// normal images, whose truth is empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mask_path: Option<PathBuf>,
    pub mean_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_residual_inside: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_residual_outside: Option<f64>,
    pub metrics: ImageMetrics,
}

fn mean_where(values: &[f32], mask: &[bool], want: bool) -> Option<f64> {
    let (s, n) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn mask_from_tensor(t: &Tensor<f32>) -> Vec<bool> {
    t.data().iter().map(|&v| v > 0.5).collect()
}

/// Runs [`detect`] over every record of `manifest`, writing
/// `<id>.json`, `<id>.residual.adtf`, `<id>.mask.adtf`,
/// `<id>.recon.adtf` and, for anomalous images, `<id>.gt.adtf` into
/// `out_dir`. Image `k` uses seed `params.seed + record.seed`.
pub fn detect_dataset(
    denoiser: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    manifest: &DatasetManifest,
    params: &DetectParams,
    out_dir: &Path,
) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        let image = manifest.load_image(r)?;
        let gt_tensor = manifest.load_mask(r)?;
        let gt = match &gt_tensor {
            Some(t) => {
                t.ensure_same_shape(&image, "ground-truth mask")?;
                mask_from_tensor(t)
            }
            None => vec![false; image.len()],
        };
        let p = DetectParams {
            seed: params.seed.wrapping_add(r.seed),
            ..*params
        };
        let result = detect(denoiser, schedule, &image, &p, Some(&gt))?;
        let name = |suffix: &str| PathBuf::from(format!("{}.{suffix}.adtf", r.id));
        let record = DetectionRecord {
            id: r.id.clone(),
            label: r.label,
            t_ad: p.t_ad,
            n_recon: p.n_recon,
            seed: p.seed,
            threshold: p.threshold,
            residual_path: name("residual"),
            mask_path: name("mask"),
            reconstruction_path: name("recon"),
            gt_mask_path: gt_tensor.as_ref().map(|_| name("gt")),
            mean_residual: result.residual.data().iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64,
            mean_residual_inside: gt_tensor.as_ref().and_then(|_| mean_where(result.residual.data(), &gt, true)),
            mean_residual_outside: gt_tensor.as_ref().and_then(|_| mean_where(result.residual.data(), &gt, false)),
            metrics: result.metrics.expect("truth supplied"),
        };
        tensor_file::write(&out_dir.join(&record.residual_path), &result.residual)?;
        tensor_file::write(&out_dir.join(&record.mask_path), &result.mask_tensor())?;
        tensor_file::write(&out_dir.join(&record.reconstruction_path), &result.reconstruction)?;
        if let (Some(t), Some(p)) = (&gt_tensor, &record.gt_mask_path) {
            tensor_file::write(&out_dir.join(p), t)?;
        }
        let json = serde_json::to_string_pretty(&record).expect("record serializes");
        write_bytes(&out_dir.join(format!("{}.json", r.id)), json.as_bytes())?;
        out.push(record);
    }
    Ok(out)
}

/// Reads every `*.json` detection record in `dir`, sorted by file name.
pub fn read_records(dir: &Path) -> Result<Vec<DetectionRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "json") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut records = Vec::new();
    for p in paths {
        let bytes = read_bytes(&p)?;
        // Other JSON files (effective configs, metrics) may share the directory.
        match serde_json::from_slice::<DetectionRecord>(&bytes) {
            Ok(r) => records.push(r),
            Err(e) => log::debug!("skipping {}: {e}", p.display()),
        }
    }
    if records.is_empty() {
        return Err(Error::invalid("results", format!("no detection records in {}", dir.display())));
    }
    Ok(records)
}

/// Loads the tensors behind `records` and scores them.
pub fn evaluate_records(dir: &Path, records: &[DetectionRecord], aggregation: Aggregation) -> Result<MetricsTable> {
    let mut loaded = Vec::with_capacity(records.len());
    for r in records {
        let scores = tensor_file::read(&dir.join(&r.residual_path))?;
        let pred = mask_from_tensor(&tensor_file::read(&dir.join(&r.mask_path))?);
        let gt = match (&r.gt_mask_path, r.label) {
            (Some(p), _) => mask_from_tensor(&tensor_file::read(&dir.join(p))?),
            (None, Label::Normal) => vec![false; scores.len()],
            (None, Label::Anomalous) => {
                return Err(Error::invalid("results", format!("anomalous record {} has no ground-truth mask", r.id)))
            }
        };
        loaded.push((scores.into_data(), pred, gt));
    }
    let items: Vec<EvalItem> = loaded
        .iter()
        .map(|(s, p, g)| EvalItem {
            scores: s,
            pred: p,
            gt: g,
        })
        .collect();
    metrics::evaluate_dataset(&items, aggregation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_linear_schedule;

    #[test]
    fn residual_examples() {
        let a = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(residual_map(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let mut b = a.clone();
        b.data_mut()[12] = 0.9;
        let r = residual_map(&a, &b).unwrap();
        assert!((r.data()[12] - 0.1).abs() < 1e-7);
        assert_eq!(r, residual_map(&b, &a).unwrap());
        // Corner pixel averages over a 2×2 window.
        let mut c = a.clone();
        c.data_mut()[0] = 0.8;
        assert!((residual_map(&a, &c).unwrap().data()[0] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn threshold_examples() {
        let pool: Vec<f32> = (1..=100).map(|k| 0.1 * k as f32).collect();
        let t = choose_threshold(&pool, 0.95).unwrap();
        assert!((t - 9.5).abs() < 0.11, "{t}");
        assert_eq!(choose_threshold(&[0.25; 7], 0.3).unwrap(), 0.25);
        assert!(choose_threshold(&pool, 1.0).is_err());
        assert!(choose_threshold(&pool, 0.0).is_err());
        assert!(choose_threshold(&[], 0.5).is_err());
    }

    struct Shift(f32);
    impl NoisePredictor for Shift {
        fn predict(&self, x: &ImageTensor, _: &[usize]) -> Result<ImageTensor> {
            Ok(x.map(|v| v * self.0))
        }
    }

    #[test]
    fn threshold_extremes_and_monotonicity() {
        let schedule = make_linear_schedule(20, 1e-4, 0.02).unwrap();
        let image = Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(|i| (i as f32 / 8.0) - 1.0).collect()).unwrap();
        let run = |threshold| {
            let p = DetectParams {
                t_ad: 5,
                threshold,
                n_recon: 2,
                seed: 11,
            };
            detect(&Shift(0.3), &schedule, &image, &p, None).unwrap()
        };
        assert!(run(f64::INFINITY).mask.iter().all(|&m| !m));
        let zero = run(0.0);
        for (&m, &r) in zero.mask.iter().zip(zero.residual.data()) {
            assert_eq!(m, r > 0.0);
        }
        let mut prev = zero.mask.iter().filter(|&&m| m).count();
        for th in [0.01, 0.05, 0.1, 0.3, 1.0] {
            let n = run(th).mask.iter().filter(|&&m| m).count();
            assert!(n <= prev);
            prev = n;
        }
        assert_eq!(run(0.1), run(0.1));
        let p = DetectParams {
            t_ad: 21,
            threshold: 0.1,
            n_recon: 1,
            seed: 0,
        };
        assert!(detect(&Shift(0.0), &schedule, &image, &p, None).is_err());
    }
}
