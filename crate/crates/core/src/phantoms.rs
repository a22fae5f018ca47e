//! Synthetic brain-like phantoms with optional injected lesions.
//!
//! A phantom is a dark background, a bright elliptical skull ring and a
//! smooth interior built from a few Gaussian bumps. Anomalous variants add
//! one elliptical lesion of fixed contrast inside the skull.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, Label, ManifestRecord};
use crate::io::tensor_file;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub const BACKGROUND: f32 = -1.0;
pub const SKULL_INTENSITY: f32 = 0.8;
/// Inner edge of the skull ring, as a fraction of the ellipse radius.
pub const SKULL_INNER: f64 = 0.8;
const TISSUE_BASE: f64 = -0.2;
const TISSUE_RANGE: (f64, f64) = (-0.6, 0.3);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Skull semi-axes as fractions of `size`.
    pub skull_radius_range: (f64, f64),
    pub n_internal_blobs: (usize, usize),
    pub blob_intensity_range: (f64, f64),
    /// Lesion semi-axes as fractions of `size`.
    pub lesion_radius_range: (f64, f64),
    pub lesion_contrast: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 16,
            skull_radius_range: (0.38, 0.45),
            n_internal_blobs: (2, 5),
            blob_intensity_range: (-0.3, 0.3),
            lesion_radius_range: (0.09, 0.16),
            lesion_contrast: 0.6,
            seed: 0,
        }
    }
}

fn check_range(key: &str, (lo, hi): (f64, f64), min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::invalid(key, format!("need {min} <= lo <= hi <= {max}, got ({lo}, {hi})")));
    }
    Ok(())
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::invalid("size", "must be at least 8"));
        }
        // The ring must stay clear of the corners, which are pinned to the background.
        check_range("skull_radius_range", self.skull_radius_range, 0.1, 0.46)?;
        let (b_lo, b_hi) = self.n_internal_blobs;
        if b_lo > b_hi || b_hi > 64 {
            return Err(Error::invalid("n_internal_blobs", format!("bad range ({b_lo}, {b_hi})")));
        }
        check_range("blob_intensity_range", self.blob_intensity_range, -2.0, 2.0)?;
        check_range("lesion_radius_range", self.lesion_radius_range, 0.0, 0.5)?;
        if self.lesion_radius_range.0 * self.size as f64 <= 0.5 {
            return Err(Error::invalid("lesion_radius_range", "lesions must be wider than one pixel"));
        }
        if !self.lesion_contrast.is_finite() {
            return Err(Error::invalid("lesion_contrast", "must be finite"));
        }
        let interior = self.skull_radius_range.0 * self.size as f64 * SKULL_INNER;
        let lesion = self.lesion_radius_range.1 * self.size as f64 + 0.5;
        if lesion + 1.0 >= interior {
            return Err(Error::invalid(
                "lesion_radius_range",
                format!("lesion extent {lesion:.2} px does not fit inside skull interior {interior:.2} px"),
            ));
        }
        Ok(())
    }

    /// Lesion semi-axis bounds in pixels.
    pub fn lesion_radius_px(&self) -> (f64, f64) {
        let s = self.size as f64;
        (self.lesion_radius_range.0 * s, self.lesion_radius_range.1 * s)
    }
}

/// Axis-aligned ellipse in pixel coordinates (pixel centres at integers).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    /// Squared normalized radius of pixel (x, y).
    pub fn rho2(&self, x: usize, y: usize) -> f64 {
        let dx = (x as f64 - self.cx) / self.rx;
        let dy = (y as f64 - self.cy) / self.ry;
        dx * dx + dy * dy
    }

    fn grown(&self, by: f64) -> Ellipse {
        Ellipse {
            rx: self.rx + by,
            ry: self.ry + by,
            ..*self
        }
    }
}

/// Geometry drawn for one phantom, kept so a lesion can be placed inside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub image: Tensor<f32>,
    pub skull: Ellipse,
}

fn normal_rng(spec: &PhantomSpec, index: u64) -> Rng {
    rng::stream(spec.seed, index.wrapping_mul(2))
}

fn lesion_rng(spec: &PhantomSpec, index: u64) -> Rng {
    rng::stream(spec.seed, index.wrapping_mul(2).wrapping_add(1))
}

/// Normal phantom `index` as a `[1, 1, size, size]` tensor in [-1, 1].
pub fn generate_normal(spec: &PhantomSpec, index: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = normal_rng(spec, index);
    let s = spec.size;
    let sf = s as f64;
    let centre = (sf - 1.0) / 2.0;
    let (r_lo, r_hi) = spec.skull_radius_range;
    let skull = Ellipse {
        cx: centre + rng.random_range(-0.5..=0.5),
        cy: centre + rng.random_range(-0.5..=0.5),
        rx: rng.random_range(r_lo..=r_hi) * sf,
        ry: rng.random_range(r_lo..=r_hi) * sf,
    };
    let n_blobs = rng.random_range(spec.n_internal_blobs.0..=spec.n_internal_blobs.1);
    let (i_lo, i_hi) = spec.blob_intensity_range;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.0..0.6f64).sqrt();
            let x = skull.cx + r * skull.rx * angle.cos();
            let y = skull.cy + r * skull.ry * angle.sin();
            let width = rng.random_range(0.15..0.3) * sf;
            let amp = rng.random_range(i_lo..=i_hi);
            (x, y, width, amp)
        })
        .collect();

    let mut data = vec![BACKGROUND; s * s];
    for y in 0..s {
        for x in 0..s {
            let rho2 = skull.rho2(x, y);
            data[y * s + x] = if rho2 > 1.0 {
                BACKGROUND
            } else if rho2 > SKULL_INNER * SKULL_INNER {
                SKULL_INTENSITY
            } else {
                let mut v = TISSUE_BASE;
                for &(bx, by, w, a) in &blobs {
                    let d2 = (x as f64 - bx).powi(2) + (y as f64 - by).powi(2);
                    v += a * (-d2 / (2.0 * w * w)).exp();
                }
                v.clamp(TISSUE_RANGE.0, TISSUE_RANGE.1) as f32
            };
        }
    }
    let image = Tensor::from_vec(&[1, 1, s, s], data)?;
    Ok(Phantom { image, skull })
}

/// Binary mask of the lesion: pixels whose centre lies within the lesion
/// ellipse grown by half a pixel.
fn lesion_mask(lesion: &Ellipse, s: usize) -> Vec<bool> {
    let g = lesion.grown(0.5);
    (0..s * s).map(|i| g.rho2(i % s, i / s) <= 1.0).collect()
}

fn inside_interior(mask: &[bool], skull: &Ellipse, s: usize) -> bool {
    let limit = SKULL_INNER * SKULL_INNER;
    mask.iter()
        .enumerate()
        .all(|(i, &m)| !m || skull.rho2(i % s, i / s) <= limit)
}

/// Anomalous phantom `index`: the normal phantom with one lesion added,
/// plus its 0/1 mask with the same shape.
pub fn generate_anomalous(spec: &PhantomSpec, index: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let Phantom { mut image, skull } = generate_normal(spec, index)?;
    let s = spec.size;
    let mut rng = lesion_rng(spec, index);
    let (r_lo, r_hi) = spec.lesion_radius_px();
    let rx = rng.random_range(r_lo..=r_hi);
    let ry = rng.random_range(r_lo..=r_hi);
    let at = |cx, cy| Ellipse { cx, cy, rx, ry };
    let mut mask = None;
    for _ in 0..256 {
        let cx = skull.cx + rng.random_range(-1.0..1.0) * skull.rx * SKULL_INNER;
        let cy = skull.cy + rng.random_range(-1.0..1.0) * skull.ry * SKULL_INNER;
        let m = lesion_mask(&at(cx, cy), s);
        if inside_interior(&m, &skull, s) {
            mask = Some(m);
            break;
        }
    }
    // Spec validation guarantees the centred placement fits.
    let mask = mask.unwrap_or_else(|| lesion_mask(&at(skull.cx, skull.cy), s));
    let contrast = spec.lesion_contrast as f32;
    for (v, &m) in image.data_mut().iter_mut().zip(&mask) {
        if m {
            *v = (*v + contrast).clamp(-1.0, 1.0);
        }
    }
    let mask = Tensor::from_vec(&[1, 1, s, s], mask.iter().map(|&m| m as u8 as f32).collect())?;
    Ok((image, mask))
}

/// Image counts per split. Every image has its own generator index, so no
/// phantom appears in two splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSizes {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        DatasetSizes {
            n_train: 125,
            n_val: 16,
            n_test_normal: 22,
            n_test_anomalous: 22,
        }
    }
}

pub const TRAIN_MANIFEST: &str = "train.json";
pub const VAL_MANIFEST: &str = "val.json";
pub const TEST_MANIFEST: &str = "test.json";

pub struct BuiltDataset {
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
}

/// Writes images, masks and the three manifests under `out_dir`.
pub fn build_dataset(spec: &PhantomSpec, sizes: DatasetSizes, out_dir: &Path) -> Result<BuiltDataset> {
    spec.validate()?;
    if sizes.n_train == 0 {
        return Err(Error::invalid("n_train", "must be at least 1"));
    }
    let mut next = 0u64;
    let mut split = |prefix: &str, normal: usize, anomalous: usize| -> Result<DatasetManifest> {
        let mut records = Vec::new();
        for k in 0..normal + anomalous {
            let index = next;
            next += 1;
            let label = if k < normal { Label::Normal } else { Label::Anomalous };
            let id = format!("{prefix}_{index:05}");
            let image_path = PathBuf::from("images").join(format!("{id}.adtf"));
            let mask_path = match label {
                Label::Normal => {
                    tensor_file::write(&out_dir.join(&image_path), &generate_normal(spec, index)?.image)?;
                    None
                }
                Label::Anomalous => {
                    let (image, mask) = generate_anomalous(spec, index)?;
                    let mask_path = PathBuf::from("masks").join(format!("{id}.adtf"));
                    tensor_file::write(&out_dir.join(&image_path), &image)?;
                    tensor_file::write(&out_dir.join(&mask_path), &mask)?;
                    Some(mask_path)
                }
            };
            records.push(ManifestRecord {
                id,
                image_path,
                mask_path,
                label,
                seed: index,
            });
        }
        Ok(DatasetManifest::new(out_dir, records))
    };
    let train = split("train", sizes.n_train, 0)?;
    let val = split("val", sizes.n_val, 0)?;
    let test = split("test", sizes.n_test_normal, sizes.n_test_anomalous)?;
    train.save(&out_dir.join(TRAIN_MANIFEST))?;
    val.save(&out_dir.join(VAL_MANIFEST))?;
    test.save(&out_dir.join(TEST_MANIFEST))?;
    Ok(BuiltDataset { train, val, test })
}

/// Maximum between-class variance of a two-class split (Otsu) over `bins`
/// histogram bins spanning the data range.
pub fn otsu_between_class_variance(values: &[f32], bins: usize) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v as f64), b.max(v as f64)));
    if values.is_empty() || hi <= lo {
        return 0.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut hist = vec![(0usize, 0.0f64); bins];
    for &v in values {
        let b = (((v as f64 - lo) / width) as usize).min(bins - 1);
        hist[b].0 += 1;
        hist[b].1 += v as f64;
    }
    let n = values.len() as f64;
    let total: f64 = hist.iter().map(|h| h.1).sum();
    let (mut w0, mut s0, mut best) = (0.0, 0.0, 0.0f64);
    for &(count, sum) in &hist[..bins - 1] {
        w0 += count as f64;
        s0 += sum;
        let w1 = n - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (s0 / w0, (total - s0) / w1);
        best = best.max(w0 / n * (w1 / n) * (m0 - m1).powi(2));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normal_is_seeded_with_dark_corners() {
        let spec = PhantomSpec::default();
        for index in 0..20 {
            let a = generate_normal(&spec, index).unwrap().image;
            assert_eq!(a, generate_normal(&spec, index).unwrap().image);
            let d = a.data();
            let s = spec.size;
            for i in [0, s - 1, s * (s - 1), s * s - 1] {
                assert_eq!(d[i], -1.0);
            }
            assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert!(otsu_between_class_variance(d, 2) > 0.1);
        }
        assert_ne!(generate_normal(&spec, 0).unwrap(), generate_normal(&spec, 1).unwrap());
    }

    #[test]
    fn lesion_area_and_locality() {
        for size in [16, 32] {
            let spec = PhantomSpec {
                size,
                seed: 3,
                ..PhantomSpec::default()
            };
            let (r_lo, r_hi) = spec.lesion_radius_px();
            let pi = std::f64::consts::PI;
            for index in 0..200 {
                let normal = generate_normal(&spec, index).unwrap();
                let (img, mask) = generate_anomalous(&spec, index).unwrap();
                let count = mask.data().iter().filter(|&&m| m == 1.0).count() as f64;
                assert!(count >= pi * r_lo * r_lo && count <= pi * (r_hi + 1.0).powi(2), "{count}");
                for ((&a, &n), &m) in img.data().iter().zip(normal.image.data()).zip(mask.data()) {
                    if m == 0.0 {
                        assert_eq!(a, n);
                    } else {
                        assert!(a > n);
                    }
                }
                let m: Vec<bool> = mask.data().iter().map(|&v| v == 1.0).collect();
                assert!(inside_interior(&m, &normal.skull, size));
            }
        }
    }

    #[test]
    fn zero_contrast_keeps_image() {
        let spec = PhantomSpec {
            lesion_contrast: 0.0,
            ..PhantomSpec::default()
        };
        let (img, mask) = generate_anomalous(&spec, 4).unwrap();
        assert_eq!(img, generate_normal(&spec, 4).unwrap().image);
        assert!(mask.data().iter().any(|&m| m == 1.0));
    }

    #[test]
    fn invalid_specs_name_key() {
        let e = PhantomSpec {
            lesion_radius_range: (0.3, 0.4),
            ..PhantomSpec::default()
        }
        .validate()
        .unwrap_err();
        assert!(e.to_string().contains("lesion_radius_range"));
        assert!(PhantomSpec {
            size: 4,
            ..PhantomSpec::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn otsu_on_two_levels() {
        // Half at -1, half at 1: w0 = w1 = 0.5, between-class variance 1.
        let v: Vec<f32> = (0..10).map(|i| if i < 5 { -1.0 } else { 1.0 }).collect();
        assert!((otsu_between_class_variance(&v, 2) - 1.0).abs() < 1e-12);
        assert_eq!(otsu_between_class_variance(&[0.5; 4], 2), 0.0);
    }
}
