//! Procedural stand-in for clinical data: elliptical "brains" with three
//! tissue classes and four contrast transfer functions, optionally carrying a
//! graded tumor blob.

use std::collections::BTreeMap;
use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{DatasetManifest, GradeMask, MCSlice, Plane, SliceRecord, Source, GRADE_ED, GRADE_ET, GRADE_NCR};

#[derive(Debug, Error, PartialEq)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    /// Square image side in pixels.
    pub size: usize,
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    pub tumor_probability: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self { size: 64, n_subjects: 40, slices_per_subject: 10, tumor_probability: 0.5, seed: 0 }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.size < 32 {
            return Err(PhantomError::InvalidConfig(format!("size {} is below 32", self.size)));
        }
        if !(0.0..=1.0).contains(&self.tumor_probability) {
            return Err(PhantomError::InvalidConfig(format!(
                "tumor_probability {} outside [0, 1]",
                self.tumor_probability
            )));
        }
        Ok(())
    }
}

// Tissue intensities per contrast (FLAIR, T1w, T1c, T2w).
const WHITE: [f32; 4] = [0.9, 1.4, 1.45, 0.7];
const GRAY: [f32; 4] = [1.1, 1.0, 1.05, 1.0];
const CSF: [f32; 4] = [0.25, 0.3, 0.35, 2.0];

// Additive tumor signal per grade region.
const EDEMA: [f32; 4] = [0.9, -0.25, -0.2, 0.8];
const ENHANCING: [f32; 4] = [0.6, -0.3, 1.3, 0.5];
const NECROTIC: [f32; 4] = [0.2, -0.55, -0.45, 1.2];

const MIN_TISSUE: f32 = 0.05;

/// Generate the dataset. Subjects are split by index: the last tenth is
/// `test`, the tenth before it `val`, the rest `train`.
pub fn generate_phantom(cfg: &PhantomConfig) -> Result<DatasetManifest, PhantomError> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.n_subjects * cfg.slices_per_subject);
    let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let held = if cfg.n_subjects >= 3 { (cfg.n_subjects / 10).max(1) } else { 0 };
    for subject in 0..cfg.n_subjects {
        let split = if subject >= cfg.n_subjects - held {
            "test"
        } else if subject >= cfg.n_subjects - 2 * held {
            "val"
        } else {
            "train"
        };
        let seed = cfg.seed.wrapping_add(subject as u64);
        for rec in generate_subject(cfg, subject, seed) {
            splits.entry(split.to_string()).or_default().push(rec.id.clone());
            records.push(rec);
        }
    }
    Ok(DatasetManifest { records, splits })
}

struct Brain {
    cx: f32,
    cy: f32,
    a: f32,
    b: f32,
    angle: f32,
}

impl Brain {
    /// Normalized elliptical radius: < 1 inside the brain.
    fn radius(&self, y: f32, x: f32) -> f32 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (c, s) = (self.angle.cos(), self.angle.sin());
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        (u * u + v * v).sqrt()
    }
}

fn generate_subject(cfg: &PhantomConfig, subject: usize, seed: u64) -> Vec<SliceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.size as f32;
    let base = Brain {
        cx: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        cy: s / 2.0 + rng.random_range(-0.03..0.03) * s,
        a: rng.random_range(0.34..0.40) * s,
        b: rng.random_range(0.40..0.45) * s,
        angle: rng.random_range(-0.15..0.15),
    };
    let ventricle = rng.random_range(0.12..0.2);
    (0..cfg.slices_per_subject)
        .map(|k| {
            let t = if cfg.slices_per_subject > 1 { k as f32 / (cfg.slices_per_subject - 1) as f32 } else { 0.5 };
            let scale = 0.86 + 0.14 * (PI * (0.15 + 0.7 * t)).sin();
            let brain = Brain { a: base.a * scale, b: base.b * scale, ..base };
            let with_tumor = rng.random_bool(cfg.tumor_probability);
            let (images, mask) = render_slice(cfg.size, &brain, ventricle * scale, with_tumor, &mut rng);
            SliceRecord::new(format!("s{subject:03}_{k:03}"), images, Some(mask), Source::Phantom, Some(seed))
                .expect("phantom planes share dimensions")
        })
        .collect()
}

fn render_slice(
    size: usize,
    brain: &Brain,
    ventricle: f32,
    with_tumor: bool,
    rng: &mut ChaCha8Rng,
) -> (MCSlice, GradeMask) {
    let n = size * size;
    let s = size as f32;
    let tissue = smooth_noise(rng, size, s / 10.0);
    let bias = smooth_noise(rng, size, s / 4.0);
    let grade = if with_tumor { tumor_grades(size, brain, rng) } else { vec![0.0; n] };

    let mut data = vec![0.0f32; 4 * n];
    for i in 0..n {
        let (y, x) = ((i / size) as f32, (i % size) as f32);
        let r = brain.radius(y, x);
        if r >= 1.0 {
            continue;
        }
        // Gray/white mix from smooth noise; CSF at the rim and in a ventricle.
        let white = 1.0 / (1.0 + (-3.0 * tissue[i]).exp());
        let csf = ((r - 0.88) / 0.08).clamp(0.0, 1.0).max(((ventricle - r) / 0.05).clamp(0.0, 1.0));
        let g = grade[i];
        for c in 0..4 {
            let mut v = (1.0 - csf) * (white * WHITE[c] + (1.0 - white) * GRAY[c]) + csf * CSF[c];
            v *= 1.0 + 0.08 * bias[i];
            if g == GRADE_ED {
                v += EDEMA[c];
            } else if g == GRADE_ET {
                v += ENHANCING[c];
            } else if g == GRADE_NCR {
                v += NECROTIC[c];
            }
            v += 0.03 * rng.sample::<f32, _>(StandardNormal);
            data[c * n + i] = v.max(MIN_TISSUE);
        }
    }
    let images = MCSlice::from_raw(size, size, data);
    let mask = GradeMask::new(Plane::new(size, size, grade)).expect("grade values by construction");
    (images, mask)
}

/// Nested grade regions cut from a perturbed Gaussian bump that lies well
/// inside the brain.
fn tumor_grades(size: usize, brain: &Brain, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = size as f32;
    let (c, sn) = (brain.angle.cos(), brain.angle.sin());
    // Center in brain coordinates, inside half the normalized radius.
    let rho = 0.45 * rng.random::<f32>().sqrt();
    let phi = rng.random_range(0.0..2.0 * PI);
    let (u, v) = (rho * phi.cos() * brain.a, rho * phi.sin() * brain.b);
    let tx = brain.cx + c * u - sn * v;
    let ty = brain.cy + sn * u + c * v;

    let radius = rng.random_range(0.06..0.13) * s;
    let aspect: f32 = rng.random_range(0.7..1.3);
    let theta = rng.random_range(0.0..PI);
    let wobble = smooth_noise(rng, size, s / 16.0);
    let core_cut = rng.random_range(0.5..0.7);
    let ncr_cut = rng.random_range(0.78..1.05);

    let (ct, st) = (theta.cos(), theta.sin());
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f32, (i % size) as f32);
            if brain.radius(y, x) >= 0.9 {
                return 0.0;
            }
            let (dx, dy) = (x - tx, y - ty);
            let p = (ct * dx + st * dy) / (radius * aspect);
            let q = (-st * dx + ct * dy) * aspect / radius;
            let f = (-(p * p + q * q) / 2.0).exp() * (1.0 + 0.3 * wobble[i]);
            if f > ncr_cut {
                GRADE_NCR
            } else if f > core_cut {
                GRADE_ET
            } else if f > 0.35 {
                GRADE_ED
            } else {
                0.0
            }
        })
        .collect()
}

/// Gaussian-blurred white noise scaled to a peak magnitude of 1.
pub(crate) fn smooth_noise(rng: &mut impl Rng, size: usize, sigma: f32) -> Vec<f32> {
    let raw: Vec<f32> = (0..size * size).map(|_| rng.sample(StandardNormal)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (j, &k) in kernel.iter().enumerate() {
                    let d = j as isize - radius;
                    let (yy, xx) = if horizontal { (y as isize, x as isize + d) } else { (y as isize + d, x as isize) };
                    if yy >= 0 && xx >= 0 && (yy as usize) < size && (xx as usize) < size {
                        acc += k * src[yy as usize * size + xx as usize];
                        wsum += k;
                    }
                }
                out[y * size + x] = acc / wsum;
            }
        }
        out
    };
    let smooth = blur(&blur(&raw, true), false);
    let peak = smooth.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(f32::MIN_POSITIVE);
    smooth.into_iter().map(|v| v / peak).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::binarize;

    fn small(tumor_probability: f64) -> PhantomConfig {
        PhantomConfig { size: 32, n_subjects: 4, slices_per_subject: 3, tumor_probability, seed: 11 }
    }

    #[test]
    fn same_config_is_bit_identical() {
        assert_eq!(generate_phantom(&small(0.5)).unwrap(), generate_phantom(&small(0.5)).unwrap());
    }

    #[test]
    fn zero_probability_gives_empty_masks() {
        let d = generate_phantom(&small(0.0)).unwrap();
        assert_eq!(d.len(), 12);
        assert!(d.records.iter().all(|r| r.grade_mask.as_ref().unwrap().is_empty()));
    }

    #[test]
    fn tumors_stay_inside_the_brain() {
        let d = generate_phantom(&small(1.0)).unwrap();
        for r in &d.records {
            let tumor = binarize(r.grade_mask.as_ref().unwrap().plane(), 0.0);
            assert!(!tumor.is_empty(), "{}", r.id);
            let support = r.images.support();
            for i in 0..tumor.plane().data().len() {
                assert!(!tumor.is_set(i) || support.is_set(i), "{} leaks at {i}", r.id);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(PhantomConfig { size: 16, ..small(0.5) }.validate().is_err());
        assert!(PhantomConfig { tumor_probability: 1.5, ..small(0.5) }.validate().is_err());
    }

    #[test]
    fn splits_are_by_subject() {
        let d = generate_phantom(&PhantomConfig { n_subjects: 20, ..small(0.5) }).unwrap();
        d.validate().unwrap();
        assert_eq!(d.splits["test"].len(), 2 * 3);
        assert_eq!(d.splits["val"].len(), 2 * 3);
        assert_eq!(d.splits["train"].len(), 16 * 3);
    }
}
