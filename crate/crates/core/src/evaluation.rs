//! FID, region overlap metrics and the augmentation A/B experiment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, GradeMask, MCSlice, SliceRecord, CONTRASTS, GRADE_ET};
use crate::engine::Tensor;
use crate::nets::{NetError, Network, NetworkKind};
use crate::training::{train_segmentation, training_records, TrainConfig, TrainError, LABEL_ED, LABEL_ET, LABEL_NCR};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{n} samples are too few for {dim}-dimensional features")]
    TooFewSamples { n: usize, dim: usize },
    #[error("test ids also used for training: {0:?}")]
    SplitOverlap(Vec<String>),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub const FID_RIDGE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FidOptions {
    /// Added to both covariance diagonals.
    pub ridge: f64,
    /// Allow `n <= dim`, relying on the ridge to regularize.
    pub shrinkage: bool,
}

impl Default for FidOptions {
    fn default() -> Self {
        Self { ridge: FID_RIDGE, shrinkage: false }
    }
}

fn moments(set: &[Vec<f64>], dim: usize, ridge: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len() as f64;
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for i in 0..dim {
        cov[(i, i)] += ridge;
    }
    (mu, cov)
}

/// Square root of a symmetric positive semi-definite matrix, clamping
/// negative eigenvalues to zero.
fn sqrtm_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature sets.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, EvalError> {
    fid_with(a, b, FidOptions::default())
}

pub fn fid_with(a: &[Vec<f64>], b: &[Vec<f64>], opts: FidOptions) -> Result<f64, EvalError> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    if a.iter().chain(b).any(|v| v.len() != dim) || dim == 0 {
        return Err(EvalError::DimensionMismatch("feature vectors differ in length".into()));
    }
    for set in [a, b] {
        let n = set.len();
        if n < 2 || (!opts.shrinkage && n <= dim) {
            return Err(EvalError::TooFewSamples { n, dim });
        }
    }
    let (mu_a, cov_a) = moments(a, dim, opts.ridge);
    let (mu_b, cov_b) = moments(b, dim, opts.ridge);
    // tr sqrt(Σa Σb) = tr sqrt(√Σa Σb √Σa), and the latter is symmetric.
    let root_a = sqrtm_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    Ok((diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

/// Globally pooled extractor features, one vector per image. `channel`
/// selects a single contrast; `None` feeds all four.
pub fn extract_features(psi: &Network, images: &[&MCSlice], channel: Option<usize>) -> Result<Vec<Vec<f64>>, EvalError> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let (h, w) = chunk[0].dims();
        let mut data = Vec::new();
        for x in chunk {
            if x.dims() != (h, w) {
                return Err(EvalError::DimensionMismatch(format!("{:?} vs {:?}", x.dims(), (h, w))));
            }
            match channel {
                Some(c) => data.extend_from_slice(x.channel(c)),
                None => data.extend_from_slice(x.data()),
            }
        }
        let c = if channel.is_some() { 1 } else { 4 };
        let t = Tensor::from_vec([chunk.len(), c, h, w], data);
        let f = psi.predict(&[&t])?;
        let [n, fc, _, _] = f.shape();
        for s in 0..n {
            out.push((0..fc).map(|k| {
                let p = f.plane(s, k);
                p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
            }).collect());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub per_contrast: BTreeMap<String, f64>,
    pub average: f64,
}

/// FID per contrast between two image sets, and their average.
pub fn fid_per_contrast(psi: &Network, a: &[&MCSlice], b: &[&MCSlice]) -> Result<FidReport, EvalError> {
    let mut per_contrast = BTreeMap::new();
    for (c, name) in CONTRASTS.iter().enumerate() {
        let fa = extract_features(psi, a, Some(c))?;
        let fb = extract_features(psi, b, Some(c))?;
        per_contrast.insert(name.to_string(), fid(&fa, &fb)?);
    }
    let average = per_contrast.values().sum::<f64>() / per_contrast.len() as f64;
    Ok(FidReport { per_contrast, average })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub dice: f64,
    pub sensitivity: f64,
    pub precision: f64,
}

impl RegionCounts {
    pub fn from_masks(pred: impl Iterator<Item = bool>, truth: impl Iterator<Item = bool>) -> Self {
        let mut c = Self::default();
        for (p, t) in pred.zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Overlap scores. An empty region predicted empty scores 1; any ratio
    /// with a zero denominator otherwise scores 0.
    pub fn scores(&self) -> RegionScores {
        if self.tp + self.fp + self.fn_ == 0 {
            return RegionScores { dice: 1.0, sensitivity: 1.0, precision: 1.0 };
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        RegionScores {
            dice: ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_),
            sensitivity: ratio(self.tp, self.tp + self.fn_),
            precision: ratio(self.tp, self.tp + self.fp),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub wt: RegionScores,
    pub tc: RegionScores,
    pub et: RegionScores,
}

impl SegScores {
    pub fn regions(&self) -> [(&'static str, RegionScores); 3] {
        [("WT", self.wt), ("TC", self.tc), ("ET", self.et)]
    }

    /// Per-field mean over slices.
    pub fn mean(all: &[SegScores]) -> Option<SegScores> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        let avg = |f: fn(&SegScores) -> RegionScores| RegionScores {
            dice: all.iter().map(|s| f(s).dice).sum::<f64>() / n,
            sensitivity: all.iter().map(|s| f(s).sensitivity).sum::<f64>() / n,
            precision: all.iter().map(|s| f(s).precision).sum::<f64>() / n,
        };
        Some(SegScores { wt: avg(|s| s.wt), tc: avg(|s| s.tc), et: avg(|s| s.et) })
    }
}

/// Region counts for WT, TC and ET.
pub fn region_counts(pred_labels: &[u8], gt: &GradeMask) -> Result<[RegionCounts; 3], EvalError> {
    let g = gt.plane().data();
    if pred_labels.len() != g.len() {
        return Err(EvalError::DimensionMismatch(format!("{} labels vs {} mask pixels", pred_labels.len(), g.len())));
    }
    let p = pred_labels;
    Ok([
        RegionCounts::from_masks(p.iter().map(|&l| l >= LABEL_ED), g.iter().map(|&v| v > 0.0)),
        RegionCounts::from_masks(p.iter().map(|&l| l == LABEL_ET || l == LABEL_NCR), g.iter().map(|&v| v >= GRADE_ET)),
        RegionCounts::from_masks(p.iter().map(|&l| l == LABEL_ET), g.iter().map(|&v| v == GRADE_ET)),
    ])
}

pub fn seg_metrics(pred_labels: &[u8], gt: &GradeMask) -> Result<SegScores, EvalError> {
    let [wt, tc, et] = region_counts(pred_labels, gt)?;
    Ok(SegScores { wt: wt.scores(), tc: tc.scores(), et: et.scores() })
}

/// Per-pixel argmax over the class channels of one batch element.
pub fn argmax_labels(probs: &Tensor<f32>, sample: usize) -> Vec<u8> {
    let [_, c, h, w] = probs.shape();
    (0..h * w)
        .map(|p| {
            let mut best = 0;
            for ch in 1..c {
                if probs.plane(sample, ch)[p] > probs.plane(sample, best)[p] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect()
}

/// Mean scores of a segmentation network over annotated records.
pub fn evaluate_segmentation(net: &Network, records: &[&SliceRecord]) -> Result<SegScores, EvalError> {
    if net.kind() != NetworkKind::UnetSeg {
        return Err(EvalError::DimensionMismatch(format!("expected a segmentation network, got {}", net.kind().name())));
    }
    let annotated: Vec<&SliceRecord> = records.iter().copied().filter(|r| r.grade_mask.is_some()).collect();
    let mut all = Vec::with_capacity(annotated.len());
    for chunk in annotated.chunks(16) {
        let (h, w) = chunk[0].images.dims();
        let mut data = Vec::with_capacity(chunk.len() * 4 * h * w);
        for r in chunk {
            let x = if r.images.is_normalized() { r.images.clone() } else { r.images.normalized()? };
            data.extend_from_slice(x.data());
        }
        let probs = net.predict(&[&Tensor::from_vec([chunk.len(), 4, h, w], data)])?;
        for (s, r) in chunk.iter().enumerate() {
            all.push(seg_metrics(&argmax_labels(&probs, s), r.grade_mask.as_ref().expect("filtered"))?);
        }
    }
    SegScores::mean(&all).ok_or_else(|| EvalError::Empty("no annotated test records".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationReport {
    /// `(method, scores)` rows: the real-only baseline, then the augmented run.
    pub rows: Vec<(String, SegScores)>,
    pub n_real: usize,
    pub n_synth: usize,
    pub n_test: usize,
}

impl AugmentationReport {
    pub fn dice_wt(&self, method: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == method).map(|r| r.1.wt.dice)
    }

    fn header() -> Vec<String> {
        let mut h = vec!["method".to_string()];
        for metric in ["Dice", "Sensitivity", "Precision"] {
            for region in ["WT", "TC", "ET"] {
                h.push(format!("{metric} {region}"));
            }
        }
        h
    }

    fn cells(s: &SegScores) -> Vec<f64> {
        let r = s.regions();
        let mut v: Vec<f64> = r.iter().map(|x| x.1.dice).collect();
        v.extend(r.iter().map(|x| x.1.sensitivity));
        v.extend(r.iter().map(|x| x.1.precision));
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header().join(",");
        out.push('\n');
        for (name, s) in &self.rows {
            let vals: Vec<String> = Self::cells(s).iter().map(|v| format!("{v:.4}")).collect();
            let _ = writeln!(out, "{name},{}", vals.join(","));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = Self::header();
        let mut out = format!("{:<12}", header[0]);
        for h in &header[1..] {
            let _ = write!(out, " {h:>14}");
        }
        out.push('\n');
        for (name, s) in &self.rows {
            let _ = write!(out, "{name:<12}");
            for v in Self::cells(s) {
                let _ = write!(out, " {v:>14.4}");
            }
            out.push('\n');
        }
        let _ = writeln!(out, "real={} synthetic={} test={}", self.n_real, self.n_synth, self.n_test);
        out
    }
}

fn train_on(records: Vec<SliceRecord>, validation: Vec<SliceRecord>, cfg: &TrainConfig) -> Result<Network, EvalError> {
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), records.iter().map(|r| r.id.clone()).collect());
    if !validation.is_empty() {
        splits.insert("val".to_string(), validation.iter().map(|r| r.id.clone()).collect());
    }
    let mut all = records;
    all.extend(validation);
    Ok(train_segmentation(&DatasetManifest { records: all, splits }, cfg)?.0)
}

/// Train a real-only baseline and a real-plus-synthetic model under the same
/// seed and score both on `test`. `synth_ratio` caps the synthetic count at
/// that multiple of the real training count; `None` uses every record.
pub fn augmentation_experiment(
    real: &DatasetManifest,
    synth: &DatasetManifest,
    test: &DatasetManifest,
    cfg: &TrainConfig,
    synth_ratio: Option<f64>,
) -> Result<AugmentationReport, EvalError> {
    let real_train: Vec<SliceRecord> = training_records(real).into_iter().cloned().collect();
    let real_val: Vec<SliceRecord> = real.split("val").into_iter().cloned().collect();
    let n_synth = synth_ratio.map_or(synth.len(), |r| ((r * real_train.len() as f64).round() as usize).min(synth.len()));
    let synth_train: Vec<SliceRecord> = synth.records.iter().take(n_synth).cloned().collect();

    let used: BTreeSet<&str> =
        real_train.iter().chain(&real_val).chain(&synth_train).map(|r| r.id.as_str()).collect();
    let overlap: Vec<String> = test.records.iter().filter(|r| used.contains(r.id.as_str())).map(|r| r.id.clone()).collect();
    if !overlap.is_empty() {
        return Err(EvalError::SplitOverlap(overlap));
    }
    let test_records: Vec<&SliceRecord> = test.records.iter().collect();

    let baseline = train_on(real_train.clone(), real_val.clone(), cfg)?;
    let mut augmented_set = real_train.clone();
    augmented_set.extend(synth_train);
    let augmented = train_on(augmented_set, real_val, cfg)?;

    Ok(AugmentationReport {
        rows: vec![
            ("baseline".to_string(), evaluate_segmentation(&baseline, &test_records)?),
            ("augmented".to_string(), evaluate_segmentation(&augmented, &test_records)?),
        ],
        n_real: real_train.len(),
        n_synth,
        n_test: test_records.len(),
    })
}
