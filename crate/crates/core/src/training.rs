//! Training loops for the mask generators, the adversarial inpainting pair and
//! the segmentation U-Net, with periodic snapshots and best-epoch selection.

use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, DatasetManifest, GradeMask, MCSlice, SliceRecord, GRADE_ED, GRADE_ET, GRADE_NCR};
use crate::engine::{Adam, Graph, Tensor, Var};
use crate::geometry::{apply_mask, binarize, render_circles, render_disk, simplify_to_circles, GeometryError};
use crate::losses::{adversarial_loss, l1_loss, total_inpaint_loss, LossBreakdown, LossError, LossWeights};
use crate::nets::{build_feature_extractor, save_checkpoint, ExtractorMode, NetError, Network, NetworkKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no checkpoints to choose from")]
    NoCheckpoints,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub adam_betas: (f64, f64),
    /// Pretrained extractor weights for the content loss; the seeded random
    /// extractor is used when absent.
    pub backbone: Option<PathBuf>,
    /// Where snapshots are written, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 8,
            checkpoint_every: 10,
            seed: 0,
            loss_weights: LossWeights::default(),
            adam_betas: (0.9, 0.999),
            backbone: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Defaults for the segmentation network (smaller learning rate).
    pub fn segmentation() -> Self {
        Self { learning_rate: 2e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        self.loss_weights.validate()?;
        Ok(())
    }

    fn adam(&self, net: &Network) -> Adam {
        Adam::new(net.params(), self.learning_rate as f32, (self.adam_betas.0 as f32, self.adam_betas.1 as f32))
    }
}

/// Epochs at which a snapshot is taken: every `every` epochs, plus the last
/// epoch when it is not a multiple.
pub fn checkpoint_epochs(epochs: usize, every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (1..=epochs).filter(|e| e % every.max(1) == 0).collect();
    if epochs > 0 && out.last() != Some(&epochs) {
        out.push(epochs);
    }
    out
}

/// Index of the lowest loss; ties go to the earliest entry and NaN never wins.
pub fn select_best(losses: &[f64]) -> Result<usize, TrainError> {
    if losses.is_empty() {
        return Err(TrainError::NoCheckpoints);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] || (losses[best].is_nan() && !l.is_nan()) {
            best = i;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Per-epoch mean of the weighted generator terms (inpainting only).
    pub train_terms: Vec<LossBreakdown>,
    pub checkpoint_epochs: Vec<usize>,
    pub chosen_epoch: Option<usize>,
    pub wall_time_secs: f64,
}

/// One training example, already in network layout (`[1, C, H, W]`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: Vec<Tensor<f32>>,
    pub target: Tensor<f32>,
    /// Pixels the generator may fill (inpainting only).
    pub hole: Vec<bool>,
    /// Per-pixel class labels (segmentation only).
    pub labels: Vec<u8>,
}

fn plane_tensor(channels: &[&[f32]], h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec([1, channels.len(), h, w], channels.concat())
}

fn normalized(images: &MCSlice) -> Result<MCSlice, DataError> {
    if images.is_normalized() {
        Ok(images.clone())
    } else {
        images.normalized()
    }
}

/// Training records: the `train` split if the manifest has one, else all.
pub fn training_records(data: &DatasetManifest) -> Vec<&SliceRecord> {
    if data.splits.contains_key("train") {
        data.split("train")
    } else {
        data.records.iter().collect()
    }
}

fn tumor_masks(records: &[&SliceRecord]) -> Vec<(usize, GradeMask)> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.grade_mask.as_ref().filter(|m| !m.is_empty()).map(|m| (i, m.clone())))
        .collect()
}

/// `(disk(c1), β(T1w)) → β(m_grade)` examples.
pub fn binary_samples(records: &[&SliceRecord]) -> Result<Vec<Sample>, TrainError> {
    tumor_masks(records)
        .into_iter()
        .map(|(i, m)| {
            let (h, w) = m.dims();
            let c = simplify_to_circles(&m)?;
            let disk = render_disk(&c, h, w);
            let support = records[i].images.support();
            let target = binarize(m.plane(), 0.0);
            Ok(Sample {
                inputs: vec![plane_tensor(&[disk.plane().data(), support.plane().data()], h, w)],
                target: plane_tensor(&[target.plane().data()], h, w),
                hole: Vec::new(),
                labels: Vec::new(),
            })
        })
        .collect()
}

/// `(render(c1, c2, c3), β(m_grade)) → m_grade` examples.
pub fn grade_samples(records: &[&SliceRecord]) -> Result<Vec<Sample>, TrainError> {
    tumor_masks(records)
        .into_iter()
        .map(|(_, m)| {
            let (h, w) = m.dims();
            let c = simplify_to_circles(&m)?;
            let circles = render_circles(&c, h, w);
            let binary = binarize(m.plane(), 0.0);
            Ok(Sample {
                inputs: vec![plane_tensor(&[circles.plane().data(), binary.plane().data()], h, w)],
                target: plane_tensor(&[m.plane().data()], h, w),
                hole: Vec::new(),
                labels: Vec::new(),
            })
        })
        .collect()
}

/// `(X_T · (1 − m_binary), m_grade) → X_T` examples on normalized images.
pub fn inpaint_samples(records: &[&SliceRecord]) -> Result<Vec<Sample>, TrainError> {
    tumor_masks(records)
        .into_iter()
        .map(|(i, m)| {
            let (h, w) = m.dims();
            let x = normalized(&records[i].images)?;
            let binary = binarize(m.plane(), 0.0);
            let masked = apply_mask(&x, &binary)?;
            let hole = (0..4).flat_map(|_| binary.plane().data().iter().map(|&v| v == 1.0)).collect();
            Ok(Sample {
                inputs: vec![
                    Tensor::from_vec([1, 4, h, w], masked.data().to_vec()),
                    plane_tensor(&[m.plane().data()], h, w),
                ],
                target: Tensor::from_vec([1, 4, h, w], x.data().to_vec()),
                hole,
                labels: Vec::new(),
            })
        })
        .collect()
}

/// Exclusive segmentation classes, also the softmax channel order.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NON_TUMOR: u8 = 1;
pub const LABEL_ED: u8 = 2;
pub const LABEL_ET: u8 = 3;
pub const LABEL_NCR: u8 = 4;

/// Per-pixel class of a slice: tumor grade where present, otherwise brain
/// support versus background.
pub fn label_map(images: &MCSlice, mask: Option<&GradeMask>) -> Vec<u8> {
    let support = images.support();
    (0..images.height() * images.width())
        .map(|i| {
            let g = mask.map_or(0.0, |m| m.plane().data()[i]);
            if g == GRADE_NCR {
                LABEL_NCR
            } else if g == GRADE_ET {
                LABEL_ET
            } else if g == GRADE_ED {
                LABEL_ED
            } else if support.is_set(i) {
                LABEL_NON_TUMOR
            } else {
                LABEL_BACKGROUND
            }
        })
        .collect()
}

pub fn seg_samples(records: &[&SliceRecord]) -> Result<Vec<Sample>, TrainError> {
    records
        .iter()
        .filter(|r| r.grade_mask.is_some())
        .map(|r| {
            let x = normalized(&r.images)?;
            let (h, w) = x.dims();
            Ok(Sample {
                inputs: vec![Tensor::from_vec([1, 4, h, w], x.data().to_vec())],
                target: Tensor::zeros([1, 1, 1, 1]),
                hole: Vec::new(),
                labels: label_map(&x, r.grade_mask.as_ref()),
            })
        })
        .collect()
}

/// A mini-batch assembled from samples.
#[derive(Clone, Debug)]
pub struct Batch {
    pub inputs: Vec<Tensor<f32>>,
    pub target: Tensor<f32>,
    pub hole: Vec<bool>,
    pub labels: Vec<u8>,
}

pub fn make_batch(samples: &[&Sample]) -> Batch {
    let n_inputs = samples[0].inputs.len();
    Batch {
        inputs: (0..n_inputs)
            .map(|k| Tensor::stack(&samples.iter().map(|s| &s.inputs[k]).collect::<Vec<_>>()))
            .collect(),
        target: Tensor::stack(&samples.iter().map(|s| &s.target).collect::<Vec<_>>()),
        hole: samples.iter().flat_map(|s| s.hole.iter().copied()).collect(),
        labels: samples.iter().flat_map(|s| s.labels.iter().copied()).collect(),
    }
}

fn batches(samples: &[Sample], order: &[usize], size: usize) -> Vec<Batch> {
    order.chunks(size).map(|c| make_batch(&c.iter().map(|&i| &samples[i]).collect::<Vec<_>>())).collect()
}

/// Validation samples: the `val` split, or the training samples when the
/// manifest has none.
fn validation<'a>(data: &'a DatasetManifest) -> Option<Vec<&'a SliceRecord>> {
    let v = data.split("val");
    (!v.is_empty()).then_some(v)
}

fn check_finite(v: f64, epoch: usize, step: usize) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFinite { epoch, step })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// A supervised objective: records the loss of `net` on a batch.
type Objective = fn(&mut Graph<f32>, &Network, &[Var], &Batch, &TrainConfig) -> Result<Var, TrainError>;

fn l1_objective(g: &mut Graph<f32>, net: &Network, p: &[Var], b: &Batch, cfg: &TrainConfig) -> Result<Var, TrainError> {
    let xs: Vec<Var> = b.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = net.forward(g, p, &xs);
    let t = g.constant(b.target.clone());
    Ok(l1_loss(g, y, t, cfg.loss_weights.reduction)?)
}

fn ce_objective(g: &mut Graph<f32>, net: &Network, p: &[Var], b: &Batch, _: &TrainConfig) -> Result<Var, TrainError> {
    let x = g.constant(b.inputs[0].clone());
    let logits = net.forward(g, p, &[x]);
    Ok(g.softmax_cross_entropy(logits, &b.labels))
}

fn evaluate(net: &Network, batches: &[Batch], cfg: &TrainConfig, objective: Objective) -> Result<f64, TrainError> {
    let mut total = 0.0;
    let mut count = 0;
    for b in batches {
        let mut g = Graph::new();
        let p = net.bind(&mut g, false);
        let l = objective(&mut g, net, &p, b, cfg)?;
        let n = b.inputs[0].shape()[0];
        total += g.value(l).item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count.max(1) as f64)
}

/// Snapshot store shared by the loops.
struct Snapshots {
    epochs: Vec<usize>,
    kept: Vec<(usize, f64, Vec<Network>)>,
}

impl Snapshots {
    fn new(cfg: &TrainConfig) -> Self {
        Self { epochs: checkpoint_epochs(cfg.epochs, cfg.checkpoint_every), kept: Vec::new() }
    }

    fn offer(&mut self, epoch: usize, val: f64, nets: &[&Network], cfg: &TrainConfig) -> Result<(), TrainError> {
        if !self.epochs.contains(&epoch) {
            return Ok(());
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            for net in nets {
                let path = dir.join(format!("{}_epoch{epoch:04}.safetensors", net.kind().name()));
                save_checkpoint(net, epoch, Some(val), &path)?;
            }
        }
        self.kept.push((epoch, val, nets.iter().map(|n| (*n).clone()).collect()));
        Ok(())
    }

    fn best(self, report: &mut TrainReport) -> Option<Vec<Network>> {
        report.checkpoint_epochs = self.epochs;
        let losses: Vec<f64> = self.kept.iter().map(|k| k.1).collect();
        let i = select_best(&losses).ok()?;
        let (epoch, _, nets) = self.kept.into_iter().nth(i)?;
        report.chosen_epoch = Some(epoch);
        Some(nets)
    }
}

fn train_supervised(
    kind: NetworkKind,
    train: Vec<Sample>,
    val: Option<Vec<Sample>>,
    size: usize,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(Network, TrainReport), TrainError> {
    let start = Instant::now();
    let mut net = Network::build(kind, size, cfg.seed)?;
    let mut opt = cfg.adam(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_batches = val.map(|v| batches(&v, &(0..v.len()).collect::<Vec<_>>(), cfg.batch_size));
    let mut report = TrainReport::default();
    let mut snaps = Snapshots::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for b in batches(&train, &order, cfg.batch_size) {
            let mut g = Graph::new();
            let p = net.bind(&mut g, true);
            let l = objective(&mut g, &net, &p, &b, cfg)?;
            let v = check_finite(g.value(l).item() as f64, epoch, step)?;
            let mut grads = g.backward(l);
            let grads = net.params().gradients(&mut grads, &p);
            opt.step(net.params_mut(), &grads);
            info!(target: "tumorforge::train", "net={} epoch={epoch} step={step} loss={v:.6}", kind.name());
            losses.push(v);
            step += 1;
        }
        let train_loss = mean(&losses);
        let val_loss = match &val_batches {
            Some(vb) => evaluate(&net, vb, cfg, objective)?,
            None => train_loss,
        };
        info!(target: "tumorforge::train", "net={} epoch={epoch} train_loss={train_loss:.6} val_loss={val_loss:.6}", kind.name());
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        snaps.offer(epoch, val_loss, &[&net], cfg)?;
    }
    if let Some(mut best) = snaps.best(&mut report) {
        net = best.remove(0);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((net, report))
}

fn image_size(samples: &[Sample]) -> usize {
    samples[0].inputs[0].shape()[2]
}

fn prepare(
    data: &DatasetManifest,
    what: &str,
    make: fn(&[&SliceRecord]) -> Result<Vec<Sample>, TrainError>,
) -> Result<(Vec<Sample>, Option<Vec<Sample>>), TrainError> {
    let train = make(&training_records(data))?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset(format!("no {what} examples in the training records")));
    }
    let val = validation(data).map(|v| make(&v)).transpose()?.filter(|v| !v.is_empty());
    Ok((train, val))
}

/// Fit the binary-mask generator with an L1 objective.
pub fn train_g_binary(data: &DatasetManifest, cfg: &TrainConfig) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate()?;
    let (train, val) = prepare(data, "tumor-bearing", binary_samples)?;
    let size = image_size(&train);
    train_supervised(NetworkKind::GBinary, train, val, size, cfg, l1_objective)
}

/// Fit the grade-mask generator with an L1 objective.
pub fn train_g_grade(data: &DatasetManifest, cfg: &TrainConfig) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate()?;
    let (train, val) = prepare(data, "tumor-bearing", grade_samples)?;
    let size = image_size(&train);
    train_supervised(NetworkKind::GGrade, train, val, size, cfg, l1_objective)
}

/// Fit the segmentation U-Net with pixelwise cross-entropy.
pub fn train_segmentation(data: &DatasetManifest, cfg: &TrainConfig) -> Result<(Network, TrainReport), TrainError> {
    cfg.validate()?;
    let (train, val) = prepare(data, "annotated", seg_samples)?;
    let size = image_size(&train);
    train_supervised(NetworkKind::UnetSeg, train, val, size, cfg, ce_objective)
}

/// The generator/discriminator pair with their optimizers.
pub struct InpaintTrainer {
    pub g: Network,
    pub d: Network,
    pub psi: Network,
    opt_g: Adam,
    opt_d: Adam,
    cfg: TrainConfig,
}

/// Composite generator output into the hole, keeping the target elsewhere.
fn composite(g: &mut Graph<f32>, out: Var, b: &Batch) -> Var {
    g.select(&b.hole, out, &b.target)
}

impl InpaintTrainer {
    pub fn new(size: usize, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let g = Network::build(NetworkKind::GInpaint, size, cfg.seed)?;
        let d = Network::build(NetworkKind::DInpaint, size, cfg.seed.wrapping_add(1))?;
        let psi = match &cfg.backbone {
            Some(path) => build_feature_extractor(ExtractorMode::Pretrained, 0, Some(path))?,
            None => build_feature_extractor(ExtractorMode::FixedRandom, cfg.seed.wrapping_add(2), None)?,
        };
        Ok(Self { opt_g: cfg.adam(&g), opt_d: cfg.adam(&d), g, d, psi, cfg: cfg.clone() })
    }

    /// Composited generator output for a batch, without gradients.
    pub fn generate(&self, b: &Batch) -> Tensor<f32> {
        let mut g = Graph::new();
        let p = self.g.bind(&mut g, false);
        let xs: Vec<Var> = b.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = self.g.forward(&mut g, &p, &xs);
        let c = composite(&mut g, y, b);
        g.value(c).clone()
    }

    /// Discriminator scores on real and generated images.
    pub fn discriminate(&self, b: &Batch) -> (Vec<f32>, Vec<f32>) {
        let fake = self.generate(b);
        let score = |x: &Tensor<f32>| self.d.predict(&[x, &b.inputs[1]]).expect("batch matches").into_vec();
        (score(&b.target), score(&fake))
    }

    /// One ascent step of the adversarial objective on D. Returns its value.
    pub fn d_step(&mut self, b: &Batch) -> Result<f64, TrainError> {
        let fake = self.generate(b);
        let mut g = Graph::new();
        let p = self.d.bind(&mut g, true);
        let mask = g.constant(b.inputs[1].clone());
        let real = g.constant(b.target.clone());
        let fake = g.constant(fake);
        let d_real = self.d.forward(&mut g, &p, &[real, mask]);
        let d_fake = self.d.forward(&mut g, &p, &[fake, mask]);
        let adv = adversarial_loss(&mut g, d_real, d_fake)?;
        let objective = g.affine(adv, -1.0, 0.0);
        let value = g.value(adv).item() as f64;
        let mut grads = g.backward(objective);
        let grads = self.d.params().gradients(&mut grads, &p);
        self.opt_d.step(self.d.params_mut(), &grads);
        Ok(value)
    }

    /// One descent step of the weighted generator loss on G.
    pub fn g_step(&mut self, b: &Batch) -> Result<LossBreakdown, TrainError> {
        let (breakdown, _) = self.g_loss(b, true)?;
        Ok(breakdown)
    }

    fn g_loss(&mut self, b: &Batch, update: bool) -> Result<(LossBreakdown, f64), TrainError> {
        let w = self.cfg.loss_weights;
        let mut g = Graph::new();
        let p = self.g.bind(&mut g, update);
        let xs: Vec<Var> = b.inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = self.g.forward(&mut g, &p, &xs);
        let out = composite(&mut g, y, b);
        let target = g.constant(b.target.clone());
        let d_fake = if w.w_adv > 0.0 {
            let dp = self.d.bind(&mut g, false);
            Some(self.d.forward(&mut g, &dp, &[out, xs[1]]))
        } else {
            None
        };
        let (loss, breakdown) = total_inpaint_loss(&mut g, out, target, d_fake, Some(&self.psi), &w)?;
        let pix = crate::losses::l1_value(g.value(out), &b.target, crate::losses::Reduction::Mean)?;
        if update {
            let mut grads = g.backward(loss);
            let grads = self.g.params().gradients(&mut grads, &p);
            self.opt_g.step(self.g.params_mut(), &grads);
        }
        Ok((breakdown, pix))
    }

    /// Mean pixel L1 of the composited output over `batches`.
    pub fn validation_loss(&self, batches: &[Batch]) -> Result<f64, TrainError> {
        let mut total = 0.0;
        let mut count = 0;
        for b in batches {
            let out = self.generate(b);
            let n = b.target.shape()[0];
            total += crate::losses::l1_value(&out, &b.target, crate::losses::Reduction::Mean)? * n as f64;
            count += n;
        }
        Ok(total / count.max(1) as f64)
    }
}

/// Alternate one D step and one G step per batch. Validation loss is the
/// pixel L1 of the composited output.
pub fn train_inpaint(data: &DatasetManifest, cfg: &TrainConfig) -> Result<(Network, Network, TrainReport), TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let (train, val) = prepare(data, "tumor-bearing", inpaint_samples)?;
    let mut t = InpaintTrainer::new(image_size(&train), cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let val_batches = val.map(|v| batches(&v, &(0..v.len()).collect::<Vec<_>>(), cfg.batch_size));
    let mut report = TrainReport::default();
    let mut snaps = Snapshots::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut terms = Vec::new();
        let mut pix = Vec::new();
        for b in batches(&train, &order, cfg.batch_size) {
            let d_value = if cfg.loss_weights.w_adv > 0.0 { t.d_step(&b)? } else { f64::NAN };
            let (bd, p) = t.g_loss(&b, true)?;
            check_finite(bd.total, epoch, step)?;
            info!(
                target: "tumorforge::train",
                "net=g_inpaint epoch={epoch} step={step} pix={:.6} cont={:.6} adv={:.6} total={:.6} d_objective={d_value:.6}",
                bd.pix, bd.cont, bd.adv, bd.total
            );
            terms.push(bd);
            pix.push(p);
            step += 1;
        }
        let n = terms.len().max(1) as f64;
        let avg = LossBreakdown {
            pix: terms.iter().map(|t| t.pix).sum::<f64>() / n,
            cont: terms.iter().map(|t| t.cont).sum::<f64>() / n,
            adv: terms.iter().map(|t| t.adv).sum::<f64>() / n,
            total: terms.iter().map(|t| t.total).sum::<f64>() / n,
        };
        let val_loss = match &val_batches {
            Some(vb) => t.validation_loss(vb)?,
            None => mean(&pix),
        };
        info!(target: "tumorforge::train", "net=g_inpaint epoch={epoch} train_loss={:.6} val_loss={val_loss:.6}", avg.total);
        report.train_loss.push(avg.total);
        report.train_terms.push(avg);
        report.val_loss.push(val_loss);
        snaps.offer(epoch, val_loss, &[&t.g, &t.d], cfg)?;
    }
    let (mut g, mut d) = (t.g, t.d);
    if let Some(mut best) = snaps.best(&mut report) {
        d = best.remove(1);
        g = best.remove(0);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((g, d, report))
}
