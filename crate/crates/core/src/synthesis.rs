//! Rejection-sampled synthesis of tumor slices from normal slices and
//! random concentric circles.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BinaryMask, DataError, DatasetManifest, GradeMask, MCSlice, Plane, SliceRecord, Source, GRADE_ED};
use crate::engine::Tensor;
use crate::geometry::{apply_mask, binarize, quantize_value, render_circles, render_disk, ConcentricCircles, GeometryError};
use crate::nets::{load_checkpoint, save_checkpoint, NetError, Network, NetworkKind};

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("model {0} is missing or does not match the input")]
    UntrainedModel(&'static str),
    #[error("image {image} exceeded {attempts} rejected attempts")]
    RejectionBudgetExceeded { image: usize, attempts: usize },
    #[error("invalid synthesis config: {0}")]
    InvalidConfig(String),
    #[error("no normal slices to synthesize from")]
    NoNormals,
    #[error("normal slice must be normalized")]
    NotNormalized,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub n_images: usize,
    /// Inclusive pixel interval for both center coordinates.
    pub center_range: (f64, f64),
    /// Inclusive interval each radius is drawn from.
    pub radius_range: (f64, f64),
    pub max_attempts_per_image: usize,
    pub seed: u64,
}

impl SynthesisConfig {
    /// Ranges scaled from the 256-pixel reference (centers 80..160, radii 0..40).
    pub fn for_size(size: usize, n_images: usize, seed: u64) -> Self {
        let s = size as f64;
        Self {
            n_images,
            center_range: (0.3125 * s, 0.625 * s),
            radius_range: (0.0, 0.15625 * s),
            max_attempts_per_image: 1000,
            seed,
        }
    }

    pub fn validate(&self, size: usize) -> Result<(), SynthesisError> {
        let bad = |m: String| Err(SynthesisError::InvalidConfig(m));
        let (c0, c1) = self.center_range;
        let (r0, r1) = self.radius_range;
        if !(c0.is_finite() && c1.is_finite() && 0.0 <= c0 && c0 <= c1 && c1 <= (size - 1) as f64) {
            return bad(format!("center range {:?} outside [0, {}]", self.center_range, size - 1));
        }
        if !(r0.is_finite() && r1.is_finite() && 0.0 <= r0 && r0 <= r1 && r1 <= size as f64) {
            return bad(format!("radius range {:?} outside [0, {size}]", self.radius_range));
        }
        if self.max_attempts_per_image == 0 {
            return bad("max_attempts_per_image must be at least 1".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Uniform center and three uniform radii sorted into `r1 >= r2 >= r3`.
pub fn sample_circles(rng: &mut impl Rng, cfg: &SynthesisConfig) -> ConcentricCircles {
    let cx = uniform(rng, cfg.center_range);
    let cy = uniform(rng, cfg.center_range);
    let mut r = [uniform(rng, cfg.radius_range), uniform(rng, cfg.radius_range), uniform(rng, cfg.radius_range)];
    r.sort_by(|a, b| b.total_cmp(a));
    ConcentricCircles::new(cx, cy, r[0], r[1], r[2]).expect("sorted finite radii")
}

/// The three generators used at synthesis time, plus the discriminator when
/// it was kept from training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelBundle {
    pub g_binary: Option<Network>,
    pub g_grade: Option<Network>,
    pub g_inpaint: Option<Network>,
    pub d_inpaint: Option<Network>,
}

const BUNDLE: [(NetworkKind, &str); 4] = [
    (NetworkKind::GBinary, "g_binary.safetensors"),
    (NetworkKind::GGrade, "g_grade.safetensors"),
    (NetworkKind::GInpaint, "g_inpaint.safetensors"),
    (NetworkKind::DInpaint, "d_inpaint.safetensors"),
];

impl ModelBundle {
    fn slot(&self, kind: NetworkKind) -> &Option<Network> {
        match kind {
            NetworkKind::GBinary => &self.g_binary,
            NetworkKind::GGrade => &self.g_grade,
            NetworkKind::GInpaint => &self.g_inpaint,
            _ => &self.d_inpaint,
        }
    }

    fn slot_mut(&mut self, kind: NetworkKind) -> &mut Option<Network> {
        match kind {
            NetworkKind::GBinary => &mut self.g_binary,
            NetworkKind::GGrade => &mut self.g_grade,
            NetworkKind::GInpaint => &mut self.g_inpaint,
            _ => &mut self.d_inpaint,
        }
    }

    /// Write every present network into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), SynthesisError> {
        for (kind, file) in BUNDLE {
            if let Some(net) = self.slot(kind) {
                save_checkpoint(net, 0, None, &dir.join(file))?;
            }
        }
        Ok(())
    }

    /// Read whatever networks exist in `dir`.
    pub fn load(dir: &Path) -> Result<Self, SynthesisError> {
        let mut b = Self::default();
        for (kind, file) in BUNDLE {
            let path = dir.join(file);
            if path.exists() {
                let (net, _) = load_checkpoint(&path)?;
                if net.kind() != kind {
                    return Err(SynthesisError::UntrainedModel(kind.name()));
                }
                *b.slot_mut(kind) = Some(net);
            }
        }
        Ok(b)
    }

    fn require(&self, kind: NetworkKind, size: usize) -> Result<&Network, SynthesisError> {
        match self.slot(kind) {
            Some(n) if n.kind() == kind && n.size() == size => Ok(n),
            _ => Err(SynthesisError::UntrainedModel(kind.name())),
        }
    }
}

/// Result of one synthesis attempt.
#[derive(Clone, Debug, PartialEq)]
pub enum Synthesis {
    Accepted { image: MCSlice, grade: GradeMask },
    Rejected,
}

/// Whether every mask pixel lies inside the support.
pub fn contained(mask: &BinaryMask, support: &BinaryMask) -> bool {
    let n = mask.plane().data().len();
    (0..n).all(|i| !mask.is_set(i) || support.is_set(i))
}

fn single(plane: &Plane) -> Tensor<f32> {
    Tensor::from_vec([1, 1, plane.height(), plane.width()], plane.data().to_vec())
}

fn pair(a: &Plane, b: &Plane) -> Tensor<f32> {
    Tensor::from_vec([1, 2, a.height(), a.width()], [a.data(), b.data()].concat())
}

/// Turn circles into a tumor on `x_n`. Pixels outside the generated binary
/// mask are copied from `x_n` unchanged.
pub fn synthesize_one(x_n: &MCSlice, c: &ConcentricCircles, models: &ModelBundle) -> Result<Synthesis, SynthesisError> {
    if !x_n.is_normalized() {
        return Err(SynthesisError::NotNormalized);
    }
    let (h, w) = x_n.dims();
    let g_binary = models.require(NetworkKind::GBinary, h)?;
    let g_grade = models.require(NetworkKind::GGrade, h)?;
    let g_inpaint = models.require(NetworkKind::GInpaint, h)?;
    let support = x_n.support();

    // A circle covering no pixel describes no tumor.
    let disk = render_disk(c, h, w);
    let binary = if disk.is_empty() {
        BinaryMask::zeros(h, w)
    } else {
        let y = g_binary.predict(&[&pair(disk.plane(), support.plane())])?;
        binarize(&Plane::new(h, w, y.into_vec()), 0.5)
    };
    if !contained(&binary, support) {
        return Ok(Synthesis::Rejected);
    }
    if binary.is_empty() {
        return Ok(Synthesis::Accepted { image: x_n.clone(), grade: GradeMask::zeros(h, w) });
    }

    let circles = render_circles(c, h, w);
    let y = g_grade.predict(&[&pair(circles.plane(), binary.plane())])?;
    // Restrict to the binary mask; unlabelled tumor pixels become edema so
    // both masks agree on the tumor extent.
    let grade_data = y
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if binary.is_set(i) { quantize_value(v).max(GRADE_ED) } else { 0.0 })
        .collect();
    let grade = GradeMask::new(Plane::new(h, w, grade_data))?;

    let masked = apply_mask(x_n, &binary)?;
    let image = Tensor::from_vec([1, 4, h, w], masked.data().to_vec());
    let out = g_inpaint.predict(&[&image, &single(grade.plane())])?;
    let p = h * w;
    let data = x_n
        .data()
        .iter()
        .zip(out.data())
        .enumerate()
        .map(|(i, (&orig, &gen))| if binary.is_set(i % p) { gen } else { orig })
        .collect();
    let image = MCSlice::from_parts(h, w, data, true, support.clone())?;
    Ok(Synthesis::Accepted { image, grade })
}

/// Draw (normal slice, circles) pairs until `cfg.n_images` are accepted.
/// Image `i` uses its own stream seeded with `seed + i`; normal slices are
/// taken round-robin across attempts.
pub fn synthesize_batch(
    normals: &DatasetManifest,
    cfg: &SynthesisConfig,
    models: &ModelBundle,
) -> Result<DatasetManifest, SynthesisError> {
    if cfg.n_images == 0 {
        return Ok(DatasetManifest::default());
    }
    if normals.is_empty() {
        return Err(SynthesisError::NoNormals);
    }
    let size = normals.records[0].images.height();
    cfg.validate(size)?;
    let pool: Vec<MCSlice> = normals
        .records
        .iter()
        .map(|r| if r.images.is_normalized() { Ok(r.images.clone()) } else { r.images.normalized() })
        .collect::<Result<_, DataError>>()?;
    let mut records = Vec::with_capacity(cfg.n_images);
    let mut next = 0usize;
    for i in 0..cfg.n_images {
        let seed = cfg.seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut accepted = None;
        for _ in 0..cfg.max_attempts_per_image {
            let x_n = &pool[next % pool.len()];
            next += 1;
            let c = sample_circles(&mut rng, cfg);
            if let Synthesis::Accepted { image, grade } = synthesize_one(x_n, &c, models)? {
                accepted = Some((image, grade));
                break;
            }
        }
        let (image, grade) = accepted
            .ok_or(SynthesisError::RejectionBudgetExceeded { image: i, attempts: cfg.max_attempts_per_image })?;
        let record = SliceRecord::new(format!("synth_{i:05}"), image, Some(grade), Source::Synthesized, Some(seed))?;
        records.push(record);
    }
    Ok(with_train_split(records))
}

fn with_train_split(records: Vec<SliceRecord>) -> DatasetManifest {
    let ids = records.iter().map(|r| r.id.clone()).collect();
    DatasetManifest { records, splits: BTreeMap::from([("train".to_string(), ids)]) }
}

/// Place the same user-given circles on `n_images` normal slices. Image `i`
/// starts at normal `i` and moves on round-robin when the tumor does not fit,
/// giving up after one pass over the pool.
pub fn synthesize_with_circles(
    normals: &DatasetManifest,
    c: &ConcentricCircles,
    n_images: usize,
    seed: u64,
    models: &ModelBundle,
) -> Result<DatasetManifest, SynthesisError> {
    if n_images == 0 {
        return Ok(DatasetManifest::default());
    }
    if normals.is_empty() {
        return Err(SynthesisError::NoNormals);
    }
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let mut accepted = None;
        for k in 0..normals.len() {
            let r = &normals.records[(i + k) % normals.len()];
            let x_n = if r.images.is_normalized() { r.images.clone() } else { r.images.normalized()? };
            if let Synthesis::Accepted { image, grade } = synthesize_one(&x_n, c, models)? {
                accepted = Some((image, grade));
                break;
            }
        }
        let (image, grade) =
            accepted.ok_or(SynthesisError::RejectionBudgetExceeded { image: i, attempts: normals.len() })?;
        let s = seed.wrapping_add(i as u64);
        records.push(SliceRecord::new(format!("synth_{i:05}"), image, Some(grade), Source::Synthesized, Some(s))?);
    }
    Ok(with_train_split(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_d_inpaint, build_g_binary, build_g_grade, build_g_inpaint};
    use crate::phantom::{generate_phantom, PhantomConfig};

    fn bundle(size: usize) -> ModelBundle {
        ModelBundle {
            g_binary: Some(build_g_binary(size, 1).unwrap()),
            g_grade: Some(build_g_grade(size, 2).unwrap()),
            g_inpaint: Some(build_g_inpaint(size, 3).unwrap()),
            d_inpaint: Some(build_d_inpaint(size, 4).unwrap()),
        }
    }

    fn normal(size: usize) -> MCSlice {
        let d = generate_phantom(&PhantomConfig { size, n_subjects: 1, slices_per_subject: 1, tumor_probability: 0.0, seed: 3 })
            .unwrap();
        d.records[0].images.normalized().unwrap()
    }

    #[test]
    fn reference_ranges() {
        let c = SynthesisConfig::for_size(256, 1, 0);
        assert_eq!(c.center_range, (80.0, 160.0));
        assert_eq!(c.radius_range, (0.0, 40.0));
        c.validate(256).unwrap();
        assert!(SynthesisConfig { center_range: (0.0, 300.0), ..c }.validate(256).is_err());
    }

    #[test]
    fn sampled_radii_are_sorted_and_reproducible() {
        let cfg = SynthesisConfig::for_size(256, 1, 0);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..200).map(|_| sample_circles(&mut rng, &cfg)).collect::<Vec<_>>()
        };
        let a = draw(4);
        assert!(a.iter().all(|c| c.r1 >= c.r2 && c.r2 >= c.r3));
        assert_eq!(a, draw(4));
    }

    #[test]
    fn empty_circles_return_the_input() {
        let x = normal(32);
        let c = ConcentricCircles::new(16.0, 16.0, 0.0, 0.0, 0.0).unwrap();
        match synthesize_one(&x, &c, &bundle(32)).unwrap() {
            Synthesis::Accepted { image, grade } => {
                assert_eq!(image, x);
                assert!(grade.is_empty());
            }
            Synthesis::Rejected => panic!("empty tumor rejected"),
        }
    }

    #[test]
    fn missing_model_is_untrained() {
        let x = normal(32);
        let c = ConcentricCircles::new(16.0, 16.0, 4.0, 2.0, 1.0).unwrap();
        let models = ModelBundle { g_grade: None, ..bundle(32) };
        assert!(matches!(synthesize_one(&x, &c, &models), Err(SynthesisError::UntrainedModel("g_grade"))));
        let wrong_size = ModelBundle { g_inpaint: Some(build_g_inpaint(64, 0).unwrap()), ..bundle(32) };
        assert!(matches!(synthesize_one(&x, &c, &wrong_size), Err(SynthesisError::UntrainedModel("g_inpaint"))));
    }

    #[test]
    fn accepted_outputs_keep_non_tumor_pixels() {
        let x = normal(32);
        let models = bundle(32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SynthesisConfig::for_size(32, 1, 0);
        for _ in 0..10 {
            let c = sample_circles(&mut rng, &cfg);
            if let Synthesis::Accepted { image, grade } = synthesize_one(&x, &c, &models).unwrap() {
                let binary = binarize(grade.plane(), 0.0);
                assert!(contained(&binary, x.support()));
                let p = 32 * 32;
                for (i, (&a, &b)) in image.data().iter().zip(x.data()).enumerate() {
                    if !binary.is_set(i % p) {
                        assert_eq!(a.to_bits(), b.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn zero_images_and_impossible_placement() {
        let models = bundle(32);
        let normals = DatasetManifest::new(vec![SliceRecord::new("n", normal(32), None, Source::Phantom, None).unwrap()]);
        assert!(synthesize_batch(&normals, &SynthesisConfig::for_size(32, 0, 0), &models).unwrap().is_empty());
        let corner = SynthesisConfig {
            n_images: 1,
            center_range: (0.0, 0.0),
            radius_range: (32.0, 32.0),
            max_attempts_per_image: 3,
            seed: 0,
        };
        assert!(matches!(
            synthesize_batch(&normals, &corner, &models),
            Err(SynthesisError::RejectionBudgetExceeded { image: 0, attempts: 3 })
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bundle(32);
        b.save(dir.path()).unwrap();
        assert_eq!(ModelBundle::load(dir.path()).unwrap(), b);
    }
}
