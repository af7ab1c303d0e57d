//! Pixel, content and adversarial losses recorded on a [`Graph`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Graph, Real, Tensor, Var};
use crate::nets::Network;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 4], [usize; 4]),
    #[error("discriminator output {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("weighted term `{0}` has no input")]
    MissingTerm(&'static str),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl Reduction {
    fn is_mean(self) -> bool {
        self == Reduction::Mean
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_pix: f64,
    pub w_cont: f64,
    pub w_adv: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_pix: 1.0, w_cont: 0.1, w_adv: 0.01, reduction: Reduction::Mean }
    }
}

impl LossWeights {
    pub fn new(w_pix: f64, w_cont: f64, w_adv: f64, reduction: Reduction) -> Result<Self, LossError> {
        let w = Self { w_pix, w_cont, w_adv, reduction };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let all = [self.w_pix, self.w_cont, self.w_adv];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LossError::InvalidWeights(format!("weights must be finite and non-negative, got {all:?}")));
        }
        if all.iter().all(|&v| v == 0.0) {
            return Err(LossError::InvalidWeights("all weights are zero".into()));
        }
        Ok(())
    }

    /// The ablation presets: pixel only, +adversarial, +content, all three.
    pub fn preset(name: &str) -> Option<Self> {
        let d = Self::default();
        let (c, a) = match name {
            "pix" => (0.0, 0.0),
            "pix+adv" => (0.0, d.w_adv),
            "pix+cont" => (d.w_cont, 0.0),
            "pix+adv+cont" => (d.w_cont, d.w_adv),
            _ => return None,
        };
        Some(Self { w_cont: c, w_adv: a, ..d })
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var) -> Result<(), LossError> {
    if g.shape(a) != g.shape(b) {
        return Err(LossError::ShapeMismatch(g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Absolute-difference loss between two recorded values.
pub fn l1_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, reduction: Reduction) -> Result<Var, LossError> {
    same_shape(g, pred, target)?;
    Ok(g.l1(pred, target, reduction.is_mean()))
}

/// [`l1_loss`] on plain tensors.
pub fn l1_value(pred: &Tensor<f32>, target: &Tensor<f32>, reduction: Reduction) -> Result<f64, LossError> {
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch(pred.shape(), target.shape()));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(if reduction.is_mean() { sum / pred.len() as f64 } else { sum })
}

/// L1 distance between feature maps of a frozen extractor.
pub fn content_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    psi: &Network,
    reduction: Reduction,
) -> Result<Var, LossError> {
    let p = psi.bind(g, false);
    content_loss_bound(g, pred, target, psi, &p, reduction)
}

/// [`content_loss`] with extractor parameters already bound on `g`.
pub fn content_loss_bound<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    psi: &Network,
    params: &[Var],
    reduction: Reduction,
) -> Result<Var, LossError> {
    same_shape(g, pred, target)?;
    let fp = psi.forward(g, params, &[pred]);
    let ft = psi.forward(g, params, &[target]);
    l1_loss(g, fp, ft, reduction)
}

fn check_range<T: Real>(g: &Graph<T>, d: Var) -> Result<(), LossError> {
    match g.value(d).data().iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
        Some(v) => Err(LossError::OutOfRange(v.to_f64().unwrap_or(f64::NAN))),
        None => Ok(()),
    }
}

/// `mean(1 - d_fake)`, the generator-facing half of the adversarial loss.
pub fn generator_adversarial_term<T: Real>(g: &mut Graph<T>, d_fake: Var) -> Result<Var, LossError> {
    check_range(g, d_fake)?;
    let m = g.mean(d_fake);
    Ok(g.affine(m, -T::one(), T::one()))
}

/// `mean(d_real) + mean(1 - d_fake)`, without logarithms. The discriminator
/// ascends it and the generator descends it.
pub fn adversarial_loss<T: Real>(g: &mut Graph<T>, d_real: Var, d_fake: Var) -> Result<Var, LossError> {
    check_range(g, d_real)?;
    let real = g.mean(d_real);
    let fake = generator_adversarial_term(g, d_fake)?;
    Ok(g.add(real, fake))
}

/// Weighted contributions of each term, already multiplied by its weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pix: f64,
    pub cont: f64,
    pub adv: f64,
    pub total: f64,
}

/// `w_pix·L_pix + w_cont·L_cont + w_adv·mean(1 − d_fake)`. Terms with zero
/// weight are not recorded, so `psi` and `d_fake` may then be absent.
pub fn total_inpaint_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    d_fake: Option<Var>,
    psi: Option<&Network>,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    w.validate()?;
    let mut terms = Vec::new();
    let mut out = LossBreakdown::default();
    let value = |g: &Graph<T>, v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
    if w.w_pix > 0.0 {
        let v = l1_loss(g, pred, target, w.reduction)?;
        out.pix = w.w_pix * value(g, v);
        terms.push((v, T::lit(w.w_pix)));
    }
    if w.w_cont > 0.0 {
        let psi = psi.ok_or(LossError::MissingTerm("cont"))?;
        let v = content_loss(g, pred, target, psi, w.reduction)?;
        out.cont = w.w_cont * value(g, v);
        terms.push((v, T::lit(w.w_cont)));
    }
    if w.w_adv > 0.0 {
        let v = generator_adversarial_term(g, d_fake.ok_or(LossError::MissingTerm("adv"))?)?;
        out.adv = w.w_adv * value(g, v);
        terms.push((v, T::lit(w.w_adv)));
    }
    let total = g.lincomb(&terms);
    out.total = value(g, total);
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_feature_extractor, ExtractorMode};

    fn t(shape: [usize; 4], f: impl Fn(usize) -> f32) -> Tensor<f32> {
        Tensor::from_vec(shape, (0..shape.iter().product()).map(f).collect())
    }

    #[test]
    fn l1_examples() {
        let a = t([1, 1, 2, 2], |i| i as f32);
        let b = t([1, 1, 2, 2], |i| i as f32 + 1.0);
        assert_eq!(l1_value(&a, &b, Reduction::Sum).unwrap(), 4.0);
        assert_eq!(l1_value(&a, &a, Reduction::Sum).unwrap(), 0.0);
        let mut g = Graph::new();
        let (av, bv) = (g.variable(a.clone()), g.constant(b));
        let l = l1_loss(&mut g, av, bv, Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), 4.0);
        assert_eq!(g.backward(l).get(av).unwrap().data(), &[-1.0; 4]);
        let c = g.constant(t([1, 1, 1, 4], |_| 0.0));
        assert!(matches!(l1_loss(&mut g, av, c, Reduction::Sum), Err(LossError::ShapeMismatch(..))));
    }

    #[test]
    fn adversarial_examples() {
        let run = |real: f32, fake: f32| {
            let mut g = Graph::<f32>::new();
            let r = g.constant(Tensor::full([3, 1, 1, 1], real));
            let f = g.constant(Tensor::full([3, 1, 1, 1], fake));
            adversarial_loss(&mut g, r, f).map(|v| g.value(v).item())
        };
        assert_eq!(run(1.0, 0.0).unwrap(), 2.0);
        assert_eq!(run(0.5, 0.5).unwrap(), 1.0);
        assert!(matches!(run(1.5, 0.5), Err(LossError::OutOfRange(_))));
        assert!(matches!(run(0.5, -0.1), Err(LossError::OutOfRange(_))));
    }

    #[test]
    fn weights_validation_and_presets() {
        assert!(LossWeights::new(0.0, 0.0, 0.0, Reduction::Sum).is_err());
        assert!(LossWeights::new(-1.0, 0.0, 1.0, Reduction::Sum).is_err());
        for name in ["pix", "pix+adv", "pix+cont", "pix+adv+cont"] {
            LossWeights::preset(name).unwrap().validate().unwrap();
        }
        assert_eq!(LossWeights::default(), LossWeights::preset("pix+adv+cont").unwrap());
    }

    #[test]
    fn total_loss_composition() {
        let psi = build_feature_extractor(ExtractorMode::FixedRandom, 0, None).unwrap();
        let pred = t([1, 4, 8, 8], |i| (i % 7) as f32 * 0.2);
        let target = t([1, 4, 8, 8], |i| (i % 5) as f32 * 0.3);
        let run = |w: LossWeights| {
            let mut g = Graph::<f32>::new();
            let p = g.variable(pred.clone());
            let y = g.constant(target.clone());
            let d = g.constant(Tensor::full([1, 1, 1, 1], 0.25));
            total_inpaint_loss(&mut g, p, y, Some(d), Some(&psi), &w).unwrap().1
        };
        let base = LossWeights { reduction: Reduction::Sum, ..LossWeights::default() };
        let only_pix = run(LossWeights { w_cont: 0.0, w_adv: 0.0, ..base });
        let reference = l1_value(&pred, &target, Reduction::Sum).unwrap();
        assert!((only_pix.total - reference).abs() <= 1e-6 * reference);
        assert_eq!(only_pix.total, only_pix.pix);
        let full = run(base);
        let doubled = run(LossWeights { w_pix: 2.0 * base.w_pix, ..base });
        assert_eq!(doubled.pix, 2.0 * full.pix);
        assert_eq!(full.adv, base.w_adv * 0.75);
        assert!(full.cont > 0.0);
    }

    #[test]
    fn content_loss_leaves_extractor_untouched() {
        let psi = build_feature_extractor(ExtractorMode::FixedRandom, 1, None).unwrap();
        let mut g = Graph::<f32>::new();
        let p = g.variable(t([1, 4, 8, 8], |i| (i % 3) as f32));
        let y = g.constant(t([1, 4, 8, 8], |i| (i % 4) as f32));
        let same = content_loss(&mut g, y, y, &psi, Reduction::Sum).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
        let bound = psi.bind(&mut g, false);
        let l = content_loss_bound(&mut g, p, y, &psi, &bound, Reduction::Sum).unwrap();
        let direct = content_loss(&mut g, p, y, &psi, Reduction::Sum).unwrap();
        assert_eq!(g.value(l).item(), g.value(direct).item());
        let grads = g.backward(l);
        assert!(grads.get(p).is_some_and(|d| d.data().iter().any(|&v| v != 0.0)));
        assert!(bound.iter().all(|&v| grads.get(v).is_none()));
    }
}
