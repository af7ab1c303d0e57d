#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tumorforge::engine::{Graph, ParamStore, Tensor, Var};
use tumorforge::losses::{
    adversarial_loss, content_loss, generator_adversarial_term, l1_loss, total_inpaint_loss, LossWeights, Reduction,
};
use tumorforge::nets::{build_d_inpaint, build_feature_extractor, ExtractorMode, Network, NetworkKind};

pub const FD_STEP: f64 = 1e-3;
/// Fallback step for probes whose ±1e-3 interval straddles a ReLU, max-pool
/// or L1 kink, where the central difference does not estimate a derivative.
pub const FD_FINE_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;

/// Compare at the standard step, then once more at the fine step if needed.
/// Returns the accepted relative error and whether the fine step was used.
fn probe(analytic: f64, central: impl Fn(f64) -> f64) -> (f64, bool) {
    let coarse = rel_err(analytic, central(FD_STEP));
    if coarse <= FD_TOL {
        return (coarse, false);
    }
    (rel_err(analytic, central(FD_FINE_STEP)), true)
}

/// Relative error with an absolute floor so that vanishing gradients compare
/// against float noise rather than each other.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    /// Probes that needed the fine step.
    pub refined: usize,
    pub max_rel: f64,
}

impl GradCheck {
    pub fn ok(&self) -> bool {
        self.max_rel <= FD_TOL
    }
}

pub fn random_tensor(shape: [usize; 4], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

fn readout(g: &mut Graph<f64>, y: Var, kind: NetworkKind, rng_seed: u64) -> Var {
    let shape = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if kind == NetworkKind::UnetSeg {
        let [n, _, h, w] = shape;
        let labels: Vec<u8> = (0..n * h * w).map(|_| rng.random_range(0..5)).collect();
        return g.softmax_cross_entropy(y, &labels);
    }
    let r = random_tensor(shape, &mut rng, -1.0, 1.0);
    let z = g.mul_const(y, &r);
    g.mean(z)
}

fn network_loss(net: &Network, store: &ParamStore<f64>, inputs: &[Tensor<f64>], seed: u64) -> (f64, Graph<f64>, Var, Vec<Var>) {
    let mut g = Graph::new();
    let p = store.bind(&mut g, true);
    let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let y = net.forward(&mut g, &p, &xs);
    let l = readout(&mut g, y, net.kind(), seed);
    (g.value(l).item(), g, l, p)
}

/// Central differences on `n_params` randomly chosen scalar parameters of a
/// network built at size 32 and run on 16×16 inputs, in f64.
pub fn check_network(kind: NetworkKind, seed: u64, n_params: usize) -> GradCheck {
    let net = Network::build(kind, 32, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let inputs: Vec<Tensor<f64>> =
        net.input_spec().iter().map(|&[c, _, _]| random_tensor([1, c, 16, 16], &mut rng, -0.5, 1.5)).collect();
    let store: ParamStore<f64> = net.params().cast();
    let (_, g, l, p) = network_loss(&net, &store, &inputs, seed);
    let mut grads = g.backward(l);
    let analytic = store.gradients(&mut grads, &p);

    let sizes: Vec<usize> = (0..store.len()).map(|i| store.get(i).len()).collect();
    let total: usize = sizes.iter().sum();
    let (mut max_rel, mut refined) = (0.0f64, 0);
    for _ in 0..n_params {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let orig = store.get(t).data()[flat];
        let cell = std::cell::RefCell::new(store.clone());
        let central = |h: f64| {
            let mut s = cell.borrow_mut();
            s.get_mut(t).data_mut()[flat] = orig + h;
            let up = network_loss(&net, &s, &inputs, seed).0;
            s.get_mut(t).data_mut()[flat] = orig - h;
            let down = network_loss(&net, &s, &inputs, seed).0;
            s.get_mut(t).data_mut()[flat] = orig;
            (up - down) / (2.0 * h)
        };
        let (rel, fine) = probe(analytic[t].data()[flat], central);
        max_rel = max_rel.max(rel);
        refined += fine as usize;
    }
    GradCheck { name: kind.name().to_string(), checked: n_params, refined, max_rel }
}

/// Central differences on every element of `x` for a scalar function.
pub fn check_fn(name: &str, x: &Tensor<f64>, f: &dyn Fn(&mut Graph<f64>, Var) -> Var) -> GradCheck {
    let eval = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.variable(x.clone());
        let l = f(&mut g, v);
        let value = g.value(l).item();
        let grad = g.backward(l).get(v).cloned();
        (value, grad)
    };
    let (_, grad) = eval(x);
    let grad = grad.unwrap_or_else(|| Tensor::zeros(x.shape()));
    let (mut max_rel, mut refined) = (0.0f64, 0);
    for i in 0..x.len() {
        let central = |h: f64| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let up = eval(&p).0;
            p.data_mut()[i] -= 2.0 * h;
            (up - eval(&p).0) / (2.0 * h)
        };
        let (rel, fine) = probe(grad.data()[i], central);
        max_rel = max_rel.max(rel);
        refined += fine as usize;
    }
    GradCheck { name: name.to_string(), checked: x.len(), refined, max_rel }
}

/// Gradient checks for each implemented loss on 8×8 tensors.
pub fn check_losses(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_tensor([1, 4, 8, 8], &mut rng, -0.5, 2.0);
    let target = random_tensor([1, 4, 8, 8], &mut rng, -0.5, 2.0);
    let mask = random_tensor([1, 1, 8, 8], &mut rng, 0.0, 1.0);
    let scores = random_tensor([2, 1, 1, 1], &mut rng, 0.1, 0.9);
    let other = random_tensor([2, 1, 1, 1], &mut rng, 0.1, 0.9);
    let logits = random_tensor([1, 5, 8, 8], &mut rng, -2.0, 2.0);
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..5)).collect();
    let psi = build_feature_extractor(ExtractorMode::FixedRandom, seed, None).unwrap();
    let d = build_d_inpaint(32, seed).unwrap();

    let mut out = Vec::new();
    for (name, r) in [("pixel L1 (mean)", Reduction::Mean), ("pixel L1 (sum)", Reduction::Sum)] {
        out.push(check_fn(name, &pred, &|g, v| {
            let t = g.constant(target.clone());
            l1_loss(g, v, t, r).unwrap()
        }));
    }
    out.push(check_fn("content", &pred, &|g, v| {
        let t = g.constant(target.clone());
        content_loss(g, v, t, &psi, Reduction::Mean).unwrap()
    }));
    out.push(check_fn("adversarial (generator term)", &scores, &|g, v| generator_adversarial_term(g, v).unwrap()));
    out.push(check_fn("adversarial (wrt real scores)", &scores, &|g, v| {
        let f = g.constant(other.clone());
        adversarial_loss(g, v, f).unwrap()
    }));
    out.push(check_fn("adversarial (wrt fake scores)", &scores, &|g, v| {
        let r = g.constant(other.clone());
        adversarial_loss(g, r, v).unwrap()
    }));
    out.push(check_fn("total inpainting objective", &pred, &|g, v| {
        let t = g.constant(target.clone());
        let m = g.constant(mask.clone());
        let p = d.bind(g, false);
        let d_fake = d.forward(g, &p, &[v, m]);
        total_inpaint_loss(g, v, t, Some(d_fake), Some(&psi), &LossWeights::default()).unwrap().0
    }));
    out.push(check_fn("segmentation cross-entropy", &logits, &|g, v| g.softmax_cross_entropy(v, &labels)));
    out
}

/// Region membership written out independently of the library: WT is any
/// tumor class, TC adds ET and NCR, ET alone.
pub fn oracle_region(label: u8, region: usize) -> bool {
    match region {
        0 => matches!(label, 2..=4),
        1 => matches!(label, 3 | 4),
        _ => label == 3,
    }
}

pub fn oracle_grade_region(grade: f32, region: usize) -> bool {
    match region {
        0 => grade != 0.0,
        1 => grade == 0.75 || grade == 1.0,
        _ => grade == 0.75,
    }
}

/// `(tp, fp, fn, dice, sensitivity, precision)` per region by direct pixel counting.
pub fn oracle_scores(pred: &[u8], gt: &[f32]) -> [(usize, usize, usize, f64, f64, f64); 3] {
    let mut out = [(0, 0, 0, 0.0, 0.0, 0.0); 3];
    for (region, slot) in out.iter_mut().enumerate() {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..pred.len() {
            let p = oracle_region(pred[i], region);
            let t = oracle_grade_region(gt[i], region);
            if p && t {
                tp += 1;
            } else if p {
                fp += 1;
            } else if t {
                fn_ += 1;
            }
        }
        let (dice, sens, prec) = if tp + fp + fn_ == 0 {
            (1.0, 1.0, 1.0)
        } else {
            let q = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            (q(2 * tp, 2 * tp + fp + fn_), q(tp, tp + fn_), q(tp, tp + fp))
        };
        *slot = (tp, fp, fn_, dice, sens, prec);
    }
    out
}

/// Fréchet distance between two 1-D Gaussians.
pub fn gaussian_fid_1d(mu_a: f64, var_a: f64, mu_b: f64, var_b: f64) -> f64 {
    (mu_a - mu_b).powi(2) + var_a + var_b - 2.0 * (var_a * var_b).sqrt()
}

/// Three-point sample whose unbiased mean and variance are exactly `(mu, var)`.
pub fn three_point(mu: f64, var: f64) -> Vec<Vec<f64>> {
    let s = var.sqrt();
    vec![vec![mu - s], vec![mu], vec![mu + s]]
}
