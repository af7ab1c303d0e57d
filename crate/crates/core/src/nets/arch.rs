//! Architectures written once against [`Backend`], so the same description
//! drives parameter creation, symbolic shape tracing and graph recording.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::engine::{Graph, ParamStore, Real, Tensor, Var};

use super::{ExtractorMode, NetworkKind};

pub(crate) trait Backend {
    type X: Copy;
    /// (channels, height, width) of a value.
    fn dims(&self, x: Self::X) -> [usize; 3];
    fn conv(&mut self, name: &str, x: Self::X, cout: usize, k: usize, stride: usize, bias: bool) -> Self::X;
    fn inorm(&mut self, x: Self::X) -> Self::X;
    fn relu(&mut self, x: Self::X) -> Self::X;
    fn sigmoid(&mut self, x: Self::X) -> Self::X;
    fn clamp(&mut self, x: Self::X, lo: f32, hi: f32) -> Self::X;
    fn upsample(&mut self, x: Self::X, factor: usize) -> Self::X;
    fn max_pool2(&mut self, x: Self::X) -> Self::X;
    fn global_avg(&mut self, x: Self::X) -> Self::X;
    fn concat(&mut self, parts: &[Self::X]) -> Self::X;
    fn add(&mut self, a: Self::X, b: Self::X) -> Self::X;
    fn channel_mean(&mut self, x: Self::X) -> Self::X;
    fn mark(&mut self, label: &str, x: Self::X);
}

/// Channel divisor relative to the 256-pixel reference widths.
pub(crate) fn divisor(size: usize) -> usize {
    if size >= 256 {
        return 1;
    }
    let octaves = (256 / size).trailing_zeros() as usize;
    1 << (3 * octaves / 2)
}

pub(crate) fn width(size: usize, reference: usize) -> usize {
    (reference / divisor(size)).max(4)
}

pub(crate) fn unet_depth(size: usize) -> usize {
    size.trailing_zeros() as usize / 2
}

fn cir<B: Backend>(b: &mut B, name: &str, x: B::X, cout: usize, k: usize, stride: usize) -> B::X {
    let y = b.conv(name, x, cout, k, stride, false);
    let y = b.inorm(y);
    b.relu(y)
}

fn res<B: Backend>(b: &mut B, name: &str, x: B::X) -> B::X {
    let c = b.dims(x)[0];
    let y = cir(b, &format!("{name}.a"), x, c, 3, 1);
    let y = cir(b, &format!("{name}.b"), y, c, 3, 1);
    b.add(x, y)
}

/// Encoder-decoder with skip connections; returns pre-activation logits.
fn unet<B: Backend>(b: &mut B, size: usize, x: B::X, out: usize) -> B::X {
    let depth = unet_depth(size);
    let w = |l: usize| width(size, 64 << l);
    let mut skips = Vec::with_capacity(depth);
    let mut h = x;
    for l in 0..depth {
        h = cir(b, &format!("down{l}.a"), h, w(l), 3, 1);
        h = cir(b, &format!("down{l}.b"), h, w(l), 3, 1);
        b.mark(&format!("down{l}"), h);
        skips.push(h);
        h = b.max_pool2(h);
    }
    h = cir(b, "bottom.a", h, w(depth), 3, 1);
    h = cir(b, "bottom.b", h, w(depth), 3, 1);
    b.mark("bottom", h);
    for l in (0..depth).rev() {
        h = b.upsample(h, 2);
        h = cir(b, &format!("up{l}.conv"), h, w(l), 3, 1);
        h = b.concat(&[skips[l], h]);
        h = cir(b, &format!("up{l}.a"), h, w(l), 3, 1);
        h = cir(b, &format!("up{l}.b"), h, w(l), 3, 1);
        b.mark(&format!("up{l}"), h);
    }
    let y = b.conv("head", h, out, 1, 1, true);
    b.mark("logits", y);
    y
}

fn g_inpaint<B: Backend>(b: &mut B, size: usize, image: B::X, mask: B::X) -> B::X {
    let w = |c: usize| width(size, c);
    let x = b.concat(&[image, mask]);
    let mut e = cir(b, "image_enc.cir1", x, w(32), 3, 2);
    b.mark("image_enc.cir1", e);
    e = cir(b, "image_enc.cir2", e, w(128), 3, 2);
    b.mark("image_enc.cir2", e);
    for i in 0..3 {
        e = res(b, &format!("image_enc.res{i}"), e);
        b.mark(&format!("image_enc.res{i}"), e);
    }
    let mut m = cir(b, "mask_enc.cir1", mask, w(4), 3, 2);
    b.mark("mask_enc.cir1", m);
    m = cir(b, "mask_enc.cir2", m, w(16), 3, 2);
    b.mark("mask_enc.cir2", m);
    let f = b.concat(&[e, m]);
    b.mark("features", f);

    let mut branches = Vec::with_capacity(4);
    for c in 0..4 {
        let p = format!("dec{c}");
        let mut d = cir(b, &format!("{p}.cir1"), f, w(256), 3, 1);
        b.mark(&format!("{p}.cir1"), d);
        for i in 0..3 {
            d = res(b, &format!("{p}.res{i}"), d);
            b.mark(&format!("{p}.res{i}"), d);
        }
        d = b.upsample(d, 2);
        b.mark(&format!("{p}.up1"), d);
        d = cir(b, &format!("{p}.cir2"), d, w(128), 3, 1);
        b.mark(&format!("{p}.cir2"), d);
        d = b.upsample(d, 2);
        b.mark(&format!("{p}.up2"), d);
        d = cir(b, &format!("{p}.cir3"), d, w(64), 3, 1);
        b.mark(&format!("{p}.cir3"), d);
        // Linear output layer; an instance norm here would pin every
        // contrast to zero mean.
        d = b.conv(&format!("{p}.out"), d, 1, 7, 1, true);
        b.mark(&format!("{p}.out"), d);
        branches.push(d);
    }
    let y = b.concat(&branches);
    let y = b.clamp(y, crate::data::CLIP_LOW, crate::data::CLIP_HIGH);
    b.mark("output", y);
    y
}

fn d_inpaint<B: Backend>(b: &mut B, size: usize, image: B::X, mask: B::X) -> B::X {
    let w = |c: usize| width(size, c);
    let x = b.concat(&[image, mask]);
    let mut h = cir(b, "cir1", x, w(32), 3, 2);
    b.mark("cir1", h);
    h = cir(b, "cir2", h, w(64), 3, 2);
    b.mark("cir2", h);
    h = cir(b, "cir3", h, w(256), 3, 1);
    b.mark("cir3", h);
    for i in 0..3 {
        h = res(b, &format!("res{i}"), h);
        b.mark(&format!("res{i}"), h);
    }
    h = cir(b, "cir4", h, w(64), 3, 1);
    b.mark("cir4", h);
    // Plain convolution: normalizing a single channel before the global
    // average would make the score input-independent.
    h = b.conv("out", h, 1, 3, 1, true);
    b.mark("out", h);
    h = b.global_avg(h);
    b.mark("avg", h);
    let y = b.sigmoid(h);
    b.mark("output", y);
    y
}

fn extractor<B: Backend>(b: &mut B, mode: ExtractorMode, x: B::X) -> B::X {
    let gray = if b.dims(x)[0] == 1 { x } else { b.channel_mean(x) };
    let rgb = b.concat(&[gray, gray, gray]);
    let (c1, c2, stride) = match mode {
        ExtractorMode::FixedRandom => (32, 64, 2),
        ExtractorMode::Pretrained => (64, 64, 1),
    };
    let h = b.conv("conv1", rgb, c1, 3, stride, true);
    let h = b.relu(h);
    b.mark("conv1", h);
    let h = b.conv("conv2", h, c2, 3, stride, true);
    let h = b.relu(h);
    b.mark("conv2", h);
    h
}

/// Run the architecture of `kind` on `inputs` (already bound on `b`).
pub(crate) fn describe<B: Backend>(
    b: &mut B,
    kind: NetworkKind,
    size: usize,
    mode: ExtractorMode,
    inputs: &[B::X],
) -> B::X {
    match kind {
        NetworkKind::GBinary | NetworkKind::GGrade => {
            let y = unet(b, size, inputs[0], 1);
            let y = b.sigmoid(y);
            b.mark("output", y);
            y
        }
        NetworkKind::UnetSeg => unet(b, size, inputs[0], 5),
        NetworkKind::GInpaint => g_inpaint(b, size, inputs[0], inputs[1]),
        NetworkKind::DInpaint => d_inpaint(b, size, inputs[0], inputs[1]),
        NetworkKind::FeatureExtractor => extractor(b, mode, inputs[0]),
    }
}

pub(crate) enum Init {
    /// Shapes and counts only.
    None,
    Zeros,
    Seeded(u64),
}

/// Symbolic backend: tracks shapes, counts parameters and optionally
/// materializes them.
pub(crate) struct Symbolic {
    init: Init,
    rng: ChaCha8Rng,
    pub params: ParamStore<f32>,
    pub count: usize,
    pub trace: Vec<(String, [usize; 3])>,
}

impl Symbolic {
    pub fn new(init: Init) -> Self {
        let seed = if let Init::Seeded(s) = init { s } else { 0 };
        Self { init, rng: ChaCha8Rng::seed_from_u64(seed), params: ParamStore::new(), count: 0, trace: Vec::new() }
    }
}

impl Backend for Symbolic {
    type X = [usize; 3];

    fn dims(&self, x: [usize; 3]) -> [usize; 3] {
        x
    }

    fn conv(&mut self, name: &str, [cin, h, w]: [usize; 3], cout: usize, k: usize, stride: usize, bias: bool) -> [usize; 3] {
        self.count += cout * cin * k * k + if bias { cout } else { 0 };
        let shape = [cout, cin, k, k];
        let weight = match self.init {
            Init::None => None,
            Init::Zeros => Some(Tensor::zeros(shape)),
            Init::Seeded(_) => {
                let std = (2.0 / (cin * k * k) as f32).sqrt();
                let normal = Normal::new(0.0, std).expect("positive std");
                Some(Tensor::from_vec(shape, (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng)).collect()))
            }
        };
        if let Some(weight) = weight {
            self.params.add(format!("{name}.weight"), weight);
            if bias {
                self.params.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
            }
        }
        let pad = k / 2;
        [cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]
    }

    fn inorm(&mut self, x: [usize; 3]) -> [usize; 3] {
        x
    }
    fn relu(&mut self, x: [usize; 3]) -> [usize; 3] {
        x
    }
    fn sigmoid(&mut self, x: [usize; 3]) -> [usize; 3] {
        x
    }
    fn clamp(&mut self, x: [usize; 3], _: f32, _: f32) -> [usize; 3] {
        x
    }
    fn upsample(&mut self, [c, h, w]: [usize; 3], f: usize) -> [usize; 3] {
        [c, h * f, w * f]
    }
    fn max_pool2(&mut self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c, h / 2, w / 2]
    }
    fn global_avg(&mut self, [c, _, _]: [usize; 3]) -> [usize; 3] {
        [c, 1, 1]
    }
    fn concat(&mut self, parts: &[[usize; 3]]) -> [usize; 3] {
        let [_, h, w] = parts[0];
        assert!(parts.iter().all(|p| p[1] == h && p[2] == w), "concat of mismatched planes");
        [parts.iter().map(|p| p[0]).sum(), h, w]
    }
    fn add(&mut self, a: [usize; 3], b: [usize; 3]) -> [usize; 3] {
        assert_eq!(a, b);
        a
    }
    fn channel_mean(&mut self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        [1, h, w]
    }
    fn mark(&mut self, label: &str, x: [usize; 3]) {
        self.trace.push((label.to_string(), x));
    }
}

/// Records the architecture on a [`Graph`], consuming bound parameters in
/// registration order.
pub(crate) struct Recorder<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    params: &'a [Var],
    cursor: usize,
    pub trace: Vec<(String, [usize; 3])>,
}

impl<'a, T: Real> Recorder<'a, T> {
    pub fn new(g: &'a mut Graph<T>, params: &'a [Var]) -> Self {
        Self { g, params, cursor: 0, trace: Vec::new() }
    }

    fn next(&mut self, expect: [usize; 4]) -> Var {
        let v = self.params[self.cursor];
        assert_eq!(self.g.shape(v), expect, "parameter {} has the wrong shape", self.cursor);
        self.cursor += 1;
        v
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }
}

impl<T: Real> Backend for Recorder<'_, T> {
    type X = Var;

    fn dims(&self, x: Var) -> [usize; 3] {
        let [_, c, h, w] = self.g.shape(x);
        [c, h, w]
    }

    fn conv(&mut self, _: &str, x: Var, cout: usize, k: usize, stride: usize, bias: bool) -> Var {
        let cin = self.dims(x)[0];
        let w = self.next([cout, cin, k, k]);
        let b = bias.then(|| self.next([1, cout, 1, 1]));
        self.g.conv2d(x, w, b, stride, k / 2)
    }

    fn inorm(&mut self, x: Var) -> Var {
        self.g.instance_norm(x)
    }
    fn relu(&mut self, x: Var) -> Var {
        self.g.relu(x)
    }
    fn sigmoid(&mut self, x: Var) -> Var {
        self.g.sigmoid(x)
    }
    fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.g.clamp(x, T::lit(lo as f64), T::lit(hi as f64))
    }
    fn upsample(&mut self, x: Var, f: usize) -> Var {
        self.g.upsample(x, f)
    }
    fn max_pool2(&mut self, x: Var) -> Var {
        self.g.max_pool2(x)
    }
    fn global_avg(&mut self, x: Var) -> Var {
        self.g.global_avg_pool(x)
    }
    fn concat(&mut self, parts: &[Var]) -> Var {
        self.g.concat(parts)
    }
    fn add(&mut self, a: Var, b: Var) -> Var {
        self.g.add(a, b)
    }
    fn channel_mean(&mut self, x: Var) -> Var {
        self.g.channel_mean(x)
    }
    fn mark(&mut self, label: &str, x: Var) {
        let d = self.dims(x);
        self.trace.push((label.to_string(), d));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_schedule() {
        assert_eq!([256, 128, 64, 32, 16].map(divisor), [1, 2, 8, 16, 64]);
        assert_eq!(width(256, 32), 32);
        assert_eq!(width(64, 128), 16);
        assert_eq!(width(64, 16), 4);
        assert_eq!([256, 64, 32].map(unet_depth), [4, 3, 2]);
    }
}
