//! Network handles: mask generators, the inpainting generator and
//! discriminator, the segmentation U-Net and the frozen feature extractor.

mod arch;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{softmax_channels, Graph, ParamStore, Real, Tensor, Var};

use arch::{describe, Init, Recorder, Symbolic};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("image size {0} must be a power of two and at least 32")]
    InvalidSize(usize),
    #[error("pretrained backbone weights unavailable at {0}")]
    BackboneUnavailable(PathBuf),
    #[error("input mismatch: expected {expected:?}, got {got:?}")]
    InputMismatch { expected: Vec<[usize; 3]>, got: Vec<[usize; 3]> },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    GBinary,
    GGrade,
    GInpaint,
    DInpaint,
    UnetSeg,
    FeatureExtractor,
}

impl NetworkKind {
    pub const ALL: [NetworkKind; 6] = [
        NetworkKind::GBinary,
        NetworkKind::GGrade,
        NetworkKind::GInpaint,
        NetworkKind::DInpaint,
        NetworkKind::UnetSeg,
        NetworkKind::FeatureExtractor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::GBinary => "g_binary",
            NetworkKind::GGrade => "g_grade",
            NetworkKind::GInpaint => "g_inpaint",
            NetworkKind::DInpaint => "d_inpaint",
            NetworkKind::UnetSeg => "unet_seg",
            NetworkKind::FeatureExtractor => "feature_extractor",
        }
    }
}

/// Which weights back the feature extractor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorMode {
    /// Seeded, frozen two-layer stack with stride 2 per layer.
    #[default]
    FixedRandom,
    /// The first two convolutions of a VGG-style backbone, loaded from file.
    Pretrained,
}

/// Block vocabulary of the inpainting architectures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockSpec {
    /// Convolution, instance normalization, ReLU.
    Cir { kernel: usize, stride: usize },
    /// Two `Cir { 3, 1 }` with an identity skip.
    Res { kernel: usize },
    /// Nearest-neighbour upsampling by `factor`.
    Up { factor: usize },
    /// Average pooling with a square kernel.
    Avg { kernel: usize },
}

/// A named shape observed while running an architecture: (C, H, W).
pub type TraceEntry = (String, [usize; 3]);

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    kind: NetworkKind,
    size: usize,
    mode: ExtractorMode,
    params: ParamStore<f32>,
}

fn check_size(size: usize) -> Result<(), NetError> {
    if size < 32 || !size.is_power_of_two() {
        return Err(NetError::InvalidSize(size));
    }
    Ok(())
}

/// Input shapes for `kind` at `size`. The feature extractor is fully
/// convolutional and reports the nominal size it was built for.
fn input_spec(kind: NetworkKind, size: usize) -> Vec<[usize; 3]> {
    match kind {
        NetworkKind::GBinary | NetworkKind::GGrade => vec![[2, size, size]],
        NetworkKind::UnetSeg | NetworkKind::FeatureExtractor => vec![[4, size, size]],
        NetworkKind::GInpaint | NetworkKind::DInpaint => vec![[4, size, size], [1, size, size]],
    }
}

fn symbolic(kind: NetworkKind, size: usize, mode: ExtractorMode, init: Init) -> Symbolic {
    let mut s = Symbolic::new(init);
    let inputs = input_spec(kind, size);
    let out = describe(&mut s, kind, size, mode, &inputs);
    s.trace.push(("final".into(), out));
    s
}

/// Shapes of the labelled intermediate values of `kind` at `size`, computed
/// without allocating parameters.
pub fn shape_trace(kind: NetworkKind, size: usize) -> Vec<TraceEntry> {
    let mut t = symbolic(kind, size, ExtractorMode::FixedRandom, Init::None).trace;
    t.pop();
    t
}

/// Number of scalar parameters of `kind` at `size`.
pub fn parameter_count(kind: NetworkKind, size: usize) -> usize {
    symbolic(kind, size, ExtractorMode::FixedRandom, Init::None).count
}

impl Network {
    /// Build with parameters drawn from `seed`.
    pub fn build(kind: NetworkKind, size: usize, seed: u64) -> Result<Self, NetError> {
        check_size(size)?;
        let params = symbolic(kind, size, ExtractorMode::FixedRandom, Init::Seeded(seed)).params;
        Ok(Self { kind, size, mode: ExtractorMode::FixedRandom, params })
    }

    pub fn kind(&self) -> NetworkKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mode(&self) -> ExtractorMode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn input_spec(&self) -> Vec<[usize; 3]> {
        input_spec(self.kind, self.size)
    }

    pub fn output_spec(&self) -> [usize; 3] {
        let s = symbolic(self.kind, self.size, self.mode, Init::None);
        s.trace.last().expect("final entry").1
    }

    /// Record every parameter on `g` in the precision of the graph.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.leaf(t.cast(), trainable)).collect()
    }

    /// Record the forward pass. Segmentation returns logits; everything else
    /// returns its activated output.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, params: &[Var], inputs: &[Var]) -> Var {
        self.forward_traced(g, params, inputs).0
    }

    pub fn forward_traced<T: Real>(&self, g: &mut Graph<T>, params: &[Var], inputs: &[Var]) -> (Var, Vec<TraceEntry>) {
        assert_eq!(params.len(), self.params.len(), "parameter binding does not match the network");
        let mut r = Recorder::new(g, params);
        let out = describe(&mut r, self.kind, self.size, self.mode, inputs);
        assert_eq!(r.consumed(), params.len(), "unused parameters");
        (out, r.trace)
    }

    /// Inference on a batch. Segmentation outputs are softmax probabilities.
    pub fn predict(&self, inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>, NetError> {
        let got: Vec<[usize; 3]> = inputs.iter().map(|t| {
            let [_, c, h, w] = t.shape();
            [c, h, w]
        }).collect();
        let expected = self.input_spec();
        let ok = got.len() == expected.len()
            && got.iter().zip(&expected).all(|(g, e)| {
                if self.kind == NetworkKind::FeatureExtractor {
                    g[0] == 1 || g[0] == 4
                } else {
                    g == e
                }
            })
            && inputs.iter().all(|t| t.shape()[0] == inputs[0].shape()[0]);
        if !ok {
            return Err(NetError::InputMismatch { expected, got });
        }
        let mut g = Graph::<f32>::new();
        let p = self.bind(&mut g, false);
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant((*t).clone())).collect();
        let y = self.forward(&mut g, &p, &xs);
        let out = g.value(y).clone();
        if self.kind == NetworkKind::UnetSeg {
            let shape = out.shape();
            return Ok(Tensor::from_vec(shape, softmax_channels(&out)));
        }
        Ok(out)
    }
}

pub fn build_g_binary(size: usize, seed: u64) -> Result<Network, NetError> {
    Network::build(NetworkKind::GBinary, size, seed)
}

pub fn build_g_grade(size: usize, seed: u64) -> Result<Network, NetError> {
    Network::build(NetworkKind::GGrade, size, seed)
}

pub fn build_g_inpaint(size: usize, seed: u64) -> Result<Network, NetError> {
    Network::build(NetworkKind::GInpaint, size, seed)
}

pub fn build_d_inpaint(size: usize, seed: u64) -> Result<Network, NetError> {
    Network::build(NetworkKind::DInpaint, size, seed)
}

pub fn build_unet_seg(size: usize, seed: u64) -> Result<Network, NetError> {
    Network::build(NetworkKind::UnetSeg, size, seed)
}

/// Frozen feature extractor. `weights` is required in pretrained mode and
/// must hold `conv1.weight`, `conv1.bias`, `conv2.weight`, `conv2.bias` as
/// f32 tensors.
pub fn build_feature_extractor(mode: ExtractorMode, seed: u64, weights: Option<&Path>) -> Result<Network, NetError> {
    let kind = NetworkKind::FeatureExtractor;
    let nominal = 64;
    match mode {
        ExtractorMode::FixedRandom => {
            let params = symbolic(kind, nominal, mode, Init::Seeded(seed)).params;
            Ok(Network { kind, size: nominal, mode, params })
        }
        ExtractorMode::Pretrained => {
            let path = weights.ok_or_else(|| NetError::BackboneUnavailable(PathBuf::from("<none>")))?;
            let bytes = fs::read(path).map_err(|_| NetError::BackboneUnavailable(path.to_path_buf()))?;
            let mut params = symbolic(kind, nominal, mode, Init::Zeros).params;
            fill_from_safetensors(&mut params, &bytes, path)?;
            Ok(Network { kind, size: nominal, mode, params })
        }
    }
}

/// Metadata stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: NetworkKind,
    pub size: usize,
    pub mode: ExtractorMode,
    pub epoch: usize,
    pub validation_loss: Option<f64>,
}

const META_KEY: &str = "tumorforge";

fn ckpt_err(path: &Path, reason: impl ToString) -> NetError {
    NetError::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() }
}

/// Write parameters and metadata as a safetensors archive.
pub fn save_checkpoint(net: &Network, epoch: usize, validation_loss: Option<f64>, path: &Path) -> Result<(), NetError> {
    let meta = CheckpointMeta { kind: net.kind, size: net.size, mode: net.mode, epoch, validation_loss };
    // A single metadata entry keeps the header byte-stable.
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("plain struct"))]);
    let buffers: Vec<(String, Vec<usize>, Vec<u8>)> = net
        .params
        .iter()
        .map(|(name, t)| {
            let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.to_string(), t.shape().to_vec(), bytes)
        })
        .collect();
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (name.clone(), v)).map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = safetensors::serialize(views, Some(info)).map_err(|e| ckpt_err(path, e))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| ckpt_err(path, e))?;
    }
    fs::write(path, out).map_err(|e| ckpt_err(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta), NetError> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta: CheckpointMeta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ckpt_err(path, "missing metadata"))
        .and_then(|s| serde_json::from_str(s).map_err(|e| ckpt_err(path, e)))?;
    if meta.kind != NetworkKind::FeatureExtractor {
        check_size(meta.size)?;
    }
    let mut params = symbolic(meta.kind, meta.size, meta.mode, Init::Zeros).params;
    fill_from_safetensors(&mut params, &bytes, path)?;
    Ok((Network { kind: meta.kind, size: meta.size, mode: meta.mode, params }, meta))
}

fn fill_from_safetensors(params: &mut ParamStore<f32>, bytes: &[u8], path: &Path) -> Result<(), NetError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| ckpt_err(path, e))?;
    if st.names().len() != params.len() {
        return Err(ckpt_err(path, format!("expected {} tensors, found {}", params.len(), st.names().len())));
    }
    for i in 0..params.len() {
        let name = params.name(i).to_string();
        let view = st.tensor(&name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
        let target = params.get_mut(i);
        if view.dtype() != Dtype::F32 || view.shape().iter().product::<usize>() != target.len() {
            return Err(ckpt_err(path, format!("{name}: expected f32 {:?}, found {:?} {:?}", target.shape(), view.dtype(), view.shape())));
        }
        for (dst, chunk) in target.data_mut().iter_mut().zip(view.data().chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace_map(t: &[TraceEntry]) -> HashMap<&str, [usize; 3]> {
        t.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }

    #[test]
    fn inpaint_shapes_at_reference_size() {
        let t = shape_trace(NetworkKind::GInpaint, 256);
        let m = trace_map(&t);
        assert_eq!(m["image_enc.cir1"], [32, 128, 128]);
        assert_eq!(m["image_enc.cir2"], [128, 64, 64]);
        assert_eq!(m["mask_enc.cir1"], [4, 128, 128]);
        assert_eq!(m["mask_enc.cir2"], [16, 64, 64]);
        assert_eq!(m["features"], [144, 64, 64]);
        assert_eq!(m["dec2.cir1"], [256, 64, 64]);
        assert_eq!(m["dec3.out"], [1, 256, 256]);
        assert_eq!(m["output"], [4, 256, 256]);
        let d = trace_map(&shape_trace(NetworkKind::DInpaint, 256)).get("output").copied();
        assert_eq!(d, Some([1, 1, 1]));
    }

    #[test]
    fn encoder_is_quarter_resolution_at_desk_size() {
        let m = trace_map(&shape_trace(NetworkKind::GInpaint, 64)).get("image_enc.res2").copied().unwrap();
        assert_eq!(&m[1..], &[16, 16]);
    }

    #[test]
    fn recorded_trace_matches_symbolic_trace() {
        for kind in [NetworkKind::GBinary, NetworkKind::GInpaint, NetworkKind::DInpaint, NetworkKind::UnetSeg] {
            let net = Network::build(kind, 32, 1).unwrap();
            let mut g = Graph::<f32>::new();
            let p = net.bind(&mut g, false);
            let xs: Vec<Var> = net.input_spec().iter().map(|&[c, h, w]| g.constant(Tensor::zeros([1, c, h, w]))).collect();
            let (_, trace) = net.forward_traced(&mut g, &p, &xs);
            assert_eq!(trace, shape_trace(kind, 32), "{kind:?}");
            assert_eq!(net.param_count(), parameter_count(kind, 32));
        }
    }

    #[test]
    fn outputs_follow_spec() {
        let size = 32;
        for kind in NetworkKind::ALL {
            let net = if kind == NetworkKind::FeatureExtractor {
                build_feature_extractor(ExtractorMode::FixedRandom, 3, None).unwrap()
            } else {
                Network::build(kind, size, 3).unwrap()
            };
            let inputs: Vec<Tensor<f32>> = net
                .input_spec()
                .iter()
                .map(|&[c, _, _]| Tensor::from_vec([2, c, size, size], (0..2 * c * size * size).map(|i| (i % 13) as f32 * 0.1).collect()))
                .collect();
            let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
            let y = net.predict(&refs).unwrap();
            let [n, c, h, w] = y.shape();
            assert_eq!(n, 2);
            match kind {
                NetworkKind::FeatureExtractor => assert_eq!([c, h, w], [64, size / 4, size / 4]),
                _ => assert_eq!([c, h, w], net.output_spec(), "{kind:?}"),
            }
            if matches!(kind, NetworkKind::GBinary | NetworkKind::GGrade | NetworkKind::DInpaint) {
                assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
            }
            if kind == NetworkKind::UnetSeg {
                for s in 0..n {
                    for p in 0..h * w {
                        let total: f32 = (0..5).map(|ch| y.plane(s, ch)[p]).sum();
                        assert!((total - 1.0).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn seeded_builds_are_identical() {
        let a = build_g_grade(32, 9).unwrap();
        assert_eq!(a, build_g_grade(32, 9).unwrap());
        assert_ne!(a, build_g_grade(32, 10).unwrap());
    }

    #[test]
    fn size_must_be_power_of_two() {
        assert!(matches!(build_g_binary(48, 0), Err(NetError::InvalidSize(48))));
        assert!(matches!(build_g_binary(16, 0), Err(NetError::InvalidSize(16))));
    }

    #[test]
    fn pretrained_requires_weights() {
        assert!(matches!(
            build_feature_extractor(ExtractorMode::Pretrained, 0, Some(Path::new("/nonexistent/vgg.safetensors"))),
            Err(NetError::BackboneUnavailable(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.safetensors");
        let net = build_d_inpaint(32, 4).unwrap();
        save_checkpoint(&net, 10, Some(0.25), &path).unwrap();
        let (back, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta.epoch, 10);
        assert_eq!(meta.validation_loss, Some(0.25));
        let first = fs::read(&path).unwrap();
        save_checkpoint(&net, 10, Some(0.25), &path).unwrap();
        assert_eq!(first, fs::read(&path).unwrap());
    }

    #[test]
    fn pretrained_weights_load_from_archive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vgg.safetensors");
        let mut donor = symbolic(NetworkKind::FeatureExtractor, 64, ExtractorMode::Pretrained, Init::Seeded(2)).params;
        donor.get_mut(0).data_mut()[0] = 0.5;
        let net = Network { kind: NetworkKind::FeatureExtractor, size: 64, mode: ExtractorMode::Pretrained, params: donor };
        save_checkpoint(&net, 0, None, &path).unwrap();
        let loaded = build_feature_extractor(ExtractorMode::Pretrained, 0, Some(&path)).unwrap();
        assert_eq!(loaded.params(), net.params());
        let x = Tensor::full([1, 1, 8, 8], 1.0f32);
        assert_eq!(loaded.predict(&[&x]).unwrap().shape(), [1, 64, 8, 8]);
    }
}
