//! First-layer variants: the decomposed layer realized as separable
//! convolutions, and the `Reduce` / `Scratch` baselines.
//!
//! CP pipeline: pointwise `Ĉ_in → C_out·R` (spectral columns), depthwise
//! `k1×1` (columns `x_r`), depthwise `1×k2` (columns `y_r`), then a fixed
//! sum over each group of `R` channels plus the frozen bias.
//!
//! Tucker pipeline: pointwise `Ĉ_in → C_out·R` (columns of `Â_o`), then a
//! grouped `k1×k2` convolution with `C_out` groups whose kernels are the
//! core slices `V_o`.
//!
//! Pointwise stages of the decomposed pipelines carry no bias, so the
//! layer stays linear in its spectral parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{bias_grad, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, relu, relu_backward, ConvSpec};
use crate::decomp::DecompKind;
use crate::error::{Error, Result};
use crate::filteradapt::{AdaptedLayer, FilterBank, SpatialParts};
use crate::tensor::Tensor;

/// Stride and zero padding of the spatial part of the first layer, equal
/// along both axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { stride: 1, padding: 0 }
    }
}

impl Geometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Geometry { stride, padding }
    }

    /// Dense convolution spec with this geometry.
    pub fn dense(&self, in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> ConvSpec {
        ConvSpec::new(in_channels, out_channels, kernel)
            .with_stride((self.stride, self.stride))
            .with_padding((self.padding, self.padding))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Reduce,
    Scratch,
    Cp,
    Tucker,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Reduce, Method::Scratch, Method::Cp, Method::Tucker];

    pub fn name(self) -> &'static str {
        match self {
            Method::Reduce => "reduce",
            Method::Scratch => "scratch",
            Method::Cp => "cp",
            Method::Tucker => "tucker",
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Method::Reduce => 0,
            Method::Scratch => 1,
            Method::Cp => 2,
            Method::Tucker => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::Format(format!("unknown method tag {tag}")))
    }

    pub fn decomp_kind(self) -> Option<DecompKind> {
        match self {
            Method::Cp => Some(DecompKind::Cp),
            Method::Tucker => Some(DecompKind::Tucker),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Usage(format!("unknown method `{s}` (expected reduce|scratch|cp|tucker)")))
    }
}

/// Two trainable pointwise convolutions with a ReLU between them, feeding
/// the frozen RGB first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceStack {
    /// `m × Ĉ_in × 1 × 1`.
    pub pw1_weight: Tensor,
    pub pw1_bias: Vec<f64>,
    /// `3 × m × 1 × 1`.
    pub pw2_weight: Tensor,
    pub pw2_bias: Vec<f64>,
    pub rgb: FilterBank,
}

impl ReduceStack {
    pub fn channels(&self) -> usize {
        self.pw1_weight.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.pw1_weight.shape()[0]
    }
}

/// A full-size first layer trained from scratch; the bias, when present,
/// is copied from the RGB layer and frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct ScratchLayer {
    /// `C_out × Ĉ_in × k1 × k2`.
    pub weight: Tensor,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FirstLayer {
    Decomposed(AdaptedLayer),
    Reduce(ReduceStack),
    Scratch(ScratchLayer),
}

/// Reduce hidden width that matches the decomposed layer's trainable
/// spectral parameter count: `round(R·C_out·Ĉ_in / (Ĉ_in + 3))`, at least 1.
pub fn reduce_hidden_width(rank: usize, c_out: usize, channels: usize) -> usize {
    let m = (rank * c_out * channels) as f64 / (channels + 3) as f64;
    (m.round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceInit {
    /// Fan-in uniform weights, zero biases.
    Random { seed: u64 },
    /// Channel-copying weights (first min(m, Ĉ_in) channels through, then
    /// the first three hidden units out); with non-negative input and
    /// `Ĉ_in = 3` the stack is the identity before training.
    Identity,
}

pub fn build_reduce(in_channels: usize, hidden: usize, rgb: FilterBank, init: ReduceInit) -> Result<ReduceStack> {
    if hidden == 0 || in_channels == 0 {
        return Err(Error::Usage("reduce widths must be >= 1".into()));
    }
    if rgb.c_in() != 3 {
        return Err(Error::shape("reduce expects a 3-channel RGB layer"));
    }
    let (pw1_weight, pw2_weight) = match init {
        ReduceInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a1 = (6.0 / in_channels as f64).sqrt();
            let w1 = Tensor::from_fn(&[hidden, in_channels, 1, 1], |_| rng.random_range(-a1..a1));
            let a2 = (6.0 / hidden as f64).sqrt();
            let w2 = Tensor::from_fn(&[3, hidden, 1, 1], |_| rng.random_range(-a2..a2));
            (w1, w2)
        }
        ReduceInit::Identity => (
            Tensor::from_fn(&[hidden, in_channels, 1, 1], |i| f64::from(u8::from(i[0] == i[1]))),
            Tensor::from_fn(&[3, hidden, 1, 1], |i| f64::from(u8::from(i[0] == i[1]))),
        ),
    };
    Ok(ReduceStack {
        pw1_weight,
        pw1_bias: vec![0.0; hidden],
        pw2_weight,
        pw2_bias: vec![0.0; 3],
        rgb,
    })
}

/// Full `C_out × Ĉ_in × k1 × k2` layer with weights uniform in
/// `±sqrt(6 / (Ĉ_in·k1·k2))`.
pub fn build_scratch(in_channels: usize, rgb: &FilterBank, seed: u64) -> Result<ScratchLayer> {
    if in_channels == 0 {
        return Err(Error::Usage("scratch layer needs >= 1 input channel".into()));
    }
    let (k1, k2) = rgb.kernel();
    let bound = (6.0 / (in_channels * k1 * k2) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = Tensor::from_fn(&[rgb.c_out(), in_channels, k1, k2], |_| rng.random_range(-bound..bound));
    Ok(ScratchLayer {
        weight,
        bias: rgb.bias().map(<[f64]>::to_vec),
    })
}

struct CpStages {
    pointwise: (ConvSpec, Tensor),
    vertical_pass: (ConvSpec, Tensor),
    horizontal_pass: (ConvSpec, Tensor),
    group_sum: (ConvSpec, Tensor),
}

fn pointwise_from_spectral(layer: &AdaptedLayer) -> (ConvSpec, Tensor) {
    let (c_out, ch, r) = (layer.c_out(), layer.channels(), layer.rank());
    let spec = ConvSpec::pointwise(ch, c_out * r);
    let s = layer.spectral();
    let w = Tensor::from_fn(&[c_out * r, ch, 1, 1], |i| s.get(&[i[0] / r, i[1], i[0] % r]));
    (spec, w)
}

/// Folds a pointwise weight gradient back onto the `C_out × Ĉ_in × R`
/// spectral layout.
fn spectral_grad(layer: &AdaptedLayer, gw: &Tensor) -> Vec<f64> {
    let (c_out, ch, r) = (layer.c_out(), layer.channels(), layer.rank());
    let mut g = vec![0.0; c_out * ch * r];
    for o in 0..c_out {
        for q in 0..r {
            for c in 0..ch {
                g[(o * ch + c) * r + q] = gw.data()[(o * r + q) * ch + c];
            }
        }
    }
    g
}

fn cp_stages(layer: &AdaptedLayer, geom: Geometry) -> Result<CpStages> {
    let SpatialParts::Cp { horizontal, vertical } = layer.spatial() else {
        return Err(Error::UnsupportedKind("CP pipeline needs a CP layer".into()));
    };
    let (c_out, r) = (layer.c_out(), layer.rank());
    let (k1, k2) = layer.kernel();
    let n = c_out * r;
    let (s, p) = (geom.stride, geom.padding);
    let vspec = ConvSpec::new(n, n, (k1, 1)).with_groups(n).with_stride((s, 1)).with_padding((p, 0));
    let vw = Tensor::from_fn(&[n, 1, k1, 1], |i| horizontal.get(&[i[0] / r, i[2], i[0] % r]));
    let hspec = ConvSpec::new(n, n, (1, k2)).with_groups(n).with_stride((1, s)).with_padding((0, p));
    let hw = Tensor::from_fn(&[n, 1, 1, k2], |i| vertical.get(&[i[0] / r, i[3], i[0] % r]));
    let sspec = ConvSpec::pointwise(n, c_out).with_groups(c_out);
    Ok(CpStages {
        pointwise: pointwise_from_spectral(layer),
        vertical_pass: (vspec, vw),
        horizontal_pass: (hspec, hw),
        group_sum: (sspec, Tensor::filled(&[c_out, r, 1, 1], 1.0)),
    })
}

fn tucker_stage(layer: &AdaptedLayer, geom: Geometry) -> Result<(ConvSpec, &Tensor)> {
    let SpatialParts::Tucker { core } = layer.spatial() else {
        return Err(Error::UnsupportedKind("Tucker pipeline needs a Tucker layer".into()));
    };
    let (c_out, r) = (layer.c_out(), layer.rank());
    let spec = geom.dense(c_out * r, c_out, layer.kernel()).with_groups(c_out);
    Ok((spec, core))
}

fn check_channels(x: &Tensor, expected: usize) -> Result<()> {
    if x.order() != 3 || x.shape()[0] != expected {
        return Err(Error::shape(format!(
            "first layer expects {expected} input channels, got shape {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Separable CP realization of an adapted layer.
pub fn cp_pipeline_forward(layer: &AdaptedLayer, x: &Tensor, geom: Geometry) -> Result<Tensor> {
    check_channels(x, layer.channels())?;
    let st = cp_stages(layer, geom)?;
    let s1 = conv2d_forward(x, &st.pointwise.0, &st.pointwise.1, None)?;
    let s2 = conv2d_forward(&s1, &st.vertical_pass.0, &st.vertical_pass.1, None)?;
    let s3 = conv2d_forward(&s2, &st.horizontal_pass.0, &st.horizontal_pass.1, None)?;
    conv2d_forward(&s3, &st.group_sum.0, &st.group_sum.1, layer.bias())
}

/// Pointwise + grouped realization of an adapted Tucker layer.
pub fn tucker_pipeline_forward(layer: &AdaptedLayer, x: &Tensor, geom: Geometry) -> Result<Tensor> {
    check_channels(x, layer.channels())?;
    let (spec, core) = tucker_stage(layer, geom)?;
    let (pspec, pw) = pointwise_from_spectral(layer);
    let s1 = conv2d_forward(x, &pspec, &pw, None)?;
    conv2d_forward(&s1, &spec, core, layer.bias())
}

pub fn pipeline_forward(layer: &AdaptedLayer, x: &Tensor, geom: Geometry) -> Result<Tensor> {
    match layer.kind() {
        DecompKind::Cp => cp_pipeline_forward(layer, x, geom),
        DecompKind::Tucker => tucker_pipeline_forward(layer, x, geom),
    }
}

/// Intermediate activations kept for the backward pass.
pub(crate) enum FirstCache {
    Cp { s1: Tensor, s2: Tensor, s3: Tensor },
    Tucker { s1: Tensor },
    Reduce { h1: Tensor, a1: Tensor, h2: Tensor },
    Scratch,
}

impl FirstLayer {
    pub fn method(&self) -> Method {
        match self {
            FirstLayer::Decomposed(l) => match l.kind() {
                DecompKind::Cp => Method::Cp,
                DecompKind::Tucker => Method::Tucker,
            },
            FirstLayer::Reduce(_) => Method::Reduce,
            FirstLayer::Scratch(_) => Method::Scratch,
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            FirstLayer::Decomposed(l) => l.channels(),
            FirstLayer::Reduce(r) => r.channels(),
            FirstLayer::Scratch(s) => s.weight.shape()[1],
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            FirstLayer::Decomposed(l) => l.c_out(),
            FirstLayer::Reduce(r) => r.rgb.c_out(),
            FirstLayer::Scratch(s) => s.weight.shape()[0],
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        match self {
            FirstLayer::Decomposed(l) => l.kernel(),
            FirstLayer::Reduce(r) => r.rgb.kernel(),
            FirstLayer::Scratch(s) => (s.weight.shape()[2], s.weight.shape()[3]),
        }
    }

    pub fn trainable_blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            FirstLayer::Decomposed(l) => vec![("spectral", l.spectral().data())],
            FirstLayer::Reduce(r) => vec![
                ("reduce.pw1.weight", r.pw1_weight.data()),
                ("reduce.pw1.bias", &r.pw1_bias),
                ("reduce.pw2.weight", r.pw2_weight.data()),
                ("reduce.pw2.bias", &r.pw2_bias),
            ],
            FirstLayer::Scratch(s) => vec![("scratch.weight", s.weight.data())],
        }
    }

    pub fn trainable_blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        match self {
            FirstLayer::Decomposed(l) => vec![("spectral", l.spectral_mut().data_mut())],
            FirstLayer::Reduce(r) => vec![
                ("reduce.pw1.weight", r.pw1_weight.data_mut()),
                ("reduce.pw1.bias", &mut r.pw1_bias),
                ("reduce.pw2.weight", r.pw2_weight.data_mut()),
                ("reduce.pw2.bias", &mut r.pw2_bias),
            ],
            FirstLayer::Scratch(s) => vec![("scratch.weight", s.weight.data_mut())],
        }
    }

    pub fn frozen_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        match self {
            FirstLayer::Decomposed(l) => {
                out.extend(l.spatial().blocks());
                if let Some(b) = l.bias() {
                    out.push(("first.bias", b));
                }
            }
            FirstLayer::Reduce(r) => {
                out.push(("reduce.rgb.weight", r.rgb.weights().data()));
                if let Some(b) = r.rgb.bias() {
                    out.push(("reduce.rgb.bias", b));
                }
            }
            FirstLayer::Scratch(s) => {
                if let Some(b) = &s.bias {
                    out.push(("first.bias", b.as_slice()));
                }
            }
        }
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn forward(&self, x: &Tensor, geom: Geometry) -> Result<Tensor> {
        Ok(self.forward_cached(x, geom)?.0)
    }

    pub(crate) fn forward_cached(&self, x: &Tensor, geom: Geometry) -> Result<(Tensor, FirstCache)> {
        check_channels(x, self.in_channels())?;
        match self {
            FirstLayer::Decomposed(l) => match l.kind() {
                DecompKind::Cp => {
                    let st = cp_stages(l, geom)?;
                    let s1 = conv2d_forward(x, &st.pointwise.0, &st.pointwise.1, None)?;
                    let s2 = conv2d_forward(&s1, &st.vertical_pass.0, &st.vertical_pass.1, None)?;
                    let s3 = conv2d_forward(&s2, &st.horizontal_pass.0, &st.horizontal_pass.1, None)?;
                    let y = conv2d_forward(&s3, &st.group_sum.0, &st.group_sum.1, l.bias())?;
                    Ok((y, FirstCache::Cp { s1, s2, s3 }))
                }
                DecompKind::Tucker => {
                    let (spec, core) = tucker_stage(l, geom)?;
                    let (pspec, pw) = pointwise_from_spectral(l);
                    let s1 = conv2d_forward(x, &pspec, &pw, None)?;
                    let y = conv2d_forward(&s1, &spec, core, l.bias())?;
                    Ok((y, FirstCache::Tucker { s1 }))
                }
            },
            FirstLayer::Reduce(r) => {
                let ch = r.channels();
                let m = r.hidden();
                let h1 = conv2d_forward(x, &ConvSpec::pointwise(ch, m), &r.pw1_weight, Some(&r.pw1_bias))?;
                let a1 = relu(&h1);
                let h2 = conv2d_forward(&a1, &ConvSpec::pointwise(m, 3), &r.pw2_weight, Some(&r.pw2_bias))?;
                let spec = geom.dense(3, r.rgb.c_out(), r.rgb.kernel());
                let y = conv2d_forward(&h2, &spec, r.rgb.weights(), r.rgb.bias())?;
                Ok((y, FirstCache::Reduce { h1, a1, h2 }))
            }
            FirstLayer::Scratch(s) => {
                let spec = geom.dense(self.in_channels(), self.out_channels(), self.kernel());
                let y = conv2d_forward(x, &spec, &s.weight, s.bias.as_deref())?;
                Ok((y, FirstCache::Scratch))
            }
        }
    }

    /// Gradients of the trainable blocks (in [`Self::trainable_blocks`]
    /// order) given the gradient at the layer output.
    pub(crate) fn backward(&self, x: &Tensor, cache: &FirstCache, grad: &Tensor, geom: Geometry) -> Result<Vec<Vec<f64>>> {
        match (self, cache) {
            (FirstLayer::Decomposed(l), FirstCache::Cp { s1, s2, s3 }) => {
                let st = cp_stages(l, geom)?;
                let hw = |t: &Tensor| (t.shape()[1], t.shape()[2]);
                let g3 = conv2d_backward_input(grad, &st.group_sum.0, &st.group_sum.1, hw(s3))?;
                let g2 = conv2d_backward_input(&g3, &st.horizontal_pass.0, &st.horizontal_pass.1, hw(s2))?;
                let g1 = conv2d_backward_input(&g2, &st.vertical_pass.0, &st.vertical_pass.1, hw(s1))?;
                let gw = conv2d_backward_weight(x, &g1, &st.pointwise.0)?;
                Ok(vec![spectral_grad(l, &gw)])
            }
            (FirstLayer::Decomposed(l), FirstCache::Tucker { s1 }) => {
                let (spec, core) = tucker_stage(l, geom)?;
                let g1 = conv2d_backward_input(grad, &spec, core, (s1.shape()[1], s1.shape()[2]))?;
                let (pspec, _) = pointwise_from_spectral(l);
                let gw = conv2d_backward_weight(x, &g1, &pspec)?;
                Ok(vec![spectral_grad(l, &gw)])
            }
            (FirstLayer::Reduce(r), FirstCache::Reduce { h1, a1, h2 }) => {
                let (ch, m) = (r.channels(), r.hidden());
                let spec = geom.dense(3, r.rgb.c_out(), r.rgb.kernel());
                let gh2 = conv2d_backward_input(grad, &spec, r.rgb.weights(), (h2.shape()[1], h2.shape()[2]))?;
                let spec2 = ConvSpec::pointwise(m, 3);
                let gw2 = conv2d_backward_weight(a1, &gh2, &spec2)?;
                let gb2 = bias_grad(&gh2);
                let ga1 = conv2d_backward_input(&gh2, &spec2, &r.pw2_weight, (a1.shape()[1], a1.shape()[2]))?;
                let gh1 = relu_backward(h1, &ga1);
                let gw1 = conv2d_backward_weight(x, &gh1, &ConvSpec::pointwise(ch, m))?;
                let gb1 = bias_grad(&gh1);
                Ok(vec![gw1.into_data(), gb1, gw2.into_data(), gb2])
            }
            (FirstLayer::Scratch(_), FirstCache::Scratch) => {
                let spec = geom.dense(self.in_channels(), self.out_channels(), self.kernel());
                Ok(vec![conv2d_backward_weight(x, grad, &spec)?.into_data()])
            }
            _ => Err(Error::UnsupportedKind("first-layer cache does not match layer".into())),
        }
    }
}
