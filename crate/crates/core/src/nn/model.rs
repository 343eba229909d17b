//! Toy backbone around an exchangeable first layer:
//! first layer → ReLU → frozen 3×3 conv (`C_out → C_mid`, pad 1) → ReLU →
//! adaptive average pool → linear classifier.
//!
//! Only the first layer's trainable blocks and the classifier are updated;
//! gradients still flow through every frozen stage.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::conv::{conv2d_backward_input, conv2d_forward, relu, relu_backward, ConvSpec};
use super::first::{FirstLayer, Geometry, Method, ReduceStack, ScratchLayer};
use super::pool::{adaptive_avg_pool, adaptive_avg_pool_backward};
use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::filteradapt::{AdaptedLayer, FilterBank, InitPolicy, SpatialParts};
use crate::tensor::{read_tensor_body, write_tensor_body, Tensor};

const MDL_MAGIC: &[u8; 4] = b"MDL1";

/// Shape of the frozen part of the toy backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backbone {
    /// Output channels of the frozen 3×3 conv (default `2·C_out`).
    pub mid_channels: usize,
    pub pool: (usize, usize),
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    first: FirstLayer,
    geometry: Geometry,
    /// `C_mid × C_out × 3 × 3`.
    mid_weight: Tensor,
    mid_bias: Vec<f64>,
    pool: (usize, usize),
    /// `classes × features`.
    cls_weight: Tensor,
    cls_bias: Vec<f64>,
}

/// Loss, accuracy and trainable-block gradients of one batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Loss, correctness and per-block gradients of one sample.
type SampleOutput = (f64, bool, Vec<Vec<f64>>);

#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    /// Flips the sign of every first-layer gradient (gradient-check
    /// negative control).
    FlipFirstLayer,
}

impl Model {
    /// Wraps `first` in the toy backbone; the frozen mid conv and the
    /// classifier are initialized from `seed`.
    pub fn new(first: FirstLayer, geometry: Geometry, backbone: Backbone, seed: u64) -> Result<Self> {
        if backbone.classes < 2 {
            return Err(Error::Usage("need at least 2 classes".into()));
        }
        if backbone.mid_channels == 0 || backbone.pool.0 == 0 || backbone.pool.1 == 0 {
            return Err(Error::Usage("backbone extents must be >= 1".into()));
        }
        let c_out = first.out_channels();
        let c_mid = backbone.mid_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[1]));
        let a = (6.0 / (c_out * 9) as f64).sqrt();
        let mid_weight = Tensor::from_fn(&[c_mid, c_out, 3, 3], |_| rng.random_range(-a..a));
        let mid_bias = (0..c_mid).map(|_| rng.random_range(-0.1..0.1)).collect();
        let features = c_mid * backbone.pool.0 * backbone.pool.1;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, &[2]));
        let b = 1.0 / (features as f64).sqrt();
        let cls_weight = Tensor::from_fn(&[backbone.classes, features], |_| rng.random_range(-b..b));
        let cls_bias = (0..backbone.classes).map(|_| rng.random_range(-b..b)).collect();
        Ok(Model {
            first,
            geometry,
            mid_weight,
            mid_bias,
            pool: backbone.pool,
            cls_weight,
            cls_bias,
        })
    }

    pub fn first(&self) -> &FirstLayer {
        &self.first
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn method(&self) -> Method {
        self.first.method()
    }

    pub fn classes(&self) -> usize {
        self.cls_bias.len()
    }

    pub fn in_channels(&self) -> usize {
        self.first.in_channels()
    }

    pub fn features(&self) -> usize {
        self.cls_weight.shape()[1]
    }

    fn mid_spec(&self) -> ConvSpec {
        ConvSpec::new(self.first.out_channels(), self.mid_bias.len(), (3, 3)).with_padding((1, 1))
    }

    pub fn trainable_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = self.first.trainable_blocks();
        v.push(("classifier.weight", self.cls_weight.data()));
        v.push(("classifier.bias", &self.cls_bias));
        v
    }

    pub fn trainable_blocks_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut v = self.first.trainable_blocks_mut();
        v.push(("classifier.weight", self.cls_weight.data_mut()));
        v.push(("classifier.bias", &mut self.cls_bias));
        v
    }

    pub fn frozen_blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v = self.first.frozen_blocks();
        v.push(("mid.weight", self.mid_weight.data()));
        v.push(("mid.bias", &self.mid_bias));
        v
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let h = self.first.forward(x, self.geometry)?;
        let m = conv2d_forward(&relu(&h), &self.mid_spec(), &self.mid_weight, Some(&self.mid_bias))?;
        let p = adaptive_avg_pool(&relu(&m), self.pool)?;
        Ok(self.classify(p.data()))
    }

    fn classify(&self, features: &[f64]) -> Vec<f64> {
        let f = features.len();
        self.cls_bias
            .iter()
            .enumerate()
            .map(|(k, b)| b + crate::linalg::dot(&self.cls_weight.data()[k * f..(k + 1) * f], features))
            .collect()
    }

    fn sample_forward_backward(&self, x: &Tensor, label: usize, fault: GradFault) -> Result<SampleOutput> {
        let (h, cache) = self.first.forward_cached(x, self.geometry)?;
        let a = relu(&h);
        let m = conv2d_forward(&a, &self.mid_spec(), &self.mid_weight, Some(&self.mid_bias))?;
        let am = relu(&m);
        let p = adaptive_avg_pool(&am, self.pool)?;
        let logits = self.classify(p.data());
        let (loss, probs) = cross_entropy(&logits, label);
        let correct = argmax(&logits) == label;

        let mut dlogits = probs;
        dlogits[label] -= 1.0;
        let f = p.len();
        let mut g_cls_w = vec![0.0; dlogits.len() * f];
        let mut dp = vec![0.0; f];
        for (k, dk) in dlogits.iter().enumerate() {
            let row = &self.cls_weight.data()[k * f..(k + 1) * f];
            for j in 0..f {
                g_cls_w[k * f + j] = dk * p.data()[j];
                dp[j] += dk * row[j];
            }
        }
        let dp = Tensor::new(p.shape().to_vec(), dp)?;
        let dam = adaptive_avg_pool_backward(&dp, (am.shape()[1], am.shape()[2]))?;
        let dm = relu_backward(&m, &dam);
        let da = conv2d_backward_input(&dm, &self.mid_spec(), &self.mid_weight, (a.shape()[1], a.shape()[2]))?;
        let dh = relu_backward(&h, &da);
        let mut grads = self.first.backward(x, &cache, &dh, self.geometry)?;
        if fault == GradFault::FlipFirstLayer {
            grads.iter_mut().flatten().for_each(|g| *g = -*g);
        }
        grads.push(g_cls_w);
        grads.push(dlogits);
        Ok((loss, correct, grads))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(MDL_MAGIC);
        w.u32(self.method().tag());
        for n in [self.geometry.stride, self.geometry.padding, self.pool.0, self.pool.1] {
            w.usize(n);
        }
        let (init, seed) = match &self.first {
            FirstLayer::Decomposed(l) => (l.init(), l.seed()),
            _ => (InitPolicy::default(), 0),
        };
        w.u32(init.tag());
        w.u64(seed);
        let blocks = self.named_tensors();
        w.usize(blocks.len());
        for (name, trainable, t) in &blocks {
            w.string(name);
            w.u8(u8::from(*trainable));
            write_tensor_body(&mut w, t);
        }
        w.buf
    }

    /// Every parameter block with its shape and trainability flag.
    fn named_tensors(&self) -> Vec<(&'static str, bool, Tensor)> {
        let vec1 = |v: &[f64]| Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty block");
        let mut out = Vec::new();
        match &self.first {
            FirstLayer::Decomposed(l) => {
                match l.spatial() {
                    SpatialParts::Cp { horizontal, vertical } => {
                        out.push(("cp.horizontal", false, horizontal.clone()));
                        out.push(("cp.vertical", false, vertical.clone()));
                    }
                    SpatialParts::Tucker { core } => out.push(("tucker.core", false, core.clone())),
                }
                out.push(("spectral", true, l.spectral().clone()));
                if let Some(b) = l.bias() {
                    out.push(("first.bias", false, vec1(b)));
                }
            }
            FirstLayer::Reduce(r) => {
                out.push(("reduce.pw1.weight", true, r.pw1_weight.clone()));
                out.push(("reduce.pw1.bias", true, vec1(&r.pw1_bias)));
                out.push(("reduce.pw2.weight", true, r.pw2_weight.clone()));
                out.push(("reduce.pw2.bias", true, vec1(&r.pw2_bias)));
                out.push(("reduce.rgb.weight", false, r.rgb.weights().clone()));
                if let Some(b) = r.rgb.bias() {
                    out.push(("reduce.rgb.bias", false, vec1(b)));
                }
            }
            FirstLayer::Scratch(s) => {
                out.push(("scratch.weight", true, s.weight.clone()));
                if let Some(b) = &s.bias {
                    out.push(("first.bias", false, vec1(b)));
                }
            }
        }
        out.push(("mid.weight", false, self.mid_weight.clone()));
        out.push(("mid.bias", false, vec1(&self.mid_bias)));
        out.push(("classifier.weight", true, self.cls_weight.clone()));
        out.push(("classifier.bias", true, vec1(&self.cls_bias)));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "MDL1");
        r.magic(MDL_MAGIC)?;
        let method = Method::from_tag(r.u32()?)?;
        let geometry = Geometry::new(r.usize()?, r.usize()?);
        let pool = (r.usize()?, r.usize()?);
        let init = InitPolicy::from_tag(r.u32()?)?;
        let seed = r.u64()?;
        let n = r.usize()?;
        let mut blocks = BTreeMap::new();
        for _ in 0..n {
            let name = r.string()?;
            let _trainable = r.u8()? != 0;
            blocks.insert(name, read_tensor_body(&mut r)?);
        }
        r.finish()?;
        let mut take = |name: &str| {
            blocks
                .remove(name)
                .ok_or_else(|| Error::Format(format!("MDL1 checkpoint lacks block `{name}`")))
        };
        let first = match method {
            Method::Cp | Method::Tucker => {
                let spatial = if method == Method::Cp {
                    SpatialParts::Cp {
                        horizontal: take("cp.horizontal")?,
                        vertical: take("cp.vertical")?,
                    }
                } else {
                    SpatialParts::Tucker {
                        core: take("tucker.core")?,
                    }
                };
                let bias = take("first.bias").ok().map(Tensor::into_data);
                FirstLayer::Decomposed(AdaptedLayer::from_parts(spatial, take("spectral")?, bias, init, seed)?)
            }
            Method::Reduce => {
                let rgb_w = take("reduce.rgb.weight")?;
                let rgb_b = take("reduce.rgb.bias").ok().map(Tensor::into_data);
                FirstLayer::Reduce(ReduceStack {
                    pw1_weight: take("reduce.pw1.weight")?,
                    pw1_bias: take("reduce.pw1.bias")?.into_data(),
                    pw2_weight: take("reduce.pw2.weight")?,
                    pw2_bias: take("reduce.pw2.bias")?.into_data(),
                    rgb: FilterBank::new(rgb_w, rgb_b)?,
                })
            }
            Method::Scratch => FirstLayer::Scratch(ScratchLayer {
                weight: take("scratch.weight")?,
                bias: take("first.bias").ok().map(Tensor::into_data),
            }),
        };
        let mid_weight = take("mid.weight")?;
        let mid_bias = take("mid.bias")?.into_data();
        let cls_weight = take("classifier.weight")?;
        let cls_bias = take("classifier.bias")?.into_data();
        if mid_weight.order() != 4 || cls_weight.order() != 2 || cls_weight.shape()[0] != cls_bias.len() {
            return Err(Error::Format("MDL1 backbone blocks have inconsistent shapes".into()));
        }
        Ok(Model {
            first,
            geometry,
            mid_weight,
            mid_bias,
            pool,
            cls_weight,
            cls_bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Mean cross-entropy with log-sum-exp stabilization; also returns the
/// softmax probabilities.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| if *x > bv { (i, *x) } else { (bi, bv) })
        .0
}

fn check_labels(model: &Model, batch: &[Tensor], labels: &[usize]) -> Result<()> {
    if batch.len() != labels.len() || batch.is_empty() {
        return Err(Error::Data(format!(
            "batch of {} inputs with {} labels",
            batch.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|l| **l >= model.classes()) {
        return Err(Error::Data(format!("label {bad} out of range for {} classes", model.classes())));
    }
    Ok(())
}

/// Mean loss, accuracy and trainable gradients of a batch. Samples are
/// processed in parallel and reduced in batch order, so results do not
/// depend on the thread count.
pub fn forward_backward(model: &Model, batch: &[Tensor], labels: &[usize]) -> Result<StepOutput> {
    forward_backward_with(model, batch, labels, GradFault::None)
}

#[doc(hidden)]
pub fn forward_backward_with(model: &Model, batch: &[Tensor], labels: &[usize], fault: GradFault) -> Result<StepOutput> {
    check_labels(model, batch, labels)?;
    let per_sample: Vec<Result<SampleOutput>> = batch
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| model.sample_forward_backward(x, y, fault))
        .collect();
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut correct = 0usize;
    let mut grads: Option<Vec<Vec<f64>>> = None;
    for res in per_sample {
        let (l, c, g) = res?;
        loss += l;
        correct += usize::from(c);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = grads.expect("non-empty batch");
    grads.iter_mut().flatten().for_each(|g| *g /= n);
    Ok(StepOutput {
        loss: loss / n,
        accuracy: correct as f64 / n,
        grads,
    })
}

/// Mean loss and accuracy without gradients.
pub fn evaluate(model: &Model, inputs: &[Tensor], labels: &[usize]) -> Result<(f64, f64)> {
    check_labels(model, inputs, labels)?;
    let per: Vec<Result<(f64, bool)>> = inputs
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let logits = model.logits(x)?;
            Ok((cross_entropy(&logits, y).0, argmax(&logits) == y))
        })
        .collect();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for r in per {
        let (l, c) = r?;
        loss += l;
        correct += usize::from(c);
    }
    let n = inputs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Number of trainable scalars: first-layer trainables plus the classifier.
pub fn count_trainable(model: &Model) -> usize {
    model.trainable_blocks().iter().map(|(_, b)| b.len()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decomp::{decompose_bank, CpOptions, DecompKind};
    use crate::filteradapt::adapt;
    use crate::nn::first::{build_reduce, build_scratch, ReduceInit};

    fn bank(c_out: usize, k: usize, seed: u64) -> FilterBank {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::from_fn(&[c_out, 3, k, k], |_| rng.random_range(-1.0..1.0));
        FilterBank::new(w, Some(vec![0.05; c_out])).unwrap()
    }

    fn backbone() -> Backbone {
        Backbone {
            mid_channels: 8,
            pool: (2, 2),
            classes: 3,
        }
    }

    fn models() -> Vec<Model> {
        let rgb = bank(4, 5, 1);
        let geom = Geometry::new(1, 2);
        let mut out = Vec::new();
        for kind in [DecompKind::Cp, DecompKind::Tucker] {
            let d = decompose_bank(&rgb, kind, 2, &CpOptions::default()).unwrap();
            let l = adapt(&d, 8, InitPolicy::Interp, 0).unwrap();
            out.push(Model::new(FirstLayer::Decomposed(l), geom, backbone(), 3).unwrap());
        }
        let r = build_reduce(8, 6, rgb.clone(), ReduceInit::Random { seed: 4 }).unwrap();
        out.push(Model::new(FirstLayer::Reduce(r), geom, backbone(), 3).unwrap());
        let s = build_scratch(8, &rgb, 5).unwrap();
        out.push(Model::new(FirstLayer::Scratch(s), geom, backbone(), 3).unwrap());
        out
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (loss, p) = cross_entropy(&[0.3; 5], 2);
        assert!((loss - 5f64.ln()).abs() <= 1e-15);
        assert!(p.iter().all(|v| (v - 0.2).abs() <= 1e-15));
        let (loss, _) = cross_entropy(&[1000.0, 0.0], 0);
        assert!(loss.is_finite() && loss < 1e-300);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let m = &models()[0];
        let x = vec![Tensor::zeros(&[8, 12, 12])];
        assert!(matches!(forward_backward(m, &x, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn counts_follow_formulas() {
        let ms = models();
        let cls = 3 * 8 * 4 + 3;
        assert_eq!(count_trainable(&ms[0]), 4 * 2 * 8 + cls);
        assert_eq!(count_trainable(&ms[1]), 4 * 2 * 8 + cls);
        assert_eq!(count_trainable(&ms[2]), 8 * 6 + 6 + 6 * 3 + 3 + cls);
        assert_eq!(count_trainable(&ms[3]), 4 * 8 * 25 + cls);
    }

    #[test]
    fn checkpoint_round_trip() {
        for m in models() {
            let back = Model::from_bytes(&m.to_bytes()).unwrap();
            assert_eq!(back, m);
        }
        let bytes = models()[0].to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn batch_gradient_is_thread_count_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<Tensor> = (0..6).map(|_| Tensor::from_fn(&[8, 12, 12], |_| rng.random_range(-1.0..1.0))).collect();
        let ys = [0, 1, 2, 0, 1, 2];
        let m = &models()[0];
        let a = forward_backward(m, &xs, &ys).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| forward_backward(m, &xs, &ys).unwrap());
        assert_eq!(a.grads, b.grads);
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    }
}
