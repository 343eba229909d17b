//! Direct grouped 2-D cross-correlation with forward and backward passes.
//!
//! Inputs are single samples `C × H × W`; weights are
//! `C_out × (C_in / groups) × kh × kw`. Sizes here are small enough that a
//! direct loop nest (innermost loop over contiguous output columns) beats
//! the bookkeeping of im2col.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(kh, kw)`.
    pub kernel: (usize, usize),
    /// `(vertical, horizontal)`.
    pub stride: (usize, usize),
    /// Zero padding `(vertical, horizontal)`, applied on both sides.
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: (1, 1),
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, (1, 1))
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.groups >= 1
            && self.in_channels >= 1
            && self.out_channels >= 1
            && self.in_channels.is_multiple_of(self.groups)
            && self.out_channels.is_multiple_of(self.groups)
            && self.kernel.0 >= 1
            && self.kernel.1 >= 1
            && self.stride.0 >= 1
            && self.stride.1 >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::shape(format!("invalid convolution spec {self:?}")))
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// `floor((H + 2·pad − k) / stride) + 1` per axis; errors when the
    /// padded input is smaller than the kernel.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, p: usize, s: usize| {
            (n + 2 * p)
                .checked_sub(k)
                .map(|d| d / s + 1)
                .ok_or_else(|| Error::shape(format!("kernel {k} larger than padded input {}", n + 2 * p)))
        };
        Ok((
            axis(h, self.kernel.0, self.padding.0, self.stride.0)?,
            axis(w, self.kernel.1, self.padding.1, self.stride.1)?,
        ))
    }

    fn check(&self, x_shape: &[usize], weight: &Tensor) -> Result<()> {
        self.validate()?;
        if x_shape.len() != 3 || x_shape[0] != self.in_channels {
            return Err(Error::shape(format!(
                "convolution expects {} input channels (C×H×W), got {x_shape:?}",
                self.in_channels
            )));
        }
        if weight.shape() != self.weight_shape() {
            return Err(Error::shape(format!(
                "weight shape {:?} does not match {:?}",
                weight.shape(),
                self.weight_shape()
            )));
        }
        Ok(())
    }
}

/// Output columns `ow` whose input column `ow·s + kj − p` lies in `0..w`.
#[inline]
fn col_range(kj: usize, pad: usize, stride: usize, w: usize, ow_n: usize) -> (usize, usize) {
    let lo = if pad > kj { (pad - kj).div_ceil(stride) } else { 0 };
    if w + pad <= kj {
        return (0, 0);
    }
    let hi = ((w - 1 + pad - kj) / stride + 1).min(ow_n);
    (lo.min(hi), hi)
}

#[inline]
fn input_row(oh: usize, ki: usize, stride: usize, pad: usize, h: usize) -> Option<usize> {
    let ih = (oh * stride + ki).checked_sub(pad)?;
    (ih < h).then_some(ih)
}

/// Visits every `(weight index, input plane, output plane, ki, kj)` tuple.
fn for_each_tap(spec: &ConvSpec, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (kh, kw) = spec.kernel;
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    for g in 0..spec.groups {
        for ocl in 0..opg {
            let oc = g * opg + ocl;
            for icl in 0..ipg {
                let ic = g * ipg + icl;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wi = ((oc * ipg + icl) * kh + ki) * kw + kj;
                        f(wi, ic, oc, ki, kj);
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, spec: &ConvSpec, weight: &Tensor, bias: Option<&[f64]>) -> Result<Tensor> {
    spec.check(x.shape(), weight)?;
    if let Some(b) = bias {
        if b.len() != spec.out_channels {
            return Err(Error::shape("bias length must equal output channels"));
        }
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh_n, ow_n) = spec.output_size(h, w)?;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut y = vec![0.0; spec.out_channels * oh_n * ow_n];
    if let Some(b) = bias {
        for (oc, bv) in b.iter().enumerate() {
            y[oc * oh_n * ow_n..(oc + 1) * oh_n * ow_n].fill(*bv);
        }
    }
    let xd = x.data();
    let wd = weight.data();
    for_each_tap(spec, |wi, ic, oc, ki, kj| {
        let wv = wd[wi];
        if wv == 0.0 {
            return;
        }
        let (lo, hi) = col_range(kj, pw, sw, w, ow_n);
        for oh in 0..oh_n {
            let Some(ih) = input_row(oh, ki, sh, ph, h) else { continue };
            let in_row = &xd[(ic * h + ih) * w..(ic * h + ih + 1) * w];
            let out_row = &mut y[(oc * oh_n + oh) * ow_n..(oc * oh_n + oh + 1) * ow_n];
            for ow in lo..hi {
                out_row[ow] += wv * in_row[ow * sw + kj - pw];
            }
        }
    });
    Tensor::new(vec![spec.out_channels, oh_n, ow_n], y)
}

/// Gradient of the loss with respect to the convolution input.
pub fn conv2d_backward_input(grad_out: &Tensor, spec: &ConvSpec, weight: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
    let (h, w) = input_hw;
    spec.check(&[spec.in_channels, h, w], weight)?;
    let (oh_n, ow_n) = spec.output_size(h, w)?;
    if grad_out.shape() != [spec.out_channels, oh_n, ow_n] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match {:?}",
            grad_out.shape(),
            [spec.out_channels, oh_n, ow_n]
        )));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut dx = vec![0.0; spec.in_channels * h * w];
    let gd = grad_out.data();
    let wd = weight.data();
    for_each_tap(spec, |wi, ic, oc, ki, kj| {
        let wv = wd[wi];
        if wv == 0.0 {
            return;
        }
        let (lo, hi) = col_range(kj, pw, sw, w, ow_n);
        for oh in 0..oh_n {
            let Some(ih) = input_row(oh, ki, sh, ph, h) else { continue };
            let g_row = &gd[(oc * oh_n + oh) * ow_n..(oc * oh_n + oh + 1) * ow_n];
            let dx_row = &mut dx[(ic * h + ih) * w..(ic * h + ih + 1) * w];
            for ow in lo..hi {
                dx_row[ow * sw + kj - pw] += wv * g_row[ow];
            }
        }
    });
    Tensor::new(vec![spec.in_channels, h, w], dx)
}

/// Gradient of the loss with respect to the convolution weights.
pub fn conv2d_backward_weight(x: &Tensor, grad_out: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let shape = spec.weight_shape();
    spec.check(x.shape(), &Tensor::zeros(&shape))?;
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh_n, ow_n) = spec.output_size(h, w)?;
    if grad_out.shape() != [spec.out_channels, oh_n, ow_n] {
        return Err(Error::shape("output gradient does not match convolution output"));
    }
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let mut gw = vec![0.0; shape.iter().product()];
    let gd = grad_out.data();
    let xd = x.data();
    for_each_tap(spec, |wi, ic, oc, ki, kj| {
        let (lo, hi) = col_range(kj, pw, sw, w, ow_n);
        let mut acc = 0.0;
        for oh in 0..oh_n {
            let Some(ih) = input_row(oh, ki, sh, ph, h) else { continue };
            let g_row = &gd[(oc * oh_n + oh) * ow_n..(oc * oh_n + oh + 1) * ow_n];
            let in_row = &xd[(ic * h + ih) * w..(ic * h + ih + 1) * w];
            for ow in lo..hi {
                acc += g_row[ow] * in_row[ow * sw + kj - pw];
            }
        }
        gw[wi] += acc;
    });
    Tensor::new(shape.to_vec(), gw)
}

/// Per-channel sum of an output gradient.
pub fn bias_grad(grad_out: &Tensor) -> Vec<f64> {
    let c = grad_out.shape()[0];
    let plane = grad_out.len() / c;
    grad_out.data().chunks_exact(plane).map(|p| p.iter().sum()).collect()
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

/// Masks `grad` by `pre > 0`, the derivative of ReLU at pre-activation `pre`.
pub fn relu_backward(pre: &Tensor, grad: &Tensor) -> Tensor {
    let mut g = grad.clone();
    for (gv, p) in g.data_mut().iter_mut().zip(pre.data()) {
        if *p <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct definition: every output sums over its group's input channels
    /// and kernel taps, skipping taps that land in the zero padding.
    fn oracle(x: &Tensor, spec: &ConvSpec, wt: &Tensor, bias: Option<&[f64]>) -> Tensor {
        let (h, w) = (x.shape()[1] as isize, x.shape()[2] as isize);
        let (oh_n, ow_n) = spec.output_size(h as usize, w as usize).unwrap();
        let ipg = spec.in_channels / spec.groups;
        let opg = spec.out_channels / spec.groups;
        Tensor::from_fn(&[spec.out_channels, oh_n, ow_n], |i| {
            let (oc, oh, ow) = (i[0], i[1], i[2]);
            let g = oc / opg;
            let mut s = bias.map_or(0.0, |b| b[oc]);
            for icl in 0..ipg {
                for ki in 0..spec.kernel.0 {
                    for kj in 0..spec.kernel.1 {
                        let ih = (oh * spec.stride.0 + ki) as isize - spec.padding.0 as isize;
                        let iw = (ow * spec.stride.1 + kj) as isize - spec.padding.1 as isize;
                        if ih < 0 || iw < 0 || ih >= h || iw >= w {
                            continue;
                        }
                        s += wt.get(&[oc, icl, ki, kj]) * x.get(&[g * ipg + icl, ih as usize, iw as usize]);
                    }
                }
            }
            s
        })
    }

    #[test]
    fn identity_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&[3, 4, 5], &mut rng);
        let spec = ConvSpec::pointwise(3, 3);
        let wt = Tensor::from_fn(&[3, 3, 1, 1], |i| if i[0] == i[1] { 1.0 } else { 0.0 });
        assert_eq!(conv2d_forward(&x, &spec, &wt, None).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let x = Tensor::filled(&[1, 5, 5], 1.0);
        let spec = ConvSpec::new(1, 1, (3, 3));
        let y = conv2d_forward(&x, &spec, &Tensor::filled(&[1, 1, 3, 3], 1.0), None).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = [
            ConvSpec::new(4, 6, (3, 3)).with_padding((1, 1)),
            ConvSpec::new(4, 6, (3, 2)).with_stride((2, 1)).with_padding((2, 0)).with_groups(2),
            ConvSpec::new(6, 6, (5, 1)).with_groups(6).with_padding((2, 0)),
            ConvSpec::new(4, 2, (1, 1)).with_groups(2),
            ConvSpec::new(2, 3, (4, 4)).with_stride((3, 2)).with_padding((3, 1)),
        ];
        for spec in specs {
            let x = random(&[spec.in_channels, 7, 6], &mut rng);
            let wt = random(&spec.weight_shape(), &mut rng);
            let b: Vec<f64> = (0..spec.out_channels).map(|i| i as f64 * 0.1).collect();
            let got = conv2d_forward(&x, &spec, &wt, Some(&b)).unwrap();
            let want = oracle(&x, &spec, &wt, Some(&b));
            assert!(got.max_abs_diff(&want).unwrap() <= 1e-12, "{spec:?}");
        }
    }

    #[test]
    fn backward_passes_are_adjoint_to_forward() {
        // For a linear map y = conv(x, w): <dy, conv(x, w)> equals both
        // <backward_input(dy), x> and <backward_weight(x, dy), w>.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            ConvSpec::new(3, 4, (3, 3)).with_padding((1, 1)),
            ConvSpec::new(4, 4, (3, 1)).with_groups(4).with_stride((2, 1)).with_padding((1, 0)),
            ConvSpec::new(4, 2, (2, 3)).with_groups(2).with_stride((1, 2)).with_padding((0, 2)),
        ];
        for spec in specs {
            let x = random(&[spec.in_channels, 6, 7], &mut rng);
            let wt = random(&spec.weight_shape(), &mut rng);
            let y = conv2d_forward(&x, &spec, &wt, None).unwrap();
            let dy = random(y.shape(), &mut rng);
            let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
            let dx = conv2d_backward_input(&dy, &spec, &wt, (6, 7)).unwrap();
            let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
            let dw = conv2d_backward_weight(&x, &dy, &spec).unwrap();
            let via_w: f64 = dw.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() <= 1e-10, "{spec:?}");
            assert!((lhs - via_w).abs() <= 1e-10, "{spec:?}");
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::zeros(&[3, 4, 4]);
        let spec = ConvSpec::new(2, 1, (3, 3));
        assert!(conv2d_forward(&x, &spec, &Tensor::zeros(&[1, 2, 3, 3]), None).is_err());
        let spec = ConvSpec::new(3, 1, (5, 5));
        assert!(conv2d_forward(&x, &spec, &Tensor::zeros(&[1, 3, 5, 5]), None).is_err());
        assert!(ConvSpec::new(3, 2, (1, 1)).with_groups(2).validate().is_err());
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::new(1, 1, (7, 7)).with_stride((2, 2)).with_padding((3, 3));
        assert_eq!(spec.output_size(32, 31).unwrap(), (16, 16));
    }
}
