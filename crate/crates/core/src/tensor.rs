//! Dense row-major tensors and the index algebra used by the decompositions.
//!
//! Unfolding convention: `unfold(t, m)` is a `shape[m] × Π(other extents)`
//! matrix whose column index enumerates the remaining axes in row-major
//! order (last remaining axis fastest). With this convention a CP model
//! `Σ_r a_r ∘ b_r ∘ c_r` satisfies
//! `unfold(t, 0) = A·khatri_rao(B, C)ᵀ`, `unfold(t, 1) = B·khatri_rao(A, C)ᵀ`
//! and `unfold(t, 2) = C·khatri_rao(A, B)ᵀ`.

use std::path::Path;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};

const TNS_MAGIC: &[u8; 4] = b"TNS1";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape)?;
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("invalid tensor shape");
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in row-major
    /// order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Tensor::zeros(shape);
        let mut idx = vec![0; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, shape);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn order(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&x, &n)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(x < n, "index {x} out of range on axis {i}");
            off = off * n + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// Same data, new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    /// Contiguous sub-tensor along axis 0.
    pub fn slice0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero tensors"))?;
        if parts.iter().any(|p| p.shape != first.shape) {
            return Err(Error::shape("stacked tensors must share a shape"));
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::new(shape, data)
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot add {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.add(&other.scale(-1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn unfold(&self, mode: usize) -> Result<Matrix> {
        unfold(self, mode)
    }

    pub fn mode_product(&self, m: &Matrix, mode: usize) -> Result<Tensor> {
        mode_product(self, m, mode)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(TNS_MAGIC);
        write_tensor_body(&mut w, self);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut r = Reader::new(bytes, "TNS1");
        r.magic(TNS_MAGIC)?;
        let t = read_tensor_body(&mut r)?;
        r.finish()?;
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        Tensor::from_bytes(&binio::read_file(path)?)
    }
}

/// Order, extents and row-major data without the magic; reused by the
/// formats that embed tensors.
pub(crate) fn write_tensor_body(w: &mut Writer, t: &Tensor) {
    w.usize(t.order());
    for &n in t.shape() {
        w.usize(n);
    }
    w.f64s(t.data());
}

pub(crate) fn read_tensor_body(r: &mut Reader<'_>) -> Result<Tensor> {
    let order = r.usize()?;
    if order == 0 {
        return Err(Error::Format("tensor order must be >= 1".into()));
    }
    r.require(order * 4)?;
    let shape = (0..order).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero extent in tensor shape {shape:?}")));
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &n| acc.checked_mul(n))
        .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
    let data = r.f64s(len)?;
    Tensor::new(shape, data)
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::shape("tensor order must be >= 1"));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..shape.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

/// Mode-`mode` matricization; see the module docs for the column order.
pub fn unfold(t: &Tensor, mode: usize) -> Result<Matrix> {
    if mode >= t.order() {
        return Err(Error::Index {
            index: mode,
            order: t.order(),
        });
    }
    let shape = t.shape();
    let rows = shape[mode];
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    let cols = outer * inner;
    let mut out = vec![0.0; rows * cols];
    for a in 0..outer {
        for i in 0..rows {
            let src = &t.data[(a * rows + i) * inner..(a * rows + i + 1) * inner];
            let dst = &mut out[i * cols + a * inner..i * cols + (a + 1) * inner];
            dst.copy_from_slice(src);
        }
    }
    Matrix::new(rows, cols, out)
}

/// Inverse of [`unfold`].
pub fn fold(m: &Matrix, mode: usize, shape: &[usize]) -> Result<Tensor> {
    check_shape(shape)?;
    if mode >= shape.len() {
        return Err(Error::Index {
            index: mode,
            order: shape.len(),
        });
    }
    let rows = shape[mode];
    let outer: usize = shape[..mode].iter().product();
    let inner: usize = shape[mode + 1..].iter().product();
    if m.rows() != rows || m.cols() != outer * inner {
        return Err(Error::shape(format!(
            "{}x{} matrix cannot fold into {shape:?} along mode {mode}",
            m.rows(),
            m.cols()
        )));
    }
    let cols = m.cols();
    let mut data = vec![0.0; rows * cols];
    for a in 0..outer {
        for i in 0..rows {
            let src = &m.data()[i * cols + a * inner..i * cols + (a + 1) * inner];
            data[(a * rows + i) * inner..(a * rows + i + 1) * inner].copy_from_slice(src);
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// n-mode product: contracts axis `mode` of `t` with the columns of `m`.
pub fn mode_product(t: &Tensor, m: &Matrix, mode: usize) -> Result<Tensor> {
    if mode >= t.order() {
        return Err(Error::Index {
            index: mode,
            order: t.order(),
        });
    }
    if m.cols() != t.shape()[mode] {
        return Err(Error::shape(format!(
            "mode-{mode} product needs {} matrix columns, got {}",
            t.shape()[mode],
            m.cols()
        )));
    }
    let mut shape = t.shape().to_vec();
    shape[mode] = m.rows();
    let product = m.matmul(&unfold(t, mode)?)?;
    fold(&product, mode, &shape)
}

/// Three-way outer product `a ∘ b ∘ c`.
pub fn outer3(a: &[f64], b: &[f64], c: &[f64]) -> Tensor {
    let mut data = Vec::with_capacity(a.len() * b.len() * c.len());
    for x in a {
        for y in b {
            let xy = x * y;
            data.extend(c.iter().map(|z| xy * z));
        }
    }
    Tensor::new(vec![a.len(), b.len(), c.len()], data).expect("outer3 of empty vector")
}

pub fn frobenius_norm(t: &Tensor) -> f64 {
    norm2(t.data())
}

/// Column-wise Kronecker product: column r is `a[:, r] ⊗ b[:, r]`.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "khatri-rao needs equal column counts, got {} and {}",
            a.cols(),
            b.cols()
        )));
    }
    let (i_n, j_n, r_n) = (a.rows(), b.rows(), a.cols());
    Ok(Matrix::from_fn(i_n * j_n, r_n, |row, r| {
        a[(row / j_n, r)] * b[(row % j_n, r)]
    }))
}
