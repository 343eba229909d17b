//! Per-filter CP and spectral-mode Tucker decompositions of order-3 filters
//! (`C_in × k1 × k2`).
//!
//! A CP decomposition writes a filter as `Σ_r c_r ∘ x_r ∘ y_r`; the spatial
//! columns `x_r`, `y_r` are kept at unit norm and the spectral column `c_r`
//! carries all scale. The partial Tucker decomposition compresses only the
//! spectral mode, `V ×₁ A`, which is exactly a truncated SVD of the mode-0
//! unfolding and therefore needs no HOOI iteration.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::filteradapt::FilterBank;
use crate::linalg::{lstsq_gram, norm2, svd, Matrix};
use crate::tensor::{khatri_rao, mode_product, outer3, unfold, Tensor};

const DCP_MAGIC: &[u8; 4] = b"DCP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecompKind {
    Cp,
    Tucker,
}

impl DecompKind {
    pub fn tag(self) -> u32 {
        match self {
            DecompKind::Cp => 0,
            DecompKind::Tucker => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(DecompKind::Cp),
            1 => Ok(DecompKind::Tucker),
            t => Err(Error::Format(format!("unknown decomposition kind tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DecompKind::Cp => "cp",
            DecompKind::Tucker => "tucker",
        }
    }
}

impl std::str::FromStr for DecompKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cp" => Ok(DecompKind::Cp),
            "tucker" => Ok(DecompKind::Tucker),
            other => Err(Error::Usage(format!("unknown decomposition kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CpOptions {
    /// Stop once the relative error changes by less than this between sweeps.
    pub tol: f64,
    pub max_iters: usize,
    /// Seeded random starts tried in addition to the HOSVD start.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for CpOptions {
    fn default() -> Self {
        CpOptions {
            tol: 1e-9,
            max_iters: 500,
            restarts: 4,
            seed: 0,
        }
    }
}

/// Rank-R CP model of a single filter.
#[derive(Debug, Clone, PartialEq)]
pub struct CpDecomp {
    /// `C_in × R`, column r is `c_r`.
    pub spectral: Matrix,
    /// `k1 × R`, unit-norm columns `x_r`.
    pub horizontal: Matrix,
    /// `k2 × R`, unit-norm columns `y_r`.
    pub vertical: Matrix,
}

impl CpDecomp {
    pub fn rank(&self) -> usize {
        self.spectral.cols()
    }

    pub fn reconstruct(&self) -> Tensor {
        cp_reconstruct(self)
    }
}

/// Outcome of [`cp_decompose`].
#[derive(Debug, Clone)]
pub struct CpFit {
    pub decomp: CpDecomp,
    pub rel_error: f64,
    /// Relative error after every sweep of the winning start.
    pub history: Vec<f64>,
    /// Set when the input filter is identically zero.
    pub degenerate: bool,
}

/// Spectral-mode partial Tucker model `core ×₁ spectral`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tucker1Decomp {
    /// `R × k1 × k2`.
    pub core: Tensor,
    /// `C_in × R`, orthonormal columns.
    pub spectral: Matrix,
}

impl Tucker1Decomp {
    pub fn rank(&self) -> usize {
        self.spectral.cols()
    }

    pub fn reconstruct(&self) -> Tensor {
        tucker1_reconstruct(self)
    }
}

/// `‖original − approx‖ / ‖original‖`, with 0/0 defined as 0.
pub fn relative_error(original: &Tensor, approx: &Tensor) -> f64 {
    let diff = norm2(
        &original
            .data()
            .iter()
            .zip(approx.data())
            .map(|(a, b)| a - b)
            .collect::<Vec<_>>(),
    );
    let base = original.frobenius_norm();
    if base == 0.0 {
        if diff == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        diff / base
    }
}

fn check_filter(filter: &Tensor, rank: usize) -> Result<()> {
    if filter.order() != 3 {
        return Err(Error::shape(format!(
            "filter must be order 3 (C_in×k1×k2), got shape {:?}",
            filter.shape()
        )));
    }
    if rank == 0 {
        return Err(Error::Usage("decomposition rank must be >= 1".into()));
    }
    Ok(())
}

pub fn cp_reconstruct(d: &CpDecomp) -> Tensor {
    let (c_in, k1, k2) = (d.spectral.rows(), d.horizontal.rows(), d.vertical.rows());
    let mut out = Tensor::zeros(&[c_in, k1, k2]);
    for r in 0..d.rank() {
        let term = outer3(&d.spectral.column(r), &d.horizontal.column(r), &d.vertical.column(r));
        for (o, t) in out.data_mut().iter_mut().zip(term.data()) {
            *o += t;
        }
    }
    out
}

pub fn tucker1_reconstruct(d: &Tucker1Decomp) -> Tensor {
    mode_product(&d.core, &d.spectral, 0).expect("tucker core and spectral factor disagree")
}

/// CP-ALS with an HOSVD start plus `opts.restarts` seeded random starts,
/// keeping the start with the lowest final error.
pub fn cp_decompose(filter: &Tensor, rank: usize, opts: &CpOptions) -> Result<CpFit> {
    check_filter(filter, rank)?;
    let shape = [filter.shape()[0], filter.shape()[1], filter.shape()[2]];

    if filter.frobenius_norm() == 0.0 {
        let unit = |n: usize| {
            let mut m = Matrix::zeros(n, rank);
            for r in 0..rank {
                m[(0, r)] = 1.0;
            }
            m
        };
        return Ok(CpFit {
            decomp: CpDecomp {
                spectral: Matrix::zeros(shape[0], rank),
                horizontal: unit(shape[1]),
                vertical: unit(shape[2]),
            },
            rel_error: 0.0,
            history: Vec::new(),
            degenerate: true,
        });
    }

    let unfoldings = [unfold(filter, 0)?, unfold(filter, 1)?, unfold(filter, 2)?];
    let mut best: Option<CpFit> = None;
    for start in 0..=opts.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(opts.seed, &[rank as u64, start as u64]));
        let init = if start == 0 {
            hosvd_init(&unfoldings, rank, &mut rng)?
        } else {
            shape.map(|n| Matrix::from_fn(n, rank, |_, _| rng.random_range(-1.0..1.0)))
        };
        let fit = cp_als(filter, &unfoldings, init, opts)?;
        if best.as_ref().is_none_or(|b| fit.rel_error < b.rel_error) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

fn hosvd_init(unfoldings: &[Matrix; 3], rank: usize, rng: &mut ChaCha8Rng) -> Result<[Matrix; 3]> {
    let mut out = Vec::with_capacity(3);
    for m in unfoldings {
        let u = svd(m)?.u;
        let n = m.rows();
        out.push(Matrix::from_fn(n, rank, |i, r| {
            if r < u.cols() {
                u[(i, r)]
            } else {
                rng.random_range(-1.0..1.0)
            }
        }));
    }
    Ok(out.try_into().expect("three factors"))
}

fn cp_als(filter: &Tensor, unfoldings: &[Matrix; 3], init: [Matrix; 3], opts: &CpOptions) -> Result<CpFit> {
    let [mut a, mut b, mut c] = init;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..opts.max_iters.max(1) {
        a = als_update(&unfoldings[0], &b, &c)?;
        b = als_update(&unfoldings[1], &a, &c)?;
        c = als_update(&unfoldings[2], &a, &b)?;
        let decomp = normalized(&a, &b, &c);
        let err = relative_error(filter, &cp_reconstruct(&decomp));
        history.push(err);
        a = decomp.spectral;
        b = decomp.horizontal;
        c = decomp.vertical;
        if !err.is_finite() {
            return Err(Error::Numerical("CP-ALS produced a non-finite error".into()));
        }
        if (prev - err).abs() < opts.tol {
            break;
        }
        prev = err;
    }
    let decomp = CpDecomp {
        spectral: a,
        horizontal: b,
        vertical: c,
    };
    Ok(CpFit {
        rel_error: *history.last().unwrap(),
        decomp,
        history,
        degenerate: false,
    })
}

/// Least-squares update of the factor for the mode whose unfolding is
/// `unfolded`, given the other two factors in mode order.
fn als_update(unfolded: &Matrix, first: &Matrix, second: &Matrix) -> Result<Matrix> {
    let gram = first.t_matmul(first)?.hadamard(&second.t_matmul(second)?)?;
    let kr = khatri_rao(first, second)?;
    // rhs = (unfolded · kr)ᵀ = krᵀ · unfoldedᵀ
    let rhs = unfolded.matmul(&kr)?.transpose();
    Ok(lstsq_gram(&gram, &rhs)?.transpose())
}

/// Moves spatial column scale into the spectral columns; zero spatial
/// columns become the first basis vector with a zero spectral column.
fn normalized(a: &Matrix, b: &Matrix, c: &Matrix) -> CpDecomp {
    let mut spectral = a.clone();
    let mut horizontal = b.clone();
    let mut vertical = c.clone();
    for r in 0..a.cols() {
        let nb = norm2(&b.column(r));
        let nc = norm2(&c.column(r));
        if nb == 0.0 || nc == 0.0 {
            let mut e = vec![0.0; b.rows()];
            e[0] = 1.0;
            horizontal.set_column(r, &e);
            let mut e = vec![0.0; c.rows()];
            e[0] = 1.0;
            vertical.set_column(r, &e);
            spectral.set_column(r, &vec![0.0; a.rows()]);
            continue;
        }
        horizontal.set_column(r, &b.column(r).iter().map(|v| v / nb).collect::<Vec<_>>());
        vertical.set_column(r, &c.column(r).iter().map(|v| v / nc).collect::<Vec<_>>());
        spectral.set_column(r, &a.column(r).iter().map(|v| v * nb * nc).collect::<Vec<_>>());
    }
    CpDecomp {
        spectral,
        horizontal,
        vertical,
    }
}

/// Spectral-mode truncated SVD; `rank` is clamped to `C_in`.
pub fn tucker1_decompose(filter: &Tensor, rank: usize) -> Result<Tucker1Decomp> {
    check_filter(filter, rank)?;
    let c_in = filter.shape()[0];
    let rank = rank.min(c_in);
    let u = svd(&unfold(filter, 0)?)?.u;
    let spectral = Matrix::from_fn(c_in, rank, |i, r| u[(i, r)]);
    let core = mode_product(filter, &spectral.transpose(), 0)?;
    Ok(Tucker1Decomp { core, spectral })
}

#[derive(Debug, Clone, PartialEq)]
pub enum FilterDecomp {
    Cp(CpDecomp),
    Tucker(Tucker1Decomp),
}

impl FilterDecomp {
    pub fn reconstruct(&self) -> Tensor {
        match self {
            FilterDecomp::Cp(d) => d.reconstruct(),
            FilterDecomp::Tucker(d) => d.reconstruct(),
        }
    }

    pub fn spectral(&self) -> &Matrix {
        match self {
            FilterDecomp::Cp(d) => &d.spectral,
            FilterDecomp::Tucker(d) => &d.spectral,
        }
    }
}

/// Independent per-filter decompositions of a whole first-layer bank.
#[derive(Debug, Clone, PartialEq)]
pub struct BankDecomp {
    pub kind: DecompKind,
    /// Effective rank (Tucker ranks are clamped to `C_in`).
    pub rank: usize,
    pub c_in: usize,
    pub k1: usize,
    pub k2: usize,
    pub filters: Vec<FilterDecomp>,
    pub errors: Vec<f64>,
    pub degenerate: Vec<bool>,
    /// Bias of the source bank, carried along for adaptation.
    pub bias: Option<Vec<f64>>,
}

impl BankDecomp {
    pub fn c_out(&self) -> usize {
        self.filters.len()
    }

    pub fn mean_error(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }

    /// Dense `C_out × C_in × k1 × k2` bank of the reconstructions.
    pub fn reconstruct(&self) -> Tensor {
        let parts: Vec<Tensor> = self.filters.iter().map(FilterDecomp::reconstruct).collect();
        Tensor::stack(&parts).expect("uniform filter shapes")
    }

    /// DCP1 layout: magic, u32 kind tag (0 = CP, 1 = Tucker), u32 C_out,
    /// C_in, k1, k2, R; then per filter the components as f64 LE
    /// (CP: spectral C_in×R, horizontal k1×R, vertical k2×R; Tucker:
    /// spectral C_in×R, core R×k1×k2, all row-major); then C_out f64
    /// relative errors; then a u32 bias flag followed by C_out f64 biases
    /// when set.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(DCP_MAGIC);
        w.u32(self.kind.tag());
        for n in [self.c_out(), self.c_in, self.k1, self.k2, self.rank] {
            w.usize(n);
        }
        for f in &self.filters {
            match f {
                FilterDecomp::Cp(d) => {
                    w.f64s(d.spectral.data());
                    w.f64s(d.horizontal.data());
                    w.f64s(d.vertical.data());
                }
                FilterDecomp::Tucker(d) => {
                    w.f64s(d.spectral.data());
                    w.f64s(d.core.data());
                }
            }
        }
        w.f64s(&self.errors);
        match &self.bias {
            Some(b) => {
                w.u32(1);
                w.f64s(b);
            }
            None => w.u32(0),
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "DCP1");
        r.magic(DCP_MAGIC)?;
        let kind = DecompKind::from_tag(r.u32()?)?;
        let (c_out, c_in, k1, k2, rank) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        if [c_out, c_in, k1, k2, rank].contains(&0) {
            return Err(Error::Format("DCP1 dimensions must be >= 1".into()));
        }
        let mut filters = Vec::with_capacity(c_out);
        for _ in 0..c_out {
            let spectral = Matrix::new(c_in, rank, r.f64s(c_in * rank)?)?;
            filters.push(match kind {
                DecompKind::Cp => FilterDecomp::Cp(CpDecomp {
                    spectral,
                    horizontal: Matrix::new(k1, rank, r.f64s(k1 * rank)?)?,
                    vertical: Matrix::new(k2, rank, r.f64s(k2 * rank)?)?,
                }),
                DecompKind::Tucker => FilterDecomp::Tucker(Tucker1Decomp {
                    spectral,
                    core: Tensor::new(vec![rank, k1, k2], r.f64s(rank * k1 * k2)?)?,
                }),
            });
        }
        let errors = r.f64s(c_out)?;
        let bias = match r.u32()? {
            0 => None,
            _ => Some(r.f64s(c_out)?),
        };
        r.finish()?;
        let degenerate = filters.iter().map(|f| f.spectral().max_abs() == 0.0).collect();
        Ok(BankDecomp {
            kind,
            rank,
            c_in,
            k1,
            k2,
            filters,
            errors,
            degenerate,
            bias,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// Decomposes every output filter of `bank` independently (in parallel).
/// Results depend only on the bank, kind, rank and `opts`.
pub fn decompose_bank(bank: &FilterBank, kind: DecompKind, rank: usize, opts: &CpOptions) -> Result<BankDecomp> {
    let w = bank.weights();
    if rank == 0 {
        return Err(Error::Usage("decomposition rank must be >= 1".into()));
    }
    let (c_out, c_in, k1, k2) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let results: Vec<Result<(FilterDecomp, f64, bool)>> = (0..c_out)
        .into_par_iter()
        .map(|o| {
            let filter = w.slice0(o);
            match kind {
                DecompKind::Cp => {
                    let opts = CpOptions {
                        seed: crate::derive_seed(opts.seed, &[o as u64]),
                        ..opts.clone()
                    };
                    let fit = cp_decompose(&filter, rank, &opts)?;
                    Ok((FilterDecomp::Cp(fit.decomp), fit.rel_error, fit.degenerate))
                }
                DecompKind::Tucker => {
                    let d = tucker1_decompose(&filter, rank)?;
                    let err = relative_error(&filter, &d.reconstruct());
                    let degenerate = filter.frobenius_norm() == 0.0;
                    Ok((FilterDecomp::Tucker(d), err, degenerate))
                }
            }
        })
        .collect();
    let mut filters = Vec::with_capacity(c_out);
    let mut errors = Vec::with_capacity(c_out);
    let mut degenerate = Vec::with_capacity(c_out);
    for res in results {
        let (f, e, d) = res?;
        filters.push(f);
        errors.push(e);
        degenerate.push(d);
    }
    Ok(BankDecomp {
        kind,
        rank: match kind {
            DecompKind::Cp => rank,
            DecompKind::Tucker => rank.min(c_in),
        },
        c_in,
        k1,
        k2,
        filters,
        errors,
        degenerate,
        bias: bank.bias().map(<[f64]>::to_vec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn vec_rand(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_filter(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_cp(c_in: usize, k1: usize, k2: usize, rank: usize, rng: &mut ChaCha8Rng) -> CpDecomp {
        CpDecomp {
            spectral: Matrix::from_fn(c_in, rank, |_, _| rng.random_range(-1.0..1.0)),
            horizontal: Matrix::from_fn(k1, rank, |_, _| rng.random_range(-1.0..1.0)),
            vertical: Matrix::from_fn(k2, rank, |_, _| rng.random_range(-1.0..1.0)),
        }
    }

    #[test]
    fn rank_one_input_is_recovered() {
        let mut g = rng(10);
        for _ in 0..10 {
            let t = outer3(&vec_rand(3, &mut g), &vec_rand(7, &mut g), &vec_rand(7, &mut g));
            let fit = cp_decompose(&t, 1, &CpOptions::default()).unwrap();
            assert!(fit.rel_error <= 1e-8, "{}", fit.rel_error);
            for col in [fit.decomp.horizontal.column(0), fit.decomp.vertical.column(0)] {
                assert!((norm2(&col) - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rank_two_sum_is_recovered_with_restarts() {
        let mut g = rng(11);
        for _ in 0..5 {
            let t = outer3(&vec_rand(3, &mut g), &vec_rand(7, &mut g), &vec_rand(7, &mut g))
                .add(&outer3(&vec_rand(3, &mut g), &vec_rand(7, &mut g), &vec_rand(7, &mut g)))
                .unwrap();
            let opts = CpOptions {
                restarts: 5,
                ..CpOptions::default()
            };
            let fit = cp_decompose(&t, 2, &opts).unwrap();
            assert!(fit.rel_error <= 1e-6, "{}", fit.rel_error);
        }
    }

    #[test]
    fn als_error_is_monotone_and_nested_in_rank() {
        let mut g = rng(12);
        for seed in 0..10 {
            let t = random_filter([3, 7, 7], &mut g);
            let opts = CpOptions {
                seed,
                ..CpOptions::default()
            };
            let r1 = cp_decompose(&t, 1, &opts).unwrap();
            let r2 = cp_decompose(&t, 2, &opts).unwrap();
            assert!(r2.rel_error <= r1.rel_error + 1e-12);
            for fit in [&r1, &r2] {
                for w in fit.history.windows(2) {
                    assert!(w[1] <= w[0] + 1e-12, "error rose {} -> {}", w[0], w[1]);
                }
            }
        }
    }

    #[test]
    fn zero_filter_is_flagged_degenerate() {
        let fit = cp_decompose(&Tensor::zeros(&[3, 5, 5]), 2, &CpOptions::default()).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.decomp.spectral.max_abs(), 0.0);
        assert_eq!(norm2(&fit.decomp.horizontal.column(1)), 1.0);
        assert_eq!(fit.decomp.reconstruct().max_abs(), 0.0);
    }

    #[test]
    fn rank_above_spatial_extent_does_not_crash() {
        let mut g = rng(13);
        let t = random_filter([3, 2, 2], &mut g);
        let fit = cp_decompose(&t, 5, &CpOptions::default()).unwrap();
        assert!(fit.rel_error <= 1e-6);
    }

    #[test]
    fn cp_reconstruct_matches_triple_loop() {
        let mut g = rng(14);
        let d = random_cp(4, 3, 5, 3, &mut g);
        let rec = cp_reconstruct(&d);
        for c in 0..4 {
            for i in 0..3 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for r in 0..3 {
                        s += d.spectral[(c, r)] * d.horizontal[(i, r)] * d.vertical[(j, r)];
                    }
                    assert!((rec.get(&[c, i, j]) - s).abs() <= 1e-14);
                }
            }
        }
        let doubled = CpDecomp {
            spectral: d.spectral.scale(2.0),
            ..d.clone()
        };
        assert!(doubled.reconstruct().max_abs_diff(&rec.scale(2.0)).unwrap() <= 1e-14);
    }

    #[test]
    fn reconstruction_is_linear_in_spectral_part() {
        let mut g = rng(15);
        let d1 = random_cp(5, 3, 3, 2, &mut g);
        let c2 = Matrix::from_fn(5, 2, |_, _| g.random_range(-1.0..1.0));
        let (alpha, beta) = (0.7, -1.3);
        let mixed = CpDecomp {
            spectral: Matrix::from_fn(5, 2, |i, r| alpha * d1.spectral[(i, r)] + beta * c2[(i, r)]),
            ..d1.clone()
        };
        let d2 = CpDecomp {
            spectral: c2.clone(),
            ..d1.clone()
        };
        let expect = d1.reconstruct().scale(alpha).add(&d2.reconstruct().scale(beta)).unwrap();
        assert!(mixed.reconstruct().max_abs_diff(&expect).unwrap() <= 1e-12);

        let core = random_filter([2, 3, 3], &mut g);
        let t = |spectral: Matrix| Tucker1Decomp {
            core: core.clone(),
            spectral,
        };
        let a1 = Matrix::from_fn(5, 2, |_, _| g.random_range(-1.0..1.0));
        let mixed = t(Matrix::from_fn(5, 2, |i, r| alpha * a1[(i, r)] + beta * c2[(i, r)]));
        let expect = t(a1).reconstruct().scale(alpha).add(&t(c2).reconstruct().scale(beta)).unwrap();
        assert!(mixed.reconstruct().max_abs_diff(&expect).unwrap() <= 1e-12);
    }

    #[test]
    fn tucker_full_rank_and_rank_one() {
        let mut g = rng(16);
        let t = random_filter([3, 7, 7], &mut g);
        let d = tucker1_decompose(&t, 3).unwrap();
        assert!(relative_error(&t, &d.reconstruct()) <= 1e-10);
        let d = tucker1_decompose(&t, 10).unwrap();
        assert_eq!(d.rank(), 3);

        let spatial = random_filter([1, 7, 7], &mut g);
        let colour = [0.3, -1.2, 0.8];
        let t = Tensor::from_fn(&[3, 7, 7], |i| colour[i[0]] * spatial.get(&[0, i[1], i[2]]));
        let d = tucker1_decompose(&t, 1).unwrap();
        assert!(relative_error(&t, &d.reconstruct()) <= 1e-10);
    }

    #[test]
    fn tucker_error_equals_singular_value_tail() {
        let mut g = rng(17);
        for _ in 0..20 {
            let t = random_filter([3, 7, 7], &mut g);
            let d = tucker1_decompose(&t, 2).unwrap();
            let orth = d.spectral.t_matmul(&d.spectral).unwrap();
            assert!(orth.sub(&Matrix::identity(2)).unwrap().max_abs() <= 1e-10);
            let s = svd(&unfold(&t, 0).unwrap()).unwrap().s;
            let total: f64 = s.iter().map(|v| v * v).sum();
            let expect = (s[2] * s[2] / total).sqrt();
            assert!((relative_error(&t, &d.reconstruct()) - expect).abs() <= 1e-9);
        }
    }

    #[test]
    fn tucker_reconstruct_identity_and_zero_core() {
        let mut g = rng(18);
        let t = random_filter([3, 4, 4], &mut g);
        let d = Tucker1Decomp {
            core: t.clone(),
            spectral: Matrix::identity(3),
        };
        assert_eq!(d.reconstruct(), t);
        let z = Tucker1Decomp {
            core: Tensor::zeros(&[2, 4, 4]),
            spectral: Matrix::from_fn(3, 2, |_, _| 1.0),
        };
        assert_eq!(z.reconstruct().max_abs(), 0.0);
    }

    #[test]
    fn tucker_never_worse_than_cp() {
        let mut g = rng(19);
        for seed in 0..10 {
            let t = random_filter([3, 7, 7], &mut g);
            let cp = cp_decompose(&t, 2, &CpOptions { seed, ..CpOptions::default() }).unwrap();
            let tk = tucker1_decompose(&t, 2).unwrap();
            assert!(relative_error(&t, &tk.reconstruct()) <= cp.rel_error + 1e-9);
        }
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            cp_decompose(&Tensor::zeros(&[3, 3]), 1, &CpOptions::default()),
            Err(Error::Shape(_))
        ));
        assert!(matches!(tucker1_decompose(&Tensor::zeros(&[3, 3, 3]), 0), Err(Error::Usage(_))));
    }

    fn bank_of(filters: &[Tensor]) -> FilterBank {
        FilterBank::new(Tensor::stack(filters).unwrap(), None).unwrap()
    }

    #[test]
    fn bank_decomposition_cases() {
        let mut g = rng(20);
        let f = outer3(&vec_rand(3, &mut g), &vec_rand(5, &mut g), &vec_rand(5, &mut g));
        let bank = bank_of(&vec![f; 4]);
        let d = decompose_bank(&bank, DecompKind::Cp, 1, &CpOptions::default()).unwrap();
        assert_eq!(d.c_out(), 4);
        assert!(d.errors.iter().all(|e| *e <= 1e-8));

        let filters: Vec<Tensor> = (0..6).map(|_| random_filter([3, 5, 5], &mut g)).collect();
        let bank = bank_of(&filters);
        let full = decompose_bank(&bank, DecompKind::Tucker, 3, &CpOptions::default()).unwrap();
        assert!(full.errors.iter().all(|e| *e <= 1e-10));
        let means: Vec<f64> = (1..=3)
            .map(|r| decompose_bank(&bank, DecompKind::Tucker, r, &CpOptions::default()).unwrap().mean_error())
            .collect();
        assert!(means.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bank_decomposition_is_deterministic_and_round_trips() {
        let mut g = rng(21);
        let filters: Vec<Tensor> = (0..5).map(|_| random_filter([3, 3, 3], &mut g)).collect();
        let bank = FilterBank::new(Tensor::stack(&filters).unwrap(), Some(vec![0.5; 5])).unwrap();
        let opts = CpOptions {
            seed: 9,
            ..CpOptions::default()
        };
        let a = decompose_bank(&bank, DecompKind::Cp, 2, &opts).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| decompose_bank(&bank, DecompKind::Cp, 2, &opts).unwrap());
        assert_eq!(a, b);
        assert_eq!(BankDecomp::from_bytes(&a.to_bytes()).unwrap(), a);
        let t = decompose_bank(&bank, DecompKind::Tucker, 2, &opts).unwrap();
        assert_eq!(BankDecomp::from_bytes(&t.to_bytes()).unwrap(), t);
        let bytes = a.to_bytes();
        assert!(BankDecomp::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
