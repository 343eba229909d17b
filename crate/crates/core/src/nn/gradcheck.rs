//! Central finite-difference check of every trainable block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::first::{build_reduce, build_scratch, reduce_hidden_width, FirstLayer, Geometry, Method, ReduceInit};
use super::model::{forward_backward_with, Backbone, GradFault, Model};
use crate::decomp::{decompose_bank, CpOptions};
use crate::error::Result;
use crate::filteradapt::{adapt, FilterBank, InitPolicy};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely rather than
/// relatively; central differences of an O(1) loss carry roughly
/// `1e-16 / ε` of rounding noise.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub channels: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub rank: usize,
    pub size: usize,
    pub batch: usize,
    pub classes: usize,
    pub geometry: Geometry,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            channels: 8,
            c_out: 4,
            kernel: 5,
            rank: 2,
            size: 12,
            batch: 2,
            classes: 3,
            geometry: Geometry::new(1, 2),
            eps: 1e-5,
            tol: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub method: Method,
    pub block: &'static str,
    pub len: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.worst <= self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.worst).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "method,block,params,worst_rel_error,status")?;
        for b in &self.blocks {
            let status = if b.worst <= self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{},{},{},{:.3e},{}", b.method.name(), b.block, b.len, b.worst, status)?;
        }
        Ok(())
    }
}

/// `|a − n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Builds the micro model of `method` used by the check.
pub fn micro_model(cfg: &GradcheckConfig, method: Method) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[0]));
    let k = cfg.kernel;
    let w = Tensor::from_fn(&[cfg.c_out, 3, k, k], |_| rng.random_range(-1.0..1.0));
    let bias = (0..cfg.c_out).map(|_| rng.random_range(-0.2..0.2)).collect();
    let rgb = FilterBank::new(w, Some(bias))?;
    let first = match method.decomp_kind() {
        Some(kind) => {
            let opts = CpOptions {
                seed: cfg.seed,
                ..CpOptions::default()
            };
            let d = decompose_bank(&rgb, kind, cfg.rank, &opts)?;
            FirstLayer::Decomposed(adapt(&d, cfg.channels, InitPolicy::RandomNormal, cfg.seed)?)
        }
        None if method == Method::Reduce => {
            let m = reduce_hidden_width(cfg.rank, cfg.c_out, cfg.channels);
            FirstLayer::Reduce(build_reduce(cfg.channels, m, rgb, ReduceInit::Random { seed: cfg.seed })?)
        }
        None => FirstLayer::Scratch(build_scratch(cfg.channels, &rgb, cfg.seed)?),
    };
    let backbone = Backbone {
        mid_channels: 2 * cfg.c_out,
        pool: (2, 2),
        classes: cfg.classes,
    };
    Model::new(first, cfg.geometry, backbone, cfg.seed)
}

fn micro_batch(cfg: &GradcheckConfig) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::derive_seed(cfg.seed, &[3]));
    let xs = (0..cfg.batch)
        .map(|_| Tensor::from_fn(&[cfg.channels, cfg.size, cfg.size], |_| rng.random_range(-1.0..1.0)))
        .collect();
    let ys = (0..cfg.batch).map(|i| i % cfg.classes).collect();
    (xs, ys)
}

/// Compares analytic gradients of one model against central differences
/// on every trainable scalar.
pub fn check_model(model: &Model, xs: &[Tensor], ys: &[usize], eps: f64, fault: GradFault) -> Result<Vec<(&'static str, usize, f64)>> {
    let analytic = forward_backward_with(model, xs, ys, fault)?.grads;
    let names: Vec<&'static str> = model.trainable_blocks().iter().map(|(n, _)| *n).collect();
    let mut probe = model.clone();
    let mut out = Vec::new();
    for (b, name) in names.into_iter().enumerate() {
        let len = analytic[b].len();
        let mut worst = 0.0f64;
        for (i, &a) in analytic[b].iter().enumerate() {
            let orig = probe.trainable_blocks()[b].1[i];
            let loss_at = |probe: &mut Model, v: f64| -> Result<f64> {
                probe.trainable_blocks_mut()[b].1[i] = v;
                Ok(forward_backward_with(probe, xs, ys, GradFault::None)?.loss)
            };
            let up = loss_at(&mut probe, orig + eps)?;
            let down = loss_at(&mut probe, orig - eps)?;
            probe.trainable_blocks_mut()[b].1[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
        out.push((name, len, worst));
    }
    Ok(out)
}

/// Runs the check on the micro model of every first-layer variant.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    gradcheck_with(cfg, GradFault::None)
}

#[doc(hidden)]
pub fn gradcheck_with(cfg: &GradcheckConfig, fault: GradFault) -> Result<GradcheckReport> {
    let (xs, ys) = micro_batch(cfg);
    let mut blocks = Vec::new();
    for method in Method::ALL {
        let model = micro_model(cfg, method)?;
        for (block, len, worst) in check_model(&model, &xs, &ys, cfg.eps, fault)? {
            blocks.push(BlockReport {
                method,
                block,
                len,
                worst,
            });
        }
    }
    Ok(GradcheckReport { tol: cfg.tol, blocks })
}
