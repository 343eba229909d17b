//! Adapting decomposed RGB filters to an arbitrary number of input channels.
//!
//! The spatial components of every decomposed filter (the CP column pairs
//! `x_r`, `y_r` or the Tucker core `V`) are copied verbatim and frozen. The
//! 3-channel spectral components are replaced by `Ĉ_in`-channel ones, which
//! are the only trainable parameters of the layer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::binio::{self, Reader, Writer};
use crate::decomp::{BankDecomp, DecompKind, FilterDecomp};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, svd, Matrix};
use crate::tensor::Tensor;

const ADP_MAGIC: &[u8; 4] = b"ADP1";

/// Pretrained first-layer weights `C_out × C_in × k1 × k2` with optional bias.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    weights: Tensor,
    bias: Option<Vec<f64>>,
}

impl FilterBank {
    pub fn new(weights: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weights.order() != 4 {
            return Err(Error::shape(format!(
                "filter bank must be order 4, got shape {:?}",
                weights.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weights.shape()[0] {
                return Err(Error::shape(format!(
                    "bias has {} entries for {} filters",
                    b.len(),
                    weights.shape()[0]
                )));
            }
        }
        Ok(FilterBank { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn c_out(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    /// Loads an order-4 TNS1 weight file and an optional order-1 TNS1 bias.
    pub fn load(weights: &Path, bias: Option<&Path>) -> Result<Self> {
        let w = Tensor::load(weights)?;
        let b = bias.map(Tensor::load).transpose()?.map(Tensor::into_data);
        FilterBank::new(w, b)
    }
}

/// How the new `Ĉ_in`-long spectral columns are derived from the originals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitPolicy {
    /// Piecewise-linear interpolation across uniformly spaced channel
    /// positions (end points aligned), scaled by `C_in / Ĉ_in`.
    #[default]
    Interp,
    /// Original values tiled cyclically, same scaling.
    Replicate,
    /// `N(0, σ²)` with `σ = ‖original column‖ / sqrt(Ĉ_in)`.
    RandomNormal,
}

impl InitPolicy {
    pub fn tag(self) -> u32 {
        match self {
            InitPolicy::Interp => 0,
            InitPolicy::Replicate => 1,
            InitPolicy::RandomNormal => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(InitPolicy::Interp),
            1 => Ok(InitPolicy::Replicate),
            2 => Ok(InitPolicy::RandomNormal),
            t => Err(Error::Format(format!("unknown init policy tag {t}"))),
        }
    }
}

impl std::str::FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "interp" => Ok(InitPolicy::Interp),
            "replicate" => Ok(InitPolicy::Replicate),
            "random" | "randomnormal" | "random-normal" => Ok(InitPolicy::RandomNormal),
            other => Err(Error::Usage(format!("unknown init policy `{other}`"))),
        }
    }
}

/// Stretches one spectral column to `channels` entries.
pub fn adapt_column(column: &[f64], channels: usize, policy: InitPolicy, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = column.len();
    let scale = n as f64 / channels as f64;
    match policy {
        InitPolicy::Interp => (0..channels)
            .map(|j| {
                let pos = if channels == 1 {
                    (n - 1) as f64 / 2.0
                } else {
                    (j * (n - 1)) as f64 / (channels - 1) as f64
                };
                let lo = (pos.floor() as usize).min(n - 1);
                let frac = pos - lo as f64;
                let v = if frac == 0.0 || lo + 1 == n {
                    column[lo]
                } else {
                    column[lo] + frac * (column[lo + 1] - column[lo])
                };
                v * scale
            })
            .collect(),
        InitPolicy::Replicate => (0..channels).map(|j| column[j % n] * scale).collect(),
        InitPolicy::RandomNormal => {
            let sigma = norm2(column) / (channels as f64).sqrt();
            (0..channels)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    sigma * z
                })
                .collect()
        }
    }
}

/// Frozen spatial parameters of an adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialParts {
    Cp {
        /// `C_out × k1 × R`.
        horizontal: Tensor,
        /// `C_out × k2 × R`.
        vertical: Tensor,
    },
    Tucker {
        /// `C_out × R × k1 × k2`.
        core: Tensor,
    },
}

impl SpatialParts {
    pub fn kind(&self) -> DecompKind {
        match self {
            SpatialParts::Cp { .. } => DecompKind::Cp,
            SpatialParts::Tucker { .. } => DecompKind::Tucker,
        }
    }

    /// Flat views of every frozen block, for bit-identity checks.
    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        match self {
            SpatialParts::Cp { horizontal, vertical } => {
                vec![("cp.horizontal", horizontal.data()), ("cp.vertical", vertical.data())]
            }
            SpatialParts::Tucker { core } => vec![("tucker.core", core.data())],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    c_out: usize,
    channels: usize,
    k1: usize,
    k2: usize,
    rank: usize,
    spatial: SpatialParts,
    /// `C_out × Ĉ_in × R`; slice `o` is the filter's spectral matrix.
    spectral: Tensor,
    bias: Option<Vec<f64>>,
    init: InitPolicy,
    seed: u64,
}

impl AdaptedLayer {
    /// Assembles a layer from explicit parts, validating every extent.
    pub fn from_parts(
        spatial: SpatialParts,
        spectral: Tensor,
        bias: Option<Vec<f64>>,
        init: InitPolicy,
        seed: u64,
    ) -> Result<Self> {
        if spectral.order() != 3 {
            return Err(Error::shape("spectral parts must be C_out×Ĉ_in×R"));
        }
        let (c_out, channels, rank) = (spectral.shape()[0], spectral.shape()[1], spectral.shape()[2]);
        let (k1, k2) = match &spatial {
            SpatialParts::Cp { horizontal, vertical } => {
                let (h, v) = (horizontal.shape(), vertical.shape());
                if h.len() != 3 || v.len() != 3 || h[0] != c_out || v[0] != c_out || h[2] != rank || v[2] != rank {
                    return Err(Error::shape(format!(
                        "CP spatial parts {h:?}/{v:?} disagree with spectral {:?}",
                        spectral.shape()
                    )));
                }
                (h[1], v[1])
            }
            SpatialParts::Tucker { core } => {
                let c = core.shape();
                if c.len() != 4 || c[0] != c_out || c[1] != rank {
                    return Err(Error::shape(format!(
                        "Tucker core {c:?} disagrees with spectral {:?}",
                        spectral.shape()
                    )));
                }
                (c[2], c[3])
            }
        };
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::shape("bias length must equal C_out"));
            }
        }
        Ok(AdaptedLayer {
            c_out,
            channels,
            k1,
            k2,
            rank,
            spatial,
            spectral,
            bias,
            init,
            seed,
        })
    }

    pub fn kind(&self) -> DecompKind {
        self.spatial.kind()
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    /// New input channel count `Ĉ_in`.
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.k1, self.k2)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn spatial(&self) -> &SpatialParts {
        &self.spatial
    }

    pub fn spectral(&self) -> &Tensor {
        &self.spectral
    }

    /// The only mutable access to layer parameters.
    pub fn spectral_mut(&mut self) -> &mut Tensor {
        &mut self.spectral
    }

    /// `Ĉ_in × R` spectral matrix of filter `o`.
    pub fn spectral_of(&self, o: usize) -> Matrix {
        Matrix::new(self.channels, self.rank, self.spectral.slice0(o).into_data()).expect("spectral slice")
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn init(&self) -> InitPolicy {
        self.init
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Tucker layers with fewer channels than rank cannot keep orthonormal
    /// spectral columns; this is allowed but reported.
    pub fn rank_exceeds_channels(&self) -> bool {
        self.kind() == DecompKind::Tucker && self.channels < self.rank
    }

    pub fn trainable_count(&self) -> usize {
        self.spectral.len()
    }

    /// Dense `Ĉ_in × k1 × k2` filter `o`.
    pub fn filter(&self, o: usize) -> Tensor {
        let (ch, r, k1, k2) = (self.channels, self.rank, self.k1, self.k2);
        let spec = &self.spectral.data()[o * ch * r..(o + 1) * ch * r];
        let mut out = Tensor::zeros(&[ch, k1, k2]);
        let dst = out.data_mut();
        match &self.spatial {
            SpatialParts::Cp { horizontal, vertical } => {
                let h = &horizontal.data()[o * k1 * r..(o + 1) * k1 * r];
                let v = &vertical.data()[o * k2 * r..(o + 1) * k2 * r];
                for c in 0..ch {
                    for i in 0..k1 {
                        for j in 0..k2 {
                            dst[(c * k1 + i) * k2 + j] = (0..r).map(|q| spec[c * r + q] * h[i * r + q] * v[j * r + q]).sum();
                        }
                    }
                }
            }
            SpatialParts::Tucker { core } => {
                let plane = k1 * k2;
                let v = &core.data()[o * r * plane..(o + 1) * r * plane];
                for c in 0..ch {
                    for p in 0..plane {
                        dst[c * plane + p] = (0..r).map(|q| spec[c * r + q] * v[q * plane + p]).sum();
                    }
                }
            }
        }
        out
    }

    /// Basis of the spatial patterns of filter `o`, one `k1·k2` vector per
    /// rank component.
    fn spatial_basis(&self, o: usize) -> Vec<Vec<f64>> {
        let (r, k1, k2) = (self.rank, self.k1, self.k2);
        match &self.spatial {
            SpatialParts::Cp { horizontal, vertical } => (0..r)
                .map(|q| {
                    let mut b = Vec::with_capacity(k1 * k2);
                    for i in 0..k1 {
                        for j in 0..k2 {
                            b.push(horizontal.get(&[o, i, q]) * vertical.get(&[o, j, q]));
                        }
                    }
                    b
                })
                .collect(),
            SpatialParts::Tucker { core } => {
                let plane = k1 * k2;
                (0..r)
                    .map(|q| core.data()[(o * r + q) * plane..(o * r + q + 1) * plane].to_vec())
                    .collect()
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.magic(ADP_MAGIC);
        write_layer_body(&mut w, self);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "ADP1");
        r.magic(ADP_MAGIC)?;
        let layer = read_layer_body(&mut r)?;
        r.finish()?;
        Ok(layer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }
}

/// ADP1 body: u32 kind tag, u32 C_out, Ĉ_in, k1, k2, R; frozen spatial
/// blob (CP: horizontal C_out×k1×R then vertical C_out×k2×R; Tucker: core
/// C_out×R×k1×k2); trainable spectral blob C_out×Ĉ_in×R; u32 bias flag and
/// C_out biases; u32 init tag; u64 seed. All values little-endian, f64
/// data row-major.
pub(crate) fn write_layer_body(w: &mut Writer, l: &AdaptedLayer) {
    w.u32(l.kind().tag());
    for n in [l.c_out, l.channels, l.k1, l.k2, l.rank] {
        w.usize(n);
    }
    match &l.spatial {
        SpatialParts::Cp { horizontal, vertical } => {
            w.f64s(horizontal.data());
            w.f64s(vertical.data());
        }
        SpatialParts::Tucker { core } => w.f64s(core.data()),
    }
    w.f64s(l.spectral.data());
    match &l.bias {
        Some(b) => {
            w.u32(1);
            w.f64s(b);
        }
        None => w.u32(0),
    }
    w.u32(l.init.tag());
    w.u64(l.seed);
}

pub(crate) fn read_layer_body(r: &mut Reader<'_>) -> Result<AdaptedLayer> {
    let kind = DecompKind::from_tag(r.u32()?)?;
    let (c_out, ch, k1, k2, rank) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
    if [c_out, ch, k1, k2, rank].contains(&0) {
        return Err(Error::Format("ADP1 dimensions must be >= 1".into()));
    }
    let spatial = match kind {
        DecompKind::Cp => SpatialParts::Cp {
            horizontal: Tensor::new(vec![c_out, k1, rank], r.f64s(c_out * k1 * rank)?)?,
            vertical: Tensor::new(vec![c_out, k2, rank], r.f64s(c_out * k2 * rank)?)?,
        },
        DecompKind::Tucker => SpatialParts::Tucker {
            core: Tensor::new(vec![c_out, rank, k1, k2], r.f64s(c_out * rank * k1 * k2)?)?,
        },
    };
    let spectral = Tensor::new(vec![c_out, ch, rank], r.f64s(c_out * ch * rank)?)?;
    let bias = match r.u32()? {
        0 => None,
        _ => Some(r.f64s(c_out)?),
    };
    let init = InitPolicy::from_tag(r.u32()?)?;
    let seed = r.u64()?;
    AdaptedLayer::from_parts(spatial, spectral, bias, init, seed)
}

/// Replaces the spectral parts of every decomposed filter with
/// `channels`-long ones initialized per `init`; spatial parts are copied
/// verbatim and the source bias (if any) is kept frozen.
pub fn adapt(decomps: &BankDecomp, channels: usize, init: InitPolicy, seed: u64) -> Result<AdaptedLayer> {
    if channels == 0 {
        return Err(Error::Usage("adapted channel count must be >= 1".into()));
    }
    if decomps.c_in != 3 {
        return Err(Error::shape(format!(
            "adaptation expects a decomposed 3-channel (RGB) bank, got C_in = {}",
            decomps.c_in
        )));
    }
    let (c_out, k1, k2, rank) = (decomps.c_out(), decomps.k1, decomps.k2, decomps.rank);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spectral = Tensor::zeros(&[c_out, channels, rank]);
    let mut horizontal = Tensor::zeros(&[c_out, k1, rank]);
    let mut vertical = Tensor::zeros(&[c_out, k2, rank]);
    let mut core = Tensor::zeros(&[c_out, rank, k1, k2]);

    for (o, f) in decomps.filters.iter().enumerate() {
        let src = f.spectral();
        for q in 0..rank {
            let col = adapt_column(&src.column(q), channels, init, &mut rng);
            for (c, v) in col.into_iter().enumerate() {
                spectral.set(&[o, c, q], v);
            }
        }
        match f {
            FilterDecomp::Cp(d) => {
                let hd = horizontal.data_mut();
                hd[o * k1 * rank..(o + 1) * k1 * rank].copy_from_slice(d.horizontal.data());
                let vd = vertical.data_mut();
                vd[o * k2 * rank..(o + 1) * k2 * rank].copy_from_slice(d.vertical.data());
            }
            FilterDecomp::Tucker(d) => {
                let n = rank * k1 * k2;
                core.data_mut()[o * n..(o + 1) * n].copy_from_slice(d.core.data());
            }
        }
    }
    let spatial = match decomps.kind {
        DecompKind::Cp => SpatialParts::Cp { horizontal, vertical },
        DecompKind::Tucker => SpatialParts::Tucker { core },
    };
    AdaptedLayer::from_parts(spatial, spectral, decomps.bias.clone(), init, seed)
}

/// Dense `C_out × Ĉ_in × k1 × k2` bank realized by the adapted layer.
pub fn decompress(layer: &AdaptedLayer) -> Tensor {
    let parts: Vec<Tensor> = (0..layer.c_out).map(|o| layer.filter(o)).collect();
    Tensor::stack(&parts).expect("uniform filter shapes")
}

/// Worst normalized residual of projecting each channel slice of filter
/// `o` onto the span of that filter's frozen spatial patterns (`x_r·y_rᵀ`
/// for CP, core slices `V[r]` for Tucker). Zero-norm slices count as 0.
pub fn spatial_span_residual(layer: &AdaptedLayer, o: usize) -> Result<f64> {
    if o >= layer.c_out {
        return Err(Error::Index {
            index: o,
            order: layer.c_out,
        });
    }
    slice_span_residual(&layer.filter(o), layer, o)
}

/// Same measure as [`spatial_span_residual`], but for filter `o` of an
/// externally supplied dense bank (`C_out × Ĉ_in × k1 × k2`), e.g. a bank
/// captured before the layer's spatial parts were modified.
pub fn bank_span_residual(bank: &Tensor, layer: &AdaptedLayer, o: usize) -> Result<f64> {
    let expect = [layer.c_out, layer.channels, layer.k1, layer.k2];
    if bank.shape() != expect {
        return Err(Error::shape(format!("bank {:?} does not match layer {expect:?}", bank.shape())));
    }
    if o >= layer.c_out {
        return Err(Error::Index {
            index: o,
            order: layer.c_out,
        });
    }
    slice_span_residual(&bank.slice0(o), layer, o)
}

fn slice_span_residual(filter: &Tensor, layer: &AdaptedLayer, o: usize) -> Result<f64> {
    let plane = layer.k1 * layer.k2;
    let d = svd(&Matrix::from_columns(&layer.spatial_basis(o))?)?;
    let cutoff = 1e-12 * d.s.first().copied().unwrap_or(0.0);
    let keep: Vec<Vec<f64>> = (0..d.s.len())
        .filter(|&q| d.s[q] > cutoff && d.s[q] > 0.0)
        .map(|q| d.u.column(q))
        .collect();

    let mut worst = 0.0f64;
    for c in 0..layer.channels {
        let slice = &filter.data()[c * plane..(c + 1) * plane];
        let norm = norm2(slice);
        if norm == 0.0 {
            continue;
        }
        let mut resid = slice.to_vec();
        // Two Gram-Schmidt passes keep the projection accurate to rounding.
        for _ in 0..2 {
            for u in &keep {
                let coef = dot(&resid, u);
                for (x, ui) in resid.iter_mut().zip(u) {
                    *x -= coef * ui;
                }
            }
        }
        worst = worst.max(norm2(&resid) / norm);
    }
    Ok(worst)
}

/// Maximum of [`spatial_span_residual`] over all filters.
pub fn max_span_residual(layer: &AdaptedLayer) -> Result<f64> {
    (0..layer.c_out).try_fold(0.0f64, |m, o| Ok(m.max(spatial_span_residual(layer, o)?)))
}

#[doc(hidden)]
pub fn perturb_spatial_for_tests(layer: &mut AdaptedLayer, delta: f64) {
    let t = match &mut layer.spatial {
        SpatialParts::Cp { horizontal, .. } => horizontal,
        SpatialParts::Tucker { core } => core,
    };
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += delta * ((i % 7) as f64 - 3.0);
    }
}
