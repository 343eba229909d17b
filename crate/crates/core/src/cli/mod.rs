//! Command-line workflows: decompose → adapt → train → export, plus rank
//! sweeps, gradient checks and data helpers.
//!
//! Exit codes: 0 success, 1 I/O or malformed file, 2 usage, 3 numerical
//! failure. `HYPERADAPT_THREADS` caps the worker pool.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::data::{self, HyperCube, NearRange, SpectralTask, TileSet};
use crate::decomp::{decompose_bank, BankDecomp, CpOptions, DecompKind};
use crate::error::{Error, Result};
use crate::filteradapt::{adapt, decompress, AdaptedLayer, FilterBank, InitPolicy};
use crate::nn::gradcheck::{gradcheck_with, GradcheckConfig};
use crate::nn::model::GradFault;
use crate::nn::{
    build_reduce, build_scratch, count_trainable, log_csv, reduce_hidden_width, train, Backbone, EpochLog,
    FirstLayer, Method, Model, ReduceInit, Samples,
};
use crate::tensor::Tensor;
use crate::{binio, derive_seed};

pub use config::{BankSource, DataSource, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "hyperadapt", version, about = "Adapt pretrained RGB first layers to hyperspectral inputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose every filter of an RGB bank and report reconstruction errors.
    Decompose(DecomposeArgs),
    /// Replace the spectral parts of a decomposed bank for a new channel count.
    Adapt(AdaptArgs),
    /// Train a model described by a config file.
    Train(TrainArgs),
    /// Train over several ranks and seeds; report mean accuracy ± SEM.
    RankSweep(SweepArgs),
    /// Write each first-layer filter as a channel-averaged PGM image.
    ExportFilters(ExportArgs),
    /// Compare analytic and finite-difference gradients on micro models.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic RGB filter bank (TNS1).
    SynthBank(SynthBankArgs),
    /// Write the synthetic spectral classification task (TLS1).
    SynthTask(SynthTaskArgs),
    /// Tile a labelled cube, split 50/50 and normalize (TLS1).
    Tile(TileArgs),
    /// Channel drop, centre crop, resize and pad a near-range cube.
    Nearrange(NearrangeArgs),
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    /// TNS1 weights, `C_out × 3 × k1 × k2`.
    #[arg(long)]
    pub bank: PathBuf,
    /// Optional TNS1 bias, length `C_out`.
    #[arg(long)]
    pub bias: Option<PathBuf>,
    #[arg(long, default_value = "cp")]
    pub kind: DecompKind,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub rank: u64,
    #[arg(long, default_value_t = 4)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// DCP1 file from `decompose`.
    #[arg(long)]
    pub decomp: PathBuf,
    #[arg(long)]
    pub channels: usize,
    #[arg(long, default_value = "interp")]
    pub init: InitPolicy,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated ranks, e.g. `1,2,3`.
    #[arg(long)]
    pub ranks: String,
    /// Seeds per rank (config seed, +1, …).
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// MDL1 checkpoint or ADP1 layer.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Nearest-neighbour upscaling factor.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_sign_flip: bool,
}

#[derive(Debug, Args)]
pub struct SynthBankArgs {
    #[arg(long, default_value_t = 8)]
    pub c_out: usize,
    #[arg(long, default_value_t = 7)]
    pub kernel: usize,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bias_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthTaskArgs {
    #[arg(long, default_value_t = 64)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 200)]
    pub test: usize,
    #[arg(long, default_value_t = 12)]
    pub size: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_train: PathBuf,
    #[arg(long)]
    pub out_test: PathBuf,
}

#[derive(Debug, Args)]
pub struct TileArgs {
    /// HSC1 cube with a label plane.
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub tile: usize,
    #[arg(long, default_value_t = 3)]
    pub stride: usize,
    #[arg(long, default_value_t = 32)]
    pub resize: usize,
    #[arg(long, default_value_t = 0.5)]
    pub train_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_train: PathBuf,
    #[arg(long)]
    pub out_test: PathBuf,
}

#[derive(Debug, Args)]
pub struct NearrangeArgs {
    #[arg(long)]
    pub cube: PathBuf,
    #[arg(long)]
    pub crop: usize,
    #[arg(long)]
    pub resize: usize,
    /// Channels dropped at the start,end of the spectrum, e.g. `5,5`.
    #[arg(long, default_value = "0,0")]
    pub drop: String,
    #[arg(long, default_value_t = 0)]
    pub pad: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("HYPERADAPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Usage(format!("HYPERADAPT_THREADS must be a positive integer, got `{v}`")))?;
    // Fails only if a pool already exists (repeated in-process calls).
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Decompose(a) => cmd_decompose(&a, out),
        Command::Adapt(a) => cmd_adapt(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::RankSweep(a) => cmd_rank_sweep(&a, out),
        Command::ExportFilters(a) => cmd_export_filters(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::SynthBank(a) => cmd_synth_bank(&a, out),
        Command::SynthTask(a) => cmd_synth_task(&a, out),
        Command::Tile(a) => cmd_tile(&a, out),
        Command::Nearrange(a) => cmd_nearrange(&a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

pub fn cmd_decompose(a: &DecomposeArgs, out: &mut dyn Write) -> Result<()> {
    let bank = FilterBank::load(&a.bank, a.bias.as_deref())?;
    let opts = CpOptions {
        restarts: a.restarts,
        seed: a.seed,
        ..CpOptions::default()
    };
    let d = decompose_bank(&bank, a.kind, a.rank as usize, &opts)?;
    d.save(&a.out)?;
    emit(out, &decompose_report(&d))
}

/// Per-filter relative errors as CSV, followed by the mean.
pub fn decompose_report(d: &BankDecomp) -> String {
    let mut s = String::from("filter,rel_error,degenerate\n");
    for (o, (e, g)) in d.errors.iter().zip(&d.degenerate).enumerate() {
        s.push_str(&format!("{o},{e:e},{g}\n"));
    }
    s.push_str(&format!("mean,{:e},\n", d.mean_error()));
    s
}

pub fn cmd_adapt(a: &AdaptArgs, out: &mut dyn Write) -> Result<()> {
    let d = BankDecomp::load(&a.decomp)?;
    let layer = adapt(&d, a.channels, a.init, a.seed)?;
    layer.save(&a.out)?;
    let mut s = format!(
        "kind={} c_out={} channels={} rank={} trainable={}\n",
        layer.kind().name(),
        layer.c_out(),
        layer.channels(),
        layer.rank(),
        layer.trainable_count()
    );
    if layer.rank_exceeds_channels() {
        s.push_str("warning: rank exceeds the channel count; spectral parts are over-parameterized\n");
    }
    emit(out, &s)
}

pub fn load_bank(src: &BankSource) -> Result<FilterBank> {
    match src {
        BankSource::File { weights, bias } => FilterBank::load(weights, bias.as_deref()),
        BankSource::Synthetic {
            c_out,
            kernel,
            noise,
            seed,
        } => data::synth_filter_bank(*c_out, *kernel, *noise, *seed),
    }
}

/// Loads train and test tiles, normalizing both with training statistics.
pub fn load_data(src: &DataSource) -> Result<(TileSet, TileSet)> {
    let (mut train, mut test) = match src {
        DataSource::Files { train, test } => (TileSet::load(train)?, TileSet::load(test)?),
        DataSource::Synthetic(task) => data::synth_spectral_task(task)?,
    };
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let stats = match &train.stats {
        Some(s) => s.clone(),
        None => data::normalize(&mut train)?,
    };
    if test.stats.is_none() {
        data::apply_stats(&mut test, &stats)?;
    }
    Ok((train, test))
}

/// Builds the model of `cfg` for inputs of `channels` channels.
pub fn build_model(cfg: &RunConfig, channels: usize, classes: usize) -> Result<Model> {
    let seed = cfg.train.seed;
    let first = match cfg.method.decomp_kind() {
        Some(kind) => {
            let layer = match &cfg.layer {
                Some(p) => {
                    let l = AdaptedLayer::load(p)?;
                    if l.kind() != kind || l.channels() != channels {
                        return Err(Error::Usage(format!(
                            "layer {} is {} with {} channels; config wants {} with {channels}",
                            p.display(),
                            l.kind().name(),
                            l.channels(),
                            kind.name()
                        )));
                    }
                    l
                }
                None => {
                    let opts = CpOptions {
                        restarts: cfg.restarts,
                        seed: derive_seed(seed, &[10]),
                        ..CpOptions::default()
                    };
                    let d = decompose_bank(&load_bank(&cfg.bank)?, kind, cfg.rank, &opts)?;
                    adapt(&d, channels, cfg.init, derive_seed(seed, &[11]))?
                }
            };
            FirstLayer::Decomposed(layer)
        }
        None => {
            let bank = load_bank(&cfg.bank)?;
            if cfg.method == Method::Reduce {
                let m = cfg
                    .hidden
                    .unwrap_or_else(|| reduce_hidden_width(cfg.rank, bank.c_out(), channels));
                let init = ReduceInit::Random {
                    seed: derive_seed(seed, &[11]),
                };
                FirstLayer::Reduce(build_reduce(channels, m, bank, init)?)
            } else {
                FirstLayer::Scratch(build_scratch(channels, &bank, derive_seed(seed, &[11]))?)
            }
        }
    };
    let geometry = cfg.geometry(first.kernel());
    let backbone = Backbone {
        mid_channels: cfg.mid_channels.unwrap_or(2 * first.out_channels()),
        pool: cfg.pool,
        classes,
    };
    Model::new(first, geometry, backbone, derive_seed(seed, &[12]))
}

/// Builds and trains the model of `cfg` on already normalized tiles.
pub fn train_model(
    cfg: &RunConfig,
    train_set: &TileSet,
    test_set: &TileSet,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, Vec<EpochLog>)> {
    let channels = train_set
        .tile_shape()
        .ok_or_else(|| Error::Data("training set is empty".into()))?[0];
    let classes = train_set.num_classes().max(test_set.num_classes()).max(2);
    let mut model = build_model(cfg, channels, classes)?;
    let tc = crate::nn::TrainConfig {
        seed: derive_seed(cfg.train.seed, &[13]),
        ..cfg.train
    };
    let logs = train(
        &mut model,
        Samples {
            inputs: &train_set.tiles,
            labels: &train_set.labels,
        },
        Samples {
            inputs: &test_set.tiles,
            labels: &test_set.labels,
        },
        &tc,
        on_epoch,
    )?;
    Ok((model, logs))
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let (train_set, test_set) = load_data(&cfg.data)?;
    let (model, logs) = train_model(&cfg, &train_set, &test_set, |r| {
        eprintln!(
            "epoch {:>3}  lr {:.5}  train {:.4}  test {:.4}  acc {:.3}",
            r.epoch, r.lr, r.train_loss, r.test_loss, r.test_accuracy
        )
    })?;
    model.save(&cfg.out)?;
    binio::write_atomic(&cfg.log, log_csv(&logs).as_bytes())?;
    let last = logs.last().expect("at least one epoch");
    emit(
        out,
        &format!(
            "method={} trainable={} final_test_accuracy={} final_test_loss={}\n",
            model.method().name(),
            count_trainable(&model),
            last.test_accuracy,
            last.test_loss
        ),
    )
}

/// Parses a comma-separated rank list; ranks must be positive and unique.
pub fn parse_ranks(s: &str) -> Result<Vec<usize>> {
    let mut ranks = Vec::new();
    for part in s.split(',') {
        let r: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad rank `{}`", part.trim())))?;
        if r == 0 {
            return Err(Error::Usage("ranks must be >= 1".into()));
        }
        if ranks.contains(&r) {
            return Err(Error::Usage(format!("duplicate rank {r}")));
        }
        ranks.push(r);
    }
    Ok(ranks)
}

/// Mean and unbiased standard error of the mean (0 for a single value).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rank: usize,
    pub params: usize,
    pub accuracy_mean: f64,
    pub accuracy_sem: f64,
    pub runs: usize,
}

/// Trains every (rank, seed) pair concurrently; rows come back in rank
/// order.
pub fn rank_sweep(cfg: &RunConfig, ranks: &[usize], seeds: usize) -> Result<Vec<SweepRow>> {
    if cfg.method == Method::Scratch {
        return Err(Error::Usage("a scratch layer has no rank to sweep".into()));
    }
    if seeds == 0 || ranks.is_empty() {
        return Err(Error::Usage("need at least one rank and one seed".into()));
    }
    let (train_set, test_set) = load_data(&cfg.data)?;
    let jobs: Vec<(usize, u64)> = ranks
        .iter()
        .flat_map(|&r| (0..seeds as u64).map(move |s| (r, s)))
        .collect();
    let results = jobs
        .par_iter()
        .map(|&(rank, s)| {
            let mut c = cfg.clone();
            c.rank = rank;
            c.train.seed = cfg.train.seed.wrapping_add(s);
            let (model, logs) = train_model(&c, &train_set, &test_set, |_| {})?;
            Ok((count_trainable(&model), logs.last().expect("epochs >= 1").test_accuracy))
        })
        .collect::<Result<Vec<(usize, f64)>>>()?;
    Ok(ranks
        .iter()
        .zip(results.chunks(seeds))
        .map(|(&rank, runs)| {
            let acc: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let (accuracy_mean, accuracy_sem) = mean_sem(&acc);
            SweepRow {
                rank,
                params: runs[0].0,
                accuracy_mean,
                accuracy_sem,
                runs: runs.len(),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("rank,params,accuracy_mean,accuracy_sem,runs\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.rank, r.params, r.accuracy_mean, r.accuracy_sem, r.runs
        ));
    }
    s
}

pub fn cmd_rank_sweep(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let ranks = parse_ranks(&a.ranks)?;
    let rows = rank_sweep(&cfg, &ranks, a.seeds)?;
    let csv = sweep_csv(&rows);
    binio::write_atomic(&a.out, csv.as_bytes())?;
    emit(out, &csv)
}

/// Dense `C_out × Ĉ_in × k1 × k2` filters of a first layer.
pub fn first_layer_filters(first: &FirstLayer) -> Result<Tensor> {
    match first {
        FirstLayer::Decomposed(l) => Ok(decompress(l)),
        FirstLayer::Scratch(s) => Ok(s.weight.clone()),
        FirstLayer::Reduce(_) => Err(Error::UnsupportedKind(
            "a reduce stack has no single dense filter bank to export".into(),
        )),
    }
}

/// Channel-averaged `k1 × k2` image of every filter.
pub fn pooled_filters(bank: &Tensor) -> Vec<Tensor> {
    let s = bank.shape();
    (0..s[0])
        .map(|o| {
            Tensor::from_fn(&[s[2], s[3]], |i| {
                (0..s[1]).map(|c| bank.get(&[o, c, i[0], i[1]])).sum::<f64>() / s[1] as f64
            })
        })
        .collect()
}

/// Maps values symmetrically around zero onto `[0, 255]`: the largest
/// magnitude hits 0 or 255 and zero lands on mid-gray (128).
pub fn to_gray(img: &Tensor) -> Vec<u8> {
    let m = img.max_abs();
    img.data()
        .iter()
        .map(|v| {
            let t = if m > 0.0 { v / m } else { 0.0 };
            (127.5 + 127.5 * t).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

pub fn pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut b = format!("P5\n{width} {height}\n255\n").into_bytes();
    b.extend_from_slice(pixels);
    b
}

fn upscale(pixels: &[u8], w: usize, h: usize, f: usize) -> Vec<u8> {
    (0..h * f)
        .flat_map(|y| (0..w * f).map(move |x| pixels[(y / f) * w + x / f]))
        .collect()
}

pub fn cmd_export_filters(a: &ExportArgs, out: &mut dyn Write) -> Result<()> {
    let bytes = binio::read_file(&a.model)?;
    let first = match bytes.get(..4) {
        Some(b"MDL1") => Model::from_bytes(&bytes)?.first().clone(),
        Some(b"ADP1") => FirstLayer::Decomposed(AdaptedLayer::from_bytes(&bytes)?),
        _ => {
            return Err(Error::Format(format!(
                "{} is neither an MDL1 checkpoint nor an ADP1 layer",
                a.model.display()
            )))
        }
    };
    let images = pooled_filters(&first_layer_filters(&first)?);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let f = a.scale as usize;
    let (kh, kw) = (images[0].shape()[0], images[0].shape()[1]);
    for (o, img) in images.iter().enumerate() {
        let px = upscale(&to_gray(img), kw, kh, f);
        binio::write_atomic(&a.out_dir.join(format!("filter_{o:03}.pgm")), &pgm(kw * f, kh * f, &px))?;
    }
    // Composite: filters on a near-square grid, one mid-gray pixel apart.
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let rows = images.len().div_ceil(cols);
    let (cw, ch) = (cols * (kw + 1) - 1, rows * (kh + 1) - 1);
    let mut grid = vec![128u8; cw * ch];
    for (o, img) in images.iter().enumerate() {
        let (y0, x0) = ((o / cols) * (kh + 1), (o % cols) * (kw + 1));
        for (k, p) in to_gray(img).into_iter().enumerate() {
            grid[(y0 + k / kw) * cw + x0 + k % kw] = p;
        }
    }
    let composite = pgm(cw * f, ch * f, &upscale(&grid, cw, ch, f));
    binio::write_atomic(&a.out_dir.join("composite.pgm"), &composite)?;
    emit(out, &format!("wrote {} filter images and composite.pgm\n", images.len()))
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => config::parse_gradcheck(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => GradcheckConfig::default(),
    };
    let fault = if a.inject_sign_flip {
        GradFault::FlipFirstLayer
    } else {
        GradFault::None
    };
    let report = gradcheck_with(&cfg, fault)?;
    emit(out, &report.to_string())?;
    if report.passed() {
        emit(out, &format!("PASS worst={:.3e} tol={:.1e}\n", report.worst(), cfg.tol))
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: worst relative error {:.3e} exceeds {:.1e}",
            report.worst(),
            cfg.tol
        )))
    }
}

pub fn cmd_synth_bank(a: &SynthBankArgs, out: &mut dyn Write) -> Result<()> {
    let bank = data::synth_filter_bank(a.c_out, a.kernel, a.noise, a.seed)?;
    bank.weights().save(&a.out)?;
    if let (Some(p), Some(b)) = (&a.bias_out, bank.bias()) {
        Tensor::new(vec![b.len()], b.to_vec())?.save(p)?;
    }
    emit(out, &format!("wrote {}x3x{}x{} bank\n", a.c_out, a.kernel, a.kernel))
}

pub fn cmd_synth_task(a: &SynthTaskArgs, out: &mut dyn Write) -> Result<()> {
    let task = SpectralTask {
        channels: a.channels,
        classes: a.classes,
        train: a.train,
        test: a.test,
        size: a.size,
        noise: a.noise,
        seed: a.seed,
        signatures: None,
    };
    let (train, test) = data::synth_spectral_task(&task)?;
    train.save(&a.out_train)?;
    test.save(&a.out_test)?;
    emit(out, &format!("wrote {} train and {} test tiles\n", train.len(), test.len()))
}

pub fn cmd_tile(a: &TileArgs, out: &mut dyn Write) -> Result<()> {
    let cube = HyperCube::load(&a.cube)?;
    let all = data::tile_remote_sensing(&cube, a.tile, a.stride, a.resize)?;
    let (mut train, mut test) = data::split_tiles(&all, a.train_fraction, a.seed)?;
    if !train.is_empty() {
        let stats = data::normalize(&mut train)?;
        data::apply_stats(&mut test, &stats)?;
    }
    train.save(&a.out_train)?;
    test.save(&a.out_test)?;
    emit(
        out,
        &format!("{} labelled tiles: {} train, {} test\n", all.len(), train.len(), test.len()),
    )
}

pub fn cmd_nearrange(a: &NearrangeArgs, out: &mut dyn Write) -> Result<()> {
    let (lo, hi) = a
        .drop
        .split_once(',')
        .and_then(|(l, h)| Some((l.trim().parse().ok()?, h.trim().parse().ok()?)))
        .ok_or_else(|| Error::Usage(format!("--drop expects `lo,hi`, got `{}`", a.drop)))?;
    let cube = HyperCube::load(&a.cube)?;
    let opts = NearRange {
        crop: a.crop,
        resize_to: a.resize,
        drop: (lo, hi),
        pad: a.pad,
    };
    let res = data::preprocess_nearrange(&cube, &opts)?;
    res.save(&a.out)?;
    emit(
        out,
        &format!("{}x{}x{} cube written\n", res.channels(), res.height(), res.width()),
    )
}
