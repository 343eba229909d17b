use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hyperadapt::decomp::BankDecomp;
use hyperadapt::filteradapt::{adapt, decompress, AdaptedLayer, InitPolicy};
use hyperadapt::nn::{Method, Model};
use hyperadapt::tensor::Tensor;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hyperadapt"));
    c.env_remove("HYPERADAPT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn synth_bank(dir: &Path, c_out: &str, kernel: &str) -> String {
    let w = p(dir, "bank.tns");
    let o = run(&["synth-bank", "--c-out", c_out, "--kernel", kernel, "--seed", "3", "--out", &w]);
    assert!(o.status.success(), "{o:?}");
    w
}

fn mean_error(report: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with("mean,")).expect("mean line");
    line.split(',').nth(1).unwrap().parse().unwrap()
}

#[test]
fn decompose_reports_exact_recovery() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth_bank(dir.path(), "10", "7");
    let out = p(dir.path(), "d.dcp");
    let o = run(&["decompose", "--bank", &w, "--kind", "cp", "--rank", "1", "--out", &out]);
    assert!(o.status.success());
    let report = stdout(&o);
    assert_eq!(report.lines().count(), 12, "header, 10 filters, mean");
    assert!(mean_error(&report) <= 1e-8, "{report}");
    let o = run(&["decompose", "--bank", &w, "--kind", "tucker", "--rank", "3", "--out", &out]);
    assert!(o.status.success());
    assert!(mean_error(&stdout(&o)) <= 1e-10);
    assert_eq!(BankDecomp::load(Path::new(&out)).unwrap().rank, 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth_bank(dir.path(), "2", "3");
    let out = p(dir.path(), "d.dcp");
    let o = run(&["decompose", "--bank", &w, "--rank", "0", "--out", &out]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["decompose", "--bank", &p(dir.path(), "missing.tns"), "--rank", "1", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["adapt", "--decomp", &p(dir.path(), "missing.dcp"), "--channels", "8", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    // A tensor file is not a decomposition.
    let o = run(&["adapt", "--decomp", &w, "--channels", "8", "--out", &out]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(2));
    let o = bin()
        .env("HYPERADAPT_THREADS", "many")
        .args(["gradcheck"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn adapt_identity_and_counting() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth_bank(dir.path(), "6", "5");
    for kind in ["cp", "tucker"] {
        let d = p(dir.path(), "d.dcp");
        assert!(run(&["decompose", "--bank", &w, "--kind", kind, "--rank", "2", "--out", &d]).status.success());
        let l3 = p(dir.path(), "l3.adp");
        assert!(run(&["adapt", "--decomp", &d, "--channels", "3", "--init", "interp", "--out", &l3])
            .status
            .success());
        let reference = BankDecomp::load(Path::new(&d)).unwrap().reconstruct();
        let layer = AdaptedLayer::load(Path::new(&l3)).unwrap();
        assert!(decompress(&layer).max_abs_diff(&reference).unwrap() <= 1e-12);

        let l145 = p(dir.path(), "l145.adp");
        let o = run(&["adapt", "--decomp", &d, "--channels", "145", "--out", &l145]);
        assert!(stdout(&o).contains(&format!("trainable={}", 6 * 2 * 145)), "{}", stdout(&o));
        assert_eq!(AdaptedLayer::load(Path::new(&l145)).unwrap().trainable_count(), 6 * 2 * 145);
    }
}

fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    let text = format!(
        "# tiny run\nmethod = cp\nrank = 2\nepochs = 3\nbatch = 16\nbank.c_out = 4\nbank.kernel = 3\n\
         task.channels = 8\ntask.classes = 3\ntask.train = 24\ntask.test = 12\ntask.size = 6\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn train_is_deterministic_and_logs_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "out = a.mdl\nlog = a.csv\n");
    let o = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(dir.path().join("a.csv")).unwrap();
    let o = bin()
        .env("HYPERADAPT_THREADS", "1")
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read(dir.path().join("a.csv")).unwrap(), first);

    let csv = String::from_utf8(first).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_loss,test_loss,test_accuracy"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 3);
    for (e, r) in rows.iter().enumerate() {
        assert_eq!(r.len(), 5);
        assert_eq!(r[0], e as f64);
        assert!((r[1] - 0.01 * 0.95f64.powi(e as i32)).abs() <= 1e-15);
        assert!(r[2].is_finite() && r[3].is_finite() && (0.0..=1.0).contains(&r[4]));
    }
    let model = Model::load(&dir.path().join("a.mdl")).unwrap();
    assert_eq!(model.method(), Method::Cp);

    let other = bin().args(["train", "--seed", "9", "--config"]).arg(&cfg).output().unwrap();
    assert!(other.status.success());
    assert_ne!(std::fs::read(dir.path().join("a.csv")).unwrap(), csv.as_bytes());
}

#[test]
fn constant_lr_with_unit_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.cfg", "gamma = 1.0\n");
    assert!(bin().args(["train", "--config"]).arg(&cfg).status().unwrap().success());
    let csv = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lrs: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(lrs, vec!["0.01"; 3]);
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    for extra in ["epochs = 1\n", "gamma = 0\n", "colour = red\n"] {
        let cfg = write_config(dir.path(), "bad.cfg", extra);
        let o = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{extra}");
    }
    let o = run(&["train", "--config", &p(dir.path(), "absent.cfg")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn every_method_trains_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    for m in ["reduce", "scratch", "tucker"] {
        let cfg = write_config(dir.path(), "m.cfg", "");
        let text = std::fs::read_to_string(&cfg).unwrap().replace("method = cp", &format!("method = {m}"));
        std::fs::write(&cfg, text).unwrap();
        let o = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
        assert!(o.status.success(), "{m}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains(&format!("method={m}")));
    }
}

#[test]
fn rank_sweep_reports_mean_and_sem() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.cfg", "");
    let out = p(dir.path(), "sweep.csv");
    let o = bin()
        .args(["rank-sweep", "--ranks", "1,2,3", "--seeds", "2", "--out", &out, "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(csv, stdout(&o));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rank,params,accuracy_mean,accuracy_sem,runs"));
    let params: Vec<usize> = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            assert_eq!(f[4], "2");
            let sem: f64 = f[3].parse().unwrap();
            assert!(sem >= 0.0);
            f[1].parse().unwrap()
        })
        .collect();
    assert_eq!(params.len(), 3);
    assert!(params.windows(2).all(|w| w[0] < w[1]), "{params:?}");
    let dup = bin()
        .args(["rank-sweep", "--ranks", "1,2,2", "--out", &out, "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(dup.status.code(), Some(2));
}

fn read_pgm(path: &Path) -> (usize, usize, Vec<u8>) {
    let b = std::fs::read(path).unwrap();
    let header: Vec<&[u8]> = b.splitn(4, |c| c.is_ascii_whitespace()).collect();
    assert_eq!(header[0], b"P5");
    let w: usize = std::str::from_utf8(header[1]).unwrap().parse().unwrap();
    let h: usize = std::str::from_utf8(header[2]).unwrap().parse().unwrap();
    let px = b[b.len() - w * h..].to_vec();
    (w, h, px)
}

#[test]
fn export_filters_images() {
    let dir = tempfile::tempdir().unwrap();
    let w = synth_bank(dir.path(), "5", "7");
    let d = p(dir.path(), "d.dcp");
    assert!(run(&["decompose", "--bank", &w, "--kind", "cp", "--rank", "1", "--out", &d]).status.success());
    let decomp = BankDecomp::load(Path::new(&d)).unwrap();
    let mut layer = adapt(&decomp, 16, InitPolicy::Interp, 0).unwrap();
    // Filter 0 is silenced.
    for c in 0..16 {
        layer.spectral_mut().set(&[0, c, 0], 0.0);
    }
    let l = dir.path().join("l.adp");
    layer.save(&l).unwrap();
    let out_dir = dir.path().join("img");
    let o = bin()
        .args(["export-filters", "--model"])
        .arg(&l)
        .arg("--out-dir")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgms = std::fs::read_dir(&out_dir).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("filter_")).count();
    assert_eq!(pgms, 5);
    assert!(out_dir.join("composite.pgm").exists());

    let (w0, h0, zero) = read_pgm(&out_dir.join("filter_000.pgm"));
    assert_eq!((w0, h0), (7, 7));
    assert!(zero.iter().all(|p| *p == 128));

    // A rank-one filter averages to a scaled outer product x·yᵀ.
    let (_, _, px) = read_pgm(&out_dir.join("filter_001.pgm"));
    let f = layer.filter(1);
    let mean_c: f64 = (0..16).map(|c| layer.spectral().get(&[1, c, 0])).sum::<f64>() / 16.0;
    let x = Tensor::from_fn(&[7, 7], |i| f.get(&[0, i[0], i[1]]));
    let s0 = layer.spectral().get(&[1, 0, 0]);
    let expected = x.scale(mean_c / s0);
    let m = expected.max_abs();
    for (k, p) in px.iter().enumerate() {
        let v = 127.5 + 127.5 * expected.data()[k] / m;
        assert!((f64::from(*p) - v).abs() <= 0.5 + 1e-9, "pixel {k}: {p} vs {v}");
    }
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let o = run(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let report = stdout(&o);
    for block in ["spectral", "reduce.pw1.weight", "reduce.pw2.bias", "scratch.weight", "classifier.weight"] {
        assert!(report.contains(&format!(",{block},")), "{block} missing");
    }
    let o = run(&["gradcheck", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn data_commands() {
    use hyperadapt::data::{HyperCube, TileSet};
    let dir = tempfile::tempdir().unwrap();
    let data = Tensor::from_fn(&[4, 20, 17], |i| (i[0] + i[1] * 3 + i[2]) as f64);
    // Odd rows labelled 1, even rows unlabelled.
    let labels = (0..20 * 17).map(|k| (k / 17) % 2 * 2 - 1).collect();
    let cube_path = dir.path().join("c.hsc");
    HyperCube::new(data, Some(labels)).unwrap().save(&cube_path).unwrap();
    let (tr, te) = (p(dir.path(), "tr.tls"), p(dir.path(), "te.tls"));
    let o = bin()
        .args(["tile", "--resize", "8", "--out-train", &tr, "--out-test", &te, "--cube"])
        .arg(&cube_path)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (TileSet::load(Path::new(&tr)).unwrap(), TileSet::load(Path::new(&te)).unwrap());
    assert!(a.stats.is_some() && b.stats == a.stats);
    assert_eq!(a.len() + b.len(), 2 * 3);
    assert!(stdout(&o).starts_with("6 labelled tiles"));

    let out = p(dir.path(), "n.hsc");
    let o = bin()
        .args(["nearrange", "--crop", "16", "--resize", "8", "--drop", "1,1", "--pad", "2", "--out", &out, "--cube"])
        .arg(&cube_path)
        .output()
        .unwrap();
    assert!(o.status.success());
    let n = HyperCube::load(Path::new(&out)).unwrap();
    assert_eq!(n.data().shape(), &[2, 12, 12]);
    let o = bin()
        .args(["nearrange", "--crop", "30", "--resize", "8", "--out", &out, "--cube"])
        .arg(&cube_path)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["synth-task", "--channels", "6", "--train", "8", "--test", "4", "--size", "5", "--out-train", &tr, "--out-test", &te]);
    assert!(o.status.success());
    assert_eq!(TileSet::load(Path::new(&tr)).unwrap().len(), 8);
}
