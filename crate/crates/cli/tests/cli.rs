use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = "\
# small enough to train in well under a second
data.image_size = 8
data.num_classes = 2
data.samples_per_class = 6
data.seed = 4
model.patch_size = 4
model.dim = 8
model.depth = 1
model.heads = 2
model.mlp_ratio = 1
model.head_hidden = 8
model.head_out = 8
model.decoder_blocks = 1
model.decoder_heads = 2
model.decoder_mlp_ratio = 1
views.blur = false
views.crop = false
views.flip = false
views.translation = false
train.batch_size = 4
train.epochs = 2
train.seed = 9
probe.hidden = 8
probe.epochs = 2
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_equirecon")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self { dir: TempDir::new().unwrap() };
        fs::write(ws.path("tiny.cfg"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_string()
    }

    fn gen_data(&self, name: &str, extra: &[&str]) -> Output {
        let (cfg, out) = (self.arg("tiny.cfg"), self.arg(name));
        let mut args = vec!["gen-data", "--config", &cfg, "--out", &out];
        args.extend_from_slice(extra);
        run(&args)
    }

    fn pretrain(&self, data: &str, out_dir: &str, extra: &[&str]) -> Output {
        let (cfg, data, out_dir) = (self.arg("tiny.cfg"), self.arg(data), self.arg(out_dir));
        let mut args = vec!["pretrain", "--config", &cfg, "--data", &data, "--out-dir", &out_dir];
        args.extend_from_slice(extra);
        run(&args)
    }

    /// Generates data and trains once, returning the final checkpoint path.
    fn trained(&self) -> PathBuf {
        assert_eq!(code(&self.gen_data("data.eqds", &[])), 0);
        let out = self.pretrain("data.eqds", "run", &[]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        self.path("run").join("final.eqrc")
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gen_data_writes_the_dataset() {
    let ws = Workspace::new();
    let out = ws.gen_data("data.eqds", &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bytes = fs::read(ws.path("data.eqds")).unwrap();
    assert_eq!(&bytes[..4], b"EQDS");
    assert!(stderr(&out).contains("data.samples_per_class = 6"), "resolved config is logged");
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("a.eqds", &[])), 0);
    assert_eq!(code(&ws.gen_data("b.eqds", &[])), 0);
    assert_eq!(fs::read(ws.path("a.eqds")).unwrap(), fs::read(ws.path("b.eqds")).unwrap());
}

#[test]
fn negative_samples_per_class_names_the_key() {
    let ws = Workspace::new();
    let out = ws.gen_data("data.eqds", &["--data.samples_per_class=-5"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("data.samples_per_class"), "{}", stderr(&out));
    assert!(!ws.path("data.eqds").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let ws = Workspace::new();
    let out = ws.gen_data("data.eqds", &["--data.colour=3"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("data.colour"));
    fs::write(ws.path("bad.cfg"), "data.seed = 1\nmodel.width = 3\n").unwrap();
    let out = run(&["gen-data", "--config", &ws.arg("bad.cfg"), "--out", &ws.arg("x.eqds")]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("model.width") && stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let ws = Workspace::new();
    fs::write(ws.path("file"), b"not a directory").unwrap();
    let out = ws.gen_data("file/data.eqds", &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_an_io_error() {
    let ws = Workspace::new();
    let out = run(&["gen-data", "--config", &ws.arg("absent.cfg"), "--out", &ws.arg("d.eqds")]);
    assert_eq!(code(&out), 3);
}

#[test]
fn unknown_command_exits_two() {
    assert_eq!(code(&run(&["fine-tune"])), 2);
}

#[test]
fn bad_arguments_exit_one() {
    assert_eq!(code(&run(&["eval"])), 1);
    assert_eq!(code(&run(&["pretrain", "--ablation=sic-only"])), 1);
}

#[test]
fn pretrain_writes_one_metrics_row_per_epoch() {
    let ws = Workspace::new();
    let ck = ws.trained();
    assert!(ck.exists());
    let rows = csv_rows(&ws.path("run/metrics.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), [1.0, 2.0]);
    let header = fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    assert!(header.starts_with("epoch,loss_total,loss_inv,loss_var,loss_cov,loss_recon,lr,seconds\n"));
    assert!(fs::read_to_string(ws.path("run/config.txt")).unwrap().contains("train.epochs = 2"));
}

#[test]
fn pretrain_is_deterministic() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    assert_eq!(code(&ws.pretrain("data.eqds", "a", &[])), 0);
    assert_eq!(code(&ws.pretrain("data.eqds", "b", &[])), 0);
    for f in ["metrics.csv", "final.eqrc"] {
        let a = fs::read(ws.path("a").join(f)).unwrap();
        let b = fs::read(ws.path("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn vicreg_only_ablation_drops_the_reconstruction_term() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    let out = ws.pretrain("data.eqds", "run", &["--ablation=vicreg-only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("loss.lambda_recon = 0"));
    for r in csv_rows(&ws.path("run/metrics.csv")) {
        let (total, inv, var, cov, recon) = (r[1], r[2], r[3], r[4], r[5]);
        assert_eq!(recon, 0.0);
        let ssl = 25.0 * inv + 25.0 * var + cov;
        assert!((total - ssl).abs() <= 1e-4 * ssl.abs().max(1.0), "total {total} vs ssl terms {ssl}");
    }
}

#[test]
fn recon_only_ablation_trains_on_reconstruction_alone() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    let out = ws.pretrain("data.eqds", "run", &["--ablation=recon-only"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for r in csv_rows(&ws.path("run/metrics.csv")) {
        assert!((r[1] - r[5]).abs() <= 1e-6 * r[5].max(1.0), "total {} vs recon {}", r[1], r[5]);
    }
}

#[test]
fn divergent_training_exits_four() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    let out = ws.pretrain("data.eqds", "run", &["--train.lr=1e30", "--train.epochs=5"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(ws.path("run/last_good.eqrc").exists());
    assert!(!ws.path("run/final.eqrc").exists());
}

#[test]
fn mismatched_image_size_is_rejected() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    let out = ws.pretrain("data.eqds", "run", &["--data.image_size=16"]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
}

#[test]
fn resume_matches_a_straight_run() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    assert_eq!(code(&ws.pretrain("data.eqds", "straight", &["--train.epochs=4"])), 0);
    assert_eq!(code(&ws.pretrain("data.eqds", "half", &["--train.epochs=2"])), 0);
    let ck = ws.arg("half/final.eqrc");
    let out = ws.pretrain("data.eqds", "resumed", &["--train.epochs=4", "--resume", &ck]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(ws.path("straight/final.eqrc")).unwrap(), fs::read(ws.path("resumed/final.eqrc")).unwrap());
}

#[test]
fn equivariance_eval_reports_each_enabled_family() {
    let ws = Workspace::new();
    let ck = ws.trained();
    let csv = ws.arg("r2.csv");
    let args = ["eval", "--checkpoint", ck.to_str().unwrap(), "--config", &ws.arg("tiny.cfg")];
    let out = run(&[&args[..], &["--data", &ws.arg("data.eqds"), "--mode=equivariance", "--out", &csv]].concat());
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let keys: Vec<&str> = text.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(keys[..3], ["family", "rotation", "color"]);
    assert_eq!(*keys.last().unwrap(), "mean");
    assert!(!keys.contains(&"blur") && !keys.contains(&"flip"));
    assert!(stdout(&out).contains("rotation"));

    let again = ws.arg("r2_again.csv");
    let out = run(&[&args[..], &["--data", &ws.arg("data.eqds"), "--out", &again]].concat());
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&csv).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn classification_eval_writes_accuracy() {
    let ws = Workspace::new();
    let ck = ws.trained();
    let out = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--config",
        &ws.arg("tiny.cfg"),
        "--data",
        &ws.arg("data.eqds"),
        "--mode=classification",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(ws.path("run/classification.csv")).unwrap();
    assert!(text.starts_with("metric,value\naccuracy,"));
}

#[test]
fn classification_on_single_class_data_is_a_contract_error() {
    let ws = Workspace::new();
    let ck = ws.trained();
    assert_eq!(code(&ws.gen_data("one.eqds", &["--data.num_classes=1"])), 0);
    let out = run(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        &ws.arg("one.eqds"),
        "--mode=classification",
        "--probe.epochs=1",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("class"), "{}", stderr(&out));
}

#[test]
fn missing_or_corrupt_checkpoint_exits_three() {
    let ws = Workspace::new();
    let out = run(&["eval", "--checkpoint", &ws.arg("absent.eqrc"), "--data", &ws.arg("data.eqds")]);
    assert_eq!(code(&out), 3);
    let ck = ws.trained();
    let mut bytes = fs::read(&ck).unwrap();
    let n = bytes.len();
    bytes[n - 1] ^= 0xff;
    fs::write(ws.path("bad.eqrc"), bytes).unwrap();
    let out = run(&["eval", "--checkpoint", &ws.arg("bad.eqrc"), "--data", &ws.arg("data.eqds")]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_lists_every_op() {
    let out = run(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}{}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    for kind in equirecon::gradcore::OpKind::DIFFERENTIABLE {
        let listed = text.lines().any(|l| l.split_whitespace().next() == Some(kind.name()));
        assert!(listed, "{} missing from report", kind.name());
    }
    assert!(text.contains("full_model"));
}

#[test]
fn gradcheck_names_a_corrupted_op() {
    let out = run(&["gradcheck", "--inject-fault=softmax"]);
    assert_eq!(code(&out), 5);
    assert!(stderr(&out).contains("softmax"), "{}", stderr(&out));
    assert_eq!(code(&run(&["gradcheck", "--inject-fault=nonsense"])), 1);
}

fn ppm_size(bytes: &[u8]) -> (usize, usize) {
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut tokens = header.split_whitespace();
    assert_eq!(tokens.next(), Some("P6"));
    (tokens.next().unwrap().parse().unwrap(), tokens.next().unwrap().parse().unwrap())
}

#[test]
fn reconstruct_writes_triplets_even_untrained() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.gen_data("data.eqds", &[])), 0);
    let out = ws.pretrain("data.eqds", "run", &["--train.epochs=1", "--train.lr=1e-12"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ck = ws.arg("run/final.eqrc");
    let args = ["reconstruct", "--checkpoint", &ck, "--data", &ws.arg("data.eqds"), "--out-dir", &ws.arg("recon"), "--n", "4"];
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut files: Vec<_> = fs::read_dir(ws.path("recon")).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    assert_eq!(files.len(), 12);
    for f in &files {
        assert_eq!(f.extension().unwrap(), "ppm");
        let bytes = fs::read(f).unwrap();
        assert_eq!(ppm_size(&bytes), (8, 8));
    }
    let first: Vec<u8> = files.iter().flat_map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(code(&run(&args)), 0);
    let second: Vec<u8> = files.iter().flat_map(|f| fs::read(f).unwrap()).collect();
    assert_eq!(first, second);
}
