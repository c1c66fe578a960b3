use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: [&str; 17] = [
    "--model.image_size=[16,16]",
    "--model.k_parts=3",
    "--model.encoder.out_channels=6",
    "--model.encoder.stage_channels=[4,4,6,6]",
    r#"--model.partformer={"layers":1,"heads":2,"hidden":8,"mlp_dim":8,"patch":4}"#,
    "--model.decoder.widths=[6,4,4,4,4]",
    "--train.batch_size=2",
    "--train.checkpoint_every=5",
    "--data.synthetic.count=12",
    "--data.synthetic.canvas=32",
    "--seed=3",
    "--train.optimizer.lr=0.0005",
    "--train.augment.rotate_deg=5",
    "--loss.lambda_con=0.01",
    "--loss.alpha_frac=0.1",
    "--transfer.temperature=0.8",
    "--train.steps=10",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partdiscover"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend(TINY);
    args.extend(extra);
    run(&args)
}

/// A trained tiny run and a synthetic dataset shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }
    fn checkpoint(&self) -> PathBuf {
        self.run_dir().join("final.pdck")
    }
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }
    fn image(&self, i: usize) -> PathBuf {
        let mut files: Vec<PathBuf> = std::fs::read_dir(self.data().join("images"))
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files[i].clone()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        let o = train_tiny(&f.run_dir(), &[]);
        assert!(o.status.success(), "{}", stderr(&o));
        let o = run(&[
            "synth",
            "--out",
            f.data().to_str().unwrap(),
            "--count",
            "8",
            "--seed",
            "5",
            "--data.synthetic.canvas=32",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        f
    })
}

fn png_size(path: &Path) -> (u32, u32) {
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    let reader = decoder.read_info().unwrap();
    let info = reader.info();
    (info.width, info.height)
}

#[test]
fn train_logs_every_step_and_writes_checkpoints() {
    let f = fixture();
    let log = std::fs::read_to_string(f.run_dir().join("train_log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 10);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["step"], i as u64 + 1);
        for key in ["total", "rec", "sc", "con", "area"] {
            assert!(l[key].as_f64().is_some_and(f64::is_finite), "{key} in {l}");
        }
    }
    assert!(f.run_dir().join("step000005.pdck").exists());
    assert!(f.run_dir().join("step000010.pdck").exists());
    assert!(f.checkpoint().exists());
}

#[test]
fn resume_continues_the_step_count() {
    let f = fixture();
    let out = f.dir.path().join("resumed");
    let ck = f.run_dir().join("step000005.pdck");
    let o = run(&["train", "--out", out.to_str().unwrap(), "--resume", ck.to_str().unwrap(), "--steps", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    let steps: Vec<u64> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [6, 7]);
}

#[test]
fn synth_is_deterministic_in_the_seed() {
    let f = fixture();
    let again = f.dir.path().join("data_again");
    let other = f.dir.path().join("data_other");
    for (out, seed) in [(&again, "5"), (&other, "6")] {
        let o = run(&[
            "synth",
            "--out",
            out.to_str().unwrap(),
            "--count",
            "8",
            "--seed",
            seed,
            "--data.synthetic.canvas=32",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |d: &Path, name: &str| std::fs::read(d.join(name)).unwrap();
    for name in ["landmarks.csv", "train.txt", "test.txt"] {
        assert_eq!(read(&f.data(), name), read(&again, name), "{name}");
    }
    let first = f.image(0);
    let name = first.file_name().unwrap();
    assert_eq!(std::fs::read(&first).unwrap(), std::fs::read(again.join("images").join(name)).unwrap());
    assert_ne!(read(&f.data(), "landmarks.csv"), read(&other, "landmarks.csv"));
}

#[test]
fn predict_writes_a_mask_per_image() {
    let f = fixture();
    let out = f.dir.path().join("masks");
    let images = f.data().join("images");
    let o = run(&[
        "predict",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        images.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--soft",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let pngs = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 8);
    let stem = f.image(0).file_stem().unwrap().to_string_lossy().into_owned();
    assert_eq!(png_size(&out.join(format!("{stem}.png"))), (32, 32));
    assert!(out.join(format!("{stem}.pdsm")).exists());
}

#[test]
fn predict_fails_when_no_image_is_readable() {
    let f = fixture();
    let bogus = f.dir.path().join("not_an_image.png");
    std::fs::write(&bogus, b"nope").unwrap();
    let out = f.dir.path().join("bogus_masks");
    let o = run(&[
        "predict",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        bogus.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
}

#[test]
fn eval_reports_metrics_with_the_checkpoint_hash() {
    let f = fixture();
    let report = f.dir.path().join("report.json");
    let o = run(&[
        "eval",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        "--data",
        f.data().to_str().unwrap(),
        "--protocol",
        "masks",
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["protocol"], "masks");
    assert!(r["ari"].as_f64().is_some());
    assert!(r["fg_ari"].as_f64().is_some());
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 16);
}

#[test]
fn visualize_writes_overlay_and_one_heatmap_per_token() {
    let f = fixture();
    let out = f.dir.path().join("vis");
    let o = run(&[
        "visualize",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        f.image(1).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--attention",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with("_overlay.png")).count(), 1);
    let heat: Vec<&String> = names.iter().filter(|n| n.contains("_attn_")).collect();
    assert_eq!(heat.len(), 4);
    for n in heat {
        assert_eq!(png_size(&out.join(n)), (32, 32));
    }
}

#[test]
fn swap_writes_both_reconstructions_and_a_sheet() {
    let f = fixture();
    let out = f.dir.path().join("swap");
    let o = run(&[
        "swap",
        "--checkpoint",
        f.checkpoint().to_str().unwrap(),
        f.image(0).to_str().unwrap(),
        f.image(1).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--sheet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (w, h) = png_size(&out.join("swap_a.png"));
    assert_eq!(png_size(&out.join("swap_b.png")), (w, h));
    assert_eq!(png_size(&out.join("sheet.png")), (4 * w, h));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--loss.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = train_tiny(dir.path(), &["--model.k_parts=0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = run(&["synth", "--out", dir.path().to_str().unwrap(), "--count", "0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_3_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), &["--train.optimizer.lr=1e30", "--model.precision=f32"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}
