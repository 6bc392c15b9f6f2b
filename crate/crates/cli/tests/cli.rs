use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use pedcast_core::models::load_checkpoint;
use pedcast_core::seqdata::{load_tracks, BBox, SpeedVec};

fn pedcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pedcast"))
        .args(args)
        .env_remove("PEDCAST_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3

[scenario]
num_tracks = 30

[window]
obs_len = 4
pred_len = 3
stride = 4

[model]
kind = "lstm_ed"
embed_dim = 8

[train]
batch_size = 16
learning_rate = 1e-3
epochs = 2
eval_every = 1
"#;

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> PathBuf {
        self.path("run.toml")
    }

    fn generate(&self) -> PathBuf {
        let o = pedcast(&["generate", "--config", s(&self.config()), "--out", s(&self.path("data"))]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        self.path("data/tracks.jsonl")
    }

    fn train(&self, extra: &[&str]) -> Output {
        let tracks = self.path("data/tracks.jsonl");
        if !tracks.exists() {
            self.generate();
        }
        let (config, out) = (self.config(), self.path("run"));
        let mut args = vec!["train", "--config", s(&config), "--tracks", s(&tracks), "--out", s(&out)];
        args.extend_from_slice(extra);
        pedcast(&args)
    }
}

#[test]
fn generate_is_reproducible_and_guards_outputs() {
    let f = Fixture::new(TINY);
    let tracks = f.generate();
    let first = fs::read(&tracks).unwrap();
    let clean = fs::read(f.path("data/tracks_clean.jsonl")).unwrap();

    let again = pedcast(&["generate", "--config", s(&f.config()), "--out", s(&f.path("data"))]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));

    let forced = pedcast(&["generate", "--config", s(&f.config()), "--out", s(&f.path("data")), "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(fs::read(&tracks).unwrap(), first);
    assert_eq!(fs::read(f.path("data/tracks_clean.jsonl")).unwrap(), clean);
}

#[test]
fn seed_environment_variable_overrides_config() {
    let f = Fixture::new(TINY);
    let base = fs::read(f.generate()).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pedcast"))
        .args(["generate", "--config", s(&f.config()), "--out", s(&f.path("seeded"))])
        .env("PEDCAST_SEED", "99")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(f.path("seeded/tracks.jsonl")).unwrap(), base);
}

#[test]
fn bad_mix_is_a_config_error_naming_the_field() {
    let f = Fixture::new("[mix]\ncross = 0.5\nnot_cross = 0.6\ndiagonal_cross = 0\nstop_then_cross = 0\n");
    let o = pedcast(&["generate", "--config", s(&f.config()), "--out", s(&f.path("data"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mix"), "{}", stderr(&o));
    assert!(!f.path("data").exists());

    let f = Fixture::new("[train]\nlr = 0.1\n");
    let o = pedcast(&["generate", "--config", s(&f.config()), "--out", s(&f.path("data"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("lr"));
}

#[test]
fn demo_config_generates_quickly() {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    let out = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let o = pedcast(&["generate", "--config", s(&demo), "--out", s(out.path())]);
    let secs = start.elapsed().as_secs_f64();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tracks = load_tracks(out.path().join("tracks_clean.jsonl")).unwrap();
    assert!(tracks.len() >= 100);
    assert!(secs < 5.0, "{secs}s");
}

#[test]
fn missing_tracks_is_a_data_error_without_outputs() {
    let f = Fixture::new(TINY);
    let o = pedcast(&[
        "train",
        "--config",
        s(&f.config()),
        "--tracks",
        s(&f.path("nope.jsonl")),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(code(&o), 3);
    assert!(!f.path("run").exists());
}

#[test]
fn train_eval_predict_round_trip() {
    let f = Fixture::new(TINY);
    let o = f.train(&[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in [
        "model_last.ckpt",
        "model_best.ckpt",
        "train_state.bin",
        "train_log.csv",
        "test_tracks.jsonl",
        "split.txt",
        "test_report.csv",
    ] {
        assert!(f.path("run").join(name).is_file(), "{name}");
    }
    assert_eq!(fs::read_to_string(f.path("run/train_log.csv")).unwrap().lines().count(), 3);
    let ckpt = f.path("run/model_best.ckpt");
    let test_tracks = f.path("run/test_tracks.jsonl");

    // a second run refuses to clobber the artifacts
    let again = pedcast(&[
        "train",
        "--config",
        s(&f.config()),
        "--tracks",
        s(&f.path("data/tracks.jsonl")),
        "--out",
        s(&f.path("run")),
    ]);
    assert_eq!(code(&again), 2);

    // resume to a later epoch
    let resumed = pedcast(&[
        "train",
        "--config",
        s(&f.config()),
        "--tracks",
        s(&f.path("data/tracks.jsonl")),
        "--out",
        s(&f.path("run")),
        "--resume",
        "--epochs",
        "3",
    ]);
    assert_eq!(code(&resumed), 0, "{}", stderr(&resumed));
    assert_eq!(fs::read_to_string(f.path("run/train_log.csv")).unwrap().lines().count(), 4);

    let eval = pedcast(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--tracks",
        s(&test_tracks),
        "--horizon-sweep",
        "--image-size",
        "1920x1080",
        "--out",
        s(&f.path("eval")),
    ]);
    assert_eq!(code(&eval), 0, "{}", stderr(&eval));
    let table = stdout(&eval);
    assert!(table.contains("ADE(px)") && table.contains("lstm_ed"), "{table}");
    let sweep = fs::read_to_string(f.path("eval/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 3);
    assert!(sweep.starts_with("step,ade_px,accuracy"));

    // pixel units scale with the image size
    let ade_at = |size: &str| {
        let o = pedcast(&["eval", "--checkpoint", s(&ckpt), "--tracks", s(&test_tracks), "--image-size", size, "--csv"]);
        assert_eq!(code(&o), 0);
        let out = stdout(&o);
        let row = out.lines().nth(1).unwrap().to_string();
        row.split(',').nth(2).unwrap().parse::<f64>().unwrap()
    };
    let (full, half) = (ade_at("1920x1080"), ade_at("960x540"));
    assert!((full - 2.0 * half).abs() <= 1e-9 * full.max(1.0), "{full} vs {half}");

    // the run config matches, a different horizon does not
    let ok = pedcast(&["eval", "--checkpoint", s(&ckpt), "--tracks", s(&test_tracks), "--config", s(&f.config())]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let mismatch = pedcast(&["eval", "--checkpoint", s(&ckpt), "--tracks", s(&test_tracks), "--T", "5"]);
    assert_eq!(code(&mismatch), 5);
    fs::write(f.path("other.toml"), TINY.replace("pred_len = 3", "pred_len = 2")).unwrap();
    let mismatch = pedcast(&["eval", "--checkpoint", s(&ckpt), "--tracks", s(&test_tracks), "--config", s(&f.path("other.toml"))]);
    assert_eq!(code(&mismatch), 5);

    check_predict(&ckpt, &test_tracks);
}

fn check_predict(ckpt: &Path, tracks_path: &Path) {
    let tracks = load_tracks(tracks_path).unwrap();
    let track = tracks.iter().find(|t| t.len() > 20).unwrap();
    let frames = track.frames();
    let idx = (6..frames.len())
        .find(|&i| (i - 5..=i).all(|k| frames[k].frame == frames[i].frame - (i - k) as i64))
        .unwrap();
    let frame = frames[idx].frame.to_string();
    let args = [
        "predict",
        "--checkpoint",
        s(ckpt),
        "--tracks",
        s(tracks_path),
        "--track-id",
        &track.track_id,
        "--video-id",
        &track.video_id,
        "--frame",
        &frame,
    ];
    let a = pedcast(&args);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = pedcast(&args);
    assert_eq!(a.stdout, b.stdout);

    let out = stdout(&a);
    let rows: Vec<Vec<&str>> = out.lines().skip(2).map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(rows.len(), 3);
    let mut cur = frames[idx].bbox;
    for r in &rows {
        let v: Vec<f64> = r[2..10].iter().map(|x| x.parse().unwrap()).collect();
        cur = cur.advanced(&SpeedVec::new(v[0], v[1], v[2], v[3]));
        assert_eq!(cur, BBox { x: v[4], y: v[5], w: v[6], h: v[7] });
        let p = r[10];
        assert_eq!(p.split('.').nth(1).unwrap().len(), 4);
        let p: f64 = p.parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert!(r[11] == "C" || r[11] == "NC");
    }

    let first = frames[0].frame.to_string();
    let mut short = args;
    short[10] = &first;
    assert_eq!(code(&pedcast(&short)), 6);
    let mut unknown = args;
    unknown[6] = "nobody";
    assert_eq!(code(&pedcast(&unknown)), 6);
}

#[test]
fn single_step_transformer_uses_one_layer_one_head() {
    let f = Fixture::new(&TINY.replace("kind = \"lstm_ed\"\nembed_dim = 8", "embed_dim = 8").replace("epochs = 2", "epochs = 1"));
    let o = f.train(&["--model", "tf_ed", "--O", "16", "--T", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = load_checkpoint(f.path("run/model_last.ckpt")).unwrap();
    assert_eq!((m.config.num_layers, m.config.num_heads, m.config.obs_len, m.config.pred_len), (1, 1, 16, 1));
}

#[test]
fn long_horizon_lstm_configuration() {
    let f = Fixture::new(&TINY.replace("epochs = 2", "epochs = 1"));
    let o = f.train(&["--model", "lstm_ed", "--O", "16", "--T", "25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = load_checkpoint(f.path("run/model_last.ckpt")).unwrap();
    assert_eq!((m.config.obs_len, m.config.pred_len), (16, 25));
}

#[test]
fn baseline_on_linear_tracks_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("#pedcast-tracks v1\n");
    for k in 0..40 {
        let x = 0.25 + k as f64 * 0.0078125;
        text.push_str(&format!(
            "{{\"video_id\":\"v\",\"track_id\":\"p\",\"frame\":{k},\"x\":{x},\"y\":0.5,\"w\":0.0625,\"h\":0.125,\"action\":1}}\n"
        ));
    }
    let path = dir.path().join("linear.jsonl");
    fs::write(&path, text).unwrap();
    let o = pedcast(&["eval", "--baseline", "constant-velocity", "--O", "8", "--T", "6", "--tracks", s(&path)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row[0], "constant_velocity");
    assert_eq!((row[4], row[5], row[6]), ("0.00", "0.00", "1.0000"));
}
