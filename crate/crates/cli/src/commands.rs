use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use pedcast_core::metrics::EvalReport;
use pedcast_core::models::{load_checkpoint, Forecaster, Model};
use pedcast_core::seqdata::{
    compute_speeds, load_tracks, save_tracks, split_dataset, windows_by_video, GapPolicy, ObservationWindow, Track,
    WindowSpec,
};
use pedcast_core::synth::{self, ConstantVelocity};
use pedcast_core::trainer::{evaluate, TrainConfig, Trainer, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, STATE_FILE};

use crate::config::RunConfig;
use crate::{Baseline, CliError, EvalArgs, GenerateArgs, PredictArgs, TrainArgs};

pub const TRACKS_FILE: &str = "tracks.jsonl";
pub const CLEAN_TRACKS_FILE: &str = "tracks_clean.jsonl";
pub const TEST_TRACKS_FILE: &str = "test_tracks.jsonl";
pub const SPLIT_FILE: &str = "split.txt";
pub const TEST_REPORT_FILE: &str = "test_report.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.1, 0.2];

fn guard_outputs(paths: &[PathBuf], force: bool) -> Result<(), CliError> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("{what} {} not found", path.display())))
    }
}

fn windows_for(tracks: &[Track], spec: &WindowSpec) -> Result<Vec<ObservationWindow>> {
    let groups = windows_by_video(tracks, spec, GapPolicy::Split)?;
    Ok(groups.into_values().flatten().collect())
}

pub fn generate(args: &GenerateArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?.with_env_seed()?;
    cfg.scenario.validate()?;
    let perturbed = args.out.join(TRACKS_FILE);
    let clean = args.out.join(CLEAN_TRACKS_FILE);
    guard_outputs(&[perturbed.clone(), clean.clone()], args.force)?;

    let corpus = synth::generate(&cfg.scenario)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    save_tracks(&corpus.perturbed, &perturbed)?;
    save_tracks(&corpus.clean, &clean)?;
    println!(
        "wrote {} perturbed tracks to {} and {} clean tracks to {}",
        corpus.perturbed.len(),
        perturbed.display(),
        corpus.clean.len(),
        clean.display()
    );
    Ok(())
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?.with_env_seed()?;
    if let Some(k) = args.model {
        cfg.model.kind = k;
    }
    if let Some(o) = args.obs_len {
        cfg.obs_len = o;
    }
    if let Some(t) = args.pred_len {
        cfg.pred_len = t;
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    let tracks_path = args
        .tracks
        .clone()
        .or_else(|| cfg.tracks.clone())
        .ok_or_else(|| CliError::Config("no track file: set paths.tracks or pass --tracks".into()))?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config("no output directory: set paths.output_dir or pass --out".into()))?;
    let spec = cfg.window_spec()?;
    let model_cfg = cfg.model_config()?;
    cfg.train.validate()?;
    require_file(&tracks_path, "track file")?;

    let state_path = out.join(STATE_FILE);
    let products: Vec<PathBuf> = [
        LAST_CHECKPOINT,
        BEST_CHECKPOINT,
        STATE_FILE,
        LOG_FILE,
        TEST_TRACKS_FILE,
        SPLIT_FILE,
        TEST_REPORT_FILE,
    ]
    .iter()
    .map(|f| out.join(f))
    .collect();
    if args.resume {
        if !state_path.is_file() {
            return Err(CliError::Checkpoint(format!("no resume state at {}", state_path.display())).into());
        }
    } else {
        guard_outputs(&products, args.force)?;
    }

    let tracks = load_tracks(&tracks_path).with_context(|| format!("reading {}", tracks_path.display()))?;
    let groups = windows_by_video(&tracks, &spec, GapPolicy::Split)?;
    let split = split_dataset(groups, SPLIT_RATIOS, cfg.seed)?;
    if split.train.is_empty() {
        return Err(CliError::Data(format!(
            "no training windows of {} frames in {}",
            spec.obs_len + spec.pred_len + 1,
            tracks_path.display()
        ))
        .into());
    }
    eprintln!(
        "{}: {} train / {} val / {} test windows from {} videos",
        model_cfg.kind,
        split.train.len(),
        split.val.len(),
        split.test.len(),
        split.train_videos.len() + split.val_videos.len() + split.test_videos.len()
    );

    let train_cfg = TrainConfig {
        checkpoint_dir: Some(out.clone()),
        ..cfg.train.clone()
    };
    let mut trainer = if args.resume {
        let t = Trainer::resume(&state_path, train_cfg)?;
        if t.model.config != model_cfg {
            return Err(CliError::Checkpoint(format!(
                "resume state holds {:?}, config asks for {:?}",
                t.model.config, model_cfg
            ))
            .into());
        }
        t
    } else {
        Trainer::new(model_cfg, train_cfg)?
    };

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let test_videos: BTreeSet<&String> = split.test_videos.iter().collect();
    let test_tracks: Vec<Track> = tracks
        .iter()
        .filter(|t| test_videos.contains(&t.video_id))
        .cloned()
        .collect();
    save_tracks(&test_tracks, out.join(TEST_TRACKS_FILE))?;
    let mut listing = String::new();
    for (name, videos) in [
        ("train", &split.train_videos),
        ("val", &split.val_videos),
        ("test", &split.test_videos),
    ] {
        for v in videos {
            let _ = writeln!(listing, "{name} {v}");
        }
    }
    fs::write(out.join(SPLIT_FILE), listing)?;

    while trainer.epochs_done() < cfg.train.epochs {
        let r = trainer.run_epoch(&split.train, &split.val)?;
        let mut line = format!("epoch {:>4}  train {:.6}", r.epoch, r.train_loss);
        if let Some(v) = r.val_loss {
            let _ = write!(line, "  val {v:.6}");
        }
        if let (Some(a), Some(acc)) = (r.val_ade, r.val_accuracy) {
            let _ = write!(line, "  val_ade {a:.2}px  val_acc {acc:.4}");
        }
        let _ = write!(line, "  {:.1}s", r.wall_time);
        eprintln!("{line}");
    }
    trainer.write_artifacts(&out)?;

    if !split.test.is_empty() {
        let best = trainer.best.as_ref().map_or(&trainer.model, |(_, _, m)| m);
        let report = evaluate(best, &split.test, cfg.train.image_size)?;
        fs::write(out.join(TEST_REPORT_FILE), report.summary_csv())?;
        print!("{}", summary_table(best.config.kind.as_str(), spec.obs_len, &report));
    }
    println!("artifacts written to {}", out.display());
    Ok(())
}

fn summary_table(name: &str, obs_len: usize, r: &EvalReport) -> String {
    format!(
        "{:<20} {:>4} {:>4} {:>8} {:>10} {:>10} {:>9}\n{:<20} {:>4} {:>4} {:>8} {:>10.2} {:>10.2} {:>9.4}\n",
        "model",
        "O",
        "T",
        "windows",
        "ADE(px)",
        "FDE(px)",
        "accuracy",
        name,
        obs_len,
        r.horizon(),
        r.windows,
        r.ade,
        r.fde,
        r.accuracy
    )
}

fn sweep_table(r: &EvalReport) -> String {
    let mut s = format!("{:>5} {:>10} {:>9}\n", "step", "ADE(px)", "accuracy");
    for (k, (a, acc)) in r.per_step_ade.iter().zip(&r.per_step_accuracy).enumerate() {
        let _ = writeln!(s, "{:>5} {:>10.2} {:>9.4}", k + 1, a, acc);
    }
    s
}

fn check_compatible(model: &Model, args: &EvalArgs) -> Result<()> {
    let c = &model.config;
    for (flag, want, have) in [("--O", args.obs_len, c.obs_len), ("--T", args.pred_len, c.pred_len)] {
        if let Some(w) = want {
            if w != have {
                return Err(CliError::Checkpoint(format!("{flag} {w} does not match the checkpoint's {have}")).into());
            }
        }
    }
    if let Some(path) = &args.config {
        let expected = RunConfig::load(path)?.model_config()?;
        if expected != *c {
            return Err(CliError::Checkpoint(format!(
                "config {} describes {expected:?}, checkpoint holds {c:?}",
                path.display()
            ))
            .into());
        }
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (forecaster, name, obs_len, pred_len): (Box<dyn Forecaster>, String, usize, usize) =
        match (&args.checkpoint, args.baseline) {
            (Some(path), _) => {
                let model = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
                check_compatible(&model, args)?;
                let (o, t) = (model.config.obs_len, model.config.pred_len);
                (Box::new(model.clone()), model.config.kind.as_str().to_string(), o, t)
            }
            (None, Some(Baseline::ConstantVelocity)) => {
                let (o, t) = args
                    .obs_len
                    .zip(args.pred_len)
                    .ok_or_else(|| CliError::Config("--baseline needs --O and --T".into()))?;
                (Box::new(ConstantVelocity), "constant_velocity".to_string(), o, t)
            }
            (None, None) => return Err(CliError::Config("pass --checkpoint or --baseline".into()).into()),
        };
    let spec = WindowSpec::new(obs_len, pred_len, args.stride).map_err(|e| CliError::Config(e.to_string()))?;
    let outputs: Vec<PathBuf> = match &args.out {
        Some(dir) => {
            let mut v = vec![dir.join(REPORT_FILE)];
            if args.horizon_sweep {
                v.push(dir.join(SWEEP_FILE));
            }
            v
        }
        None => Vec::new(),
    };
    guard_outputs(&outputs, args.force)?;
    require_file(&args.tracks, "track file")?;

    let tracks = load_tracks(&args.tracks).with_context(|| format!("reading {}", args.tracks.display()))?;
    let windows = windows_for(&tracks, &spec)?;
    if windows.is_empty() {
        return Err(CliError::Data(format!(
            "{} holds no window of O={obs_len} T={pred_len}",
            args.tracks.display()
        ))
        .into());
    }
    let report = evaluate(forecaster.as_ref(), &windows, args.image_size)?;

    if args.csv {
        print!("{}", report.summary_csv());
        if args.horizon_sweep {
            print!("{}", report.to_csv());
        }
    } else {
        print!("{}", summary_table(&name, obs_len, &report));
        if args.horizon_sweep {
            print!("\n{}", sweep_table(&report));
        }
    }
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join(REPORT_FILE), report.summary_csv())?;
        if args.horizon_sweep {
            fs::write(dir.join(SWEEP_FILE), report.to_csv())?;
        }
    }
    Ok(())
}

fn query_window(tracks: &[Track], args: &PredictArgs, obs_len: usize) -> Result<ObservationWindow> {
    let matches: Vec<&Track> = tracks
        .iter()
        .filter(|t| t.track_id == args.track_id && args.video_id.as_ref().is_none_or(|v| *v == t.video_id))
        .collect();
    let track = match matches.as_slice() {
        [] => return Err(CliError::Query(format!("no track `{}`", args.track_id)).into()),
        [t] => *t,
        _ => {
            return Err(CliError::Query(format!(
                "track `{}` occurs in {} videos; pass --video-id",
                args.track_id,
                matches.len()
            ))
            .into())
        }
    };
    for seg in compute_speeds(track, GapPolicy::Split)? {
        let Some(end) = seg.frames.iter().position(|f| f.frame == args.frame) else {
            continue;
        };
        if end + 1 < obs_len {
            return Err(CliError::Query(format!(
                "insufficient history: frame {} has {} contiguous frame(s) with speeds, the model needs {obs_len}",
                args.frame,
                end + 1
            ))
            .into());
        }
        let frames = &seg.frames[end + 1 - obs_len..=end];
        return Ok(ObservationWindow {
            positions: frames.iter().map(|f| f.bbox).collect(),
            speeds: frames.iter().map(|f| f.speed).collect(),
            observed_actions: frames.iter().map(|f| f.action).collect(),
            target_speeds: Vec::new(),
            target_positions: Vec::new(),
            target_actions: Vec::new(),
            source_video_id: track.video_id.clone(),
            source_track_id: track.track_id.clone(),
            start_frame: frames[0].frame,
        });
    }
    Err(CliError::Query(format!(
        "insufficient history: track `{}` has no speed at frame {}",
        args.track_id, args.frame
    ))
    .into())
}

pub fn predict(args: &PredictArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    require_file(&args.tracks, "track file")?;
    let tracks = load_tracks(&args.tracks).with_context(|| format!("reading {}", args.tracks.display()))?;
    let c = model.config;
    let window = query_window(&tracks, args, c.obs_len)?;
    let f = model.forecast(&window, c.pred_len)?;

    let mut out = format!(
        "# model {} O={} T={} video {} track {} last_frame {}\n",
        c.kind, c.obs_len, c.pred_len, window.source_video_id, window.source_track_id, args.frame
    );
    out.push_str("step frame dx dy dw dh x y w h p_cross label\n");
    for (k, ((s, b), (p, l))) in f
        .speed_seq
        .iter()
        .zip(&f.position_seq)
        .zip(f.action_probs.iter().zip(&f.action_labels))
        .enumerate()
    {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {:.4} {}",
            k + 1,
            args.frame + k as i64 + 1,
            s.dx,
            s.dy,
            s.dw,
            s.dh,
            b.x,
            b.y,
            b.w,
            b.h,
            p,
            l.tag()
        );
    }
    print!("{out}");
    Ok(())
}
