//! Seeded generator of image-plane pedestrian tracks with crossing labels.
//!
//! Each pedestrian follows one kinematic template built from phases:
//!
//! | behavior          | phases                                   |
//! |-------------------|------------------------------------------|
//! | `cross`           | walk to curb, traverse road, walk away   |
//! | `not_cross`       | loiter on the sidewalk                   |
//! | `diagonal_cross`  | walk to curb, slanted traverse, walk away|
//! | `stop_then_cross` | walk to curb, stand still, traverse      |
//!
//! Frames of the traverse phase are labeled crossing, all others not
//! crossing. Boxes grow geometrically by `approach_rate` per frame to mimic
//! an approaching ego vehicle. Half of the pedestrians move right to left.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use thiserror::Error;

use crate::models::{Forecast, Forecaster, ModelError};
use crate::seqdata::{ActionLabel, BBox, DataError, ObservationWindow, SpeedVec, Track, TrackFrame};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Behavior {
    Cross,
    NotCross,
    DiagonalCross,
    StopThenCross,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [
        Behavior::Cross,
        Behavior::NotCross,
        Behavior::DiagonalCross,
        Behavior::StopThenCross,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Cross => "cross",
            Behavior::NotCross => "not_cross",
            Behavior::DiagonalCross => "diagonal_cross",
            Behavior::StopThenCross => "stop_then_cross",
        }
    }
}

/// Proportions of each behavior; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorMix {
    pub cross: f64,
    pub not_cross: f64,
    pub diagonal_cross: f64,
    pub stop_then_cross: f64,
}

impl BehaviorMix {
    pub fn weights(&self) -> [f64; 4] {
        [self.cross, self.not_cross, self.diagonal_cross, self.stop_then_cross]
    }

    pub fn only(b: Behavior) -> Self {
        let mut w = [0.0; 4];
        w[Behavior::ALL.iter().position(|x| *x == b).unwrap()] = 1.0;
        Self {
            cross: w[0],
            not_cross: w[1],
            diagonal_cross: w[2],
            stop_then_cross: w[3],
        }
    }
}

impl Default for BehaviorMix {
    fn default() -> Self {
        Self {
            cross: 0.3,
            not_cross: 0.3,
            diagonal_cross: 0.15,
            stop_then_cross: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub num_tracks: usize,
    pub frame_rate: f64,
    pub mix: BehaviorMix,
    /// Standard deviation of additive box noise, normalized units.
    pub noise_sigma: f64,
    /// Per-frame probability of a missed detection.
    pub dropout_prob: f64,
    /// Per-track probability of one identity split.
    pub id_switch_prob: f64,
    /// Relative box growth per frame.
    pub approach_rate: f64,
    /// Horizontal extent of the road in normalized x.
    pub road_band: (f64, f64),
    /// Range of traverse speeds, normalized x per frame.
    pub traverse_speed: (f64, f64),
    /// Range of sidewalk walking speeds, normalized x per frame.
    pub walk_speed: (f64, f64),
    pub approach_frames: (usize, usize),
    pub stop_frames: (usize, usize),
    pub exit_frames: (usize, usize),
    pub loiter_frames: (usize, usize),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_tracks: 200,
            frame_rate: 30.0,
            mix: BehaviorMix::default(),
            noise_sigma: 0.002,
            dropout_prob: 0.01,
            id_switch_prob: 0.05,
            approach_rate: 0.002,
            road_band: (0.2, 0.8),
            traverse_speed: (0.006, 0.012),
            walk_speed: (0.0008, 0.002),
            approach_frames: (15, 40),
            stop_frames: (10, 40),
            exit_frames: (10, 30),
            loiter_frames: (60, 140),
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: (T, T)) -> Result<(), SynthError> {
    if r.0 > r.1 {
        return Err(SynthError::Config(format!("{name} range {r:?} is reversed")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        let w = self.mix.weights();
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            let m = &self.mix;
            return bad(format!(
                "mix proportions (cross={}, not_cross={}, diagonal_cross={}, stop_then_cross={}) must be non-negative and sum to 1",
                m.cross, m.not_cross, m.diagonal_cross, m.stop_then_cross
            ));
        }
        for (name, p) in [
            ("dropout_prob", self.dropout_prob),
            ("id_switch_prob", self.id_switch_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma < 0.01) {
            return bad(format!("noise_sigma {} outside [0, 0.01)", self.noise_sigma));
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return bad(format!("frame_rate {} must be positive", self.frame_rate));
        }
        if !(0.0..0.01).contains(&self.approach_rate) {
            return bad(format!("approach_rate {} outside [0, 0.01)", self.approach_rate));
        }
        let (lo, hi) = self.road_band;
        if !(0.1 <= lo && lo < hi && hi <= 0.9) {
            return bad(format!(
                "road_band {:?} must satisfy 0.1 ≤ lo < hi ≤ 0.9",
                self.road_band
            ));
        }
        check_range("traverse_speed", self.traverse_speed)?;
        check_range("walk_speed", self.walk_speed)?;
        if self.traverse_speed.0 <= 0.0 || self.traverse_speed.1 >= 0.05 {
            return bad(format!("traverse_speed {:?} outside (0, 0.05)", self.traverse_speed));
        }
        if self.walk_speed.0 < 0.0 || self.walk_speed.1 >= self.traverse_speed.0 {
            return bad("walk_speed must be non-negative and below traverse_speed".into());
        }
        if self.walk_speed.1 * self.approach_frames.1 as f64 > lo - 0.04 {
            return bad("approach phase could start off the sidewalk".into());
        }
        for (name, r) in [
            ("approach_frames", self.approach_frames),
            ("stop_frames", self.stop_frames),
            ("exit_frames", self.exit_frames),
            ("loiter_frames", self.loiter_frames),
        ] {
            check_range(name, r)?;
        }
        if self.approach_frames.0 == 0 || self.loiter_frames.0 < 2 {
            return bad("approach_frames must be ≥ 1 and loiter_frames ≥ 2".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub clean: Vec<Track>,
    pub perturbed: Vec<Track>,
    /// Behavior of each clean track, index-aligned with `clean`.
    pub behaviors: Vec<Behavior>,
}

struct Walker<'a> {
    cfg: &'a ScenarioConfig,
    frames: Vec<(BBox, ActionLabel)>,
    cur: BBox,
}

impl Walker<'_> {
    fn step(&mut self, dx: f64, dy: f64, label: ActionLabel) {
        let g = 1.0 + self.cfg.approach_rate;
        let (w, h) = (self.cur.w * g, self.cur.h * g);
        // feet stay near the ground line as the box grows
        let y = self.cur.y + dy + 0.5 * (h - self.cur.h);
        self.cur = BBox {
            x: self.cur.x + dx,
            y,
            w,
            h,
        };
        self.frames.push((self.cur, label));
    }
}

fn urange(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

fn irange(rng: &mut ChaCha8Rng, r: (usize, usize)) -> usize {
    rng.random_range(r.0..=r.1)
}

fn template(cfg: &ScenarioConfig, behavior: Behavior, rng: &mut ChaCha8Rng) -> Vec<(BBox, ActionLabel)> {
    use ActionLabel::{Crossing as C, NotCrossing as N};
    let (lo, hi) = cfg.road_band;
    let w0 = rng.random_range(0.03..0.05);
    let start = BBox {
        x: 0.0,
        y: rng.random_range(0.5..0.65),
        w: w0,
        h: w0 * rng.random_range(2.2..2.8),
    };
    let mut walker = Walker {
        cfg,
        frames: Vec::new(),
        cur: start,
    };

    if behavior == Behavior::NotCross {
        let len = irange(rng, cfg.loiter_frames);
        walker.cur.x = rng.random_range(0.08..lo - 0.03);
        let drift = -urange(rng, (0.0, 0.15 * cfg.walk_speed.1));
        let along = rng.random_range(-0.0008..0.0008);
        walker.frames.push((walker.cur, N));
        for _ in 1..len {
            walker.step(drift, along, N);
        }
    } else {
        let walk = urange(rng, cfg.walk_speed);
        let approach = irange(rng, cfg.approach_frames);
        let curb = lo - 0.01;
        walker.cur.x = curb - walk * approach as f64;
        walker.frames.push((walker.cur, N));
        for _ in 0..approach {
            walker.step(walk, 0.0, N);
        }
        if behavior == Behavior::StopThenCross {
            for _ in 0..irange(rng, cfg.stop_frames) {
                walker.step(0.0, 0.0, N);
            }
        }
        let v = urange(rng, cfg.traverse_speed);
        let slope = match behavior {
            Behavior::DiagonalCross => {
                let s = rng.random_range(0.3..0.6);
                if rng.random_bool(0.5) {
                    s
                } else {
                    -s
                }
            }
            _ => 0.0,
        };
        while walker.cur.x < hi {
            walker.step(v, slope * v, C);
        }
        if behavior != Behavior::StopThenCross {
            for _ in 0..irange(rng, cfg.exit_frames) {
                walker.step(walk, 0.0, N);
            }
        }
    }

    if rng.random_bool(0.5) {
        for (b, _) in &mut walker.frames {
            b.x = 1.0 - b.x;
        }
    }
    walker.frames
}

fn build_track(video: &str, id: &str, fps: f64, frames: Vec<(i64, BBox, ActionLabel)>) -> Result<Track, DataError> {
    Track::new(
        video.to_string(),
        id.to_string(),
        fps,
        frames
            .into_iter()
            .map(|(frame, bbox, action)| TrackFrame { frame, bbox, action })
            .collect(),
    )
}

/// Generates clean and perturbed corpora; a pure function of `cfg`.
///
/// Track `i` lives alone in video `vid_{i:04}` as `ped_{i:04}`. An identity
/// split continues the pedestrian under `ped_{i:04}_b`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(1);
    let pick = WeightedIndex::new(cfg.mix.weights()).map_err(|e| SynthError::Config(e.to_string()))?;
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).map_err(|e| SynthError::Config(e.to_string()))?)
    } else {
        None
    };

    let mut corpus = Corpus {
        clean: Vec::with_capacity(cfg.num_tracks),
        perturbed: Vec::with_capacity(cfg.num_tracks),
        behaviors: Vec::with_capacity(cfg.num_tracks),
    };
    for i in 0..cfg.num_tracks {
        let behavior = Behavior::ALL[pick.sample(&mut rng)];
        let frames = template(cfg, behavior, &mut rng);
        let video = format!("vid_{i:04}");
        let id = format!("ped_{i:04}");
        let clean: Vec<(i64, BBox, ActionLabel)> =
            frames.iter().enumerate().map(|(k, &(b, a))| (k as i64, b, a)).collect();

        let mut noisy = clean.clone();
        if let Some(n) = &noise {
            for (_, b, _) in &mut noisy {
                let clean_box = *b;
                b.x += n.sample(&mut noise_rng);
                b.y += n.sample(&mut noise_rng);
                // size floor keeps consecutive boxes within a factor of two
                b.w = (b.w + n.sample(&mut noise_rng)).max(0.75 * clean_box.w);
                b.h = (b.h + n.sample(&mut noise_rng)).max(0.75 * clean_box.h);
            }
        }
        if cfg.dropout_prob > 0.0 {
            let last = noisy.len() - 1;
            let mut k = 0;
            noisy.retain(|_| {
                let keep = k == 0 || k == last || !noise_rng.random_bool(cfg.dropout_prob);
                k += 1;
                keep
            });
        }
        let split = (cfg.id_switch_prob > 0.0 && noise_rng.random_bool(cfg.id_switch_prob) && noisy.len() >= 4)
            .then(|| noise_rng.random_range(2..=noisy.len() - 2));

        match split {
            Some(at) => {
                let tail = noisy.split_off(at);
                corpus.perturbed.push(build_track(&video, &id, cfg.frame_rate, noisy)?);
                corpus
                    .perturbed
                    .push(build_track(&video, &format!("{id}_b"), cfg.frame_rate, tail)?);
            }
            None => corpus.perturbed.push(build_track(&video, &id, cfg.frame_rate, noisy)?),
        }
        corpus.clean.push(build_track(&video, &id, cfg.frame_rate, clean)?);
        corpus.behaviors.push(behavior);
    }
    Ok(corpus)
}

/// Repeats the last observed speed and action over the window's horizon.
pub fn constant_velocity_baseline(window: &ObservationWindow) -> Forecast {
    constant_velocity(window, window.pred_len())
}

fn constant_velocity(window: &ObservationWindow, horizon: usize) -> Forecast {
    let s: SpeedVec = window.last_speed();
    let p = window.observed_actions.last().map_or(0.0, |a| a.as_f64());
    Forecast::new(window.last_position(), vec![s; horizon], vec![p; horizon])
}

/// [`constant_velocity_baseline`] as a [`Forecaster`] with unbounded horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantVelocity;

impl Forecaster for ConstantVelocity {
    fn max_horizon(&self) -> usize {
        usize::MAX
    }

    fn forecast_batch(&self, windows: &[&ObservationWindow], horizon: usize) -> Result<Vec<Forecast>, ModelError> {
        if horizon == 0 {
            return Err(ModelError::Config("horizon must be positive".into()));
        }
        Ok(windows.iter().map(|w| constant_velocity(w, horizon)).collect())
    }
}
