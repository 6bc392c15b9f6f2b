//! Track representation, speed derivation, window sampling and dataset splitting.
//!
//! Coordinates are normalized by image width and height at ingestion. A
//! track's speed at frame `i` is the componentwise box difference to frame
//! `i − 1`, so the first frame of every contiguous run only serves as the
//! anchor of the second.

mod io;
mod types;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use io::{load_tracks, read_tracks, save_tracks, write_tracks, TrackIoError, TRACK_FILE_HEADER};
pub use types::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("invalid bounding box {0:?}")]
    InvalidBBox(BBox),
    #[error("speed {0:?} exceeds the per-frame bound")]
    SpeedBound(SpeedVec),
    #[error("invalid action label {0}; expected 0 or 1")]
    InvalidAction(i64),
    #[error("track `{track_id}` has {len} frame(s); at least 2 are required")]
    TrackTooShort { track_id: String, len: usize },
    #[error("track `{track_id}`: frame {frame} is not after its predecessor")]
    FrameOrder { track_id: String, frame: i64 },
    #[error("track `{track_id}` frame {frame}: {reason}")]
    InvalidFrame {
        track_id: String,
        frame: i64,
        reason: String,
    },
    #[error("track `{track_id}` has a gap before frame {frame} and gap splitting is disabled")]
    FrameGap { track_id: String, frame: i64 },
    #[error("invalid window spec O={obs_len} T={pred_len} stride={stride}")]
    InvalidWindowSpec {
        obs_len: usize,
        pred_len: usize,
        stride: usize,
    },
    #[error("track `{track_id}` window at frame {frame}: cumulative speeds do not reproduce the target boxes exactly")]
    InexactReconstruction { track_id: String, frame: i64 },
    #[error("split ratios {0:?} must be non-negative and sum to 1")]
    InvalidRatios([f64; 3]),
    #[error("{videos} video(s) cannot fill {partitions} non-empty partitions")]
    TooFewVideos { videos: usize, partitions: usize },
    #[error("duplicate frame {frame} in track `{track_id}`")]
    DuplicateFrame { track_id: String, frame: i64 },
}

/// How [`compute_speeds`] treats missing frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GapPolicy {
    /// A gap ends the current segment and starts a new one.
    #[default]
    Split,
    /// Any gap is a data error.
    Reject,
}

/// Derives per-frame speeds, returning one aligned segment per contiguous run.
///
/// Each segment is one frame shorter than the run it came from. Runs of a
/// single frame produce no segment.
pub fn compute_speeds(track: &Track, gaps: GapPolicy) -> Result<Vec<AlignedSegment>, DataError> {
    let frames = track.frames();
    let mut runs: Vec<&[crate::seqdata::TrackFrame]> = Vec::new();
    let mut start = 0;
    for i in 1..frames.len() {
        if frames[i].frame != frames[i - 1].frame + 1 {
            if gaps == GapPolicy::Reject {
                return Err(DataError::FrameGap {
                    track_id: track.track_id.clone(),
                    frame: frames[i].frame,
                });
            }
            runs.push(&frames[start..i]);
            start = i;
        }
    }
    runs.push(&frames[start..]);

    let mut segments = Vec::new();
    for run in runs.into_iter().filter(|r| r.len() >= 2) {
        let mut aligned = Vec::with_capacity(run.len() - 1);
        for pair in run.windows(2) {
            let speed = pair[1].bbox.delta_from(&pair[0].bbox);
            speed.validate().map_err(|_| DataError::InvalidFrame {
                track_id: track.track_id.clone(),
                frame: pair[1].frame,
                reason: format!("speed {speed:?} exceeds the per-frame bound"),
            })?;
            aligned.push(AlignedFrame {
                frame: pair[1].frame,
                bbox: pair[1].bbox,
                speed,
                action: pair[1].action,
            });
        }
        segments.push(AlignedSegment {
            video_id: track.video_id.clone(),
            track_id: track.track_id.clone(),
            anchor: run[0].bbox,
            frames: aligned,
        });
    }
    Ok(segments)
}

/// Cumulative sum of `speeds` starting from `last_observed`.
pub fn reconstruct_positions(last_observed: BBox, speeds: &[SpeedVec]) -> Vec<BBox> {
    let mut out = Vec::with_capacity(speeds.len());
    let mut cur = last_observed;
    for s in speeds {
        cur = cur.advanced(s);
        out.push(cur);
    }
    out
}

/// Samples every window of `spec` from one aligned segment.
///
/// Windows start at offsets `0, stride, 2·stride, …` and are emitted only when
/// all `O + T` frames are available.
pub fn make_windows(segment: &AlignedSegment, spec: &WindowSpec) -> Result<Vec<ObservationWindow>, DataError> {
    let count = spec.count_for(segment.len());
    let mut out = Vec::with_capacity(count);
    let (o, t) = (spec.obs_len, spec.pred_len);
    for w in 0..count {
        let start = w * spec.stride;
        let obs = &segment.frames[start..start + o];
        let fut = &segment.frames[start + o..start + o + t];
        let window = ObservationWindow {
            positions: obs.iter().map(|f| f.bbox).collect(),
            speeds: obs.iter().map(|f| f.speed).collect(),
            observed_actions: obs.iter().map(|f| f.action).collect(),
            target_speeds: fut.iter().map(|f| f.speed).collect(),
            target_positions: fut.iter().map(|f| f.bbox).collect(),
            target_actions: fut.iter().map(|f| f.action).collect(),
            source_video_id: segment.video_id.clone(),
            source_track_id: segment.track_id.clone(),
            start_frame: obs[0].frame,
        };
        verify_window(segment, start, &window)?;
        out.push(window);
    }
    Ok(out)
}

fn verify_window(segment: &AlignedSegment, start: usize, w: &ObservationWindow) -> Result<(), DataError> {
    let mut prev = if start == 0 {
        segment.anchor
    } else {
        segment.frames[start - 1].bbox
    };
    for (p, s) in w.positions.iter().zip(&w.speeds) {
        debug_assert_eq!(*s, p.delta_from(&prev));
        prev = *p;
    }
    if reconstruct_positions(w.last_position(), &w.target_speeds) != w.target_positions {
        return Err(DataError::InexactReconstruction {
            track_id: w.source_track_id.clone(),
            frame: w.start_frame,
        });
    }
    Ok(())
}

/// Builds windows for every track, grouped by video id.
pub fn windows_by_video(
    tracks: &[Track],
    spec: &WindowSpec,
    gaps: GapPolicy,
) -> Result<BTreeMap<String, Vec<ObservationWindow>>, DataError> {
    let mut out: BTreeMap<String, Vec<ObservationWindow>> = BTreeMap::new();
    for track in tracks {
        let entry = out.entry(track.video_id.clone()).or_default();
        for seg in compute_speeds(track, gaps)? {
            entry.extend(make_windows(&seg, spec)?);
        }
    }
    Ok(out)
}

/// Train/validation/test partition of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit<W> {
    pub train: Vec<W>,
    pub val: Vec<W>,
    pub test: Vec<W>,
    pub train_videos: Vec<String>,
    pub val_videos: Vec<String>,
    pub test_videos: Vec<String>,
}

/// Splits whole videos into train/val/test partitions with the given ratios.
///
/// Video counts are allocated by largest remainder; every partition with a
/// positive ratio receives at least one video. Videos are shuffled under
/// `seed` before assignment.
pub fn split_dataset<W>(
    groups: BTreeMap<String, Vec<W>>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit<W>, DataError> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::InvalidRatios(ratios));
    }
    let n = groups.len();
    let counts = allocate(n, ratios)?;

    let mut names: Vec<String> = groups.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    names.shuffle(&mut rng);

    let mut groups = groups;
    let mut take = |names: &[String]| {
        let mut sorted = names.to_vec();
        sorted.sort();
        let windows: Vec<W> = sorted
            .iter()
            .flat_map(|v| groups.remove(v).unwrap_or_default())
            .collect();
        (windows, sorted)
    };
    let (train, train_videos) = take(&names[..counts[0]]);
    let (val, val_videos) = take(&names[counts[0]..counts[0] + counts[1]]);
    let (test, test_videos) = take(&names[counts[0] + counts[1]..]);
    Ok(DatasetSplit {
        train,
        val,
        test,
        train_videos,
        val_videos,
        test_videos,
    })
}

fn allocate(n: usize, ratios: [f64; 3]) -> Result<[usize; 3], DataError> {
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    if n < nonzero {
        return Err(DataError::TooFewVideos {
            videos: n,
            partitions: nonzero,
        });
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    // Tolerate representation error such as 10·0.7 = 7.000000000000001.
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let mut assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if assigned >= n {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            assigned += 1;
        }
    }
    while assigned > n {
        let i = (0..3).max_by_key(|&i| counts[i]).unwrap();
        counts[i] -= 1;
        assigned -= 1;
    }
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok([counts[0], counts[1], counts[2]])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn track(frames: &[(i64, f64)]) -> Track {
        let frames = frames
            .iter()
            .map(|&(f, x)| TrackFrame {
                frame: f,
                bbox: BBox::new(x, 0.5, 0.05, 0.1).unwrap(),
                action: ActionLabel::NotCrossing,
            })
            .collect();
        Track::new("v", "t", 30.0, frames).unwrap()
    }

    #[test]
    fn stationary_track_has_zero_speeds() {
        let t = track(&[(0, 0.4), (1, 0.4), (2, 0.4), (3, 0.4), (4, 0.4)]);
        let segs = compute_speeds(&t, GapPolicy::Reject).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 4);
        assert!(segs[0].frames.iter().all(|f| f.speed == SpeedVec::default()));
    }

    #[test]
    fn linear_motion_has_constant_dx() {
        let frames: Vec<(i64, f64)> = (0..6).map(|i| (i, 0.25 + 0.01 * i as f64)).collect();
        let segs = compute_speeds(&track(&frames), GapPolicy::Split).unwrap();
        for f in &segs[0].frames {
            assert!((f.speed.dx - 0.01).abs() < 1e-15);
            assert_eq!((f.speed.dy, f.speed.dw, f.speed.dh), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn gap_splits_into_segments() {
        let t = track(&[(0, 0.3), (1, 0.31), (2, 0.32), (7, 0.4), (8, 0.41), (9, 0.42)]);
        let segs = compute_speeds(&t, GapPolicy::Split).unwrap();
        assert_eq!(segs.iter().map(|s| s.len()).collect::<Vec<_>>(), vec![2, 2]);
        assert_eq!(segs[1].frames[0].frame, 8);
        assert_eq!(segs[1].anchor.x, 0.4);
        let err = compute_speeds(&t, GapPolicy::Reject).unwrap_err();
        assert_eq!(
            err,
            DataError::FrameGap {
                track_id: "t".into(),
                frame: 7
            }
        );
    }

    #[test]
    fn id_switch_jump_is_rejected() {
        let ok = track(&[(0, 0.1), (1, 0.1), (2, 0.95)]);
        assert!(compute_speeds(&ok, GapPolicy::Split).is_ok());
        let t = track(&[(0, 0.1), (1, 0.1), (2, 1.15)]);
        assert!(matches!(
            compute_speeds(&t, GapPolicy::Split),
            Err(DataError::InvalidFrame { frame: 2, .. })
        ));
    }

    #[test]
    fn window_counts() {
        let spec = |o, t| WindowSpec::new(o, t, 1).unwrap();
        assert_eq!(spec(16, 25).count_for(41), 1);
        assert_eq!(spec(16, 1).count_for(10), 0);
        assert_eq!(spec(16, 16).count_for(50), 19);
        assert_eq!(WindowSpec::new(2, 1, 3).unwrap().count_for(10), 3);
        assert!(WindowSpec::new(0, 1, 1).is_err());
    }

    #[test]
    fn reconstruct_examples() {
        let last = BBox::new(0.5, 0.5, 0.1, 0.2).unwrap();
        assert_eq!(reconstruct_positions(last, &[SpeedVec::default(); 3]), vec![last; 3]);
        let out = reconstruct_positions(last, &[SpeedVec::new(0.1, 0.0, 0.0, 0.0)]);
        assert!((out[0].x - 0.6).abs() < 1e-15);
    }

    #[test]
    fn window_contents_line_up() {
        let frames: Vec<(i64, f64)> = (10..30).map(|i| (i, 0.2 + 0.013 * (i - 10) as f64)).collect();
        let segs = compute_speeds(&track(&frames), GapPolicy::Split).unwrap();
        let ws = make_windows(&segs[0], &WindowSpec::new(4, 3, 2).unwrap()).unwrap();
        assert_eq!(ws.len(), 7);
        assert_eq!(ws[1].start_frame, 13);
        assert_eq!(ws[1].positions[0], segs[0].frames[2].bbox);
        assert_eq!(ws[1].target_positions[0], segs[0].frames[6].bbox);
    }

    #[test]
    fn split_ratios() {
        let groups =
            |n: usize| -> BTreeMap<String, Vec<usize>> { (0..n).map(|i| (format!("v{i:02}"), vec![i; 3])).collect() };
        let s = split_dataset(groups(10), [0.7, 0.1, 0.2], 5).unwrap();
        assert_eq!(
            (s.train_videos.len(), s.val_videos.len(), s.test_videos.len()),
            (7, 1, 2)
        );
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), 30);

        let s = split_dataset(groups(4), [1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(s.train.len(), 12);
        assert!(s.val.is_empty() && s.test.is_empty());

        assert_eq!(
            split_dataset(groups(10), [0.7, 0.1, 0.2], 9),
            split_dataset(groups(10), [0.7, 0.1, 0.2], 9)
        );
        assert_eq!(
            split_dataset(groups(2), [0.7, 0.1, 0.2], 1).unwrap_err(),
            DataError::TooFewVideos {
                videos: 2,
                partitions: 3
            }
        );
        assert!(matches!(
            split_dataset(groups(5), [0.5, 0.1, 0.1], 1),
            Err(DataError::InvalidRatios(_))
        ));
        // small corpora still give every positive partition a video
        let s = split_dataset(groups(3), [0.7, 0.1, 0.2], 1).unwrap();
        assert_eq!(
            (s.train_videos.len(), s.val_videos.len(), s.test_videos.len()),
            (1, 1, 1)
        );
    }
}
