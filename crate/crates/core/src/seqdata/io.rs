//! Line-delimited track files.
//!
//! ```text
//! #pedcast-tracks v1
//! #frame_rate=30
//! {"video_id":"vid_0000","track_id":"ped_0000","frame":0,"x":0.15,"y":0.6,"w":0.04,"h":0.1,"action":0}
//! ```
//!
//! The first line is a mandatory header. Further `#` lines are comments,
//! except `#frame_rate=<fps>`, which sets the frame rate of every track in the
//! file (30 when absent). Each record is one JSON object; records are sorted
//! by `(video_id, track_id, frame)`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionLabel, BBox, DataError, Track, TrackFrame};

pub const TRACK_FILE_HEADER: &str = "#pedcast-tracks v1";
const FRAME_RATE_PREFIX: &str = "#frame_rate=";
const DEFAULT_FRAME_RATE: f64 = 30.0;

#[derive(Debug, Error)]
pub enum TrackIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line 1: missing `{TRACK_FILE_HEADER}` header")]
    MissingHeader,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {source}")]
    Data { line: usize, source: DataError },
    #[error("tracks with different frame rates cannot share one file")]
    MixedFrameRate,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    video_id: String,
    track_id: String,
    frame: i64,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    action: u8,
}

pub fn read_tracks<R: BufRead>(reader: R) -> Result<Vec<Track>, TrackIoError> {
    let mut frame_rate = DEFAULT_FRAME_RATE;
    let mut groups: BTreeMap<(String, String), Vec<(usize, TrackFrame)>> = BTreeMap::new();
    let mut saw_header = false;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim();
        if !saw_header {
            if trimmed != TRACK_FILE_HEADER {
                return Err(TrackIoError::MissingHeader);
            }
            saw_header = true;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix(FRAME_RATE_PREFIX) {
            frame_rate = rest
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite() && *f > 0.0)
                .ok_or_else(|| TrackIoError::Parse {
                    line: lineno,
                    msg: format!("invalid frame rate `{rest}`"),
                })?;
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let rec: Record = serde_json::from_str(trimmed).map_err(|e| TrackIoError::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        let data_err = |source| TrackIoError::Data { line: lineno, source };
        let bbox = BBox::new(rec.x, rec.y, rec.w, rec.h).map_err(data_err)?;
        let action = ActionLabel::from_value(rec.action).map_err(data_err)?;
        groups.entry((rec.video_id, rec.track_id)).or_default().push((
            lineno,
            TrackFrame {
                frame: rec.frame,
                bbox,
                action,
            },
        ));
    }

    let mut tracks = Vec::with_capacity(groups.len());
    for ((video_id, track_id), mut frames) in groups {
        frames.sort_by_key(|(_, f)| f.frame);
        if let Some(w) = frames.windows(2).find(|w| w[0].1.frame == w[1].1.frame) {
            return Err(TrackIoError::Data {
                line: w[1].0,
                source: DataError::DuplicateFrame {
                    track_id,
                    frame: w[1].1.frame,
                },
            });
        }
        let first_line = frames.iter().map(|(l, _)| *l).min().unwrap_or(0);
        let frames = frames.into_iter().map(|(_, f)| f).collect();
        let track = Track::new(video_id, track_id, frame_rate, frames).map_err(|source| TrackIoError::Data {
            line: first_line,
            source,
        })?;
        tracks.push(track);
    }
    Ok(tracks)
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<Vec<Track>, TrackIoError> {
    read_tracks(BufReader::new(File::open(path)?))
}

pub fn write_tracks<W: Write>(mut writer: W, tracks: &[Track]) -> Result<(), TrackIoError> {
    let mut sorted: Vec<&Track> = tracks.iter().collect();
    sorted.sort_by(|a, b| (&a.video_id, &a.track_id).cmp(&(&b.video_id, &b.track_id)));
    if let Some(w) = sorted
        .windows(2)
        .find(|w| w[0].video_id == w[1].video_id && w[0].track_id == w[1].track_id)
    {
        return Err(TrackIoError::Data {
            line: 0,
            source: DataError::DuplicateFrame {
                track_id: w[1].track_id.clone(),
                frame: w[1].frames()[0].frame,
            },
        });
    }
    writeln!(writer, "{TRACK_FILE_HEADER}")?;
    if let Some(first) = sorted.first() {
        if sorted.iter().any(|t| t.frame_rate != first.frame_rate) {
            return Err(TrackIoError::MixedFrameRate);
        }
        writeln!(writer, "{FRAME_RATE_PREFIX}{}", first.frame_rate)?;
    }
    for t in sorted {
        for f in t.frames() {
            let rec = Record {
                video_id: t.video_id.clone(),
                track_id: t.track_id.clone(),
                frame: f.frame,
                x: f.bbox.x,
                y: f.bbox.y,
                w: f.bbox.w,
                h: f.bbox.h,
                action: f.action.value(),
            };
            let line = serde_json::to_string(&rec).map_err(std::io::Error::other)?;
            writeln!(writer, "{line}")?;
        }
    }
    writer.flush()?;
    Ok(())
}

pub fn save_tracks(tracks: &[Track], path: impl AsRef<Path>) -> Result<(), TrackIoError> {
    write_tracks(BufWriter::new(File::create(path)?), tracks)
}
