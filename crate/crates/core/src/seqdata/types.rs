use std::fmt;

use super::DataError;

/// Lower/upper bound on box centers; boxes may partially leave the frame.
pub const CENTER_MIN: f64 = -0.2;
pub const CENTER_MAX: f64 = 1.2;
/// Upper bound (exclusive) on the magnitude of any per-frame speed component.
pub const SPEED_LIMIT: f64 = 1.0;

/// Image dimensions in pixels, used to map normalized coordinates back to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub const JAAD: ImageSize = ImageSize {
        width: 1920.0,
        height: 1080.0,
    };

    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }
}

impl fmt::Display for ImageSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

/// Bounding box in normalized image units: center `(x, y)` plus width and height.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Validated constructor for ingested data.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DataError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        let centers_ok = (CENTER_MIN..=CENTER_MAX).contains(&self.x) && (CENTER_MIN..=CENTER_MAX).contains(&self.y);
        if !finite || self.w <= 0.0 || self.h <= 0.0 || !centers_ok {
            return Err(DataError::InvalidBBox(*self));
        }
        Ok(())
    }

    /// Converts a pixel-space box to normalized units.
    pub fn from_pixels(x: f64, y: f64, w: f64, h: f64, image: ImageSize) -> Result<Self, DataError> {
        Self::new(x / image.width, y / image.height, w / image.width, h / image.height)
    }

    pub fn to_pixels(&self, image: ImageSize) -> [f64; 4] {
        [
            self.x * image.width,
            self.y * image.height,
            self.w * image.width,
            self.h * image.height,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }

    /// Componentwise `self − prev`.
    pub fn delta_from(&self, prev: &BBox) -> SpeedVec {
        SpeedVec {
            dx: self.x - prev.x,
            dy: self.y - prev.y,
            dw: self.w - prev.w,
            dh: self.h - prev.h,
        }
    }

    pub fn advanced(&self, s: &SpeedVec) -> BBox {
        BBox {
            x: self.x + s.dx,
            y: self.y + s.dy,
            w: self.w + s.dw,
            h: self.h + s.dh,
        }
    }
}

/// Per-frame box delta in normalized units per frame.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SpeedVec {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl SpeedVec {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        Self { dx, dy, dw, dh }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let ok = self.to_array().iter().all(|v| v.is_finite() && v.abs() < SPEED_LIMIT);
        if ok {
            Ok(())
        } else {
            Err(DataError::SpeedBound(*self))
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dw: a[2],
            dh: a[3],
        }
    }
}

/// Binary per-frame action: crossing or not crossing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum ActionLabel {
    #[default]
    NotCrossing,
    Crossing,
}

impl ActionLabel {
    pub fn from_value(v: u8) -> Result<Self, DataError> {
        match v {
            0 => Ok(Self::NotCrossing),
            1 => Ok(Self::Crossing),
            other => Err(DataError::InvalidAction(other as i64)),
        }
    }

    pub fn value(self) -> u8 {
        match self {
            Self::NotCrossing => 0,
            Self::Crossing => 1,
        }
    }

    pub fn as_f64(self) -> f64 {
        f64::from(self.value())
    }

    pub fn is_crossing(self) -> bool {
        self == Self::Crossing
    }

    /// Short tag: `C` for crossing, `NC` otherwise.
    pub fn tag(self) -> &'static str {
        match self {
            Self::Crossing => "C",
            Self::NotCrossing => "NC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackFrame {
    pub frame: i64,
    pub bbox: BBox,
    pub action: ActionLabel,
}

/// Observed box sequence of one pedestrian identity within one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub video_id: String,
    pub track_id: String,
    pub frame_rate: f64,
    frames: Vec<TrackFrame>,
}

impl Track {
    pub fn new(
        video_id: impl Into<String>,
        track_id: impl Into<String>,
        frame_rate: f64,
        frames: Vec<TrackFrame>,
    ) -> Result<Self, DataError> {
        let track_id = track_id.into();
        if frames.len() < 2 {
            return Err(DataError::TrackTooShort {
                track_id,
                len: frames.len(),
            });
        }
        if let Some(w) = frames.windows(2).find(|w| w[1].frame <= w[0].frame) {
            return Err(DataError::FrameOrder {
                track_id,
                frame: w[1].frame,
            });
        }
        for f in &frames {
            f.bbox.validate().map_err(|_| DataError::InvalidFrame {
                track_id: track_id.clone(),
                frame: f.frame,
                reason: format!("invalid box {:?}", f.bbox),
            })?;
        }
        Ok(Self {
            video_id: video_id.into(),
            track_id,
            frame_rate,
            frames,
        })
    }

    pub fn frames(&self) -> &[TrackFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// One frame of a track paired with the speed that led into it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedFrame {
    pub frame: i64,
    pub bbox: BBox,
    pub speed: SpeedVec,
    pub action: ActionLabel,
}

/// Contiguous run of aligned frames from one track.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSegment {
    pub video_id: String,
    pub track_id: String,
    /// Box of the frame preceding `frames[0]`; the first frame's speed is measured from it.
    pub anchor: BBox,
    pub frames: Vec<AlignedFrame>,
}

impl AlignedSegment {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Observation and prediction lengths plus the sampling stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub obs_len: usize,
    pub pred_len: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(obs_len: usize, pred_len: usize, stride: usize) -> Result<Self, DataError> {
        if obs_len == 0 || pred_len == 0 || stride == 0 {
            return Err(DataError::InvalidWindowSpec {
                obs_len,
                pred_len,
                stride,
            });
        }
        Ok(Self {
            obs_len,
            pred_len,
            stride,
        })
    }

    /// Number of windows for an aligned segment of length `len`.
    pub fn count_for(&self, len: usize) -> usize {
        let need = self.obs_len + self.pred_len;
        if len < need {
            0
        } else {
            (len - need) / self.stride + 1
        }
    }
}

/// Observed history of `O` frames with the `T` frames that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    pub positions: Vec<BBox>,
    pub speeds: Vec<SpeedVec>,
    pub observed_actions: Vec<ActionLabel>,
    pub target_speeds: Vec<SpeedVec>,
    pub target_positions: Vec<BBox>,
    pub target_actions: Vec<ActionLabel>,
    pub source_video_id: String,
    pub source_track_id: String,
    /// Frame index of `positions[0]`.
    pub start_frame: i64,
}

impl ObservationWindow {
    pub fn obs_len(&self) -> usize {
        self.positions.len()
    }

    pub fn pred_len(&self) -> usize {
        self.target_speeds.len()
    }

    pub fn last_position(&self) -> BBox {
        *self.positions.last().expect("windows have at least one observed frame")
    }

    pub fn last_speed(&self) -> SpeedVec {
        *self.speeds.last().expect("windows have at least one observed frame")
    }

    /// Copy with the targets truncated to the first `horizon` steps.
    pub fn truncated(&self, horizon: usize) -> ObservationWindow {
        let h = horizon.min(self.pred_len());
        ObservationWindow {
            target_speeds: self.target_speeds[..h].to_vec(),
            target_positions: self.target_positions[..h].to_vec(),
            target_actions: self.target_actions[..h].to_vec(),
            ..self.clone()
        }
    }
}
