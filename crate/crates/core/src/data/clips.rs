use super::annotations::AnnotationTrack;
use super::labels::{Activity, LabelVector, NUM_CLASSES};
use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};
use crate::exec;
use serde::{Deserialize, Serialize};

/// Lazily addressable episode frames. A frame is `h*w*3` values in `[0, 1]`,
/// row-major `[y][x][channel]`.
pub trait FrameSource: Sync {
    /// (height, width)
    fn dims(&self) -> (usize, usize);
    /// Number of frames in the episode.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn frame(&self, idx: usize) -> Vec<f64>;
}

/// Frames held in memory.
pub struct MemorySource {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl MemorySource {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() % (h * w * 3) != 0 {
            return Err(CoreError::Dimension(format!(
                "frame buffer length {} is not a multiple of {h}x{w}x3",
                data.len()
            )));
        }
        Ok(MemorySource { h, w, data })
    }
}

impl FrameSource for MemorySource {
    fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn len(&self) -> usize {
        self.data.len() / (self.h * self.w * 3)
    }

    fn frame(&self, idx: usize) -> Vec<f64> {
        let sz = self.h * self.w * 3;
        self.data[idx * sz..(idx + 1) * sz].to_vec()
    }
}

/// A fixed-window clip of frames with shape metadata. `frames` has shape
/// `[n_frames, h, w, 3]` with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub fps: f64,
    pub source_id: String,
    pub start_time: f64,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: f64, source_id: String, start_time: f64) -> Result<Self> {
        if frames.shape.len() != 4 || frames.shape[3] != 3 {
            return Err(CoreError::Dimension(format!(
                "clip frames must be [n, h, w, 3], got {:?}",
                frames.shape
            )));
        }
        if frames.data.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::Numeric(
                "clip pixel values must lie in [0, 1]".into(),
            ));
        }
        Ok(VideoClip { frames, fps, source_id, start_time })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape[2]
    }
}

/// Count the frames of window `[win_start, win_start + win_len)` whose
/// timestamps fall inside `[start_ms, end_ms)`, in O(1) interval arithmetic.
/// Frame `k` sits at `1000*k / fps` ms, so `k` is covered iff
/// `start_ms * fps <= 1000*k < end_ms * fps`.
pub fn covered_frames(
    interval: (i64, i64),
    fps: u32,
    win_start: usize,
    win_len: usize,
) -> usize {
    let fps = i64::from(fps);
    let (start_ms, end_ms) = interval;
    let k_first = div_ceil(start_ms * fps, 1000);
    let k_end = div_ceil(end_ms * fps, 1000);
    let lo = k_first.max(win_start as i64);
    let hi = k_end.min((win_start + win_len) as i64);
    (hi - lo).max(0) as usize
}

fn div_ceil(a: i64, b: i64) -> i64 {
    debug_assert!(b > 0);
    if a >= 0 {
        (a + b - 1) / b
    } else {
        -((-a) / b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractOptions {
    pub window_s: f64,
    pub stride_s: f64,
    pub fps: u32,
}

impl Default for ExtractOptions {
    fn default() -> Self {
        ExtractOptions { window_s: 3.0, stride_s: 3.0, fps: 25 }
    }
}

/// A window whose labels activated, before any frames are materialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    pub index: usize,
    pub start_frame: usize,
    pub n_frames: usize,
    pub start_s: f64,
    pub labels: LabelVector,
}

/// A window excluded because both exclusive labels activated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowConflict {
    pub index: usize,
    pub start_s: f64,
    pub ventilation_frames: usize,
    pub suction_frames: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub conflicts: Vec<WindowConflict>,
    /// Windows whose labels have an activity without a visible baby; kept,
    /// but physically suspicious.
    pub warnings: Vec<usize>,
}

/// Tile `n_frames` of an episode into windows and activate each label on the
/// >= 50% coverage rule. Windows where ventilation and suction both activate
/// are excluded and reported. Episodes shorter than one window yield an
/// empty list.
pub fn extract_labeled_windows(
    n_frames: usize,
    tracks: &[AnnotationTrack],
    opts: &ExtractOptions,
) -> Result<(Vec<LabeledWindow>, ExtractionReport)> {
    if opts.window_s <= 0.0 || opts.stride_s <= 0.0 {
        return Err(CoreError::Parameter(
            "window_s and stride_s must be positive".into(),
        ));
    }
    if opts.fps == 0 {
        return Err(CoreError::Parameter("fps must be positive".into()));
    }
    let win_len = (opts.window_s * f64::from(opts.fps)).round() as usize;
    let stride = (opts.stride_s * f64::from(opts.fps)).round() as usize;
    if win_len == 0 || stride == 0 {
        return Err(CoreError::Parameter(
            "window and stride must span at least one frame".into(),
        ));
    }

    let mut windows = Vec::new();
    let mut report = ExtractionReport::default();
    let mut index = 0;
    let mut start = 0;
    while start + win_len <= n_frames {
        let mut covered = [0usize; NUM_CLASSES];
        for track in tracks {
            let mut total = 0;
            for &iv in &track.intervals {
                total += covered_frames(iv, opts.fps, start, win_len);
            }
            covered[track.label.index()] = total;
        }
        // Inclusive reading of "minimum 50%": exactly half activates.
        let active = covered.map(|c| 2 * c >= win_len);
        let start_s = start as f64 / f64::from(opts.fps);

        if active[Activity::Ventilation.index()] && active[Activity::Suction.index()] {
            report.conflicts.push(WindowConflict {
                index,
                start_s,
                ventilation_frames: covered[Activity::Ventilation.index()],
                suction_frames: covered[Activity::Suction.index()],
            });
        } else {
            let labels = LabelVector::new(active).expect("exclusion checked above");
            if labels.activity_without_baby() {
                report.warnings.push(index);
            }
            windows.push(LabeledWindow {
                index,
                start_frame: start,
                n_frames: win_len,
                start_s,
                labels,
            });
        }
        index += 1;
        start += stride;
    }
    Ok((windows, report))
}

/// Materialize labeled windows into full clips.
pub fn extract_clips(
    source: &dyn FrameSource,
    source_id: &str,
    tracks: &[AnnotationTrack],
    opts: &ExtractOptions,
) -> Result<(Vec<(VideoClip, LabelVector)>, ExtractionReport)> {
    let (windows, report) = extract_labeled_windows(source.len(), tracks, opts)?;
    let (h, w) = source.dims();
    let clips = exec::par_map_ref(&windows, |win| {
        let mut data = Vec::with_capacity(win.n_frames * h * w * 3);
        for k in 0..win.n_frames {
            data.extend_from_slice(&source.frame(win.start_frame + k));
        }
        let frames = Tensor::new(vec![win.n_frames, h, w, 3], data).expect("sized above");
        let clip = VideoClip {
            frames,
            fps: f64::from(opts.fps),
            source_id: source_id.to_string(),
            start_time: win.start_s,
        };
        (clip, win.labels)
    });
    Ok((clips, report))
}

/// Uniformly spaced frame indices with pinned endpoints: index
/// `i * (n_f - 1) / (t - 1)` truncated, for `i = 0..t`. `t = 1` picks the
/// middle frame.
pub fn resample_indices(n_f: usize, t: usize) -> Result<Vec<usize>> {
    if t == 0 || t > n_f {
        return Err(CoreError::Parameter(format!(
            "target frame count {t} must be in 1..={n_f}"
        )));
    }
    if t == 1 {
        return Ok(vec![n_f / 2]);
    }
    Ok((0..t).map(|i| i * (n_f - 1) / (t - 1)).collect())
}

/// Bilinear resize with half-pixel centers; same-size input is an identity.
pub fn resize_bilinear(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let mut out = vec![0.0; out_h * out_w * 3];
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..3 {
                let p00 = src[(y0 * w + x0) * 3 + ch];
                let p01 = src[(y0 * w + x1) * 3 + ch];
                let p10 = src[(y1 * w + x0) * 3 + ch];
                let p11 = src[(y1 * w + x1) * 3 + ch];
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                out[(oy * out_w + ox) * 3 + ch] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Select `t` frames at uniform temporal indices and resize them to the
/// model input resolution. Values stay in `[0, 1]`.
pub fn resample_clip(clip: &VideoClip, t: usize, out_h: usize, out_w: usize) -> Result<VideoClip> {
    let n_f = clip.n_frames();
    let indices = resample_indices(n_f, t)?;
    let (h, w) = (clip.height(), clip.width());
    let frame_sz = h * w * 3;
    let mut data = Vec::with_capacity(t * out_h * out_w * 3);
    for &idx in &indices {
        let frame = &clip.frames.data[idx * frame_sz..(idx + 1) * frame_sz];
        data.extend(resize_bilinear(frame, h, w, out_h, out_w));
    }
    let duration = n_f as f64 / clip.fps;
    VideoClip::new(
        Tensor::new(vec![t, out_h, out_w, 3], data)?,
        t as f64 / duration,
        clip.source_id.clone(),
        clip.start_time,
    )
}
