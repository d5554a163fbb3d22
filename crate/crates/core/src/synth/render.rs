//! Deterministic frame rendering for scenario scripts. Activity signatures
//! are motion-coded: ventilation and stimulation draw the *same* disk at the
//! *same* anchor with the same intensity and sweep amplitude, differing only
//! in oscillation frequency, so a single static frame cannot tell them
//! apart; suction is a thin line translating into the blob. Appearance is a
//! pure function of `(script, h, w, fps)`.

use super::script::ScenarioScript;
use crate::data::{Activity, AnnotationTrack, FrameSource, MemorySource};
use crate::rng::substream_indexed;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub h: usize,
    pub w: usize,
    pub fps: u32,
    pub noise_std: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { h: 64, w: 64, fps: 25, noise_std: 0.05 }
    }
}

const BACKGROUND: f64 = 0.10;
const BLOB_VALUE: f64 = 0.55;
const DISK_VALUE: f64 = 0.95;
const LINE_VALUE: f64 = 0.85;
/// Oscillation frequencies (Hz); integer frame periods at 25 fps.
const VENT_HZ: f64 = 1.0;
const STIM_HZ: f64 = 2.5;
const SUCT_HZ: f64 = 0.5;

/// Lazy frame source rendering a script on demand.
pub struct EpisodeRender {
    pub script: ScenarioScript,
    pub cfg: RenderConfig,
}

impl EpisodeRender {
    pub fn new(script: ScenarioScript, cfg: RenderConfig) -> Self {
        EpisodeRender { script, cfg }
    }

    /// Geometry derived from the frame size.
    fn geom(&self) -> Geometry {
        let (h, w) = (self.cfg.h as f64, self.cfg.w as f64);
        Geometry {
            cy: 0.5 * h,
            cx: 0.5 * w,
            blob_ry: 0.28 * h,
            blob_rx: 0.38 * w,
            anchor_y: 0.5 * h - 0.28 * h,
            anchor_x: 0.5 * w,
            disk_r: (h / 12.0).max(2.0),
            sweep: 0.15 * w,
            line_half: (h / 32.0).max(1.0),
            line_reach: 0.45 * w,
        }
    }

    /// Disk sweep extreme used by the regional intensity checks.
    pub fn probe_region_center(&self) -> (f64, f64) {
        let g = self.geom();
        (g.anchor_y, g.anchor_x - g.sweep)
    }

    pub fn probe_region_radius(&self) -> f64 {
        self.geom().disk_r
    }

    /// Render without reading; used by tests that need noiseless output.
    pub fn materialize(&self) -> MemorySource {
        let mut data = Vec::with_capacity(self.len() * self.cfg.h * self.cfg.w * 3);
        for k in 0..self.len() {
            data.extend(self.frame(k));
        }
        MemorySource::new(self.cfg.h, self.cfg.w, data).expect("sized render")
    }
}

struct Geometry {
    cy: f64,
    cx: f64,
    blob_ry: f64,
    blob_rx: f64,
    anchor_y: f64,
    anchor_x: f64,
    disk_r: f64,
    sweep: f64,
    line_half: f64,
    line_reach: f64,
}

impl FrameSource for EpisodeRender {
    fn dims(&self) -> (usize, usize) {
        (self.cfg.h, self.cfg.w)
    }

    fn len(&self) -> usize {
        (self.script.duration_s * f64::from(self.cfg.fps)).round() as usize
    }

    fn frame(&self, idx: usize) -> Vec<f64> {
        let (h, w) = (self.cfg.h, self.cfg.w);
        let g = self.geom();
        let t = idx as f64 / f64::from(self.cfg.fps);
        let mut lum = vec![BACKGROUND; h * w];

        if self.script.active_at(Activity::BabyOnTable, t) {
            fill_ellipse(&mut lum, h, w, g.cy, g.cx, g.blob_ry, g.blob_rx, BLOB_VALUE);
        }

        if let Some(rel) = event_time(&self.script, Activity::Suction, t) {
            // Tip translates from the right edge into the blob and back.
            let p = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * SUCT_HZ * rel).cos());
            let tip = (w as f64 - 1.0) - p * g.line_reach;
            fill_hline(&mut lum, h, w, g.cy, tip, w as f64 - 1.0, g.line_half, LINE_VALUE);
        }

        for (activity, hz) in [(Activity::Ventilation, VENT_HZ), (Activity::Stimulation, STIM_HZ)] {
            if let Some(rel) = event_time(&self.script, activity, t) {
                let offset = g.sweep * (2.0 * std::f64::consts::PI * hz * rel).sin();
                fill_disk(&mut lum, h, w, g.anchor_y, g.anchor_x + offset, g.disk_r, DISK_VALUE);
            }
        }

        let mut rng = substream_indexed(self.script.seed, "render-noise", idx as u64);
        let mut out = Vec::with_capacity(h * w * 3);
        for v in lum {
            for _ in 0..3 {
                let n: f64 = StandardNormal.sample(&mut rng);
                out.push((v + self.cfg.noise_std * n).clamp(0.0, 1.0));
            }
        }
        out
    }
}

/// Seconds since the start of the event of `activity` covering `t`, if any.
fn event_time(script: &ScenarioScript, activity: Activity, t: f64) -> Option<f64> {
    script
        .events_of(activity)
        .find(|e| e.start_s <= t && t < e.end_s)
        .map(|e| t - e.start_s)
}

fn fill_ellipse(
    lum: &mut [f64],
    h: usize,
    w: usize,
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    value: f64,
) {
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                lum[y * w + x] = value;
            }
        }
    }
}

fn fill_disk(lum: &mut [f64], h: usize, w: usize, cy: f64, cx: f64, r: f64, value: f64) {
    let y0 = ((cy - r).floor().max(0.0)) as usize;
    let y1 = ((cy + r).ceil().min(h as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in 0..w {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= r * r {
                lum[y * w + x] = value;
            }
        }
    }
}

fn fill_hline(
    lum: &mut [f64],
    h: usize,
    w: usize,
    cy: f64,
    x_from: f64,
    x_to: f64,
    half_thickness: f64,
    value: f64,
) {
    let y0 = ((cy - half_thickness).floor().max(0.0)) as usize;
    let y1 = ((cy + half_thickness).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = (x_from.floor().max(0.0)) as usize;
    let x1 = (x_to.ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        if (y as f64 - cy).abs() > half_thickness {
            continue;
        }
        for x in x0..=x1 {
            lum[y * w + x] = value;
        }
    }
}

/// Render a script into a lazy frame source plus annotation tracks exactly
/// mirroring its events.
pub fn render_episode(
    script: ScenarioScript,
    cfg: RenderConfig,
) -> (EpisodeRender, Vec<AnnotationTrack>) {
    let mut tracks = Vec::new();
    for activity in Activity::ALL {
        let intervals: Vec<(i64, i64)> = script
            .events_of(activity)
            .map(|e| ((e.start_s * 1000.0).round() as i64, (e.end_s * 1000.0).round() as i64))
            .collect();
        if !intervals.is_empty() {
            tracks.push(AnnotationTrack::new(activity, intervals));
        }
    }
    (EpisodeRender::new(script, cfg), tracks)
}
