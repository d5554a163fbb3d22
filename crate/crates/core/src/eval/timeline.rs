use std::collections::BTreeMap;

use super::metrics::PredictionSet;
use crate::data::{Activity, NUM_CLASSES};
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// A labeled activity interval stitched from per-clip predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineSegment {
    pub activity: Activity,
    pub start_s: f64,
    pub end_s: f64,
    pub source_id: String,
}

/// A ventilation/suction overlap found after stitching; the losing side was
/// cut back and the affected span is recorded here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExclusionViolation {
    pub source_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub kept: Activity,
    pub ventilation_mean_prob: f64,
    pub suction_mean_prob: f64,
    pub tie: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub segments: Vec<TimelineSegment>,
    pub violations: Vec<ExclusionViolation>,
}

#[derive(Debug, Clone)]
struct RawSegment {
    start_s: f64,
    end_s: f64,
    mean_prob: f64,
}

/// Merge consecutive positive clips into per-class segments, drop segments
/// shorter than `min_duration_s`, then resolve ventilation/suction overlaps
/// by keeping the segment with the higher mean probability and logging the
/// violation. Ties keep ventilation and are flagged.
pub fn stitch_timeline(
    preds: &PredictionSet,
    threshold: f64,
    min_duration_s: f64,
) -> Result<Timeline> {
    preds.validate()?;
    let mut by_episode: BTreeMap<&str, Vec<&super::metrics::ClipPrediction>> = BTreeMap::new();
    for clip in &preds.clips {
        by_episode.entry(&clip.source_id).or_default().push(clip);
    }

    let mut timeline = Timeline::default();
    for (source_id, mut clips) in by_episode {
        clips.sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).unwrap());
        for pair in clips.windows(2) {
            if pair[1].start_s < pair[0].start_s + pair[0].window_s - 1e-9 {
                return Err(CoreError::Parameter(format!(
                    "overlapping clips in episode {source_id} at {}s and {}s",
                    pair[0].start_s, pair[1].start_s
                )));
            }
        }

        let mut per_class: [Vec<RawSegment>; NUM_CLASSES] = Default::default();
        for activity in Activity::ALL {
            let c = activity.index();
            let mut open: Option<(f64, f64, Vec<f64>)> = None;
            for clip in &clips {
                let positive = clip.probs[c].map(|p| p >= threshold).unwrap_or(false);
                let end = clip.start_s + clip.window_s;
                match (&mut open, positive) {
                    (Some((_, open_end, probs)), true)
                        if (clip.start_s - *open_end).abs() < 1e-9 =>
                    {
                        *open_end = end;
                        probs.push(clip.probs[c].unwrap());
                    }
                    (state, positive) => {
                        if let Some((s, e, probs)) = state.take() {
                            per_class[c].push(seal(s, e, probs));
                        }
                        if positive {
                            *state = Some((clip.start_s, end, vec![clip.probs[c].unwrap()]));
                        }
                    }
                }
            }
            if let Some((s, e, probs)) = open {
                per_class[c].push(seal(s, e, probs));
            }
            per_class[c].retain(|seg| seg.end_s - seg.start_s >= min_duration_s - 1e-9);
        }

        resolve_exclusion(source_id, &mut per_class, &mut timeline.violations);

        for activity in Activity::ALL {
            for seg in &per_class[activity.index()] {
                timeline.segments.push(TimelineSegment {
                    activity,
                    start_s: seg.start_s,
                    end_s: seg.end_s,
                    source_id: source_id.to_string(),
                });
            }
        }
    }
    Ok(timeline)
}

fn seal(start_s: f64, end_s: f64, probs: Vec<f64>) -> RawSegment {
    let mean_prob = probs.iter().sum::<f64>() / probs.len() as f64;
    RawSegment { start_s, end_s, mean_prob }
}

fn resolve_exclusion(
    source_id: &str,
    per_class: &mut [Vec<RawSegment>; NUM_CLASSES],
    violations: &mut Vec<ExclusionViolation>,
) {
    let vent_idx = Activity::Ventilation.index();
    let suct_idx = Activity::Suction.index();
    loop {
        let mut found: Option<(usize, usize, f64, f64)> = None;
        'outer: for (vi, v) in per_class[vent_idx].iter().enumerate() {
            for (si, s) in per_class[suct_idx].iter().enumerate() {
                let lo = v.start_s.max(s.start_s);
                let hi = v.end_s.min(s.end_s);
                if hi - lo > 1e-9 {
                    found = Some((vi, si, lo, hi));
                    break 'outer;
                }
            }
        }
        let Some((vi, si, lo, hi)) = found else { break };
        let v_mean = per_class[vent_idx][vi].mean_prob;
        let s_mean = per_class[suct_idx][si].mean_prob;
        let tie = (v_mean - s_mean).abs() < 1e-12;
        let vent_wins = tie || v_mean > s_mean;
        violations.push(ExclusionViolation {
            source_id: source_id.to_string(),
            start_s: lo,
            end_s: hi,
            kept: if vent_wins { Activity::Ventilation } else { Activity::Suction },
            ventilation_mean_prob: v_mean,
            suction_mean_prob: s_mean,
            tie,
        });
        let loser_idx = if vent_wins { suct_idx } else { vent_idx };
        let loser_at = if vent_wins { si } else { vi };
        let seg = per_class[loser_idx].remove(loser_at);
        if seg.start_s < lo - 1e-9 {
            per_class[loser_idx].push(RawSegment {
                start_s: seg.start_s,
                end_s: lo,
                mean_prob: seg.mean_prob,
            });
        }
        if seg.end_s > hi + 1e-9 {
            per_class[loser_idx].push(RawSegment {
                start_s: hi,
                end_s: seg.end_s,
                mean_prob: seg.mean_prob,
            });
        }
        per_class[loser_idx]
            .sort_by(|a, b| a.start_s.partial_cmp(&b.start_s).unwrap());
    }
}

/// Re-sample a timeline back into per-window flags: a window is positive for
/// a class iff one segment fully covers it.
pub fn rewindow(
    timeline: &Timeline,
    windows: &[(String, f64, f64)],
) -> Vec<[bool; NUM_CLASSES]> {
    windows
        .iter()
        .map(|(source_id, start_s, window_s)| {
            let end = start_s + window_s;
            let mut flags = [false; NUM_CLASSES];
            for seg in &timeline.segments {
                if &seg.source_id == source_id
                    && seg.start_s <= start_s + 1e-9
                    && end <= seg.end_s + 1e-9
                {
                    flags[seg.activity.index()] = true;
                }
            }
            flags
        })
        .collect()
}

/// Export segments as `source_id,activity,start_s,end_s` CSV.
pub fn timeline_to_csv(timeline: &Timeline) -> String {
    let mut out = String::from("source_id,activity,start_s,end_s\n");
    for seg in &timeline.segments {
        out.push_str(&format!(
            "{},{},{:.3},{:.3}\n",
            seg.source_id,
            seg.activity.name(),
            seg.start_s,
            seg.end_s
        ));
    }
    out
}

const SVG_COLORS: [&str; NUM_CLASSES] = ["#d9534f", "#f0ad4e", "#5bc0de", "#5cb85c"];

/// Static Gantt-style rendering of one episode's segments.
pub fn timeline_to_svg(timeline: &Timeline, source_id: &str, duration_s: f64) -> String {
    let width = 900.0;
    let row_h = 34.0;
    let left = 110.0;
    let height = row_h * NUM_CLASSES as f64 + 50.0;
    let scale = (width - left - 20.0) / duration_s.max(1e-9);
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    svg.push_str(&format!(
        r#"<text x="8" y="18" font-family="monospace" font-size="14">{source_id}</text>"#
    ));
    for (i, activity) in Activity::ALL.iter().enumerate() {
        let y = 30.0 + i as f64 * row_h;
        svg.push_str(&format!(
            r#"<text x="8" y="{:.1}" font-family="monospace" font-size="12">{}</text>"#,
            y + row_h * 0.6,
            activity.name()
        ));
        svg.push_str(&format!(
            r#"<line x1="{left}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ccc"/>"#,
            y + row_h - 4.0,
            width - 20.0,
            y + row_h - 4.0
        ));
        for seg in timeline
            .segments
            .iter()
            .filter(|s| s.source_id == source_id && s.activity == *activity)
        {
            let x = left + seg.start_s * scale;
            let w = (seg.end_s - seg.start_s) * scale;
            svg.push_str(&format!(
                r#"<rect x="{x:.1}" y="{:.1}" width="{w:.1}" height="{:.1}" fill="{}" rx="2"/>"#,
                y + 4.0,
                row_h - 12.0,
                SVG_COLORS[i]
            ));
        }
    }
    svg.push_str(&format!(
        r#"<text x="{left}" y="{:.1}" font-family="monospace" font-size="10">0s</text>"#,
        height - 6.0
    ));
    svg.push_str(&format!(
        r#"<text x="{:.1}" y="{:.1}" font-family="monospace" font-size="10">{duration_s:.0}s</text>"#,
        width - 50.0,
        height - 6.0
    ));
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::metrics::ClipPrediction;

    fn clip(id: &str, start: f64, probs: [Option<f64>; 4], truth: [bool; 4]) -> ClipPrediction {
        ClipPrediction {
            clip_id: id.into(),
            source_id: "ep0".into(),
            start_s: start,
            window_s: 3.0,
            probs,
            truth,
        }
    }

    #[test]
    fn consecutive_positive_clips_merge() {
        let preds = PredictionSet {
            clips: vec![
                clip("a", 0.0, [None, Some(0.9), None, None], [false; 4]),
                clip("b", 3.0, [None, Some(0.8), None, None], [false; 4]),
                clip("c", 6.0, [None, Some(0.1), None, None], [false; 4]),
            ],
        };
        let tl = stitch_timeline(&preds, 0.5, 0.0).unwrap();
        assert_eq!(tl.segments.len(), 1);
        let seg = &tl.segments[0];
        assert_eq!(seg.activity, Activity::Stimulation);
        assert_eq!((seg.start_s, seg.end_s), (0.0, 6.0));
    }

    #[test]
    fn short_segments_are_dropped() {
        let preds = PredictionSet {
            clips: vec![
                clip("a", 0.0, [None, Some(0.9), None, None], [false; 4]),
                clip("b", 3.0, [None, Some(0.2), None, None], [false; 4]),
            ],
        };
        let tl = stitch_timeline(&preds, 0.5, 4.0).unwrap();
        assert!(tl.segments.is_empty());
        // min_duration 0 keeps it
        let tl = stitch_timeline(&preds, 0.5, 0.0).unwrap();
        assert_eq!(tl.segments.len(), 1);
    }

    #[test]
    fn exclusion_overlap_keeps_higher_mean_probability() {
        let preds = PredictionSet {
            clips: vec![clip(
                "a",
                0.0,
                [Some(0.9), None, Some(0.6), None],
                [false; 4],
            )],
        };
        let tl = stitch_timeline(&preds, 0.5, 0.0).unwrap();
        assert_eq!(tl.segments.len(), 1);
        assert_eq!(tl.segments[0].activity, Activity::Ventilation);
        assert_eq!(tl.violations.len(), 1);
        let v = &tl.violations[0];
        assert_eq!(v.kept, Activity::Ventilation);
        assert!(!v.tie);
        assert_eq!((v.ventilation_mean_prob, v.suction_mean_prob), (0.9, 0.6));
    }

    #[test]
    fn partial_overlap_truncates_the_loser() {
        // Suction positive over [0, 9); ventilation over [3, 6) with higher
        // probability: suction must be split around the overlap.
        let preds = PredictionSet {
            clips: vec![
                clip("a", 0.0, [Some(0.1), None, Some(0.8), None], [false; 4]),
                clip("b", 3.0, [Some(0.95), None, Some(0.8), None], [false; 4]),
                clip("c", 6.0, [Some(0.1), None, Some(0.8), None], [false; 4]),
            ],
        };
        let tl = stitch_timeline(&preds, 0.5, 0.0).unwrap();
        let mut suct: Vec<(f64, f64)> = tl
            .segments
            .iter()
            .filter(|s| s.activity == Activity::Suction)
            .map(|s| (s.start_s, s.end_s))
            .collect();
        suct.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(suct, vec![(0.0, 3.0), (6.0, 9.0)]);
        assert_eq!(tl.violations.len(), 1);
        // no remaining overlap
        for v in tl.segments.iter().filter(|s| s.activity == Activity::Ventilation) {
            for s in tl.segments.iter().filter(|s| s.activity == Activity::Suction) {
                assert!(v.end_s <= s.start_s + 1e-9 || s.end_s <= v.start_s + 1e-9);
            }
        }
    }

    #[test]
    fn overlapping_input_clips_are_an_error() {
        let preds = PredictionSet {
            clips: vec![
                clip("a", 0.0, [Some(0.9), None, None, None], [false; 4]),
                clip("b", 1.5, [Some(0.9), None, None, None], [false; 4]),
            ],
        };
        assert!(stitch_timeline(&preds, 0.5, 0.0).is_err());
    }

    #[test]
    fn csv_and_svg_exports_contain_segments() {
        let preds = PredictionSet {
            clips: vec![clip("a", 0.0, [None, Some(0.9), None, Some(0.9)], [false; 4])],
        };
        let tl = stitch_timeline(&preds, 0.5, 0.0).unwrap();
        let csv = timeline_to_csv(&tl);
        assert!(csv.contains("ep0,stimulation,0.000,3.000"));
        let svg = timeline_to_svg(&tl, "ep0", 3.0);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<rect"));
        assert!(svg.ends_with("</svg>"));
    }
}
