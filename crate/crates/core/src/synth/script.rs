use crate::data::Activity;
use crate::error::{CoreError, Result};
use crate::rng::substream;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// One timed activity occurrence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEvent {
    pub activity: Activity,
    pub start_s: f64,
    pub end_s: f64,
}

impl ScenarioEvent {
    pub fn overlaps(&self, other: &ScenarioEvent) -> bool {
        self.start_s < other.end_s && other.start_s < self.end_s
    }
}

/// Random but invariant-respecting event layout for one episode:
/// ventilation and suction never overlap in time, and every activity event
/// lies within a baby_on_table event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub duration_s: f64,
    pub events: Vec<ScenarioEvent>,
    pub seed: u64,
}

impl ScenarioScript {
    pub fn events_of(&self, activity: Activity) -> impl Iterator<Item = &ScenarioEvent> {
        self.events.iter().filter(move |e| e.activity == activity)
    }

    /// Active value of `activity` at time `t` (event intervals are
    /// half-open `[start, end)`).
    pub fn active_at(&self, activity: Activity, t: f64) -> bool {
        self.events_of(activity)
            .any(|e| e.start_s <= t && t < e.end_s)
    }
}

const EVENT_MIN_S: f64 = 3.0;
const EVENT_MAX_S: f64 = 15.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 200;

/// Sample a script whose per-class coverage roughly follows
/// `class_frequencies` (fractions of the episode duration, ordered as the
/// label vector).
pub fn sample_script(
    duration_s: f64,
    class_frequencies: [f64; 4],
    seed: u64,
) -> Result<ScenarioScript> {
    if duration_s < 3.0 {
        return Err(CoreError::Parameter(format!(
            "duration_s {duration_s} must be at least 3"
        )));
    }
    if class_frequencies.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(CoreError::Parameter(
            "class frequencies must lie in [0, 1]".into(),
        ));
    }
    let mut rng = substream(seed, "script");
    let mut events: Vec<ScenarioEvent> = Vec::new();

    // One contiguous baby block; windows outside it become the "no baby on
    // the table" background class.
    let baby_target = class_frequencies[Activity::BabyOnTable.index()] * duration_s;
    let baby = if baby_target >= EVENT_MIN_S {
        let len = baby_target.min(duration_s);
        let start = if duration_s - len > 0.0 {
            rng.gen_range(0.0..=(duration_s - len))
        } else {
            0.0
        };
        let ev = ScenarioEvent {
            activity: Activity::BabyOnTable,
            start_s: start,
            end_s: start + len,
        };
        events.push(ev.clone());
        Some(ev)
    } else {
        None
    };

    if let Some(baby) = &baby {
        for activity in [Activity::Ventilation, Activity::Stimulation, Activity::Suction] {
            let target = class_frequencies[activity.index()] * duration_s;
            let mut placed = 0.0;
            let mut attempts = 0;
            while placed < target && attempts < MAX_PLACEMENT_ATTEMPTS {
                attempts += 1;
                let max_len = EVENT_MAX_S.min(baby.end_s - baby.start_s);
                if max_len < EVENT_MIN_S {
                    break;
                }
                let len = rng.gen_range(EVENT_MIN_S..=max_len);
                let start = rng.gen_range(baby.start_s..=(baby.end_s - len));
                let candidate = ScenarioEvent {
                    activity,
                    start_s: start,
                    end_s: start + len,
                };
                let clash = events.iter().any(|e| {
                    if !candidate.overlaps(e) {
                        return false;
                    }
                    match (activity, e.activity) {
                        // same-class events stay distinct
                        (a, b) if a == b => true,
                        // the exclusion pair
                        (Activity::Ventilation, Activity::Suction) => true,
                        (Activity::Suction, Activity::Ventilation) => true,
                        _ => false,
                    }
                });
                if !clash {
                    placed += len;
                    events.push(candidate);
                }
            }
        }
    }

    events.sort_by(|a, b| {
        a.start_s
            .partial_cmp(&b.start_s)
            .unwrap()
            .then(a.activity.index().cmp(&b.activity.index()))
    });
    Ok(ScenarioScript { duration_s, events, seed })
}
