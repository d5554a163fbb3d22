use crate::data::NUM_CLASSES;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Per-clip prediction paired with its ground truth. A `None` probability
/// marks a class the method does not predict at all (a protocol that skips
/// the baby-visible class, for instance).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub source_id: String,
    pub start_s: f64,
    pub window_s: f64,
    pub probs: [Option<f64>; NUM_CLASSES],
    pub truth: [bool; NUM_CLASSES],
}

/// A set of clip predictions for one method.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub clips: Vec<ClipPrediction>,
}

impl PredictionSet {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.clips {
            if !seen.insert(&c.clip_id) {
                return Err(CoreError::Schema(format!("duplicate clip id {:?}", c.clip_id)));
            }
            for p in c.probs.iter().flatten() {
                if !(0.0..=1.0).contains(p) {
                    return Err(CoreError::Numeric(format!(
                        "probability {p} for clip {:?} outside [0, 1]",
                        c.clip_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CoreError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: PredictionSet =
            serde_json::from_str(&text).map_err(|e| CoreError::Format(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// F1 for one class, with enough context to flag the 0/0 convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassF1 {
    pub f1: f64,
    /// Ground-truth positives.
    pub support: usize,
    pub predicted_positive: usize,
    /// True when F1 = 1.0 came from the zero-support, zero-predicted
    /// convention rather than from actual matches.
    pub zero_convention: bool,
}

/// Threshold probabilities and compute F1 per class:
/// `F1 = 2TP / (2TP + FP + FN)`; a class with no true and no predicted
/// positives is defined as 1.0 and flagged. Classes never predicted by the
/// method come back as `None`.
pub fn per_class_f1(
    preds: &PredictionSet,
    threshold: f64,
) -> Result<[Option<ClassF1>; NUM_CLASSES]> {
    if preds.clips.is_empty() {
        return Err(CoreError::Parameter("empty prediction set".into()));
    }
    let mut out = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let present = preds.clips.iter().any(|p| p.probs[c].is_some());
        if !present {
            continue;
        }
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let mut support = 0usize;
        let mut predicted = 0usize;
        for clip in &preds.clips {
            let truth = clip.truth[c];
            if truth {
                support += 1;
            }
            let pred = clip.probs[c].map(|p| p >= threshold).unwrap_or(false);
            if pred {
                predicted += 1;
            }
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (f1, zero_convention) = if tp + fp + fn_ == 0 {
            (1.0, true)
        } else {
            (2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64), false)
        };
        out[c] = Some(ClassF1 { f1, support, predicted_positive: predicted, zero_convention });
    }
    Ok(out)
}

/// Arithmetic mean of per-class F1 scores.
pub fn macro_f1(per_class: &[f64]) -> f64 {
    assert!(!per_class.is_empty(), "macro_f1 over empty list");
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// Macro average over the 4-class layout. Missing classes either drop out
/// of the mean or count as zero, depending on `missing_as_zero`.
pub fn macro_f1_with_missing(per_class: &[Option<f64>; NUM_CLASSES], missing_as_zero: bool) -> f64 {
    if missing_as_zero {
        let sum: f64 = per_class.iter().map(|v| v.unwrap_or(0.0)).sum();
        sum / NUM_CLASSES as f64
    } else {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        macro_f1(&present)
    }
}

/// Light-weight macro-F1 over `(probabilities, truth)` pairs, used as the
/// validation metric during training.
pub fn macro_f1_from_pairs(
    pairs: &[([f64; NUM_CLASSES], [bool; NUM_CLASSES])],
    threshold: f64,
) -> f64 {
    let mut scores = [0.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (probs, truth) in pairs {
            let pred = probs[c] >= threshold;
            match (pred, truth[c]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        scores[c] = if tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
        };
    }
    macro_f1(&scores)
}

/// Round to 2 decimals, half away from zero, with a guard for binary float
/// representation error so a true decimal .xx5 rounds up.
pub fn round_table(x: f64) -> f64 {
    (x * 100.0 + 0.5 + 1e-9).floor() / 100.0
}

/// Table rendering keeps three decimals for scores that would otherwise
/// round up to 1.00 (e.g. 0.996), and two decimals for everything else.
pub fn format_score(x: f64) -> String {
    if x >= 1.0 {
        "1.00".to_string()
    } else if x >= 0.995 {
        format!("{:.3}", (x * 1000.0 + 0.5 + 1e-9).floor() / 1000.0)
    } else {
        format!("{:.2}", round_table(x))
    }
}

/// Machine-readable evaluation report for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub per_class: PerClassScores,
    pub macro_f1: f64,
    /// Ground-truth positive count per class, label order.
    pub support: [usize; NUM_CLASSES],
    pub conflicts: usize,
    pub hallucinations: usize,
    /// Classes whose 1.0 came from the zero-support convention.
    pub zero_convention_classes: Vec<String>,
    pub missing_class_as_zero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassScores {
    pub vent: Option<f64>,
    pub stim: Option<f64>,
    pub suct: Option<f64>,
    pub bv: Option<f64>,
}

/// Extra per-method counters carried over from protocol transcripts.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalExtras {
    pub conflicts: usize,
    pub hallucinations: usize,
}

/// Evaluate one method over a complete prediction set.
pub fn evaluate_method(
    method: &str,
    preds: &PredictionSet,
    threshold: f64,
    missing_as_zero: bool,
    extras: EvalExtras,
) -> Result<MetricsReport> {
    preds.validate()?;
    let per_class = per_class_f1(preds, threshold)?;
    let f1s: [Option<f64>; NUM_CLASSES] = [
        per_class[0].map(|c| c.f1),
        per_class[1].map(|c| c.f1),
        per_class[2].map(|c| c.f1),
        per_class[3].map(|c| c.f1),
    ];
    let mut support = [0usize; NUM_CLASSES];
    for clip in &preds.clips {
        for (c, s) in support.iter_mut().enumerate() {
            *s += usize::from(clip.truth[c]);
        }
    }
    let zero_convention_classes = crate::data::Activity::ALL
        .iter()
        .filter(|a| per_class[a.index()].map(|c| c.zero_convention).unwrap_or(false))
        .map(|a| a.name().to_string())
        .collect();
    Ok(MetricsReport {
        method: method.to_string(),
        per_class: PerClassScores { vent: f1s[0], stim: f1s[1], suct: f1s[2], bv: f1s[3] },
        macro_f1: macro_f1_with_missing(&f1s, missing_as_zero),
        support,
        conflicts: extras.conflicts,
        hallucinations: extras.hallucinations,
        zero_convention_classes,
        missing_class_as_zero: missing_as_zero,
    })
}

/// Render reports in the results-table layout
/// (columns B.V., Vent., Stim., Suct., mAv).
pub fn render_results_table(reports: &[MetricsReport]) -> String {
    let mut out = String::from("Methods | B.V. | Vent. | Stim. | Suct. | mAv\n");
    out.push_str("--------|------|-------|-------|-------|----\n");
    for r in reports {
        let cell = |v: Option<f64>| v.map(format_score).unwrap_or_else(|| "/".into());
        out.push_str(&format!(
            "{} | {} | {} | {} | {} | {}\n",
            r.method,
            cell(r.per_class.bv),
            cell(r.per_class.vent),
            cell(r.per_class.stim),
            cell(r.per_class.suct),
            format_score(r.macro_f1),
        ));
    }
    out
}
