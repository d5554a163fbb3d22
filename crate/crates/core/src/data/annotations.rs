use std::io::Read;
use std::path::Path;

use super::labels::Activity;
use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Time intervals carrying one label within an episode. Intervals are kept
/// normalized: sorted, non-overlapping, `end_ms > start_ms`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTrack {
    pub label: Activity,
    pub intervals: Vec<(i64, i64)>,
}

impl AnnotationTrack {
    pub fn new(label: Activity, mut intervals: Vec<(i64, i64)>) -> Self {
        intervals = merge_intervals(intervals);
        AnnotationTrack { label, intervals }
    }

    /// Total annotated duration in ms.
    pub fn total_ms(&self) -> i64 {
        self.intervals.iter().map(|(s, e)| e - s).sum()
    }
}

/// Sort and merge overlapping or touching intervals.
fn merge_intervals(mut intervals: Vec<(i64, i64)>) -> Vec<(i64, i64)> {
    intervals.sort_unstable();
    let mut out: Vec<(i64, i64)> = Vec::with_capacity(intervals.len());
    for (s, e) in intervals {
        match out.last_mut() {
            Some((_, last_e)) if s <= *last_e => *last_e = (*last_e).max(e),
            _ => out.push((s, e)),
        }
    }
    out
}

/// Parse a `label,start_ms,end_ms` CSV into one normalized track per label
/// present. Unknown labels are schema errors; `end <= start` is a validation
/// error carrying the offending line number.
pub fn parse_annotations(path: &Path) -> Result<Vec<AnnotationTrack>> {
    let file = std::fs::File::open(path)?;
    parse_annotations_reader(file)
}

pub fn parse_annotations_str(content: &str) -> Result<Vec<AnnotationTrack>> {
    parse_annotations_reader(content.as_bytes())
}

fn parse_annotations_reader<R: Read>(reader: R) -> Result<Vec<AnnotationTrack>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    {
        let headers = csv_reader
            .headers()
            .map_err(|e| CoreError::Schema(format!("cannot read header: {e}")))?;
        let expect = ["label", "start_ms", "end_ms"];
        if headers.iter().collect::<Vec<_>>() != expect {
            return Err(CoreError::Schema(format!(
                "expected header `label,start_ms,end_ms`, got {:?}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
    }

    let mut per_label: Vec<Vec<(i64, i64)>> = vec![Vec::new(); Activity::ALL.len()];
    let mut seen: Vec<bool> = vec![false; Activity::ALL.len()];

    for (row_idx, record) in csv_reader.records().enumerate() {
        // +2: one for the header, one for 1-based numbering.
        let line = row_idx + 2;
        let record = record.map_err(|e| CoreError::Validation {
            line,
            message: format!("malformed row: {e}"),
        })?;
        if record.len() != 3 {
            return Err(CoreError::Validation {
                line,
                message: format!("expected 3 fields, got {}", record.len()),
            });
        }
        let label = Activity::from_name(&record[0]).ok_or_else(|| {
            CoreError::Schema(format!(
                "unknown label {:?}; allowed: ventilation|stimulation|suction|baby_on_table",
                &record[0]
            ))
        })?;
        let start_ms: i64 = record[1].parse().map_err(|_| CoreError::Validation {
            line,
            message: format!("start_ms {:?} is not an integer", &record[1]),
        })?;
        let end_ms: i64 = record[2].parse().map_err(|_| CoreError::Validation {
            line,
            message: format!("end_ms {:?} is not an integer", &record[2]),
        })?;
        if end_ms <= start_ms {
            return Err(CoreError::Validation {
                line,
                message: format!("end_ms {end_ms} must be greater than start_ms {start_ms}"),
            });
        }
        if start_ms < 0 {
            return Err(CoreError::Validation {
                line,
                message: format!("start_ms {start_ms} must be non-negative"),
            });
        }
        per_label[label.index()].push((start_ms, end_ms));
        seen[label.index()] = true;
    }

    Ok(Activity::ALL
        .iter()
        .filter(|a| seen[a.index()])
        .map(|&a| AnnotationTrack::new(a, per_label[a.index()].clone()))
        .collect())
}

/// Write tracks back out in the same CSV schema.
pub fn write_annotations(path: &Path, tracks: &[AnnotationTrack]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).map_err(|e| CoreError::Format(e.to_string()))?;
    w.write_record(["label", "start_ms", "end_ms"])
        .map_err(|e| CoreError::Format(e.to_string()))?;
    for track in tracks {
        for (s, e) in &track.intervals {
            w.write_record([track.label.name(), &s.to_string(), &e.to_string()])
                .map_err(|e| CoreError::Format(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}
