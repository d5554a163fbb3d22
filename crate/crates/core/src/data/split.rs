use std::collections::HashSet;

use crate::error::{CoreError, Result};
use crate::rng::substream;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Disjoint, exhaustive partition of clip ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetSplit {
    pub fn is_disjoint_and_exhaustive(&self, all: &[String]) -> bool {
        let train: HashSet<_> = self.train.iter().collect();
        let test: HashSet<_> = self.test.iter().collect();
        train.is_disjoint(&test) && train.len() + test.len() == all.len() && {
            let union: HashSet<_> = train.union(&test).collect();
            all.iter().all(|id| union.contains(&id))
        }
    }
}

/// Split `(clip_id, episode_id)` pairs into train and test. With
/// `group_by_episode` every clip of an episode lands on the same side; the
/// number of test episodes is `round(test_fraction * n_episodes)`, clamped
/// so both sides stay non-empty.
pub fn split_dataset(
    clips: &[(String, String)],
    test_fraction: f64,
    group_by_episode: bool,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CoreError::Parameter(format!(
            "test_fraction {test_fraction} must be in (0, 1)"
        )));
    }
    let mut rng = substream(seed, "split");

    if group_by_episode {
        let mut episodes: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        for (_, ep) in clips {
            if seen.insert(ep.clone()) {
                episodes.push(ep.clone());
            }
        }
        if episodes.len() < 2 {
            return Err(CoreError::Split(format!(
                "grouped split needs at least 2 episodes, got {}",
                episodes.len()
            )));
        }
        episodes.shuffle(&mut rng);
        let n_test = ((test_fraction * episodes.len() as f64).round() as usize)
            .clamp(1, episodes.len() - 1);
        let test_eps: HashSet<&String> = episodes[..n_test].iter().collect();
        let mut split = DatasetSplit { train: Vec::new(), test: Vec::new() };
        for (clip, ep) in clips {
            if test_eps.contains(ep) {
                split.test.push(clip.clone());
            } else {
                split.train.push(clip.clone());
            }
        }
        Ok(split)
    } else {
        if clips.len() < 2 {
            return Err(CoreError::Split("need at least 2 clips to split".into()));
        }
        let mut ids: Vec<String> = clips.iter().map(|(c, _)| c.clone()).collect();
        ids.shuffle(&mut rng);
        let n_test =
            ((test_fraction * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        Ok(DatasetSplit {
            test: ids[..n_test].to_vec(),
            train: ids[n_test..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clips_for(n_eps: usize, per_ep: usize) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for e in 0..n_eps {
            for c in 0..per_ep {
                out.push((format!("ep{e:03}-c{c:04}"), format!("ep{e:03}")));
            }
        }
        out
    }

    #[test]
    fn grouped_split_puts_whole_episodes_in_test() {
        let clips = clips_for(10, 7);
        let split = split_dataset(&clips, 0.2, true, 11).unwrap();
        // Exactly 2 of 10 episodes in test.
        assert_eq!(split.test.len(), 2 * 7);
        let all: Vec<String> = clips.iter().map(|(c, _)| c.clone()).collect();
        assert!(split.is_disjoint_and_exhaustive(&all));
        let test_eps: HashSet<&str> =
            split.test.iter().map(|c| &c[..5]).collect();
        assert_eq!(test_eps.len(), 2);
    }

    #[test]
    fn same_seed_is_identical() {
        let clips = clips_for(6, 3);
        let a = split_dataset(&clips, 0.3, true, 42).unwrap();
        let b = split_dataset(&clips, 0.3, true, 42).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(&clips, 0.3, true, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_fraction_is_rejected() {
        let clips = clips_for(4, 2);
        assert!(split_dataset(&clips, 0.0, true, 1).is_err());
        assert!(split_dataset(&clips, 1.0, true, 1).is_err());
    }

    #[test]
    fn single_episode_grouped_split_fails() {
        let clips = clips_for(1, 10);
        assert!(matches!(
            split_dataset(&clips, 0.2, true, 1),
            Err(CoreError::Split(_))
        ));
    }

    #[test]
    fn ungrouped_split_partitions_clips() {
        let clips = clips_for(3, 5);
        let split = split_dataset(&clips, 0.4, false, 9).unwrap();
        assert_eq!(split.test.len(), 6);
        let all: Vec<String> = clips.iter().map(|(c, _)| c.clone()).collect();
        assert!(split.is_disjoint_and_exhaustive(&all));
    }
}
