//! Procedural generation of labeled toy episodes: scenario scripts with
//! exclusion/containment invariants, and deterministic frame rendering with
//! per-activity motion signatures.

mod render;
mod script;

pub use render::{render_episode, EpisodeRender, RenderConfig};
pub use script::{sample_script, ScenarioEvent, ScenarioScript};
