//! Driving runs: configuration, the pipeline, metrics, reports and the
//! selection-mode comparison.

pub mod compare;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod report;

use std::path::Path;

use crate::adapters::simulator::{generate_corpus, SyntheticScene};
use crate::caption::SemanticMatcher;
use crate::error::Result;

pub use compare::{compare_selection_modes, ModeComparison, ModeCounts};
pub use config::RunConfig;
pub use metrics::{compute_metrics, Label, Level, MetricsReport};
pub use pipeline::{run_pipeline, Manifest, RunSummary};
pub use report::{emit_report, Summary};

/// Writes `<name>.png` and `<name>.json` for every scene.
pub fn write_scenes(dir: &Path, scenes: &[(String, SyntheticScene)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, scene) in scenes {
        scene.render().save_png(&dir.join(format!("{name}.png")))?;
        scene.save(&dir.join(format!("{name}.json")))?;
    }
    Ok(())
}

/// Generates a seeded corpus of `count` scenes named `scene000`, ... into `dir`.
pub fn write_corpus(dir: &Path, count: usize, seed: u64, matcher: &SemanticMatcher) -> Result<Vec<(String, SyntheticScene)>> {
    let scenes: Vec<(String, SyntheticScene)> = generate_corpus(count, seed, matcher)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("scene{i:03}"), s))
        .collect();
    write_scenes(dir, &scenes)?;
    Ok(scenes)
}
