#![allow(dead_code)]

use std::sync::Arc;

use capmorph_core::adapters::simulator::{
    generate_corpus, FaultSpec, SimulatedCaptioner, SimulatedDetector, SyntheticScene,
};
use capmorph_core::adapters::{BuiltinInpainter, BuiltinTagger, CachedCaptioner, Models};
use capmorph_core::caption::{SemanticMatcher, DEFAULT_COSINE_THRESHOLD};
use capmorph_core::harness::pipeline::{analyze_source, select_and_assess, AssessedMp, RunContext, SourceAnalysis};
use capmorph_core::harness::RunConfig;
use capmorph_core::selection::SelectionMode;

pub fn matcher() -> SemanticMatcher {
    SemanticMatcher::bundled(DEFAULT_COSINE_THRESHOLD).unwrap()
}

pub fn corpus(count: usize, seed: u64) -> Vec<SyntheticScene> {
    generate_corpus(count, seed, &matcher())
}

/// Simulator-backed context; the directories are never touched.
pub fn context(seed: u64) -> RunContext {
    let mut cfg = RunConfig::new("/nonexistent/src", "/nonexistent/out");
    cfg.seed = seed;
    RunContext::new(cfg).unwrap()
}

pub struct SceneRun {
    pub analysis: SourceAnalysis,
    pub mps: Vec<AssessedMp>,
}

/// Analyses one scene and assesses its selected follow-ups in memory.
pub fn run_scene(
    ctx: &RunContext,
    name: &str,
    scene: &SyntheticScene,
    fault: FaultSpec,
    detector: SimulatedDetector,
    mode: SelectionMode,
) -> SceneRun {
    let sut = CachedCaptioner::new(Arc::new(SimulatedCaptioner::new(scene.clone(), fault)));
    let tagger = BuiltinTagger::default();
    let models = Models {
        sut: &sut,
        od: &detector,
        inpaint: &BuiltinInpainter,
        tagger: &tagger,
    };
    let analysis = analyze_source(ctx, name, scene.render(), models).unwrap();
    let outcome = select_and_assess(ctx, &analysis, models, mode).unwrap();
    SceneRun {
        analysis,
        mps: outcome.mps,
    }
}
