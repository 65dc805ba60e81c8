//! Follow-up quality under different selection strategies.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::pipeline::{analyze_source, list_sources, select_and_assess, RunContext};
use crate::error::Result;
use crate::imagery::Raster;
use crate::selection::SelectionMode;
use crate::transforms::TransformKind;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeCounts {
    /// Objects retained or removed outright, summed over follow-ups.
    pub valid_objects: usize,
    /// Follow-ups with at least one valid object.
    pub valid_cases: usize,
    pub violations: usize,
    /// Distinct violated objects per source and MR, summed.
    pub distinct_objects: usize,
    /// Sources with at least one violation, counted per MR.
    pub distinct_cases: usize,
}

impl ModeCounts {
    fn absorb(&mut self, o: &ModeCounts) {
        self.valid_objects += o.valid_objects;
        self.valid_cases += o.valid_cases;
        self.violations += o.violations;
        self.distinct_objects += o.distinct_objects;
        self.distinct_cases += o.distinct_cases;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub mode: SelectionMode,
    pub total: ModeCounts,
    pub by_mr: BTreeMap<TransformKind, ModeCounts>,
    /// Sources that could not be processed.
    pub skipped_sources: usize,
}

type PerSource = Option<Vec<BTreeMap<TransformKind, ModeCounts>>>;

fn counts_for_source(ctx: &RunContext, source: &super::pipeline::SourceImage, modes: &[SelectionMode]) -> Result<Vec<BTreeMap<TransformKind, ModeCounts>>> {
    let models = ctx.models_for(source)?;
    let image = Raster::load_png(&source.path)?;
    let analysis = analyze_source(ctx, &source.name, image, models.models())?;
    let mut out = Vec::new();
    for &mode in modes {
        let outcome = select_and_assess(ctx, &analysis, models.models(), mode)?;
        let mut by_mr: BTreeMap<TransformKind, ModeCounts> = BTreeMap::new();
        let mut violated: BTreeMap<TransformKind, BTreeSet<String>> = BTreeMap::new();
        for a in &outcome.mps {
            let c = by_mr.entry(a.kind).or_default();
            c.valid_objects += a.mp.valid_objects();
            c.valid_cases += usize::from(a.mp.is_valid());
            c.violations += a.mp.violations.len();
            let set = violated.entry(a.kind).or_default();
            set.extend(a.mp.violations.iter().map(|v| v.object.to_lowercase()));
        }
        for (kind, objects) in violated {
            let c = by_mr.entry(kind).or_default();
            c.distinct_objects += objects.len();
            c.distinct_cases += usize::from(!objects.is_empty());
        }
        out.push(by_mr);
    }
    Ok(out)
}

/// Runs selection and assessment once per mode on every source of the
/// configured corpus, without writing a run directory. Source analysis
/// is shared across modes.
pub fn compare_selection_modes(config: &RunConfig, modes: &[SelectionMode]) -> Result<Vec<ModeComparison>> {
    let ctx = RunContext::new(config.clone())?;
    let sources = list_sources(&config.source_dir)?;
    let workers = config.concurrency.max(1);
    let per_source: Vec<PerSource> = thread::scope(|s| {
        let chunks: Vec<_> = sources.chunks(sources.len().div_ceil(workers).max(1)).collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let ctx = &ctx;
                s.spawn(move || {
                    chunk
                        .iter()
                        .map(|src| counts_for_source(ctx, src, modes).ok())
                        .collect::<Vec<PerSource>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("comparison worker panicked"))
            .collect()
    });

    let mut out: Vec<ModeComparison> = modes
        .iter()
        .map(|&mode| ModeComparison {
            mode,
            total: ModeCounts::default(),
            by_mr: BTreeMap::new(),
            skipped_sources: 0,
        })
        .collect();
    for result in per_source {
        match result {
            None => out.iter_mut().for_each(|m| m.skipped_sources += 1),
            Some(per_mode) => {
                for (cmp, by_mr) in out.iter_mut().zip(per_mode) {
                    for (kind, c) in by_mr {
                        cmp.by_mr.entry(kind).or_default().absorb(&c);
                        cmp.total.absorb(&c);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Plain-text table of a comparison.
pub fn format_comparison(rows: &[ModeComparison]) -> String {
    let mut s = format!(
        "{:<14}{:>14}{:>12}{:>12}{:>18}{:>16}\n",
        "mode", "valid_objects", "valid_cases", "violations", "distinct_objects", "distinct_cases"
    );
    for r in rows {
        let t = r.total;
        s.push_str(&format!(
            "{:<14}{:>14}{:>12}{:>12}{:>18}{:>16}\n",
            r.mode.name(),
            t.valid_objects,
            t.valid_cases,
            t.violations,
            t.distinct_objects,
            t.distinct_cases
        ));
    }
    s
}
