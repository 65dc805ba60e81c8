//! JSON summary and static HTML page for a finished run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{load_manifest, read_jsonl, MpRecord, SourceRecord, SourceStatus, MANIFEST, MPS, SOURCES, VIOLATIONS};
use crate::error::{Error, Result};
use crate::oracle::{Rule, Violation};

pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.html";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MrSummary {
    pub mps: usize,
    pub valid_mps: usize,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub manifest_hash: String,
    pub sources: usize,
    pub skipped_sources: usize,
    pub mps: usize,
    pub valid_mps: usize,
    pub violating_mps: usize,
    pub violations: usize,
    pub by_rule: BTreeMap<String, usize>,
    pub by_hint: BTreeMap<String, usize>,
    pub by_mr: BTreeMap<String, MrSummary>,
}

struct RunData {
    manifest_hash: String,
    sources: Vec<SourceRecord>,
    mps: Vec<MpRecord>,
    violations: Vec<Violation>,
}

fn load_run(run_dir: &Path) -> Result<RunData> {
    let missing: Vec<String> = [MANIFEST, SOURCES, MPS, VIOLATIONS]
        .iter()
        .map(|f| run_dir.join(f))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    let manifest = load_manifest(run_dir)?;
    let mps: Vec<MpRecord> = read_jsonl(&run_dir.join(MPS))?;
    let images: Vec<PathBuf> = mps
        .iter()
        .flat_map(|m| [&m.source_image, &m.followup_image])
        .map(|p| run_dir.join(p))
        .collect();
    let mut missing: Vec<String> = images
        .into_iter()
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    missing.dedup();
    if !missing.is_empty() {
        return Err(Error::MissingArtifacts(missing));
    }
    Ok(RunData {
        manifest_hash: manifest.manifest_hash,
        sources: read_jsonl(&run_dir.join(SOURCES))?,
        mps,
        violations: read_jsonl(&run_dir.join(VIOLATIONS))?,
    })
}

fn summarize(run: &RunData) -> Summary {
    let mut by_rule: BTreeMap<String, usize> = [Rule::R1, Rule::R2, Rule::R3]
        .iter()
        .map(|r| (r.to_string(), 0))
        .collect();
    let mut by_hint: BTreeMap<String, usize> = BTreeMap::new();
    for v in &run.violations {
        *by_rule.entry(v.rule.to_string()).or_default() += 1;
        *by_hint.entry(v.hint.to_string()).or_default() += 1;
    }
    let mut by_mr: BTreeMap<String, MrSummary> = BTreeMap::new();
    for m in &run.mps {
        let e = by_mr.entry(m.mr.mr_label().to_string()).or_default();
        e.mps += 1;
        e.valid_mps += usize::from(m.valid);
        e.violations += m.violations;
    }
    Summary {
        manifest_hash: run.manifest_hash.clone(),
        sources: run.sources.len(),
        skipped_sources: run.sources.iter().filter(|s| s.status == SourceStatus::Skipped).count(),
        mps: run.mps.len(),
        valid_mps: run.mps.iter().filter(|m| m.valid).count(),
        violating_mps: run.mps.iter().filter(|m| m.violations > 0).count(),
        violations: run.violations.len(),
        by_rule,
        by_hint,
        by_mr,
    }
}

fn esc(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;color:#222}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:2px 8px;text-align:left}\
.mp{border:1px solid #bbb;margin:1em 0;padding:0.5em 1em}.mp.bad{border-color:#c33}\
.imgs img{max-height:160px;margin-right:1em;image-rendering:pixelated}\
.violation{color:#b00}.skip{color:#777}";

fn render_html(run: &RunData, summary: &Summary) -> String {
    let mut by_mp: BTreeMap<&str, Vec<&Violation>> = BTreeMap::new();
    for v in &run.violations {
        by_mp.entry(&v.mp_id).or_default().push(v);
    }
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>capmorph report</title>");
    let _ = writeln!(h, "<style>{STYLE}</style></head><body>");
    h.push_str("<h1>Caption metamorphic test report</h1>\n");
    let _ = writeln!(h, "<p>manifest hash <code>{}</code></p>", esc(&summary.manifest_hash));
    h.push_str("<table><tr><th>sources</th><th>skipped</th><th>MPs</th><th>valid MPs</th><th>violating MPs</th><th>violations</th></tr>");
    let _ = writeln!(
        h,
        "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr></table>",
        summary.sources, summary.skipped_sources, summary.mps, summary.valid_mps, summary.violating_mps, summary.violations
    );
    h.push_str("<h2>By rule</h2><table><tr><th>rule</th><th>violations</th></tr>");
    for (rule, n) in &summary.by_rule {
        let _ = write!(h, "<tr><td>{rule}</td><td>{n}</td></tr>");
    }
    h.push_str("</table>\n<h2>By hint</h2><table><tr><th>hint</th><th>violations</th></tr>");
    for (hint, n) in &summary.by_hint {
        let _ = write!(h, "<tr><td>{hint}</td><td>{n}</td></tr>");
    }
    h.push_str("</table>\n");

    let skipped: Vec<&SourceRecord> = run.sources.iter().filter(|s| s.status == SourceStatus::Skipped).collect();
    if !skipped.is_empty() {
        h.push_str("<h2>Skipped sources</h2><ul>");
        for s in skipped {
            let _ = write!(
                h,
                "<li class=\"skip\">{}: {}</li>",
                esc(&s.source),
                esc(s.reason.as_deref().unwrap_or(""))
            );
        }
        h.push_str("</ul>\n");
    }

    h.push_str("<h2>Metamorphic pairs</h2>\n");
    for m in &run.mps {
        let vs = by_mp.get(m.mp_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let class = if vs.is_empty() { "mp" } else { "mp bad" };
        let spec = serde_json::to_string(&m.spec).expect("spec serializes");
        let _ = writeln!(h, "<div class=\"{class}\" id=\"{}\">", esc(&m.mp_id));
        let _ = writeln!(h, "<h3>{} <small>{} <code>{}</code></small></h3>", esc(&m.mp_id), m.mr.mr_label(), esc(&spec));
        let _ = writeln!(
            h,
            "<div class=\"imgs\"><img src=\"{}\" alt=\"source\"><img src=\"{}\" alt=\"follow-up\"></div>",
            esc(&m.source_image),
            esc(&m.followup_image)
        );
        let _ = writeln!(
            h,
            "<p>source: <q>{}</q><br>follow-up: <q>{}</q></p>",
            esc(&m.source_caption),
            esc(&m.followup_caption)
        );
        if !m.fates.is_empty() || !m.unlocated.is_empty() {
            h.push_str("<table><tr><th>object</th><th>retain ratio</th><th>fate</th></tr>");
            for f in &m.fates {
                let fate = serde_json::to_value(f.fate).expect("fate serializes");
                let _ = write!(
                    h,
                    "<tr><td>{}</td><td>{:.3}</td><td>{}</td></tr>",
                    esc(&f.object),
                    f.ratio,
                    fate.as_str().unwrap_or_default()
                );
            }
            for u in &m.unlocated {
                let _ = write!(h, "<tr><td>{}</td><td></td><td>unlocated</td></tr>", esc(u));
            }
            h.push_str("</table>\n");
        }
        if !vs.is_empty() {
            h.push_str("<ul>");
            for v in vs {
                let side = serde_json::to_value(v.side).expect("side serializes");
                let _ = write!(
                    h,
                    "<li class=\"violation\">{} <b>{}</b> ({} caption) hint {}</li>",
                    v.rule,
                    esc(&v.object),
                    side.as_str().unwrap_or_default(),
                    v.hint
                );
            }
            h.push_str("</ul>\n");
        }
        h.push_str("</div>\n");
    }
    h.push_str("</body></html>\n");
    h
}

/// Writes `summary.json` and `report.html` into the run directory.
pub fn emit_report(run_dir: &Path) -> Result<Summary> {
    let run = load_run(run_dir)?;
    let summary = summarize(&run);
    fs::write(run_dir.join(SUMMARY), serde_json::to_string_pretty(&summary)? + "\n")?;
    fs::write(run_dir.join(REPORT), render_html(&run, &summary))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escaping() {
        assert_eq!(esc("<a & \"b\">"), "&lt;a &amp; &quot;b&quot;&gt;");
    }

    #[test]
    fn missing_artifacts_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match emit_report(dir.path()).unwrap_err() {
            Error::MissingArtifacts(files) => {
                assert_eq!(files.len(), 4);
                assert!(files[0].ends_with(MANIFEST));
            }
            e => panic!("{e}"),
        }
    }
}
