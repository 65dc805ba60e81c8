//! End-to-end run over a directory of source images.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, SharedModels};
use crate::adapters::simulator::{SimulatedCaptioner, SimulatedDetector, SyntheticScene};
use crate::adapters::{detect_objects, CachedCaptioner, Captioner, Detection, Detector, Models};
use crate::alignment::{filter_detections, localize_with_detections, LocalizationMap, LocationSource};
use crate::caption::{Caption, SemanticMatcher};
use crate::error::{Error, Result};
use crate::imagery::{BBox, Raster};
use crate::oracle::{assess_mp, MetamorphicPair, Violation};
use crate::selection::{
    select_followups_traced, select_with_mode, CandidateAssessment, Fate, SelectionMode, SelectionRound,
};
use crate::transforms::{candidate_specs, mean_object_area, TransformKind, TransformSpec};

pub const MANIFEST: &str = "manifest.json";
pub const RUN_CONFIG: &str = "run.json";
pub const MPS: &str = "mps.jsonl";
pub const VIOLATIONS: &str = "violations.jsonl";
pub const SOURCES: &str = "sources.jsonl";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceImage {
    pub name: String,
    pub path: PathBuf,
}

/// PNG files of `dir`, sorted by file name.
pub fn list_sources(dir: &Path) -> Result<Vec<SourceImage>> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("cannot read source directory {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push(SourceImage { name, path });
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    out.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(out)
}

/// Matcher and model handles for a run.
pub struct RunContext {
    pub config: RunConfig,
    pub matcher: SemanticMatcher,
    pub shared: SharedModels,
}

impl RunContext {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let matcher = config.matcher()?;
        let shared = config.shared_models()?;
        if shared.sut.is_none() {
            config.simulator.fault.validate(&matcher)?;
        }
        Ok(Self {
            config,
            matcher,
            shared,
        })
    }

    /// Captioner and detector for one source image.
    pub fn models_for(&self, source: &SourceImage) -> Result<SourceModels> {
        let needs_scene = self.shared.sut.is_none() || self.shared.od.is_none();
        let scene = if needs_scene {
            let dir = self.config.simulator.scenes_dir.as_deref().unwrap_or(&self.config.source_dir);
            let path = dir.join(format!("{}.json", source.name));
            Some(SyntheticScene::load(&path).map_err(|e| {
                Error::InvalidInput(format!("scene file {}: {e}", path.display()))
            })?)
        } else {
            None
        };
        let sim = &self.config.simulator;
        let sut: Arc<dyn Captioner> = match (&self.shared.sut, &scene) {
            (Some(s), _) => s.clone(),
            (None, Some(scene)) => Arc::new(SimulatedCaptioner::new(scene.clone(), sim.fault.clone())),
            (None, None) => unreachable!("scene loaded when a role is simulated"),
        };
        let od: Arc<dyn Detector> = match (&self.shared.od, scene) {
            (Some(d), _) => d.clone(),
            (None, Some(scene)) => {
                let mut d = SimulatedDetector::new(scene).with_jitter(sim.jitter, self.config.seed);
                for (from, to) in &sim.relabel {
                    d = d.with_relabel(from, to);
                }
                for label in &sim.missed {
                    d = d.with_missed(label);
                }
                Arc::new(d)
            }
            (None, None) => unreachable!("scene loaded when a role is simulated"),
        };
        Ok(SourceModels {
            sut: CachedCaptioner::new(sut),
            od,
            shared: self.shared.clone(),
        })
    }
}

pub struct SourceModels {
    pub sut: CachedCaptioner<Arc<dyn Captioner>>,
    pub od: Arc<dyn Detector>,
    shared: SharedModels,
}

impl SourceModels {
    pub fn models(&self) -> Models<'_> {
        Models {
            sut: &self.sut,
            od: &*self.od,
            inpaint: &*self.shared.inpaint,
            tagger: &*self.shared.tagger,
        }
    }
}

/// Candidate pool of one MR for one source.
pub struct Pool {
    pub kind: TransformKind,
    pub candidates: Vec<CandidateAssessment>,
}

/// Everything about a source image that does not depend on selection.
pub struct SourceAnalysis {
    pub name: String,
    pub image: Raster,
    pub caption: Caption,
    pub detections: Vec<Detection>,
    pub map: LocalizationMap,
    pub pools: Vec<Pool>,
}

fn derived_seed(seed: u64, name: &str, kind: TransformKind) -> u64 {
    let digest = Sha256::digest(format!("{seed}/{name}/{}", kind.mr_label()).as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn analyze_source(ctx: &RunContext, name: &str, image: Raster, models: Models<'_>) -> Result<SourceAnalysis> {
    let (w, h) = (image.width(), image.height());
    let text = models.sut.caption(&image)?;
    let caption = models.tagger.tag_caption(&text)?;
    let detections = filter_detections(&detect_objects(models.od, &image)?, ctx.config.thresholds.od_score);
    let map = localize_with_detections(&caption, &image, &detections, models, &ctx.matcher)?;
    let boxes: Vec<BBox> = detections.iter().map(|d| d.bbox).collect();
    let mean_area = mean_object_area(&boxes, w, h);
    let thresholds = ctx.config.fate_thresholds();
    let mut pools = Vec::new();
    for &kind in &ctx.config.mrs {
        let specs = candidate_specs(w, h, mean_area, kind, derived_seed(ctx.config.seed, name, kind));
        let candidates = specs
            .into_iter()
            .map(|spec| {
                let m_tran = spec.retained_mask(w, h)?;
                CandidateAssessment::new(spec, m_tran, &map, thresholds)
            })
            .collect::<Result<Vec<_>>>()?;
        pools.push(Pool { kind, candidates });
    }
    Ok(SourceAnalysis {
        name: name.to_string(),
        image,
        caption,
        detections,
        map,
        pools,
    })
}

/// One assessed metamorphic pair plus its follow-up image.
pub struct AssessedMp {
    pub kind: TransformKind,
    pub mp: MetamorphicPair,
    pub followup_image: Raster,
}

pub struct SelectionOutcome {
    pub mps: Vec<AssessedMp>,
    /// MRs whose candidate pool was empty, with the reason.
    pub skipped: Vec<(TransformKind, String)>,
    pub traces: Vec<(TransformKind, Vec<SelectionRound>)>,
}

pub fn mp_id(source: &str, kind: TransformKind, pick: usize) -> String {
    format!("{source}-{}-{pick}", kind.mr_label())
}

/// Selects follow-ups from every pool, captions them and checks the rules.
pub fn select_and_assess(
    ctx: &RunContext,
    analysis: &SourceAnalysis,
    models: Models<'_>,
    mode: SelectionMode,
) -> Result<SelectionOutcome> {
    let k = ctx.config.followups_per_source;
    let mut out = SelectionOutcome {
        mps: Vec::new(),
        skipped: Vec::new(),
        traces: Vec::new(),
    };
    for pool in &analysis.pools {
        if pool.candidates.is_empty() {
            out.skipped.push((
                pool.kind,
                format!(
                    "no {} candidate satisfies the guideline for a {}x{} image",
                    pool.kind.mr_label(),
                    analysis.image.width(),
                    analysis.image.height()
                ),
            ));
            continue;
        }
        let picks = if mode == SelectionMode::Full {
            let (picks, trace) = select_followups_traced(&pool.candidates, k)?;
            out.traces.push((pool.kind, trace));
            picks
        } else {
            let seed = derived_seed(ctx.config.seed ^ 0x005e_1ec7, &analysis.name, pool.kind);
            select_with_mode(&pool.candidates, k, mode, seed)?
        };
        for (j, &i) in picks.iter().enumerate() {
            let candidate = &pool.candidates[i];
            let followup = candidate.spec.apply(&analysis.image)?.image;
            let text = models.sut.caption(&followup)?;
            let caption = models.tagger.tag_caption(&text)?;
            let mp = assess_mp(
                mp_id(&analysis.name, pool.kind, j),
                candidate,
                &analysis.caption,
                &caption,
                &analysis.map,
                &ctx.matcher,
            );
            out.mps.push(AssessedMp {
                kind: pool.kind,
                mp,
                followup_image: followup,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FateRecord {
    pub object: String,
    pub ratio: f64,
    pub fate: Fate,
}

/// One line of `mps.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpRecord {
    pub mp_id: String,
    pub source: String,
    pub mr: TransformKind,
    pub spec: TransformSpec,
    pub source_caption: String,
    pub followup_caption: String,
    pub source_image: String,
    pub followup_image: String,
    pub fates: Vec<FateRecord>,
    pub unlocated: Vec<String>,
    pub valid: bool,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub object: String,
    pub source: LocationSource,
    pub regions: Vec<BBox>,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrSkip {
    pub mr: TransformKind,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceStatus {
    Done,
    Skipped,
}

/// One line of `sources.jsonl`; written after all of the source's other
/// records, so it doubles as a completion marker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source: String,
    pub status: SourceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default)]
    pub located: Vec<LocationRecord>,
    #[serde(default)]
    pub unlocated: Vec<String>,
    #[serde(default)]
    pub skipped_mrs: Vec<MrSkip>,
    #[serde(default)]
    pub mps: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub adapter_failure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_hash: String,
    pub config_hash: String,
    pub sources: usize,
    pub completed: usize,
    pub skipped: usize,
    pub mps: usize,
    pub violations: usize,
    pub records_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub adapter_failures: usize,
    /// Sources finished in an earlier, interrupted run.
    pub resumed: usize,
}

struct SourceOutput {
    record: SourceRecord,
    mps: Vec<MpRecord>,
    violations: Vec<Violation>,
}

fn write_source(ctx: &RunContext, out_dir: &Path, source: &SourceImage) -> Result<SourceOutput> {
    let image = Raster::load_png(&source.path)?;
    let models = ctx.models_for(source)?;
    let analysis = analyze_source(ctx, &source.name, image, models.models())?;
    let outcome = select_and_assess(ctx, &analysis, models.models(), ctx.config.selection)?;

    let source_png = format!("images/{}.png", source.name);
    analysis.image.save_png(&out_dir.join(&source_png))?;
    let mut located = Vec::new();
    for l in &analysis.map.located {
        let mask = format!("masks/{}-{}.pbm", source.name, l.index);
        fs::write(out_dir.join(&mask), l.mask.to_pbm())?;
        located.push(LocationRecord {
            object: l.object.surface.clone(),
            source: l.source,
            regions: l.regions.clone(),
            mask,
        });
    }
    if ctx.config.verbose {
        for (kind, trace) in &outcome.traces {
            let path = out_dir.join(format!("traces/{}-{}.json", source.name, kind.mr_label()));
            fs::write(path, serde_json::to_string_pretty(trace)? + "\n")?;
        }
    }

    let mut mps = Vec::new();
    let mut violations = Vec::new();
    for a in &outcome.mps {
        let followup_png = format!("images/{}.png", a.mp.id);
        a.followup_image.save_png(&out_dir.join(&followup_png))?;
        mps.push(MpRecord {
            mp_id: a.mp.id.clone(),
            source: source.name.clone(),
            mr: a.kind,
            spec: a.mp.spec.clone(),
            source_caption: a.mp.source_caption.text.clone(),
            followup_caption: a.mp.followup_caption.text.clone(),
            source_image: source_png.clone(),
            followup_image: followup_png,
            fates: a
                .mp
                .fates
                .iter()
                .map(|f| FateRecord {
                    object: f.object.surface.clone(),
                    ratio: f.ratio,
                    fate: f.fate,
                })
                .collect(),
            unlocated: a.mp.unlocated.iter().map(|o| o.surface.clone()).collect(),
            valid: a.mp.is_valid(),
            violations: a.mp.violations.len(),
        });
        violations.extend(a.mp.violations.iter().cloned());
    }
    Ok(SourceOutput {
        record: SourceRecord {
            source: source.name.clone(),
            status: SourceStatus::Done,
            reason: None,
            caption: Some(analysis.caption.text.clone()),
            located,
            unlocated: analysis.map.unlocated.iter().map(|(_, o)| o.surface.clone()).collect(),
            skipped_mrs: outcome
                .skipped
                .into_iter()
                .map(|(mr, reason)| MrSkip { mr, reason })
                .collect(),
            mps: mps.iter().map(|m| m.mp_id.clone()).collect(),
            adapter_failure: false,
        },
        mps,
        violations,
    })
}

fn skip_output(source: &SourceImage, err: &Error) -> SourceOutput {
    SourceOutput {
        record: SourceRecord {
            source: source.name.clone(),
            status: SourceStatus::Skipped,
            reason: Some(err.to_string()),
            caption: None,
            located: Vec::new(),
            unlocated: Vec::new(),
            skipped_mrs: Vec::new(),
            mps: Vec::new(),
            adapter_failure: err.is_adapter_failure(),
        },
        mps: Vec::new(),
        violations: Vec::new(),
    }
}

/// Complete JSON lines of a file; a torn final line is ignored.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    let mut lines = BufReader::new(file).lines().peekable();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(_) if lines.peek().is_none() => break,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

fn append_jsonl<T: Serialize>(file: &mut File, items: &[T]) -> Result<()> {
    let mut buf = String::new();
    for item in items {
        buf.push_str(&serde_json::to_string(item)?);
        buf.push('\n');
    }
    file.write_all(buf.as_bytes())?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct RunStamp {
    config_hash: String,
    config: RunConfig,
}

/// Keeps the records of sources that completed before an interruption and
/// returns their names.
fn prepare_output(out_dir: &Path, config_hash: &str, config: &RunConfig) -> Result<BTreeSet<String>> {
    for sub in ["images", "masks", "traces"] {
        fs::create_dir_all(out_dir.join(sub))?;
    }
    let stamp_path = out_dir.join(RUN_CONFIG);
    if stamp_path.exists() {
        let stamp: RunStamp = serde_json::from_str(&fs::read_to_string(&stamp_path)?)?;
        if stamp.config_hash != config_hash {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration; choose another output directory",
                out_dir.display()
            )));
        }
    } else {
        let stamp = RunStamp {
            config_hash: config_hash.to_string(),
            config: config.clone(),
        };
        fs::write(&stamp_path, serde_json::to_string_pretty(&stamp)? + "\n")?;
    }

    let sources: Vec<SourceRecord> = read_jsonl(&out_dir.join(SOURCES))?;
    let done: BTreeSet<String> = sources.iter().map(|s| s.source.clone()).collect();
    let mps: Vec<MpRecord> = read_jsonl(&out_dir.join(MPS))?;
    let mps: Vec<MpRecord> = mps.into_iter().filter(|m| done.contains(&m.source)).collect();
    let kept_ids: BTreeSet<&str> = mps.iter().map(|m| m.mp_id.as_str()).collect();
    let violations: Vec<Violation> = read_jsonl(&out_dir.join(VIOLATIONS))?;
    let violations: Vec<Violation> = violations
        .into_iter()
        .filter(|v| kept_ids.contains(v.mp_id.as_str()))
        .collect();
    write_jsonl(&out_dir.join(SOURCES), &sources)?;
    write_jsonl(&out_dir.join(MPS), &mps)?;
    write_jsonl(&out_dir.join(VIOLATIONS), &violations)?;
    Ok(done)
}

fn sha256_files(paths: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        h.update(fs::read(p)?);
        h.update([0u8]);
    }
    Ok(hex::encode(h.finalize()))
}

fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().append(true).create(true).open(path)?)
}

/// Runs the whole pipeline, resuming an interrupted run in the same
/// output directory. Per-source failures become skip records.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    let sources = list_sources(&config.source_dir)?;
    let ctx = RunContext::new(config.clone())?;
    run_with_context(&ctx, &sources)
}

pub fn run_with_context(ctx: &RunContext, sources: &[SourceImage]) -> Result<RunSummary> {
    let out_dir = ctx.config.output_dir.clone();
    let config_hash = ctx.config.config_hash();
    let done = prepare_output(&out_dir, &config_hash, &ctx.config)?;
    let pending: Vec<&SourceImage> = sources.iter().filter(|s| !done.contains(&s.name)).collect();

    let mut sources_file = open_append(&out_dir.join(SOURCES))?;
    let mut mps_file = open_append(&out_dir.join(MPS))?;
    let mut violations_file = open_append(&out_dir.join(VIOLATIONS))?;

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, SourceOutput)>();
    let workers = ctx.config.concurrency.min(pending.len()).max(1);
    std::thread::scope(|s| -> Result<()> {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, pending, out_dir) = (&next, &pending, &out_dir);
            s.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(source) = pending.get(i) else { break };
                let output = write_source(ctx, out_dir, source).unwrap_or_else(|e| skip_output(source, &e));
                if tx.send((i, output)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // records go out in source order whatever order workers finish in
        let mut waiting: BTreeMap<usize, SourceOutput> = BTreeMap::new();
        let mut cursor = 0;
        for (i, output) in rx {
            waiting.insert(i, output);
            while let Some(output) = waiting.remove(&cursor) {
                append_jsonl(&mut mps_file, &output.mps)?;
                append_jsonl(&mut violations_file, &output.violations)?;
                mps_file.flush()?;
                violations_file.flush()?;
                append_jsonl(&mut sources_file, std::slice::from_ref(&output.record))?;
                sources_file.flush()?;
                cursor += 1;
            }
        }
        Ok(())
    })?;

    let records: Vec<SourceRecord> = read_jsonl(&out_dir.join(SOURCES))?;
    let mps: Vec<MpRecord> = read_jsonl(&out_dir.join(MPS))?;
    let violations: Vec<Violation> = read_jsonl(&out_dir.join(VIOLATIONS))?;
    let records_sha256 = sha256_files(&[out_dir.join(SOURCES), out_dir.join(MPS), out_dir.join(VIOLATIONS)])?;
    let manifest_hash = hex::encode(Sha256::digest(format!("{config_hash}\n{records_sha256}").as_bytes()));
    let skipped = records.iter().filter(|r| r.status == SourceStatus::Skipped).count();
    let manifest = Manifest {
        manifest_hash,
        config_hash,
        sources: records.len(),
        completed: records.len() - skipped,
        skipped,
        mps: mps.len(),
        violations: violations.len(),
        records_sha256,
    };
    fs::write(out_dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(RunSummary {
        output_dir: out_dir,
        adapter_failures: records.iter().filter(|r| r.adapter_failure).count(),
        resumed: done.len(),
        manifest,
    })
}

pub fn load_manifest(run_dir: &Path) -> Result<Manifest> {
    let path = run_dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingArtifacts(vec![path.display().to_string()]));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Violations of a run grouped by MP id.
pub fn violations_by_mp(run_dir: &Path) -> Result<HashMap<String, Vec<Violation>>> {
    let mut out: HashMap<String, Vec<Violation>> = HashMap::new();
    for v in read_jsonl::<Violation>(&run_dir.join(VIOLATIONS))? {
        out.entry(v.mp_id.clone()).or_default().push(v);
    }
    Ok(out)
}
