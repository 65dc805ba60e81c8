//! `capmorph`: metamorphic testing of image captioning systems.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use capmorph_core::adapters::simulator::{FaultSpec, SimulatedCaptioner, SimulatedDetector, SyntheticScene};
use capmorph_core::adapters::{Captioner, Detector};
use capmorph_core::alignment::{filter_detections, localize_with_detections};
use capmorph_core::harness::compare::format_comparison;
use capmorph_core::harness::metrics::load_labels;
use capmorph_core::harness::pipeline::{RunContext, SourceImage};
use capmorph_core::harness::{compare_selection_modes, compute_metrics, emit_report, run_pipeline, write_corpus, Level, RunConfig};
use capmorph_core::imagery::Raster;
use capmorph_core::selection::SelectionMode;
use capmorph_core::transforms::TransformKind;
use capmorph_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_ADAPTER: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "capmorph", version, about = "Metamorphic testing of image captioning systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, select and assess metamorphic pairs for a corpus.
    Run(RunArgs),
    /// Score a run against a labels file.
    Metrics {
        /// Run directory.
        #[arg(long)]
        run: PathBuf,
        /// JSON Lines labels: {"mp_id","object","violation"}.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "object")]
        level: String,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Write summary.json and report.html into a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Compare selection strategies on the same corpus.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma separated: full, no_ambiguity, no_diversity, random.
        #[arg(long, value_delimiter = ',', default_value = "full,no_ambiguity,no_diversity,random")]
        modes: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    /// Caption one image and show where each caption object was located.
    Localize {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        image: PathBuf,
    },
    /// Write a synthetic scene corpus (PNG plus scene JSON per image).
    Scenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve a simulated model for one scene over JSON Lines on stdin/stdout.
    Serve {
        #[arg(long, value_enum)]
        role: ServeRole,
        #[arg(long)]
        scene: PathBuf,
        /// Fault as JSON, e.g. '{"mode":"omit","label":"ball"}'.
        #[arg(long)]
        fault: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ServeRole {
    Sut,
    Od,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

/// Config file plus flags that override its keys.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    source_dir: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    followups_per_source: Option<usize>,
    #[arg(long)]
    concurrency: Option<usize>,
    /// Comma separated, e.g. MR1,MR3.
    #[arg(long, value_delimiter = ',')]
    mrs: Option<Vec<String>>,
    #[arg(long)]
    selection: Option<String>,
    #[arg(long)]
    verbose: bool,
    #[arg(long)]
    t_down: Option<f64>,
    #[arg(long)]
    t_up: Option<f64>,
    #[arg(long)]
    cosine: Option<f64>,
    #[arg(long)]
    od_score: Option<f64>,
    #[arg(long)]
    scenes_dir: Option<PathBuf>,
    /// Simulator fault as JSON.
    #[arg(long)]
    fault: Option<String>,
}

impl ConfigArgs {
    fn build(&self, need_output: bool) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => {
                let src = self
                    .source_dir
                    .clone()
                    .ok_or_else(|| Error::Config("either --config or --source-dir is required".into()))?;
                let out = match (&self.output_dir, need_output) {
                    (Some(o), _) => o.clone(),
                    (None, false) => PathBuf::from("capmorph-out"),
                    (None, true) => return Err(Error::Config("--output-dir is required without --config".into())),
                };
                RunConfig::new(src, out)
            }
        };
        if let Some(v) = &self.source_dir {
            cfg.source_dir = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.followups_per_source {
            cfg.followups_per_source = v;
        }
        if let Some(v) = self.concurrency {
            cfg.concurrency = v;
        }
        if let Some(v) = &self.mrs {
            cfg.mrs = v.iter().map(|s| s.parse::<TransformKind>()).collect::<Result<_, _>>()?;
        }
        if let Some(v) = &self.selection {
            cfg.selection = v.parse()?;
        }
        cfg.verbose |= self.verbose;
        if let Some(v) = self.t_down {
            cfg.thresholds.t_down = v;
        }
        if let Some(v) = self.t_up {
            cfg.thresholds.t_up = v;
        }
        if let Some(v) = self.cosine {
            cfg.thresholds.cosine = v;
        }
        if let Some(v) = self.od_score {
            cfg.thresholds.od_score = v;
        }
        if let Some(v) = &self.scenes_dir {
            cfg.simulator.scenes_dir = Some(v.clone());
        }
        if let Some(v) = &self.fault {
            cfg.simulator.fault = parse_fault(v)?;
        }
        cfg.apply_env(|k| std::env::var(k).ok());
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_fault(text: &str) -> Result<FaultSpec, Error> {
    serde_json::from_str(text).map_err(|e| Error::Config(format!("bad fault {text:?}: {e}")))
}

fn exit_for(err: &Error) -> u8 {
    if err.is_adapter_failure() {
        EXIT_ADAPTER
    } else {
        EXIT_CONFIG
    }
}

fn cmd_run(args: &RunArgs) -> Result<u8, Error> {
    let cfg = args.config.build(true)?;
    let summary = run_pipeline(&cfg)?;
    let m = &summary.manifest;
    println!(
        "{}: {} sources ({} done, {} skipped, {} resumed), {} MPs, {} violations",
        summary.output_dir.display(),
        m.sources,
        m.completed,
        m.skipped,
        summary.resumed,
        m.mps,
        m.violations
    );
    println!("manifest hash {}", m.manifest_hash);
    if m.skipped == 0 {
        Ok(0)
    } else if m.completed == 0 && summary.adapter_failures > 0 {
        eprintln!("every source failed; {} adapter failures", summary.adapter_failures);
        Ok(EXIT_ADAPTER)
    } else {
        eprintln!("{} sources skipped, see sources.jsonl", m.skipped);
        Ok(EXIT_PARTIAL)
    }
}

fn cmd_localize(args: &ConfigArgs, image: &Path) -> Result<u8, Error> {
    let mut cfg = args.build(false)?;
    if cfg.simulator.scenes_dir.is_none() {
        cfg.simulator.scenes_dir = image.parent().map(Path::to_path_buf);
    }
    let ctx = RunContext::new(cfg)?;
    let name = image
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("bad image path {}", image.display())))?
        .to_string();
    let source = SourceImage {
        name,
        path: image.to_path_buf(),
    };
    let raster = Raster::load_png(image)?;
    let owned = ctx.models_for(&source)?;
    let models = owned.models();
    let text = models.sut.caption(&raster)?;
    let caption = models.tagger.tag_caption(&text)?;
    let detections = filter_detections(&models.od.detect(&raster)?, ctx.config.thresholds.od_score);
    let map = localize_with_detections(&caption, &raster, &detections, models, &ctx.matcher)?;
    let out = json!({
        "caption": text,
        "detections": detections,
        "located": map.located.iter().map(|l| json!({
            "object": l.object.surface,
            "source": l.source,
            "regions": l.regions,
            "pixels": l.mask.count(),
        })).collect::<Vec<_>>(),
        "unlocated": map.unlocated.iter().map(|(_, o)| o.surface.clone()).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn serve_one(line: &str, role: ServeRole, sut: &SimulatedCaptioner, od: &SimulatedDetector) -> Value {
    let request: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => return json!({ "error": format!("bad request: {e}") }),
    };
    let id = request.get("id").cloned().unwrap_or(Value::Null);
    let image = request
        .get("image_png_b64")
        .and_then(Value::as_str)
        .ok_or_else(|| "missing image_png_b64".to_string())
        .and_then(|s| B64.decode(s).map_err(|e| e.to_string()))
        .and_then(|b| Raster::from_png_bytes(&b).map_err(|e| e.to_string()));
    let image = match image {
        Ok(i) => i,
        Err(e) => return json!({ "id": id, "error": e }),
    };
    let body = match role {
        ServeRole::Sut => sut.caption(&image).map(|c| json!({ "id": id, "caption": c })),
        ServeRole::Od => od.detect(&image).map(|d| json!({ "id": id, "objects": d })),
    };
    body.unwrap_or_else(|e| json!({ "id": id, "error": e.to_string() }))
}

fn cmd_serve(role: ServeRole, scene: &Path, fault: Option<&str>) -> Result<u8, Error> {
    let scene = SyntheticScene::load(scene)?;
    let fault = fault.map(parse_fault).transpose()?.unwrap_or_default();
    let sut = SimulatedCaptioner::new(scene.clone(), fault);
    let od = SimulatedDetector::new(scene);
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(stdout, "{}", serve_one(&line, role, &sut, &od))?;
        stdout.flush()?;
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run(args) => cmd_run(&args),
        Command::Metrics { run, labels, level, json } => {
            let level: Level = level.parse()?;
            let labels = load_labels(&labels)?;
            let report = compute_metrics(&run, &labels, level)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            Ok(0)
        }
        Command::Report { run } => {
            let s = emit_report(&run)?;
            println!(
                "{}: {} MPs, {} violations; wrote summary.json and report.html",
                run.display(),
                s.mps,
                s.violations
            );
            Ok(0)
        }
        Command::Compare { config, modes, json } => {
            let cfg = config.build(false)?;
            let modes: Vec<SelectionMode> = modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            let rows = compare_selection_modes(&cfg, &modes)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", format_comparison(&rows));
            }
            Ok(0)
        }
        Command::Localize { config, image } => cmd_localize(&config, &image),
        Command::Scenes { out, count, seed } => {
            let matcher = RunConfig::new(&out, &out).matcher()?;
            let scenes = write_corpus(&out, count, seed, &matcher)?;
            println!("wrote {} scenes to {}", scenes.len(), out.display());
            Ok(0)
        }
        Command::Serve { role, scene, fault } => cmd_serve(role, &scene, fault.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
