//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use capmorph_core::adapters::simulator::{FaultMode, FaultSpec, SimulatedDetector, SyntheticScene, SCENE_VOCABULARY};
use capmorph_core::alignment::LocationSource;
use capmorph_core::harness::metrics::{Label, Level};
use capmorph_core::harness::{compare_selection_modes, compute_metrics, run_pipeline, write_corpus, RunConfig};
use capmorph_core::imagery::{BBox, BitMask};
use capmorph_core::oracle::{ErrorHint, Rule};
use capmorph_core::selection::{
    classify_fate, mask_difference, retain_ratio, select_followups, CandidateAssessment, Fate, SelectionMode,
    DEFAULT_T_DOWN, DEFAULT_T_UP,
};
use capmorph_core::transforms::{candidate_specs, TransformKind, TransformSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{context, corpus, matcher, run_scene, SceneRun};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn check(cond: bool, ok: impl Into<String>, fail: impl Into<String>) -> Outcome {
    if cond {
        Ok(ok.into())
    } else {
        Err(fail.into())
    }
}

/// Maps `f` over `items` on a few threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(8);
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
    })
}

// ---- criterion 1 -------------------------------------------------------

fn fate_thresholds() -> Outcome {
    let exact = [(0.9, Fate::Retain), (0.2, Fate::Disappear), (0.5, Fate::Ambiguous)];
    for (r, want) in exact {
        let got = classify_fate(r, DEFAULT_T_DOWN, DEFAULT_T_UP).unwrap();
        if got != want {
            return Err(format!("{r} classified {got:?}, expected {want:?}"));
        }
    }
    if (DEFAULT_T_DOWN, DEFAULT_T_UP) != (0.2, 0.9) {
        return Err("default thresholds are not 0.2 / 0.9".into());
    }
    // every ratio an object of up to 200 pixels can produce
    let mut n = 0;
    for den in 1..=200u32 {
        for num in 0..=den {
            let r = f64::from(num) / f64::from(den);
            let want = if r >= 0.9 {
                Fate::Retain
            } else if r <= 0.2 {
                Fate::Disappear
            } else {
                Fate::Ambiguous
            };
            if classify_fate(r, 0.2, 0.9).unwrap() != want {
                return Err(format!("{num}/{den} misclassified"));
            }
            n += 1;
        }
    }
    for (lo, hi) in [(0.9, 0.2), (0.5, 0.5), (-0.1, 0.5), (0.2, 1.1)] {
        if classify_fate(0.5, lo, hi).is_ok() {
            return Err(format!("thresholds ({lo}, {hi}) accepted"));
        }
    }
    Ok(format!("{n} boundary ratios plus 0.9/0.2/0.5 classified exactly"))
}

// ---- criterion 2 -------------------------------------------------------

fn random_bits(rng: &mut ChaCha8Rng, w: u32, h: u32) -> Vec<bool> {
    let density: f64 = rng.random_range(0.05..0.95);
    let mut bits: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
    if !bits.iter().any(|&b| b) {
        let i = rng.random_range(0..bits.len());
        bits[i] = true;
    }
    bits
}

fn eq_1_3_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = rng.random_range(1..=32);
        let h = rng.random_range(1..=32);
        let a = random_bits(&mut rng, w, h);
        let b = random_bits(&mut rng, w, h);
        let ma = BitMask::from_bools(w, h, &a).unwrap();
        let mb = BitMask::from_bools(w, h, &b).unwrap();
        let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count() as f64;
        let either = a.iter().zip(&b).filter(|(x, y)| **x || **y).count() as f64;
        let count_a = a.iter().filter(|x| **x).count() as f64;
        let ratio = both / count_a;
        let diff = 1.0 - both / either;
        worst = worst
            .max((retain_ratio(&ma, &mb).unwrap() - ratio).abs())
            .max((mask_difference(&ma, &mb).unwrap() - diff).abs());
    }
    check(
        worst <= 1e-12,
        format!("1000 random pairs, max deviation {worst:e}"),
        format!("max deviation {worst:e} exceeds 1e-12"),
    )
}

// ---- criterion 3 -------------------------------------------------------

fn jaccard_distance(a: &[bool], b: &[bool]) -> f64 {
    let both = a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64;
    let either = a.iter().zip(b).filter(|(x, y)| **x || **y).count() as f64;
    1.0 - both / either
}

fn normalise(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect()
}

/// Greedy rule evaluated by scoring every remaining candidate from scratch.
fn greedy_oracle(amb: &[i64], masks: &[Vec<bool>], k: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::new();
    while chosen.len() < k && chosen.len() < amb.len() {
        let rest: Vec<usize> = (0..amb.len()).filter(|i| !chosen.contains(i)).collect();
        let scores: Vec<f64> = if chosen.is_empty() {
            rest.iter().map(|&i| amb[i] as f64).collect()
        } else {
            let a: Vec<f64> = rest.iter().map(|&i| amb[i] as f64).collect();
            let d: Vec<f64> = rest
                .iter()
                .map(|&i| {
                    chosen
                        .iter()
                        .map(|&c| jaccard_distance(&masks[i], &masks[c]))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            normalise(&a).iter().zip(normalise(&d)).map(|(x, y)| x + y).collect()
        };
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pick = rest[scores.iter().position(|&s| s == best).unwrap()];
        chosen.push(pick);
    }
    chosen
}

fn selection_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for trial in 0..500 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=9);
        let (w, h) = (rng.random_range(2..=6), rng.random_range(2..=6));
        let amb: Vec<i64> = (0..n).map(|_| rng.random_range(-2..=3)).collect();
        let masks: Vec<Vec<bool>> = (0..n).map(|_| random_bits(&mut rng, w, h)).collect();
        let pool: Vec<CandidateAssessment> = (0..n)
            .map(|i| CandidateAssessment {
                spec: TransformSpec::Rotate { angle: 1.0 },
                m_tran: BitMask::from_bools(w, h, &masks[i]).unwrap(),
                fates: vec![],
                n_retain: 0,
                n_ambiguous: 0,
                n_disappear: 0,
                score_ambiguity: amb[i],
            })
            .collect();
        let got = select_followups(&pool, k).unwrap();
        let want = greedy_oracle(&amb, &masks, k);
        if got != want {
            return Err(format!("trial {trial}: selected {got:?}, oracle {want:?} (ambiguity {amb:?})"));
        }
    }
    Ok("500/500 randomized pools match the exhaustive greedy oracle".into())
}

// ---- criterion 4 -------------------------------------------------------

fn faithful_detector(scene: &SyntheticScene) -> SimulatedDetector {
    SimulatedDetector::new(scene.clone())
}

fn zero_false_positives() -> Outcome {
    let ctx = context(4);
    let scenes = corpus(100, 4);
    let runs: Vec<SceneRun> = par_map(&scenes, |i, s| {
        run_scene(&ctx, &format!("s{i}"), s, FaultSpec::none(), faithful_detector(s), SelectionMode::Full)
    });
    let mps: usize = runs.iter().map(|r| r.mps.len()).sum();
    let violations: Vec<_> = runs.iter().flat_map(|r| r.mps.iter().flat_map(|m| m.mp.violations.iter())).collect();
    check(
        violations.is_empty() && mps == 900,
        format!("100 scenes, {mps} MPs, 0 violations"),
        format!("{mps} MPs, {} violations, first {:?}", violations.len(), violations.first()),
    )
}

// ---- criterion 5 -------------------------------------------------------

fn fault_detection() -> Outcome {
    let ctx = context(5);
    let m = matcher();
    let scenes = corpus(100, 5);

    // omission of the first object, on transformed images only
    let omit: Vec<Option<bool>> = par_map(&scenes, |i, s| {
        let target = s.objects[0].label.clone();
        let fault = FaultSpec::on_transformed(FaultMode::Omit { label: target.clone() });
        let run = run_scene(&ctx, &format!("o{i}"), s, fault, faithful_detector(s), SelectionMode::Full);
        let affected = run.mps.iter().any(|a| {
            a.mp.fates.iter().any(|f| f.object.lemma == target && f.fate == Fate::Retain)
        });
        affected.then(|| {
            run.mps
                .iter()
                .flat_map(|a| &a.mp.violations)
                .any(|v| v.rule == Rule::R1 && v.object == target)
        })
    });

    // the second object is fabricated whenever the first is described
    let two: Vec<&SyntheticScene> = scenes.iter().filter(|s| s.objects.len() >= 2).collect();
    let fabricate: Vec<Option<bool>> = par_map(&two, |i, s| {
        let (trigger, fabricated) = (s.objects[0].label.clone(), s.objects[1].label.clone());
        let fault = FaultSpec::new(FaultMode::Fabricate {
            trigger: trigger.clone(),
            fabricated: fabricated.clone(),
        });
        let run = run_scene(&ctx, &format!("f{i}"), s, fault, faithful_detector(s), SelectionMode::Full);
        let applicable: Vec<_> = run
            .mps
            .iter()
            .filter(|a| {
                let fate = |l: &str| a.mp.fates.iter().find(|f| f.object.lemma == l).map(|f| (f.fate, f.ratio));
                matches!(fate(&trigger), Some((Fate::Retain, _))) && matches!(fate(&fabricated), Some((_, r)) if r == 0.0)
            })
            .collect();
        (!applicable.is_empty()).then(|| {
            applicable.iter().any(|a| {
                a.mp
                    .violations
                    .iter()
                    .any(|v| v.rule == Rule::R2 && v.object == fabricated && v.hint == ErrorHint::Type3)
            })
        })
    });

    // the first object is called something unrelated on transformed images
    let misclassify: Vec<Option<bool>> = par_map(&scenes, |i, s| {
        let from = s.objects[0].label.clone();
        let to = SCENE_VOCABULARY
            .iter()
            .find(|v| s.objects.iter().all(|o| !m.same_category(&o.label, v)))
            .unwrap()
            .to_string();
        let fault = FaultSpec::on_transformed(FaultMode::Misclassify { from: from.clone(), to });
        let run = run_scene(&ctx, &format!("m{i}"), s, fault, faithful_detector(s), SelectionMode::Full);
        let affected = run
            .mps
            .iter()
            .any(|a| a.mp.fates.iter().any(|f| f.object.lemma == from && f.fate == Fate::Retain));
        affected.then(|| {
            run.mps.iter().flat_map(|a| &a.mp.violations).any(|v| {
                v.rule == Rule::R1 && v.object == from && v.hint == ErrorHint::Type1_2
            })
        })
    });

    let rate = |xs: &[Option<bool>]| {
        let hits = xs.iter().filter(|x| **x == Some(true)).count();
        let total = xs.iter().filter(|x| x.is_some()).count();
        (hits, total, if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    };
    let (oh, ot, or) = rate(&omit);
    let (fh, ft, fr) = rate(&fabricate);
    let (mh, mt, mr) = rate(&misclassify);
    let msg = format!(
        "omit R1 {oh}/{ot} ({:.1}%), fabricate R2+Type3 {fh}/{ft} ({:.1}%), misclassify R1+Type1.2 {mh}/{mt} ({:.1}%)",
        or * 100.0,
        fr * 100.0,
        mr * 100.0
    );
    let enough = ot >= 50 && ft >= 20 && mt >= 50;
    check(enough && or >= 0.95 && fr >= 0.95 && mr >= 0.90, msg.clone(), msg)
}

// ---- criterion 6 -------------------------------------------------------

fn mask_box_iou(mask: &BitMask, b: BBox) -> f64 {
    let inter = mask.iter_set().filter(|&(x, y)| x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1).count() as f64;
    inter / (mask.count() as f64 + b.area() as f64 - inter)
}

fn localization_quality() -> Outcome {
    let ctx = context(6);
    let scenes = corpus(60, 6);
    // the detector renames the first object so occlusion has to find it
    let results: Vec<Result<(usize, usize, f64), String>> = par_map(&scenes, |i, s| {
        let od = SimulatedDetector::new(s.clone()).with_relabel(&s.objects[0].label, "thing");
        let run = run_scene(&ctx, &format!("l{i}"), s, FaultSpec::none(), od, SelectionMode::Full);
        let map = &run.analysis.map;
        if !map.unlocated.is_empty() {
            return Err(format!("scene {i}: unlocated {:?}", map.unlocated));
        }
        let mut worst = 1.0f64;
        let mut by_occlusion = 0;
        for l in &map.located {
            let truth = s.objects.iter().find(|o| o.label == l.object.lemma).ok_or("object not in scene")?;
            worst = worst.min(mask_box_iou(&l.mask, truth.bbox));
            by_occlusion += usize::from(l.source == LocationSource::Occlusion);
        }
        Ok((map.located.len(), by_occlusion, worst))
    });
    let mut objects = 0;
    let mut occluded = 0;
    let mut worst = 1.0f64;
    for r in results {
        let (n, o, w) = r?;
        objects += n;
        occluded += o;
        worst = worst.min(w);
    }
    check(
        worst >= 0.5 && occluded == scenes.len(),
        format!("{objects} objects located ({occluded} by occlusion), min IoU {worst:.3}"),
        format!("min IoU {worst:.3}, {occluded} of {} occlusion localizations", scenes.len()),
    )
}

// ---- criterion 7 -------------------------------------------------------

fn rq3_direction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("corpus");
    write_corpus(&src, 100, 7, &matcher()).unwrap();
    let mut cfg = RunConfig::new(&src, dir.path().join("unused"));
    cfg.seed = 7;
    // an SUT that keeps describing barely visible objects
    cfg.simulator.fault = FaultSpec {
        visibility_threshold: 0.05,
        ..FaultSpec::none()
    };
    cfg.concurrency = 8;
    let modes = [SelectionMode::Full, SelectionMode::NoAmbiguity, SelectionMode::NoDiversity];
    let rows = compare_selection_modes(&cfg, &modes).unwrap();
    let (full, no_amb, no_div) = (rows[0].total, rows[1].total, rows[2].total);
    let msg = format!(
        "valid cases full {} vs no_ambiguity {}; distinct objects full {} vs no_diversity {}",
        full.valid_cases, no_amb.valid_cases, full.distinct_objects, no_div.distinct_objects
    );
    check(
        full.valid_cases > no_amb.valid_cases && full.distinct_objects >= no_div.distinct_objects,
        msg.clone(),
        msg,
    )
}

// ---- criterion 8 -------------------------------------------------------

fn rotation_pool() -> Outcome {
    let specs = candidate_specs(128, 96, 500.0, TransformKind::Rotate, 3);
    let angles: Vec<i64> = specs
        .iter()
        .map(|s| match s {
            TransformSpec::Rotate { angle } => *angle as i64,
            _ => i64::MIN,
        })
        .collect();
    let want: Vec<i64> = (-30..=30).filter(|a| *a != 0).collect();
    check(
        specs.len() == 60 && angles == want,
        "60 specs, angles -30..-1 and 1..30",
        format!("{} specs: {angles:?}", specs.len()),
    )
}

// ---- criterion 9 -------------------------------------------------------

fn metrics_arithmetic() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut mps = String::new();
    let mut violations = String::new();
    let mut labels = Vec::new();
    // mp0, mp1: reported and true; mp2: missed; mp3: false alarm; mp4..9: quiet and clean
    for i in 0..10 {
        let id = format!("mp{i}");
        let rec = serde_json::json!({
            "mp_id": id, "source": "s", "mr": "MR1",
            "spec": {"kind": "crop", "top_left": [0, 0], "bottom_right": [4, 4]},
            "source_caption": "a cat", "followup_caption": "", "source_image": "images/s.png",
            "followup_image": format!("images/{id}.png"), "fates": [], "unlocated": [],
            "valid": true, "violations": usize::from(i == 0 || i == 1 || i == 3)
        });
        mps.push_str(&format!("{rec}\n"));
        if i == 0 || i == 1 || i == 3 {
            violations.push_str(&format!(
                "{{\"mp_id\":\"{id}\",\"rule\":\"R1\",\"object\":\"cat\",\"side\":\"followup\",\"hint\":\"Type2.2\"}}\n"
            ));
        }
        labels.push(Label {
            mp_id: id,
            object: Some("cat".into()),
            violation: i <= 2,
        });
    }
    std::fs::write(dir.path().join("mps.jsonl"), mps).unwrap();
    std::fs::write(dir.path().join("violations.jsonl"), violations).unwrap();
    let r = compute_metrics(dir.path(), &labels, Level::Object).unwrap();
    let c = r.counts;
    let ok = (c.tp, c.fn_, c.fp, c.tn) == (2, 1, 1, 6)
        && r.precision == Some(2.0 / 3.0)
        && r.recall == Some(2.0 / 3.0)
        && r.accuracy == Some(0.8);
    check(
        ok,
        "(2,1,1,6) gives precision 2/3, recall 2/3, accuracy 0.8",
        format!("got {r}"),
    )
}

// ---- criterion 10 ------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("corpus");
    write_corpus(&src, 20, 10, &matcher()).unwrap();
    let mut hashes = Vec::new();
    let mut counts = Vec::new();
    for (run, concurrency) in [("a", 4), ("b", 2)] {
        let mut cfg = RunConfig::new(&src, dir.path().join(run));
        cfg.seed = 10;
        cfg.concurrency = concurrency;
        cfg.simulator.fault = FaultSpec::on_transformed(FaultMode::Omit { label: "ball".into() });
        let summary = run_pipeline(&cfg).unwrap();
        hashes.push(summary.manifest.manifest_hash.clone());
        counts.push((summary.manifest.mps, summary.manifest.violations));
    }
    let same_files = ["mps.jsonl", "violations.jsonl", "sources.jsonl"].iter().all(|f| {
        std::fs::read(dir.path().join("a").join(f)).unwrap() == std::fs::read(dir.path().join("b").join(f)).unwrap()
    });
    check(
        hashes[0] == hashes[1] && same_files && counts[0].0 == 180,
        format!("two runs of 20 scenes ({} MPs): manifest hash {}", counts[0].0, &hashes[0][..16]),
        format!("hashes {hashes:?}, counts {counts:?}, identical records {same_files}"),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("fate thresholds", fate_thresholds, Duration::from_secs(1)),
        ("retain ratio / Jaccard oracle equivalence", eq_1_3_oracle, Duration::from_secs(5)),
        ("selection matches exhaustive greedy", selection_correctness, Duration::from_secs(10)),
        ("zero false positives on faithful simulator", zero_false_positives, Duration::from_secs(120)),
        ("fault detection (omit / fabricate / misclassify)", fault_detection, Duration::from_secs(300)),
        ("localization quality", localization_quality, Duration::from_secs(120)),
        ("selection ablation direction", rq3_direction, Duration::from_secs(600)),
        ("rotation pool size", rotation_pool, Duration::from_secs(1)),
        ("metrics arithmetic", metrics_arithmetic, Duration::from_secs(1)),
        ("run determinism", determinism, Duration::from_secs(300)),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(msg) if elapsed > *budget => Err(format!("{msg}; took {elapsed:.1?}, budget {budget:?}")),
            r => r,
        };
        match result {
            Ok(msg) => println!("PASS [{:>2}] {name}: {msg} ({elapsed:.2?})", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {msg} ({elapsed:.2?})", i + 1);
            }
        }
    }
    let distinct: BTreeSet<&str> = criteria.iter().map(|c| c.0).collect();
    assert_eq!(distinct.len(), criteria.len());
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
