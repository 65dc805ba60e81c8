use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_capmorph");

fn capmorph(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("CAPMORPH_SUT_URL")
        .env_remove("CAPMORPH_OD_URL")
        .env_remove("CAPMORPH_INPAINT_URL")
        .env_remove("CAPMORPH_POS_URL")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn scenes(dir: &Path, count: usize, seed: u64) {
    let o = capmorph(&["scenes", "--out", p(dir), "--count", &count.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_report_metrics_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (src, out) = (tmp.path().join("src"), tmp.path().join("out"));
    scenes(&src, 3, 11);
    let o = capmorph(&[
        "run",
        "--source-dir",
        p(&src),
        "--output-dir",
        p(&out),
        "--seed",
        "11",
        "--fault",
        r#"{"mode":"omit","label":"ball","scope":"transformed"}"#,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("27 MPs"), "{}", stdout(&o));
    for f in ["manifest.json", "mps.jsonl", "violations.jsonl", "sources.jsonl", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let o = capmorph(&["report", "--run", p(&out)]);
    assert_eq!(code(&o), 0);
    let first = fs::read(out.join("report.html")).unwrap();
    assert!(out.join("summary.json").exists());
    assert_eq!(code(&capmorph(&["report", "--run", p(&out)])), 0);
    assert_eq!(fs::read(out.join("report.html")).unwrap(), first);

    // label every MP as clean: any report becomes a false positive
    let mps = fs::read_to_string(out.join("mps.jsonl")).unwrap();
    let labels: String = mps
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            format!("{{\"mp_id\":{},\"violation\":false}}\n", v["mp_id"])
        })
        .collect();
    let labels_path = tmp.path().join("labels.jsonl");
    fs::write(&labels_path, labels).unwrap();
    let o = capmorph(&["metrics", "--run", p(&out), "--labels", p(&labels_path), "--level", "case", "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["tp"].as_u64().unwrap() + report["fn"].as_u64().unwrap(), 0);
    assert_eq!(report["fp"].as_u64().unwrap() + report["tn"].as_u64().unwrap(), 27);
    assert!(report["recall"].is_null());

    fs::write(&labels_path, "{\"mp_id\":\"nope\",\"violation\":true}\n").unwrap();
    let o = capmorph(&["metrics", "--run", p(&out), "--labels", p(&labels_path)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn config_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = tmp.path().join("out");
    let o = capmorph(&["run", "--source-dir", p(&empty), "--output-dir", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.join("mps.jsonl").exists());

    let o = capmorph(&["run", "--source-dir", p(&empty), "--output-dir", p(&out), "--t-down", "0.9", "--t-up", "0.2"]);
    assert_eq!(code(&o), 1);

    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "source_dir = \"x\"\noutput_dir = \"y\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&capmorph(&["run", "--config", p(&cfg)])), 1);
    assert_eq!(code(&capmorph(&["no-such-command"])), 1);
    assert_eq!(code(&capmorph(&["report", "--run", p(&empty)])), 1);
}

#[test]
fn missing_scene_gives_partial_run() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    scenes(&src, 2, 3);
    fs::remove_file(src.join("scene001.json")).unwrap();
    let out = tmp.path().join("out");
    let o = capmorph(&["run", "--source-dir", p(&src), "--output-dir", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stdout(&o));
    let sources = fs::read_to_string(out.join("sources.jsonl")).unwrap();
    assert!(sources.contains("\"skipped\""));
}

#[test]
fn unreachable_endpoint_from_env_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    scenes(&src, 2, 4);
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        "source_dir = \"src\"\noutput_dir = \"out\"\n[adapters.sut]\ntransport = \"simulator\"\nretries = 0\ntimeout_ms = 2000\n",
    )
    .unwrap();
    let o = Command::new(BIN)
        .args(["run", "--config", p(&cfg)])
        .env("CAPMORPH_SUT_URL", "http://127.0.0.1:9/caption")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let sources = fs::read_to_string(tmp.path().join("out/sources.jsonl")).unwrap();
    assert!(sources.contains("sut adapter"), "{sources}");
}

#[test]
fn process_transport_matches_in_process_simulator() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    scenes(&src, 1, 21);
    let scene = src.join("scene000.json");
    let fault = r#"{"mode":"omit","label":"ball","scope":"transformed"}"#;

    let sim_out = tmp.path().join("sim");
    let o = capmorph(&["run", "--source-dir", p(&src), "--output-dir", p(&sim_out), "--fault", fault]);
    assert_eq!(code(&o), 0);

    let serve = |role: &str| {
        let mut cmd = vec![BIN.to_string(), "serve".into(), "--role".into(), role.into(), "--scene".into()];
        cmd.push(p(&scene).into());
        cmd.push("--fault".into());
        cmd.push(fault.into());
        serde_json::to_string(&cmd).unwrap()
    };
    let cfg = tmp.path().join("cfg.toml");
    fs::write(
        &cfg,
        format!(
            "source_dir = \"src\"\noutput_dir = \"proc\"\n[adapters.sut]\ntransport = \"process\"\ncommand = {}\n[adapters.od]\ntransport = \"process\"\ncommand = {}\n",
            serve("sut"),
            serve("od")
        ),
    )
    .unwrap();
    let o = capmorph(&["run", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["mps.jsonl", "violations.jsonl"] {
        let a = fs::read_to_string(sim_out.join(f)).unwrap();
        let b = fs::read_to_string(tmp.path().join("proc").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn localize_reports_every_object() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    scenes(&src, 1, 5);
    let o = capmorph(&["localize", "--source-dir", p(&src), "--image", p(&src.join("scene000.png"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let scene: serde_json::Value = serde_json::from_str(&fs::read_to_string(src.join("scene000.json")).unwrap()).unwrap();
    assert_eq!(v["located"].as_array().unwrap().len(), scene["objects"].as_array().unwrap().len());
    assert!(v["unlocated"].as_array().unwrap().is_empty());
}

#[test]
fn compare_prints_every_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    scenes(&src, 4, 6);
    let o = capmorph(&["compare", "--source-dir", p(&src), "--json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}
