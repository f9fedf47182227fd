use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(rel)
}

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn llmcd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llmcd"))
        .args(args)
        .env_remove("LLMCD_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr)
        .unwrap_or_else(|_| panic!("stderr not JSON: {}", String::from_utf8_lossy(&o.stderr)))
}

fn gpt3_fullflat(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "estimate".into(),
        "--model".into(),
        fixture("models/gpt3-175b.json").display().to_string(),
        "--system".into(),
        fixture("systems/fullflat.json").display().to_string(),
        "--batch".into(),
        "1024".into(),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run(args: &[String]) -> Output {
    llmcd(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

const GPT3_FULLFLAT: &[&str] = &[
    "--tp",
    "16",
    "--pp",
    "2",
    "--dp",
    "512",
    "--interleave",
    "48",
    "--microbatch",
    "2",
    "--zero",
    "z2",
    "--tp-comm",
    "rs-ag",
    "--tp-overlap",
    "--dp-overlap",
    "--offload-opt",
    "--gpus",
    "16384",
];

#[test]
fn estimate_prints_json() {
    let o = run(&gpt3_fullflat(GPT3_FULLFLAT));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let step = v["step_time"].as_f64().unwrap();
    let tps = v["tokens_per_sec"].as_f64().unwrap();
    assert!(step > 0.0);
    assert!((step * tps - 1024.0 * 2048.0).abs() < 1e-6 * 1024.0 * 2048.0);
    assert_eq!(v["strategy"]["interleave"], 48);
}

#[test]
fn estimate_csv_has_fixed_header() {
    let mut args = gpt3_fullflat(GPT3_FULLFLAT);
    args.extend(["--format".into(), "csv".into()]);
    let o = run(&args);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), llmcd::report::HEADER.join(","));
    assert_eq!(
        lines.next().unwrap().split(',').count(),
        llmcd::report::HEADER.len()
    );
}

#[test]
fn strategy_file_matches_flags() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.json");
    std::fs::write(
        &p,
        r#"{"tp":16,"pp":2,"dp":512,"ep":1,"es":16,"dp_exp":512,"microbatch":2,"interleave":48,
            "zero":"z2","tp_comm":"rs_ag","tp_overlap":"ring","dp_overlap":true,
            "fused_activation":true,"offload_opt":true}"#,
    )
    .unwrap();
    let a = run(&gpt3_fullflat(GPT3_FULLFLAT));
    let b = run(&gpt3_fullflat(&["--strategy", p.to_str().unwrap()]));
    assert!(b.status.success(), "{}", String::from_utf8_lossy(&b.stderr));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn invalid_strategy_exits_3() {
    let o = run(&gpt3_fullflat(&["--tp", "5", "--dp", "1"]));
    assert_eq!(o.status.code(), Some(3));
    let v = stderr_json(&o);
    assert!(v["message"].as_str().unwrap().contains("H mod tp"), "{v}");
}

#[test]
fn missing_file_exits_2() {
    let o = llmcd(&[
        "estimate",
        "--model",
        "/nonexistent/model.json",
        "--system",
        fixture("systems/fullflat.json").to_str().unwrap(),
        "--batch",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");
}

#[test]
fn infeasible_exits_4_with_violation() {
    let mut args = gpt3_fullflat(&[]);
    args[6] = "1".into();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(4));
    let v = stderr_json(&o);
    assert!(v["violation"]["bytes_over"].as_f64().unwrap() > 0.0, "{v}");
}

fn desk_search(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = [
        "search",
        "--model",
        fixture("models/desk-moe.json").to_str().unwrap(),
        "--system",
        fixture("systems/fullflat.json").to_str().unwrap(),
        "--batch",
        "64",
        "--gpus",
        "16",
        "--top-n",
        "20",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn search_matches_golden_at_any_thread_count() {
    let expected = std::fs::read_to_string(golden("search_desk_16.csv")).unwrap();
    let one = run(&desk_search(&["--threads", "1"]));
    assert!(one.status.success());
    assert_eq!(stdout(&one), expected);
    let env = Command::new(env!("CARGO_BIN_EXE_llmcd"))
        .args(desk_search(&["--threads", "1"]))
        .env("LLMCD_THREADS", "3")
        .output()
        .unwrap();
    assert!(env.status.success());
    assert_eq!(stdout(&env), expected);
}

#[test]
fn bad_thread_env_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_llmcd"))
        .args(desk_search(&[]))
        .env("LLMCD_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_file_is_written_atomically() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("top.csv");
    std::fs::write(&out, "stale").unwrap();
    let o = run(&desk_search(&["--out", out.to_str().unwrap()]));
    assert!(o.status.success());
    assert!(o.stdout.is_empty());
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        std::fs::read_to_string(golden("search_desk_16.csv")).unwrap()
    );
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "temp file left behind");
}

#[test]
fn all_out_lists_every_strategy() {
    let dir = tempfile::tempdir().unwrap();
    let all = dir.path().join("all.csv");
    let mut args = desk_search(&["--all-out", all.to_str().unwrap()]);
    args[6] = "8".into();
    args[8] = "4".into();
    let o = run(&args);
    assert!(o.status.success());
    let summary = stdout(&o).lines().last().unwrap().to_string();
    let evaluated: usize = summary
        .split("evaluated=")
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    let text = std::fs::read_to_string(&all).unwrap();
    assert_eq!(text.lines().count(), evaluated + 1);
    assert!(text.lines().next().unwrap().ends_with(",mfu,reason"));
}

#[test]
fn sweep_matches_golden() {
    let o = llmcd(&["sweep", golden("strong_scaling.json").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        stdout(&o),
        std::fs::read_to_string(golden("strong_scaling.csv")).unwrap()
    );
}

#[test]
fn invalid_sweep_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"axis":"gpus","values":[16,8],"model":"desk-moe","system":"FullFlat","batch":64,"gpus":8}"#).unwrap();
    let o = llmcd(&["sweep", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_json(&o)["message"]
        .as_str()
        .unwrap()
        .contains("increasing"));
}

#[test]
fn ablation_never_speeds_up() {
    let dir = tempfile::tempdir().unwrap();
    let baseline = dir.path().join("base.csv");
    let golden_text = std::fs::read_to_string(golden("strong_scaling.csv")).unwrap();
    let subset: Vec<&str> = golden_text.lines().take(3).collect();
    std::fs::write(&baseline, subset.join("\n") + "\n").unwrap();
    for flag in ["no-overlap", "sw-collectives"] {
        let o = llmcd(&[
            "ablate",
            "--model",
            fixture("models/desk-moe.json").to_str().unwrap(),
            "--system",
            fixture("systems/twotier-hbd8.json").to_str().unwrap(),
            "--batch",
            "256",
            "--flag",
            flag,
            "--baseline",
            baseline.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let text = stdout(&o);
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "gpus,baseline_step_s,ablated_step_s,slowdown_pct"
        );
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 2);
        for r in rows {
            let pct: f64 = r.rsplit(',').next().unwrap().parse().unwrap();
            assert!(pct >= 0.0, "{flag}: {r}");
        }
    }
}
