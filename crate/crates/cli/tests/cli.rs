use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn microgrid(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_microgrid"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = microgrid(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    microgrid(dir, args).status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

/// Two weeks of profiles for 4 households, written by `gen-profiles`.
fn with_profiles() -> TempDir {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "gen.json", r#"{"agents": 4, "hours": 336}"#);
    ok(
        tmp.path(),
        &["gen-profiles", "--config", "gen.json", "--seed", "5", "--out", "p"],
    );
    tmp
}

const RECIPE: &str = r#"{
    "recipe": {"agents": 3, "horizon": 12, "start": 200, "total_capacity": 20, "battery_power": 3},
    "profiles": {"csv": {"path": "p/profiles.csv"}}
}"#;

#[test]
fn generated_profiles_are_seeded() {
    let tmp = with_profiles();
    let dir = tmp.path();
    let text = fs::read_to_string(dir.join("p/profiles.csv")).unwrap();
    assert!(text.starts_with("timestamp,agent_id,load_kwh,pv_kw\n"));
    assert_eq!(text.lines().count(), 1 + 4 * 336);
    ok(
        dir,
        &["gen-profiles", "--config", "gen.json", "--seed", "5", "--out", "again"],
    );
    assert_eq!(text, fs::read_to_string(dir.join("again/profiles.csv")).unwrap());
    ok(
        dir,
        &["gen-profiles", "--config", "gen.json", "--seed", "6", "--out", "other"],
    );
    assert_ne!(text, fs::read_to_string(dir.join("other/profiles.csv")).unwrap());
}

#[test]
fn dispatch_and_negotiation_agree_on_welfare() {
    let tmp = with_profiles();
    let dir = tmp.path();
    write(dir, "s.json", RECIPE);
    ok(
        dir,
        &["dispatch", "--config", "s.json", "--out", "d", "--format", "json"],
    );
    let d: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("d/dispatch.json")).unwrap()).unwrap();
    let central = d["solution"]["welfare"].as_f64().unwrap();
    assert_eq!(d["scenario"]["agents"].as_array().unwrap().len(), 3);

    ok(dir, &["dispatch", "--config", "s.json", "--out", "d"]);
    let csv = fs::read_to_string(dir.join("d/dispatch.csv")).unwrap();
    assert!(csv.starts_with("agent_id,t,price,demand,solar,discharge,charge,soc\n"));
    assert_eq!(csv.lines().count(), 1 + 3 * 12);

    ok(
        dir,
        &["negotiate", "--config", "s.json", "--out", "n", "--format", "json"],
    );
    let n: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("n/negotiation.json")).unwrap()).unwrap();
    let p2p = n["settlement"]["welfare"].as_f64().unwrap();
    assert!(p2p <= central + 1e-6 && p2p >= central * 0.99, "{p2p} vs {central}");
    assert_eq!(n["ledger"]["termination"], "all_exited");

    ok(dir, &["negotiate", "--config", "s.json", "--out", "n"]);
    let ledger = fs::read_to_string(dir.join("n/ledger.csv")).unwrap();
    assert!(ledger.starts_with("iter,agent_id,t,q,q_prime,beta,pi,alpha,eta,delta\n"));
    let settlement = fs::read_to_string(dir.join("n/settlement.csv")).unwrap();
    let mut rows = settlement.lines();
    assert_eq!(rows.next(), Some("agent_id,no_trade,realized,utility,payment,slack"));
    for row in rows {
        let slack: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(slack >= -1e-6, "{row}");
    }
}

#[test]
fn inline_scenario_is_used_as_given() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "s.json",
        r#"{"scenario": {"horizon": 1, "agents": [
            {"id": "seller", "utility": [{"pi0": 0.1, "d0": 1.0, "r_hat": -0.5, "delta_shift": 0.01}], "solar": [3.0]},
            {"id": "buyer", "utility": [{"pi0": 0.3, "d0": 2.0, "r_hat": -0.5, "delta_shift": 0.02}], "solar": [0.0]}
        ]}}"#,
    );
    let stdout = ok(dir, &["dispatch", "--config", "s.json", "--out", "d"]);
    assert!(stdout.contains("over 2 agents and 1 periods"), "{stdout}");
    let csv = fs::read_to_string(dir.join("d/dispatch.csv")).unwrap();
    assert!(csv.contains("\nseller,0,") && csv.contains("\nbuyer,0,"));
}

#[test]
fn experiments_are_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "g.json",
        r#"{"gammas": [0.3, 0.6], "delta0s": [0.5, 1.0], "trials": 3}"#,
    );
    ok(dir, &["sweep-gamma", "--config", "g.json", "--seed", "2", "--out", "a"]);
    ok(dir, &["sweep-gamma", "--config", "g.json", "--seed", "2", "--out", "b"]);
    let a = fs::read(dir.join("a/gamma_sweep.csv")).unwrap();
    assert_eq!(a, fs::read(dir.join("b/gamma_sweep.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("gamma,delta0,mean_iters,max_iters\n"));
    assert_eq!(text.lines().count(), 5);

    write(
        dir,
        "m.json",
        r#"{"capacities": [10, 40], "trials": 2, "horizons": [1, 6], "agents": [2, 3],
            "profiles": {"synthetic": {"agents": 4, "hours": 720}}}"#,
    );
    ok(
        dir,
        &[
            "experiment-multiagent",
            "--config",
            "m.json",
            "--seed",
            "3",
            "--out",
            "m1",
        ],
    );
    ok(
        dir,
        &[
            "experiment-multiagent",
            "--config",
            "m.json",
            "--seed",
            "3",
            "--out",
            "m2",
        ],
    );
    for name in [
        "trials.csv",
        "welfare_by_T.csv",
        "iterations_by_capacity.csv",
        "special_instance.csv",
    ] {
        let one = fs::read(dir.join("m1").join(name)).unwrap();
        assert_eq!(one, fs::read(dir.join("m2").join(name)).unwrap(), "{name}");
    }
    let trials = fs::read_to_string(dir.join("m1/trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 4);
    ok(
        dir,
        &[
            "experiment-multiagent",
            "--config",
            "m.json",
            "--out",
            "j",
            "--format",
            "json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("j/multiagent.json")).unwrap()).unwrap();
    assert_eq!(report["trials"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_input_exits_with_two() {
    let tmp = with_profiles();
    let dir = tmp.path();
    write(dir, "typo.json", r#"{"recipe": {"agnets": 3}}"#);
    assert_eq!(code(dir, &["dispatch", "--config", "typo.json"]), 2);
    write(dir, "gamma.json", r#"{"gammas": [1.5]}"#);
    assert_eq!(code(dir, &["sweep-gamma", "--config", "gamma.json"]), 2);
    write(
        dir,
        "neg.json",
        &RECIPE.replace(r#""recipe": {"#, r#""negotiation": {"gamma": 0.0}, "recipe": {"#),
    );
    assert_eq!(code(dir, &["negotiate", "--config", "neg.json"]), 2);
    write(dir, "late.json", &RECIPE.replace(r#""start": 200"#, r#""start": 330"#));
    assert_eq!(code(dir, &["dispatch", "--config", "late.json"]), 2);
    write(
        dir,
        "broken.csv",
        "timestamp,agent_id,load_kwh,pv_kw\n2017-01-01T00:00:00,a,-1,0\n",
    );
    write(dir, "parse.json", &RECIPE.replace("p/profiles.csv", "broken.csv"));
    let out = microgrid(dir, &["dispatch", "--config", "parse.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.csv:2"));
    write(dir, "notjson.json", "{");
    assert_eq!(code(dir, &["gen-profiles", "--config", "notjson.json"]), 2);
}

#[test]
fn io_failures_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(code(dir, &["dispatch", "--config", "absent.json"]), 3);
    write(dir, "plain", "");
    assert_eq!(code(dir, &["gen-profiles", "--out", "plain/sub"]), 3);
    write(dir, "s.json", &RECIPE.replace("p/profiles.csv", "nowhere.csv"));
    let out = microgrid(dir, &["dispatch", "--config", "s.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

#[test]
fn shipped_configs_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for verb in ["dispatch", "negotiate"] {
        for cfg in ["scenario.json", "inline-scenario.json"] {
            ok(dir, &[verb, "--config", &shipped(cfg), "--out", "o"]);
        }
    }
    let stdout = ok(
        dir,
        &["negotiate", "--config", &shipped("inline-scenario.json"), "--out", "o"],
    );
    assert!(stdout.starts_with("converged"), "{stdout}");
    ok(
        dir,
        &["gen-profiles", "--config", &shipped("profiles.json"), "--out", "o"],
    );
    ok(
        dir,
        &["sweep-gamma", "--config", &shipped("sweep-gamma.json"), "--out", "o"],
    );
    // The full study takes a while; checking that it parses and validates is enough here.
    let text = fs::read_to_string(shipped("multiagent.json")).unwrap();
    let cfg: microgrid_core::experiment::MultiAgentConfig = serde_json::from_str(&text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(
        cfg,
        microgrid_core::experiment::MultiAgentConfig {
            seed: 11,
            ..Default::default()
        }
    );
}
