mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::fixture;
use serde_json::Value;

fn sdcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdcert")).args(args).output().unwrap()
}

fn fx(name: &str) -> String {
    fixture(name).to_string_lossy().into_owned()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("{e}: {}\n{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
    })
}

fn tau(v: &Value, pointer: &str) -> f64 {
    v.pointer(pointer).and_then(Value::as_f64).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bound_variants() {
    let out = sdcert(&["bound", "--two-v", "--alpha", "4.3957", "--alpha-b", "241.9335", "--gamma1", "1.2491", "--gamma2", "60.5024"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["status"], "OK");
    assert!((tau(&v, "/result/result/tau_max") - 0.0116).abs() < 1e-4);

    let out = sdcert(&["bound", "--single-v", "--alpha", "1", "--alpha-b", "1", "--alpha-f", "1"]);
    assert_eq!(out.status.code(), Some(0));
    assert!((tau(&json(&out), "/result/result/tau_max") - 0.0772).abs() < 1e-4);

    let out = sdcert(&["--format", "csv", "bound", "--two-v", "--alpha", "1", "--alpha-b", "1", "--gamma1", "1", "--gamma2", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("q,tau_hat\n"));
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn bound_input_errors() {
    // a flag that belongs to another bound family
    let out = sdcert(&["bound", "--single-v", "--alpha", "1", "--alpha-b", "1", "--alpha-f", "1", "--gamma1", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let out = sdcert(&["bound", "--two-v", "--alpha", "-1", "--alpha-b", "1", "--gamma1", "1", "--gamma2", "1"]);
    assert_eq!(out.status.code(), Some(3));
    let out = sdcert(&["bound"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn dta_step_outside_range_is_infeasible() {
    let out = sdcert(&["bound", "--dta", "--c-bar", "0.5", "--h", "1", "--alpha-u", "1", "--alpha-b", "1", "--alpha-f", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_pass_fail_and_bad_input() {
    let out = sdcert(&["--model", &fx("ex1_sub1.json"), "--cert", &fx("cert_ex1_sub1.json"), "verify"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_eq!(v["status"], "PASS");
    assert_eq!(v["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(v["inputs"][0]["sha256"].as_str().unwrap().len(), 64);

    let dir = tempfile::tempdir().unwrap();
    let mut cert: Value = serde_json::from_str(&std::fs::read_to_string(fixture("cert_ex1_sub1.json")).unwrap()).unwrap();
    cert["alpha_bar"] = (4.3957 * 1.5).into();
    let bumped = dir.path().join("bumped.json");
    std::fs::write(&bumped, cert.to_string()).unwrap();
    let out = sdcert(&["--model", &fx("ex1_sub1.json"), "--cert", path_str(&bumped), "verify"]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert_eq!(v["status"], "FAIL");
    let margins = v.pointer("/result/verification/margins").unwrap().as_array().unwrap();
    assert!(margins.iter().any(|m| m["margin"].as_f64().unwrap() > 0.0));

    cert.as_object_mut().unwrap().remove("P_tilde");
    cert.as_object_mut().unwrap().insert("P".into(), serde_json::json!([[1, 2], [3, 4]]));
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, cert.to_string()).unwrap();
    let out = sdcert(&["--model", &fx("ex1_sub1.json"), "--cert", path_str(&broken), "verify"]);
    assert_eq!(out.status.code(), Some(3));

    let out = sdcert(&["--model", &fx("ex1_sub1.json"), "verify"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn design_writes_verifiable_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("designed.json");
    let report = dir.path().join("design_report.json");
    let out = sdcert(&[
        "--model", &fx("ex1_sub2_control.json"), "--cert", path_str(&cert), "--out", path_str(&report), "design",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let design = &v["result"]["design"];
    assert!(design["bound"]["tau_max"].as_f64().unwrap() >= 0.02);
    let k: Vec<f64> = design["gain"][0].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!(k.iter().map(|x| x * x).sum::<f64>().sqrt() <= 10.0);

    let out = sdcert(&["--model", &fx("ex1_sub2_control.json"), "--cert", path_str(&cert), "--tol", "abs:0", "verify"]);
    assert_eq!(out.status.code(), Some(0));

    let out = sdcert(&["verify", "--from-report", path_str(&report)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn design_sweep_echoes_c_tilde() {
    let out = sdcert(&[
        "--model", &fx("ex1_sub1_control.json"), "design", "--c-tilde", "sweep:0.5,2", "--fractions", "0.7",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    let sweep = v["result"]["sweep"].as_array().unwrap();
    let echoed: Vec<f64> = sweep.iter().map(|e| e["c_tilde"].as_f64().unwrap()).collect();
    assert_eq!(echoed, vec![0.5, 2.0]);
}

#[test]
fn design_free_c_tilde_needs_noise_free_plant() {
    let out = sdcert(&["--model", &fx("ex1_sub1_control.json"), "design", "--c-tilde", "free"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn simulate_decays_and_is_reproducible() {
    let out = sdcert(&[
        "--model", &fx("ex1_sub1_control_gain.json"), "--seed", "3", "simulate", "--schedule", "periodic:0.0234",
        "--paths", "100",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert!(v["result"]["ms_decay"]["rate"].as_f64().unwrap() < 0.0);
    assert_eq!(v["result"]["decay_confirmed"], true);

    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let csv = dir.path().join(name);
        let out = sdcert(&[
            "--model", &fx("ex1_sub2_control_gain.json"), "--seed", "7", "simulate", "--schedule",
            "uniform:0.01,0.03", "--paths", "1", "--horizon", "1", "--traj-csv", path_str(&csv),
        ]);
        assert_eq!(out.status.code(), Some(0));
        std::fs::read(csv).unwrap()
    };
    let (a, b) = (run("a.csv"), run("b.csv"));
    assert!(a.starts_with(b"t,path,x1,x2\n"));
    assert_eq!(a, b);
}

#[test]
fn simulate_with_designed_certificate_and_zero_state() {
    let out = sdcert(&[
        "--model", &fx("ex1_sub1_control.json"), "--cert", &fx("cert_ex1_sub1_design.json"), "simulate",
        "--schedule", "periodic:0.02", "--paths", "50", "--horizon", "2",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = sdcert(&[
        "--model", &fx("ex1_sub1_control_gain.json"), "simulate", "--schedule", "periodic:0.02", "--paths", "5",
        "--horizon", "1", "--x0", "0,0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!json(&out)["notes"].as_array().unwrap().is_empty());

    let out = sdcert(&["--model", &fx("ex1_sub1_control.json"), "simulate", "--schedule", "periodic:0.02"]);
    assert_eq!(out.status.code(), Some(3));
    let out = sdcert(&["--model", &fx("ex1_sub1_control_gain.json"), "simulate", "--schedule", "bogus"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn report_tabulates_runs() {
    let dir = tempfile::tempdir().unwrap();
    let verify = dir.path().join("verify.json");
    let sim = dir.path().join("sim.json");
    let out = sdcert(&[
        "--model", &fx("ex1_sub1.json"), "--cert", &fx("cert_ex1_sub1.json"), "--out", path_str(&verify), "verify",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = sdcert(&[
        "--model", &fx("ex1_sub1.json"), "--out", path_str(&sim), "simulate", "--schedule", "periodic:0.0116",
        "--paths", "20", "--horizon", "2",
    ]);
    assert_eq!(out.status.code(), Some(0));

    let curve = dir.path().join("curve.csv");
    let out = sdcert(&["--format", "csv", "report", path_str(&verify), path_str(&sim), "--curve-csv", path_str(&curve)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("source,model,tau_max,gain_norm,decay_rate"));
    assert_eq!(lines.count(), 2);
    assert_eq!(std::fs::read_to_string(curve).unwrap().lines().count(), 201);

    let out = sdcert(&["report"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn help_and_unknown_flags() {
    assert_eq!(sdcert(&["--help"]).status.code(), Some(0));
    assert_eq!(sdcert(&["--version"]).status.code(), Some(0));
    assert_eq!(sdcert(&["frobnicate"]).status.code(), Some(3));
}
