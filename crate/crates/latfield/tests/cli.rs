use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn latfield(command: &str, config: &str, out: &Path) -> (i32, String) {
    let dir = out.parent().unwrap();
    let cfg = dir.join(format!("{command}-config.json"));
    std::fs::write(&cfg, config).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_latfield"))
        .args([command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"])
        .output()
        .unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn validate_reports_symmetry_and_stability() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let (code, err) = latfield("validate", r#"{"model":{"name":"antiplane-sine"}}"#, &out);
    assert_eq!(code, 0, "{err}");
    let s = json(&out.join("summary.json"));
    assert_eq!(s["symmetry_pass"], Value::Bool(true));
    assert!((s["c0"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["command"], "validate");
    assert_eq!(m["config"]["model"]["name"], "antiplane-sine");
    assert!(m["timings_s"]["total"].as_f64().unwrap() >= 0.0);
    assert!(m["tables"]["elastic"]["sha256"].as_str().unwrap().len() == 64);
}

#[test]
fn greens_table_reproduces_potential_kernel_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"model":{"name":"antiplane-sine"},"greens":{"supercell":512,"radius":48}}"#;
    let (code, err) = latfield("greens", cfg, &out);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("greens.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "n1,n2,G11");
    let mut g0 = None;
    let mut g1 = None;
    for l in lines {
        let p: Vec<&str> = l.split(',').collect();
        let v: f64 = p[2].parse().unwrap();
        match (p[0], p[1]) {
            ("0", "0") => g0 = Some(v),
            ("1", "0") => g1 = Some(v),
            _ => {}
        }
    }
    assert!((g1.unwrap() - g0.unwrap() + 0.25).abs() < 1e-6);
    let m = json(&out.join("manifest.json"));
    let meta = &m["tables"]["greens"]["metadata"];
    assert!(meta["extrapolation_error"].as_f64().unwrap() < meta["richardson_tolerance"].as_f64().unwrap());
}

#[test]
fn unknown_keys_and_bad_ranges_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let (code, err) = latfield("validate", r#"{"model":{"name":"antiplane-sine"},"solve":{"radius":8,"tol":1}}"#, &tmp.path().join("a"));
    assert_eq!(code, 2);
    assert!(err.contains("solve") && err.contains("tol"), "{err}");
    let (code, err) = latfield("greens", r#"{"model":{"name":"antiplane-sine"},"greens":{"supercell":100}}"#, &tmp.path().join("b"));
    assert_eq!(code, 2);
    assert!(err.contains("greens.supercell"), "{err}");
    let (code, _) = latfield("validate", r#"{"model":{"name":"no-such-model"}}"#, &tmp.path().join("c"));
    assert_eq!(code, 2);
    let (code, _) = latfield("validate", r#"{"command":"greens","model":{"name":"antiplane-sine"}}"#, &tmp.path().join("d"));
    assert_eq!(code, 2);
    let out = tmp.path().join("e");
    let (code, err) = latfield("validate", r#"{"model":{"name":"antiplane-cubic"}}"#, &out);
    assert_eq!(code, 2, "{err}");
    assert_eq!(json(&out.join("summary.json"))["symmetry_pass"], Value::Bool(false));
}

#[test]
fn numerical_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"model":{"name":"triangular-pair"},"defect":{"kind":"vacancy"},
                  "solve":{"scheme":"clamped","radius":12,"gradient_tolerance":1e-14,"max_newton":1}}"#;
    let (code, err) = latfield("solve", cfg, &tmp.path().join("out"));
    assert_eq!(code, 3, "{err}");
}

fn strip_volatile(mut m: Value) -> Value {
    let o = m.as_object_mut().unwrap();
    o.remove("timings_s");
    o.remove("started_unix_s");
    m
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = r#"{"model":{"name":"triangular-pair"},"defect":{"kind":"vacancy"},
                  "greens":{"supercell":512,"radius":24},
                  "solve":{"scheme":"augmented","p":1,"radius":8}}"#;
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(latfield("solve", cfg, &a).0, 0);
    assert_eq!(latfield("solve", cfg, &b).0, 0);
    for f in ["summary.json", "solution.csv", "coefficients.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(strip_volatile(json(&a.join("manifest.json"))), strip_volatile(json(&b.join("manifest.json"))));
}

#[test]
fn greens_cache_is_reused() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let cfg = format!(
        r#"{{"model":{{"name":"antiplane-sine"}},"greens":{{"supercell":256,"radius":16,"cache_dir":{}}}}}"#,
        serde_json::to_string(cache.to_str().unwrap()).unwrap()
    );
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(latfield("greens", &cfg, &a).0, 0);
    assert_eq!(latfield("greens", &cfg, &b).0, 0);
    assert_eq!(json(&a.join("summary.json"))["from_cache"], false);
    assert_eq!(json(&b.join("summary.json"))["from_cache"], true);
    assert_eq!(std::fs::read(a.join("greens.csv")).unwrap(), std::fs::read(b.join("greens.csv")).unwrap());
}

#[test]
fn predictor_and_moments_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    let cfg = r#"{"model":{"name":"antiplane-sine"},"defect":{"kind":"screw"},
                  "predictor":{"p":2,"samples":16,"identity_radius":32}}"#;
    let (code, err) = latfield("predictor", cfg, &out);
    assert_eq!(code, 0, "{err}");
    let s = json(&out.join("summary.json"));
    assert!(s["force_identity"]["relative_gap"].as_f64().unwrap() < 1e-2);
    let csv = std::fs::read_to_string(out.join("predictor.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "theta,x1,x2,u,u0,u1,u2");
    assert_eq!(csv.lines().count(), 17);

    let out = tmp.path().join("m");
    let cfg = r#"{"model":{"name":"triangular-pair"},"defect":{"kind":"vacancy"},
                  "moments":{"solve_radius":32,"radius":16,"orders":2}}"#;
    let (code, err) = latfield("moments", cfg, &out);
    assert_eq!(code, 0, "{err}");
    let s = json(&out.join("summary.json"));
    // the vacancy exerts no net force; its dipole is nonzero
    let b0 = s["coefficients"]["coeffs"][0][0]["data"][0].as_f64().unwrap();
    let b1 = s["coefficients"]["coeffs"][1][0]["data"][0].as_f64().unwrap();
    assert!(b0.abs() < 1e-10 && b1 < -0.3, "{b0} {b1}");
}

#[test]
fn clamped_study_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = r#"{"model":{"name":"triangular-pair"},"defect":{"kind":"vacancy"},
                  "greens":{"supercell":2048,"radius":64},
                  "study":{"scheme":"clamped","radii":[8,16,24,32,48,64],"reference_radius":192}}"#;
    let (code, err) = latfield("study", cfg, &out);
    assert_eq!(code, 0, "{err}");
    let s = json(&out.join("summary.json"));
    let slope = s["fitted_slope"].as_f64().unwrap();
    assert!((slope + 1.0).abs() <= 0.2, "{slope}");
    let csv = std::fs::read_to_string(out.join("study.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "R,error,energy");
    assert_eq!(csv.lines().count(), 7);
}
