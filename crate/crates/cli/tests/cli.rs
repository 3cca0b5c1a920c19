use std::path::Path;
use std::process::{Command, Output};

use forge_core::conductivity::Identity;
use forge_core::mesh::{build_box_mesh, BoxDomain};
use forge_core::spectral::dirichlet_eigenpairs;
use forge_core::ForgeConfig;

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(args)
        .env("FORGE_THREADS", "1")
        .output()
        .expect("spawn forge")
}

fn write_config(dir: &Path, cfg: &ForgeConfig) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn small() -> ForgeConfig {
    ForgeConfig { resolution: 8, controls: false, spectrum_count: 4, ..ForgeConfig::default() }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"resolution": 8, "no_such_field": 1}"#).unwrap();
    let out = forge(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_config_file_exits_2() {
    let out = forge(&["run", "--config", "/nonexistent/forge.json"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_thread_count_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = Command::new(env!("CARGO_BIN_EXE_forge"))
        .args(["run", "--config", &cfg])
        .env("FORGE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn resonant_frequency_exits_3() {
    let mesh = build_box_mesh(8, BoxDomain::unit()).unwrap();
    let lambda1 = dirichlet_eigenpairs(&Identity, &mesh, 2).unwrap().eigenvalues[0];
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &ForgeConfig { lambda0: lambda1, ..small() });
    let out = forge(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn zero_amplitude_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &ForgeConfig { eps: vec![0.0], ..small() });
    let out = forge(&["run", "--config", &cfg]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn converge_needs_three_resolutions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = forge(&["converge", "--config", &cfg, "--resolutions", "8,12"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn run_writes_report_and_dumps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &ForgeConfig { dump: true, ..small() });
    let outdir = dir.path().join("out");
    let out = forge(&["run", "--config", &cfg, "--output", outdir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(outdir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mesh"]["resolution"], 8);
    assert!(report["verdict"].is_string());
    for name in ["moser_diagnostics.csv", "mesh.json", "stiffness_conformal.mtx", "dn_beta.bin", "dn_conformal.json"] {
        assert!(outdir.join(name).exists(), "{name} missing");
    }
    let header: serde_json::Value = serde_json::from_slice(&std::fs::read(outdir.join("dn_beta.json")).unwrap()).unwrap();
    let n = header["dimension"].as_u64().unwrap();
    assert_eq!(std::fs::metadata(outdir.join("dn_beta.bin")).unwrap().len(), 8 * n * n);
    let csv = std::fs::read_to_string(outdir.join("moser_diagnostics.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn family_prints_csv_with_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small());
    let out = forge(&["family", "--config", &cfg, "-n", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("index,amplitude,eps"));
}
