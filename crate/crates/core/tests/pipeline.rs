use forge_core::dn::DnMatrix;
use forge_core::pipeline::{convergence_study, run_counterexample, write_csv};
use forge_core::ForgeConfig;

fn small() -> ForgeConfig {
    ForgeConfig { resolution: 8, controls: false, spectrum_count: 4, ..ForgeConfig::default() }
}

#[test]
fn reports_are_byte_identical() {
    let a = run_counterexample(&small()).unwrap().to_json().unwrap();
    let b = run_counterexample(&small()).unwrap().to_json().unwrap();
    assert_eq!(a, b);
}

#[test]
fn dumps_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ForgeConfig { dump: true, output_dir: Some(dir.path().to_path_buf()), ..small() };
    let report = run_counterexample(&cfg).unwrap();
    let (m, freq, _) = DnMatrix::load_dense(&dir.path().join("dn_conformal")).unwrap();
    assert_eq!(m.nrows(), report.mesh.boundary_nodes);
    assert!((m.clone() - m.transpose()).norm() <= 1e-8 * m.norm());
    let (_, freq_beta, _) = DnMatrix::load_dense(&dir.path().join("dn_beta")).unwrap();
    assert!(freq > 0.0 && freq == freq_beta);
    let saved = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert_eq!(saved, report.to_json().unwrap());
    let mtx = std::fs::read_to_string(dir.path().join("stiffness_conformal.mtx")).unwrap();
    assert!(mtx.lines().count() > report.mesh.vertices);
}

#[test]
fn convergence_rows_serialize_with_header() {
    let rows = convergence_study(&small(), &[6, 7, 8]).unwrap();
    assert_eq!(rows.len(), 3);
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("resolution,h,lambda1,"));
    assert_eq!(text.lines().count(), 4);
}
