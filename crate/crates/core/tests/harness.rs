//! End-to-end harness runs on a reduced configuration.

use std::fs;
use std::path::Path;

use hbf_core::harness::{
    parse_config, read_rows, ExperimentConfig, ExperimentId, ResultBundle, Runner, BEAM_HEADER, RESULT_HEADER,
};
use hbf_core::tensor_io;

fn small_config(out: &Path) -> ExperimentConfig {
    let mut cfg = parse_config(
        r#"
        trials = 8
        [system]
        n_t = 16
        n_r = 4
        [training]
        samples = 120
        epochs = 4
        batch_size = 20
        [fig7]
        n_t = [16, 32]
        [fig8]
        n_t = [16, 64]
        [fig9]
        channels = 5
        [beampattern]
        azimuth_points = 61
        elevation_points = 31
        [fig12]
        n_rf = 4
        channels = 2
        bits_per_channel = 10000
        snr_db = [-20.0, -10.0, 0.0]
        "#,
    )
    .unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn all_writes_every_artifact_with_consistent_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(small_config(dir.path())).unwrap();
    let res = runner.run_all().unwrap();
    let hash = runner.config_hash();
    assert_eq!(res.bundle.config_hash, hash);
    for id in ExperimentId::SEQUENCE {
        let bundle: ResultBundle =
            serde_json::from_str(&fs::read_to_string(dir.path().join(id.name()).join("bundle.json")).unwrap()).unwrap();
        assert_eq!(bundle.experiment, id.name());
        assert_eq!(bundle.config_hash, hash);
        assert!(!bundle.csv_paths.is_empty());
        assert!(res.bundle.timings_s.contains_key(id.name()));
    }
    for rel in &res.bundle.csv_paths {
        let p = dir.path().join(rel);
        let h = header(&p);
        if rel.contains("beam_") {
            assert_eq!(h, BEAM_HEADER.join(","));
        } else {
            assert_eq!(h, RESULT_HEADER.join(","));
            let rows = read_rows(&p).unwrap();
            assert!(!rows.is_empty(), "{rel}");
            assert!(rows.iter().all(|r| r.value.is_finite()), "{rel}");
        }
        let body = fs::read_to_string(&p).unwrap();
        assert!(body.lines().skip(1).all(|l| l.ends_with(&hash)), "{rel}");
    }
    assert_eq!(res.beams.len(), 2);
    assert_eq!(res.beams[0].1.gains_db.len(), 31);
    assert_eq!(res.beams[0].1.gains_db[0].len(), 61);
    assert!(dir.path().join("bundle.json").exists());
}

#[test]
fn fig7_retrains_per_antenna_count_and_caches() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(small_config(dir.path())).unwrap();
    let res = runner.run_fig7().unwrap();
    for n_t in [16, 32] {
        for s in ["optimal", "zf", "omp", "dnn"] {
            assert_eq!(res.rows.iter().filter(|r| r.n_t == n_t && r.scheme == s).count(), 1);
        }
    }
    let first = runner.trained_model(32, 4).unwrap();
    assert!(first.from_cache);
    let again = runner.trained_model(32, 4).unwrap();
    assert_eq!(first.model.dense, again.model.dense);
    assert_ne!(runner.trained_model(16, 4).unwrap().key, first.key);
    let ckpts = fs::read_dir(dir.path().join("models")).unwrap().count();
    // checkpoint, history and sidecar per network
    assert_eq!(ckpts, 6);
}

#[test]
fn optimal_bounds_every_scheme_in_eval() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(small_config(dir.path())).unwrap();
    let res = runner.run_eval().unwrap();
    for snr in &runner.cfg.fig6.snr_db {
        let at = |s: &str| {
            res.rows
                .iter()
                .find(|r| r.scheme == s && r.snr_db == Some(*snr))
                .unwrap()
                .value
        };
        let opt = at("optimal");
        for s in ["omp", "zf", "dnn", "subconnected"] {
            assert!(at(s) <= opt + 1e-9, "{s} at {snr} dB exceeds optimal");
        }
    }
}

#[test]
fn fig8_closed_form_tracks_instrumented_counts() {
    let dir = tempfile::tempdir().unwrap();
    let res = Runner::new(small_config(dir.path())).unwrap().run_fig8().unwrap();
    for r in res.rows.iter().filter(|r| r.units == "complex_mults_closed_form") {
        let m = res
            .rows
            .iter()
            .find(|m| m.units == "complex_mults_measured" && m.scheme == r.scheme && m.n_t == r.n_t)
            .unwrap();
        assert_eq!(r.value, m.value, "{} at {}", r.scheme, r.n_t);
        assert_eq!(r.n_s, 4);
    }
}

#[test]
fn fig12_uses_common_random_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let res = Runner::new(small_config(dir.path())).unwrap().run_fig12().unwrap();
    for s in ["zf", "omp", "dnn"] {
        let v: Vec<f64> = res.values(s, "ber").iter().map(|r| r.value).collect();
        assert_eq!(v.len(), 3);
        assert!(v.windows(2).all(|p| p[1] <= p[0]), "{s}: {v:?}");
    }
}

#[test]
fn generated_channels_round_trip_through_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let runner = Runner::new(small_config(dir.path())).unwrap();
    let path = runner.gen_channels().unwrap();
    let stored = tensor_io::read_tensor(&path).unwrap();
    let fresh = runner.eval_channels(16, 8).unwrap();
    assert_eq!(stored.len(), 8);
    for (a, b) in stored.iter().zip(&fresh) {
        assert_eq!(a, &b.h);
    }
    let sidecar = fs::read_to_string(tensor_io::sidecar_path(&path)).unwrap();
    assert!(sidecar.contains(&runner.config_hash()));
}

#[test]
fn seed_changes_results_but_out_dir_does_not() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Runner::new(small_config(a.path())).unwrap();
    let rb = Runner::new(small_config(b.path())).unwrap();
    assert_eq!(ra.config_hash(), rb.config_hash());
    let fa = fs::read(a.path().join(&ra.run_fig9().unwrap().bundle.csv_paths[0])).unwrap();
    let fb = fs::read(b.path().join(&rb.run_fig9().unwrap().bundle.csv_paths[0])).unwrap();
    assert_eq!(fa, fb);
    let mut cfg = small_config(b.path());
    cfg.seed = 2;
    let rc = Runner::new(cfg).unwrap();
    assert_ne!(rc.config_hash(), ra.config_hash());
    let fc = fs::read(b.path().join(&rc.run_fig9().unwrap().bundle.csv_paths[0])).unwrap();
    assert_ne!(fa, fc);
}

#[test]
fn shipped_default_config_matches_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = hbf_core::harness::load_config(&path).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}
