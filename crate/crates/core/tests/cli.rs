use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kjoint::trajectory::Trajectory;

fn kjoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kjoint")).args(args).env("KJOINT_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kjoint(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small 16×16 experiment that trains in a few seconds.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "schema_version": 1,
        "grid_n": 16,
        "trajectory": {"kind": "radial", "shots": 4, "samples": 32},
        "data": {"count": 8, "seed": 11},
        "acquisition": {"coils": 2, "noise_ratio": 0.01},
        "unrolled": {"n_blocks": 2, "cg_iters": 4, "init_cg_iters": 4},
        "train": {"n_levels": 1, "decim_schedule": [8], "epochs_per_level": 1, "pretrain_epochs": 1, "batch_size": 2, "seed": 2},
        "cs": {"iters": 10}
    });
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn gen_traj_writes_loadable_radial() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.ktrj");
    let stdout = ok(&["gen-traj", "--kind", "radial", "--shots", "8", "--samples", "64", "--grid-n", "32", "--out", s(&out)]);
    assert!(stdout.contains("feasible"));
    let t = Trajectory::load(&out).unwrap();
    assert_eq!((t.nshots, t.samples_per_shot, t.grid_n), (8, 64, 32));
    assert_eq!(&std::fs::read(&out).unwrap()[..5], b"KTRJ1");
}

#[test]
fn infeasible_spiral_exits_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s.ktrj");
    let args = ["gen-traj", "--kind", "spiral", "--shots", "4", "--samples", "64", "--grid-n", "64", "--turns", "40", "--out", s(&out)];
    let res = kjoint(&args);
    assert_eq!(res.status.code(), Some(3));
    assert!(!out.exists());
    let mut forced = args.to_vec();
    forced.push("--allow-infeasible");
    ok(&forced);
    assert!(out.exists());
}

#[test]
fn waveform_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("r.ktrj");
    let csv = dir.path().join("w.csv");
    ok(&["gen-traj", "--kind", "radial", "--shots", "2", "--samples", "64", "--grid-n", "32", "--out", s(&t)]);
    ok(&["export-waveform", "--traj", s(&t), "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("shot,n,g_x,g_y,s_x,s_y"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 6));
}

#[test]
fn psf_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("r.ktrj");
    ok(&["gen-traj", "--kind", "radial", "--shots", "16", "--samples", "32", "--grid-n", "32", "--out", s(&t)]);
    let out = dir.path().join("psf");
    ok(&["psf", "--traj", s(&t), "--dcf", "ramp", "--out-dir", s(&out)]);
    let csv = std::fs::read_to_string(out.join("psf_profiles.csv")).unwrap();
    assert_eq!(csv.lines().count(), 37);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("psf_report.json")).unwrap()).unwrap();
    assert!(v["fwhm_pixels"].as_f64().unwrap() > 0.0);
    assert!(v["hermitian_overlap"].as_f64().unwrap() > 0.5);
    assert_eq!(std::fs::metadata(out.join("psf.f32")).unwrap().len(), 32 * 32 * 8);
    let side: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("psf.json")).unwrap()).unwrap();
    assert_eq!(side["shape"], serde_json::json!([32, 32]));
}

#[test]
fn optimize_reconstruct_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["optimize", "--config", s(&cfg), "--out-dir", s(&run)]);
    for f in ["init.ktrj", "config.json", "checkpoint.bin", "trajectory.ktrj", "theta.json", "metrics.jsonl", "report.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ck = std::fs::read(run.join("checkpoint.bin")).unwrap();
    assert_eq!(&ck[..4], b"KJCK");
    assert_eq!(u32::from_le_bytes(ck[4..8].try_into().unwrap()), 1);
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ["step", "level", "epoch", "recon_loss", "g_penalty", "s_penalty", "lr_omega", "lr_theta"] {
            assert!(keys.contains(&k), "{k} missing in {line}");
        }
    }

    let traj = run.join("trajectory.ktrj");
    let theta = run.join("theta.json");
    let rec = dir.path().join("rec");
    ok(&["reconstruct", "--method", "unn", "--traj", s(&traj), "--config", s(&cfg), "--theta", s(&theta), "--out-dir", s(&rec)]);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(rec.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["method"], "unn");
    assert!(m["ssim"].as_f64().unwrap() > 0.0 && m["psnr"].as_f64().unwrap() > 0.0);
    assert!(rec.join("recon.png").exists() && rec.join("recon.json").exists());

    let table = ok(&[
        "eval", "--config", s(&cfg), "--traj", s(&run.join("init.ktrj")), "--traj", s(&traj), "--theta", s(&theta), "--theta", s(&theta), "--methods", "unn,init",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].contains("unn SSIM") && lines[0].contains("init PSNR"));
    assert!(lines[1].starts_with("init") && lines[2].starts_with("trajectory"));
    assert_eq!(lines[1].matches('±').count(), 4);
}

#[test]
fn resume_rejects_a_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["optimize", "--config", s(&cfg), "--out-dir", s(&run), "--max-steps", "2"]);
    let ck = run.join("checkpoint.bin");
    let res = kjoint(&["optimize", "--config", s(&cfg), "--out-dir", s(&run), "--resume", s(&ck), "--seed", "3"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"grid_n": 16, "no_such_key": 1}"#).unwrap();
    let res = kjoint(&["optimize", "--config", s(&bad)]);
    assert_eq!(res.status.code(), Some(2));
    let res = kjoint(&["reconstruct", "--traj", "/nonexistent.ktrj", "--out-dir", s(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
    let res = Command::new(env!("CARGO_BIN_EXE_kjoint"))
        .args(["psf", "--traj", "x", "--out-dir", "y"])
        .env("KJOINT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}
