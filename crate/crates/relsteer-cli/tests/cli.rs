//! End-to-end tests of the `relsteer` binary: exit codes, output
//! layout, record counts, and byte-identical reruns from resolved
//! configs.

use std::path::Path;
use std::process::{Command, Output};

use relsteer::classifier::{init_params, ArchConfig, Checkpoint};
use relsteer::dataset::Dataset;
use relsteer::synth::{derive_seed, Latent};

fn relsteer_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relsteer"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning relsteer");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn reduced_checkpoint(dir: &Path, seed: u64) -> std::path::PathBuf {
    let arch = ArchConfig::reduced();
    let ckpt = Checkpoint {
        arch,
        params: init_params::<f32>(&arch, seed).unwrap(),
    };
    let path = dir.join("ckpt.bin");
    ckpt.save(&path).unwrap();
    path
}

#[test]
fn gen_data_record_count_and_resolved_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.bin");
    run_ok(relsteer_bin().args([
        "gen-data",
        "--scenes",
        "10",
        "--timesteps",
        "25,49",
        "--dual",
        "--shape",
        "reduced",
        "--seed",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));

    // 2 records per (scene, timestep) under dual inversion, plus one
    // neutral record per timestep for the 10% neutral quota (1 scene).
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.records.len(), 2 * 10 * 2 + 1 * 2);
    assert!(ds.dual);

    // Re-running from the resolved config alone reproduces the bytes.
    let first = std::fs::read(&out).unwrap();
    let cfg = out.with_extension("bin.cfg");
    assert!(cfg.is_file());
    std::fs::remove_file(&out).unwrap();
    run_ok(relsteer_bin().args(["gen-data", "--config", cfg.to_str().unwrap()]));
    assert_eq!(std::fs::read(&out).unwrap(), first);
}

#[test]
fn steer_alpha_zero_leaves_latent_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(dir.path(), 7);
    let out = dir.path().join("run");
    run_ok(relsteer_bin().args([
        "steer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prompt",
        "a dog to the right of a teddy bear",
        "--seed",
        "5",
        "--alpha",
        "0",
        "--iters",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]));

    let final_csv = std::fs::read_to_string(out.join("final.csv")).unwrap();
    let mut lines = final_csv.lines();
    assert_eq!(lines.next().unwrap(), "name,cx,cy,extent_x,extent_y");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "dog");
    assert_eq!(rows[1][0], "teddy bear");

    // α = 0 must leave the seeded initial latent untouched.
    let expected = Latent::random(2, derive_seed(5, &[11])).decoded_centers();
    for (row, (cx, cy)) in rows.iter().zip(expected) {
        assert_eq!(row[1].parse::<f64>().unwrap(), cx);
        assert_eq!(row[2].parse::<f64>().unwrap(), cy);
    }
    assert!(out.join("trace.csv").is_file());
    assert!(out.join("resolved.cfg").is_file());
}

#[test]
fn steer_rerun_from_resolved_config_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(dir.path(), 11);
    let run_a = dir.path().join("runs").join("a");
    run_ok(relsteer_bin().args([
        "steer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--prompt",
        "a mug above a frog",
        "--seed",
        "9",
        "--alpha",
        "0.5",
        "--iters",
        "2",
        "--out",
        run_a.to_str().unwrap(),
    ]));
    let run_b = dir.path().join("runs").join("b");
    run_ok(relsteer_bin().args([
        "steer",
        "--config",
        run_a.join("resolved.cfg").to_str().unwrap(),
        "--out",
        run_b.to_str().unwrap(),
    ]));
    for name in ["trace.csv", "final.csv"] {
        assert_eq!(
            std::fs::read(run_a.join(name)).unwrap(),
            std::fs::read(run_b.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }

    // Those outputs then feed eval with both detectors.
    let report = dir.path().join("report.csv");
    run_ok(relsteer_bin().args([
        "eval",
        "--runs",
        dir.path().join("runs").to_str().unwrap(),
        "--metric",
        "geneval",
        "--detector",
        "oracle",
        "--shape",
        "reduced",
        "--out",
        report.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("metric,n_objects,n_relations,passed,total,accuracy,extrapolated"));
    assert!(text.contains("geneval_position,2,1,"));

    let report2 = dir.path().join("report_attn.csv");
    run_ok(relsteer_bin().args([
        "eval",
        "--runs",
        dir.path().join("runs").to_str().unwrap(),
        "--metric",
        "t2i",
        "--detector",
        "attn",
        "--shape",
        "reduced",
        "--out",
        report2.to_str().unwrap(),
    ]));
    assert!(std::fs::read_to_string(&report2)
        .unwrap()
        .contains("t2i_spatial,2,1,"));
}

#[test]
fn probe_leakage_reports_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = reduced_checkpoint(dir.path(), 13);
    let probe = dir.path().join("probe.bin");
    run_ok(relsteer_bin().args([
        "gen-data",
        "--scenes",
        "4",
        "--timesteps",
        "49",
        "--negatives-only",
        "--shape",
        "reduced",
        "--seed",
        "21",
        "--out",
        probe.to_str().unwrap(),
    ]));
    let report = dir.path().join("leakage.csv");
    run_ok(relsteer_bin().args([
        "probe-leakage",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--probe-data",
        probe.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("metric,value\n"));
    let get = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    let sum = get("frac_prompt") + get("frac_label") + get("frac_other");
    assert!((sum - 1.0).abs() < 1e-12);
    assert_eq!(get("total"), 4.0);
    assert!(text.contains("conf_above_above,"));
}

#[test]
fn invalid_settings_exit_nonzero_without_outputs() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key.
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[train]\nlearning-rate = 0.1\n").unwrap();
    let out = relsteer_bin()
        .args(["train", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning-rate"));

    // Missing required setting.
    let out = relsteer_bin().args(["gen-data", "--scenes", "3"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out"));

    // Prompt without any relation: no partial outputs left behind.
    let ckpt = reduced_checkpoint(dir.path(), 3);
    let run = dir.path().join("run");
    let out = relsteer_bin()
        .args([
            "steer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--prompt",
            "a dog and a mug",
            "--out",
            run.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(!run.join("final.csv").exists());
}
