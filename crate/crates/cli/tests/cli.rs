use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn insure(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insure"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), format!("insure-config v1\n{body}")).unwrap();
}

#[test]
fn gen_data_writes_header_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for name in ["a.txt", "b.txt"] {
        let o = insure(&["gen-data", "--out", name, "--seed", "7"], p);
        assert_eq!(code(&o), 0, "{o:?}");
        assert!(stdout(&o).contains("region III"));
    }
    let a = fs::read_to_string(p.join("a.txt")).unwrap();
    assert!(a.starts_with("INSURE-SYNTH v1\n"));
    assert_eq!(a, fs::read_to_string(p.join("b.txt")).unwrap());
    insure(&["gen-data", "--out", "c.txt", "--seed", "8"], p);
    assert_ne!(a, fs::read_to_string(p.join("c.txt")).unwrap());
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&insure(&["gen-data"], p)), 2);
    write_config(p, "bad.cfg", "no_such_key = 1\n");
    let o = insure(&["gen-data", "--config", "bad.cfg", "--out", "x.txt"], p);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    assert_eq!(code(&insure(&["gen-data", "--config", "missing.cfg", "--out", "x.txt"], p)), 2);
    assert_eq!(code(&insure(&["eval", "--checkpoint", "missing", "--data", "missing"], p)), 2);
}

#[test]
fn train_smoke_writes_three_files_and_eval_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "smoke.cfg", "steps = 200\nsma_start = 20\nn_per_domain = 100\n");
    assert_eq!(code(&insure(&["gen-data", "--config", "smoke.cfg", "--out", "d.txt"], p)), 0);
    let o = insure(
        &["train", "--config", "smoke.cfg", "--data", "d.txt", "--holdout-domain", "1", "--out-dir", "run"],
        p,
    );
    assert_eq!(code(&o), 0, "{o:?}");
    let mut files: Vec<String> = fs::read_dir(p.join("run"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    files.sort();
    assert_eq!(files, ["checkpoint.txt", "manifest.json", "metrics.csv"]);

    let metrics = fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next().unwrap(),
        "step,ce_label,ce_domain,ib,dis,it_l,it_d,puri,msr,total,alpha,beta,gamma,mask_on"
    );
    assert_eq!(metrics.lines().count(), 201);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["args"]["holdout_domain"], "1");
    assert!(manifest["config"].as_str().unwrap().contains("steps = 200"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let hard = insure(&["eval", "--checkpoint", "run/checkpoint.txt", "--data", "d.txt"], p);
    assert_eq!(code(&hard), 0, "{hard:?}");
    let out = stdout(&hard);
    assert!(out.contains("accuracy (domain 1, hard mask)"), "{out}");
    assert!(out.contains("mask recovery"), "{out}");
}

#[test]
fn train_rerun_from_manifest_config_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "c.cfg", "steps = 150\nsma_start = 10\nn_per_domain = 100\n");
    insure(&["gen-data", "--config", "c.cfg", "--out", "d.txt"], p);
    assert_eq!(code(&insure(&["train", "--config", "c.cfg", "--data", "d.txt", "--out-dir", "a"], p)), 0);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("a/manifest.json")).unwrap()).unwrap();
    fs::write(p.join("resolved.cfg"), manifest["config"].as_str().unwrap()).unwrap();
    assert_eq!(code(&insure(&["train", "--config", "resolved.cfg", "--data", "d.txt", "--out-dir", "b"], p)), 0);
    for f in ["checkpoint.txt", "metrics.csv"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn holdout_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "c.cfg", "steps = 120\nn_per_domain = 40\n");
    insure(&["gen-data", "--config", "c.cfg", "--out", "d.txt"], p);
    let o = insure(&["train", "--config", "c.cfg", "--data", "d.txt", "--holdout-domain", "4", "--out-dir", "r"], p);
    assert_eq!(code(&o), 2);
}

#[test]
fn single_dg_on_one_domain() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "one.cfg", "n_domains = 1\nsteps = 120\nn_per_domain = 200\n");
    insure(&["gen-data", "--config", "one.cfg", "--out", "d.txt"], p);
    let multi = insure(&["train", "--config", "one.cfg", "--data", "d.txt", "--out-dir", "m"], p);
    assert_eq!(code(&multi), 2, "{multi:?}");
    let single = insure(
        &["train", "--config", "one.cfg", "--data", "d.txt", "--mode", "single-dg", "--out-dir", "s"],
        p,
    );
    assert_eq!(code(&single), 0, "{single:?}");
}

#[test]
fn soft_and_hard_eval_agree_on_saturated_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(
        p,
        "sat.cfg",
        "gamma = 0.03\nlr_mask = 0.02\nseed = 2\n",
    );
    insure(&["gen-data", "--config", "sat.cfg", "--out", "d.txt"], p);
    let o = insure(&["train", "--config", "sat.cfg", "--data", "d.txt", "--holdout-domain", "0", "--out-dir", "r"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    let ckpt = fs::read_to_string(p.join("r/checkpoint.txt")).unwrap();
    let mask_line = ckpt.lines().find(|l| l.starts_with("mask_logits ")).unwrap();
    let logits: Vec<f64> = mask_line.split(' ').nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(logits.iter().all(|m| m.abs() > 4.0), "mask not saturated: {logits:?}");
    assert!(logits.iter().any(|&m| m < 0.0), "mask is all off");
    let acc = |mode: &str| {
        let o = insure(
            &["eval", "--checkpoint", "r/checkpoint.txt", "--data", "d.txt", "--raw", "--mask-mode", mode],
            p,
        );
        assert_eq!(code(&o), 0, "{o:?}");
        let out = stdout(&o);
        let line = out.lines().find(|l| l.starts_with("accuracy")).unwrap().to_string();
        line.rsplit(' ').next().unwrap().to_string()
    };
    let hard = acc("hard");
    assert_eq!(hard, acc("soft"));
    assert!(hard.parse::<f64>().unwrap() > 0.5, "{hard}");
}

#[test]
fn ablate_writes_eight_variant_rows() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "tiny.cfg", "steps = 120\nsma_start = 10\nn_per_domain = 40\nseeds = 0\nn_domains = 3\n");
    insure(&["gen-data", "--config", "tiny.cfg", "--out", "d.txt"], p);
    let o = insure(&["ablate", "--config", "tiny.cfg", "--data", "d.txt", "--out-dir", "ab", "--jobs", "2"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    let csv = fs::read_to_string(p.join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,holdout_0,holdout_1,holdout_2,mean,std");
    assert_eq!(lines.len(), 9);
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["Baseline", "+msr", "+IT", "+Puri", "+msr+IT", "+msr+Puri", "+IT+Puri", "Full"]);
    assert_eq!(fs::read_to_string(p.join("ab/runs.csv")).unwrap().lines().count(), 1 + 8 * 3);
    assert!(p.join("ab/seed_stats.csv").exists() && p.join("ab/manifest.json").exists());
}

#[test]
fn region3_two_rows_and_refuses_without_region_iii() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_config(p, "r.cfg", "steps = 120\nsma_start = 10\nn_per_domain = 40\nseeds = 0\nn_domains = 3\n");
    insure(&["gen-data", "--config", "r.cfg", "--out", "d.txt"], p);
    let o = insure(&["region3", "--config", "r.cfg", "--data", "d.txt", "--out-dir", "r3"], p);
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(fs::read_to_string(p.join("r3/region3.csv")).unwrap().lines().count(), 3);

    write_config(p, "no3.cfg", "steps = 120\nn_per_domain = 40\nseeds = 0\nn_domains = 3\nk_iii = 0\n");
    insure(&["gen-data", "--config", "no3.cfg", "--out", "e.txt"], p);
    let o = insure(&["region3", "--config", "no3.cfg", "--data", "e.txt", "--out-dir", "r4"], p);
    assert_eq!(code(&o), 2, "{o:?}");
}

#[test]
fn gradcheck_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = insure(&["gradcheck"], dir.path());
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("gradcheck passed"));
}

#[test]
fn gradcheck_impossible_tolerance_exits_1_naming_the_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let o = insure(&["gradcheck", "--tol", "1e-15"], dir.path());
    assert_eq!(code(&o), 1, "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("coordinate"));
}
