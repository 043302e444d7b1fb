use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ovu(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovu"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env_remove("OVU_SEED")
        .output()
        .expect("spawn ovu")
}

fn stderr_line(o: &Output) -> String {
    let s = String::from_utf8_lossy(&o.stderr).to_string();
    let lines: Vec<&str> = s.lines().collect();
    assert_eq!(lines.len(), 1, "stderr should be one line: {s}");
    lines[0].to_string()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).to_string()
}

#[test]
fn training_out_of_order_is_a_lineage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovu(dir.path(), &["train", "--stage", "2"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[lineage]:"));
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn unknown_config_keys_fail_with_configuration_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"global_mod": "averaged"}"#).unwrap();
    let o = ovu(dir.path(), &["--config", cfg.to_str().unwrap(), "inspect"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).starts_with("error[configuration]:"));
}

#[test]
fn bad_usage_is_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = ovu(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_line(&o).starts_with("error[usage]:"));
}

#[test]
fn inspect_lists_modules_in_reference_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ovu(dir.path(), &["inspect", "--preset", "paper-scale"]));
    let names: Vec<&str> = out.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(names, vec!["llm", "decoder", "encoder", "adapter", "vae", "refiner", "total"]);
}

#[test]
fn calibration_systems_score_at_their_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&ovu(dir.path(), &["eval", "--suite", "geneval-toy", "--system", "oracle", "--n", "5"]));
    assert!(out.lines().last().unwrap().ends_with("1.000"), "{out}");
    let csv = fs::read_to_string(dir.path().join("geneval_toy.csv")).unwrap();
    assert!(csv.starts_with("category,n,score\n"));
    let out = stdout(&ovu(dir.path(), &["eval", "--suite", "edit-toy", "--system", "identity", "--n", "5"]));
    let recolor = out.lines().find(|l| l.starts_with("recolor")).unwrap();
    let cols: Vec<&str> = recolor.split_whitespace().collect();
    assert_eq!(&cols[1..3], &["0.000", "1.000"]);
}

#[test]
fn chain_generate_edit_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    stdout(&ovu(d, &["pretrain-vae", "--steps", "2"]));
    assert!(d.join("vae.ovu").exists());
    assert!(fs::read_to_string(d.join("vae_loss.csv")).unwrap().starts_with("step,task,loss\n"));

    let o = ovu(d, &["train", "--stage", "1"]);
    assert!(stderr_line(&o).starts_with("error[lineage]:"));

    fs::write(d.join(".lock"), "1\n").unwrap();
    let o = ovu(d, &["train", "--stage", "0", "--steps", "2"]);
    assert!(stderr_line(&o).starts_with("error[lock]:"));
    fs::remove_file(d.join(".lock")).unwrap();

    stdout(&ovu(d, &["train", "--stage", "0", "--steps", "2"]));
    let loss = fs::read_to_string(d.join("stage0_loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert!(loss.lines().skip(1).all(|l| l.contains(",t2i,")));

    let ckpt = d.join("stage0.ovu");
    let ck = ckpt.to_str().unwrap();
    let out = stdout(&ovu(d, &["inspect", "--checkpoint", ck]));
    assert!(out.contains("lineage: [\"vae_pretrain\",{\"stage\":0}]"), "{out}");

    stdout(&ovu(d, &["generate", "--checkpoint", ck, "--prompt", "a red circle", "--steps", "2"]));
    let img = d.join("generate/gen_000.ppm");
    assert!(fs::read(&img).unwrap().starts_with(b"P6\n64 64\n255\n"));

    let out = stdout(&ovu(d, &["edit", "--checkpoint", ck, "--image", img.to_str().unwrap(), "--instruction", "remove the red circle", "--steps", "1"]));
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "cfg_img,cfg_txt,image,source_mse");
    let grid: Vec<String> = rows[1..].iter().map(|r| r.split(',').take(2).collect::<Vec<_>>().join(",")).collect();
    assert_eq!(grid, vec!["1.5,7.5", "2,7.5", "4,7.5", "6,7.5", "4,5", "4,10"]);

    let odd = d.join("odd.ppm");
    let mut ppm = b"P6\n40 24\n255\n".to_vec();
    ppm.extend(std::iter::repeat(200u8).take(40 * 24 * 3));
    fs::write(&odd, ppm).unwrap();
    let out = stdout(&ovu(d, &["edit", "--checkpoint", ck, "--image", odd.to_str().unwrap(), "--instruction", "add a red dot", "--steps", "1", "--cfg-img", "2", "--cfg-txt", "4"]));
    assert_eq!(out.lines().count(), 2);

    let manifest = fs::read_to_string(d.join("manifest.jsonl")).unwrap();
    let cmds: Vec<String> = manifest
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["command"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(cmds, vec!["pretrain-vae", "train --stage 0"]);
}

#[test]
fn seed_env_override_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ovu"))
        .args(["--run-dir", dir.path().to_str().unwrap(), "eval", "--suite", "geneval-toy", "--system", "noise", "--n", "2"])
        .env("OVU_SEED", "77")
        .output()
        .unwrap();
    stdout(&o);
    let m: serde_json::Value =
        serde_json::from_str(fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap().lines().next().unwrap())
            .unwrap();
    assert_eq!(m["seed"], 77);
    assert_eq!(m["config"]["seed"], 77);
}
