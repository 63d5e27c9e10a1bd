use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tilesr_core::prompts::PromptManifest;

const BIN: &str = env!("CARGO_BIN_EXE_tilesr");

fn tilesr(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .env_remove("TILESR_SEED")
        .env_remove("TILESR_BACKEND_ENDPOINT")
        .env_remove("TILESR_EXTRACTOR_ENDPOINT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const IMAGE_256: &str = r#"
[input]
synthetic = [1, 256, 256]
[plan]
tile = [1, 64, 64]
overlap = [0, 16, 16]
[schedule]
steps = 3
"#;

const SMALL: &str = r#"seed = 5
[input]
synthetic = [1, 24, 24]
[plan]
tile = [1, 16, 16]
overlap = [0, 8, 8]
[schedule]
steps = 4
"#;

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(tilesr(&[], &[]).status.code(), Some(1));
    assert_eq!(tilesr(&["frobnicate"], &[]).status.code(), Some(1));
    assert_eq!(tilesr(&["plan"], &[]).status.code(), Some(1));
    assert_eq!(tilesr(&["--help"], &[]).status.code(), Some(0));
    assert_eq!(tilesr(&["--version"], &[]).status.code(), Some(0));
}

#[test]
fn plan_lists_25_regions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), IMAGE_256);
    let o = tilesr(&["plan", "-c", &cfg, "--format", "json"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let plan: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["regions"].as_array().unwrap().len(), 25);

    let o = tilesr(&["plan", "-c", &cfg], &[]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("25 tiles"), "{text}");
    assert!(text.contains("origin=(0,192,192)"));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_overlap = IMAGE_256.replace("overlap = [0, 16, 16]", "overlap = [0, 64, 16]");
    let o = tilesr(&["plan", "-c", &config(dir.path(), &bad_overlap)], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("overlap"), "{}", stderr(&o));

    let o = tilesr(&["plan", "-c", &config(dir.path(), "[plan]\ntiles = 3\n")], &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = tilesr(&["plan", "-c", "/nonexistent/run.toml"], &[]);
    assert_eq!(o.status.code(), Some(2));

    let o = tilesr(&["plan", "-c", &config(dir.path(), IMAGE_256)], &[("TILESR_SEED", "abc")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn manifest_missing_a_tile_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let manifest = dir.path().join("m.json");
    let o = tilesr(&["extract-prompts", "-c", &cfg, "--out", manifest.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let mut m = PromptManifest::read(&manifest).unwrap();
    assert_eq!(m.records.len(), 4);
    m.records.retain(|r| r.tile_index != 3);
    m.write(&manifest).unwrap();
    let out = dir.path().join("out.lvol");
    let o = tilesr(
        &["run", "-c", &cfg, "--prompts", manifest.to_str().unwrap(), "--output", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains('3'), "{}", stderr(&o));
    assert!(!out.exists(), "no output on failure");
}

#[test]
fn global_mode_needs_only_the_global_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let manifest = dir.path().join("m.json");
    let o = tilesr(
        &["extract-prompts", "-c", &cfg, "--mode", "global", "--out", manifest.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("o.lvol");
    let run = |mode: &str| {
        tilesr(
            &["run", "-c", &cfg, "--mode", mode, "--prompts", manifest.to_str().unwrap(), "--output", out.to_str().unwrap()],
            &[],
        )
    };
    assert!(run("global").status.success());
    assert_eq!(run("local").status.code(), Some(2));
}

#[test]
fn unreachable_services_map_to_their_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let vlm = format!(
        "{SMALL}[extractor]\nkind = \"vlm\"\n[extractor.vlm]\ntimeout_secs = 2.0\nretry = {{ max_attempts = 1 }}\n"
    );
    let cfg = config(dir.path(), &vlm);
    let o = tilesr(
        &["extract-prompts", "-c", &cfg, "--out", "unused.json"],
        &[("TILESR_EXTRACTOR_ENDPOINT", "http://127.0.0.1:9/v1/chat/completions")],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let remote = format!("{SMALL}[backend]\nkind = \"remote\"\ntimeout_secs = 2.0\nretry = {{ max_attempts = 1 }}\n");
    let cfg = config(dir.path(), &remote);
    let out = dir.path().join("o.lvol");
    let o = tilesr(
        &["run", "-c", &cfg, "--output", out.to_str().unwrap()],
        &[("TILESR_BACKEND_ENDPOINT", "http://127.0.0.1:9")],
    );
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    // The same config without an endpoint is a configuration error.
    let o = tilesr(&["run", "-c", &cfg, "--output", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn writes_png_images_and_frame_directories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{SMALL}[backend]\nlatent_channels = 3\nscale = 2\n"));
    let png = dir.path().join("out.png");
    let report = dir.path().join("report.json");
    let o = tilesr(
        &["run", "-c", &cfg, "--output", png.to_str().unwrap(), "--report", report.to_str().unwrap()],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let (vol, _) = tilesr_core::media::load_media(&png).unwrap();
    assert_eq!(vol.extent().as_array(), [1, 48, 48]);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["tile_count"], 4);
    assert_eq!(r["steps"], 4);
    assert_eq!(r["per_tile"].as_array().unwrap().len(), 4);

    let video = SMALL.replace("[1, 24, 24]", "[3, 24, 24]").replace("tile = [1, 16, 16]", "tile = [3, 16, 16]");
    let cfg = config(dir.path(), &format!("{video}[backend]\nlatent_channels = 3\n"));
    let frames = dir.path().join("frames");
    let o = tilesr(&["run", "-c", &cfg, "--output", frames.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let names: Vec<String> = {
        let mut v: Vec<_> = std::fs::read_dir(&frames)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    assert_eq!(names, ["frame_00000.png", "frame_00001.png", "frame_00002.png"]);
}

#[test]
fn seed_override_changes_the_result() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let checksum = |envs: &[(&str, &str)], extra: &[&str]| {
        let out = dir.path().join("o.lvol");
        let mut args = vec!["run", "-c", cfg.as_str(), "--output", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = tilesr(&args, envs);
        assert!(o.status.success(), "{}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines().find(|l| l.starts_with("output_checksum")).unwrap().to_string()
    };
    let base = checksum(&[], &[]);
    assert_eq!(base, checksum(&[], &["--seed", "5"]));
    assert_ne!(base, checksum(&[("TILESR_SEED", "6")], &[]));
    assert_eq!(checksum(&[("TILESR_SEED", "6")], &[]), checksum(&[], &["--seed", "6"]));
}

#[test]
fn diagnose_and_bench_run_on_the_toy_backend() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), SMALL);
    let o = tilesr(&["diagnose", "-c", &cfg, "--seams", "--steps", "4,1"], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "tile_index,timestep,delta_norm,guidance_norm,reference_condition");
    assert_eq!(lines.len(), 1 + 8 + 1);
    let seams: Value = serde_json::from_str(lines[9]).unwrap();
    assert!(seams["seam_cells"].as_u64().unwrap() > 0);

    let o = tilesr(&["bench", "-c", &cfg], &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().contains("+ Tiled Prompts (4)"));
}
