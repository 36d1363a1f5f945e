use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use failgen_core::io::{read_jsonl_file, write_jsonl_file, EpisodeRecord, FileHeader};
use failgen_core::metrics::{distance, embed};
use failgen_core::mc::replay;
use failgen_core::sim::WorldConfig;
use sha2::{Digest, Sha256};

const BOOSTED: &str = "[world]\ngamma = 166.66666666666669\n";

const TOY: &str = r#"
[world]
gamma = 166.66666666666669

[diffusion]
steps = 20
beta_end = 0.3

[diffusion.net]
widths = [8, 8]
time_embed_dim = 8
embed_dim = 16
groups = 2

[trainer]
batch_size = 32
max_stages = 3
epochs_per_stage = 2
train_batch_size = 16
"#;

fn failgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_failgen")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = failgen(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().into()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Boosted North Monte Carlo file with a few hundred failures.
fn mc_file(dir: &Path) -> (String, PathBuf) {
    let cfg = write(dir, "boosted.toml", BOOSTED);
    let out = dir.join("mc.jsonl");
    ok(&["mc", "--scenario", "north", "--episodes", "4000", "--seed", "3", "--config", &cfg, "--out", s(&out)]);
    (cfg, out)
}

#[test]
fn mc_summary_counts_episodes() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("mc.jsonl");
    let v = ok(&["mc", "--scenario", "south", "--episodes", "1000", "--seed", "7", "--out", s(&out)]);
    assert_eq!(v["episodes"], 1000);
    let (_, recs) = read_jsonl_file::<EpisodeRecord>(&out).unwrap();
    assert_eq!(v["failures"], recs.len());
}

#[test]
fn usage_errors_exit_2() {
    let out = failgen(&["mc", "--episodes", "10", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(failgen(&["mc", "--scenario", "up", "--episodes", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(failgen(&["sample", "--scenario", "south", "--count", "1", "--out", "x"]).status.code(), Some(2));
    assert_eq!(failgen(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1() {
    let d = tempfile::tempdir().unwrap();
    let bad = write(d.path(), "bad.toml", "[world]\nno_such_key = 1\n");
    let out = failgen(&["mc", "--scenario", "south", "--episodes", "1", "--config", &bad, "--out", s(&d.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let missing = failgen(&["replay", "--input", s(&d.path().join("missing.jsonl"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn mc_is_deterministic_across_worker_counts() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "boosted.toml", BOOSTED);
    let (a, b) = (d.path().join("a.jsonl"), d.path().join("b.jsonl"));
    ok(&["mc", "--scenario", "west", "--episodes", "1500", "--seed", "1", "--config", &cfg, "--out", s(&a), "--workers", "1"]);
    ok(&["mc", "--scenario", "west", "--episodes", "1500", "--seed", "1", "--config", &cfg, "--out", s(&b), "--workers", "3", "--checkpoint-interval", "500"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn train_sample_and_resume() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "toy.toml", TOY);
    let run = d.path().join("run");
    let out = failgen(&["train", "diffusion", "--scenario", "north", "--config", &cfg, "--out-dir", s(&run), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let report = lines.last().unwrap();
    let stages = report["stages"].as_array().unwrap();
    // one streamed line per stage, then the report
    assert_eq!(lines.len(), stages.len() + 1);
    let (_, persisted) = read_jsonl_file::<serde_json::Value>(&run.join("north-report.jsonl")).unwrap();
    assert_eq!(persisted.len(), stages.len());
    let cutoffs: Vec<f64> = stages.iter().map(|s| s["rho_tilde"].as_f64().unwrap()).collect();

    // delete the later checkpoints and resume from stage 0
    let last = stages.len() - 1;
    for t in 1..=last {
        std::fs::remove_file(run.join(format!("north-stage{t}.ckpt"))).unwrap();
    }
    let resumed = ok(&["train", "diffusion", "--scenario", "north", "--config", &cfg, "--out-dir", s(&run), "--seed", "5", "--resume"]);
    let again: Vec<f64> = resumed["stages"].as_array().unwrap().iter().map(|s| s["rho_tilde"].as_f64().unwrap()).collect();
    assert_eq!(again, cutoffs);

    let ckpt = run.join(format!("north-stage{last}.ckpt"));
    let samples = d.path().join("samples.jsonl");
    let v = ok(&["sample", "--ckpt", s(&ckpt), "--scenario", "north", "--count", "100", "--seed", "9", "--config", &cfg, "--out", s(&samples)]);
    let (h, recs) = read_jsonl_file::<EpisodeRecord>(&samples).unwrap();
    assert_eq!(recs.len(), 100);
    assert_eq!(h.meta["generator"], "diffusion");
    let fails = recs.iter().filter(|r| r.rho == 0.0).count();
    assert_eq!(v["failures"], fails);
    assert_eq!(v["failure_rate"].as_f64().unwrap(), fails as f64 / 100.0);
    assert!(recs.iter().all(|r| r.rho_threshold == Some(0.0)));

    // sampling under a different config is refused
    let out = failgen(&["sample", "--ckpt", s(&ckpt), "--scenario", "north", "--count", "5", "--out", s(&d.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = failgen(&["sample", "--ckpt", s(&ckpt), "--scenario", "south", "--count", "5", "--config", &cfg, "--out", s(&d.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cem_train_then_sample() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "toy.toml", TOY);
    let run = d.path().join("cem");
    let report = ok(&["train", "cem", "--scenario", "west", "--config", &cfg, "--out-dir", s(&run), "--seed", "2"]);
    assert!(!report["stages"].as_array().unwrap().is_empty());
    let prop = run.join("west-cem.json");
    let out = d.path().join("cem.jsonl");
    let v = ok(&["sample", "--proposal", s(&prop), "--scenario", "west", "--count", "50", "--seed", "1", "--config", &cfg, "--out", s(&out)]);
    assert_eq!(v["count"], 50);
}

#[test]
fn evaluate_identical_files_covers_everything() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mc) = mc_file(d.path());
    let v = ok(&["evaluate", "--real", s(&mc), "--generated", s(&mc), "--config", &cfg]);
    assert_eq!(v["coverage"], 1.0);
    assert_eq!(v["failure_rate"], 1.0);
    assert_eq!(v["k"], 5);
    let out = failgen(&["evaluate", "--real", s(&mc), "--generated", s(&mc), "--k", "100000", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    // default config hash differs from the boosted one
    assert_eq!(failgen(&["evaluate", "--real", s(&mc), "--generated", s(&mc)]).status.code(), Some(1));
}

#[test]
fn evaluate_three_by_three_matches_brute_force() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mc) = mc_file(d.path());
    let (h, recs) = read_jsonl_file::<EpisodeRecord>(&mc).unwrap();
    assert!(recs.len() >= 6);
    let (real, gen) = (&recs[..3], &recs[3..6]);
    let (rp, gp) = (d.path().join("r.jsonl"), d.path().join("g.jsonl"));
    write_jsonl_file(&rp, &h, real).unwrap();
    write_jsonl_file(&gp, &FileHeader { kind: "samples".into(), ..h.clone() }, gen).unwrap();
    let v = ok(&["evaluate", "--real", s(&rp), "--generated", s(&gp), "--k", "1", "--config", &cfg]);

    let mut world = WorldConfig::default();
    world.gamma = 166.66666666666669;
    let feat = |r: &EpisodeRecord| embed(&replay(r, &world).unwrap()).unwrap().to_vec();
    let rf: Vec<Vec<f64>> = real.iter().map(feat).collect();
    let gf: Vec<Vec<f64>> = gen.iter().map(feat).collect();
    let radius: Vec<f64> = (0..3)
        .map(|i| (0..3).filter(|&j| j != i).map(|j| distance(&rf[i], &rf[j])).fold(f64::INFINITY, f64::min))
        .collect();
    let mut inside = 0;
    let mut covered = [false; 3];
    for g in &gf {
        for j in 0..3 {
            if distance(g, &rf[j]) <= radius[j] {
                inside += 1;
                covered[j] = true;
            }
        }
    }
    assert_eq!(v["density"].as_f64().unwrap(), inside as f64 / 3.0);
    assert_eq!(v["coverage"].as_f64().unwrap(), covered.iter().filter(|c| **c).count() as f64 / 3.0);
}

#[test]
fn plot_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mc) = mc_file(d.path());
    let (a, b, one) = (d.path().join("a.svg"), d.path().join("b.svg"), d.path().join("one.svg"));
    ok(&["plot", "--samples", s(&mc), "--out", s(&a), "--max-trajectories", "20", "--config", &cfg]);
    ok(&["plot", "--samples", s(&mc), "--out", s(&b), "--max-trajectories", "20", "--config", &cfg]);
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(&b).unwrap());
    assert!(bytes.starts_with(b"<svg"));
    assert_eq!(String::from_utf8_lossy(&bytes).matches("<polyline").count(), 20);

    ok(&["plot", "--samples", s(&mc), "--out", s(&one), "--max-trajectories", "1", "--config", &cfg]);
    let svg = std::fs::read_to_string(&one).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 1);
    assert_eq!(svg.matches("<circle").count(), 24);
    let hex: String = Sha256::digest(svg.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(hex, "95c589551938f25c91d22ec26e2fb79620b2ce14c560b0fac40ae8357a5413db");
}

#[test]
fn plot_without_failures_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("mc.jsonl");
    // default noise: no failures in a handful of episodes
    ok(&["mc", "--scenario", "south", "--episodes", "20", "--out", s(&out)]);
    let r = failgen(&["plot", "--samples", s(&out), "--out", s(&d.path().join("p.svg"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn replay_reproduces_failures() {
    let d = tempfile::tempdir().unwrap();
    let (cfg, mc) = mc_file(d.path());
    let out = failgen(&["replay", "--input", s(&mc), "--config", &cfg]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["match"], true);
        assert_eq!(v["collided"], true);
    }
    let (_, recs) = read_jsonl_file::<EpisodeRecord>(&mc).unwrap();
    let idx = recs[0].episode_index.to_string();
    let traj = d.path().join("t.jsonl");
    ok(&["replay", "--input", s(&mc), "--episode", &idx, "--trajectory-out", s(&traj), "--config", &cfg]);
    assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 24);
    assert_eq!(failgen(&["replay", "--input", s(&mc)]).status.code(), Some(1));
}
