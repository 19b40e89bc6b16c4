use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke_conf() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn hee(run_dir: &Path, args: &[&str]) -> Output {
    hee_env(run_dir, args, &[])
}

fn hee_env(run_dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hee"));
    cmd.arg("--run-dir").arg(run_dir).arg("--config").arg(smoke_conf()).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("HEE_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied()).env("RUST_LOG", "warn");
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn toy_data(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["toy", "--sessions", "2"];
    args.extend_from_slice(extra);
    ok(&hee(dir, &args));
    dir.join("toy")
}

#[test]
fn exit_codes_separate_user_and_internal_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(hee(d, &["--help"]).status.code(), Some(0));
    assert_eq!(hee(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(hee(d, &["stats", "--bogus"]).status.code(), Some(1));
    let unknown = hee(d, &["--set", "train.epoch=3", "stats", "--ref", "x.rttm"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("unknown config key"));
    assert_eq!(hee_env(d, &["stats", "--ref", "x.rttm"], &[("HEE_NOT_A_KEY", "1")]).status.code(), Some(1));
    let missing = hee(d, &["pretrain"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("corpus"));
    assert_eq!(hee(d, &["train", "--toy"]).status.code(), Some(1));
    assert_eq!(hee(d, &["stats", "--ref", "does-not-exist.rttm"]).status.code(), Some(1));
}

#[test]
fn synth_is_deterministic_and_cuts_mixtures_in_four() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&hee(d, &["--seed", "7", "--workers", "2", "synth", "--toy", "--num", "8", "--mixture-dur", "12.8"]));
    }
    let mut names: Vec<String> =
        std::fs::read_dir(a.path().join("shards")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for n in &names {
        let x = std::fs::read(a.path().join("shards").join(n)).unwrap();
        let y = std::fs::read(b.path().join("shards").join(n)).unwrap();
        assert!(x == y, "{n} differs between identical runs");
    }
    let m = json(a.path().join("shards/manifest.json"));
    assert_eq!(m["samples"], 32);
    assert_eq!(m["samples"].as_u64().unwrap() % 4, 0);
    assert_eq!(m["frames_per_sample"], 320);
    assert_eq!(m["mixtures"].as_array().unwrap().len(), 8);
    let run = json(a.path().join("manifest-synth.json"));
    assert_eq!(run["outputs"].as_object().unwrap().len(), 8 + 2);
    assert_eq!(run["config"]["seed"], 7);
    assert_eq!(run["overrides"]["workers"], "flag");
}

#[test]
fn planned_speaker_counts_follow_the_mixing_distribution() {
    let dir = tempfile::tempdir().unwrap();
    ok(&hee(dir.path(), &["synth", "--toy", "--num", "2500", "--dry-run"]));
    let m = json(dir.path().join("shards/manifest.json"));
    assert_eq!(m["samples"], 10_000);
    let hist: Vec<f64> = m["speaker_count_histogram"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap() / 10_000.0).collect();
    // Counts come in blocks of four samples, so 2500 independent draws:
    // three standard errors of a 0.3 share is about 0.027.
    for (f, p) in hist.iter().zip([0.1, 0.3, 0.3, 0.3]) {
        assert!((f - p).abs() < 0.03, "{hist:?}");
    }
}

#[test]
fn train_smoke_run_logs_every_step_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["train", "--toy", "--pretrain", "--epochs", "2", "--freeze-epochs", "1", "--batches-per-epoch", "5", "--no-shuffle", "--no-specaug"];
    ok(&hee(d, &args));
    let log = std::fs::read_to_string(d.join("train.log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2 * 5);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["step"], i as u64);
        for k in ["epoch", "loss", "accuracy", "wall_clock_s"] {
            assert!(r.get(k).is_some(), "missing {k}");
        }
    }
    assert!(d.join("checkpoints/epoch-001.state").is_file() && d.join("checkpoints/epoch-002.state").is_file());
    let run = json(d.join("manifest-train.json"));
    assert_eq!(run["config"]["synth.shuffle"], false);
    assert_eq!(run["config"]["synth.spec_augment"], false);
    for k in ["model.ckpt", "backbone.ckpt", "train.log.jsonl"] {
        assert_eq!(run["outputs"][k].as_str().unwrap().len(), 64, "{k}");
    }

    // Resuming from the first epoch reproduces the second one exactly.
    let resumed = tempfile::tempdir().unwrap();
    let state = d.join("checkpoints/epoch-001.state");
    ok(&hee(resumed.path(), &["train", "--toy", "--resume", state.to_str().unwrap(), "--no-shuffle", "--no-specaug"]));
    let again: Vec<Value> =
        std::fs::read_to_string(resumed.path().join("train.log.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(again.len(), 5);
    for (a, b) in again.iter().zip(&records[5..]) {
        assert_eq!(a["step"], b["step"]);
        assert_eq!(a["loss"], b["loss"]);
    }
    assert_eq!(std::fs::read(resumed.path().join("model.ckpt")).unwrap(), std::fs::read(d.join("model.ckpt")).unwrap());

    // A diverged state is an internal failure, not a user error.
    let mut ck = hee::checkpoint::Checkpoint::load(&state).unwrap();
    let id = ck.params.id("backbone.proj.w").unwrap();
    ck.params.get_mut(id).fill(f64::NAN);
    let poisoned = d.join("poisoned.state");
    ck.save(&poisoned).unwrap();
    let blown = hee(&d.join("p"), &["train", "--toy", "--resume", poisoned.to_str().unwrap(), "--no-shuffle", "--no-specaug"]);
    assert_eq!(blown.status.code(), Some(2), "{}", String::from_utf8_lossy(&blown.stderr));
    assert!(String::from_utf8_lossy(&blown.stderr).contains("non-finite"));
}

#[test]
fn diarize_then_score_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let toy = toy_data(d, &["--set", "session.min_speakers=2", "--set", "session.max_speakers=2"]);
    ok(&hee(d, &["pretrain", "--toy"]));
    ok(&hee(d, &["train", "--toy", "--backbone", d.join("backbone.ckpt").to_str().unwrap()]));
    let model = d.join("model.ckpt");
    let sessions = toy.join("sessions");
    let wav0 = sessions.join("toy000.wav");
    let seg0 = sessions.join("toy000.seg");
    let wav1 = sessions.join("toy001.wav");
    let seg1 = sessions.join("toy001.seg");
    let out = d.join("dz");
    let args = [
        "diarize", "--model", model.to_str().unwrap(), "--oracle-speakers", "2",
        "--wav", wav0.to_str().unwrap(), "--segments", seg0.to_str().unwrap(),
        "--wav", wav1.to_str().unwrap(), "--segments", seg1.to_str().unwrap(),
    ];
    ok(&hee(&out, &args));
    let rttm = std::fs::read_to_string(out.join("rttm/toy000.rttm")).unwrap();
    let names: std::collections::BTreeSet<&str> = rttm.lines().map(|l| l.split_whitespace().nth(7).unwrap()).collect();
    assert_eq!(names.len(), 2, "{rttm}");
    let run = json(out.join("manifest-diarize.json"));
    assert_eq!(run["config"]["pipeline.window_s"], 3.2);
    assert_eq!(run["config"]["pipeline.shift_s"], 0.8);
    assert_eq!(run["extra"]["speakers"]["toy000"], 2);

    // Reference against itself scores zero.
    let reference = toy.join("ref.rttm");
    let self_score = hee(&d.join("s0"), &["score", "--ref", reference.to_str().unwrap(), "--hyp", reference.to_str().unwrap()]);
    ok(&self_score);
    let table = String::from_utf8_lossy(&self_score.stdout).to_string();
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["session", "DER", "FA", "MS", "SC"]);
    let overall: Vec<&str> = table.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(overall[..2], ["OVERALL", "0.00"]);

    // Aggregate DER is the speech-weighted mean of the session DERs.
    let hyp = out.join("hyp.rttm");
    ok(&hee(&d.join("s1"), &["score", "--ref", reference.to_str().unwrap(), "--hyp", hyp.to_str().unwrap()]));
    let lines: Vec<Value> =
        std::fs::read_to_string(d.join("s1/score.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let (sessions, overall) = lines.split_at(lines.len() - 1);
    let speech: f64 = sessions.iter().map(|l| l["scored_speech_s"].as_f64().unwrap()).sum();
    let weighted: f64 = sessions.iter().map(|l| l["der"].as_f64().unwrap() * l["scored_speech_s"].as_f64().unwrap()).sum::<f64>() / speech;
    assert!((overall[0]["der"].as_f64().unwrap() - weighted).abs() < 1e-9);

    // One session missing from the hypothesis.
    let partial = d.join("partial.rttm");
    std::fs::write(&partial, std::fs::read_to_string(out.join("rttm/toy000.rttm")).unwrap()).unwrap();
    let mismatch = hee(&d.join("s2"), &["score", "--ref", reference.to_str().unwrap(), "--hyp", partial.to_str().unwrap()]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("toy001"));

    // Empty segment list: empty RTTM, success.
    let empty = d.join("empty.seg");
    std::fs::write(&empty, "").unwrap();
    let e = hee(&d.join("e"), &["diarize", "--model", model.to_str().unwrap(), "--wav", wav0.to_str().unwrap(), "--segments", empty.to_str().unwrap()]);
    ok(&e);
    assert_eq!(std::fs::read_to_string(d.join("e/rttm/toy000.rttm")).unwrap(), "");

    let stats = hee(&d.join("st"), &["stats", "--ref", reference.to_str().unwrap()]);
    ok(&stats);
    let m = json(d.join("st/manifest-stats.json"));
    assert_eq!(m["extra"]["stats"]["sessions"], 2);
    assert_eq!(m["extra"]["stats"]["mean_speakers"], 2.0);
}

#[test]
fn ablate_reports_every_requested_variant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hee(d, &["ablate", "--ablation", "full", "--ablation", "no-shuffle", "--ablation", "duration-2.4"]));
    let rows: Vec<Value> =
        std::fs::read_to_string(d.join("ablation.jsonl")).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let names: Vec<&str> = rows.iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no-shuffle", "duration-2.4s"]);
    assert_eq!(hee(d, &["ablate", "--ablation", "duration-3.0"]).status.code(), Some(1));
    assert_eq!(hee(d, &["ablate", "--ablation", "no-enhancer"]).status.code(), Some(1));
}

#[test]
fn resolved_config_is_written_and_reloadable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_data(d, &[]);
    let reference = d.join("toy/ref.rttm");
    let out = hee_env(d, &["stats", "--ref", reference.to_str().unwrap()], &[("HEE_TRAIN__EPOCHS", "4")]);
    ok(&out);
    let conf = std::fs::read_to_string(d.join("stats.conf")).unwrap();
    assert!(conf.lines().any(|l| l == "train.epochs = 4"));
    assert!(conf.lines().any(|l| l == "mel.n_mels = 16"));
    let run = json(d.join("manifest-stats.json"));
    assert_eq!(run["overrides"]["train.epochs"], "env");
    assert_eq!(run["overrides"]["mel.n_mels"], "file");
}
