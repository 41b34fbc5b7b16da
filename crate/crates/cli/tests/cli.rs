use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coughdetect_core::audio_io::{write_wav, WavEncoding};
use coughdetect_core::synth::{family_recording, CoughFamily};
use coughdetect_core::AudioSignal;
use serde_json::Value;

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_coughdetect"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_signal(path: &Path, sig: &AudioSignal) {
    fs::write(path, write_wav(sig, WavEncoding::Pcm16).unwrap()).unwrap();
}

fn assert_single_line_error(out: &Output) {
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "stderr: {err}");
    assert!(err.starts_with("error: "), "stderr: {err}");
}

#[test]
fn detect_on_silence_prints_no_segments() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("quiet.wav");
    write_signal(&wav, &AudioSignal::new(vec![0.0; 44100], 44100));
    let out = run(&["detect", wav.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v, serde_json::json!({ "segments": [] }));
}

#[test]
fn detect_finds_a_synthetic_cough() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("cough.wav");
    let sig = family_recording(CoughFamily::Voiced, 3);
    write_signal(&wav, &sig);
    let out = run(&["detect", wav.to_str().unwrap()], &[]);
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let segs = v["segments"].as_array().unwrap();
    assert!(!segs.is_empty());
    for s in segs {
        let (a, b) = (s[0].as_u64().unwrap(), s[1].as_u64().unwrap());
        assert!(a < b && b as usize <= sig.len());
    }
}

#[test]
fn featurize_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("cough.wav");
    write_signal(&wav, &family_recording(CoughFamily::Dry, 8));
    let (a, b, c) = (dir.path().join("a.bin"), dir.path().join("b.bin"), dir.path().join("c.bin"));
    for (out, mode) in [(&a, "3d"), (&b, "3d"), (&c, "2d")] {
        let o = run(&["featurize", wav.to_str().unwrap(), "-o", out.to_str().unwrap(), "--mode", mode], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (ba, bb, bc) = (fs::read(&a).unwrap(), fs::read(&b).unwrap(), fs::read(&c).unwrap());
    assert_eq!(ba, bb);
    assert_eq!(ba.len(), 8 + 33 * 100 * 3 * 4);
    assert_eq!(bc.len(), 8 + 33 * 100 * 4);
}

#[test]
fn failures_leave_no_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let quiet = dir.path().join("quiet.wav");
    write_signal(&quiet, &AudioSignal::new(vec![0.0; 22050], 44100));
    let out_path = dir.path().join("t.bin");
    let o = run(&["featurize", quiet.to_str().unwrap(), "-o", out_path.to_str().unwrap()], &[]);
    assert_single_line_error(&o);
    assert!(!out_path.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    // With the fallback the whole recording is featurised.
    let o = run(&["featurize", quiet.to_str().unwrap(), "-o", out_path.to_str().unwrap(), "--whole-fallback"], &[]);
    assert!(o.status.success());
    assert!(out_path.exists());
}

#[test]
fn bad_inputs_are_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.wav");
    fs::write(&junk, b"definitely not a wav file").unwrap();
    assert_single_line_error(&run(&["detect", junk.to_str().unwrap()], &[]));
    assert_single_line_error(&run(&["detect", "/nonexistent/x.wav"], &[]));

    let quiet = dir.path().join("quiet.wav");
    write_signal(&quiet, &AudioSignal::new(vec![0.0; 4410], 44100));
    let o = run(&["detect", quiet.to_str().unwrap()], &[("COUGHDETECT__DETECTOR__DELTA", "-1")]);
    assert_single_line_error(&o);
    let o = run(&["detect", quiet.to_str().unwrap()], &[("COUGHDETECT__DETECTOR__DELAT", "0.1")]);
    assert_single_line_error(&o);
}

#[test]
fn config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("cough.wav");
    write_signal(&wav, &family_recording(CoughFamily::Voiced, 5));
    let cfg = dir.path().join("cfg.toml");
    // No burst can be this long, so nothing is detected.
    fs::write(&cfg, "[detector]\nmin_segment = 100000\n").unwrap();
    let o = run(&["detect", wav.to_str().unwrap(), "--config", cfg.to_str().unwrap()], &[]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["segments"].as_array().unwrap().len(), 0);
}

#[test]
fn train_then_evaluate_with_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = run(&["gen-corpus", corpus.to_str().unwrap(), "--per-class", "6", "--seed", "4"], &[]);
    assert!(o.status.success());
    let manifest = corpus.join("manifest.csv");
    assert!(manifest.exists());

    let weights = |name: &str| {
        let path = dir.path().join(name);
        let o = run(
            &[
                "train", manifest.to_str().unwrap(), "-o", path.to_str().unwrap(),
                "--epochs", "2", "--batch-size", "4", "--seed", "1",
            ],
            &[],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        path
    };
    let (w1, w2) = (weights("a.dcw"), weights("b.dcw"));
    assert_eq!(fs::read(&w1).unwrap(), fs::read(&w2).unwrap());

    let o = run(
        &["evaluate", manifest.to_str().unwrap(), "--model", w1.to_str().unwrap(), "--k", "3"],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["k"], 3);
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let c = &report["confusion"];
    let total: u64 = ["tp", "fn", "fp", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 12);
}
