//! The `slimvc` binary driven end to end through its flags.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slimvc::io::{read_frames, read_ppm};
use tempfile::TempDir;

fn slimvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slimvc")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = slimvc(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, pattern: &str, frames: &str, seed: &str) {
    ok(&["synth", "--pattern", pattern, "--frames", frames, "--size", "64x48", "--seed", seed, "--out", p(dir)]);
}

fn files(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|n| fs::read(n).unwrap()).collect()
}

/// A stage-1 checkpoint from a short run on synthetic data.
fn quick_checkpoint(tmp: &TempDir) -> std::path::PathBuf {
    let cfg = tmp.path().join("quick.cfg");
    fs::write(&cfg, "batch=1\nsteps_stage1=3\nsteps_stage2=3\nseed=1\n").unwrap();
    let ck = tmp.path().join("quick.svcw");
    ok(&["train", "--stage", "1", "--config", p(&cfg), "--ckpt-out", p(&ck)]);
    ck
}

#[test]
fn synth_is_deterministic_and_named_by_index() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    synth(&a, "noise", "3", "7");
    synth(&b, "noise", "3", "7");
    assert_eq!(files(&a), files(&b));
    assert!(a.join("frame_000002.ppm").exists());
    let c = tmp.path().join("c");
    synth(&c, "noise", "3", "8");
    assert_ne!(files(&a), files(&c));
}

#[test]
fn static_frames_are_identical_and_translate_frames_shift() {
    let tmp = TempDir::new().unwrap();
    let s = tmp.path().join("s");
    synth(&s, "static", "4", "1");
    let f = files(&s);
    assert!(f.iter().all(|x| x == &f[0]));

    let t = tmp.path().join("t");
    synth(&t, "translate", "3", "1");
    let frames = read_frames(&t).unwrap();
    let (dx, dy) = (2, 1);
    for pair in frames.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let (_, _, h, w) = cur.dims4().unwrap();
        for c in 0..3 {
            for y in 0..h - dy {
                for x in 0..w - dx {
                    let a = cur.data()[(c * h + y) * w + x];
                    let b = prev.data()[(c * h + y + dy) * w + x + dx];
                    assert_eq!(a, b, "channel {c} at ({x}, {y})");
                }
            }
        }
    }
}

#[test]
fn synth_rejects_tiny_frames_and_unknown_patterns() {
    let tmp = TempDir::new().unwrap();
    let out = slimvc(&["synth", "--size", "40x48", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = slimvc(&["synth", "--pattern", "spiral", "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
}

#[test]
fn two_hundred_step_training_smoke() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("smoke.cfg");
    fs::write(&cfg, "steps_stage1=200\nbatch=2\nseed=5\nlambda_4=0.01\n").unwrap();
    let ck = tmp.path().join("s1.svcw");
    ok(&["train", "--stage", "1", "--config", p(&cfg), "--ckpt-out", p(&ck)]);
    assert!(fs::metadata(&ck).unwrap().len() > 0);

    let trace = fs::read_to_string(tmp.path().join("s1.svcw.trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,loss,rate_bpp,mse"));
    assert_eq!(trace.lines().count(), 201);

    let dump = fs::read_to_string(tmp.path().join("s1.svcw.config.txt")).unwrap();
    for k in 0..5 {
        assert!(dump.contains(&format!("lambda_{k}=")), "{dump}");
    }
    assert!(dump.contains("lambda_4=0.01"));
    assert!(dump.contains("seed=5"));

    let ck2 = tmp.path().join("s2.svcw");
    fs::write(&cfg, "steps_stage2=5\nbatch=1\n").unwrap();
    ok(&["train", "--stage", "2", "--config", p(&cfg), "--ckpt-in", p(&ck), "--ckpt-out", p(&ck2)]);
    assert_eq!(fs::read_to_string(tmp.path().join("s2.svcw.trace.csv")).unwrap().lines().count(), 6);
}

#[test]
fn training_from_frames_on_disk() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, "translate", "3", "2");
    let cfg = tmp.path().join("c.cfg");
    fs::write(&cfg, "steps_stage1=2\nbatch=1\n").unwrap();
    let ck = tmp.path().join("d.svcw");
    ok(&["train", "--stage", "1", "--config", p(&cfg), "--data", p(&data), "--ckpt-out", p(&ck)]);
    let out = slimvc(&["train", "--stage", "1", "--data", p(&tmp.path().join("none")), "--ckpt-out", p(&ck)]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn stage_two_without_a_checkpoint_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = slimvc(&["train", "--stage", "2", "--ckpt-out", p(&tmp.path().join("x.svcw"))]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "momentum=0.9\n").unwrap();
    let out = slimvc(&["train", "--stage", "1", "--config", p(&cfg), "--ckpt-out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn encode_decode_round_trip() {
    let tmp = TempDir::new().unwrap();
    let ck = quick_checkpoint(&tmp);
    let frames = tmp.path().join("in");
    synth(&frames, "translate", "5", "3");
    let svc = tmp.path().join("clip.svc");
    ok(&["encode", "--ckpt", p(&ck), "--width-idx", "3", "--gop", "4", "--in", p(&frames), "--out", p(&svc)]);

    let bytes = fs::read(&svc).unwrap();
    assert_eq!(&bytes[..4], b"SVC1");
    assert_eq!((bytes[5], bytes[6]), (3, 4), "header echoes width index and gop");

    let csv = fs::read_to_string(tmp.path().join("clip.svc.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("width_factor,frame,type,bits,bpp,mse,psnr"));
    let types: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(types, ["intra", "inter", "inter", "inter", "intra"]);

    let svc2 = tmp.path().join("again.svc");
    ok(&["encode", "--ckpt", p(&ck), "--width-idx", "3", "--gop", "4", "--in", p(&frames), "--out", p(&svc2)]);
    assert_eq!(bytes, fs::read(&svc2).unwrap());
    assert_eq!(csv, fs::read_to_string(tmp.path().join("again.svc.csv")).unwrap());

    let out = tmp.path().join("out");
    ok(&["decode", "--ckpt", p(&ck), "--in", p(&svc), "--out", p(&out)]);
    let decoded = files(&out);
    assert_eq!(decoded.len(), 5);

    // The encoder-side reconstructions, written through the same PPM path.
    let model = slimvc::train::checkpoint::load(&ck).unwrap();
    let input = read_frames(&frames).unwrap();
    let enc = slimvc::codec::encode_sequence(&model, &input, 3, 4).unwrap();
    for (t, r) in enc.recon.iter().enumerate() {
        assert_eq!(decoded[t], slimvc::io::encode_ppm(r).unwrap(), "frame {t}");
        let back = read_ppm(&out.join(format!("frame_{t:06}.ppm"))).unwrap();
        assert_eq!(back.shape(), r.shape());
    }
}

#[test]
fn gop_one_marks_every_frame_intra() {
    let tmp = TempDir::new().unwrap();
    let ck = quick_checkpoint(&tmp);
    let frames = tmp.path().join("in");
    synth(&frames, "static", "3", "4");
    let svc = tmp.path().join("c.svc");
    let csv = tmp.path().join("m.csv");
    ok(&["encode", "--ckpt", p(&ck), "--width-idx", "0", "--gop", "1", "--in", p(&frames), "--out", p(&svc), "--metrics", p(&csv)]);
    let csv = fs::read_to_string(&csv).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("intra")));
    assert!(csv.lines().skip(1).all(|l| l.starts_with("0.25,")));
}

#[test]
fn bad_width_index_and_corrupt_containers() {
    let tmp = TempDir::new().unwrap();
    let ck = quick_checkpoint(&tmp);
    let frames = tmp.path().join("in");
    synth(&frames, "static", "2", "4");
    let svc = tmp.path().join("c.svc");
    let out = slimvc(&["encode", "--ckpt", p(&ck), "--width-idx", "5", "--in", p(&frames), "--out", p(&svc)]);
    assert_eq!(out.status.code(), Some(1));

    ok(&["encode", "--ckpt", p(&ck), "--width-idx", "1", "--in", p(&frames), "--out", p(&svc)]);
    let mut bytes = fs::read(&svc).unwrap();
    bytes[0] = b'X';
    let bad = tmp.path().join("bad.svc");
    fs::write(&bad, &bytes).unwrap();
    let out = slimvc(&["decode", "--ckpt", p(&ck), "--in", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("magic") && err.trim().lines().count() == 1, "{err}");

    let short = fs::read(&svc).unwrap();
    fs::write(&bad, &short[..short.len() - 3]).unwrap();
    let out = slimvc(&["decode", "--ckpt", p(&ck), "--in", p(&bad), "--out", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = slimvc(&["decode", "--ckpt", p(&ck), "--in", p(&tmp.path().join("missing.svc")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profile_of_the_paper_preset() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("p.csv");
    let out = ok(&["profile", "--preset", "paper", "--resolution", "1920x1080", "--csv", p(&csv)]);
    assert!(!out.stdout.is_empty());
    let csv = fs::read_to_string(&csv).unwrap();
    assert_eq!(csv.lines().next(), Some("module,width_factor,params,param_bytes,macs_encode,macs_decode"));
    let full: Vec<Vec<&str>> = csv
        .lines()
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == "1")
        .collect();
    let params = |m: &str| full.iter().find(|f| f[0] == m).unwrap()[2].parse::<f64>().unwrap() / 1e6;
    for (m, want) in [
        ("SlimFE", "2.0"),
        ("SlimFD", "2.0"),
        ("SlimHE", "4.2"),
        ("SlimHD", "4.8"),
        ("SlimTPM", "16.2"),
        ("SlimEPM", "4.6"),
    ] {
        assert_eq!(format!("{:.1}", params(m)), want, "{m}");
    }
    let tpm = full.iter().find(|f| f[0] == "SlimTPM").unwrap()[4].parse::<f64>().unwrap() / 1e9;
    assert!((tpm - 234.0).abs() < 0.5, "{tpm}");
}

#[test]
fn desk_profile_is_monotone_in_width() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("d.csv");
    ok(&["profile", "--preset", "desk", "--resolution", "96x96", "--csv", p(&csv)]);
    let csv = fs::read_to_string(&csv).unwrap();
    for m in ["SlimFE", "SlimFD", "SlimHE", "SlimHD", "SlimTPM", "SlimEPM"] {
        let rows: Vec<Vec<u64>> = csv
            .lines()
            .filter(|l| l.starts_with(&format!("{m},")))
            .map(|l| l.split(',').skip(2).map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 5);
        for w in rows.windows(2) {
            assert!(w[0][0] > 0 && w[0][0] < w[1][0], "{m} params");
        }
    }
    let out = slimvc(&["profile", "--resolution", "100x96"]);
    assert_eq!(out.status.code(), Some(1));
}
