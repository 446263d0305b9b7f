use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eegfm::masking::{build_channel_masks, build_decoder_masks, build_temporal_mask};
use eegfm::{MaskPlan, TaskKind};

fn eegfm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eegfm"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn eegfm")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_writes_sixty_labelled_sessions() {
    let dir = tempfile::tempdir().unwrap();
    ok(&eegfm(&["gen-data", "--duration", "8", "--run-dir", "data"], dir.path()));
    let manifest = json(dir.path().join("data/dataset.json"));
    let sessions = manifest["sessions"].as_array().unwrap();
    assert_eq!(sessions.len(), 60);
    for (i, s) in sessions.iter().enumerate() {
        assert_eq!(s["class_label"], i % 3);
        assert_eq!(s["channels"], 8);
        let session = eegfm::eegdata::load_session(dir.path().join("data").join(s["path"].as_str().unwrap())).unwrap();
        assert_eq!(session.n_samples(), 8 * 256);
    }
    assert_eq!(json(dir.path().join("data/config-manifest.json"))["command"], "gen-data");
}

#[test]
fn pretrain_finetune_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&eegfm(&["gen-data", "--sessions", "12", "--duration", "12", "--run-dir", "data"], d));
    fs::write(
        d.join("pre.cfg"),
        "# pretraining\ndata = data\nvariant = tiny\nsteps = 6\nbatch_size = 4\nwindow = 4\ncheckpoint_every = 3\n",
    )
    .unwrap();
    ok(&eegfm(&["pretrain", "--config", "pre.cfg", "--run-dir", "pre"], d));
    for f in ["last.ckpt", "step-000003.ckpt", "step-000006.ckpt"] {
        assert!(d.join("pre/checkpoints").join(f).is_file(), "{f}");
    }
    let lines = fs::read_to_string(d.join("pre/logs/steps.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 6);
    let manifest = json(d.join("pre/config-manifest.json"));
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config"]["steps"], "6");
    assert_eq!(manifest["config"]["lambda_gpt"], eegfm::losses::LossWeights::default().gpt.to_string());

    fs::write(
        d.join("ft.cfg"),
        "checkpoint = pre/checkpoints/last.ckpt\ntask.synth = data\nepochs = 2\nwindow = 4\nval_fraction = 0.25\n",
    )
    .unwrap();
    ok(&eegfm(&["finetune", "--config", "ft.cfg", "--run-dir", "ft"], d));
    let best = d.join("ft/checkpoints/best.ckpt");
    assert!(best.is_file());
    let report = json(d.join("ft/metrics/synth.json"));
    assert_eq!(report["split"], "val");
    assert_eq!(json(d.join("ft/metrics/epochs.json")).as_array().unwrap().len(), 2);

    let before = fs::read(&best).unwrap();
    let out = ok(&eegfm(
        &["eval", "--checkpoint", "ft/checkpoints/best.ckpt", "--data", "data", "--window", "4", "--run-dir", "ev"],
        d,
    ));
    assert!(out.contains("synth: n 36"), "{out}");
    assert_eq!(fs::read(&best).unwrap(), before);
    let ev = json(d.join("ev/metrics/eval-synth.json"));
    assert_eq!(ev["n"], 36);
    assert_eq!(json(d.join("ev/config-manifest.json"))["config"]["checkpoint_sha256"].as_str().unwrap().len(), 64);

    // A manifest is itself a valid config.
    ok(&eegfm(
        &["pretrain", "--config", "pre/config-manifest.json", "--set", "steps=2", "--run-dir", "again"],
        d,
    ));
    assert_eq!(json(d.join("again/config-manifest.json"))["config"]["steps"], "2");
}

#[test]
fn resumed_pretraining_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&eegfm(&["gen-data", "--sessions", "4", "--duration", "8", "--run-dir", "data"], d));
    let base = "data = data\nsteps = 4\nbatch_size = 2\nwindow = 3\ncheckpoint_every = 2\n";
    fs::write(d.join("pre.cfg"), base).unwrap();
    ok(&eegfm(&["pretrain", "--config", "pre.cfg", "--run-dir", "full"], d));
    ok(&eegfm(
        &["pretrain", "--config", "pre.cfg", "--set", "resume=full/checkpoints/step-000002.ckpt", "--run-dir", "part"],
        d,
    ));
    let full = fs::read_to_string(d.join("full/logs/steps.jsonl")).unwrap();
    let part = fs::read_to_string(d.join("part/logs/steps.jsonl")).unwrap();
    let tail: Vec<&str> = full.lines().skip(2).collect();
    assert_eq!(part.lines().collect::<Vec<_>>(), tail);
    assert_eq!(fs::read(d.join("full/checkpoints/last.ckpt")).unwrap(), fs::read(d.join("part/checkpoints/last.ckpt")).unwrap());
}

fn section(out: &str, header: &str) -> String {
    let start = out.find(header).unwrap_or_else(|| panic!("no {header:?} in\n{out}")) + header.len();
    let body = out[start..].split_once('\n').unwrap().1;
    body.split("\n\n").next().unwrap().split("\nchannel").next().unwrap().trim_end().to_string() + "\n"
}

#[test]
fn inspect_masks_is_deterministic_and_matches_builders() {
    let dir = tempfile::tempdir().unwrap();
    for (kind, name) in [(TaskKind::MaeTp, "mae_tp"), (TaskKind::MaeCh, "mae_ch"), (TaskKind::Gpt, "gpt")] {
        let args = ["inspect-masks", "--task", name, "--T", "4", "--C", "5", "--valid", "4", "--seed", "9"];
        let a = ok(&eegfm(&args, dir.path()));
        assert_eq!(a, ok(&eegfm(&args, dir.path())));
        let plan = MaskPlan::sample(4, 4, kind, 9).unwrap();
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        assert!(a.contains(&format!("omega_t = {{{}}}", list(&plan.omega_t))), "{a}");
        assert!(a.contains(&format!("omega_c = {{{}}}", list(&plan.omega_c))), "{a}");
        assert_eq!(section(&a, "temporal [5x5]"), build_temporal_mask(&plan, 4).grid());
        let ch = build_channel_masks(&plan, 4, 5, 4);
        assert_eq!(section(&a, "channel self t=2 [5x5]"), ch[2].self_mask.grid());
        let dec = build_decoder_masks(&plan, 4, 5, 4);
        assert_eq!(section(&a, "decoder cross [20x4]"), dec.cross_mask.grid());
        assert_eq!(section(&a, "decoder self [20x20]"), dec.self_mask.grid());
    }
}

#[test]
fn grad_check_passes_and_names_a_corrupted_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&eegfm(&["grad-check", "--n-params", "14", "--run-dir", "gc"], dir.path()));
    assert!(out.contains("PASS"), "{out}");
    assert_eq!(json(dir.path().join("gc/grad-check.json"))["passed"], true);

    let bad = eegfm(&["grad-check", "--n-params", "7", "--corrupt", "head.time.weight"], dir.path());
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("head.time.weight"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| eegfm(args, d).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["pretrain"]), Some(1));
    assert_eq!(code(&["pretrain", "--config", "missing.cfg"]), Some(1));
    fs::write(d.join("bad.cfg"), "data = data\nrun_dir = r\nstepz = 3\n").unwrap();
    ok(&eegfm(&["gen-data", "--sessions", "2", "--duration", "4", "--run-dir", "data"], d));
    let out = eegfm(&["pretrain", "--config", "bad.cfg"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));
    fs::write(d.join("dup.cfg"), "steps = 1\nsteps = 2\n").unwrap();
    assert_eq!(code(&["pretrain", "--config", "dup.cfg"]), Some(1));
    assert_eq!(code(&["inspect-masks", "--task", "mae_ch", "--T", "3", "--C", "1"]), Some(1));
    assert_eq!(code(&["gen-data", "--classes", "9", "--run-dir", "x"]), Some(1));
    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&["eval", "--checkpoint", "junk.ckpt", "--data", "data", "--run-dir", "e"]), Some(2));
}
