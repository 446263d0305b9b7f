use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use eegfm::eegdata::{patchify, synth_session, PatchBatch, SynthSpec};
use eegfm::masking::{build_channel_masks, build_decoder_masks, build_temporal_mask};
use eegfm::train::{
    evaluate, finetune, grad_check, pretrain, session_windows, smoothed, write_json, Corpus, DownstreamTask,
    GradCheckConfig, PretrainState,
};
use eegfm::{Checkpoint, MaskPlan, Model, ModelConfig, RunDir};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::cli::{self, Command};
use crate::settings::{FinetuneSettings, PretrainSettings, Resolver};
use crate::{dataset, Failure, Outcome};

pub fn run(command: Command) -> Outcome<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Pretrain(a) => run_pretrain(&a),
        Command::Finetune(a) => run_finetune(&a),
        Command::Eval(a) => eval(&a),
        Command::InspectMasks(a) => inspect_masks(&a),
        Command::GradCheck(a) => run_grad_check(&a),
    }
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: C,
}

fn write_manifest<C: Serialize>(path: &Path, command: &str, seed: u64, config: C) -> Outcome<()> {
    let m = Manifest {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
    };
    Ok(write_json(path, &m)?)
}

fn create_dir(path: &Path) -> Outcome<()> {
    fs::create_dir_all(path).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn gen_data(a: &cli::GenData) -> Outcome<()> {
    create_dir(&a.run_dir)?;
    let manifest = dataset::generate(a, &a.run_dir)?;
    let config: BTreeMap<&str, String> = [
        ("classes", a.classes.to_string()),
        ("first_class", a.first_class.to_string()),
        ("sessions", a.sessions.to_string()),
        ("duration", a.duration.to_string()),
        ("channels", a.channels.to_string()),
        ("snr_db", a.snr_db.to_string()),
        ("run_dir", a.run_dir.display().to_string()),
    ]
    .into();
    write_manifest(&a.run_dir.join("config-manifest.json"), "gen-data", a.seed, config)?;
    println!("wrote {} sessions to {}", manifest.sessions.len(), a.run_dir.display());
    Ok(())
}

fn run_pretrain(a: &cli::Configured) -> Outcome<()> {
    let r = Resolver::load(a.config.as_deref(), &a.overrides, a.run_dir.as_deref())?;
    let (s, resolved) = PretrainSettings::resolve(r)?;
    let sessions = dataset::load(&s.data)?;
    let corpus = Corpus::from_sessions(&sessions)?;
    let (mut model, mut state) = match &s.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            PretrainState::from_checkpoint(&ck)?
        }
        None => {
            let model = Model::new(ModelConfig::variant(s.variant), s.model_seed)?;
            let state = PretrainState::fresh(&model, &s.train);
            (model, state)
        }
    };
    let run = RunDir::create(&s.run_dir)?;
    write_manifest(&run.manifest(), "pretrain", s.train.seed, &resolved)?;
    log::info!(
        "pretraining a {} model ({} parameters) on {} sessions, steps {}..{}",
        s.variant,
        model.num_params(),
        corpus.len(),
        state.next_step,
        s.train.steps
    );
    let report = pretrain(&mut model, &corpus, &s.train, &mut state, Some(&run))?;
    let losses = report.losses();
    if !losses.is_empty() {
        let sm = smoothed(&losses, (losses.len() / 10).max(1));
        println!(
            "pretrained {} steps; smoothed loss {:.4} -> {:.4}",
            losses.len(),
            sm[0],
            sm[sm.len() - 1]
        );
    }
    println!("checkpoint: {}", run.checkpoints().join("last.ckpt").display());
    Ok(())
}

fn run_finetune(a: &cli::Configured) -> Outcome<()> {
    let r = Resolver::load(a.config.as_deref(), &a.overrides, a.run_dir.as_deref())?;
    let (s, resolved) = FinetuneSettings::resolve(r)?;
    let ck = Checkpoint::load(&s.checkpoint)?;
    let mut model = Model::from_checkpoint(&ck)?;
    let mut tasks = Vec::with_capacity(s.tasks.len());
    for t in &s.tasks {
        let mut sessions = dataset::load(&t.data)?;
        if !t.classes.is_empty() {
            sessions.retain(|x| x.class_label.is_some_and(|c| t.classes.contains(&c)));
        }
        tasks.push(DownstreamTask::from_sessions(&t.name, &sessions, s.window, s.val_fraction, s.split_seed)?);
    }
    let run = RunDir::create(&s.run_dir)?;
    write_manifest(&run.manifest(), "finetune", s.train.seed, &resolved)?;
    let report = finetune(&mut model, &tasks, &s.train, Some(&run))?;
    println!(
        "best epoch {} mean val balanced accuracy {:.4}",
        report.best_epoch + 1,
        report.best_score
    );
    for rep in &report.best().reports {
        println!(
            "  {}: balanced accuracy {:.4}, kappa {:.4}, weighted F1 {:.4}",
            rep.task, rep.balanced_accuracy, rep.kappa, rep.weighted_f1
        );
    }
    println!("checkpoint: {}", run.checkpoints().join("best.ckpt").display());
    Ok(())
}

fn sha256_file(path: &Path) -> Outcome<String> {
    let bytes = fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn eval(a: &cli::Eval) -> Outcome<()> {
    let before = sha256_file(&a.checkpoint)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = Model::from_checkpoint(&ck)?;
    let names: Vec<String> = match &a.task {
        Some(t) => {
            model.task_index(t)?;
            vec![t.clone()]
        }
        None => model.tasks().into_iter().map(|t| t.name).collect(),
    };
    if names.is_empty() {
        return Err(Failure::Validation(format!("{} has no finetuned tasks", a.checkpoint.display())));
    }
    let sessions = dataset::load(&a.data)?;
    let run = RunDir::create(&a.run_dir)?;
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let idx = model.task_index(name)?;
        let classes = model.tasks()[idx].classes;
        let labels: Vec<usize> = match ck.meta.get("labels").and_then(|l| l.get(name)) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Failure::Runtime(e.to_string()))?,
            None => (0..classes).collect(),
        };
        let mut items = Vec::new();
        for s in &sessions {
            let Some(class) = s.class_label.and_then(|c| labels.iter().position(|&l| l == c)) else {
                continue;
            };
            items.extend(session_windows(s, a.window)?.into_iter().map(|w| (w, class)));
        }
        if items.is_empty() {
            return Err(Failure::Validation(format!("no sessions in {} carry labels of task {name:?}", a.data.display())));
        }
        let rep = evaluate(&model, idx, &items, "eval", a.batch)?;
        write_json(&run.metrics().join(format!("eval-{name}.json")), &rep)?;
        println!(
            "{name}: n {} balanced accuracy {:.4}, kappa {:.4}, weighted F1 {:.4}",
            rep.n, rep.balanced_accuracy, rep.kappa, rep.weighted_f1
        );
        reports.push(rep);
    }
    let after = sha256_file(&a.checkpoint)?;
    if after != before {
        return Err(Failure::Runtime(format!("checkpoint {} changed during evaluation", a.checkpoint.display())));
    }
    let config: BTreeMap<&str, String> = [
        ("checkpoint", a.checkpoint.display().to_string()),
        ("checkpoint_sha256", before),
        ("data", a.data.display().to_string()),
        ("task", a.task.clone().unwrap_or_default()),
        ("window", a.window.to_string()),
        ("batch", a.batch.to_string()),
    ]
    .into();
    write_manifest(&run.manifest(), "eval", 0, config)?;
    Ok(())
}

fn set_line(name: &str, v: &[usize]) -> String {
    let items: Vec<String> = v.iter().map(usize::to_string).collect();
    format!("{name} = {{{}}}", items.join(", "))
}

fn inspect_masks(a: &cli::InspectMasks) -> Outcome<()> {
    let (t, c) = (a.time_steps, a.channels);
    let valid = a.valid.unwrap_or(c);
    if t == 0 || c == 0 || valid == 0 || valid > c {
        return Err(Failure::Validation(format!("need T ≥ 1 and 1 ≤ valid ≤ C, got T={t}, C={c}, valid={valid}")));
    }
    let plan = MaskPlan::sample(t, valid, a.task, a.seed)?;
    println!("task {} T={t} C={c} valid={valid} seed={}", a.task, a.seed);
    println!("{}", set_line("omega_t", &plan.omega_t));
    println!("{}", set_line("omega_c", &plan.omega_c));
    for (ti, m) in build_channel_masks(&plan, t, c, valid).iter().enumerate() {
        println!("\nchannel self t={ti} [{c}x{c}]\n{}", m.self_mask.grid().trim_end());
        println!("channel cross t={ti} [1x{c}]\n{}", m.cross_mask.grid().trim_end());
    }
    let n = t + 1;
    println!("\ntemporal [{n}x{n}]\n{}", build_temporal_mask(&plan, t).grid().trim_end());
    let d = build_decoder_masks(&plan, t, c, valid);
    println!("\ndecoder cross [{}x{t}]\n{}", t * c, d.cross_mask.grid().trim_end());
    println!("\ndecoder self [{0}x{0}]\n{1}", t * c, d.self_mask.grid().trim_end());
    Ok(())
}

const PROBE_TASK: &str = "probe";

fn check_batch(batch: usize, time_steps: usize, channels: usize, seed: u64) -> Outcome<PatchBatch> {
    if batch == 0 || time_steps == 0 || channels == 0 || channels > 30 {
        return Err(Failure::Validation("batch, T and C (≤ 30) must be positive".into()));
    }
    let ids: Vec<usize> = (0..channels).map(|i| 3 * i + 1).collect();
    let parts = (0..batch)
        .map(|b| {
            let spec = SynthSpec::new(b % eegfm::eegdata::num_classes(), ids.clone(), time_steps, seed + b as u64);
            patchify(&synth_session(&spec)?)
        })
        .collect::<eegfm::Result<Vec<_>>>()?;
    Ok(PatchBatch::collate(&parts)?)
}

fn run_grad_check(a: &cli::GradCheck) -> Outcome<()> {
    let model = match &a.checkpoint {
        Some(path) => Model::from_checkpoint(&Checkpoint::load(path)?)?,
        None => {
            let mut m = Model::new(ModelConfig::tiny(), a.seed)?;
            m.register_task(PROBE_TASK, 2)?;
            m
        }
    };
    let batch = check_batch(a.batch, a.time_steps, a.channels, a.seed)?;
    let cfg = GradCheckConfig {
        n_params: a.n_params,
        step: a.step,
        tol: a.tol,
        seed: a.seed,
        kind: a.kind,
        corrupt: a.corrupt.clone(),
    };
    let report = grad_check(&model, &batch, &cfg)?;
    for e in &report.entries {
        println!(
            "{:<40} [{:>3},{:>3}] analytic {:>+.6e} numeric {:>+.6e} rel {:.2e}",
            e.path, e.index[0], e.index[1], e.analytic, e.numeric, e.rel_err
        );
    }
    println!(
        "max relative error {:.3e} at {} (tol {:.1e}): {}",
        report.max_rel_err,
        report.worst_path,
        a.tol,
        if report.passed { "PASS" } else { "FAIL" }
    );
    if let Some(dir) = &a.run_dir {
        create_dir(dir)?;
        write_json(&dir.join("grad-check.json"), &report)?;
        write_manifest(&dir.join("config-manifest.json"), "grad-check", a.seed, &cfg)?;
    }
    if !report.passed {
        return Err(Failure::Runtime(format!(
            "gradient check failed: relative error {:.3e} at {}",
            report.max_rel_err, report.worst_path
        )));
    }
    Ok(())
}
