//! Acceptance suite: one pass/fail line per criterion, non-zero exit if any
//! criterion fails. Runs single-threaded, criteria in order.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{perturb, random_batch, synth_corpus};
use eegfm::attention::rope;
use eegfm::eegdata::{load_session, save_session};
use eegfm::losses::{class_weights, loss_dt, pretrain_total, LossWeights};
use eegfm::metrics::{auroc, cohens_kappa, weighted_f1, ConfusionMatrix};
use eegfm::spectral::{dft_oracle, hann, Periodogram};
use eegfm::train::{
    finetune, grad_check, pretrain, read_step_log, smoothed, Corpus, DownstreamTask, FinetuneConfig, GradCheckConfig,
    PretrainConfig, PretrainState, RunDir,
};
use eegfm::{Checkpoint, Model, ModelConfig, TaskKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn tiny(seed: u64) -> Model {
    Model::new(ModelConfig::tiny(), seed).unwrap()
}

// 1 ------------------------------------------------------------------------

fn leakage() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut violations = 0;
    let mut insensitive = 0;
    let mut masked_total = 0;
    for kind in TaskKind::ALL {
        for trial in 0..100 {
            let model = tiny(rng.random());
            let (b, t) = (2, rng.random_range(3..=5));
            let batch = random_batch(&mut rng, b, t, 4, true);
            let plans = Model::sample_plans(&batch, kind, rng.random()).unwrap();
            let base = model.pretrain_forward_with(&batch, &plans).unwrap().pred;

            // Masked patches of each sample; the future of a random step under GPT.
            let cut = rng.random_range(0..t - 1);
            let mut hidden = Vec::new();
            let mut visible = Vec::new();
            for (bi, plan) in plans.iter().enumerate() {
                for ti in 0..t {
                    for ci in 0..batch.valid_channels[bi] {
                        let masked = match kind {
                            TaskKind::Gpt => ti > cut,
                            _ => plan.is_masked(ti, ci),
                        };
                        if masked { hidden.push((bi, ti, ci)) } else { visible.push((bi, ti, ci)) }
                    }
                }
            }
            masked_total += hidden.len();
            let mut pert = batch.clone();
            for &(bi, ti, ci) in &hidden {
                perturb(&mut rng, &mut pert, bi, ti, ci);
            }
            let out = model.pretrain_forward_with(&pert, &plans).unwrap().pred;
            let unchanged = match kind {
                TaskKind::Gpt => (0..b).all(|bi| (0..=cut).all(|ti| {
                    out.slice(ndarray::s![bi, ti, .., ..]) == base.slice(ndarray::s![bi, ti, .., ..])
                })),
                _ => out == base,
            };
            if !unchanged {
                violations += 1;
            }
            // Control: touching a visible patch must move some output.
            if trial % 10 == 0 {
                let &(bi, ti, ci) = &visible[rng.random_range(0..visible.len())];
                let mut ctrl = batch.clone();
                perturb(&mut rng, &mut ctrl, bi, ti, ci);
                if model.pretrain_forward_with(&ctrl, &plans).unwrap().pred == base {
                    insensitive += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        violations == 0 && insensitive == 0 && elapsed < Duration::from_secs(120),
        format!(
            "300 triples, {masked_total} masked patches perturbed, {violations} outputs changed, \
             {insensitive} insensitive controls, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn causal() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut violations = 0;
    let mut insensitive = 0;
    for _ in 0..100 {
        let model = tiny(rng.random());
        let t = rng.random_range(2..=6);
        let batch = random_batch(&mut rng, 2, t, 3, true);
        let plans = Model::sample_plans(&batch, TaskKind::Gpt, 0).unwrap();
        let base = model.pretrain_forward_with(&batch, &plans).unwrap().pred;
        let slot = rng.random_range(0..t - 1);
        let mut pert = batch.clone();
        for bi in 0..2 {
            for ti in slot + 1..t {
                for ci in 0..batch.valid_channels[bi] {
                    perturb(&mut rng, &mut pert, bi, ti, ci);
                }
            }
        }
        let out = model.pretrain_forward_with(&pert, &plans).unwrap().pred;
        let head = ndarray::s![.., 0..=slot, .., ..];
        if out.slice(head) != base.slice(head) {
            violations += 1;
        }
        let mut ctrl = batch.clone();
        perturb(&mut rng, &mut ctrl, 0, slot, 0);
        if model.pretrain_forward_with(&ctrl, &plans).unwrap().pred.slice(head) == base.slice(head) {
            insensitive += 1;
        }
    }
    outcome(
        violations == 0 && insensitive == 0,
        format!("100 trials, {violations} past outputs changed by future inputs, {insensitive} insensitive controls"),
    )
}

// 3 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut model = tiny(303);
    model.register_task("three", 3).unwrap();
    model.register_task("two", 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let batch = random_batch(&mut rng, 2, 3, 3, true);
    let modules: BTreeSet<String> = model
        .store()
        .entries()
        .iter()
        .map(|e| e.path.split('.').next().unwrap().to_string())
        .collect();
    let mut covered = BTreeSet::new();
    let mut worst = (0.0f64, String::new());
    let mut n = 0;
    let mut ok = true;
    for (i, kind) in TaskKind::ALL.into_iter().enumerate() {
        let cfg = GradCheckConfig {
            n_params: 50,
            seed: i as u64,
            kind,
            ..GradCheckConfig::default()
        };
        let report = grad_check(&model, &batch, &cfg).unwrap();
        ok &= report.passed;
        n += report.entries.len();
        for e in &report.entries {
            covered.insert(e.path.split('.').next().unwrap().to_string());
        }
        if report.max_rel_err > worst.0 {
            worst = (report.max_rel_err, report.worst_path.clone());
        }
    }
    let elapsed = start.elapsed();
    outcome(
        ok && covered == modules && worst.0 < 1e-4 && elapsed < Duration::from_secs(300),
        format!(
            "{n} parameters over modules {covered:?} (of {}), max rel err {:.2e} at {}, {:.1}s",
            modules.len(),
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn spectral() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_fft = 0.0f64;
    let mut worst_psd = 0.0f64;
    for p in [8usize, 64, 256] {
        let per = Periodogram::new(p).unwrap();
        let w = hann(p).unwrap();
        let energy: f64 = w.iter().map(|v| v * v).sum();
        for _ in 0..100 {
            let x: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let fast = per.transform(&x).unwrap();
            let slow = dft_oracle(&x);
            let scale = slow.iter().map(|z| z.norm()).fold(0.0, f64::max);
            for (a, b) in fast.iter().zip(&slow) {
                worst_fft = worst_fft.max((a - b).norm() / scale);
            }
            let xw: Vec<f64> = x.iter().zip(&w).map(|(a, b)| a * b).collect();
            let slow_w = dft_oracle(&xw);
            let psd = per.psd_log(&x).unwrap();
            for (k, got) in psd.bins.iter().enumerate() {
                let want = (slow_w[k].norm_sqr() / energy).max(1e-10).log10();
                worst_psd = worst_psd.max((got - want).abs() / want.abs().max(1.0));
            }
        }
    }
    outcome(
        worst_fft < 1e-6 && worst_psd < 1e-6,
        format!("P in {{8, 64, 256}} x 100 patches, transform rel err {worst_fft:.2e}, log-PSD rel err {worst_psd:.2e}"),
    )
}

// 5 ------------------------------------------------------------------------

fn rope_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    for _ in 0..200 {
        let d = 2 * rng.random_range(1..=32);
        let q: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let k: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for delta in [1usize, 5, 17] {
            let m = rng.random_range(0..=2048 - delta);
            let n = rng.random_range(0..=2048 - delta);
            let a = dot(&rope(&q, m).unwrap(), &rope(&k, n).unwrap());
            let b = dot(&rope(&q, m + delta).unwrap(), &rope(&k, n + delta).unwrap());
            let scale = dot(&q, &q).sqrt() * dot(&k, &k).sqrt();
            worst = worst.max((a - b).abs() / scale);
        }
    }
    outcome(worst < 1e-6, format!("200 vector pairs x offsets {{1, 5, 17}}, max rel deviation {worst:.2e}"))
}

// 6 ------------------------------------------------------------------------

fn loss_oracles() -> Outcome {
    let uniform = eegfm::Mat::zeros((4, 10));
    let dt = loss_dt(&uniform, &[0, 3, 7, 9]).unwrap();
    let total = pretrain_total(1.0, 1.0, 1.0, 1.0, &LossWeights::default());
    let w = class_weights(&[9.0, 1.0]).unwrap();
    let ok = (dt - 10f64.ln()).abs() <= 1e-9
        && (total - 1.0).abs() <= 1e-12
        && (w[0] - 0.5).abs() <= 1e-12
        && (w[1] - 1.5).abs() <= 1e-12;
    outcome(ok, format!("L_dt(uniform) = {dt:.12}, total(1,1,1,1) = {total:.15}, class weights {w:?}"))
}

// 7 ------------------------------------------------------------------------

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(2..=200);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..12) as f64 / 11.0).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in (0..n).filter(|&i| labels[i]) {
            for j in (0..n).filter(|&j| !labels[j]) {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((auroc(&scores, &labels).unwrap() - wins / pairs).abs());
    }
    let cm = ConfusionMatrix::from_counts(vec![vec![8, 2], vec![4, 6]]).unwrap();
    let kappa = cohens_kappa(&cm).unwrap();
    let f1 = weighted_f1(&cm).unwrap();
    let f1_hand = (8.0 / 11.0 + 2.0 / 3.0) / 2.0;
    let ok = worst < 1e-12 && (kappa - 0.4).abs() < 1e-12 && (f1 - f1_hand).abs() < 1e-12;
    outcome(
        ok,
        format!("AUROC vs pairwise win rate max diff {worst:.1e} over 200 instances, kappa {kappa:.12}, weighted F1 {f1:.12}"),
    )
}

// 8, 9, 10 -----------------------------------------------------------------

const DESK_SEED: u64 = 8;
/// Peak finetuning rate at desk scale; the library default plateaus on this
/// tiny model within 10 epochs.
const DESK_FINETUNE_LR: f64 = 1e-3;

fn desk_pretrain_config() -> PretrainConfig {
    PretrainConfig {
        steps: 300,
        batch_size: 8,
        window: 6,
        seed: DESK_SEED,
        ..PretrainConfig::default()
    }
}

fn desk_finetune_config(epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        epochs,
        batch_size: 8,
        peak_lr: DESK_FINETUNE_LR,
        seed: DESK_SEED,
        ..FinetuneConfig::default()
    }
}

struct DeskRun {
    pretrain_secs: f64,
    ratio: f64,
    finetune_secs: f64,
    single_best: f64,
    single_epoch: usize,
    multi_scores: Vec<(String, f64)>,
    logs: Vec<Vec<u8>>,
}

fn desk_run() -> DeskRun {
    let dir = tempfile::tempdir().unwrap();
    let sessions = synth_corpus(&[0, 1, 2], 20, 1);
    let corpus = Corpus::from_sessions(&sessions).unwrap();
    let mut model = tiny(DESK_SEED);
    let cfg = desk_pretrain_config();

    let run = RunDir::create(dir.path().join("pretrain")).unwrap();
    let t0 = Instant::now();
    let mut state = PretrainState::fresh(&model, &cfg);
    let report = pretrain(&mut model, &corpus, &cfg, &mut state, Some(&run)).unwrap();
    let pretrain_secs = t0.elapsed().as_secs_f64();
    let s = smoothed(&report.losses(), 30);
    let ratio = s[s.len() - 1] / s[0];
    let mut logs = vec![fs::read(run.steps_log()).unwrap()];

    let task = DownstreamTask::from_sessions("synth3", &sessions, 6, 0.2, DESK_SEED).unwrap();
    let mut single = model.clone();
    let run1 = RunDir::create(dir.path().join("single")).unwrap();
    let t1 = Instant::now();
    let rep = finetune(&mut single, std::slice::from_ref(&task), &desk_finetune_config(10), Some(&run1)).unwrap();
    let finetune_secs = t1.elapsed().as_secs_f64();
    logs.push(fs::read(run1.steps_log()).unwrap());

    let extra = synth_corpus(&[3, 4], 20, 2);
    let task_b = DownstreamTask::from_sessions("synth2", &extra, 6, 0.2, DESK_SEED).unwrap();
    let mut multi = model.clone();
    let run2 = RunDir::create(dir.path().join("multi")).unwrap();
    let mrep = finetune(&mut multi, &[task, task_b], &desk_finetune_config(5), Some(&run2)).unwrap();
    logs.push(fs::read(run2.steps_log()).unwrap());
    assert_eq!(read_step_log(run2.steps_log()).unwrap(), mrep.history);

    DeskRun {
        pretrain_secs,
        ratio,
        finetune_secs,
        single_best: rep.best_score,
        single_epoch: rep.best_epoch,
        multi_scores: mrep
            .best()
            .reports
            .iter()
            .map(|r| (r.task.clone(), r.balanced_accuracy))
            .collect(),
        logs,
    }
}

fn desk_pretraining(r: &DeskRun) -> Outcome {
    outcome(
        r.ratio <= 0.7 && r.pretrain_secs < 600.0,
        format!("smoothed loss last/first = {:.3} (window 30), {:.1}s", r.ratio, r.pretrain_secs),
    )
}

fn desk_finetuning(r: &DeskRun) -> Outcome {
    let multi_ok = r.multi_scores.len() == 2 && r.multi_scores.iter().all(|(_, s)| *s >= 0.75);
    outcome(
        r.single_best >= 0.8 && r.finetune_secs < 600.0 && multi_ok,
        format!(
            "single-task val balanced accuracy {:.3} (epoch {}), {:.1}s; multi-task {:?}",
            r.single_best,
            r.single_epoch + 1,
            r.finetune_secs,
            r.multi_scores
        ),
    )
}

fn determinism(a: &DeskRun, b: &DeskRun) -> Outcome {
    let same = a.logs == b.logs;
    let lines: usize = a.logs.iter().map(|l| l.iter().filter(|&&c| c == b'\n').count()).sum();
    outcome(same && lines > 0, format!("{lines} logged steps over 3 runs, byte-identical: {same}"))
}

// 11 -----------------------------------------------------------------------

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut notes = Vec::new();

    let sessions = synth_corpus(&[0, 1], 2, 11);
    let mut sessions_ok = true;
    for (i, s) in sessions.iter().enumerate() {
        let path = dir.path().join(format!("session-{i}"));
        save_session(s, &path).unwrap();
        sessions_ok &= load_session(&path).unwrap() == *s;
    }
    notes.push(format!("sessions {sessions_ok}"));

    let mut model = tiny(11);
    model.register_task("x", 3).unwrap();
    let ck = model.to_checkpoint(7);
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let reloaded = Model::from_checkpoint(&back).unwrap();
    let ck_ok = back == ck
        && reloaded.store().entries().iter().zip(model.store().entries()).all(|(a, b)| {
            a.path == b.path && a.value.iter().zip(b.value.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && reloaded.tasks() == model.tasks();
    notes.push(format!("checkpoint {ck_ok}"));

    let corpus = Corpus::from_sessions(&sessions).unwrap();
    let cfg = PretrainConfig {
        steps: 24,
        batch_size: 4,
        window: 4,
        peak_lr: 1e-3,
        seed: 11,
        checkpoint_every: 10,
        ..PretrainConfig::default()
    };
    let mut full_model = tiny(12);
    let mut state = PretrainState::fresh(&full_model, &cfg);
    let full = pretrain(&mut full_model, &corpus, &cfg, &mut state, Some(&RunDir::create(dir.path().join("a")).unwrap()))
        .unwrap()
        .losses();
    let mid = Checkpoint::load(dir.path().join("a/checkpoints/step-000010.ckpt")).unwrap();
    let (mut resumed, mut rstate) = PretrainState::from_checkpoint(&mid).unwrap();
    let tail = pretrain(&mut resumed, &corpus, &cfg, &mut rstate, None).unwrap().losses();
    let resume_ok = tail.len() == 14
        && tail.iter().zip(&full[10..]).all(|(a, b)| a.to_bits() == b.to_bits())
        && resumed.store().entries().iter().zip(full_model.store().entries()).all(|(a, b)| a.value == b.value);
    notes.push(format!("resume from step 10 of 24 {resume_ok}"));

    outcome(sessions_ok && ck_ok && resume_ok, notes.join(", "))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "leakage invariant", leakage());
    report(2, "causal invariant", causal());
    report(3, "gradient check", gradients());
    report(4, "spectral oracle", spectral());
    report(5, "rope relative position", rope_identity());
    report(6, "loss oracles", loss_oracles());
    report(7, "metric oracles", metric_oracles());
    let first = desk_run();
    report(8, "desk pretraining", desk_pretraining(&first));
    report(9, "desk finetuning", desk_finetuning(&first));
    let second = desk_run();
    report(10, "determinism", determinism(&first, &second));
    report(11, "round trips", round_trips());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    println!("acceptance: {}/{} passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
