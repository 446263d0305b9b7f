//! Pretrains and finetunes the tiny model on a small synthetic corpus.
//!
//! Usage: `cargo run --release --example desk_run -- [seed] [pretrain_lr] [finetune_lr...]`
//!
//! Every finetuning learning rate starts from the same pretrained model.

use std::time::Instant;

use eegfm::eegdata::{synth_session, Session, SynthSpec, TaskCategory};
use eegfm::train::{finetune, pretrain, smoothed, Corpus, DownstreamTask, FinetuneConfig, PretrainConfig, PretrainState,
    FINETUNE_PEAK_LR, PRETRAIN_PEAK_LR};
use eegfm::{Model, ModelConfig};

fn corpus(classes: &[usize], sessions: usize, seed: u64) -> Vec<Session> {
    let channels: Vec<usize> = (0..8).map(|i| 3 * i + 1).collect();
    let mut out = Vec::new();
    for &class in classes {
        for s in 0..sessions {
            let mut spec = SynthSpec::new(class, channels.clone(), 30, seed + 1000 * class as u64 + s as u64);
            spec.task_category = TaskCategory::from_index(class % TaskCategory::COUNT).unwrap();
            out.push(synth_session(&spec).unwrap());
        }
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(8, |a| a.parse().unwrap());
    let lrs: Vec<f64> = args.iter().skip(1).map(|a| a.parse().unwrap()).collect();
    let sessions = corpus(&[0, 1, 2], 20, 1);
    let mut model = Model::new(ModelConfig::tiny(), seed).unwrap();
    let cfg = PretrainConfig {
        seed,
        peak_lr: lrs.first().copied().unwrap_or(PRETRAIN_PEAK_LR),
        ..PretrainConfig::default()
    };
    let t0 = Instant::now();
    let mut state = PretrainState::fresh(&model, &cfg);
    let report = pretrain(&mut model, &Corpus::from_sessions(&sessions).unwrap(), &cfg, &mut state, None).unwrap();
    let s = smoothed(&report.losses(), 30);
    println!("pretrain {:.1}s smoothed {:?}", t0.elapsed().as_secs_f64(), s);
    println!("ratio {:.3}", s.last().unwrap() / s[0]);

    let task = DownstreamTask::from_sessions("synth3", &sessions, 6, 0.2, seed).unwrap();
    let finetune_lrs = if lrs.len() > 1 { lrs[1..].to_vec() } else { vec![FINETUNE_PEAK_LR] };
    for lr in finetune_lrs {
        let t1 = Instant::now();
        let fcfg = FinetuneConfig {
            peak_lr: lr,
            seed,
            ..FinetuneConfig::default()
        };
        let mut m = model.clone();
        let rep = finetune(&mut m, std::slice::from_ref(&task), &fcfg, None).unwrap();
        let scores: Vec<String> = rep.epochs.iter().map(|e| format!("{:.3}", e.score)).collect();
        println!("finetune lr {lr:e} {:.1}s scores [{}]", t1.elapsed().as_secs_f64(), scores.join(", "));
    }
}
