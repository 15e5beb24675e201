//! Scratch probe: magnitudes along the pipeline after TPN pretraining.
use tubedet::config::{PipelineMode, RunConfig};
use tubedet::data::{generate, split_clips, SynthConfig};
use tubedet::short_term::str_forward;
use tubedet::tpn::propose;
use tubedet::train::{group_by_video, train};

fn stats(name: &str, v: &[f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let max = v.iter().cloned().fold(f64::MIN, f64::max);
    let min = v.iter().cloned().fold(f64::MAX, f64::min);
    let rms = (v.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    println!("{:24} mean {:>12.4} rms {:>12.4} min {:>12.4} max {:>12.4}", name, mean, rms, min, max);
}

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = RunConfig {
        mode: PipelineMode::Full,
        synth: SynthConfig { num_videos: 20, frames_per_video: 16, image_size: 64, num_classes: 3, max_actors: 1, seed: 7, ..SynthConfig::default() },
        epochs,
        tpn_pretrain_epochs: epochs - 1,
        base_lr: lr,
        warmup_start_lr: lr / 10.0,
        proposal_cap: 16,
        seed: 0,
        ..RunConfig::default()
    };
    let videos = generate(&cfg.synth).unwrap();
    let clips: Vec<_> = videos.iter().flat_map(|v| split_clips(v, 8, 8).unwrap()).collect();
    let grouped = group_by_video(clips);
    // pretrain-only model (last epoch joint to satisfy validation, lr tail tiny)
    let (model, report) = train(&cfg, &grouped).unwrap();
    for e in &report.epoch_losses {
        println!("epoch {} {} tpn {:.4} cls {:.4}", e.epoch, e.phase, e.tpn, e.cls);
    }
    let grid = cfg.anchor_grid();
    let (out, feature, _) = model.tpn.forward(&grouped[0].clips[0].frames, &grid).unwrap();
    stats("backbone feature", feature.values.data());
    stats("regression out", out.regression.data());
    stats("actionness logits", out.actionness_logits.data());
    let props = propose(&out, &grid, &cfg.proposal_config()).unwrap();
    println!("proposals: {}", props.len());
    let sp = model.short.as_ref().unwrap();
    let (o, _) = str_forward(sp, &feature, &props[0]).unwrap();
    stats("fused feature", o.fused.data());
    stats("attention", o.attention.values.data());
}
