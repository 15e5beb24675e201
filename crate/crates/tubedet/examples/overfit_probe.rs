//! Scratch probe for the synthetic overfit target; not part of the test suite.
use std::time::Instant;
use tubedet::config::{PipelineMode, RunConfig};
use tubedet::data::{generate, gt_frame_tracks, split_clips, SynthConfig};
use tubedet::linking::video_map;
use tubedet::train::{detect_tracks, group_by_video, train, VideoClips};

fn clips_for(cfg: &RunConfig, synth: &SynthConfig) -> (Vec<VideoClips>, Vec<tubedet::linking::FrameTrack>) {
    let videos = generate(synth).unwrap();
    let clips: Vec<_> = videos
        .iter()
        .flat_map(|v| split_clips(v, cfg.frames_per_clip, cfg.clip_stride).unwrap())
        .collect();
    (group_by_video(clips), gt_frame_tracks(&videos))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let get = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let epochs = get(1, 16.0) as usize;
    let pretrain = get(2, 8.0) as usize;
    let lr = get(3, 0.005);
    let cap = get(4, 32.0) as usize;
    let mode = match args.get(5).map(|s| s.as_str()) {
        Some("tpn") => PipelineMode::Tpn,
        Some("short") => PipelineMode::Short,
        _ => PipelineMode::Full,
    };
    let run_seed = get(6, 0.0) as u64;
    let synth_seed = get(7, 7.0) as u64;
    let max_speed = get(8, 2.5);
    let min_size = get(9, 10.0);
    let clip_norm = get(10, 5.0);
    let window_radius = get(11, 4.0) as usize;
    let minibatch = get(12, 32.0) as usize;
    let freeze = get(13, 0.0) != 0.0;
    let dropout = get(14, 0.5);
    let max_actors = get(15, 1.0) as usize;
    let cfg = RunConfig {
        mode,
        synth: SynthConfig {
            num_videos: 20,
            frames_per_video: 16,
            image_size: 64,
            num_classes: 3,
            max_actors,
            min_actor_size: min_size,
            max_speed,
            seed: synth_seed,
            ..SynthConfig::default()
        },
        epochs,
        tpn_pretrain_epochs: pretrain,
        base_lr: lr,
        warmup_start_lr: lr / 10.0,
        proposal_cap: cap,
        minibatch_size: minibatch,
        clip_grad_norm: clip_norm,
        window_radius,
        seed: run_seed,
        freeze_tpn_in_joint: freeze,
        dropout,
        ..RunConfig::default()
    };
    let t0 = Instant::now();
    let (train_videos, train_gt) = clips_for(&cfg, &cfg.synth);
    let heldout_synth = SynthConfig { num_videos: 10, seed: synth_seed + 1000, ..cfg.synth.clone() };
    let (held_videos, held_gt) = clips_for(&cfg, &heldout_synth);
    let (model, report) = train(&cfg, &train_videos).unwrap();
    let train_time = t0.elapsed();
    for e in &report.epoch_losses {
        println!("epoch {} {} tpn {:.4} cls {:.4}", e.epoch, e.phase, e.tpn, e.cls);
    }
    let tr_tracks = detect_tracks(&model, &cfg, &train_videos).unwrap();
    let tr = video_map(&tr_tracks, &train_gt, 0.5).unwrap();
    let he_tracks = detect_tracks(&model, &cfg, &held_videos).unwrap();
    let he = video_map(&he_tracks, &held_gt, 0.5).unwrap();
    if std::env::var("PROBE_DIAG").is_ok() {
        for (name, tracks, gts) in
            [("train", &tr_tracks, &train_gt), ("held", &he_tracks, &held_gt)]
        {
            for g in gts.iter() {
                let best_any = tracks
                    .iter()
                    .filter(|t| t.video == g.video)
                    .map(|t| tubedet::linking::st_iou(t, g))
                    .fold(0.0f64, f64::max);
                let best_cls = tracks
                    .iter()
                    .filter(|t| t.video == g.video && t.class == g.class)
                    .map(|t| tubedet::linking::st_iou(t, g))
                    .fold(0.0f64, f64::max);
                if best_cls <= 0.5 {
                    println!(
                        "DIAG {name} {} class {} best_any {:.3} best_correct_class {:.3}",
                        g.video, g.class, best_any, best_cls
                    );
                }
            }
        }
        let aps = |r: &tubedet::linking::MapResult| {
            r.per_class.iter().map(|c| format!("{}:{:.3}", c.class, c.ap)).collect::<Vec<_>>().join(" ")
        };
        println!("DIAG train per-class {}", aps(&tr));
        println!("DIAG held per-class {}", aps(&he));
        for (name, vids) in [("train", &train_videos), ("held", &held_videos)] {
            let mut on = Vec::new();
            let mut off = Vec::new();
            for v in vids.iter() {
                for (per_clip, clip) in
                    tubedet::train::detect_video(&model, &cfg, v).unwrap().iter().zip(&v.clips)
                {
                    for p in per_clip {
                        let best = clip
                            .gts
                            .iter()
                            .map(|(_, g)| tubedet::geometry::tubelet_iou(p, g).unwrap())
                            .fold(0.0f64, f64::max);
                        if best > 0.5 {
                            on.push(p.actionness);
                        } else if best < 0.1 {
                            off.push(p.actionness);
                        }
                    }
                }
            }
            let stats = |v: &mut Vec<f64>| {
                v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if v.is_empty() {
                    (0.0, 0.0, 0.0)
                } else {
                    (v[v.len() / 2], v[v.len() * 9 / 10], v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            let (on_med, on_p90, on_mean) = stats(&mut on);
            let (off_med, off_p90, off_mean) = stats(&mut off);
            println!(
                "DIAG {name} actionness on-gt med {on_med:.3} p90 {on_p90:.3} mean {on_mean:.3} ({}) | off-gt med {off_med:.3} p90 {off_p90:.3} mean {off_mean:.3} ({})",
                on.len(),
                off.len()
            );
        }
    }
    println!(
        "RESULT mode {:?} seed {} train mAP {:.4} heldout mAP {:.4} train_time {:.1}s",
        cfg.mode,
        run_seed,
        tr.mean,
        he.mean,
        train_time.as_secs_f64()
    );
}
