//! Scratch probe: inspect linked tracks against ground truth after a short
//! tpn-mode training run.

use tubedet::config::{PipelineMode, RunConfig};
use tubedet::data::{generate, gt_frame_tracks, split_clips, SynthConfig};
use tubedet::linking::st_iou;
use tubedet::train::{detect_tracks, group_by_video, train};

fn main() -> anyhow::Result<()> {
    let cfg = RunConfig {
        mode: PipelineMode::Tpn,
        epochs: 5,
        tpn_pretrain_epochs: 3,
        base_lr: 0.001,
        seed: 0,
        ..RunConfig::default()
    };
    cfg.validate()?;
    let synth = SynthConfig { num_videos: 20, max_actors: 1, seed: 7, ..SynthConfig::default() };
    let videos = generate(&synth)?;
    let gt = gt_frame_tracks(&videos);
    let mut clips = Vec::new();
    for v in &videos {
        clips.extend(split_clips(v, cfg.frames_per_clip, cfg.clip_stride)?);
    }
    let grouped = group_by_video(clips);
    let (model, _) = train(&cfg, &grouped)?;
    let tracks = detect_tracks(&model, &cfg, &grouped)?;
    println!("gt tracks {} detected tracks {}", gt.len(), tracks.len());

    for vid in ["video000", "video001", "video002"] {
        let gts: Vec<_> = gt.iter().filter(|t| t.video == vid).collect();
        let mut dets: Vec<_> = tracks.iter().filter(|t| t.video == vid).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        for g in &gts {
            println!("{vid} gt class {} frames {}..{}", g.class, g.boxes.keys().min().unwrap(), g.boxes.keys().max().unwrap());
        }
        for d in dets.iter().take(6) {
            let best: f64 = gts
                .iter()
                .map(|g| st_iou(d, g))
                .fold(0.0, f64::max);
            println!(
                "  det class {} score {:.4} frames {}..{} ({} boxes) best st_iou {:.3}",
                d.class,
                d.score,
                d.boxes.keys().min().unwrap(),
                d.boxes.keys().max().unwrap(),
                d.boxes.len(),
                best
            );
        }
    }
    Ok(())
}
