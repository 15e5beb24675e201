//! Scratch probe: distribution of best proposal/anchor IoU against gt tubelets
//! after TPN pretraining, to check whether label_proposals can ever fire.

use tubedet::config::{PipelineMode, RunConfig};
use tubedet::data::{generate, split_clips, SynthConfig};
use tubedet::geometry::{generate_anchors, tubelet_iou};
use tubedet::tpn::propose;
use tubedet::train::{group_by_video, train};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let pretrain: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.001);

    let cfg = RunConfig {
        mode: PipelineMode::Tpn,
        epochs,
        tpn_pretrain_epochs: pretrain,
        base_lr: lr,
        seed: 0,
        ..RunConfig::default()
    };
    cfg.validate()?;
    let synth = SynthConfig { num_videos: 20, max_actors: 1, seed: 7, ..SynthConfig::default() };
    let mut clips = Vec::new();
    for v in generate(&synth)? {
        clips.extend(split_clips(&v, cfg.frames_per_clip, cfg.clip_stride)?);
    }
    let videos = group_by_video(clips.clone());
    let (model, report) = train(&cfg, &videos)?;
    for l in &report.epoch_losses {
        eprintln!("epoch {} {} tpn {:.4}", l.epoch, l.phase, l.tpn);
    }

    let grid = cfg.anchor_grid();
    let pcfg = cfg.proposal_config();
    let mut best_raw = Vec::new();
    let mut best_prop = Vec::new();
    let mut n_gt = 0usize;
    for clip in clips.iter().take(12) {
        let (out, _, _) = model.tpn.forward(&clip.frames, &grid)?;
        let anchors = generate_anchors(&grid);
        let mut props = propose(&out, &grid, &pcfg)?;
        for p in &mut props {
            p.clip_index = clip.clip_index;
        }
        for (_, gt) in &clip.gts {
            n_gt += 1;
            let mut br = 0.0f64;
            for a in &anchors {
                br = br.max(tubelet_iou(a, gt)?);
            }
            let mut bp = 0.0f64;
            for p in &props {
                bp = bp.max(tubelet_iou(p, gt)?);
            }
            best_raw.push(br);
            best_prop.push(bp);
        }
    }
    {
        let clip = &clips[0];
        let (out, _, _) = model.tpn.forward(&clip.frames, &grid)?;
        let mut props = propose(&out, &grid, &pcfg)?;
        props.sort_by(|a, b| b.actionness.partial_cmp(&a.actionness).unwrap());
        let gt = &clip.gts[0].1;
        println!("gt boxes: {:?} .. {:?}", gt.boxes[0], gt.boxes[gt.boxes.len() - 1]);
        for (r, p) in props.iter().enumerate().take(10) {
            println!(
                "rank {r} act {:.4} iou {:.3} box0 {:?}",
                p.actionness,
                tubelet_iou(p, gt)?,
                p.boxes[0]
            );
        }
        let (bi, bv) = props
            .iter()
            .enumerate()
            .map(|(i, p)| (i, tubelet_iou(p, gt).unwrap()))
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        println!("best iou {bv:.3} at actionness rank {bi} act {:.4}", props[bi].actionness);
    }
    best_raw.sort_by(|a, b| a.partial_cmp(b).unwrap());
    best_prop.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let stats = |v: &[f64]| {
        let n = v.len();
        (v[0], v[n / 2], v[n - 1], v.iter().sum::<f64>() / n as f64)
    };
    let (rmin, rmed, rmax, rmean) = stats(&best_raw);
    let (pmin, pmed, pmax, pmean) = stats(&best_prop);
    println!("gts {n_gt}");
    println!("anchor best iou  min {rmin:.3} med {rmed:.3} max {rmax:.3} mean {rmean:.3}");
    println!("proposal best iou min {pmin:.3} med {pmed:.3} max {pmax:.3} mean {pmean:.3}");
    println!(
        "proposals above 0.5: {}/{}",
        best_prop.iter().filter(|&&x| x > 0.5).count(),
        best_prop.len()
    );
    Ok(())
}
