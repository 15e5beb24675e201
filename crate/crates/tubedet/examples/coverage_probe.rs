//! Scratch probe: best static-anchor IoU against gt tubelets for candidate
//! anchor scale sets and actor speed caps. No training involved.

use tubedet::data::{generate, split_clips, SynthConfig};
use tubedet::geometry::{generate_anchors, tubelet_iou, AnchorGrid};

fn main() -> anyhow::Result<()> {
    for &max_speed in &[2.5f64, 1.5, 1.0] {
        for scales in [vec![8.0, 16.0, 32.0], vec![12.0, 16.0, 22.0], vec![10.0, 14.0, 19.0]] {
            let synth = SynthConfig {
                num_videos: 20,
                max_actors: 1,
                max_speed,
                seed: 7,
                ..SynthConfig::default()
            };
            let grid = AnchorGrid {
                feature_height: 8,
                feature_width: 8,
                stride: 8,
                scales: scales.clone(),
                aspect_ratios: vec![0.5, 1.0, 2.0],
                t: 8,
            };
            let anchors = generate_anchors(&grid);
            let mut best = Vec::new();
            for v in generate(&synth)? {
                for clip in split_clips(&v, 8, 8)? {
                    for (_, gt) in &clip.gts {
                        let mut b = 0.0f64;
                        for a in &anchors {
                            b = b.max(tubelet_iou(a, gt)?);
                        }
                        best.push(b);
                    }
                }
            }
            best.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = best.len();
            let above = best.iter().filter(|&&x| x > 0.5).count();
            println!(
                "speed<={max_speed} scales {scales:?}: min {:.3} med {:.3} mean {:.3} above0.5 {above}/{n}",
                best[0],
                best[n / 2],
                best.iter().sum::<f64>() / n as f64
            );
        }
    }
    Ok(())
}
