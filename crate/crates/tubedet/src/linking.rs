//! Linking clip-level tubelets into video-level tracks and scoring
//! detections with frame-mAP and video-mAP.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::{box_iou, tubelet_iou, BBox, Tubelet};
use crate::tensor::Tensor;

/// A linked sequence of tubelets from consecutive clips, scored for one
/// class.
#[derive(Debug, Clone)]
pub struct VideoTrack {
    /// (clip index, tubelet), in increasing consecutive clip order.
    pub members: Vec<(usize, Tubelet)>,
    pub class: usize,
    /// Mean member class score for `class`.
    pub score: f64,
}

/// Per-class dynamic programming over clips: a path picks one tubelet per
/// clip over a contiguous clip range and is worth the sum of member class
/// scores plus link_iou_weight times the summed positional IoU of adjacent
/// members. The best path is extracted, its members removed, and the
/// process repeats until no members remain. With nonnegative scores and
/// weight the best path always spans every clip that still has members,
/// so spatially disjoint tubelets still link; their tracks just score low.
pub fn link_tubelets(
    per_clip: &[Vec<Tubelet>],
    link_iou_weight: f64,
    num_classes: usize,
) -> Result<Vec<VideoTrack>> {
    if per_clip.is_empty() {
        return Err(Error::invalid("link_tubelets", "no clips"));
    }
    for clip in per_clip {
        for t in clip {
            match &t.class_scores {
                Some(s) if s.len() == num_classes => {}
                Some(s) => {
                    return Err(Error::shape(
                        "link_tubelets",
                        format!("{} class scores, expected {}", s.len(), num_classes),
                    ))
                }
                None => return Err(Error::invalid("link_tubelets", "tubelet without class scores")),
            }
        }
    }
    let n_clips = per_clip.len();
    let mut tracks = Vec::new();
    for class in 0..num_classes {
        let score_of = |i: usize, j: usize| -> f64 {
            per_clip[i][j].class_scores.as_ref().expect("validated")[class]
        };
        let mut alive: Vec<Vec<bool>> = per_clip.iter().map(|c| vec![true; c.len()]).collect();
        loop {
            if alive.iter().all(|c| c.iter().all(|&a| !a)) {
                break;
            }
            // dp[i][j]: best path value ending at member (i, j)
            let mut dp: Vec<Vec<f64>> = per_clip.iter().map(|c| vec![f64::NEG_INFINITY; c.len()]).collect();
            let mut parent: Vec<Vec<Option<usize>>> = per_clip.iter().map(|c| vec![None; c.len()]).collect();
            for i in 0..n_clips {
                for j in 0..per_clip[i].len() {
                    if !alive[i][j] {
                        continue;
                    }
                    let fresh = score_of(i, j);
                    let mut best = fresh;
                    let mut from = None;
                    if i > 0 {
                        for k in 0..per_clip[i - 1].len() {
                            if !alive[i - 1][k] || dp[i - 1][k] == f64::NEG_INFINITY {
                                continue;
                            }
                            let iou = tubelet_iou(&per_clip[i - 1][k], &per_clip[i][j])?;
                            let v = dp[i - 1][k] + link_iou_weight * iou + fresh;
                            if v > best {
                                best = v;
                                from = Some(k);
                            }
                        }
                    }
                    dp[i][j] = best;
                    parent[i][j] = from;
                }
            }
            // best endpoint, ties to the earliest (clip, member)
            let mut end: Option<(usize, usize)> = None;
            for i in 0..n_clips {
                for j in 0..per_clip[i].len() {
                    if alive[i][j] && end.map_or(true, |(bi, bj)| dp[i][j] > dp[bi][bj]) {
                        end = Some((i, j));
                    }
                }
            }
            let (mut i, mut j) = end.expect("some member alive");
            let mut rev = Vec::new();
            loop {
                rev.push((i, per_clip[i][j].clone()));
                alive[i][j] = false;
                match parent[i][j] {
                    Some(k) if i > 0 => {
                        j = k;
                        i -= 1;
                    }
                    _ => break,
                }
            }
            rev.reverse();
            let score =
                rev.iter().map(|(_, t)| t.class_scores.as_ref().expect("validated")[class]).sum::<f64>()
                    / rev.len() as f64;
            tracks.push(VideoTrack { members: rev, class, score });
        }
    }
    Ok(tracks)
}

/// A video-level box sequence keyed by global frame index, for video-mAP.
#[derive(Debug, Clone)]
pub struct FrameTrack {
    pub video: String,
    pub class: usize,
    pub score: f64,
    pub boxes: BTreeMap<usize, BBox>,
}

impl FrameTrack {
    pub fn from_video_track(track: &VideoTrack, frames_per_clip: usize, video: &str) -> FrameTrack {
        let mut boxes = BTreeMap::new();
        for (clip, tubelet) in &track.members {
            for (t, b) in tubelet.boxes.iter().enumerate() {
                boxes.insert(clip * frames_per_clip + t, *b);
            }
        }
        FrameTrack { video: video.to_string(), class: track.class, score: track.score, boxes }
    }
}

/// Spatio-temporal IoU: mean per-frame box IoU over the union of the two
/// tracks' frames, frames covered by only one track counting 0.
pub fn st_iou(a: &FrameTrack, b: &FrameTrack) -> f64 {
    let frames: std::collections::BTreeSet<usize> =
        a.boxes.keys().chain(b.boxes.keys()).copied().collect();
    if frames.is_empty() {
        return 0.0;
    }
    let sum: f64 = frames
        .iter()
        .map(|f| match (a.boxes.get(f), b.boxes.get(f)) {
            (Some(x), Some(y)) => box_iou(x, y),
            _ => 0.0,
        })
        .sum();
    sum / frames.len() as f64
}

/// One per-frame detection or ground-truth box, for frame-mAP.
#[derive(Debug, Clone)]
pub struct Detection {
    pub video: String,
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAp {
    pub class: usize,
    pub ap: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub per_class: Vec<ClassAp>,
    pub mean: f64,
}

/// All-point interpolated average precision. `tp_flags` must be in
/// descending score order.
fn average_precision(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut recalls = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        if is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / num_gt as f64);
    }
    // right-to-left running max turns the raw curve into its interpolation
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..precisions.len() {
        if recalls[i] > prev_recall {
            ap += (recalls[i] - prev_recall) * precisions[i];
            prev_recall = recalls[i];
        }
    }
    ap
}

fn validate_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid("eval", format!("iou threshold {} outside (0,1)", delta)))
    }
}

/// Generic greedy matcher: detections in descending score order claim the
/// best still-unmatched ground truth with overlap strictly above delta.
fn match_and_ap<T, G>(
    dets: &mut Vec<(f64, T)>,
    gts: &[G],
    overlap: impl Fn(&T, &G) -> f64,
    delta: f64,
) -> f64 {
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for (_, det) in dets.iter() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let o = overlap(det, gt);
            if o > delta && best.map_or(true, |(_, bo)| o > bo) {
                best = Some((gi, o));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    average_precision(&flags, gts.len())
}

/// Video-mAP: per class, rank linked tracks by score and match them
/// one-to-one to unmatched ground-truth tracks of the same video with
/// spatio-temporal IoU strictly above delta; mean AP over classes that
/// have at least one ground truth.
pub fn video_map(tracks: &[FrameTrack], gts: &[FrameTrack], delta: f64) -> Result<MapResult> {
    validate_delta(delta)?;
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::invalid("video_map", "no ground-truth tracks"));
    }
    let mut per_class = Vec::new();
    for &class in &classes {
        let class_gts: Vec<&FrameTrack> = gts.iter().filter(|g| g.class == class).collect();
        let mut dets: Vec<(f64, &FrameTrack)> =
            tracks.iter().filter(|t| t.class == class).map(|t| (t.score, t)).collect();
        let ap = match_and_ap(
            &mut dets,
            &class_gts,
            |d, g| if d.video == g.video { st_iou(d, g) } else { 0.0 },
            delta,
        );
        per_class.push(ClassAp { class, ap, num_gt: class_gts.len() });
    }
    let mean = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapResult { per_class, mean })
}

/// Frame-mAP: the same protocol applied per frame with plain 2D box IoU.
pub fn frame_map(dets: &[Detection], gts: &[Detection], delta: f64) -> Result<MapResult> {
    validate_delta(delta)?;
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return Err(Error::invalid("frame_map", "no ground-truth boxes"));
    }
    let mut per_class = Vec::new();
    for &class in &classes {
        let class_gts: Vec<&Detection> = gts.iter().filter(|g| g.class == class).collect();
        let mut class_dets: Vec<(f64, &Detection)> =
            dets.iter().filter(|d| d.class == class).map(|d| (d.score, d)).collect();
        let ap = match_and_ap(
            &mut class_dets,
            &class_gts,
            |d, g| {
                if d.video == g.video && d.frame == g.frame {
                    box_iou(&d.bbox, &g.bbox)
                } else {
                    0.0
                }
            },
            delta,
        );
        per_class.push(ClassAp { class, ap, num_gt: class_gts.len() });
    }
    let mean = per_class.iter().map(|c| c.ap).sum::<f64>() / per_class.len() as f64;
    Ok(MapResult { per_class, mean })
}

/// Elementwise mean of two score matrices.
pub fn late_fuse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape("late_fuse", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (o, &bv) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o = (*o + bv) / 2.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tub(x: f64, scores: &[f64], clip: usize) -> Tubelet {
        let mut t = Tubelet::cuboid(BBox::new(x, 0.0, x + 10.0, 10.0), 2, 0.5, clip);
        t.class_scores = Some(scores.to_vec());
        t
    }

    #[test]
    fn single_clip_tracks() {
        let clips = vec![vec![tub(0.0, &[0.9, 0.1], 0), tub(30.0, &[0.2, 0.7], 0)]];
        let tracks = link_tubelets(&clips, 1.0, 2).unwrap();
        // per class, each tubelet becomes its own single-member track
        assert_eq!(tracks.len(), 4);
        for tr in &tracks {
            assert_eq!(tr.members.len(), 1);
        }
        let best = tracks.iter().find(|t| t.class == 0 && t.score == 0.9).unwrap();
        assert_eq!(best.members[0].1.boxes[0].x1, 0.0);
    }

    #[test]
    fn overlapping_tubelets_link() {
        let clips = vec![vec![tub(0.0, &[0.8], 0)], vec![tub(1.0, &[0.7], 1)]];
        // frame IoU 9/11 = 0.818: well above anything needed to join
        let tracks = link_tubelets(&clips, 1.0, 1).unwrap();
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].members.len(), 2);
        assert_eq!(tracks[0].members[0].0, 0);
        assert_eq!(tracks[0].members[1].0, 1);
        assert!((tracks[0].score - 0.75).abs() < 1e-12);
    }

    #[test]
    fn disjoint_tubelets_still_link_under_nonnegative_terms() {
        let clips = vec![vec![tub(0.0, &[0.8], 0)], vec![tub(40.0, &[0.7], 1)]];
        let tracks = link_tubelets(&clips, 5.0, 1).unwrap();
        // extending never lowers a nonnegative objective, so one long track
        assert_eq!(tracks.len(), 1);
        assert_eq!(tracks[0].members.len(), 2);
    }

    /// Exhaustive contiguous-path enumeration for the oracle.
    fn best_path_value(
        per_clip: &[Vec<Tubelet>],
        alive: &[Vec<bool>],
        w: f64,
        class: usize,
    ) -> f64 {
        fn extend(
            per_clip: &[Vec<Tubelet>],
            alive: &[Vec<bool>],
            w: f64,
            class: usize,
            i: usize,
            j: usize,
            value: f64,
            best: &mut f64,
        ) {
            *best = best.max(value);
            if i + 1 >= per_clip.len() {
                return;
            }
            for k in 0..per_clip[i + 1].len() {
                if !alive[i + 1][k] {
                    continue;
                }
                let iou = tubelet_iou(&per_clip[i][j], &per_clip[i + 1][k]).unwrap();
                let s = per_clip[i + 1][k].class_scores.as_ref().unwrap()[class];
                extend(per_clip, alive, w, class, i + 1, k, value + w * iou + s, best);
            }
        }
        let mut best = f64::NEG_INFINITY;
        for i in 0..per_clip.len() {
            for j in 0..per_clip[i].len() {
                if alive[i][j] {
                    let s = per_clip[i][j].class_scores.as_ref().unwrap()[class];
                    extend(per_clip, alive, w, class, i, j, s, &mut best);
                }
            }
        }
        best
    }

    #[test]
    fn linking_matches_path_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..60 {
            let n_clips = rng.gen_range(1..=4);
            let clips: Vec<Vec<Tubelet>> = (0..n_clips)
                .map(|ci| {
                    (0..rng.gen_range(1..=3))
                        .map(|_| tub(rng.gen_range(0.0..50.0), &[rng.gen::<f64>()], ci))
                        .collect()
                })
                .collect();
            let w = rng.gen_range(0.0..3.0);
            let tracks = link_tubelets(&clips, w, 1).unwrap();
            // replay greedy extraction against the exhaustive oracle
            let mut alive: Vec<Vec<bool>> = clips.iter().map(|c| vec![true; c.len()]).collect();
            for tr in &tracks {
                let want = best_path_value(&clips, &alive, w, 0);
                let mut got = 0.0;
                for (idx, (ci, t)) in tr.members.iter().enumerate() {
                    got += t.class_scores.as_ref().unwrap()[0];
                    if idx > 0 {
                        let (pci, pt) = &tr.members[idx - 1];
                        assert_eq!(pci + 1, *ci, "members not consecutive");
                        got += w * tubelet_iou(pt, t).unwrap();
                    }
                }
                assert!((got - want).abs() < 1e-9, "path value {} vs oracle {}", got, want);
                for (ci, t) in &tr.members {
                    let j = (0..clips[*ci].len())
                        .find(|&j| alive[*ci][j] && clips[*ci][j].boxes == t.boxes)
                        .unwrap();
                    alive[*ci][j] = false;
                }
            }
            // greedy extraction consumes every member exactly once
            assert!(alive.iter().all(|c| c.iter().all(|&a| !a)));
        }
    }

    fn ft(video: &str, class: usize, score: f64, frames: &[(usize, BBox)]) -> FrameTrack {
        FrameTrack {
            video: video.to_string(),
            class,
            score,
            boxes: frames.iter().cloned().collect(),
        }
    }

    fn unit_box(x: f64) -> BBox {
        BBox::new(x, 0.0, x + 10.0, 10.0)
    }

    #[test]
    fn st_iou_union_semantics() {
        let a = ft("v", 0, 1.0, &[(0, unit_box(0.0)), (1, unit_box(0.0))]);
        let b = ft("v", 0, 1.0, &[(0, unit_box(0.0)), (1, unit_box(0.0)), (2, unit_box(0.0))]);
        // frames 0,1 match perfectly; frame 2 is one-sided
        assert!((st_iou(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(st_iou(&a, &a), 1.0);
    }

    #[test]
    fn video_map_examples() {
        let gts = vec![ft("v", 0, 0.0, &[(0, unit_box(0.0))]), ft("v", 1, 0.0, &[(0, unit_box(30.0))])];
        // exact detections
        let dets = vec![ft("v", 0, 0.9, &[(0, unit_box(0.0))]), ft("v", 1, 0.8, &[(0, unit_box(30.0))])];
        let r = video_map(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.mean, 1.0);
        // no detections
        let r = video_map(&[], &gts, 0.5).unwrap();
        assert_eq!(r.mean, 0.0);
        // [TP, FP] vs [FP, TP]
        let one_gt = vec![ft("v", 0, 0.0, &[(0, unit_box(0.0))])];
        let tp_first = vec![
            ft("v", 0, 0.9, &[(0, unit_box(0.0))]),
            ft("v", 0, 0.5, &[(0, unit_box(40.0))]),
        ];
        assert_eq!(video_map(&tp_first, &one_gt, 0.5).unwrap().mean, 1.0);
        let fp_first = vec![
            ft("v", 0, 0.9, &[(0, unit_box(40.0))]),
            ft("v", 0, 0.5, &[(0, unit_box(0.0))]),
        ];
        assert_eq!(video_map(&fp_first, &one_gt, 0.5).unwrap().mean, 0.5);
        // bad threshold rejected
        assert!(video_map(&tp_first, &one_gt, 0.0).is_err());
        assert!(video_map(&tp_first, &one_gt, 1.0).is_err());
    }

    fn det(video: &str, frame: usize, class: usize, score: f64, b: BBox) -> Detection {
        Detection { video: video.to_string(), frame, class, score, bbox: b }
    }

    #[test]
    fn frame_map_examples() {
        let gts = vec![det("v", 0, 0, 0.0, unit_box(0.0)), det("v", 1, 0, 0.0, unit_box(5.0))];
        let dets = vec![det("v", 0, 0, 0.9, unit_box(0.0)), det("v", 1, 0, 0.8, unit_box(5.0))];
        assert_eq!(frame_map(&dets, &gts, 0.5).unwrap().mean, 1.0);

        // IoU exactly delta is a miss (strict inequality)
        let gts = vec![det("v", 0, 0, 0.0, unit_box(0.0))];
        let half = det("v", 0, 0, 0.9, BBox::new(0.0, 0.0, 10.0, 5.0)); // IoU 0.5
        assert!((box_iou(&half.bbox, &gts[0].bbox) - 0.5).abs() < 1e-12);
        assert_eq!(frame_map(&[half.clone()], &gts, 0.5).unwrap().mean, 0.0);
        assert_eq!(frame_map(&[half], &gts, 0.49).unwrap().mean, 1.0);

        // duplicate detections: one TP, one FP
        let dets = vec![det("v", 0, 0, 0.9, unit_box(0.0)), det("v", 0, 0, 0.8, unit_box(0.1))];
        let r = frame_map(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.mean, 1.0); // FP after full recall does not lower AP
        let dets = vec![det("v", 0, 0, 0.9, unit_box(3.0)), det("v", 0, 0, 0.8, unit_box(0.0))];
        // first det IoU 7/13 ≈ 0.538 > 0.5 claims the gt; second becomes FP
        let r = frame_map(&dets, &gts, 0.5).unwrap();
        assert_eq!(r.mean, 1.0);
    }

    /// Brute-force AP oracle: explicit interpolated precision at each
    /// achieved recall step.
    fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
        let mut ap = 0.0;
        let mut matched = 0;
        for rank in 0..flags.len() {
            if !flags[rank] {
                continue;
            }
            matched += 1;
            // interpolated precision at this recall level
            let mut best_prec = 0.0f64;
            let mut tp = 0;
            for r2 in 0..flags.len() {
                if flags[r2] {
                    tp += 1;
                }
                if tp >= matched {
                    best_prec = best_prec.max(tp as f64 / (r2 + 1) as f64);
                }
            }
            ap += best_prec / num_gt as f64;
        }
        ap
    }

    #[test]
    fn ap_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..500 {
            let n = rng.gen_range(0..=8);
            let num_gt = rng.gen_range(1..=3);
            let mut flags = vec![false; n];
            let mut tp_budget = num_gt;
            for f in flags.iter_mut() {
                if tp_budget > 0 && rng.gen::<bool>() {
                    *f = true;
                    tp_budget -= 1;
                }
            }
            let got = average_precision(&flags, num_gt);
            let want = ap_oracle(&flags, num_gt);
            assert!((got - want).abs() < 1e-12, "flags {:?} gt {}", flags, num_gt);
        }
    }

    #[test]
    fn map_is_rank_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let gts = vec![
            det("v", 0, 0, 0.0, unit_box(0.0)),
            det("v", 0, 0, 0.0, unit_box(30.0)),
            det("v", 1, 1, 0.0, unit_box(10.0)),
        ];
        let dets: Vec<Detection> = (0..10)
            .map(|i| {
                det(
                    "v",
                    rng.gen_range(0..2),
                    rng.gen_range(0..2),
                    0.1 + 0.08 * i as f64,
                    unit_box(rng.gen_range(0.0..40.0)),
                )
            })
            .collect();
        let base = frame_map(&dets, &gts, 0.5).unwrap();
        // strictly monotone transforms preserve ranks, hence mAP
        let squashed: Vec<Detection> =
            dets.iter().map(|d| Detection { score: d.score.powi(3), ..d.clone() }).collect();
        assert_eq!(frame_map(&squashed, &gts, 0.5).unwrap(), base);
        let shifted: Vec<Detection> =
            dets.iter().map(|d| Detection { score: d.score * 10.0 + 3.0, ..d.clone() }).collect();
        assert_eq!(frame_map(&shifted, &gts, 0.5).unwrap(), base);
    }

    #[test]
    fn late_fuse_examples() {
        let s = Tensor::from_vec(&[2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        assert_eq!(late_fuse(&s, &s).unwrap(), s);
        let z = Tensor::zeros(&[2, 2]);
        let half = late_fuse(&z, &s).unwrap();
        for (h, v) in half.data().iter().zip(s.data().iter()) {
            assert!((h - v / 2.0).abs() < 1e-15);
        }
        assert_eq!(late_fuse(&s, &z).unwrap(), late_fuse(&z, &s).unwrap());
        assert!(late_fuse(&s, &Tensor::zeros(&[2, 3])).is_err());
    }
}
