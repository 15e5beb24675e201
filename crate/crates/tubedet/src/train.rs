//! Training and inference drivers. Training runs proposal-only epochs
//! first, then joint epochs where classification gradients flow back
//! through the attention stage into the shared backbone feature map.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{PipelineMode, RunConfig};
use crate::data::ClipData;
use crate::error::{Error, Result};
use crate::geometry::{assign_labels, generate_anchors, tubelet_iou, Tubelet};
use crate::linking::{link_tubelets, FrameTrack};
use crate::long_term::{build_window, ltr_backward, ltr_forward};
use crate::model::Model;
use crate::short_term::{roi_pool_3d, str_backward, str_forward, RoiArgmax, StrCache};
use crate::tensor::{
    classification_loss, classification_loss_grad, clip_grad_norm, sgd_step, zero_grads, Labels,
    Tensor,
};
use crate::tpn::{propose, sample_minibatch, tpn_loss, ClipFeature, TpnCache, TpnOutput};

/// One video's clips in clip-index order.
#[derive(Debug, Clone)]
pub struct VideoClips {
    pub video_id: String,
    pub clips: Vec<ClipData>,
}

pub fn group_by_video(clips: Vec<ClipData>) -> Vec<VideoClips> {
    let mut by_video: BTreeMap<String, Vec<ClipData>> = BTreeMap::new();
    for clip in clips {
        by_video.entry(clip.video_id.clone()).or_default().push(clip);
    }
    by_video
        .into_iter()
        .map(|(video_id, mut clips)| {
            clips.sort_by_key(|c| c.clip_index);
            VideoClips { video_id, clips }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: &'static str,
    pub tpn: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
}

pub fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,phase,tpn_loss,cls_loss\n");
    for e in &report.epoch_losses {
        out.push_str(&format!("{},{},{:.9},{:.9}\n", e.epoch, e.phase, e.tpn, e.cls));
    }
    out
}

/// Per-row classification target for a matched proposal.
#[derive(Debug, Clone)]
enum RowLabel {
    Single(usize),
    /// k-hot target row.
    Multi(Vec<f64>),
}

fn batch_labels(rows: &[RowLabel], k: usize) -> Result<Labels> {
    match rows.first() {
        Some(RowLabel::Single(_)) => Ok(Labels::Single(
            rows.iter()
                .map(|r| match r {
                    RowLabel::Single(c) => *c,
                    RowLabel::Multi(_) => unreachable!("mixed label kinds"),
                })
                .collect(),
        )),
        Some(RowLabel::Multi(_)) => {
            let mut t = Tensor::zeros(&[rows.len(), k]);
            for (i, r) in rows.iter().enumerate() {
                match r {
                    RowLabel::Multi(v) => t.data_mut()[i * k..(i + 1) * k].copy_from_slice(v),
                    RowLabel::Single(_) => unreachable!("mixed label kinds"),
                }
            }
            Ok(Labels::Multi(t))
        }
        None => Err(Error::invalid("batch_labels", "empty batch")),
    }
}

/// Matches each proposal against the clip's ground truth at the config
/// IoU. Single-label mode takes the best match's class; multi-label mode
/// takes every matching class as a k-hot row. Unmatched proposals get no
/// label and contribute no classification loss.
fn label_proposals(
    proposals: &[Tubelet],
    gts: &[(usize, Tubelet)],
    iou: f64,
    multi: bool,
    k: usize,
) -> Result<Vec<Option<RowLabel>>> {
    let mut out = Vec::with_capacity(proposals.len());
    for p in proposals {
        if multi {
            let mut hot = vec![0.0; k];
            let mut any = false;
            for (class, gt) in gts {
                if tubelet_iou(p, gt)? > iou {
                    hot[*class] = 1.0;
                    any = true;
                }
            }
            out.push(any.then_some(RowLabel::Multi(hot)));
        } else {
            let mut best: Option<(f64, usize)> = None;
            for (class, gt) in gts {
                let v = tubelet_iou(p, gt)?;
                if v > iou && best.map_or(true, |(bv, _)| v > bv) {
                    best = Some((v, *class));
                }
            }
            out.push(best.map(|(_, class)| RowLabel::Single(class)));
        }
    }
    Ok(out)
}

/// Cache needed to push a fused-feature gradient back to the clip feature
/// map, per pipeline mode.
enum FeatCache {
    Str(Box<StrCache>),
    Embed { argmax: RoiArgmax, x: Tensor },
}

fn forward_features(
    model: &Model,
    feature: &ClipFeature,
    tubelet: &Tubelet,
) -> Result<(Tensor, FeatCache)> {
    match model.mode {
        PipelineMode::Tpn => {
            let embed = model.embed.as_ref().expect("tpn mode");
            let (human, argmax) = roi_pool_3d(feature, tubelet)?;
            let x = human.values.clone().reshape(&[1, embed.d_in()])?;
            let f = embed.forward(&x)?.reshape(&[embed.d_out()])?;
            Ok((f, FeatCache::Embed { argmax, x }))
        }
        PipelineMode::Short | PipelineMode::Full => {
            let params = model.short.as_ref().expect("short params");
            let (out, cache) = str_forward(params, feature, tubelet)?;
            Ok((out.fused, FeatCache::Str(Box::new(cache))))
        }
    }
}

fn backward_features(model: &mut Model, cache: &FeatCache, g_fused: &Tensor) -> Result<Tensor> {
    match cache {
        FeatCache::Str(c) => {
            let params = model.short.as_mut().expect("short params");
            str_backward(params, c, g_fused)
        }
        FeatCache::Embed { argmax, x } => {
            let embed = model.embed.as_mut().expect("tpn mode");
            let g_row = g_fused.clone().reshape(&[1, embed.d_out()])?;
            let gx = embed.backward(x, &g_row)?;
            crate::short_term::roi_pool_3d_backward(argmax, &gx)
        }
    }
}

struct ClipForward {
    out: TpnOutput,
    feature: ClipFeature,
    cache: TpnCache,
    proposals: Vec<Tubelet>,
    fused: Vec<Tensor>,
    feat_caches: Vec<FeatCache>,
    labels: Vec<Option<RowLabel>>,
}

fn class_loss_and_grad(logits: &Tensor, rows: &[RowLabel], k: usize) -> Result<(f64, Tensor)> {
    let labels = batch_labels(rows, k)?;
    Ok((classification_loss(logits, &labels)?, classification_loss_grad(logits, &labels)?))
}

fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let d = x.shape()[1];
    let mut out = Tensor::zeros(&[rows.len(), d]);
    for (i, &r) in rows.iter().enumerate() {
        out.data_mut()[i * d..(i + 1) * d].copy_from_slice(&x.data()[r * d..(r + 1) * d]);
    }
    Ok(out)
}

/// Adds the proposal losses of one clip: actionness cross-entropy over a
/// sampled anchor minibatch plus box regression on sampled positives.
fn accumulate_tpn_loss(
    model: &mut Model,
    cfg: &RunConfig,
    anchors: &[Tubelet],
    clip: &ClipData,
    out: &TpnOutput,
    cache: &TpnCache,
    g_extra: Option<&Tensor>,
    seed: u64,
) -> Result<f64> {
    let gts: Vec<Tubelet> = clip.gts.iter().map(|(_, t)| t.clone()).collect();
    let assignment = assign_labels(anchors, &gts)?;
    let sampled =
        sample_minibatch(&assignment, cfg.minibatch_size, cfg.minibatch_pos_fraction, seed)?;
    let loss = tpn_loss(out, &assignment, &sampled, cfg.lambda)?;
    model.tpn.backward(cache, &loss.g_regression, &loss.g_actionness, g_extra)?;
    Ok(loss.total)
}

/// One joint pass over a video: accumulates gradients for every stage and
/// returns (tpn loss sum, clips, classification loss sum, loss batches).
fn joint_video_pass(
    model: &mut Model,
    cfg: &RunConfig,
    anchors: &[Tubelet],
    video: &VideoClips,
    aux: &mut ChaCha8Rng,
) -> Result<(f64, usize, f64, usize)> {
    let grid = cfg.anchor_grid();
    let prop_cfg = cfg.proposal_config();
    let k = model.num_classes;
    let mut fwds: Vec<ClipForward> = Vec::with_capacity(video.clips.len());
    for clip in &video.clips {
        let (out, feature, cache) = model.tpn.forward(&clip.frames, &grid)?;
        let mut proposals = propose(&out, &grid, &prop_cfg)?;
        for p in &mut proposals {
            p.clip_index = clip.clip_index;
        }
        let mut fused = Vec::with_capacity(proposals.len());
        let mut feat_caches = Vec::with_capacity(proposals.len());
        for p in &proposals {
            let (f, c) = forward_features(model, &feature, p)?;
            fused.push(f);
            feat_caches.push(c);
        }
        let labels = label_proposals(&proposals, &clip.gts, cfg.match_iou, cfg.multi_label, k)?;
        fwds.push(ClipForward { out, feature, cache, proposals, fused, feat_caches, labels });
    }

    let d = model.feature_dim();
    let mut g_fused: Vec<Vec<Tensor>> =
        fwds.iter().map(|f| f.proposals.iter().map(|_| Tensor::zeros(&[d])).collect()).collect();
    let mut cls_sum = 0.0;
    let mut cls_batches = 0usize;

    match model.mode {
        PipelineMode::Full => {
            let per_clip: Vec<Vec<(Tubelet, Tensor)>> = fwds
                .iter()
                .map(|f| f.proposals.iter().cloned().zip(f.fused.iter().cloned()).collect())
                .collect();
            let ltr = model.ltr.as_mut().expect("full mode");
            for m in 0..per_clip.len() {
                let labeled: Vec<(usize, RowLabel)> = fwds[m]
                    .labels
                    .iter()
                    .enumerate()
                    .filter_map(|(i, l)| l.clone().map(|l| (i, l)))
                    .collect();
                if labeled.is_empty() {
                    continue;
                }
                let window = build_window(&per_clip, m, cfg.window_radius, d)?;
                let (logits, cache) = ltr_forward(ltr, &window, true, aux.gen())?;
                let rows: Vec<usize> = labeled.iter().map(|(i, _)| *i).collect();
                let row_labels: Vec<RowLabel> = labeled.into_iter().map(|(_, l)| l).collect();
                let sub = gather_rows(&logits, &rows)?;
                let (loss, g_sub) = class_loss_and_grad(&sub, &row_labels, k)?;
                cls_sum += loss;
                cls_batches += 1;
                let mut g_logits = Tensor::zeros(&[logits.shape()[0], k]);
                for (src, &row) in rows.iter().enumerate() {
                    g_logits.data_mut()[row * k..(row + 1) * k]
                        .copy_from_slice(&g_sub.data()[src * k..(src + 1) * k]);
                }
                let gx = ltr_backward(ltr, &window, &cache, &g_logits)?;
                for (r, member) in window.members.iter().enumerate() {
                    if member.tubelet.is_none() {
                        continue;
                    }
                    let clip = (m as isize + member.clip_offset) as usize;
                    let row = Tensor::from_vec(&[d], gx.data()[r * d..(r + 1) * d].to_vec())?;
                    g_fused[clip][member.within_clip].add_scaled(&row, 1.0);
                }
            }
        }
        PipelineMode::Short | PipelineMode::Tpn => {
            let mut rows: Vec<(usize, usize)> = Vec::new();
            let mut row_labels: Vec<RowLabel> = Vec::new();
            for (ci, f) in fwds.iter().enumerate() {
                for (pi, label) in f.labels.iter().enumerate() {
                    if let Some(l) = label {
                        rows.push((ci, pi));
                        row_labels.push(l.clone());
                    }
                }
            }
            if !rows.is_empty() {
                let mut x = Tensor::zeros(&[rows.len(), d]);
                for (r, &(ci, pi)) in rows.iter().enumerate() {
                    x.data_mut()[r * d..(r + 1) * d].copy_from_slice(fwds[ci].fused[pi].data());
                }
                let head = model.head.as_mut().expect("head");
                let (logits, cache) = head.forward_logits(&x, true, aux.gen())?;
                let (loss, g_logits) = class_loss_and_grad(&logits, &row_labels, k)?;
                cls_sum += loss;
                cls_batches += 1;
                let gx = head.backward(&cache, &g_logits)?;
                for (r, &(ci, pi)) in rows.iter().enumerate() {
                    let row = Tensor::from_vec(&[d], gx.data()[r * d..(r + 1) * d].to_vec())?;
                    g_fused[ci][pi].add_scaled(&row, 1.0);
                }
            }
        }
    }

    let mut tpn_sum = 0.0;
    let clips = video.clips.len();
    for (ci, fwd) in fwds.iter().enumerate() {
        let mut g_extra = Tensor::zeros(fwd.feature.values.shape());
        for (pi, g) in g_fused[ci].iter().enumerate() {
            if g.data().iter().all(|&v| v == 0.0) {
                continue;
            }
            let gf = backward_features(model, &fwd.feat_caches[pi], g)?;
            g_extra.add_scaled(&gf, 1.0);
        }
        if cfg.freeze_tpn_in_joint {
            continue;
        }
        tpn_sum += accumulate_tpn_loss(
            model,
            cfg,
            anchors,
            &video.clips[ci],
            &fwd.out,
            &fwd.cache,
            Some(&g_extra),
            aux.gen(),
        )?;
    }
    Ok((tpn_sum, clips, cls_sum, cls_batches))
}

/// Trains a fresh model on the given videos: `tpn_pretrain_epochs` of
/// proposal-only updates (one step per clip), then joint epochs (one step
/// per video). Deterministic given the config seed.
pub fn train(cfg: &RunConfig, videos: &[VideoClips]) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::invalid("train", "no videos"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aux = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut model = Model::new(cfg, &mut rng)?;
    let grid = cfg.anchor_grid();
    let anchors = generate_anchors(&grid);
    let schedule = cfg.lr_schedule();
    let sgd = cfg.sgd();
    let total = cfg.epochs as f64;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let pretrain = epoch < cfg.tpn_pretrain_epochs;
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut rng);
        let mut tpn_sum = 0.0;
        let mut tpn_count = 0usize;
        let mut cls_sum = 0.0;
        let mut cls_count = 0usize;
        for (vi, &v) in order.iter().enumerate() {
            let video = &videos[v];
            let video_frac = vi as f64 / videos.len() as f64;
            if pretrain {
                let n_clips = video.clips.len();
                for (ci, clip) in video.clips.iter().enumerate() {
                    zero_grads(&mut model);
                    let (out, _, cache) = model.tpn.forward(&clip.frames, &grid)?;
                    tpn_sum += accumulate_tpn_loss(
                        &mut model,
                        cfg,
                        &anchors,
                        clip,
                        &out,
                        &cache,
                        None,
                        aux.gen(),
                    )?;
                    tpn_count += 1;
                    let progress = (epoch as f64
                        + video_frac
                        + ci as f64 / (n_clips * videos.len()) as f64)
                        / total;
                    if cfg.clip_grad_norm > 0.0 {
                        clip_grad_norm(&mut model, cfg.clip_grad_norm)?;
                    }
                    sgd_step(&mut model, &schedule, progress, &sgd)?;
                }
            } else {
                zero_grads(&mut model);
                let (ts, tc, cs, cc) = joint_video_pass(&mut model, cfg, &anchors, video, &mut aux)?;
                tpn_sum += ts;
                tpn_count += tc;
                cls_sum += cs;
                cls_count += cc;
                if cfg.clip_grad_norm > 0.0 {
                    clip_grad_norm(&mut model, cfg.clip_grad_norm)?;
                }
                sgd_step(&mut model, &schedule, (epoch as f64 + video_frac) / total, &sgd)?;
            }
        }
        let epoch_loss = EpochLoss {
            epoch,
            phase: if pretrain { "tpn" } else { "joint" },
            tpn: if tpn_count > 0 { tpn_sum / tpn_count as f64 } else { 0.0 },
            cls: if cls_count > 0 { cls_sum / cls_count as f64 } else { 0.0 },
        };
        if !epoch_loss.tpn.is_finite() || !epoch_loss.cls.is_finite() {
            return Err(Error::NonFinite { context: format!("epoch {} loss", epoch) });
        }
        report.epoch_losses.push(epoch_loss);
    }
    Ok((model, report))
}

/// Proposals and fused features for one clip, as the relation stages see
/// them at inference time.
pub fn clip_proposal_features(
    model: &Model,
    cfg: &RunConfig,
    clip: &ClipData,
) -> Result<(Vec<Tubelet>, Vec<Tensor>)> {
    let grid = cfg.anchor_grid();
    let prop_cfg = cfg.proposal_config();
    let (out, feature, _cache) = model.tpn.forward(&clip.frames, &grid)?;
    let mut proposals = propose(&out, &grid, &prop_cfg)?;
    for p in &mut proposals {
        p.clip_index = clip.clip_index;
    }
    let fused: Vec<Tensor> = proposals
        .iter()
        .map(|p| forward_features(model, &feature, p).map(|(f, _)| f))
        .collect::<Result<_>>()?;
    Ok((proposals, fused))
}

/// Scores every proposal of every clip: per-class score is the classifier
/// probability times the proposal's actionness.
pub fn detect_video(model: &Model, cfg: &RunConfig, video: &VideoClips) -> Result<Vec<Vec<Tubelet>>> {
    let k = model.num_classes;
    let d = model.feature_dim();
    let mut per_clip: Vec<Vec<Tubelet>> = Vec::with_capacity(video.clips.len());
    let mut feats: Vec<Vec<Tensor>> = Vec::with_capacity(video.clips.len());
    for clip in &video.clips {
        let (proposals, fused) = clip_proposal_features(model, cfg, clip)?;
        per_clip.push(proposals);
        feats.push(fused);
    }

    match model.mode {
        PipelineMode::Full => {
            let windows_input: Vec<Vec<(Tubelet, Tensor)>> = per_clip
                .iter()
                .zip(feats.iter())
                .map(|(ps, fs)| ps.iter().cloned().zip(fs.iter().cloned()).collect())
                .collect();
            let ltr = model.ltr.as_ref().expect("full mode");
            for m in 0..per_clip.len() {
                if per_clip[m].is_empty() {
                    continue;
                }
                let window = build_window(&windows_input, m, cfg.window_radius, d)?;
                let (logits, _cache) = ltr_forward(ltr, &window, false, 0)?;
                let probs = ltr.classifier.probabilities(&logits)?;
                for (i, p) in per_clip[m].iter_mut().enumerate() {
                    let row = &probs.data()[i * k..(i + 1) * k];
                    p.class_scores = Some(row.iter().map(|&v| v * p.actionness).collect());
                }
            }
        }
        PipelineMode::Short | PipelineMode::Tpn => {
            let head = model.head.as_ref().expect("head");
            for (ps, fs) in per_clip.iter_mut().zip(feats.iter()) {
                if ps.is_empty() {
                    continue;
                }
                let mut x = Tensor::zeros(&[ps.len(), d]);
                for (r, f) in fs.iter().enumerate() {
                    x.data_mut()[r * d..(r + 1) * d].copy_from_slice(f.data());
                }
                let (logits, _) = head.forward_logits(&x, false, 0)?;
                let probs = head.probabilities(&logits)?;
                for (i, p) in ps.iter_mut().enumerate() {
                    let row = &probs.data()[i * k..(i + 1) * k];
                    p.class_scores = Some(row.iter().map(|&v| v * p.actionness).collect());
                }
            }
        }
    }
    Ok(per_clip)
}

/// Full detection pass: score, link, and express every video's tracks as
/// frame-indexed tracks. Clips must tile the video without overlap.
pub fn detect_tracks(model: &Model, cfg: &RunConfig, videos: &[VideoClips]) -> Result<Vec<FrameTrack>> {
    if cfg.clip_stride != cfg.frames_per_clip {
        return Err(Error::invalid(
            "detect_tracks",
            "detection requires clip_stride == frames_per_clip",
        ));
    }
    let mut tracks = Vec::new();
    for video in videos {
        let per_clip = detect_video(model, cfg, video)?;
        if per_clip.iter().all(|c| c.is_empty()) {
            continue;
        }
        for vt in link_tubelets(&per_clip, cfg.link_iou_weight, model.num_classes)? {
            tracks.push(FrameTrack::from_video_track(&vt, cfg.frames_per_clip, &video.video_id));
        }
    }
    Ok(tracks)
}
