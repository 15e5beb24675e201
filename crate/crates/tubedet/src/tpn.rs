//! Tubelet proposal network: a factorized spatio-temporal backbone (spatial
//! 1xkxk then temporal lx1x1 per stage, never downsampling time), sibling
//! regression/actionness heads, the proposal training objective, anchor
//! minibatch sampling, and proposal extraction.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    decode_boxes, generate_anchors, AnchorAssignment, AnchorGrid, AnchorLabel, Tubelet,
};
use crate::layers::{
    max_pool2, max_pool2_backward, relu, relu_backward, Linear, SpatialConv, TemporalConv,
};
use crate::tensor::{
    classification_loss, classification_loss_grad, smooth_l1, smooth_l1_grad, softmax_rows,
    Labels, ParamSet, Parameter, Tensor,
};

#[derive(Debug, Clone)]
pub struct BackboneConfig {
    /// Frames per clip.
    pub t: usize,
    /// Output channels per stage; each stage halves H and W.
    pub channels: Vec<usize>,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { t: 8, channels: vec![8, 16, 32], spatial_kernel: 3, temporal_kernel: 3 }
    }
}

impl BackboneConfig {
    pub fn stride(&self) -> usize {
        1 << self.channels.len()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one stage")
    }
}

/// Backbone feature volume plus the pixels-per-cell stride.
#[derive(Debug, Clone)]
pub struct ClipFeature {
    /// [T, H', W', C]
    pub values: Tensor,
    pub stride: usize,
}

struct Stage {
    spatial: SpatialConv,
    temporal: TemporalConv,
}

/// Intermediates one stage needs for its backward pass.
struct StageCache {
    x: Tensor,
    s_pre: Tensor,
    s_act: Tensor,
    t_pre: Tensor,
    t_act: Tensor,
}

pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

pub struct BackboneCache {
    stages: Vec<StageCache>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Backbone> {
        if cfg.channels.is_empty() {
            return Err(Error::invalid("Backbone", "no stages"));
        }
        let mut stages = Vec::new();
        let mut c_in = 3;
        for &c_out in &cfg.channels {
            let s_std = (2.0 / (cfg.spatial_kernel * cfg.spatial_kernel * c_in) as f64).sqrt();
            let spatial = SpatialConv::new(c_in, c_out, cfg.spatial_kernel, s_std, rng)?;
            let t_std = (2.0 / (cfg.temporal_kernel * c_out) as f64).sqrt();
            let temporal = TemporalConv::new(c_out, c_out, cfg.temporal_kernel, t_std, rng)?;
            stages.push(Stage { spatial, temporal });
            c_in = c_out;
        }
        Ok(Backbone { cfg, stages })
    }

    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn forward(&self, clip: &Tensor) -> Result<(ClipFeature, BackboneCache)> {
        let s = clip.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("Backbone::forward", format!("expected [T,H,W,3], got {:?}", s)));
        }
        let stride = self.cfg.stride();
        if s[1] % stride != 0 || s[2] % stride != 0 {
            return Err(Error::shape(
                "Backbone::forward",
                format!("spatial dims {}x{} not divisible by stride {}", s[1], s[2], stride),
            ));
        }
        let mut x = clip.clone();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let s_pre = stage.spatial.forward(&x)?;
            let s_act = relu(&s_pre);
            let t_pre = stage.temporal.forward(&s_act)?;
            let t_act = relu(&t_pre);
            let pooled = max_pool2(&t_act)?;
            caches.push(StageCache { x, s_pre, s_act, t_pre, t_act });
            x = pooled;
        }
        Ok((ClipFeature { values: x, stride }, BackboneCache { stages: caches }))
    }

    /// Accumulates parameter grads; returns the gradient w.r.t. the clip.
    pub fn backward(&mut self, cache: &BackboneCache, gfeature: &Tensor) -> Result<Tensor> {
        let mut g = gfeature.clone();
        for (stage, sc) in self.stages.iter_mut().zip(cache.stages.iter()).rev() {
            g = max_pool2_backward(&sc.t_act, &g)?;
            g = relu_backward(&sc.t_pre, &g);
            g = stage.temporal.backward(&sc.s_act, &g)?;
            g = relu_backward(&sc.s_pre, &g);
            g = stage.spatial.backward(&sc.x, &g)?;
        }
        Ok(g)
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            f(&format!("backbone.stage{}.spatial.weight", i), &mut stage.spatial.weight);
            f(&format!("backbone.stage{}.spatial.bias", i), &mut stage.spatial.bias);
            f(&format!("backbone.stage{}.temporal.weight", i), &mut stage.temporal.weight);
            f(&format!("backbone.stage{}.temporal.bias", i), &mut stage.temporal.bias);
        }
    }
}

/// Per-anchor proposal outputs for one clip.
#[derive(Debug, Clone)]
pub struct TpnOutput {
    /// [anchors, 4T]
    pub regression: Tensor,
    /// [anchors, 2]; column 1 is the action class.
    pub actionness_logits: Tensor,
}

/// Sibling heads, realized as dense layers applied per feature cell over
/// the time-flattened cell vector (equivalent to 1x1x1 convolutions).
pub struct TpnHeads {
    pub reg: Linear,
    pub act: Linear,
    t: usize,
    c: usize,
    anchors_per_cell: usize,
}

pub struct HeadsCache {
    cells: Tensor,
    feat_shape: Vec<usize>,
}

impl TpnHeads {
    pub fn new(t: usize, c: usize, anchors_per_cell: usize, rng: &mut impl Rng) -> TpnHeads {
        let d_in = t * c;
        TpnHeads {
            reg: Linear::new(d_in, anchors_per_cell * 4 * t, 0.01, rng),
            act: Linear::new(d_in, anchors_per_cell * 2, 0.01, rng),
            t,
            c,
            anchors_per_cell,
        }
    }

    /// Rows of the cell matrix follow the anchor grid's cell order
    /// (row-major over the feature map); columns are (t, c) flattened.
    fn gather_cells(&self, feat: &ClipFeature) -> Tensor {
        let s = feat.values.shape();
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut cells = Tensor::zeros(&[h * w, t * c]);
        let fd = feat.values.data();
        let cd = cells.data_mut();
        for y in 0..h {
            for x in 0..w {
                let row = (y * w + x) * t * c;
                for ti in 0..t {
                    let src = ((ti * h + y) * w + x) * c;
                    let dst = row + ti * c;
                    cd[dst..dst + c].copy_from_slice(&fd[src..src + c]);
                }
            }
        }
        cells
    }

    pub fn forward(&self, feat: &ClipFeature, grid: &AnchorGrid) -> Result<(TpnOutput, HeadsCache)> {
        let s = feat.values.shape().to_vec();
        let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
        if t != self.t || c != self.c {
            return Err(Error::shape(
                "TpnHeads::forward",
                format!("feature [T,C]=[{},{}], heads want [{},{}]", t, c, self.t, self.c),
            ));
        }
        if grid.feature_height != h || grid.feature_width != w {
            return Err(Error::shape("TpnHeads::forward", "grid dims vs feature dims".to_string()));
        }
        if grid.anchors_per_cell() != self.anchors_per_cell || grid.t != t {
            return Err(Error::shape("TpnHeads::forward", "grid anchors/T vs heads".to_string()));
        }
        let cells = self.gather_cells(feat);
        let n_anchors = h * w * self.anchors_per_cell;
        // each row holds anchors_per_cell consecutive blocks, so the flat
        // layout already enumerates anchors in grid order
        let regression = self.reg.forward(&cells)?.reshape(&[n_anchors, 4 * t])?;
        let actionness_logits = self.act.forward(&cells)?.reshape(&[n_anchors, 2])?;
        Ok((TpnOutput { regression, actionness_logits }, HeadsCache { cells, feat_shape: s }))
    }

    pub fn backward(&mut self, cache: &HeadsCache, g_reg: &Tensor, g_act: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = (
            cache.feat_shape[0],
            cache.feat_shape[1],
            cache.feat_shape[2],
            cache.feat_shape[3],
        );
        let n_cells = h * w;
        let g_reg = g_reg.clone().reshape(&[n_cells, self.anchors_per_cell * 4 * t])?;
        let g_act = g_act.clone().reshape(&[n_cells, self.anchors_per_cell * 2])?;
        let mut gcells = self.reg.backward(&cache.cells, &g_reg)?;
        let gcells_act = self.act.backward(&cache.cells, &g_act)?;
        gcells.add_scaled(&gcells_act, 1.0);

        let mut gfeat = Tensor::zeros(&cache.feat_shape);
        let gf = gfeat.data_mut();
        let gc = gcells.data();
        for y in 0..h {
            for x in 0..w {
                let row = (y * w + x) * t * c;
                for ti in 0..t {
                    let dst = ((ti * h + y) * w + x) * c;
                    let src = row + ti * c;
                    for ci in 0..c {
                        gf[dst + ci] += gc[src + ci];
                    }
                }
            }
        }
        Ok(gfeat)
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("tpn.reg.weight", &mut self.reg.weight);
        f("tpn.reg.bias", &mut self.reg.bias);
        f("tpn.act.weight", &mut self.act.weight);
        f("tpn.act.bias", &mut self.act.bias);
    }
}

/// Loss value and gradients w.r.t. the head outputs.
pub struct TpnLoss {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub g_regression: Tensor,
    pub g_actionness: Tensor,
}

/// Mean actionness cross-entropy over the sampled anchors plus
/// lambda * (mean over sampled positives) of smooth-L1 on the 4T deltas.
/// With no sampled positives the regression term is zero.
pub fn tpn_loss(
    out: &TpnOutput,
    assignment: &AnchorAssignment,
    sampled: &[usize],
    lambda: f64,
) -> Result<TpnLoss> {
    let n_anchors = out.actionness_logits.shape()[0];
    let reg_width = out.regression.shape()[1];
    if sampled.is_empty() {
        return Err(Error::invalid("tpn_loss", "empty sample"));
    }
    if lambda < 0.0 {
        return Err(Error::invalid("tpn_loss", "negative lambda"));
    }
    if assignment.labels.len() != n_anchors {
        return Err(Error::shape("tpn_loss", "assignment vs output".to_string()));
    }
    let mut seen = vec![false; n_anchors];
    for &i in sampled {
        if i >= n_anchors {
            return Err(Error::invalid("tpn_loss", format!("sampled index {} out of range", i)));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("tpn_loss", format!("duplicate sampled index {}", i)));
        }
    }

    let n = sampled.len();
    let mut logits = Tensor::zeros(&[n, 2]);
    let mut labels = Vec::with_capacity(n);
    for (row, &i) in sampled.iter().enumerate() {
        logits.data_mut()[2 * row] = out.actionness_logits.data()[2 * i];
        logits.data_mut()[2 * row + 1] = out.actionness_logits.data()[2 * i + 1];
        labels.push(match assignment.labels[i] {
            AnchorLabel::Positive => 1,
            AnchorLabel::Negative => 0,
        });
    }
    let labels = Labels::Single(labels);
    let cls = classification_loss(&logits, &labels)?;
    let gl = classification_loss_grad(&logits, &labels)?;
    let mut g_actionness = Tensor::zeros(&[n_anchors, 2]);
    for (row, &i) in sampled.iter().enumerate() {
        g_actionness.data_mut()[2 * i] = gl.data()[2 * row];
        g_actionness.data_mut()[2 * i + 1] = gl.data()[2 * row + 1];
    }

    let positives: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&i| assignment.labels[i] == AnchorLabel::Positive)
        .collect();
    let mut g_regression = Tensor::zeros(&[n_anchors, reg_width]);
    let mut reg_sum = 0.0;
    if !positives.is_empty() && lambda > 0.0 {
        let scale = lambda / positives.len() as f64;
        for &i in &positives {
            let target = assignment.regression_targets[i]
                .as_ref()
                .ok_or_else(|| Error::invalid("tpn_loss", "positive anchor without targets"))?;
            if target.len() != reg_width {
                return Err(Error::shape("tpn_loss", "target width vs regression width".to_string()));
            }
            let pred = Tensor::from_vec(
                &[reg_width],
                out.regression.data()[i * reg_width..(i + 1) * reg_width].to_vec(),
            )?;
            reg_sum += smooth_l1(&pred, target)?;
            let g = smooth_l1_grad(&pred, target)?;
            for (j, gv) in g.data().iter().enumerate() {
                g_regression.data_mut()[i * reg_width + j] = scale * gv;
            }
        }
        reg_sum = scale * reg_sum;
    }

    Ok(TpnLoss { total: cls + reg_sum, cls, reg: reg_sum, g_regression, g_actionness })
}

/// Sample up to size*pos_fraction positives and fill the rest with
/// negatives, both uniformly without replacement; deterministic in the
/// seed. Returned indices are sorted.
pub fn sample_minibatch(
    assignment: &AnchorAssignment,
    size: usize,
    pos_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::invalid("sample_minibatch", "size must be >= 1"));
    }
    if !(0.0..=1.0).contains(&pos_fraction) {
        return Err(Error::invalid("sample_minibatch", "pos_fraction outside [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let positives: Vec<usize> = assignment.positives().collect();
    let negatives: Vec<usize> = assignment
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == AnchorLabel::Negative)
        .map(|(i, _)| i)
        .collect();
    let n_pos = positives.len().min((size as f64 * pos_fraction).floor() as usize);
    let n_neg = negatives.len().min(size - n_pos);
    let mut out: Vec<usize> = rand::seq::index::sample(&mut rng, positives.len().max(1), n_pos.min(positives.len()))
        .iter()
        .map(|i| positives[i])
        .collect();
    out.extend(
        rand::seq::index::sample(&mut rng, negatives.len().max(1), n_neg)
            .iter()
            .map(|i| negatives[i]),
    );
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ProposalConfig {
    pub nms_iou: f64,
    pub keep_top: usize,
    pub image_w: f64,
    pub image_h: f64,
}

/// Decode every anchor with its predicted deltas, score it with the
/// softmax action probability, then NMS and keep the top survivors.
pub fn propose(out: &TpnOutput, grid: &AnchorGrid, cfg: &ProposalConfig) -> Result<Vec<Tubelet>> {
    let anchors = generate_anchors(grid);
    let n = anchors.len();
    if out.regression.shape()[0] != n || out.actionness_logits.shape()[0] != n {
        return Err(Error::shape("propose", "output anchor count vs grid".to_string()));
    }
    let reg_width = out.regression.shape()[1];
    if reg_width != 4 * grid.t {
        return Err(Error::shape("propose", "regression width vs 4T".to_string()));
    }
    let probs = softmax_rows(&out.actionness_logits)?;
    let mut decoded = Vec::with_capacity(n);
    for (i, anchor) in anchors.iter().enumerate() {
        let deltas = &out.regression.data()[i * reg_width..(i + 1) * reg_width];
        let mut t = decode_boxes(anchor, deltas, cfg.image_w, cfg.image_h)?;
        t.actionness = probs.data()[2 * i + 1];
        decoded.push(t);
    }
    crate::geometry::nms_tubelets(&decoded, cfg.nms_iou, cfg.keep_top)
}

/// Backbone plus heads, the trainable proposal model.
pub struct Tpn {
    pub backbone: Backbone,
    pub heads: TpnHeads,
}

pub struct TpnCache {
    pub backbone: BackboneCache,
    pub heads: HeadsCache,
}

impl Tpn {
    pub fn new(cfg: BackboneConfig, anchors_per_cell: usize, rng: &mut impl Rng) -> Result<Tpn> {
        let t = cfg.t;
        let c = cfg.out_channels();
        let backbone = Backbone::new(cfg, rng)?;
        let heads = TpnHeads::new(t, c, anchors_per_cell, rng);
        Ok(Tpn { backbone, heads })
    }

    pub fn forward(&self, clip: &Tensor, grid: &AnchorGrid) -> Result<(TpnOutput, ClipFeature, TpnCache)> {
        let (feat, bcache) = self.backbone.forward(clip)?;
        let (out, hcache) = self.heads.forward(&feat, grid)?;
        Ok((out, feat, TpnCache { backbone: bcache, heads: hcache }))
    }

    /// Backward through heads and backbone. `g_feature_extra` carries
    /// gradients flowing into the shared feature map from downstream
    /// consumers (the relation modules pool from the same feature).
    pub fn backward(
        &mut self,
        cache: &TpnCache,
        g_reg: &Tensor,
        g_act: &Tensor,
        g_feature_extra: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut gfeat = self.heads.backward(&cache.heads, g_reg, g_act)?;
        if let Some(extra) = g_feature_extra {
            gfeat.add_scaled(extra, 1.0);
        }
        self.backbone.backward(&cache.backbone, &gfeat)
    }
}

impl ParamSet for Tpn {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.backbone.visit(f);
        self.heads.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{assign_labels, BBox};
    use crate::tensor::{
        finite_diff_check, jitter_params, sgd_step, zero_grads, LrSchedule, SgdConfig,
    };

    fn tiny_grid(h: usize, w: usize, stride: usize, t: usize, scales: &[f64]) -> AnchorGrid {
        AnchorGrid {
            feature_height: h,
            feature_width: w,
            stride,
            scales: scales.to_vec(),
            aspect_ratios: vec![1.0],
            t,
        }
    }

    #[test]
    fn backbone_default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let backbone = Backbone::new(BackboneConfig::default(), &mut rng).unwrap();
        let clip = Tensor::randn(&[8, 64, 64, 3], 0.5, &mut rng);
        let (feat, _) = backbone.forward(&clip).unwrap();
        assert_eq!(feat.values.shape(), [8, 8, 8, 32]);
        assert_eq!(feat.stride, 8);
        // indivisible dims rejected
        let bad = Tensor::zeros(&[2, 60, 64, 3]);
        assert!(backbone.forward(&bad).is_err());
    }

    #[test]
    fn backbone_preserves_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cfg = BackboneConfig { t: 0, channels: vec![2, 3], ..Default::default() };
        let backbone = Backbone::new(cfg, &mut rng).unwrap();
        for t in 1..=16 {
            let clip = Tensor::randn(&[t, 4, 4, 3], 1.0, &mut rng);
            let (feat, _) = backbone.forward(&clip).unwrap();
            assert_eq!(feat.values.shape(), [t, 1, 1, 3]);
        }
    }

    #[test]
    fn zeroed_backbone_gives_zero_feature() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut backbone =
            Backbone::new(BackboneConfig { t: 2, channels: vec![2, 2], ..Default::default() }, &mut rng)
                .unwrap();
        backbone.visit(&mut |_, p| p.value.fill(0.0));
        let clip = Tensor::randn(&[2, 8, 8, 3], 1.0, &mut rng);
        let (feat, _) = backbone.forward(&clip).unwrap();
        assert!(feat.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heads_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let t = 2;
        let mut heads = TpnHeads::new(t, 3, 2, &mut rng);
        heads.visit(&mut |_, p| p.value.fill(0.0));
        let feat = ClipFeature { values: Tensor::randn(&[t, 2, 2, 3], 1.0, &mut rng), stride: 4 };
        let grid = tiny_grid(2, 2, 4, t, &[4.0, 8.0]);
        let (out, _) = heads.forward(&feat, &grid).unwrap();
        assert_eq!(out.regression.shape(), [8, 4 * t]);
        assert_eq!(out.actionness_logits.shape(), [8, 2]);
        let probs = softmax_rows(&out.actionness_logits).unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    fn toy_assignment(n_anchors: usize, positives: &[usize], reg_width: usize) -> AnchorAssignment {
        let mut labels = vec![AnchorLabel::Negative; n_anchors];
        let mut matched = vec![None; n_anchors];
        let mut targets = vec![None; n_anchors];
        for &p in positives {
            labels[p] = AnchorLabel::Positive;
            matched[p] = Some(0);
            targets[p] = Some(Tensor::filled(&[reg_width], 0.25));
        }
        AnchorAssignment { labels, matched_gt: matched, regression_targets: targets }
    }

    #[test]
    fn tpn_loss_examples() {
        let t = 2;
        let n = 4;
        let out = TpnOutput {
            regression: Tensor::zeros(&[n, 4 * t]),
            actionness_logits: Tensor::zeros(&[n, 2]),
        };
        // zero logits, no positives: pure uniform-binary cross entropy
        let asg = toy_assignment(n, &[], 4 * t);
        let sampled: Vec<usize> = (0..n).collect();
        let loss = tpn_loss(&out, &asg, &sampled, 1.0).unwrap();
        assert!((loss.total - 2f64.ln()).abs() < 1e-12);
        assert_eq!(loss.reg, 0.0);

        // lambda 0 ignores regression even with positives
        let asg = toy_assignment(n, &[1], 4 * t);
        let loss = tpn_loss(&out, &asg, &sampled, 0.0).unwrap();
        assert!((loss.total - loss.cls).abs() < 1e-15);

        // confident correct logits and exact deltas drive the loss to 0
        let mut good = TpnOutput {
            regression: Tensor::filled(&[n, 4 * t], 0.25),
            actionness_logits: Tensor::zeros(&[n, 2]),
        };
        for i in 0..n {
            let is_pos = i == 1;
            good.actionness_logits.data_mut()[2 * i] = if is_pos { -50.0 } else { 50.0 };
            good.actionness_logits.data_mut()[2 * i + 1] = if is_pos { 50.0 } else { -50.0 };
        }
        let loss = tpn_loss(&good, &asg, &sampled, 1.0).unwrap();
        assert!(loss.total < 1e-12, "loss {}", loss.total);

        assert!(tpn_loss(&out, &asg, &[], 1.0).is_err());
        assert!(tpn_loss(&out, &asg, &[0, 0], 1.0).is_err());
        assert!(tpn_loss(&out, &asg, &[9], 1.0).is_err());
    }

    #[test]
    fn minibatch_sampling() {
        let asg = toy_assignment(100, &[3, 7, 11], 4);
        let s = sample_minibatch(&asg, 32, 0.5, 42).unwrap();
        assert_eq!(s.len(), 32);
        let pos: Vec<usize> = s.iter().copied().filter(|&i| [3, 7, 11].contains(&i)).collect();
        assert_eq!(pos.len(), 3, "all scarce positives taken");
        // deterministic
        assert_eq!(s, sample_minibatch(&asg, 32, 0.5, 42).unwrap());
        assert_ne!(s, sample_minibatch(&asg, 32, 0.5, 43).unwrap());
        // no positives: all negative, full size
        let asg = toy_assignment(100, &[], 4);
        let s = sample_minibatch(&asg, 16, 0.5, 1).unwrap();
        assert_eq!(s.len(), 16);
        // positives plentiful: exactly size*pos_fraction of them
        let many: Vec<usize> = (0..50).collect();
        let asg = toy_assignment(100, &many, 4);
        let s = sample_minibatch(&asg, 32, 0.5, 9).unwrap();
        assert_eq!(s.iter().filter(|&&i| i < 50).count(), 16);
        assert_eq!(s.len(), 32);
    }

    #[test]
    fn propose_basics() {
        let t = 2;
        let grid = tiny_grid(2, 2, 8, t, &[8.0]);
        let n = 4;
        let out = TpnOutput {
            regression: Tensor::zeros(&[n, 4 * t]),
            actionness_logits: Tensor::zeros(&[n, 2]),
        };
        let cfg = ProposalConfig { nms_iou: 0.7, keep_top: 300, image_w: 16.0, image_h: 16.0 };
        let props = propose(&out, &grid, &cfg).unwrap();
        // zero deltas: proposals are the anchors themselves (disjoint here)
        let anchors = generate_anchors(&grid);
        assert_eq!(props.len(), 4);
        for p in &props {
            assert!(anchors.iter().any(|a| a.boxes == p.boxes));
            assert!((p.actionness - 0.5).abs() < 1e-12);
        }
        // keep_top caps the count
        let props = propose(&out, &grid, &ProposalConfig { keep_top: 2, ..cfg.clone() }).unwrap();
        assert_eq!(props.len(), 2);
        // identical anchors (1-cell grid, duplicate scale) collapse to one
        let grid1 = tiny_grid(1, 1, 8, t, &[8.0, 8.0]);
        let out1 = TpnOutput {
            regression: Tensor::zeros(&[2, 4 * t]),
            actionness_logits: Tensor::zeros(&[2, 2]),
        };
        let props = propose(&out1, &grid1, &cfg).unwrap();
        assert_eq!(props.len(), 1);
    }

    struct TpnWithLoss {
        tpn: Tpn,
        clip: Tensor,
        grid: AnchorGrid,
        asg: AnchorAssignment,
        sampled: Vec<usize>,
    }

    impl TpnWithLoss {
        fn loss(&self) -> Result<f64> {
            let (out, _, _) = self.tpn.forward(&self.clip, &self.grid)?;
            Ok(tpn_loss(&out, &self.asg, &self.sampled, 1.0)?.total)
        }

        fn step_grads(&mut self) -> Result<f64> {
            let (out, _, cache) = self.tpn.forward(&self.clip, &self.grid)?;
            let l = tpn_loss(&out, &self.asg, &self.sampled, 1.0)?;
            self.tpn.backward(&cache, &l.g_regression, &l.g_actionness, None)?;
            Ok(l.total)
        }
    }

    impl ParamSet for TpnWithLoss {
        fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
            self.tpn.visit_params(f);
        }
    }

    fn toy_instance(seed: u64) -> TpnWithLoss {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BackboneConfig { t: 2, channels: vec![2, 3], ..Default::default() };
        let tpn = Tpn::new(cfg, 2, &mut rng).unwrap();
        let clip = Tensor::randn(&[2, 8, 8, 3], 1.0, &mut rng);
        let grid = tiny_grid(2, 2, 4, 2, &[4.0, 7.0]);
        let anchors = generate_anchors(&grid);
        let gt = Tubelet::cuboid(BBox::new(0.5, 0.5, 4.5, 4.5), 2, 0.0, 0);
        let asg = assign_labels(&anchors, std::slice::from_ref(&gt)).unwrap();
        let sampled: Vec<usize> = (0..anchors.len()).collect();
        TpnWithLoss { tpn, clip, grid, asg, sampled }
    }

    #[test]
    fn tpn_gradcheck() {
        let mut m = toy_instance(31);
        assert!(m.asg.positives().count() >= 1);
        // zero-initialized biases leave ReLU inputs exactly on the kink;
        // jitter everything off it before differentiating
        let mut rng = ChaCha8Rng::seed_from_u64(310);
        jitter_params(&mut m, 0.05, &mut rng);
        zero_grads(&mut m);
        m.step_grads().unwrap();
        let worst = finite_diff_check(&mut m, 1e-5, |m| m.loss()).unwrap();
        assert!(worst < 1e-4, "worst rel err {}", worst);
    }

    #[test]
    fn tpn_overfits_one_clip() {
        let mut m = toy_instance(32);
        let sched = LrSchedule {
            base_lr: 0.05,
            warmup_start_lr: 0.005,
            warmup_epochs: 0.05,
            total_epochs: 2.0,
        };
        let sgd = SgdConfig { momentum: 0.9, weight_decay: 1e-4 };
        let mut losses = Vec::new();
        for step in 0..200 {
            zero_grads(&mut m);
            let l = m.step_grads().unwrap();
            losses.push(l);
            sgd_step(&mut m, &sched, step as f64 / 200.0, &sgd).unwrap();
        }
        let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(
            tail < 0.1 * head,
            "loss did not collapse: first10 {} last10 {}",
            head,
            tail
        );
    }
}
