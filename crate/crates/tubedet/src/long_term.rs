//! Long-term relation reasoning across clips: build a temporal window of
//! tubelets around a center clip, score pairwise relations from feature
//! similarity plus geometric overlap, normalize into a graph, propagate
//! features with one graph convolution, and classify the result.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{tubelet_iou, Tubelet};
use crate::layers::Linear;
use crate::tensor::{matmul, matmul_nt, matmul_tn, sigmoid, softmax_rows, softmax_rows_backward, Parameter, Tensor};

/// One slot occupant in a temporal window. Padded slots carry no tubelet
/// and a zero feature row.
#[derive(Debug, Clone)]
pub struct WindowMember {
    pub tubelet: Option<Tubelet>,
    /// Clip offset relative to the window center, in -w..=w.
    pub clip_offset: isize,
    /// Index within the source clip's tubelet list; 0 for padding.
    pub within_clip: usize,
}

/// All tubelets of clips m-w..m+w, with their features stacked into X.
#[derive(Debug, Clone)]
pub struct TemporalWindow {
    pub center_clip: usize,
    pub radius: usize,
    pub members: Vec<WindowMember>,
    /// [N, d] member features, zero rows for padding.
    pub x: Tensor,
    /// Rows of `members`/`x` belonging to the center clip.
    pub center_start: usize,
    pub center_len: usize,
}

impl TemporalWindow {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    pub fn d(&self) -> usize {
        self.x.shape()[1]
    }

    /// The center clip's member rows.
    pub fn center_rows(&self) -> std::ops::Range<usize> {
        self.center_start..self.center_start + self.center_len
    }
}

/// Concatenate the tubelets of clips m-w..m+w. A slot outside the video,
/// or an in-range clip with no tubelets, contributes one zero placeholder
/// member so the window always spans 2w+1 slots.
pub fn build_window(
    clips: &[Vec<(Tubelet, Tensor)>],
    m: usize,
    w: usize,
    d: usize,
) -> Result<TemporalWindow> {
    if m >= clips.len() {
        return Err(Error::invalid("build_window", format!("center {} of {} clips", m, clips.len())));
    }
    let mut members = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut center_start = 0;
    let mut center_len = 0;
    for offset in -(w as isize)..=(w as isize) {
        let clip = m as isize + offset;
        let slot: Option<&Vec<(Tubelet, Tensor)>> =
            if clip >= 0 && (clip as usize) < clips.len() { Some(&clips[clip as usize]) } else { None };
        if offset == 0 {
            center_start = members.len();
        }
        match slot {
            Some(list) if !list.is_empty() => {
                for (i, (tb, feat)) in list.iter().enumerate() {
                    if feat.len() != d {
                        return Err(Error::shape(
                            "build_window",
                            format!("feature width {} vs d {}", feat.len(), d),
                        ));
                    }
                    members.push(WindowMember {
                        tubelet: Some(tb.clone()),
                        clip_offset: offset,
                        within_clip: i,
                    });
                    rows.extend_from_slice(feat.data());
                }
            }
            _ => {
                members.push(WindowMember { tubelet: None, clip_offset: offset, within_clip: 0 });
                rows.extend(std::iter::repeat(0.0).take(d));
            }
        }
        if offset == 0 {
            center_len = members.len() - center_start;
        }
    }
    let n = members.len();
    Ok(TemporalWindow {
        center_clip: m,
        radius: w,
        members,
        x: Tensor::from_vec(&[n, d], rows)?,
        center_start,
        center_len,
    })
}

/// Trainable relation parameters; gamma stays fixed (untrained scalar).
pub struct RelationParams {
    pub phi_weight: Parameter,
    pub phi_bias: Parameter,
    pub gamma: f64,
    pub gcn_weight: Parameter,
}

impl RelationParams {
    pub fn new(d: usize, gamma: f64, rng: &mut impl Rng) -> RelationParams {
        let std = (1.0 / d as f64).sqrt();
        RelationParams {
            phi_weight: Parameter::new(Tensor::randn(&[d, d], std, rng)),
            phi_bias: Parameter::new(Tensor::zeros(&[d])),
            gamma,
            gcn_weight: Parameter::new(Tensor::randn(&[d, d], std, rng)),
        }
    }

    pub fn d(&self) -> usize {
        self.phi_weight.value.shape()[0]
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("ltr.phi.weight", &mut self.phi_weight);
        f("ltr.phi.bias", &mut self.phi_bias);
        f("ltr.gcn.weight", &mut self.gcn_weight);
    }
}

fn phi(params: &RelationParams, x: &Tensor) -> Result<Tensor> {
    let mut p = matmul(x, &params.phi_weight.value)?;
    let d = params.d();
    let b = params.phi_bias.value.data();
    for row in p.data_mut().chunks_mut(d) {
        for (v, bi) in row.iter_mut().zip(b.iter()) {
            *v += bi;
        }
    }
    Ok(p)
}

/// Positional overlap between window members: tubelets from different
/// clips are compared frame-by-frame at matching positions, measuring
/// track consistency; any pair involving padding scores 0.
fn member_iou(a: &WindowMember, b: &WindowMember) -> Result<f64> {
    match (&a.tubelet, &b.tubelet) {
        (Some(ta), Some(tb)) => tubelet_iou(ta, tb),
        _ => Ok(0.0),
    }
}

/// e_ij = phi(f_i)^T phi(f_j) + gamma * iou(h_i, h_j), for center members i
/// against all window members j.
pub fn edge_scores(window: &TemporalWindow, params: &RelationParams) -> Result<Tensor> {
    if window.d() != params.d() {
        return Err(Error::shape("edge_scores", "window d vs params d".to_string()));
    }
    let p = phi(params, &window.x)?;
    let n = window.n();
    let nm = window.center_len;
    let d = window.d();
    let mut pm = Tensor::zeros(&[nm, d]);
    pm.data_mut()
        .copy_from_slice(&p.data()[window.center_start * d..(window.center_start + nm) * d]);
    let mut scores = matmul_nt(&pm, &p)?;
    if params.gamma != 0.0 {
        for (i, row) in window.center_rows().enumerate() {
            for j in 0..n {
                let iou = member_iou(&window.members[row], &window.members[j])?;
                scores.data_mut()[i * n + j] += params.gamma * iou;
            }
        }
    }
    Ok(scores)
}

/// Row-wise softmax of the raw scores: each center tubelet's outgoing edge
/// weights form a probability vector.
pub fn normalize_graph(scores: &Tensor) -> Result<Tensor> {
    softmax_rows(scores)
}

/// Z_m = G X W, the relation-augmented center-clip features.
pub fn gcn_forward(graph: &Tensor, window: &TemporalWindow, params: &RelationParams) -> Result<Tensor> {
    let u = matmul(graph, &window.x)?;
    matmul(&u, &params.gcn_weight.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassMode {
    SingleLabel,
    MultiLabel,
}

/// Dropout then affine d -> K; probabilities via softmax or sigmoid.
pub struct Classifier {
    pub linear: Linear,
    pub mode: ClassMode,
    pub dropout_p: f64,
}

pub struct ClassifierCache {
    dropped: Tensor,
    /// Scaled keep mask; None when dropout was inactive.
    mask: Option<Tensor>,
}

impl Classifier {
    pub fn new(d: usize, k: usize, mode: ClassMode, dropout_p: f64, rng: &mut impl Rng) -> Result<Classifier> {
        if k < 2 {
            return Err(Error::invalid("Classifier", "K must be >= 2"));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::invalid("Classifier", "dropout_p outside [0,1)"));
        }
        Ok(Classifier { linear: Linear::new(d, k, (1.0 / d as f64).sqrt(), rng), mode, dropout_p })
    }

    pub fn k(&self) -> usize {
        self.linear.d_out()
    }

    pub fn forward_logits(&self, z: &Tensor, training: bool, rng_seed: u64) -> Result<(Tensor, ClassifierCache)> {
        let (dropped, mask) = if training && self.dropout_p > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let keep = 1.0 - self.dropout_p;
            let mut mask = Tensor::zeros(z.shape());
            for v in mask.data_mut() {
                *v = if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
            let mut dropped = z.clone();
            for (d, m) in dropped.data_mut().iter_mut().zip(mask.data().iter()) {
                *d *= m;
            }
            (dropped, Some(mask))
        } else {
            (z.clone(), None)
        };
        let logits = self.linear.forward(&dropped)?;
        Ok((logits, ClassifierCache { dropped, mask }))
    }

    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        match self.mode {
            ClassMode::SingleLabel => softmax_rows(logits),
            ClassMode::MultiLabel => Ok(sigmoid(logits)),
        }
    }

    pub fn backward(&mut self, cache: &ClassifierCache, g_logits: &Tensor) -> Result<Tensor> {
        let mut gz = self.linear.backward(&cache.dropped, g_logits)?;
        if let Some(mask) = &cache.mask {
            for (g, m) in gz.data_mut().iter_mut().zip(mask.data().iter()) {
                *g *= m;
            }
        }
        Ok(gz)
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("cls.weight", &mut self.linear.weight);
        f("cls.bias", &mut self.linear.bias);
    }
}

/// Spec-shaped convenience: class probabilities for the center features.
pub fn classify(
    classifier: &Classifier,
    z: &Tensor,
    training: bool,
    rng_seed: u64,
) -> Result<Tensor> {
    let (logits, _) = classifier.forward_logits(z, training, rng_seed)?;
    classifier.probabilities(&logits)
}

/// Relation graph plus classifier over it.
pub struct LtrParams {
    pub relation: RelationParams,
    pub classifier: Classifier,
}

impl LtrParams {
    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        self.relation.visit(f);
        self.classifier.visit(f);
    }
}

pub struct LtrCache {
    p: Tensor,
    graph: Tensor,
    u: Tensor,
    cls: ClassifierCache,
}

impl LtrCache {
    /// Row-stochastic relation graph, [N_m, N].
    pub fn graph(&self) -> &Tensor {
        &self.graph
    }
}

/// Window -> edge scores -> graph -> GCN -> classifier logits for the
/// center members.
pub fn ltr_forward(
    params: &LtrParams,
    window: &TemporalWindow,
    training: bool,
    rng_seed: u64,
) -> Result<(Tensor, LtrCache)> {
    let p = phi(&params.relation, &window.x)?;
    let scores = edge_scores(window, &params.relation)?;
    let graph = normalize_graph(&scores)?;
    let u = matmul(&graph, &window.x)?;
    let z = matmul(&u, &params.relation.gcn_weight.value)?;
    let (logits, cls) = params.classifier.forward_logits(&z, training, rng_seed)?;
    Ok((logits, LtrCache { p, graph, u, cls }))
}

/// Accumulates parameter grads; returns the gradient w.r.t. the window's
/// stacked features X (padding rows included; callers drop them).
pub fn ltr_backward(
    params: &mut LtrParams,
    window: &TemporalWindow,
    cache: &LtrCache,
    g_logits: &Tensor,
) -> Result<Tensor> {
    let d = window.d();
    let nm = window.center_len;

    let g_z = params.classifier.backward(&cache.cls, g_logits)?;

    // Z = U W
    let g_w = matmul_tn(&cache.u, &g_z)?;
    params.relation.gcn_weight.grad.add_scaled(&g_w, 1.0);
    let g_u = matmul_nt(&g_z, &params.relation.gcn_weight.value)?;

    // U = G X
    let g_graph = matmul_nt(&g_u, &window.x)?;
    let mut g_x = matmul_tn(&cache.graph, &g_u)?;

    // graph = softmax(scores)
    let g_scores = softmax_rows_backward(&cache.graph, &g_graph)?;

    // scores = P_m P^T (+ fixed iou term): dP_m = dE P, dP = dE^T P_m
    let mut pm = Tensor::zeros(&[nm, d]);
    pm.data_mut()
        .copy_from_slice(&cache.p.data()[window.center_start * d..(window.center_start + nm) * d]);
    let g_pm = matmul(&g_scores, &cache.p)?;
    let mut g_p = matmul_tn(&g_scores, &pm)?;
    for i in 0..nm {
        let dst = (window.center_start + i) * d;
        for j in 0..d {
            g_p.data_mut()[dst + j] += g_pm.data()[i * d + j];
        }
    }

    // P = X phi_w + phi_b
    let g_phi_w = matmul_tn(&window.x, &g_p)?;
    params.relation.phi_weight.grad.add_scaled(&g_phi_w, 1.0);
    {
        let gb = params.relation.phi_bias.grad.data_mut();
        for row in g_p.data().chunks(d) {
            for (b, g) in gb.iter_mut().zip(row.iter()) {
                *b += g;
            }
        }
    }
    let g_x_phi = matmul_nt(&g_p, &params.relation.phi_weight.value)?;
    g_x.add_scaled(&g_x_phi, 1.0);
    Ok(g_x)
}

/// Top-k strongest neighbors of one center tubelet: (member index, weight)
/// in descending weight order, self-edges included.
pub fn top_neighbors(graph: &Tensor, center_row: usize, k: usize) -> Result<Vec<(usize, f64)>> {
    let (rows, n) = (graph.shape()[0], graph.shape()[1]);
    if center_row >= rows {
        return Err(Error::invalid("top_neighbors", format!("row {} of {}", center_row, rows)));
    }
    let row = &graph.data()[center_row * n..(center_row + 1) * n];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    Ok(order.into_iter().take(k).map(|j| (j, row[j])).collect())
}
