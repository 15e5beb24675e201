//! Short-term human-context relation within one clip: pool a tubelet's
//! volume into a fixed human representation, predict an adaptive per-frame
//! attention kernel from it, erase the tubelet from the feature map so the
//! kernel must look at context, score the erased map with the kernel,
//! attention-pool a context vector, and fuse both into one descriptor.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::Tubelet;
use crate::layers::Linear;
use crate::tensor::{
    conv2d_same, conv2d_same_backward, sigmoid, sigmoid_backward, Parameter, Tensor,
};
use crate::tpn::ClipFeature;

pub const ROI_SIZE: usize = 7;
pub const KERNEL_SIZE: usize = 3;

/// Fixed-size pooled tubelet volume, [T, 7, 7, C].
#[derive(Debug, Clone)]
pub struct HumanRepresentation {
    pub values: Tensor,
}

/// Per-frame 3x3 attention kernel, [T, 3, 3].
#[derive(Debug, Clone)]
pub struct AdaptiveKernel {
    pub values: Tensor,
}

/// Per-location attention in (0,1), [T, H', W'].
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub values: Tensor,
}

/// Source feature index for every pooled cell, for the backward scatter.
pub struct RoiArgmax {
    indices: Vec<usize>,
    feature_shape: Vec<usize>,
}

fn cell_range(lo: f64, hi: f64, bins: usize, i: usize, limit: usize) -> (usize, usize) {
    let span = hi - lo;
    let c_lo = lo + span * i as f64 / bins as f64;
    let c_hi = lo + span * (i + 1) as f64 / bins as f64;
    let start = (c_lo.floor().max(0.0) as usize).min(limit.saturating_sub(1));
    let end = (c_hi.ceil().max(0.0) as usize).min(limit);
    if end > start {
        (start, end)
    } else {
        // sub-cell span: fall back to the single cell nearest the center
        let center = (c_lo + c_hi) / 2.0;
        let idx = (center.floor().max(0.0) as usize).min(limit.saturating_sub(1));
        (idx, idx + 1)
    }
}

/// 3D RoI max pooling: each frame's box is projected onto the feature grid
/// by stride division and partitioned into a 7x7 cell grid; each cell takes
/// the max over the feature cells it overlaps, or the nearest cell when the
/// box is thinner than a feature cell.
pub fn roi_pool_3d(feature: &ClipFeature, tubelet: &Tubelet) -> Result<(HumanRepresentation, RoiArgmax)> {
    let s = feature.values.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if tubelet.boxes.len() != t {
        return Err(Error::shape(
            "roi_pool_3d",
            format!("tubelet length {} vs feature T {}", tubelet.boxes.len(), t),
        ));
    }
    let stride = feature.stride as f64;
    let fd = feature.values.data();
    let mut out = Tensor::zeros(&[t, ROI_SIZE, ROI_SIZE, c]);
    let od = out.data_mut();
    let mut indices = vec![0usize; t * ROI_SIZE * ROI_SIZE * c];
    for ti in 0..t {
        let b = &tubelet.boxes[ti];
        let (bx1, bx2) = (b.x1 / stride, b.x2 / stride);
        let (by1, by2) = (b.y1 / stride, b.y2 / stride);
        for oy in 0..ROI_SIZE {
            let (ys, ye) = cell_range(by1, by2, ROI_SIZE, oy, h);
            for ox in 0..ROI_SIZE {
                let (xs, xe) = cell_range(bx1, bx2, ROI_SIZE, ox, w);
                let obase = ((ti * ROI_SIZE + oy) * ROI_SIZE + ox) * c;
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for y in ys..ye {
                        for x in xs..xe {
                            let idx = ((ti * h + y) * w + x) * c + ci;
                            if fd[idx] > best {
                                best = fd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    od[obase + ci] = best;
                    indices[obase + ci] = best_idx;
                }
            }
        }
    }
    Ok((
        HumanRepresentation { values: out },
        RoiArgmax { indices, feature_shape: s.to_vec() },
    ))
}

/// Scatter pooled-cell gradients back to their argmax feature cells.
pub fn roi_pool_3d_backward(argmax: &RoiArgmax, g_human: &Tensor) -> Result<Tensor> {
    if g_human.len() != argmax.indices.len() {
        return Err(Error::shape("roi_pool_3d_backward", "grad vs argmax size".to_string()));
    }
    let mut gf = Tensor::zeros(&argmax.feature_shape);
    let gfd = gf.data_mut();
    for (&idx, &g) in argmax.indices.iter().zip(g_human.data().iter()) {
        gfd[idx] += g;
    }
    Ok(gf)
}

/// Cells of the feature map whose centers fall inside the tubelet's box
/// (projected by stride, half-open on the far edges) are zeroed across all
/// channels. Returns the erased map and the per-location keep mask.
pub fn erase_tubelet(feature: &ClipFeature, tubelet: &Tubelet) -> Result<(ClipFeature, Tensor)> {
    let s = feature.values.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if tubelet.boxes.len() != t {
        return Err(Error::shape(
            "erase_tubelet",
            format!("tubelet length {} vs feature T {}", tubelet.boxes.len(), t),
        ));
    }
    let stride = feature.stride as f64;
    let mut erased = feature.values.clone();
    let ed = erased.data_mut();
    let mut mask = Tensor::filled(&[t, h, w], 1.0);
    let md = mask.data_mut();
    for ti in 0..t {
        let b = &tubelet.boxes[ti];
        let (bx1, bx2) = (b.x1 / stride, b.x2 / stride);
        let (by1, by2) = (b.y1 / stride, b.y2 / stride);
        for y in 0..h {
            let cy = y as f64 + 0.5;
            if cy < by1 || cy >= by2 {
                continue;
            }
            for x in 0..w {
                let cx = x as f64 + 0.5;
                if cx < bx1 || cx >= bx2 {
                    continue;
                }
                md[(ti * h + y) * w + x] = 0.0;
                let base = ((ti * h + y) * w + x) * c;
                ed[base..base + c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    Ok((ClipFeature { values: erased, stride: feature.stride }, mask))
}

/// Trainable parameters of the short-term relation head.
pub struct StrParams {
    /// g_theta: flattened human representation -> T*3*3 kernel.
    pub kernel_head: Linear,
    /// Human embedding for the fused descriptor prefix.
    pub human_embed: Linear,
    /// Shared 1x1x1 channel reduction used before the kernel convolution.
    pub reduce_w: Parameter,
    pub reduce_b: Parameter,
    t: usize,
    c: usize,
    d_h: usize,
}

impl StrParams {
    pub fn new(t: usize, c: usize, d_h: usize, rng: &mut impl Rng) -> StrParams {
        let n_in = t * ROI_SIZE * ROI_SIZE * c;
        StrParams {
            kernel_head: Linear::new(n_in, t * KERNEL_SIZE * KERNEL_SIZE, 0.01, rng),
            human_embed: Linear::new(n_in, d_h, (1.0 / n_in as f64).sqrt(), rng),
            reduce_w: Parameter::new(Tensor::randn(&[c], (1.0 / c as f64).sqrt(), rng)),
            reduce_b: Parameter::new(Tensor::zeros(&[1])),
            t,
            c,
            d_h,
        }
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    /// Fused descriptor width d = d_h + C.
    pub fn d(&self) -> usize {
        self.d_h + self.c
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("str.kernel_head.weight", &mut self.kernel_head.weight);
        f("str.kernel_head.bias", &mut self.kernel_head.bias);
        f("str.human_embed.weight", &mut self.human_embed.weight);
        f("str.human_embed.bias", &mut self.human_embed.bias);
        f("str.reduce.weight", &mut self.reduce_w);
        f("str.reduce.bias", &mut self.reduce_b);
    }
}

/// K^h = g_theta(F^h): one affine map from the flattened representation.
pub fn adaptive_kernel(params: &StrParams, human: &HumanRepresentation) -> Result<AdaptiveKernel> {
    let flat = flatten_human(params, human)?;
    let out = params.kernel_head.forward(&flat)?;
    Ok(AdaptiveKernel {
        values: out.reshape(&[params.t, KERNEL_SIZE, KERNEL_SIZE])?,
    })
}

fn flatten_human(params: &StrParams, human: &HumanRepresentation) -> Result<Tensor> {
    let n_in = params.t * ROI_SIZE * ROI_SIZE * params.c;
    if human.values.len() != n_in {
        return Err(Error::shape(
            "flatten_human",
            format!("human size {} vs expected {}", human.values.len(), n_in),
        ));
    }
    human.values.clone().reshape(&[1, n_in])
}

/// Channel-reduce the erased map with the shared 1x1x1 projection, convolve
/// each frame with its kernel slice, and squash through a sigmoid.
pub fn attention_map(
    params: &StrParams,
    erased: &ClipFeature,
    kernel: &AdaptiveKernel,
) -> Result<(AttentionMap, AttnCache)> {
    let s = erased.values.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if kernel.values.shape()[0] != t {
        return Err(Error::shape(
            "attention_map",
            format!("kernel T {} vs feature T {}", kernel.values.shape()[0], t),
        ));
    }
    if c != params.c {
        return Err(Error::shape("attention_map", "channel count vs params".to_string()));
    }
    let mut reduced = Tensor::zeros(&[t, h, w]);
    let rw = params.reduce_w.value.data();
    let rb = params.reduce_b.value.data()[0];
    let ed = erased.values.data();
    {
        let rd = reduced.data_mut();
        for i in 0..t * h * w {
            let base = i * c;
            let mut acc = rb;
            for ci in 0..c {
                acc += ed[base + ci] * rw[ci];
            }
            rd[i] = acc;
        }
    }
    let mut pre = Tensor::zeros(&[t, h, w]);
    for ti in 0..t {
        let frame = Tensor::from_vec(&[h, w], reduced.data()[ti * h * w..(ti + 1) * h * w].to_vec())?;
        let k = Tensor::from_vec(
            &[KERNEL_SIZE, KERNEL_SIZE],
            kernel.values.data()[ti * 9..(ti + 1) * 9].to_vec(),
        )?;
        let conv = conv2d_same(&frame, &k)?;
        pre.data_mut()[ti * h * w..(ti + 1) * h * w].copy_from_slice(conv.data());
    }
    let attn = sigmoid(&pre);
    Ok((AttentionMap { values: attn.clone() }, AttnCache { reduced, attn }))
}

pub struct AttnCache {
    reduced: Tensor,
    attn: Tensor,
}

/// f_hat^h[c] = sum over (t,i,j) of A[t,i,j] * F^e[t,i,j,c]. Pooling reads
/// the erased map, so erased content can never leak into the context.
pub fn attention_pool_3d(erased: &ClipFeature, attn: &AttentionMap) -> Result<Tensor> {
    let s = erased.values.shape();
    let (t, h, w, c) = (s[0], s[1], s[2], s[3]);
    if attn.values.shape() != [t, h, w] {
        return Err(Error::shape("attention_pool_3d", "attention vs feature extent".to_string()));
    }
    let mut out = Tensor::zeros(&[c]);
    let od = out.data_mut();
    let ed = erased.values.data();
    let ad = attn.values.data();
    for i in 0..t * h * w {
        let a = ad[i];
        if a == 0.0 {
            continue;
        }
        let base = i * c;
        for ci in 0..c {
            od[ci] += a * ed[base + ci];
        }
    }
    Ok(out)
}

/// f = [f^h ; f_hat^h]: human embedding prefix, pooled context suffix.
pub fn fuse_features(params: &StrParams, human_flat: &Tensor, context: &Tensor) -> Result<Tensor> {
    if context.len() != params.c {
        return Err(Error::shape("fuse_features", "context width vs C".to_string()));
    }
    let fh = params.human_embed.forward(human_flat)?;
    let mut data = Vec::with_capacity(params.d());
    data.extend_from_slice(fh.data());
    data.extend_from_slice(context.data());
    Tensor::from_vec(&[params.d()], data)
}

/// Everything the backward pass needs from one tubelet's forward.
pub struct StrCache {
    pub human_flat: Tensor,
    roi_argmax: RoiArgmax,
    erased: ClipFeature,
    erase_mask: Tensor,
    attn_cache: AttnCache,
}

/// Fused descriptor and attention map for one tubelet.
pub struct StrOutput {
    pub fused: Tensor,
    pub attention: AttentionMap,
}

pub fn str_forward(
    params: &StrParams,
    feature: &ClipFeature,
    tubelet: &Tubelet,
) -> Result<(StrOutput, StrCache)> {
    let (human, roi_argmax) = roi_pool_3d(feature, tubelet)?;
    let human_flat = flatten_human(params, &human)?;
    let kernel = adaptive_kernel(params, &human)?;
    let (erased, erase_mask) = erase_tubelet(feature, tubelet)?;
    let (attention, attn_cache) = attention_map(params, &erased, &kernel)?;
    let context = attention_pool_3d(&erased, &attention)?;
    let fused = fuse_features(params, &human_flat, &context)?;
    Ok((
        StrOutput { fused, attention },
        StrCache { human_flat, roi_argmax, erased, erase_mask, attn_cache },
    ))
}

/// Backward from a gradient on the fused descriptor; accumulates parameter
/// grads and returns the gradient w.r.t. the clip feature volume.
pub fn str_backward(params: &mut StrParams, cache: &StrCache, g_fused: &Tensor) -> Result<Tensor> {
    let (t, c, d_h) = (params.t, params.c, params.d_h);
    if g_fused.len() != params.d() {
        return Err(Error::shape("str_backward", "grad width vs d".to_string()));
    }
    let s = cache.erased.values.shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let g_fh = Tensor::from_vec(&[1, d_h], g_fused.data()[..d_h].to_vec())?;
    let g_ctx = &g_fused.data()[d_h..];

    // fused prefix: human embedding
    let mut g_human_flat = params.human_embed.backward(&cache.human_flat, &g_fh)?;

    // fused suffix: attention pooling reads (erased, attn)
    let mut g_erased = Tensor::zeros(&s);
    let mut g_attn = Tensor::zeros(&[t, h, w]);
    {
        let ed = cache.erased.values.data();
        let ad = cache.attn_cache.attn.data();
        let ge = g_erased.data_mut();
        let ga = g_attn.data_mut();
        for i in 0..t * h * w {
            let base = i * c;
            let a = ad[i];
            let mut dot = 0.0;
            for ci in 0..c {
                ge[base + ci] += a * g_ctx[ci];
                dot += ed[base + ci] * g_ctx[ci];
            }
            ga[i] = dot;
        }
    }

    // attention map: sigmoid, then per-frame convolution, then reduction
    let g_pre = sigmoid_backward(&cache.attn_cache.attn, &g_attn);
    let mut g_reduced = Tensor::zeros(&[t, h, w]);
    let mut g_kernel_flat = Tensor::zeros(&[1, t * 9]);
    for ti in 0..t {
        let frame = Tensor::from_vec(
            &[h, w],
            cache.attn_cache.reduced.data()[ti * h * w..(ti + 1) * h * w].to_vec(),
        )?;
        // kernel values recomputed from the cached human flat: cheaper than
        // caching and exact (affine map)
        let kernel_row = params.kernel_head.forward(&cache.human_flat)?;
        let k = Tensor::from_vec(&[3, 3], kernel_row.data()[ti * 9..(ti + 1) * 9].to_vec())?;
        let gp = Tensor::from_vec(&[h, w], g_pre.data()[ti * h * w..(ti + 1) * h * w].to_vec())?;
        let (gframe, gk) = conv2d_same_backward(&frame, &k, &gp)?;
        g_reduced.data_mut()[ti * h * w..(ti + 1) * h * w].copy_from_slice(gframe.data());
        g_kernel_flat.data_mut()[ti * 9..(ti + 1) * 9].copy_from_slice(gk.data());
    }
    let g_human_from_kernel = params.kernel_head.backward(&cache.human_flat, &g_kernel_flat)?;
    g_human_flat.add_scaled(&g_human_from_kernel, 1.0);

    // channel reduction
    {
        let ed = cache.erased.values.data();
        let gr = g_reduced.data();
        let ge = g_erased.data_mut();
        let rw = params.reduce_w.value.data();
        let gw = params.reduce_w.grad.data_mut();
        let gb = params.reduce_b.grad.data_mut();
        for i in 0..t * h * w {
            let g = gr[i];
            if g == 0.0 {
                continue;
            }
            gb[0] += g;
            let base = i * c;
            for ci in 0..c {
                ge[base + ci] += g * rw[ci];
                gw[ci] += g * ed[base + ci];
            }
        }
    }

    // erasure: gradients at erased cells stop here
    {
        let md = cache.erase_mask.data();
        let ge = g_erased.data_mut();
        for i in 0..t * h * w {
            if md[i] == 0.0 {
                let base = i * c;
                ge[base..base + c].iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    // human path: scatter pooled grads back through the RoI argmaxes
    let mut g_feature = roi_pool_3d_backward(&cache.roi_argmax, &g_human_flat)?;
    g_feature.add_scaled(&g_erased, 1.0);
    Ok(g_feature)
}
