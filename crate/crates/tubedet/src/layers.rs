//! Trainable layers over [T, H, W, C] clip volumes: factorized spatial and
//! temporal convolutions, 2x2 spatial max pooling, ReLU, and dense layers.
//!
//! Every layer exposes `forward` plus a `backward` that accumulates into
//! its parameter gradients and returns the gradient w.r.t. its input.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Parameter, Tensor};

fn dims4(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape(op, format!("expected [T,H,W,C], got {:?}", s)));
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// 1 x k x k convolution: each frame convolved spatially, zero padded to
/// keep H and W. Weight layout [c_out, k, k, c_in].
#[derive(Debug, Clone)]
pub struct SpatialConv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub k: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl SpatialConv {
    pub fn new(c_in: usize, c_out: usize, k: usize, std: f64, rng: &mut impl Rng) -> Result<SpatialConv> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::invalid("SpatialConv", "kernel must be odd"));
        }
        Ok(SpatialConv {
            weight: Parameter::new(Tensor::randn(&[c_out, k, k, c_in], std, rng)),
            bias: Parameter::new(Tensor::zeros(&[c_out])),
            k,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = dims4("SpatialConv::forward", x)?;
        if c != self.c_in {
            return Err(Error::shape("SpatialConv::forward", format!("{} channels, want {}", c, self.c_in)));
        }
        let k = self.k;
        let half = k / 2;
        let co = self.c_out;
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[t, h, w, co]);
        let od = out.data_mut();
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let obase = ((ti * h + y) * w + xx) * co;
                    for o in 0..co {
                        let mut acc = bd[o];
                        for dy in 0..k {
                            let yy = y as isize + dy as isize - half as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xs = xx as isize + dx as isize - half as isize;
                                if xs < 0 || xs >= w as isize {
                                    continue;
                                }
                                let ibase = ((ti * h + yy as usize) * w + xs as usize) * c;
                                let wbase = ((o * k + dy) * k + dx) * c;
                                for ci in 0..c {
                                    acc += xd[ibase + ci] * wd[wbase + ci];
                                }
                            }
                        }
                        od[obase + o] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor, gout: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = dims4("SpatialConv::backward", x)?;
        let k = self.k;
        let half = k / 2;
        let co = self.c_out;
        let wd = self.weight.value.data();
        let xd = x.data();
        let gd = gout.data();
        if gout.shape() != [t, h, w, co] {
            return Err(Error::shape("SpatialConv::backward", "gout shape".to_string()));
        }
        let mut gx = Tensor::zeros(&[t, h, w, c]);
        let gxd = gx.data_mut();
        let gwd = self.weight.grad.data_mut();
        let gbd = self.bias.grad.data_mut();
        for ti in 0..t {
            for y in 0..h {
                for xx in 0..w {
                    let obase = ((ti * h + y) * w + xx) * co;
                    for o in 0..co {
                        let g = gd[obase + o];
                        if g == 0.0 {
                            continue;
                        }
                        gbd[o] += g;
                        for dy in 0..k {
                            let yy = y as isize + dy as isize - half as isize;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            for dx in 0..k {
                                let xs = xx as isize + dx as isize - half as isize;
                                if xs < 0 || xs >= w as isize {
                                    continue;
                                }
                                let ibase = ((ti * h + yy as usize) * w + xs as usize) * c;
                                let wbase = ((o * k + dy) * k + dx) * c;
                                for ci in 0..c {
                                    gxd[ibase + ci] += g * wd[wbase + ci];
                                    gwd[wbase + ci] += g * xd[ibase + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// l x 1 x 1 convolution: mixes frames at each spatial site, zero padded in
/// time so the output keeps T frames. Weight layout [c_out, l, c_in].
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub weight: Parameter,
    pub bias: Parameter,
    pub l: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl TemporalConv {
    pub fn new(c_in: usize, c_out: usize, l: usize, std: f64, rng: &mut impl Rng) -> Result<TemporalConv> {
        if l % 2 == 0 || l == 0 {
            return Err(Error::invalid("TemporalConv", "kernel must be odd"));
        }
        Ok(TemporalConv {
            weight: Parameter::new(Tensor::randn(&[c_out, l, c_in], std, rng)),
            bias: Parameter::new(Tensor::zeros(&[c_out])),
            l,
            c_in,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = dims4("TemporalConv::forward", x)?;
        if c != self.c_in {
            return Err(Error::shape("TemporalConv::forward", format!("{} channels, want {}", c, self.c_in)));
        }
        let l = self.l;
        let half = l / 2;
        let co = self.c_out;
        let wd = self.weight.value.data();
        let bd = self.bias.value.data();
        let xd = x.data();
        let mut out = Tensor::zeros(&[t, h, w, co]);
        let od = out.data_mut();
        let plane = h * w;
        for ti in 0..t {
            for p in 0..plane {
                let obase = (ti * plane + p) * co;
                for o in 0..co {
                    let mut acc = bd[o];
                    for dt in 0..l {
                        let tt = ti as isize + dt as isize - half as isize;
                        if tt < 0 || tt >= t as isize {
                            continue;
                        }
                        let ibase = (tt as usize * plane + p) * c;
                        let wbase = (o * l + dt) * c;
                        for ci in 0..c {
                            acc += xd[ibase + ci] * wd[wbase + ci];
                        }
                    }
                    od[obase + o] = acc;
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, x: &Tensor, gout: &Tensor) -> Result<Tensor> {
        let (t, h, w, c) = dims4("TemporalConv::backward", x)?;
        let l = self.l;
        let half = l / 2;
        let co = self.c_out;
        if gout.shape() != [t, h, w, co] {
            return Err(Error::shape("TemporalConv::backward", "gout shape".to_string()));
        }
        let wd = self.weight.value.data();
        let xd = x.data();
        let gd = gout.data();
        let mut gx = Tensor::zeros(&[t, h, w, c]);
        let gxd = gx.data_mut();
        let gwd = self.weight.grad.data_mut();
        let gbd = self.bias.grad.data_mut();
        let plane = h * w;
        for ti in 0..t {
            for p in 0..plane {
                let obase = (ti * plane + p) * co;
                for o in 0..co {
                    let g = gd[obase + o];
                    if g == 0.0 {
                        continue;
                    }
                    gbd[o] += g;
                    for dt in 0..l {
                        let tt = ti as isize + dt as isize - half as isize;
                        if tt < 0 || tt >= t as isize {
                            continue;
                        }
                        let ibase = (tt as usize * plane + p) * c;
                        let wbase = (o * l + dt) * c;
                        for ci in 0..c {
                            gxd[ibase + ci] += g * wd[wbase + ci];
                            gwd[wbase + ci] += g * xd[ibase + ci];
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

pub fn relu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    debug_assert_eq!(x.shape(), gy.shape());
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data().iter()) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
    gx
}

/// 2x2 spatial max pooling with stride 2, applied per frame and channel.
pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    let (t, h, w, c) = dims4("max_pool2", x)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("max_pool2", format!("odd spatial dims {}x{}", h, w)));
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Tensor::zeros(&[t, ho, wo, c]);
    let od = out.data_mut();
    for ti in 0..t {
        for y in 0..ho {
            for xx in 0..wo {
                let obase = ((ti * ho + y) * wo + xx) * c;
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = xd[((ti * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    od[obase + ci] = best;
                }
            }
        }
    }
    Ok(out)
}

/// Routes each pooled gradient to the first-scanned argmax cell, matching
/// the forward's strict `>` comparison.
pub fn max_pool2_backward(x: &Tensor, gout: &Tensor) -> Result<Tensor> {
    let (t, h, w, c) = dims4("max_pool2_backward", x)?;
    let (ho, wo) = (h / 2, w / 2);
    if gout.shape() != [t, ho, wo, c] {
        return Err(Error::shape("max_pool2_backward", "gout shape".to_string()));
    }
    let xd = x.data();
    let gd = gout.data();
    let mut gx = Tensor::zeros(&[t, h, w, c]);
    let gxd = gx.data_mut();
    for ti in 0..t {
        for y in 0..ho {
            for xx in 0..wo {
                let obase = ((ti * ho + y) * wo + xx) * c;
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((ti * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    gxd[best_idx] += gd[obase + ci];
                }
            }
        }
    }
    Ok(gx)
}

/// Dense layer y = x W + b over row-major [n, d_in] inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, std: f64, rng: &mut impl Rng) -> Linear {
        Linear {
            weight: Parameter::new(Tensor::randn(&[d_in, d_out], std, rng)),
            bias: Parameter::new(Tensor::zeros(&[d_out])),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight.value)?;
        let d_out = self.d_out();
        let bd = self.bias.value.data();
        for row in y.data_mut().chunks_mut(d_out) {
            for (v, b) in row.iter_mut().zip(bd.iter()) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, x: &Tensor, gout: &Tensor) -> Result<Tensor> {
        let gw = matmul_tn(x, gout)?;
        self.weight.grad.add_scaled(&gw, 1.0);
        let d_out = self.d_out();
        let gbd = self.bias.grad.data_mut();
        for row in gout.data().chunks(d_out) {
            for (b, g) in gbd.iter_mut().zip(row.iter()) {
                *b += g;
            }
        }
        matmul_nt(gout, &self.weight.value)
    }
}
