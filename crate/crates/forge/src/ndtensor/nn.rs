//! Network kernels: convolution, batch norm, pooling, resampling, linear,
//! channel ops, dropout. All take and return NCHW tensors.
//!
//! Kernels may parallelize over batch samples with rayon; every output
//! element is accumulated in a fixed sequential order, so parallel and serial
//! schedules produce bit-identical results.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{s, GradBufs, Scalar, Tensor};
use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

fn dims4<S: Scalar>(t: &Tensor<S>, op: &str) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        other => Err(Error::Shape(format!("{op}: expected NCHW, got {other:?}"))),
    }
}

/// Scatter one sample into im2col layout: `col[c*kh*kw + ki*kw + kj, oh*ow + owi]`.
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let opix = oh * ow;
    for ci in 0..c {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * opix..(row + 1) * opix];
                for ohi in 0..oh {
                    let iy = (ohi * stride + ki) as isize - pad as isize;
                    let dst_row = &mut dst[ohi * ow..(ohi + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst_row.iter_mut() {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src_row = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (owi, v) in dst_row.iter_mut().enumerate() {
                        let ix = (owi * stride + kj) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulate columns back into a sample gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let opix = oh * ow;
    for ci in 0..c {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * opix..(row + 1) * opix];
                for ohi in 0..oh {
                    let iy = (ohi * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[ohi * ow..(ohi + 1) * ow];
                    for (owi, &v) in src_row.iter().enumerate() {
                        let ix = (owi * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    /// 2-D cross-correlation: x `N×C×H×W` with kernel `K×C×kh×kw` and bias `K`.
    ///
    /// Output extents must be integral: `(H + 2·pad − kh) % stride == 0`.
    pub fn conv2d(&self, weight: &Tensor<S>, bias: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "conv2d")?;
        let (k, wc, kh, kw) = dims4(weight, "conv2d weight")?;
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d: input has {c} channels, kernel expects {wc}"
            )));
        }
        if bias.shape() != [k] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?}, expected [{k}]",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d: stride must be >= 1".into()));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::Shape(format!(
                "conv2d: non-integral output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
            )));
        }
        let oh = (span_h - kh) / stride + 1;
        let ow = (span_w - kw) / stride + 1;
        let opix = oh * ow;
        let ckk = c * kh * kw;
        let sample_in = c * h * w;
        let sample_out = k * opix;

        let xd = Arc::clone(&self.data);
        let wd = Arc::clone(&weight.data);
        let bd = Arc::clone(&bias.data);

        let mut out = vec![S::zero(); n * sample_out];
        out.par_chunks_mut(sample_out).enumerate().for_each(|(ni, o)| {
            let mut col = vec![S::zero(); ckk * opix];
            im2col(&xd[ni * sample_in..(ni + 1) * sample_in], c, h, w, kh, kw, stride, pad, oh, ow, &mut col);
            gemm_nn(&wd, &col, o, k, ckk, opix);
            for ki in 0..k {
                let bv = bd[ki];
                for v in &mut o[ki * opix..(ki + 1) * opix] {
                    *v += bv;
                }
            }
        });

        let (xid, wid, bid) = (self.node_id(), weight.node_id(), bias.node_id());
        Tensor::make(
            out,
            vec![n, k, oh, ow],
            &[self, weight, bias],
            move |g, bufs: &mut GradBufs<S>| {
                // Per-sample partials computed in parallel, reduced in batch order.
                let parts: Vec<(Vec<S>, Vec<S>, Vec<S>)> = (0..n)
                    .into_par_iter()
                    .map(|ni| {
                        let gn = &g[ni * sample_out..(ni + 1) * sample_out];
                        let mut col = vec![S::zero(); ckk * opix];
                        im2col(
                            &xd[ni * sample_in..(ni + 1) * sample_in],
                            c, h, w, kh, kw, stride, pad, oh, ow, &mut col,
                        );
                        let mut gw_n = Vec::new();
                        if wid.is_some() {
                            gw_n = vec![S::zero(); k * ckk];
                            gemm_nt(gn, &col, &mut gw_n, k, opix, ckk);
                        }
                        let mut gb_n = Vec::new();
                        if bid.is_some() {
                            gb_n = vec![S::zero(); k];
                            for ki in 0..k {
                                let mut acc = S::zero();
                                for &v in &gn[ki * opix..(ki + 1) * opix] {
                                    acc += v;
                                }
                                gb_n[ki] = acc;
                            }
                        }
                        let mut gx_n = Vec::new();
                        if xid.is_some() {
                            let mut gcol = vec![S::zero(); ckk * opix];
                            gemm_tn(&wd, gn, &mut gcol, ckk, k, opix);
                            gx_n = vec![S::zero(); sample_in];
                            col2im(&gcol, c, h, w, kh, kw, stride, pad, oh, ow, &mut gx_n);
                        }
                        (gw_n, gb_n, gx_n)
                    })
                    .collect();

                if let Some(id) = wid {
                    let gw = bufs.acc(id, k * ckk);
                    for (gw_n, _, _) in &parts {
                        for (a, &b) in gw.iter_mut().zip(gw_n) {
                            *a += b;
                        }
                    }
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, k);
                    for (_, gb_n, _) in &parts {
                        for (a, &b) in gb.iter_mut().zip(gb_n) {
                            *a += b;
                        }
                    }
                }
                if let Some(id) = xid {
                    let gx = bufs.acc(id, n * sample_in);
                    for (ni, (_, _, gx_n)) in parts.iter().enumerate() {
                        for (a, &b) in gx[ni * sample_in..(ni + 1) * sample_in].iter_mut().zip(gx_n) {
                            *a += b;
                        }
                    }
                }
            },
            "conv2d",
        )
    }

    /// Fully connected layer: x `N×F`, weight `O×F`, bias `O` → `N×O`.
    pub fn linear(&self, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, f) = match self.shape() {
            [n, f] => (*n, *f),
            other => return Err(Error::Shape(format!("linear: expected N×F, got {other:?}"))),
        };
        let (o, wf) = match weight.shape() {
            [o, wf] => (*o, *wf),
            other => return Err(Error::Shape(format!("linear: weight {other:?}"))),
        };
        if wf != f || bias.shape() != [o] {
            return Err(Error::Shape(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                self.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let mut out = vec![S::zero(); n * o];
        gemm_nt(&self.data, &weight.data, &mut out, n, f, o);
        for ni in 0..n {
            for (v, &bv) in out[ni * o..(ni + 1) * o].iter_mut().zip(bias.data()) {
                *v += bv;
            }
        }
        let (xid, wid, bid) = (self.node_id(), weight.node_id(), bias.node_id());
        let xd = Arc::clone(&self.data);
        let wd = Arc::clone(&weight.data);
        Tensor::make(
            out,
            vec![n, o],
            &[self, weight, bias],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, n * f);
                    gemm_nn(g, &wd, gx, n, o, f);
                }
                if let Some(id) = wid {
                    let gw = bufs.acc(id, o * f);
                    gemm_tn(g, &xd, gw, o, n, f);
                }
                if let Some(id) = bid {
                    let gb = bufs.acc(id, o);
                    for ni in 0..n {
                        for (a, &b) in gb.iter_mut().zip(&g[ni * o..(ni + 1) * o]) {
                            *a += b;
                        }
                    }
                }
            },
            "linear",
        )
    }

    /// 2×2 max pooling with stride 2. Requires even H and W.
    pub fn maxpool2(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2: odd extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.data;
        let mut out = vec![S::zero(); n * c * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + (2 * oy) * w + 2 * ox;
                    let mut best = xd[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let xid = self.node_id();
        let in_len = self.len();
        Tensor::make(
            out,
            vec![n, c, oh, ow],
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, in_len);
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += g[o];
                    }
                }
            },
            "maxpool2",
        )
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample_nearest2(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "upsample_nearest2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let xd = &self.data;
        let mut out = vec![S::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / 2;
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[sy * w + ox / 2];
                }
            }
        }
        let xid = self.node_id();
        let in_len = self.len();
        Tensor::make(
            out,
            vec![n, c, oh, ow],
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, in_len);
                    for nc in 0..n * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let sy = oy / 2;
                            for ox in 0..ow {
                                gdst[sy * w + ox / 2] += gsrc[oy * ow + ox];
                            }
                        }
                    }
                }
            },
            "upsample_nearest2",
        )
    }

    /// Spatial mean per channel: `N×C×H×W` → `N×C`.
    pub fn global_avg_pool(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "global_avg_pool")?;
        let pix = h * w;
        let inv = s::<S>(1.0 / pix as f64);
        let mut out = vec![S::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = S::zero();
            for &v in &self.data[nc * pix..(nc + 1) * pix] {
                acc += v;
            }
            out[nc] = acc * inv;
        }
        let xid = self.node_id();
        let in_len = self.len();
        Tensor::make(
            out,
            vec![n, c],
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, in_len);
                    for nc in 0..n * c {
                        let gv = g[nc] * inv;
                        for v in &mut gx[nc * pix..(nc + 1) * pix] {
                            *v += gv;
                        }
                    }
                }
            },
            "global_avg_pool",
        )
    }

    /// Concatenate along the channel dimension.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_channels: empty input list".into()));
        }
        let (n, _, h, w) = dims4(parts[0], "concat_channels")?;
        let mut chans = Vec::with_capacity(parts.len());
        for p in parts {
            let (pn, pc, ph, pw) = dims4(p, "concat_channels")?;
            if pn != n || ph != h || pw != w {
                return Err(Error::Shape(format!(
                    "concat_channels: incompatible shapes {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            chans.push(pc);
        }
        let c_total: usize = chans.iter().sum();
        let pix = h * w;
        let mut out = vec![S::zero(); n * c_total * pix];
        for ni in 0..n {
            let mut c_off = 0;
            for (p, &pc) in parts.iter().zip(&chans) {
                let src = &p.data[ni * pc * pix..(ni + 1) * pc * pix];
                let dst = &mut out[(ni * c_total + c_off) * pix..(ni * c_total + c_off + pc) * pix];
                dst.copy_from_slice(src);
                c_off += pc;
            }
        }
        let meta: Vec<(Option<usize>, usize)> = parts.iter().map(|p| (p.node_id(), 0)).collect();
        let mut meta = meta;
        {
            let mut c_off = 0;
            for (m, &pc) in meta.iter_mut().zip(&chans) {
                m.1 = c_off;
                c_off += pc;
            }
        }
        let chans_cl = chans.clone();
        Tensor::make(
            out,
            vec![n, c_total, h, w],
            parts,
            move |g, bufs: &mut GradBufs<S>| {
                for ((pid, c_off), &pc) in meta.iter().zip(&chans_cl) {
                    if let Some(id) = *pid {
                        let gp = bufs.acc(id, n * pc * pix);
                        for ni in 0..n {
                            let src = &g[(ni * c_total + c_off) * pix..(ni * c_total + c_off + pc) * pix];
                            for (a, &b) in gp[ni * pc * pix..(ni + 1) * pc * pix].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                }
            },
            "concat_channels",
        )
    }

    /// Channel softmax: per pixel, a categorical distribution over C classes.
    pub fn softmax_channel(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "softmax_channel")?;
        let pix = h * w;
        let xd = &self.data;
        let mut out = vec![S::zero(); xd.len()];
        for ni in 0..n {
            let base = ni * c * pix;
            for p in 0..pix {
                let mut mx = xd[base + p];
                for ci in 1..c {
                    let v = xd[base + ci * pix + p];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = S::zero();
                for ci in 0..c {
                    let e = (xd[base + ci * pix + p] - mx).exp();
                    out[base + ci * pix + p] = e;
                    denom += e;
                }
                for ci in 0..c {
                    out[base + ci * pix + p] /= denom;
                }
            }
        }
        let xid = self.node_id();
        let y = out.clone();
        let len = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, len);
                    for ni in 0..n {
                        let base = ni * c * pix;
                        for p in 0..pix {
                            let mut dot = S::zero();
                            for ci in 0..c {
                                let idx = base + ci * pix + p;
                                dot += g[idx] * y[idx];
                            }
                            for ci in 0..c {
                                let idx = base + ci * pix + p;
                                gx[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            },
            "softmax_channel",
        )
    }

    /// Per-pixel probability of the labelled class: probs `N×C×H×W` with a
    /// class-index map of length `N·H·W` → `N×H×W`.
    pub fn gather_channel(&self, classes: &[u8]) -> Result<Tensor<S>> {
        let (n, c, h, w) = dims4(self, "gather_channel")?;
        let pix = h * w;
        if classes.len() != n * pix {
            return Err(Error::Shape(format!(
                "gather_channel: {} class indices for {} pixels",
                classes.len(),
                n * pix
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&v| usize::from(v) >= c) {
            return Err(Error::Validation(format!(
                "gather_channel: class {bad} out of range for {c} channels"
            )));
        }
        let mut out = vec![S::zero(); n * pix];
        for ni in 0..n {
            for p in 0..pix {
                let cls = usize::from(classes[ni * pix + p]);
                out[ni * pix + p] = self.data[(ni * c + cls) * pix + p];
            }
        }
        let xid = self.node_id();
        let classes: Vec<u8> = classes.to_vec();
        let in_len = self.len();
        Tensor::make(
            out,
            vec![n, h, w],
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, in_len);
                    for ni in 0..n {
                        for p in 0..pix {
                            let cls = usize::from(classes[ni * pix + p]);
                            gx[(ni * c + cls) * pix + p] += g[ni * pix + p];
                        }
                    }
                }
            },
            "gather_channel",
        )
    }

    /// Inverted dropout: keeps each element with probability `1−p` and scales
    /// survivors by `1/(1−p)`. Call sites apply it in training mode only.
    pub fn dropout(&self, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<S>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout: p must be in [0,1), got {p}")));
        }
        let scale = s::<S>(1.0 / (1.0 - p));
        let mask: Vec<bool> = (0..self.len()).map(|_| rng.gen::<f64>() >= p).collect();
        let out: Vec<S> = self
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * scale } else { S::zero() })
            .collect();
        let xid = self.node_id();
        let n = out.len();
        Tensor::make(
            out,
            self.shape().to_vec(),
            &[self],
            move |g, bufs: &mut GradBufs<S>| {
                if let Some(id) = xid {
                    let gx = bufs.acc(id, n);
                    for i in 0..n {
                        if mask[i] {
                            gx[i] += g[i] * scale;
                        }
                    }
                }
            },
            "dropout",
        )
    }
}

/// Batch normalization over `N×C×H×W` with per-channel scale and shift.
///
/// Training mode normalizes with batch statistics and updates the running
/// stats in place (`running ← (1−m)·running + m·batch`, unbiased variance);
/// eval mode uses the running stats and leaves them untouched. Zero batch
/// variance is guarded by `eps`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    running_mean: &mut [S],
    running_var: &mut [S],
    momentum: f64,
    eps: f64,
    training: bool,
) -> Result<Tensor<S>> {
    let (n, c, h, w) = dims4(x, "batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm2d: channel mismatch (x has {c} channels, gamma {:?}, beta {:?})",
            gamma.shape(),
            beta.shape()
        )));
    }
    let pix = h * w;
    let m = n * pix;
    let inv_m = s::<S>(1.0 / m as f64);
    let epss = s::<S>(eps);

    let (mean, var) = if training {
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ci in 0..c {
            let mut acc = S::zero();
            for ni in 0..n {
                for &v in &x.data()[(ni * c + ci) * pix..(ni * c + ci + 1) * pix] {
                    acc += v;
                }
            }
            let mu = acc * inv_m;
            let mut acc2 = S::zero();
            for ni in 0..n {
                for &v in &x.data()[(ni * c + ci) * pix..(ni * c + ci + 1) * pix] {
                    let d = v - mu;
                    acc2 += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = acc2 * inv_m;
        }
        let mm = s::<S>(momentum);
        let keep = S::one() - mm;
        // Unbiased variance feeds the running estimate, as is conventional.
        let unbias = if m > 1 { s::<S>(m as f64 / (m as f64 - 1.0)) } else { S::one() };
        for ci in 0..c {
            running_mean[ci] = keep * running_mean[ci] + mm * mean[ci];
            running_var[ci] = keep * running_var[ci] + mm * var[ci] * unbias;
        }
        (mean, var)
    } else {
        (running_mean.to_vec(), running_var.to_vec())
    };

    let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + epss).sqrt()).collect();
    let mut xhat = vec![S::zero(); x.len()];
    let mut out = vec![S::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * pix;
            let (mu, istd) = (mean[ci], inv_std[ci]);
            let (ga, be) = (gamma.data()[ci], beta.data()[ci]);
            for p in 0..pix {
                let xh = (x.data()[base + p] - mu) * istd;
                xhat[base + p] = xh;
                out[base + p] = ga * xh + be;
            }
        }
    }

    let (xid, gid, bid) = (x.node_id(), gamma.node_id(), beta.node_id());
    let xhat = Arc::new(xhat);
    let gamma_d = Arc::clone(&gamma.data);
    let x_len = x.len();
    Tensor::make(
        out,
        x.shape().to_vec(),
        &[x, gamma, beta],
        move |g, bufs: &mut GradBufs<S>| {
            // Per-channel reductions shared by all three gradients.
            let mut sum_g = vec![S::zero(); c];
            let mut sum_gx = vec![S::zero(); c];
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * pix;
                    for p in 0..pix {
                        sum_g[ci] += g[base + p];
                        sum_gx[ci] += g[base + p] * xhat[base + p];
                    }
                }
            }
            if let Some(id) = gid {
                let gg = bufs.acc(id, c);
                for ci in 0..c {
                    gg[ci] += sum_gx[ci];
                }
            }
            if let Some(id) = bid {
                let gb = bufs.acc(id, c);
                for ci in 0..c {
                    gb[ci] += sum_g[ci];
                }
            }
            if let Some(id) = xid {
                let gx = bufs.acc(id, x_len);
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * pix;
                        let k = gamma_d[ci] * inv_std[ci];
                        if training {
                            let mg = sum_g[ci] * inv_m;
                            let mgx = sum_gx[ci] * inv_m;
                            for p in 0..pix {
                                gx[base + p] += k * (g[base + p] - mg - xhat[base + p] * mgx);
                            }
                        } else {
                            for p in 0..pix {
                                gx[base + p] += k * g[base + p];
                            }
                        }
                    }
                }
            }
        },
        "batchnorm2d",
    )
}

#[cfg(test)]
mod tests {
    use super::super::{backward, Tape};
    use super::*;
    use crate::rng::rng_from_seed;

    fn tensor_f64(data: Vec<f64>, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn conv_of_ones_with_scalar_kernel() {
        let x = tensor_f64(vec![1.0; 9], &[1, 1, 3, 3]);
        let w = tensor_f64(vec![2.0], &[1, 1, 1, 1]);
        let b = tensor_f64(vec![0.0], &[1]);
        let y = x.conv2d(&w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let x = tensor_f64((0..25).map(|i| i as f64 * 0.1).collect(), &[1, 1, 5, 5]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // delta at center
        let w = tensor_f64(k, &[1, 1, 3, 3]);
        let b = tensor_f64(vec![0.0], &[1]);
        let y = x.conv2d(&w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), x.shape());
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Direct six-loop cross-correlation used as the conv oracle.
    #[allow(clippy::too_many_arguments)]
    fn conv_reference(
        x: &[f64], w: &[f64], b: &[f64],
        n: usize, c: usize, h: usize, wdt: usize,
        k: usize, kh: usize, kw: usize, stride: usize, pad: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wdt + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * k * oh * ow];
        for ni in 0..n {
            for ki in 0..k {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[ki];
                        for ci in 0..c {
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let iy = (oy * stride + dy) as isize - pad as isize;
                                    let ix = (ox * stride + dx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wdt as isize {
                                        acc += x[((ni * c + ci) * h + iy as usize) * wdt + ix as usize]
                                            * w[((ki * c + ci) * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        out[((ni * k + ki) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_loop_reference() {
        let mut rng = rng_from_seed(11);
        let x: Vec<f64> = (0..1 * 2 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            if (5 + 2 * pad - 3) % stride != 0 {
                continue;
            }
            let want = conv_reference(&x, &w, &b, 1, 2, 5, 5, 3, 3, 3, stride, pad);
            let y = tensor_f64(x.clone(), &[1, 2, 5, 5])
                .conv2d(
                    &tensor_f64(w.clone(), &[3, 2, 3, 3]),
                    &tensor_f64(b.clone(), &[3]),
                    stride,
                    pad,
                )
                .unwrap();
            let max_diff = y
                .data()
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_diff < 1e-6, "stride {stride} pad {pad}: diff {max_diff}");
        }
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let x = tensor_f64(vec![0.0; 25], &[1, 1, 5, 5]);
        let w = tensor_f64(vec![0.0; 4], &[1, 1, 2, 2]);
        let b = tensor_f64(vec![0.0], &[1]);
        assert!(x.conv2d(&w, &b, 2, 0).is_err());
    }

    #[test]
    fn batchnorm_normalizes_batch_statistics() {
        // Two channels with mean 5, var 4.
        let mut rng = rng_from_seed(3);
        let n = 4;
        let pix = 16;
        let mut data = Vec::with_capacity(n * 2 * pix);
        for _ in 0..n * 2 * pix {
            let z: f64 = rng.gen_range(-1.0..1.0);
            data.push(5.0 + 2.0 * z);
        }
        let x = tensor_f64(data, &[n, 2, 4, 4]);
        let gamma = tensor_f64(vec![1.0, 1.0], &[2]);
        let beta = tensor_f64(vec![0.0, 0.0], &[2]);
        let mut rm = vec![0.0; 2];
        let mut rv = vec![1.0; 2];
        let y = batchnorm2d(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5, true).unwrap();
        for ci in 0..2 {
            let mut mean = 0.0;
            let mut var = 0.0;
            let m = (n * pix) as f64;
            for ni in 0..n {
                for p in 0..pix {
                    mean += y.data()[(ni * 2 + ci) * pix + p];
                }
            }
            mean /= m;
            for ni in 0..n {
                for p in 0..pix {
                    let d = y.data()[(ni * 2 + ci) * pix + p] - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-6, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "channel {ci} var {var}");
        }
    }

    #[test]
    fn batchnorm_scale_and_shift() {
        let mut rng = rng_from_seed(5);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x = tensor_f64(data, &[4, 1, 4, 4]);
        let gamma = tensor_f64(vec![2.0], &[1]);
        let beta = tensor_f64(vec![3.0], &[1]);
        let mut rm = vec![0.0];
        let mut rv = vec![1.0];
        let y = batchnorm2d(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5, true).unwrap();
        let m = y.data().len() as f64;
        let mean: f64 = y.data().iter().sum::<f64>() / m;
        let var: f64 = y.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
        assert!((mean - 3.0).abs() < 1e-6);
        assert!((var.sqrt() - 2.0).abs() < 1e-4);
    }

    #[test]
    fn batchnorm_eval_is_frozen() {
        let x = tensor_f64((0..32).map(|i| i as f64).collect(), &[2, 1, 4, 4]);
        let gamma = tensor_f64(vec![1.5], &[1]);
        let beta = tensor_f64(vec![-0.5], &[1]);
        let mut rm = vec![4.0];
        let mut rv = vec![2.0];
        let y1 = batchnorm2d(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5, false).unwrap();
        let y2 = batchnorm2d(&x, &gamma, &beta, &mut rm, &mut rv, 0.1, 1e-5, false).unwrap();
        assert_eq!(y1.data(), y2.data());
        assert_eq!(rm, vec![4.0]);
        assert_eq!(rv, vec![2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let x = tensor_f64(vec![0.0], &[1]);
        assert!((x.sigmoid().data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = tensor_f64(vec![0.7; 4 * 4], &[1, 4, 2, 2]);
        let y = x.softmax_channel().unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut rng = rng_from_seed(1);
        let x = tensor_f64(vec![1.0, -2.0, 3.0], &[3]);
        let y = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(Tensor::<f64>::from_vec(vec![1.0], &[1]).unwrap().dropout(1.0, &mut rng).is_err());
    }

    #[test]
    fn maxpool_and_upsample_shapes() {
        let x = tensor_f64((0..16).map(|i| i as f64).collect(), &[1, 1, 4, 4]);
        let y = x.maxpool2().unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let z = y.upsample_nearest2().unwrap();
        assert_eq!(z.shape(), &[1, 1, 4, 4]);
        assert_eq!(z.data()[0], 5.0);
        assert_eq!(z.data()[1], 5.0);
        let odd = tensor_f64(vec![0.0; 3], &[1, 1, 1, 3]);
        assert!(odd.maxpool2().is_err());
    }

    #[test]
    fn gather_channel_picks_true_class() {
        let x = tensor_f64(
            vec![
                0.1, 0.2, // class 0 plane
                0.9, 0.8, // class 1 plane
            ],
            &[1, 2, 1, 2],
        );
        let y = x.gather_channel(&[1, 0]).unwrap();
        assert_eq!(y.data(), &[0.9, 0.2]);
        assert!(x.gather_channel(&[2, 0]).is_err());
    }

    #[test]
    fn concat_channels_roundtrip_gradient() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.var(vec![1.0; 4], &[1, 1, 2, 2]).unwrap();
        let b = tape.var(vec![2.0; 8], &[1, 2, 2, 2]).unwrap();
        let y = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 3, 2, 2]);
        let loss = y.mul_scalar(2.0).sum_all();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[2.0; 4]);
        assert_eq!(b.grad().unwrap().data(), &[2.0; 8]);
    }
}
