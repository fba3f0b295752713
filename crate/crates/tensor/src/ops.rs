//! Tape operations: forward kernels plus captured backward rules.
//!
//! Every op validates shapes up front, computes the forward value, and —
//! only when some input requires gradients — records a rule that holds
//! clones of whatever forward data the backward pass needs. Inputs that do
//! not require gradients never get contributions computed for them.

use rayon::prelude::*;

use crate::error::{Result, TensorError};
use crate::kernels::{col2im, im2col, matmul, matmul_bt, out_side, transpose};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Batch chunk size for accumulating weight gradients; fixed so the
/// reduction order never depends on thread scheduling.
const GRAD_CHUNK: usize = 8;

impl Tape {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", va.shape(), vb.shape()),
            });
        }
        let data: Vec<f64> = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let req = need_a || need_b;
        let rule = req.then(|| {
            let (ia, ib) = (a.0, b.0);
            Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if need_a {
                    out.push((ia, g.clone()));
                }
                if need_b {
                    out.push((ib, g.clone()));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Multiply every element by a scalar.
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires_grad(a);
        let rule = req.then(|| {
            let ia = a.0;
            Box::new(move |g: &Tensor| {
                let d: Vec<f64> = g.data().iter().map(|x| x * s).collect();
                vec![(ia, Tensor::new(g.shape().to_vec(), d).expect("same shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Divide every element by a nonzero scalar.
    pub fn scalar_div(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(TensorError::InvalidArg { op: "scalar_div", detail: "divisor is zero".into() });
        }
        self.scale(a, 1.0 / s)
    }

    /// Matrix product of `a` (M x K) and `b` (K x N).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dims {ka} vs {kb}"),
            });
        }
        let data = matmul(self.value(a).data(), self.value(b).data(), m, ka, n);
        let out = Tensor::new(vec![m, n], data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let req = need_a || need_b;
        let rule = req.then(|| {
            let (ia, ib) = (a.0, b.0);
            let a_val = need_b.then(|| self.value(a).clone());
            let b_val = need_a.then(|| self.value(b).clone());
            Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if let Some(bv) = &b_val {
                    // dA = G * B^T
                    let da = matmul_bt(g.data(), bv.data(), m, n, ka);
                    out.push((ia, Tensor::new(vec![m, ka], da).expect("da shape")));
                }
                if let Some(av) = &a_val {
                    // dB = A^T * G
                    let at = transpose(av.data(), m, ka);
                    let db = matmul(&at, g.data(), ka, m, n);
                    out.push((ib, Tensor::new(vec![ka, n], db).expect("db shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Affine map `x * w + bias` with `x` (N x D), `w` (D x E), `bias` (E).
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(bias)?;
        let (n, d) = self.value(x).dims2("linear")?;
        let (dw, e) = self.value(w).dims2("linear")?;
        if d != dw {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input width {d} vs weight rows {dw}"),
            });
        }
        if self.value(bias).shape() != [e] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias shape {:?}, expected [{e}]", self.value(bias).shape()),
            });
        }
        let mut data = matmul(self.value(x).data(), self.value(w).data(), n, d, e);
        let b_data = self.value(bias).data();
        for row in data.chunks_mut(e) {
            for (o, bv) in row.iter_mut().zip(b_data) {
                *o += bv;
            }
        }
        let out = Tensor::new(vec![n, e], data)?;
        let (need_x, need_w, need_b) =
            (self.requires_grad(x), self.requires_grad(w), self.requires_grad(bias));
        let req = need_x || need_w || need_b;
        let rule = req.then(|| {
            let (ix, iw, ib) = (x.0, w.0, bias.0);
            let x_val = need_w.then(|| self.value(x).clone());
            let w_val = need_x.then(|| self.value(w).clone());
            Box::new(move |g: &Tensor| {
                let mut out = Vec::new();
                if let Some(wv) = &w_val {
                    let dx = matmul_bt(g.data(), wv.data(), n, e, d);
                    out.push((ix, Tensor::new(vec![n, d], dx).expect("dx shape")));
                }
                if let Some(xv) = &x_val {
                    let xt = transpose(xv.data(), n, d);
                    let dw = matmul(&xt, g.data(), d, n, e);
                    out.push((iw, Tensor::new(vec![d, e], dw).expect("dw shape")));
                }
                if need_b {
                    let mut db = vec![0.0; e];
                    for row in g.data().chunks(e) {
                        for (acc, gv) in db.iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                    out.push((ib, Tensor::new(vec![e], db).expect("db shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Elementwise max(0, x); the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let req = self.requires_grad(a);
        let rule = req.then(|| {
            let ia = a.0;
            let mask: Vec<bool> = self.value(a).data().iter().map(|&x| x > 0.0).collect();
            Box::new(move |g: &Tensor| {
                let d: Vec<f64> =
                    g.data().iter().zip(&mask).map(|(&gv, &m)| if m { gv } else { 0.0 }).collect();
                vec![(ia, Tensor::new(g.shape().to_vec(), d).expect("same shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// 2-D cross-correlation of NCHW input with OIKK weights, zero padding.
    /// `bias`, when present, is one value per output channel.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        if stride < 1 {
            return Err(TensorError::InvalidArg { op: "conv2d", detail: "stride must be >= 1".into() });
        }
        let (n, c, h, wd) = self.value(x).dims4("conv2d")?;
        let wshape = self.value(w).shape().to_vec();
        let [o, ci, kh, kw] = wshape[..] else {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be OIKK, got {wshape:?}"),
            });
        };
        if ci != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input has {c} channels, weight expects {ci}"),
            });
        }
        if kh != kw {
            return Err(TensorError::InvalidArg {
                op: "conv2d",
                detail: format!("only square kernels supported, got {kh}x{kw}"),
            });
        }
        let k = kh;
        if h + 2 * padding < k || wd + 2 * padding < k {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {k} exceeds padded input {h}x{wd} (padding {padding})"),
            });
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?}, expected [{o}]", self.value(b).shape()),
                });
            }
        }
        let oh = out_side(h, k, stride, padding);
        let ow = out_side(wd, k, stride, padding);
        let (ckk, patches) = (c * k * k, oh * ow);

        let x_data = self.value(x).data();
        let w_data = self.value(w).data();
        let b_data = bias.map(|b| self.value(b).data().to_vec());
        let mut out_data = vec![0.0; n * o * patches];
        out_data.par_chunks_mut(o * patches).enumerate().for_each(|(item, out_item)| {
            let img = &x_data[item * c * h * wd..(item + 1) * c * h * wd];
            let mut col = vec![0.0; ckk * patches];
            im2col(img, c, h, wd, k, stride, padding, &mut col);
            let prod = matmul(w_data, &col, o, ckk, patches);
            out_item.copy_from_slice(&prod);
            if let Some(bv) = &b_data {
                for (ch, chunk) in out_item.chunks_mut(patches).enumerate() {
                    for v in chunk {
                        *v += bv[ch];
                    }
                }
            }
        });
        let out = Tensor::new(vec![n, o, oh, ow], out_data)?;

        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let need_b = bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        let req = need_x || need_w || need_b;
        let rule = req.then(|| {
            let (ix, iw) = (x.0, w.0);
            let ibias = bias.map(|b| b.0);
            let x_val = self.value(x).clone();
            let w_val = need_x.then(|| self.value(w).clone());
            Box::new(move |g: &Tensor| {
                let g_data = g.data();
                let mut out = Vec::new();
                if need_x {
                    let wt = transpose(w_val.as_ref().expect("captured").data(), o, ckk);
                    let mut dx = vec![0.0; n * c * h * wd];
                    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(item, dx_item)| {
                        let g_item = &g_data[item * o * patches..(item + 1) * o * patches];
                        let dcol = matmul(&wt, g_item, ckk, o, patches);
                        col2im(&dcol, c, h, wd, k, stride, padding, dx_item);
                    });
                    out.push((ix, Tensor::new(vec![n, c, h, wd], dx).expect("dx shape")));
                }
                if need_w {
                    let n_chunks = n.div_ceil(GRAD_CHUNK);
                    let partials: Vec<Vec<f64>> = (0..n_chunks)
                        .into_par_iter()
                        .map(|chunk| {
                            let mut acc = vec![0.0; o * ckk];
                            let mut col = vec![0.0; ckk * patches];
                            for item in chunk * GRAD_CHUNK..((chunk + 1) * GRAD_CHUNK).min(n) {
                                let img = &x_val.data()[item * c * h * wd..(item + 1) * c * h * wd];
                                im2col(img, c, h, wd, k, stride, padding, &mut col);
                                let g_item = &g_data[item * o * patches..(item + 1) * o * patches];
                                let part = matmul_bt(g_item, &col, o, patches, ckk);
                                for (a, v) in acc.iter_mut().zip(&part) {
                                    *a += v;
                                }
                            }
                            acc
                        })
                        .collect();
                    let mut dw = vec![0.0; o * ckk];
                    for part in partials {
                        for (a, v) in dw.iter_mut().zip(&part) {
                            *a += v;
                        }
                    }
                    out.push((iw, Tensor::new(vec![o, c, k, k], dw).expect("dw shape")));
                }
                if need_b {
                    let mut db = vec![0.0; o];
                    for item in 0..n {
                        for (ch, acc) in db.iter_mut().enumerate() {
                            let base = item * o * patches + ch * patches;
                            for &gv in &g_data[base..base + patches] {
                                *acc += gv;
                            }
                        }
                    }
                    out.push((ibias.expect("bias var"), Tensor::new(vec![o], db).expect("db shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Per-channel batch normalization over NCHW input.
    ///
    /// Training mode normalizes with biased batch statistics and updates the
    /// running buffers as `running <- (1 - momentum) * running + momentum * batch`
    /// using the unbiased variance; eval mode normalizes with the running
    /// buffers and leaves them untouched. The buffers are state, not tape
    /// participants: gradients never flow through them.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor,
        running_var: &mut Tensor,
        eps: f64,
        momentum: f64,
        training: bool,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg { op: "batchnorm2d", detail: "eps must be > 0".into() });
        }
        let (n, c, h, w) = self.value(x).dims4("batchnorm2d")?;
        for (name, t) in [
            ("gamma", self.value(gamma).shape()),
            ("beta", self.value(beta).shape()),
            ("running_mean", running_mean.shape()),
            ("running_var", running_var.shape()),
        ] {
            if t != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm2d",
                    detail: format!("{name} shape {t:?}, expected [{c}] for {c}-channel input"),
                });
            }
        }
        let hw = h * w;
        let cnt = n * hw;
        let x_data = self.value(x).data();
        let gamma_data = self.value(gamma).data().to_vec();
        let beta_data = self.value(beta).data();

        // Per-channel statistics: batch stats in training, running in eval.
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for ch in 0..c {
                let mut sum = 0.0;
                for item in 0..n {
                    let base = item * c * hw + ch * hw;
                    for &v in &x_data[base..base + hw] {
                        sum += v;
                    }
                }
                let m = sum / cnt as f64;
                let mut sq = 0.0;
                for item in 0..n {
                    let base = item * c * hw + ch * hw;
                    for &v in &x_data[base..base + hw] {
                        let d = v - m;
                        sq += d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / cnt as f64;
            }
            let rm = running_mean.data_mut();
            let rv = running_var.data_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
                let unbiased =
                    if cnt > 1 { var[ch] * cnt as f64 / (cnt - 1) as f64 } else { var[ch] };
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
            }
        } else {
            mean.copy_from_slice(running_mean.data());
            var.copy_from_slice(running_var.data());
        }

        let sigma: Vec<f64> = var.iter().map(|v| (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; x_data.len()];
        let mut out_data = vec![0.0; x_data.len()];
        for item in 0..n {
            for ch in 0..c {
                let base = item * c * hw + ch * hw;
                let (m, s, gm, bt) = (mean[ch], sigma[ch], gamma_data[ch], beta_data[ch]);
                for i in base..base + hw {
                    let xh = (x_data[i] - m) / s;
                    xhat[i] = xh;
                    out_data[i] = gm * xh + bt;
                }
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out_data)?;

        let (need_x, need_g, need_b) =
            (self.requires_grad(x), self.requires_grad(gamma), self.requires_grad(beta));
        let req = need_x || need_g || need_b;
        let rule = req.then(|| {
            let (ix, ig, ib) = (x.0, gamma.0, beta.0);
            Box::new(move |g: &Tensor| {
                let g_data = g.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for item in 0..n {
                    for ch in 0..c {
                        let base = item * c * hw + ch * hw;
                        for i in base..base + hw {
                            dbeta[ch] += g_data[i];
                            dgamma[ch] += g_data[i] * xhat[i];
                        }
                    }
                }
                let mut out = Vec::new();
                if need_x {
                    let mut dx = vec![0.0; g_data.len()];
                    for item in 0..n {
                        for ch in 0..c {
                            let base = item * c * hw + ch * hw;
                            let scale = gamma_data[ch] / sigma[ch];
                            if training {
                                let mg = dbeta[ch] / cnt as f64;
                                let mgx = dgamma[ch] / cnt as f64;
                                for i in base..base + hw {
                                    dx[i] = scale * (g_data[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in base..base + hw {
                                    dx[i] = scale * g_data[i];
                                }
                            }
                        }
                    }
                    out.push((ix, Tensor::new(vec![n, c, h, w], dx).expect("dx shape")));
                }
                if need_g {
                    out.push((ig, Tensor::new(vec![c], dgamma).expect("dgamma shape")));
                }
                if need_b {
                    out.push((ib, Tensor::new(vec![c], dbeta).expect("dbeta shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Max pooling with -inf padding so padded cells never win a window.
    /// Gradient routes to the argmax cell; ties go to the first cell in
    /// row-major scan order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        self.check(x)?;
        if kernel < 1 || stride < 1 {
            return Err(TensorError::InvalidArg {
                op: "maxpool2d",
                detail: "kernel and stride must be >= 1".into(),
            });
        }
        let (n, c, h, w) = self.value(x).dims4("maxpool2d")?;
        if kernel > h + 2 * padding || kernel > w + 2 * padding {
            return Err(TensorError::InvalidArg {
                op: "maxpool2d",
                detail: format!("window {kernel} larger than padded input {h}x{w} (padding {padding})"),
            });
        }
        let oh = out_side(h, kernel, stride, padding);
        let ow = out_side(w, kernel, stride, padding);
        let x_data = self.value(x).data();
        let mut out_data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let mut oi = 0;
        for item in 0..n {
            for ch in 0..c {
                let base = item * c * h * w + ch * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                if x_data[idx] > best {
                                    best = x_data[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out_data[oi] = best;
                        argmax[oi] = best_idx;
                        oi += 1;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, oh, ow], out_data)?;
        let req = self.requires_grad(x);
        let rule = req.then(|| {
            let ix = x.0;
            let total = n * c * h * w;
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; total];
                for (&idx, &gv) in argmax.iter().zip(g.data()) {
                    dx[idx] += gv;
                }
                vec![(ix, Tensor::new(vec![n, c, h, w], dx).expect("dx shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Global average pooling; only `out_size == 1` is supported.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_size: usize) -> Result<Var> {
        self.check(x)?;
        if out_size != 1 {
            return Err(TensorError::InvalidArg {
                op: "adaptive_avg_pool2d",
                detail: format!("only output size 1 supported, got {out_size}"),
            });
        }
        let (n, c, h, w) = self.value(x).dims4("adaptive_avg_pool2d")?;
        let hw = h * w;
        let x_data = self.value(x).data();
        let mut out_data = vec![0.0; n * c];
        for (slot, chunk) in out_data.iter_mut().zip(x_data.chunks(hw)) {
            *slot = chunk.iter().sum::<f64>() / hw as f64;
        }
        let out = Tensor::new(vec![n, c, 1, 1], out_data)?;
        let req = self.requires_grad(x);
        let rule = req.then(|| {
            let ix = x.0;
            Box::new(move |g: &Tensor| {
                let mut dx = vec![0.0; n * c * hw];
                for (chunk, &gv) in dx.chunks_mut(hw).zip(g.data()) {
                    chunk.fill(gv / hw as f64);
                }
                vec![(ix, Tensor::new(vec![n, c, h, w], dx).expect("dx shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Collapse all dimensions after the first: N x ... -> N x rest.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                detail: format!("need rank >= 2, got {shape:?}"),
            });
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        let out = Tensor::new(vec![n, rest], self.value(x).data().to_vec())?;
        let req = self.requires_grad(x);
        let rule = req.then(|| {
            let ix = x.0;
            Box::new(move |g: &Tensor| {
                vec![(ix, Tensor::new(shape.clone(), g.data().to_vec()).expect("same numel"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Row-wise L2 normalization of an N x D matrix: each row is divided by
    /// max(||row||, eps), so zero rows stay zero instead of blowing up.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x)?;
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg { op: "l2_normalize", detail: "eps must be > 0".into() });
        }
        let (n, d) = self.value(x).dims2("l2_normalize")?;
        let x_data = self.value(x).data();
        let mut denoms = vec![0.0; n];
        let mut clamped = vec![false; n];
        let mut out_data = vec![0.0; n * d];
        for row in 0..n {
            let xs = &x_data[row * d..(row + 1) * d];
            let norm = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = if norm >= eps {
                norm
            } else {
                clamped[row] = true;
                eps
            };
            denoms[row] = denom;
            for (o, &v) in out_data[row * d..(row + 1) * d].iter_mut().zip(xs) {
                *o = v / denom;
            }
        }
        let out = Tensor::new(vec![n, d], out_data)?;
        let req = self.requires_grad(x);
        let rule = req.then(|| {
            let ix = x.0;
            let x_val = self.value(x).clone();
            Box::new(move |g: &Tensor| {
                let g_data = g.data();
                let mut dx = vec![0.0; n * d];
                for row in 0..n {
                    let xs = &x_val.data()[row * d..(row + 1) * d];
                    let gs = &g_data[row * d..(row + 1) * d];
                    let denom = denoms[row];
                    if clamped[row] {
                        // Below eps the map is x / eps: constant scale.
                        for (o, &gv) in dx[row * d..(row + 1) * d].iter_mut().zip(gs) {
                            *o = gv / denom;
                        }
                    } else {
                        let dot: f64 = gs.iter().zip(xs).map(|(a, b)| a * b).sum();
                        let d3 = denom * denom * denom;
                        for (o, (&gv, &xv)) in
                            dx[row * d..(row + 1) * d].iter_mut().zip(gs.iter().zip(xs))
                        {
                            *o = gv / denom - xv * dot / d3;
                        }
                    }
                }
                vec![(ix, Tensor::new(vec![n, d], dx).expect("dx shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Row-wise dot product of two N x D matrices, producing N x 1.
    pub fn rowdot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (n, d) = self.value(a).dims2("rowdot")?;
        if self.value(b).shape() != [n, d] {
            return Err(TensorError::ShapeMismatch {
                op: "rowdot",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let a_data = self.value(a).data();
        let b_data = self.value(b).data();
        let out_data: Vec<f64> = (0..n)
            .map(|row| {
                a_data[row * d..(row + 1) * d]
                    .iter()
                    .zip(&b_data[row * d..(row + 1) * d])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![n, 1], out_data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let req = need_a || need_b;
        let rule = req.then(|| {
            let (ia, ib) = (a.0, b.0);
            let a_val = need_b.then(|| self.value(a).clone());
            let b_val = need_a.then(|| self.value(b).clone());
            Box::new(move |g: &Tensor| {
                let g_data = g.data();
                let mut out = Vec::new();
                if let Some(bv) = &b_val {
                    let mut da = vec![0.0; n * d];
                    for row in 0..n {
                        let gv = g_data[row];
                        for (o, &x) in
                            da[row * d..(row + 1) * d].iter_mut().zip(&bv.data()[row * d..(row + 1) * d])
                        {
                            *o = gv * x;
                        }
                    }
                    out.push((ia, Tensor::new(vec![n, d], da).expect("da shape")));
                }
                if let Some(av) = &a_val {
                    let mut db = vec![0.0; n * d];
                    for row in 0..n {
                        let gv = g_data[row];
                        for (o, &x) in
                            db[row * d..(row + 1) * d].iter_mut().zip(&av.data()[row * d..(row + 1) * d])
                        {
                            *o = gv * x;
                        }
                    }
                    out.push((ib, Tensor::new(vec![n, d], db).expect("db shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Column-wise concatenation: (N x A, N x B) -> N x (A + B).
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (na, ca) = self.value(a).dims2("concat_cols")?;
        let (nb, cb) = self.value(b).dims2("concat_cols")?;
        if na != nb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                detail: format!("row counts {na} vs {nb}"),
            });
        }
        let a_data = self.value(a).data();
        let b_data = self.value(b).data();
        let mut out_data = Vec::with_capacity(na * (ca + cb));
        for row in 0..na {
            out_data.extend_from_slice(&a_data[row * ca..(row + 1) * ca]);
            out_data.extend_from_slice(&b_data[row * cb..(row + 1) * cb]);
        }
        let out = Tensor::new(vec![na, ca + cb], out_data)?;
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let req = need_a || need_b;
        let rule = req.then(|| {
            let (ia, ib) = (a.0, b.0);
            Box::new(move |g: &Tensor| {
                let g_data = g.data();
                let width = ca + cb;
                let mut out = Vec::new();
                if need_a {
                    let mut da = vec![0.0; na * ca];
                    for row in 0..na {
                        da[row * ca..(row + 1) * ca]
                            .copy_from_slice(&g_data[row * width..row * width + ca]);
                    }
                    out.push((ia, Tensor::new(vec![na, ca], da).expect("da shape")));
                }
                if need_b {
                    let mut db = vec![0.0; na * cb];
                    for row in 0..na {
                        db[row * cb..(row + 1) * cb]
                            .copy_from_slice(&g_data[row * width + ca..(row + 1) * width]);
                    }
                    out.push((ib, Tensor::new(vec![na, cb], db).expect("db shape")));
                }
                out
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Mean over rows of softmax cross-entropy against integer targets.
    /// Returns a scalar; log-sum-exp is max-shifted for stability.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let (n, c) = self.value(logits).dims2("softmax_xent")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_xent",
                detail: format!("{n} rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(TensorError::InvalidArg {
                op: "softmax_xent",
                detail: format!("target {bad} out of range for {c} classes"),
            });
        }
        let x_data = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for row in 0..n {
            let xs = &x_data[row * c..(row + 1) * c];
            let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (p, &v) in probs[row * c..(row + 1) * c].iter_mut().zip(xs) {
                *p = (v - max).exp();
                denom += *p;
            }
            for p in &mut probs[row * c..(row + 1) * c] {
                *p /= denom;
            }
            loss += denom.ln() + max - xs[targets[row]];
        }
        loss /= n as f64;
        let out = Tensor::scalar(loss);
        let req = self.requires_grad(logits);
        let rule = req.then(|| {
            let il = logits.0;
            let targets = targets.to_vec();
            Box::new(move |g: &Tensor| {
                let gv = g.data()[0] / n as f64;
                let mut dl = vec![0.0; n * c];
                for row in 0..n {
                    for col in 0..c {
                        let indicator = if col == targets[row] { 1.0 } else { 0.0 };
                        dl[row * c + col] = gv * (probs[row * c + col] - indicator);
                    }
                }
                vec![(il, Tensor::new(vec![n, c], dl).expect("dl shape"))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let total: f64 = self.value(x).data().iter().sum();
        let out = Tensor::scalar(total);
        let req = self.requires_grad(x);
        let rule = req.then(|| {
            let ix = x.0;
            let shape = self.value(x).shape().to_vec();
            Box::new(move |g: &Tensor| {
                vec![(ix, Tensor::full(shape.clone(), g.data()[0]))]
            }) as _
        });
        Ok(self.push(out, req, rule))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_ones_kernel_padded() {
        // 4x4 ones, 3x3 ones kernel, pad 1: centers see 9 cells, corners 4.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 1.0), false);
        let w = tape.leaf(Tensor::full(vec![1, 1, 3, 3], 1.0), false);
        let b = tape.leaf(Tensor::zeros(vec![1]), false);
        let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 4, 4]);
        assert_eq!(out.data()[0], 4.0); // corner
        assert_eq!(out.data()[5], 9.0); // interior
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let x = tape.leaf(t(&[1, 1, 3, 3], &data), false);
        let w = tape.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv2d_channel_mismatch_names_dims() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 4, 4]), false);
        let w = tape.leaf(Tensor::zeros(vec![2, 1, 3, 3]), false);
        let err = tape.conv2d(x, w, None, 1, 1).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('1'), "got: {msg}");
    }

    #[test]
    fn maxpool_basic_and_table_geometry() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        // 112 -> 56 with kernel 3, stride 2, padding 1
        assert_eq!(out_side(112, 3, 2, 1), 56);
    }

    #[test]
    fn maxpool_window_too_large() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 2, 2]), false);
        assert!(tape.maxpool2d(x, 5, 1, 1).is_err());
    }

    #[test]
    fn maxpool_constant_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 1, 4, 4], 2.5), false);
        let y = tape.maxpool2d(x, 3, 2, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        // subgradient at 0 is 0
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn avg_pool_mean() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[2.0, 4.0, 6.0, 8.0]), false);
        let y = tape.adaptive_avg_pool2d(x, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn avg_pool_rejects_other_sizes() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 1, 4, 4]), false);
        assert!(tape.adaptive_avg_pool2d(x, 2).is_err());
    }

    #[test]
    fn linear_identity_and_dot() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]), false);
        let w_id = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
        let b0 = tape.leaf(Tensor::zeros(vec![2]), false);
        let y = tape.linear(x, w_id, b0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w = tape.leaf(t(&[2, 1], &[1.0, 1.0]), false);
        let b = tape.leaf(t(&[1], &[0.5]), false);
        let z = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(z).data(), &[3.5]);
    }

    #[test]
    fn l2_normalize_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[3.0, 4.0]), false);
        let y = tape.l2_normalize(x, 1e-12).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);

        let unit = tape.leaf(t(&[1, 2], &[0.0, 1.0]), false);
        let yu = tape.l2_normalize(unit, 1e-12).unwrap();
        assert_eq!(tape.value(yu).data(), &[0.0, 1.0]);

        let zero = tape.leaf(Tensor::zeros(vec![1, 3]), false);
        let yz = tape.l2_normalize(zero, 1e-12).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_two_values() {
        // channel values {1, 3}: normalized to {-1, +1} up to eps correction
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 1, 1, 1], &[1.0, 3.0]), false);
        let gamma = tape.leaf(Tensor::full(vec![1], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(vec![1]), false);
        let mut rm = Tensor::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0);
        let y = tape.batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, true).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-4);
        assert!((out[1] - 1.0).abs() < 1e-4);
        // running stats moved toward batch stats: mean 2, unbiased var 2
        assert!((rm.data()[0] - 0.2).abs() < 1e-12);
        assert!((rv.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_zero_gamma_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[5.0, -2.0, 0.5, 9.0]), false);
        let gamma = tape.leaf(Tensor::zeros(vec![1]), false);
        let beta = tape.leaf(Tensor::full(vec![1], 0.7), false);
        let mut rm = Tensor::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0);
        let y = tape.batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, true).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn batchnorm_eval_identity_stats() {
        let mut tape = Tape::new();
        let vals = [0.3, -1.2, 2.0, 0.0];
        let x = tape.leaf(t(&[1, 1, 2, 2], &vals), false);
        let gamma = tape.leaf(Tensor::full(vec![1], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(vec![1]), false);
        let mut rm = Tensor::zeros(vec![1]);
        let mut rv = Tensor::full(vec![1], 1.0);
        let y = tape.batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, false).unwrap();
        for (o, v) in tape.value(y).data().iter().zip(&vals) {
            assert!((o - v).abs() < 1e-5);
        }
        assert_eq!(rm.data(), &[0.0]); // eval mode leaves stats alone
    }

    #[test]
    fn batchnorm_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3, 2, 2]), false);
        let gamma = tape.leaf(Tensor::full(vec![2], 1.0), false);
        let beta = tape.leaf(Tensor::zeros(vec![2]), false);
        let mut rm = Tensor::zeros(vec![3]);
        let mut rv = Tensor::full(vec![3], 1.0);
        assert!(tape.batchnorm2d(x, gamma, beta, &mut rm, &mut rv, 1e-5, 0.1, true).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], &[1.0, -2.0, 3.0, 0.5]), true);
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_constant_root_no_grads() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(2.0));
        tape.backward(x).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn backward_rejects_off_tape_var() {
        let mut tape = Tape::new();
        tape.leaf(Tensor::scalar(1.0), true);
        let rogue = Var(57);
        assert!(matches!(tape.backward(rogue), Err(TensorError::OffTape)));
    }

    #[test]
    fn softmax_xent_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 5]), true);
        let loss = tape.softmax_xent(x, &[0, 3]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 5.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn scalar_div_by_zero_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0), false);
        assert!(tape.scalar_div(x, 0.0).is_err());
    }
}
