//! Forward and backward kernels for the layer primitives used by the
//! backbones.
//!
//! Every kernel is a pure function of its arguments. Values are stored as
//! `f32`; sums of products are accumulated in `f64` buffers and rounded once.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[i, j] = Σ_k x[i, k] · w[k, j] + b[j]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, d_in, d_out) = linear_dims(x, w, b)?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(m * d_out);
    let mut acc = vec![0f64; d_out];
    for i in 0..m {
        for (a, &bj) in acc.iter_mut().zip(b.data()) {
            *a = bj as f64;
        }
        for k in 0..d_in {
            let xik = xd[i * d_in + k];
            if xik == 0.0 {
                continue;
            }
            let xik = xik as f64;
            let wrow = &wd[k * d_out..(k + 1) * d_out];
            for (a, &wkj) in acc.iter_mut().zip(wrow) {
                *a += xik * wkj as f64;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![m, d_out], out)
}

/// Gradients of [`linear_forward`]: `(dx, dw, db)`; `dx` only when asked.
pub fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let m = x.shape()[0];
    let d_in = x.shape()[1];
    let d_out = w.shape()[1];
    if dout.shape() != [m, d_out] {
        return Err(Error::shape(
            "linear_backward",
            format!("upstream {:?}, expected [{m}, {d_out}]", dout.shape()),
        ));
    }
    let (xd, wd, gd) = (x.data(), w.data(), dout.data());

    let mut dw = Vec::with_capacity(d_in * d_out);
    let mut acc = vec![0f64; d_out];
    for k in 0..d_in {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..m {
            let xik = xd[i * d_in + k];
            if xik == 0.0 {
                continue;
            }
            let xik = xik as f64;
            for (a, &g) in acc.iter_mut().zip(&gd[i * d_out..(i + 1) * d_out]) {
                *a += xik * g as f64;
            }
        }
        dw.extend(acc.iter().map(|&v| v as f32));
    }

    let mut db = vec![0f64; d_out];
    for i in 0..m {
        for (a, &g) in db.iter_mut().zip(&gd[i * d_out..(i + 1) * d_out]) {
            *a += g as f64;
        }
    }

    let dx = need_dx.then(|| {
        let mut dx = Vec::with_capacity(m * d_in);
        for i in 0..m {
            let grow = &gd[i * d_out..(i + 1) * d_out];
            for k in 0..d_in {
                dx.push(dot(grow, &wd[k * d_out..(k + 1) * d_out]) as f32);
            }
        }
        Tensor::new(vec![m, d_in], dx)
    });

    Ok((
        dx.transpose()?,
        Tensor::new(vec![d_in, d_out], dw)?,
        Tensor::new(vec![d_out], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::shape(
            "linear",
            format!("input {:?} incompatible with weight {:?}", x.shape(), w.shape()),
        ));
    }
    if b.shape() != [w.shape()[1]] {
        return Err(Error::shape(
            "linear",
            format!("bias {:?} incompatible with weight {:?}", b.shape(), w.shape()),
        ));
    }
    Ok((x.shape()[0], x.shape()[1], w.shape()[1]))
}

/// `f64` dot product with eight independent partial sums, so the reduction
/// is not a single serial dependency chain. The summation order is fixed.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x as f64 * *y as f64;
    }
    s
}

/// Geometry of a valid, stride-1 convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    /// Accepts `x` as `C×H×W` (one sample) or `N×C×H×W`, kernels as
    /// `C_out×C_in×kh×kw`.
    pub fn infer(x: &Tensor, k: &Tensor) -> Result<Self> {
        let (batch, c_in, h, w) = match *x.shape() {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be C×H×W or N×C×H×W, got {:?}", x.shape()),
                ))
            }
        };
        let [c_out, kc, kh, kw] = *k.shape() else {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be C_out×C_in×kh×kw, got {:?}", k.shape()),
            ));
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {c_in} channels, kernels {:?} expect {kc}", x.shape(), k.shape()),
            ));
        }
        if kh > h || kw > w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}×{kw} larger than input {h}×{w} (input {:?}, kernels {:?})", x.shape(), k.shape()),
            ));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
        })
    }

    fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.out_h(), self.out_w()]
        } else {
            vec![self.c_out, self.out_h(), self.out_w()]
        }
    }
}

/// Valid cross-correlation, stride 1, summed over input channels.
pub fn conv2d_forward(x: &Tensor, kernels: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let g = ConvGeom::infer(x, kernels)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", b.shape(), g.c_out),
            ));
        }
    }
    let taps = g.c_in * g.kh * g.kw;
    let positions = g.out_h() * g.out_w();
    let sample_len = g.c_in * g.h * g.w;
    let kd = kernels.data();
    let mut col = vec![0f32; positions * taps];
    let mut out = vec![0f32; g.batch * g.c_out * positions];
    for s in 0..g.batch {
        im2col(&g, &x.data()[s * sample_len..(s + 1) * sample_len], &mut col);
        let dst = &mut out[s * g.c_out * positions..(s + 1) * g.c_out * positions];
        for co in 0..g.c_out {
            let b0 = bias.map_or(0.0, |b| b.data()[co] as f64);
            let krow = &kd[co * taps..(co + 1) * taps];
            for (p, o) in dst[co * positions..(co + 1) * positions].iter_mut().enumerate() {
                *o = (b0 + dot(krow, &col[p * taps..(p + 1) * taps])) as f32;
            }
        }
    }
    Tensor::new(g.out_shape(x.ndim() == 4), out)
}

/// Unfolds one sample into a `positions × taps` matrix whose rows line up
/// with the flattened `C_in×kh×kw` kernel layout.
fn im2col(g: &ConvGeom, xs: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let taps = g.c_in * g.kh * g.kw;
    for y in 0..oh {
        for xx in 0..ow {
            let row = &mut col[(y * ow + xx) * taps..(y * ow + xx + 1) * taps];
            let mut t = 0;
            for ci in 0..g.c_in {
                for dy in 0..g.kh {
                    let src = (ci * g.h + y + dy) * g.w + xx;
                    row[t..t + g.kw].copy_from_slice(&xs[src..src + g.kw]);
                    t += g.kw;
                }
            }
        }
    }
}

/// Gradients of [`conv2d_forward`]: `(dx, dkernels, dbias)`.
pub fn conv2d_backward(
    x: &Tensor,
    kernels: &Tensor,
    dout: &Tensor,
    need_dx: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let g = ConvGeom::infer(x, kernels)?;
    let expected = g.out_shape(x.ndim() == 4);
    if dout.shape() != expected.as_slice() {
        return Err(Error::shape(
            "conv2d_backward",
            format!("upstream {:?}, expected {expected:?}", dout.shape()),
        ));
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let taps = g.c_in * g.kh * g.kw;
    let positions = oh * ow;
    let sample_len = g.c_in * g.h * g.w;
    let (kd, gd) = (kernels.data(), dout.data());

    let mut col = vec![0f32; positions * taps];
    let mut dk = vec![0f64; kernels.numel()];
    let mut db = vec![0f64; g.c_out];
    let mut dcol = vec![0f64; if need_dx { positions * taps } else { 0 }];
    let mut dx = Vec::with_capacity(if need_dx { x.numel() } else { 0 });
    let mut dplane = vec![0f64; if need_dx { sample_len } else { 0 }];

    for s in 0..g.batch {
        im2col(&g, &x.data()[s * sample_len..(s + 1) * sample_len], &mut col);
        let gs = &gd[s * g.c_out * positions..(s + 1) * g.c_out * positions];
        if need_dx {
            dcol.iter_mut().for_each(|v| *v = 0.0);
        }
        for co in 0..g.c_out {
            let gplane = &gs[co * positions..(co + 1) * positions];
            let krow = &kd[co * taps..(co + 1) * taps];
            let dkrow = &mut dk[co * taps..(co + 1) * taps];
            let mut bsum = 0f64;
            for (p, &gv) in gplane.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                bsum += gv as f64;
                let gv = gv as f64;
                let crow = &col[p * taps..(p + 1) * taps];
                for (a, &c) in dkrow.iter_mut().zip(crow) {
                    *a += gv * c as f64;
                }
                if need_dx {
                    for (a, &kv) in dcol[p * taps..(p + 1) * taps].iter_mut().zip(krow) {
                        *a += gv * kv as f64;
                    }
                }
            }
            db[co] += bsum;
        }
        if need_dx {
            dplane.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..oh {
                for xx in 0..ow {
                    let row = &dcol[(y * ow + xx) * taps..(y * ow + xx + 1) * taps];
                    let mut t = 0;
                    for ci in 0..g.c_in {
                        for dy in 0..g.kh {
                            let dst = (ci * g.h + y + dy) * g.w + xx;
                            for (a, &v) in dplane[dst..dst + g.kw].iter_mut().zip(&row[t..t + g.kw]) {
                                *a += v;
                            }
                            t += g.kw;
                        }
                    }
                }
            }
            dx.extend(dplane.iter().map(|&v| v as f32));
        }
    }

    let dx = if need_dx {
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    Ok((
        dx,
        Tensor::new(
            kernels.shape().to_vec(),
            dk.into_iter().map(|v| v as f32).collect(),
        )?,
        Tensor::new(vec![g.c_out], db.into_iter().map(|v| v as f32).collect())?,
    ))
}

/// Non-overlapping 1×2 max pooling along the last axis. A trailing odd
/// column is dropped. Returns the pooled tensor and, per output, the flat
/// index of the winning input (ties go to the left element).
pub fn maxpool_forward(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let w = *x.shape().last().expect("tensors have at least one axis");
    if w < 2 {
        return Err(Error::shape(
            "maxpool",
            format!("last axis must have width ≥ 2, got {:?}", x.shape()),
        ));
    }
    let ow = w / 2;
    let rows = x.numel() / w;
    let mut out = Vec::with_capacity(rows * ow);
    let mut arg = Vec::with_capacity(rows * ow);
    let xd = x.data();
    for r in 0..rows {
        let base = r * w;
        for j in 0..ow {
            let (l, rr) = (base + 2 * j, base + 2 * j + 1);
            if xd[rr] > xd[l] {
                out.push(xd[rr]);
                arg.push(rr as u32);
            } else {
                out.push(xd[l]);
                arg.push(l as u32);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = ow;
    Ok((Tensor::new(shape, out)?, arg))
}

pub fn maxpool_backward(input_shape: &[usize], argmax: &[u32], dout: &Tensor) -> Result<Tensor> {
    if argmax.len() != dout.numel() {
        return Err(Error::shape(
            "maxpool_backward",
            format!("{} routes for upstream {:?}", argmax.len(), dout.shape()),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&src, &g) in argmax.iter().zip(dout.data()) {
        d[src as usize] += g;
    }
    Ok(dx)
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Passes the upstream gradient where the input was strictly positive.
pub fn relu_backward(x: &Tensor, dout: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Row-wise softmax of a 2-D tensor with max subtraction.
pub fn softmax_forward(z: &Tensor) -> Result<Tensor> {
    if z.ndim() != 2 {
        return Err(Error::shape(
            "softmax",
            format!("expected m×K logits, got {:?}", z.shape()),
        ));
    }
    let k = z.shape()[1];
    let mut out = Vec::with_capacity(z.numel());
    let mut buf = vec![0f64; k];
    for row in z.data().chunks(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut total = 0.0;
        for (b, &v) in buf.iter_mut().zip(row) {
            *b = (v as f64 - max).exp();
            total += *b;
        }
        out.extend(buf.iter().map(|&e| (e / total) as f32));
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax: `dz = p ⊙ (dp − ⟨dp, p⟩)` per row.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Tensor {
    let k = probs.shape()[1];
    let mut out = Vec::with_capacity(probs.numel());
    for (p, g) in probs.data().chunks(k).zip(dprobs.data().chunks(k)) {
        let inner = dot(p, g);
        out.extend(
            p.iter()
                .zip(g)
                .map(|(&pi, &gi)| (pi as f64 * (gi as f64 - inner)) as f32),
        );
    }
    Tensor::new(probs.shape().to_vec(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_sum() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = t(&[1, 2], &[1.0, 1.0]);
        let w = t(&[2, 1], &[2.0, 3.0]);
        let b = t(&[1], &[1.0]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_mlp_hidden_shape() {
        let x = Tensor::zeros(&[1, 4096]);
        let w = Tensor::zeros(&[4096, 300]);
        let b = Tensor::zeros(&[300]);
        assert_eq!(linear_forward(&x, &w, &b).unwrap().shape(), &[1, 300]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor::zeros(&[1, 3]);
        let w = Tensor::zeros(&[2, 2]);
        let err = linear_forward(&x, &w, &Tensor::zeros(&[2])).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn conv_table_shapes() {
        let x = Tensor::zeros(&[1, 32, 128]);
        let k = Tensor::zeros(&[16, 1, 1, 16]);
        assert_eq!(conv2d_forward(&x, &k, None).unwrap().shape(), &[16, 32, 113]);

        let x = Tensor::zeros(&[128, 32, 10]);
        let k = Tensor::zeros(&[256, 128, 32, 1]);
        assert_eq!(conv2d_forward(&x, &k, None).unwrap().shape(), &[256, 1, 10]);
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[2.0]);
        assert_eq!(conv2d_forward(&x, &k, None).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_kernel_larger_than_input_is_rejected() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 1]);
        assert!(matches!(conv2d_forward(&x, &k, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_matches_direct_sum() {
        // 2 input channels, 2×3 kernel over 3×4.
        let x = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f32 * 0.5 - 3.0).collect()).unwrap();
        let k = Tensor::new(vec![1, 2, 2, 3], (0..12).map(|v| 1.0 - v as f32 * 0.25).collect()).unwrap();
        let b = t(&[1], &[0.5]);
        let out = conv2d_forward(&x, &k, Some(&b)).unwrap();
        assert_eq!(out.shape(), &[1, 2, 2]);
        for y in 0..2 {
            for xx in 0..2 {
                let mut s = 0.5f32;
                for ci in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..3 {
                            s += k.data()[(ci * 2 + dy) * 3 + dx] * x.data()[(ci * 3 + y + dy) * 4 + xx + dx];
                        }
                    }
                }
                assert!((out.data()[y * 2 + xx] - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn maxpool_cases() {
        let (out, _) = maxpool_forward(&t(&[1, 1, 4], &[1.0, 3.0, 2.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 2.0]);
        let (out, _) = maxpool_forward(&Tensor::zeros(&[16, 32, 113])).unwrap();
        assert_eq!(out.shape(), &[16, 32, 56]);
        assert!(maxpool_forward(&t(&[1, 1, 1], &[5.0])).is_err());
    }

    #[test]
    fn relu_and_softmax() {
        assert_eq!(relu_forward(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(softmax_forward(&t(&[1, 2], &[0.0, 0.0])).unwrap().data(), &[0.5, 0.5]);
        assert_eq!(
            softmax_forward(&t(&[1, 2], &[1000.0, 1000.0])).unwrap().data(),
            &[0.5, 0.5]
        );
    }
}
