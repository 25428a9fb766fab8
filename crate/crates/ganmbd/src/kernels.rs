//! Raw forward/backward numeric kernels behind the tape ops.
//!
//! Convolutions go through im2col + GEMM. Transposed convolution is the
//! adjoint of a convolution with the same geometry, so its forward pass is
//! the convolution's input-gradient and vice versa.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output side of a convolution: floor((side + 2*pad - k) / stride) + 1.
pub fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k < 1 || stride < 1 {
        return Err(Error::config("kernel and stride must be >= 1"));
    }
    if side + 2 * pad < k {
        return Err(Error::config(format!(
            "spatial side {side} with pad {pad} smaller than kernel {k}"
        )));
    }
    Ok((side + 2 * pad - k) / stride + 1)
}

/// Output side of a transposed convolution: (side - 1) * stride - 2*pad + k.
pub fn convt_out_side(side: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let raw = (side - 1) * stride + k;
    if raw < 2 * pad {
        return Err(Error::config("transposed conv output would be empty"));
    }
    Ok(raw - 2 * pad)
}

/// Geometry of one 2-D convolution, shared by forward and both gradients.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize) -> Result<Self> {
        let ho = conv_out_side(h, k, stride, pad)?;
        let wo = conv_out_side(w, k, stride, pad)?;
        Ok(ConvGeom { cin, cout, k, stride, pad, h, w, ho, wo })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unpack one sample [Ci,H,W] into the [Ci*k*k, Ho*Wo] patch matrix.
fn im2col<S: Scalar>(g: &ConvGeom, x: &[S], col: &mut [S]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    debug_assert_eq!(col.len(), g.col_rows() * g.col_cols());
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k * k + ky * k + kx) * cols;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let base = row + oy * g.wo;
                    if iy < 0 || iy >= h {
                        col[base..base + g.wo].iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        col[base + ox] = if ix < 0 || ix >= w {
                            S::zero()
                        } else {
                            plane[(iy * w + ix) as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of im2col: scatter-add patch-matrix gradients back onto [Ci,H,W].
fn col2im<S: Scalar>(g: &ConvGeom, col: &[S], x: &mut [S]) {
    debug_assert_eq!(x.len(), g.cin * g.h * g.w);
    let (h, w, k) = (g.h as isize, g.w as isize, g.k);
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k * k + ky * k + kx) * cols;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = row + oy * g.wo;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += col[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` is [Co,Ci,k,k], `bias` (optional) [Co].
pub fn conv2d_forward<S: Scalar>(
    geom: &ConvGeom,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Tensor<S> {
    let n = input.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![S::zero(); rows * cols];
    let mut out = Tensor::zeros(vec![n, geom.cout, geom.ho, geom.wo]);
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * cols;
    for i in 0..n {
        im2col(geom, &input.data()[i * in_sz..(i + 1) * in_sz], &mut col);
        let dst = &mut out.data_mut()[i * out_sz..(i + 1) * out_sz];
        S::gemm(geom.cout, rows, cols, S::one(), weight.data(), &col, S::zero(), dst);
        if let Some(b) = bias {
            for co in 0..geom.cout {
                let bv = b.data()[co];
                dst[co * cols..(co + 1) * cols].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input: col2im(W^T * gout).
pub fn conv2d_input_grad<S: Scalar>(geom: &ConvGeom, gout: &Tensor<S>, weight: &Tensor<S>) -> Tensor<S> {
    let n = gout.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut colg = vec![S::zero(); rows * cols];
    let mut gin = Tensor::zeros(vec![n, geom.cin, geom.h, geom.w]);
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * cols;
    for i in 0..n {
        let go = &gout.data()[i * out_sz..(i + 1) * out_sz];
        // A = W^T (rows x cout), via strides on W [cout x rows].
        S::gemm_strided(
            rows, geom.cout, cols, S::one(),
            weight.data(), 1, rows as isize,
            go, cols as isize, 1,
            S::zero(),
            &mut colg, cols as isize, 1,
        );
        col2im(geom, &colg, &mut gin.data_mut()[i * in_sz..(i + 1) * in_sz]);
    }
    gin
}

/// Gradients w.r.t. weight and bias: gW += gout * col^T, gb += row sums.
pub fn conv2d_weight_grad<S: Scalar>(
    geom: &ConvGeom,
    input: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let n = input.shape()[0];
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let mut col = vec![S::zero(); rows * cols];
    let mut gw = Tensor::zeros(vec![geom.cout, geom.cin, geom.k, geom.k]);
    let mut gb = Tensor::zeros(vec![geom.cout]);
    let in_sz = geom.cin * geom.h * geom.w;
    let out_sz = geom.cout * cols;
    for i in 0..n {
        im2col(geom, &input.data()[i * in_sz..(i + 1) * in_sz], &mut col);
        let go = &gout.data()[i * out_sz..(i + 1) * out_sz];
        // gW (cout x rows) += gout (cout x cols) * col^T (cols x rows)
        S::gemm_strided(
            geom.cout, cols, rows, S::one(),
            go, cols as isize, 1,
            &col, 1, cols as isize,
            S::one(),
            gw.data_mut(), rows as isize, 1,
        );
        for co in 0..geom.cout {
            let mut s = S::zero();
            for v in &go[co * cols..(co + 1) * cols] {
                s += *v;
            }
            gb.data_mut()[co] += s;
        }
    }
    (gw, gb)
}

/// Forward transposed convolution. `weight` is [Cin,Cout,k,k]; the geometry
/// describes the *adjoint* convolution (from the convt output back to its
/// input), so `geom.cin = cout_t`, `geom.cout = cin_t`, `geom.h/w` are the
/// convt *output* sides and `geom.ho/wo` the convt *input* sides.
pub fn convt2d_forward<S: Scalar>(
    geom: &ConvGeom,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: Option<&Tensor<S>>,
) -> Tensor<S> {
    let mut out = conv2d_input_grad(geom, input, weight);
    if let Some(b) = bias {
        let n = out.shape()[0];
        let (c, hw) = (geom.cin, geom.h * geom.w);
        for i in 0..n {
            for ch in 0..c {
                let bv = b.data()[ch];
                let at = (i * c + ch) * hw;
                out.data_mut()[at..at + hw].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub fn convt2d_input_grad<S: Scalar>(geom: &ConvGeom, gout: &Tensor<S>, weight: &Tensor<S>) -> Tensor<S> {
    conv2d_forward(geom, gout, weight, None)
}

pub fn convt2d_weight_grad<S: Scalar>(
    geom: &ConvGeom,
    input: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    // Roles swap relative to the adjoint convolution: its "input" is the
    // convt output gradient and its "output gradient" is the convt input.
    let (gw, _) = conv2d_weight_grad(geom, gout, input);
    let n = gout.shape()[0];
    let (c, hw) = (geom.cin, geom.h * geom.w);
    let mut gb = Tensor::zeros(vec![c]);
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * hw;
            let mut s = S::zero();
            for v in &gout.data()[at..at + hw] {
                s += *v;
            }
            gb.data_mut()[ch] += s;
        }
    }
    (gw, gb)
}

/// Dense layer forward: [N,F] x [F,G] + [G].
pub fn dense_forward<S: Scalar>(input: &Tensor<S>, weight: &Tensor<S>, bias: Option<&Tensor<S>>) -> Tensor<S> {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = weight.shape()[1];
    let mut out = Tensor::zeros(vec![n, g]);
    S::gemm(n, f, g, S::one(), input.data(), weight.data(), S::zero(), out.data_mut());
    if let Some(b) = bias {
        for i in 0..n {
            for j in 0..g {
                out.data_mut()[i * g + j] += b.data()[j];
            }
        }
    }
    out
}

pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, f) = (input.shape()[0], input.shape()[1]);
    let g = weight.shape()[1];
    let mut gin = Tensor::zeros(vec![n, f]);
    let mut gw = Tensor::zeros(vec![f, g]);
    let mut gb = Tensor::zeros(vec![g]);
    // gin = gout * W^T
    S::gemm_strided(
        n, g, f, S::one(),
        gout.data(), g as isize, 1,
        weight.data(), 1, g as isize,
        S::zero(),
        gin.data_mut(), f as isize, 1,
    );
    // gw = x^T * gout
    S::gemm_strided(
        f, n, g, S::one(),
        input.data(), 1, f as isize,
        gout.data(), g as isize, 1,
        S::zero(),
        gw.data_mut(), g as isize, 1,
    );
    for i in 0..n {
        for j in 0..g {
            gb.data_mut()[j] += gout.data()[i * g + j];
        }
    }
    (gin, gw, gb)
}

/// Per-(sample, channel) statistics saved by the instance-norm forward pass.
pub struct InstanceNormStats<S: Scalar> {
    pub mean: Vec<S>,
    pub inv_std: Vec<S>,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Instance normalization with affine parameters gamma/beta of length C.
pub fn instance_norm_forward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
) -> (Tensor<S>, InstanceNormStats<S>) {
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let hw: usize = input.shape()[2..].iter().product();
    let m = S::from_f64(hw as f64);
    let eps = S::from_f64(INSTANCE_NORM_EPS);
    let mut out = Tensor::zeros(input.shape().to_vec());
    let mut stats = InstanceNormStats { mean: vec![S::zero(); n * c], inv_std: vec![S::zero(); n * c] };
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * hw;
            let x = &input.data()[at..at + hw];
            let mut mu = S::zero();
            for &v in x {
                mu += v;
            }
            mu /= m;
            let mut var = S::zero();
            for &v in x {
                let d = v - mu;
                var += d * d;
            }
            var /= m;
            let inv = (var + eps).sqrt().recip();
            stats.mean[i * c + ch] = mu;
            stats.inv_std[i * c + ch] = inv;
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            for (o, &v) in out.data_mut()[at..at + hw].iter_mut().zip(x) {
                *o = (v - mu) * inv * g + b;
            }
        }
    }
    (out, stats)
}

pub fn instance_norm_backward<S: Scalar>(
    input: &Tensor<S>,
    gamma: &Tensor<S>,
    stats: &InstanceNormStats<S>,
    gout: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (n, c) = (input.shape()[0], input.shape()[1]);
    let hw: usize = input.shape()[2..].iter().product();
    let m = S::from_f64(hw as f64);
    let mut gin = Tensor::zeros(input.shape().to_vec());
    let mut ggamma = Tensor::zeros(vec![c]);
    let mut gbeta = Tensor::zeros(vec![c]);
    for i in 0..n {
        for ch in 0..c {
            let at = (i * c + ch) * hw;
            let x = &input.data()[at..at + hw];
            let g = &gout.data()[at..at + hw];
            let (mu, inv) = (stats.mean[i * c + ch], stats.inv_std[i * c + ch]);
            let mut sum_g = S::zero();
            let mut sum_gx = S::zero();
            for (&gv, &xv) in g.iter().zip(x) {
                sum_g += gv;
                sum_gx += gv * (xv - mu) * inv;
            }
            ggamma.data_mut()[ch] += sum_gx;
            gbeta.data_mut()[ch] += sum_g;
            let gam = gamma.data()[ch];
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            for (o, (&gv, &xv)) in gin.data_mut()[at..at + hw].iter_mut().zip(g.iter().zip(x)) {
                let xh = (xv - mu) * inv;
                *o = gam * inv * (gv - mean_g - xh * mean_gx);
            }
        }
    }
    (gin, ggamma, gbeta)
}

/// Nearest-neighbor resize on [N,C,H,W]: src = floor(dst * src_side / dst_side).
pub fn nearest_resize_forward<S: Scalar>(input: &Tensor<S>, to_side: usize) -> Tensor<S> {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let mut out = Tensor::zeros(vec![n, c, to_side, to_side]);
    for i in 0..n {
        for ch in 0..c {
            let src = &input.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst_at = (i * c + ch) * to_side * to_side;
            for oy in 0..to_side {
                let iy = oy * h / to_side;
                for ox in 0..to_side {
                    let ix = ox * w / to_side;
                    out.data_mut()[dst_at + oy * to_side + ox] = src[iy * w + ix];
                }
            }
        }
    }
    out
}

pub fn nearest_resize_backward<S: Scalar>(in_shape: &[usize], gout: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let to_side = gout.shape()[2];
    let mut gin = Tensor::zeros(in_shape.to_vec());
    for i in 0..n {
        for ch in 0..c {
            let g = &gout.data()[(i * c + ch) * to_side * to_side..(i * c + ch + 1) * to_side * to_side];
            let at = (i * c + ch) * h * w;
            for oy in 0..to_side {
                let iy = oy * h / to_side;
                for ox in 0..to_side {
                    let ix = ox * w / to_side;
                    gin.data_mut()[at + iy * w + ix] += g[oy * to_side + ox];
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent direct convolution: six nested loops, no im2col.
    fn conv_oracle(
        input: &Tensor<f64>, weight: &Tensor<f64>, bias: &Tensor<f64>,
        stride: usize, pad: usize,
    ) -> Tensor<f64> {
        let (n, ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (co, k) = (weight.shape()[0], weight.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(vec![n, co, ho, wo]);
        for ni in 0..n {
            for coi in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias.data()[coi];
                        for cii in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = input.data()
                                        [((ni * ci + cii) * h + iy as usize) * w + ix as usize];
                                    let wv = weight.data()[((coi * ci + cii) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((ni * co + coi) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_broadcasts_bias() {
        let geom = ConvGeom::new(3, 2, 3, 1, 1, 8, 8).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 3, 8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Tensor::randn(vec![2, 3, 3, 3], 0.5, &mut rng);
        let b = Tensor::from_vec(vec![2], vec![0.25f32, -1.5]).unwrap();
        let y = conv2d_forward(&geom, &x, &w, Some(&b));
        for c in 0..2 {
            for v in &y.data()[c * 64..(c + 1) * 64] {
                assert_eq!(*v, b.data()[c]);
            }
        }
    }

    #[test]
    fn conv_scalar_kernel_is_elementwise_scale() {
        let geom = ConvGeom::new(1, 1, 1, 1, 0, 2, 2).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(vec![1, 1, 1, 1], vec![2.0f32]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d_forward(&geom, &x, &w, Some(&b));
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let geom = ConvGeom::new(3, 4, 4, stride, pad, 6, 6).unwrap();
            let x = Tensor::<f64>::randn(vec![1, 3, 6, 6], 1.0, &mut rng);
            let w = Tensor::randn(vec![4, 3, 4, 4], 0.3, &mut rng);
            let b = Tensor::randn(vec![4], 0.3, &mut rng);
            let got = conv2d_forward(&geom, &x, &w, Some(&b));
            let want = conv_oracle(&x, &w, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_mismatch_is_config_error() {
        assert!(ConvGeom::new(3, 4, 5, 1, 0, 4, 4).is_err());
    }

    #[test]
    fn dense_identity_and_one_hot_rows() {
        // identity weight, zero bias -> output equals input
        let x = Tensor::from_vec(vec![2, 3], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let y = dense_forward(&x, &eye, None);
        assert_eq!(y.data(), x.data());

        // one-hot row e_k selects the k-th row of the weight plus bias
        let w = Tensor::from_vec(vec![3, 2], vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(vec![2], vec![0.5f32, -0.5]).unwrap();
        let onehot = Tensor::from_vec(vec![1, 3], vec![0.0f32, 1.0, 0.0]).unwrap();
        let y = dense_forward(&onehot, &w, Some(&b));
        assert_eq!(y.data(), &[3.5, 3.5]);
    }

    #[test]
    fn dense_matches_direct_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(vec![2, 5], 1.0, &mut rng);
        let w = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let b = Tensor::randn(vec![3], 1.0, &mut rng);
        let y = dense_forward(&x, &w, Some(&b));
        for n in 0..2 {
            for g in 0..3 {
                let direct: f64 = (0..5).map(|f| x.data()[n * 5 + f] * w.data()[f * 3 + g]).sum::<f64>()
                    + b.data()[g];
                assert!((y.data()[n * 3 + g] - direct).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convt_shape_and_adjoint_identity() {
        // stride-2 k=4 pad=1 doubles the side
        let geom = ConvGeom::new(2, 3, 4, 2, 1, 8, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let w = Tensor::randn(vec![3, 2, 4, 4], 0.3, &mut rng);
        let y = convt2d_forward(&geom, &x, &w, None);
        assert_eq!(y.shape(), &[1, 2, 8, 8]);
        assert_eq!(convt_out_side(4, 4, 2, 1).unwrap(), 8);

        // adjoint identity: <conv(u), v> == <u, convt(v)>
        let u = Tensor::<f64>::randn(vec![1, 2, 8, 8], 1.0, &mut rng);
        let v = Tensor::<f64>::randn(vec![1, 3, 4, 4], 1.0, &mut rng);
        let conv_u = conv2d_forward(&geom, &u, &w, None);
        // conv here maps [2,8,8] -> [3,4,4] with weight viewed as [Co=3,Ci=2,k,k]
        let lhs: f64 = conv_u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let convt_v = convt2d_forward(&geom, &v, &w, None);
        let rhs: f64 = u.data().iter().zip(convt_v.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0));
    }

    #[test]
    fn instance_norm_normalizes_and_affines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 4], 2.0, &mut rng);
        let gamma = Tensor::full(vec![3], 1.0);
        let beta = Tensor::zeros(vec![3]);
        let (y, _) = instance_norm_forward(&x, &gamma, &beta);
        for i in 0..2 {
            for c in 0..3 {
                let at = (i * 3 + c) * 16;
                let s: f64 = y.data()[at..at + 16].iter().sum();
                let ss: f64 = y.data()[at..at + 16].iter().map(|v| v * v).sum();
                assert!((s / 16.0).abs() < 1e-10);
                assert!((ss / 16.0 - 1.0).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn nearest_resize_replicates_blocks() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = nearest_resize_forward(&x, 4);
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        // down then up by the same factor -> constant on 2x2 blocks
        let back = nearest_resize_forward(&nearest_resize_forward(&y, 2), 4);
        for by in 0..2 {
            for bx in 0..2 {
                let v = back.data()[by * 2 * 4 + bx * 2];
                for dy in 0..2 {
                    for dx in 0..2 {
                        assert_eq!(back.data()[(by * 2 + dy) * 4 + bx * 2 + dx], v);
                    }
                }
            }
        }
    }

    #[test]
    fn nearest_resize_identity_at_equal_sides() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f32>::randn(vec![1, 2, 5, 5], 1.0, &mut rng);
        let y = nearest_resize_forward(&x, 5);
        assert_eq!(x.data(), y.data());
    }
}
