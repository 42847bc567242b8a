//! Numeric kernels behind the autograd ops: GEMM-backed 3-D convolution
//! (im2col / col2im) and the 2x transposed convolution used by the decoder.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = a · b + beta · c` for row-major matrices. `a` is `m×k` (stored `k×m`
/// when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeometry {
    pub fn new(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        if x.rank() != 5 || w.rank() != 5 {
            return Err(Error::shape(format!(
                "conv3d expects 5-D input and weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let k = w.shape()[2];
        if w.shape()[3] != k || w.shape()[4] != k {
            return Err(Error::shape("conv3d kernels must be cubic"));
        }
        if x.channels() != w.shape()[1] {
            return Err(Error::shape(format!(
                "conv3d input has {} channels, weight expects {}",
                x.channels(),
                w.shape()[1]
            )));
        }
        let in_dims = x.spatial();
        let mut out_dims = [0; 3];
        for (o, &d) in out_dims.iter_mut().zip(&in_dims) {
            if d + 2 * padding < k {
                return Err(Error::shape(format!(
                    "input extent {d} too small for kernel {k} with padding {padding}"
                )));
            }
            *o = (d + 2 * padding - k) / stride + 1;
        }
        Ok(ConvGeometry {
            in_channels: x.channels(),
            out_channels: w.shape()[0],
            kernel: k,
            stride,
            padding,
            in_dims,
            out_dims,
        })
    }

    fn k3(&self) -> usize {
        self.kernel * self.kernel * self.kernel
    }

    fn n_in(&self) -> usize {
        self.in_dims.iter().product()
    }

    fn n_out(&self) -> usize {
        self.out_dims.iter().product()
    }

    /// Range of output indices along one axis whose input tap `o*s + k - p`
    /// falls inside `[0, extent)`.
    fn valid_range(&self, tap: usize, extent: usize, out_extent: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = tap as isize - self.padding as isize;
        // o*s + shift >= 0  =>  o >= ceil(-shift / s)
        let lo = if shift >= 0 { 0 } else { (-shift + s - 1) / s };
        // o*s + shift <= extent - 1
        let top = extent as isize - 1 - shift;
        let hi = if top < 0 { 0 } else { top / s + 1 };
        let lo = lo.clamp(0, out_extent as isize) as usize;
        let hi = hi.clamp(0, out_extent as isize) as usize;
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n_out = self.n_out();
        let n_in = self.n_in();
        for ic in 0..self.in_channels {
            let xin = &x[ic * n_in..(ic + 1) * n_in];
            for kz in 0..k {
                let (z_lo, z_hi) = self.valid_range(kz, d, od);
                for ky in 0..k {
                    let (y_lo, y_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let (x_lo, x_hi) = self.valid_range(kx, w, ow);
                        let row = (ic * self.k3() + (kz * k + ky) * k + kx) * n_out;
                        let dst = &mut col[row..row + n_out];
                        dst.fill(0.0);
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - p;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let src_row = (iz * h + iy) * w;
                                let dst_row = (oz * oh + oy) * ow;
                                if s == 1 {
                                    let ix0 = x_lo + kx - p;
                                    let len = x_hi - x_lo;
                                    dst[dst_row + x_lo..dst_row + x_hi]
                                        .copy_from_slice(&xin[src_row + ix0..src_row + ix0 + len]);
                                } else {
                                    for ox in x_lo..x_hi {
                                        dst[dst_row + ox] = xin[src_row + ox * s + kx - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], dx: &mut [f64]) {
        let [d, h, w] = self.in_dims;
        let [od, oh, ow] = self.out_dims;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let n_out = self.n_out();
        let n_in = self.n_in();
        for ic in 0..self.in_channels {
            let xg = &mut dx[ic * n_in..(ic + 1) * n_in];
            for kz in 0..k {
                let (z_lo, z_hi) = self.valid_range(kz, d, od);
                for ky in 0..k {
                    let (y_lo, y_hi) = self.valid_range(ky, h, oh);
                    for kx in 0..k {
                        let (x_lo, x_hi) = self.valid_range(kx, w, ow);
                        let row = (ic * self.k3() + (kz * k + ky) * k + kx) * n_out;
                        let src = &col[row..row + n_out];
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - p;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let dst_row = (iz * h + iy) * w;
                                let src_row = (oz * oh + oy) * ow;
                                for ox in x_lo..x_hi {
                                    xg[dst_row + ox * s + kx - p] += src[src_row + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvGeometry)> {
    let g = ConvGeometry::new(x, w, stride, padding)?;
    let b = x.batch();
    let rows = g.in_channels * g.k3();
    let n_out = g.n_out();
    let mut out = Tensor::zeros(&[b, g.out_channels, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut col = vec![0.0; rows * n_out];
    let per_in = g.in_channels * g.n_in();
    let per_out = g.out_channels * n_out;
    for bi in 0..b {
        g.im2col(&x.data()[bi * per_in..(bi + 1) * per_in], &mut col);
        let dst = &mut out.data_mut()[bi * per_out..(bi + 1) * per_out];
        gemm(g.out_channels, rows, n_out, w.data(), false, &col, false, dst, 0.0);
        if let Some(bias) = bias {
            for (oc, &bv) in bias.data().iter().enumerate() {
                dst[oc * n_out..(oc + 1) * n_out]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Ok((out, g))
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let b = x.batch();
    let rows = g.in_channels * g.k3();
    let n_out = g.n_out();
    let per_in = g.in_channels * g.n_in();
    let per_out = g.out_channels * n_out;
    let mut col = vec![0.0; rows * n_out];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(w.shape()));
    for bi in 0..b {
        let go = &grad_out.data()[bi * per_out..(bi + 1) * per_out];
        if let Some(dw) = dw.as_mut() {
            g.im2col(&x.data()[bi * per_in..(bi + 1) * per_in], &mut col);
            // dW += dOut · colᵀ
            gemm(g.out_channels, n_out, rows, go, false, &col, true, dw.data_mut(), 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dcol = Wᵀ · dOut
            gemm(rows, g.out_channels, n_out, w.data(), true, go, false, &mut col, 0.0);
            g.col2im(&col, &mut dx.data_mut()[bi * per_in..(bi + 1) * per_in]);
        }
    }
    let db = need_bias.then(|| {
        let mut db = Tensor::zeros(&[g.out_channels]);
        for bi in 0..b {
            for oc in 0..g.out_channels {
                let start = bi * per_out + oc * n_out;
                db.data_mut()[oc] += grad_out.data()[start..start + n_out].iter().sum::<f64>();
            }
        }
        db
    });
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Transposed convolution with kernel 2 and stride 2: every input voxel
/// expands into a 2×2×2 output block. Weight layout `(in, out, 2, 2, 2)`.
pub fn upconv2x_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if x.rank() != 5 || w.rank() != 5 || w.shape()[2..] != [2, 2, 2] {
        return Err(Error::shape(format!(
            "upconv expects 5-D input and (in,out,2,2,2) weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    if x.channels() != w.shape()[0] {
        return Err(Error::shape(format!(
            "upconv input has {} channels, weight expects {}",
            x.channels(),
            w.shape()[0]
        )));
    }
    let (b, cin, cout) = (x.batch(), x.channels(), w.shape()[1]);
    let [d, h, wd] = x.spatial();
    let n = d * h * wd;
    let rows = cout * 8;
    let mut y = vec![0.0; rows * n];
    let mut out = Tensor::zeros(&[b, cout, 2 * d, 2 * h, 2 * wd]);
    let (oh, ow) = (2 * h, 2 * wd);
    let on = 8 * n;
    for bi in 0..b {
        // Y (cout·8 × n) = Wᵀ (cout·8 × cin) · X (cin × n)
        gemm(rows, cin, n, w.data(), true, x.item_slice(bi), false, &mut y, 0.0);
        let dst = &mut out.data_mut()[bi * cout * on..(bi + 1) * cout * on];
        for oc in 0..cout {
            let bv = bias.map_or(0.0, |t| t.data()[oc]);
            for off in 0..8 {
                let (dz, dy, dx) = (off >> 2, (off >> 1) & 1, off & 1);
                let src = &y[(oc * 8 + off) * n..(oc * 8 + off + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        let base = oc * on + ((2 * z + dz) * oh + 2 * yy + dy) * ow + dx;
                        let srow = (z * h + yy) * wd;
                        for xx in 0..wd {
                            dst[base + 2 * xx] = src[srow + xx] + bv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn upconv2x_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let (b, cin, cout) = (x.batch(), x.channels(), w.shape()[1]);
    let [d, h, wd] = x.spatial();
    let n = d * h * wd;
    let rows = cout * 8;
    let (oh, ow) = (2 * h, 2 * wd);
    let on = 8 * n;
    let mut gy = vec![0.0; rows * n];
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_weight.then(|| Tensor::zeros(w.shape()));
    let mut db = need_bias.then(|| Tensor::zeros(&[cout]));
    for bi in 0..b {
        let go = &grad_out.data()[bi * cout * on..(bi + 1) * cout * on];
        for oc in 0..cout {
            for off in 0..8 {
                let (dz, dy, dxo) = (off >> 2, (off >> 1) & 1, off & 1);
                let dst = &mut gy[(oc * 8 + off) * n..(oc * 8 + off + 1) * n];
                for z in 0..d {
                    for yy in 0..h {
                        let base = oc * on + ((2 * z + dz) * oh + 2 * yy + dy) * ow + dxo;
                        let drow = (z * h + yy) * wd;
                        for xx in 0..wd {
                            dst[drow + xx] = go[base + 2 * xx];
                        }
                    }
                }
            }
            if let Some(db) = db.as_mut() {
                db.data_mut()[oc] += go[oc * on..(oc + 1) * on].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            // dW (cin × cout·8) += X (cin × n) · GYᵀ
            gemm(cin, n, rows, x.item_slice(bi), false, &gy, true, dw.data_mut(), 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            // dX (cin × n) = W (cin × cout·8) · GY
            let per = cin * n;
            gemm(cin, rows, n, w.data(), false, &gy, false, &mut dx.data_mut()[bi * per..(bi + 1) * per], 0.0);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop convolution used as the reference.
    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, s: usize, p: usize) -> Tensor {
        let g = ConvGeometry::new(x, w, s, p).unwrap();
        let [d, h, wd] = g.in_dims;
        let [od, oh, ow] = g.out_dims;
        let k = g.kernel;
        let mut out = Tensor::zeros(&[x.batch(), g.out_channels, od, oh, ow]);
        for bi in 0..x.batch() {
            for oc in 0..g.out_channels {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = b.data()[oc];
                            for ic in 0..g.in_channels {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * s + kz) as isize - p as isize;
                                            let iy = (oy * s + ky) as isize - p as isize;
                                            let ix = (ox * s + kx) as isize - p as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= wd {
                                                continue;
                                            }
                                            let xv = x.plane(bi, ic)[(iz * h + iy) * wd + ix];
                                            let wv = w.data()[(((oc * g.in_channels + ic) * k + kz) * k + ky) * k + kx];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            out.plane_mut(bi, oc)[(oz * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|i| ((i * 37 % 101) as f64 - 50.0) * scale).collect()).unwrap()
    }

    #[test]
    fn gemm_matches_naive_in_all_transpose_modes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i % 7) as f64 - 3.0).collect();
        let at: Vec<f64> = (0..m * k).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f64> = (0..k * n).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, 0.0);
                assert_eq!(c, expect);
            }
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let x = ramp(&[2, 3, 5, 4, 6], 0.01);
        let w = ramp(&[4, 3, 3, 3, 3], 0.02);
        let b = ramp(&[4], 0.1);
        for (s, p) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
            let (out, _) = conv3d_forward(&x, &w, Some(&b), s, p).unwrap();
            let reference = naive_conv(&x, &w, &b, s, p);
            assert_eq!(out.shape(), reference.shape());
            assert!(out.max_abs_diff(&reference) < 1e-12, "stride {s} pad {p}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> must equal <x, conv_x^T g> and <w, conv_w^T g>.
        let x = ramp(&[1, 2, 4, 5, 3], 0.03);
        let w = ramp(&[3, 2, 3, 3, 3], 0.05);
        let zero_b = Tensor::zeros(&[3]);
        for (s, p) in [(1, 1), (2, 1)] {
            let (y, geo) = conv3d_forward(&x, &w, Some(&zero_b), s, p).unwrap();
            let gout = ramp(y.shape(), 0.07);
            let grads = conv3d_backward(&x, &w, &gout, &geo, true, true, true);
            let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
            let via_x: f64 = x.data().iter().zip(grads.input.unwrap().data()).map(|(a, b)| a * b).sum();
            let via_w: f64 = w.data().iter().zip(grads.weight.unwrap().data()).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-10);
            assert!((lhs - via_w).abs() < 1e-10);
            assert!((grads.bias.unwrap().sum() - gout.sum()).abs() < 1e-10);
        }
    }

    #[test]
    fn upconv_places_blocks_and_is_adjoint() {
        let x = ramp(&[2, 3, 2, 3, 2], 0.1);
        let w = ramp(&[3, 2, 2, 2, 2], 0.2);
        let y = upconv2x_forward(&x, &w, None).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4, 6, 4]);
        // spot check one output voxel against the definition
        let (bi, oc, z, yy, xx) = (1, 1, 3, 4, 1);
        let (iz, iy, ix) = (z / 2, yy / 2, xx / 2);
        let off = ((z % 2) * 2 + yy % 2) * 2 + xx % 2;
        let expect: f64 = (0..3)
            .map(|ic| x.plane(bi, ic)[(iz * 3 + iy) * 2 + ix] * w.data()[(ic * 2 + oc) * 8 + off])
            .sum();
        assert!((y.plane(bi, oc)[(z * 6 + yy) * 4 + xx] - expect).abs() < 1e-12);

        let gout = ramp(y.shape(), 0.03);
        let grads = upconv2x_backward(&x, &w, &gout, true, true, true);
        let lhs: f64 = y.data().iter().zip(gout.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = x.data().iter().zip(grads.input.unwrap().data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = w.data().iter().zip(grads.weight.unwrap().data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
