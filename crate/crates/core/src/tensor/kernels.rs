//! Raw slice kernels behind the graph ops.
//!
//! Convolution is lowered to im2col + sgemm per sample. Samples run in
//! parallel; every reduction across samples happens in sample order, so
//! results do not depend on thread scheduling.

use rayon::prelude::*;

/// `c = a · b + beta · c` for row-major matrices, where `a` is `m×k` (stored
/// `k×m` when `trans_a`) and `b` is `k×n` (stored `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn in_plane(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }
}

fn im2col(g: &ConvGeometry, x: &[f32], col: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (c * g.kernel_h + i) * g.kernel_w + j;
                let dst = &mut col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if y < 0 || y >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *v = if xx < 0 || xx >= g.width as isize {
                            0.0
                        } else {
                            src[xx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, col: &[f32], dx: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let spatial = oh * ow;
    dx.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kernel_h {
            for j in 0..g.kernel_w {
                let row = (c * g.kernel_h + i) * g.kernel_w + j;
                let src = &col[row * spatial..(row + 1) * spatial];
                for oy in 0..oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.height as isize {
                        continue;
                    }
                    let line = &mut plane[y as usize * g.width..(y as usize + 1) * g.width];
                    for ox in 0..ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.width as isize {
                            line[xx as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f32], w: &[f32], b: &[f32]) -> Vec<f32> {
    let spatial = g.out_h() * g.out_w();
    let mut out = vec![0.0f32; g.batch * g.out_plane()];
    out.par_chunks_mut(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .for_each_init(
            || vec![0.0f32; g.patch() * spatial],
            |col, (dst, src)| {
                im2col(g, src, col);
                for (k, chunk) in dst.chunks_mut(spatial).enumerate() {
                    chunk.iter_mut().for_each(|v| *v = b[k]);
                }
                gemm(g.out_channels, g.patch(), spatial, w, false, col, false, dst, 1.0);
            },
        );
    out
}

/// Per-sample weight, bias and input gradients.
type SampleGrads = (Vec<f32>, Vec<f32>, Option<Vec<f32>>);

pub struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Gradients of a convolution. `need_dx` skips the input gradient (e.g. for
/// the first layer, whose input is data).
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f32],
    w: &[f32],
    dout: &[f32],
    need_dx: bool,
) -> ConvGrads {
    let spatial = g.out_h() * g.out_w();
    let wlen = g.out_channels * g.patch();
    let per_sample: Vec<SampleGrads> = x
        .par_chunks(g.in_plane())
        .zip(dout.par_chunks(g.out_plane()))
        .map(|(src, d)| {
            let mut col = vec![0.0f32; g.patch() * spatial];
            im2col(g, src, &mut col);
            let mut dw = vec![0.0f32; wlen];
            gemm(g.out_channels, spatial, g.patch(), d, false, &col, true, &mut dw, 0.0);
            let db = d.chunks(spatial).map(|c| c.iter().sum::<f32>()).collect();
            let dx = need_dx.then(|| {
                gemm(g.patch(), g.out_channels, spatial, w, true, d, false, &mut col, 0.0);
                let mut dx = vec![0.0f32; g.in_plane()];
                col2im(g, &col, &mut dx);
                dx
            });
            (dw, db, dx)
        })
        .collect();

    let mut dw = vec![0.0f32; wlen];
    let mut db = vec![0.0f32; g.out_channels];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.batch * g.in_plane()));
    for (sw, sb, sx) in per_sample {
        dw.iter_mut().zip(&sw).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
        if let (Some(dx), Some(sx)) = (dx.as_mut(), sx) {
            dx.extend_from_slice(&sx);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max-pool over `[planes, h, w]`. Returns the pooled values and, for every
/// output cell, the flat input index of the winning element. Ties resolve to
/// the first element in row-major window order.
pub fn maxpool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f32>, Vec<usize>) {
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for i in 0..k {
                    for j in 0..k {
                        let idx = base + (oy * stride + i) * w + ox * stride + j;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transpose_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, 0.0);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let (v, arg) = maxpool_forward(&[3.0; 16], 1, 4, 4, 2, 2);
        assert_eq!(v, vec![3.0; 4]);
        assert_eq!(arg, vec![0, 2, 8, 10]);
    }
}
