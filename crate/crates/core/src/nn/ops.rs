//! Dense kernels shared by the layers. Activations are stored channel-major
//! across the batch: element `(c, b, p)` lives at `(c * batch + b) * plane + p`.

/// `C = A * B + beta * C` with arbitrary strides on A and B; C is `m x n`
/// with row stride `ldc` and unit column stride.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    if beta != 1.0 {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|x| *x *= beta);
        }
    }
    if k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    let (rsa, csa) = a_strides;
    let (rsb, csb) = b_strides;
    // the packed kernel wastes most of its tile on a single output row or a rank-one update
    if m == 1 && csb == 1 {
        let row = &mut c[..n];
        for t in 0..k {
            let at = a[t * csa];
            row.iter_mut().zip(&b[t * rsb..t * rsb + n]).for_each(|(c, &b)| *c += at * b);
        }
        return;
    }
    if m == 1 && rsb == 1 && csa == 1 {
        for (j, cj) in c[..n].iter_mut().enumerate() {
            *cj += dot(&a[..k], &b[j * csb..j * csb + k]);
        }
        return;
    }
    if k == 1 && csb == 1 {
        let brow = &b[..n];
        for i in 0..m {
            let ai = a[i * rsa];
            c[i * ldc..i * ldc + n].iter_mut().zip(brow).for_each(|(c, &b)| *c += ai * b);
        }
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Dot product with independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    gemm_ld(m, k, n, a, a_strides, b, b_strides, beta, c, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Output range along one axis whose tap `t` lands inside an input of size `n`.
    #[inline]
    fn valid(&self, t: usize, n: usize, out: usize) -> (usize, usize) {
        // i = o * stride + t - pad must satisfy 0 <= i < n
        let lo = self.pad.saturating_sub(t).div_ceil(self.stride);
        let hi = if n + self.pad > t { (n + self.pad - t - 1) / self.stride + 1 } else { 0 };
        (lo.min(out), hi.min(out).max(lo.min(out)))
    }
}

/// Unfolds samples `first..first + count` of `input` into a
/// `patch x (count * oh * ow)` row-major matrix.
pub(crate) fn im2col(g: &ConvGeom, batch: usize, first: usize, count: usize, input: &[f64], cols: &mut Vec<f64>) {
    let (iplane, oplane) = (g.ih * g.iw, g.oh * g.ow);
    let width = count * oplane;
    cols.clear();
    cols.resize(g.patch() * width, 0.0);
    for ci in 0..g.cin {
        for ky in 0..g.kernel {
            let (y_lo, y_hi) = g.valid(ky, g.ih, g.oh);
            for kx in 0..g.kernel {
                let (x_lo, x_hi) = g.valid(kx, g.iw, g.ow);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * width..(row + 1) * width];
                for b in 0..count {
                    let src = &input[(ci * batch + first + b) * iplane..(ci * batch + first + b + 1) * iplane];
                    for oy in y_lo..y_hi {
                        let line = &src[(oy * g.stride + ky - g.pad) * g.iw..];
                        let out = &mut dst[b * oplane + oy * g.ow..b * oplane + (oy + 1) * g.ow];
                        if g.stride == 1 {
                            let x0 = x_lo + kx - g.pad;
                            out[x_lo..x_hi].copy_from_slice(&line[x0..x0 + x_hi - x_lo]);
                        } else {
                            for ox in x_lo..x_hi {
                                out[ox] = line[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds column gradients back onto the input samples.
pub(crate) fn col2im(g: &ConvGeom, batch: usize, first: usize, count: usize, cols: &[f64], grad_input: &mut [f64]) {
    let (iplane, oplane) = (g.ih * g.iw, g.oh * g.ow);
    let width = count * oplane;
    for ci in 0..g.cin {
        for ky in 0..g.kernel {
            let (y_lo, y_hi) = g.valid(ky, g.ih, g.oh);
            for kx in 0..g.kernel {
                let (x_lo, x_hi) = g.valid(kx, g.iw, g.ow);
                let row = (ci * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * width..(row + 1) * width];
                for b in 0..count {
                    let dst = &mut grad_input[(ci * batch + first + b) * iplane..(ci * batch + first + b + 1) * iplane];
                    for oy in y_lo..y_hi {
                        let line = &mut dst[(oy * g.stride + ky - g.pad) * g.iw..];
                        let input = &src[b * oplane + oy * g.ow..b * oplane + (oy + 1) * g.ow];
                        for ox in x_lo..x_hi {
                            line[ox * g.stride + kx - g.pad] += input[ox];
                        }
                    }
                }
            }
        }
    }
}

/// [`col2im`] of the outer product `weights x dy` without forming it.
fn col2im_rank_one(g: &ConvGeom, batch: usize, first: usize, count: usize, weights: &[f64], dy: &[f64], grad_input: &mut [f64]) {
    let (iplane, oplane) = (g.ih * g.iw, g.oh * g.ow);
    for ci in 0..g.cin {
        for ky in 0..g.kernel {
            let (y_lo, y_hi) = g.valid(ky, g.ih, g.oh);
            for kx in 0..g.kernel {
                let (x_lo, x_hi) = g.valid(kx, g.iw, g.ow);
                let wv = weights[(ci * g.kernel + ky) * g.kernel + kx];
                for b in 0..count {
                    let dst = &mut grad_input[(ci * batch + first + b) * iplane..(ci * batch + first + b + 1) * iplane];
                    for oy in y_lo..y_hi {
                        let line = &mut dst[(oy * g.stride + ky - g.pad) * g.iw..];
                        let src = &dy[b * oplane + oy * g.ow..b * oplane + (oy + 1) * g.ow];
                        for ox in x_lo..x_hi {
                            line[ox * g.stride + kx - g.pad] += wv * src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Patch-matrix budget per chunk, in elements.
const CHUNK_ELEMS: usize = 1 << 16;

fn chunk_len(g: &ConvGeom) -> usize {
    (CHUNK_ELEMS / (g.patch() * g.oh * g.ow)).max(1)
}

/// Bias-free convolution of channel-major `x` into `y` (`cout x batch * oplane`).
pub(crate) fn conv_forward(g: &ConvGeom, batch: usize, x: &[f64], weights: &[f64], y: &mut [f64], cols: &mut Vec<f64>) {
    let oplane = g.oh * g.ow;
    let step = chunk_len(g);
    for first in (0..batch).step_by(step) {
        let count = step.min(batch - first);
        im2col(g, batch, first, count, x, cols);
        let n = count * oplane;
        gemm_ld(g.cout, g.patch(), n, weights, (g.patch(), 1), cols, (n, 1), 0.0, &mut y[first * oplane..], batch * oplane);
    }
}

/// Adds the weight gradient into `dw` and, when given, writes the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    weights: &[f64],
    dy: &[f64],
    dw: Option<&mut [f64]>,
    mut dx: Option<&mut [f64]>,
    cols: &mut Vec<f64>,
) {
    let oplane = g.oh * g.ow;
    let ld = batch * oplane;
    let patch = g.patch();
    let step = chunk_len(g);
    if let Some(dx) = dx.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut dw = dw;
    let mut dcols = Vec::new();
    for first in (0..batch).step_by(step) {
        let count = step.min(batch - first);
        let n = count * oplane;
        let dy_chunk = &dy[first * oplane..];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(g, batch, first, count, x, cols);
            gemm(g.cout, n, patch, dy_chunk, (ld, 1), cols, (1, n), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            if g.cout == 1 {
                // rank-one patch gradient: scatter the output gradient once per tap
                col2im_rank_one(g, batch, first, count, weights, &dy_chunk[..n], dx);
                continue;
            }
            dcols.clear();
            dcols.resize(patch * n, 0.0);
            gemm(patch, g.cout, n, weights, (1, patch), dy_chunk, (ld, 1), 0.0, &mut dcols);
            col2im(g, batch, first, count, &dcols, dx);
        }
    }
}

/// Bilinear interpolation taps along one axis, half-pixel centers, edge clamped.
pub(crate) fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample(
    taps_y: &[(usize, usize, f64)],
    taps_x: &[(usize, usize, f64)],
    iw: usize,
    planes: usize,
    input: &[f64],
    output: &mut [f64],
) {
    let iplane = input.len() / planes;
    let oplane = taps_y.len() * taps_x.len();
    for p in 0..planes {
        let src = &input[p * iplane..(p + 1) * iplane];
        let dst = &mut output[p * oplane..(p + 1) * oplane];
        for (oy, &(y0, y1, ly)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in taps_x.iter().enumerate() {
                let top = (1.0 - lx) * src[y0 * iw + x0] + lx * src[y0 * iw + x1];
                let bottom = (1.0 - lx) * src[y1 * iw + x0] + lx * src[y1 * iw + x1];
                dst[oy * taps_x.len() + ox] = (1.0 - ly) * top + ly * bottom;
            }
        }
    }
}

pub(crate) fn upsample_adjoint(
    taps_y: &[(usize, usize, f64)],
    taps_x: &[(usize, usize, f64)],
    iw: usize,
    planes: usize,
    grad_output: &[f64],
    grad_input: &mut [f64],
) {
    let iplane = grad_input.len() / planes;
    let oplane = taps_y.len() * taps_x.len();
    grad_input.iter_mut().for_each(|x| *x = 0.0);
    for p in 0..planes {
        let src = &grad_output[p * oplane..(p + 1) * oplane];
        let dst = &mut grad_input[p * iplane..(p + 1) * iplane];
        for (oy, &(y0, y1, ly)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in taps_x.iter().enumerate() {
                let g = src[oy * taps_x.len() + ox];
                dst[y0 * iw + x0] += (1.0 - ly) * (1.0 - lx) * g;
                dst[y0 * iw + x1] += (1.0 - ly) * lx * g;
                dst[y1 * iw + x0] += ly * (1.0 - lx) * g;
                dst[y1 * iw + x1] += ly * lx * g;
            }
        }
    }
}

/// `[b][c][p]` to `[c][b][p]`.
pub(crate) fn to_channel_major(batch: usize, channels: usize, plane: usize, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for b in 0..batch {
        for c in 0..channels {
            let src = &input[(b * channels + c) * plane..(b * channels + c + 1) * plane];
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[c][b][p]` to `[b][c][p]`.
pub(crate) fn to_sample_major(batch: usize, channels: usize, plane: usize, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; input.len()];
    for c in 0..channels {
        for b in 0..batch {
            let src = &input[(c * batch + b) * plane..(c * batch + b + 1) * plane];
            out[(b * channels + c) * plane..(b * channels + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let naive: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - naive).abs() < 1e-12);
            }
        }
        // A^T stored as 3x2 row-major
        let at: Vec<f64> = (0..3).flat_map(|t| (0..2).map(move |i| (i * 3 + t) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, (1, 2), &b, (4, 1), 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (stride, ih, iw) in [(1, 5, 4), (2, 5, 4), (2, 6, 7), (3, 7, 5)] {
            let g = ConvGeom {
                cin: 2,
                cout: 1,
                kernel: 3,
                stride,
                pad: 1,
                ih,
                iw,
                oh: (ih - 1) / stride + 1,
                ow: (iw - 1) / stride + 1,
            };
            let batch = 2;
            let x: Vec<f64> = (0..2 * batch * ih * iw).map(|v| v as f64 + 1.0).collect();
            let mut cols = Vec::new();
            im2col(&g, batch, 0, batch, &x, &mut cols);
            let width = batch * g.oh * g.ow;
            for ci in 0..2 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        for b in 0..batch {
                            for oy in 0..g.oh {
                                for ox in 0..g.ow {
                                    let y = (oy * stride + ky) as i64 - 1;
                                    let xx = (ox * stride + kx) as i64 - 1;
                                    let want = if y >= 0 && xx >= 0 && (y as usize) < ih && (xx as usize) < iw {
                                        x[(ci * batch + b) * ih * iw + y as usize * iw + xx as usize]
                                    } else {
                                        0.0
                                    };
                                    let row = (ci * 3 + ky) * 3 + kx;
                                    assert_eq!(cols[row * width + b * g.oh * g.ow + oy * g.ow + ox], want);
                                }
                            }
                        }
                    }
                }
            }
            // col2im is the adjoint: <im2col(x), c> == <x, col2im(c)>
            let c: Vec<f64> = (0..cols.len()).map(|v| ((v * 37) % 11) as f64 - 5.0).collect();
            let mut back = vec![0.0; x.len()];
            col2im(&g, batch, 0, batch, &c, &mut back);
            let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn bilinear_taps_match_half_pixel_convention() {
        let taps = bilinear_taps(3, 2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[5], (2, 2, 0.25));
    }

    #[test]
    fn layout_permutations_invert() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let cm = to_channel_major(2, 3, 4, &x);
        assert_eq!(to_sample_major(2, 3, 4, &cm), x);
    }
}
