//! Dense convolution and upsampling kernels used by the tape.
//!
//! Wide convolutions are lowered to a single GEMM through an im2col buffer.
//! Narrow stride-1 convolutions (few output channels, as in the decoder
//! tail and the prediction synapses) run as direct row-wise AXPYs instead,
//! which skips the large column buffer. Either way every reduction has a
//! fixed order, so results do not depend on scheduling.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix: `C_in · k · k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Output columns `[lo, hi)` whose tap `kw` lands inside the input row.
fn valid_range(g: &ConvGeometry, kw: usize, ow: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kw).div_ceil(g.stride);
    // largest ox with ox·stride + kw − padding < width
    let hi = if g.width + g.padding > kw { ((g.width + g.padding - kw - 1) / g.stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `input` (C, H, W) into a `(C·k·k) × (H'·W')` matrix.
pub fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let (lo, hi) = valid_range(g, kw, ow);
                    if g.stride == 1 {
                        let start = (lo + kw) - g.padding;
                        out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kw - g.padding];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = oh * ow;
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..g.kernel {
            for kw in 0..g.kernel {
                let row = (c * g.kernel + kh) * g.kernel + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + kh) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let row = &src[oy * ow..(oy + 1) * ow];
                    let (lo, hi) = valid_range(g, kw, ow);
                    for ox in lo..hi {
                        dst[ox * g.stride + kw - g.padding] += row[ox];
                    }
                }
            }
        }
    }
}

/// Forward convolution: `weight (C_out × K) · cols (K × P)`.
pub fn conv_forward<T: Scalar>(cols: &[T], weight: &[T], out_channels: usize, g: &ConvGeometry) -> Vec<T> {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![T::zero(); out_channels * p];
    T::gemm(
        out_channels,
        k,
        p,
        T::one(),
        (weight, k as isize, 1),
        (cols, p as isize, 1),
        T::zero(),
        (&mut out, p as isize, 1),
    );
    out
}

/// Accumulates `grad_out (C_out × P) · colsᵀ` into `grad_weight`.
pub fn conv_weight_grad<T: Scalar>(
    grad_out: &[T],
    cols: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_weight: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    T::gemm(
        out_channels,
        p,
        k,
        T::one(),
        (grad_out, p as isize, 1),
        (cols, 1, p as isize),
        T::one(),
        (grad_weight, k as isize, 1),
    );
}

/// Accumulates the input gradient `col2im(weightᵀ · grad_out)`.
pub fn conv_input_grad<T: Scalar>(
    grad_out: &[T],
    weight: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_input: &mut [T],
) {
    let (k, p) = (g.patch_len(), g.out_pixels());
    let mut dcols = vec![T::zero(); k * p];
    T::gemm(
        k,
        out_channels,
        p,
        T::one(),
        (weight, 1, k as isize),
        (grad_out, p as isize, 1),
        T::zero(),
        (&mut dcols, p as isize, 1),
    );
    col2im(&dcols, g, grad_input);
}

/// Largest output-channel count routed to the direct kernels.
pub const DIRECT_MAX_OUT: usize = 4;

/// Whether [`conv2d`](super::Tape::conv2d) takes the direct path.
pub fn use_direct(g: &ConvGeometry, out_channels: usize) -> bool {
    g.stride == 1 && out_channels <= DIRECT_MAX_OUT
}

/// Calls `f(oy, iy, lo, hi, start)` for every output row `oy` whose tap `kh`
/// lands on input row `iy`, where output columns `lo..hi` read input columns
/// `start..start + (hi - lo)`. Stride 1 only.
fn for_each_tap_row(g: &ConvGeometry, kh: usize, kw: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let (lo, hi) = valid_range(g, kw, ow);
    if lo >= hi {
        return;
    }
    let start = lo + kw - g.padding;
    for oy in 0..oh {
        let iy = oy + kh;
        if iy < g.padding || iy - g.padding >= g.height {
            continue;
        }
        f(oy, iy - g.padding, lo, hi, start);
    }
}

/// Direct stride-1 convolution, accumulating one tap at a time.
pub fn conv_forward_direct<T: Scalar>(input: &[T], weight: &[T], out_channels: usize, g: &ConvGeometry) -> Vec<T> {
    let (ow, p, hw, kk) = (g.out_width(), g.out_pixels(), g.height * g.width, g.kernel * g.kernel);
    let mut out = vec![T::zero(); out_channels * p];
    for o in 0..out_channels {
        let plane_out = &mut out[o * p..(o + 1) * p];
        for c in 0..g.in_channels {
            let plane_in = &input[c * hw..(c + 1) * hw];
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let wv = weight[(o * g.in_channels + c) * kk + kh * g.kernel + kw];
                    if wv.is_zero() {
                        continue;
                    }
                    for_each_tap_row(g, kh, kw, |oy, iy, lo, hi, start| {
                        let dst = &mut plane_out[oy * ow + lo..oy * ow + hi];
                        let src = &plane_in[iy * g.width + start..iy * g.width + start + (hi - lo)];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
    }
    out
}

/// Weight gradient of [`conv_forward_direct`], accumulated into `grad_weight`.
pub fn conv_weight_grad_direct<T: Scalar>(
    grad_out: &[T],
    input: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_weight: &mut [T],
) {
    let (ow, p, hw, kk) = (g.out_width(), g.out_pixels(), g.height * g.width, g.kernel * g.kernel);
    for o in 0..out_channels {
        let go = &grad_out[o * p..(o + 1) * p];
        for c in 0..g.in_channels {
            let plane_in = &input[c * hw..(c + 1) * hw];
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let mut acc = T::zero();
                    for_each_tap_row(g, kh, kw, |oy, iy, lo, hi, start| {
                        let a = &go[oy * ow + lo..oy * ow + hi];
                        let b = &plane_in[iy * g.width + start..iy * g.width + start + (hi - lo)];
                        acc += dot(a, b);
                    });
                    grad_weight[(o * g.in_channels + c) * kk + kh * g.kernel + kw] += acc;
                }
            }
        }
    }
}

/// Input gradient of [`conv_forward_direct`], accumulated into `grad_input`.
pub fn conv_input_grad_direct<T: Scalar>(
    grad_out: &[T],
    weight: &[T],
    out_channels: usize,
    g: &ConvGeometry,
    grad_input: &mut [T],
) {
    let (ow, p, hw, kk) = (g.out_width(), g.out_pixels(), g.height * g.width, g.kernel * g.kernel);
    for c in 0..g.in_channels {
        let gi = &mut grad_input[c * hw..(c + 1) * hw];
        for o in 0..out_channels {
            let go = &grad_out[o * p..(o + 1) * p];
            for kh in 0..g.kernel {
                for kw in 0..g.kernel {
                    let wv = weight[(o * g.in_channels + c) * kk + kh * g.kernel + kw];
                    if wv.is_zero() {
                        continue;
                    }
                    for_each_tap_row(g, kh, kw, |oy, iy, lo, hi, start| {
                        let dst = &mut gi[iy * g.width + start..iy * g.width + start + (hi - lo)];
                        let src = &go[oy * ow + lo..oy * ow + hi];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    });
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums so it vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail += *x * *y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

/// Nearest-neighbour upsampling of a (C, H, W) volume by `factor`.
pub fn upsample<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            let dst = &mut out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            for (x, d) in dst.iter_mut().enumerate() {
                *d = src[x / factor];
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: sums each `factor × factor` block.
pub fn upsample_grad<T: Scalar>(grad_out: &[T], c: usize, h: usize, w: usize, factor: usize, grad_in: &mut [T]) {
    let (oh, ow) = (h * factor, w * factor);
    for ch in 0..c {
        for y in 0..oh {
            let src = &grad_out[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
            let dst = &mut grad_in[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
            for (x, &s) in src.iter().enumerate() {
                dst[x / factor] += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop cross-correlation.
    fn naive_conv(input: &[f64], weight: &[f64], co: usize, g: &ConvGeometry) -> Vec<f64> {
        let (oh, ow) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..g.in_channels {
                        for kh in 0..g.kernel {
                            for kw in 0..g.kernel {
                                let iy = (oy * g.stride + kh) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kw) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += input[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * weight[((o * g.in_channels + c) * g.kernel + kh) * g.kernel + kw];
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn gemm_conv_matches_direct_loops() {
        for &(stride, padding, h, w) in &[(1, 1, 5, 6), (2, 1, 8, 8), (2, 0, 7, 5), (1, 0, 4, 4)] {
            let g = ConvGeometry { in_channels: 3, height: h, width: w, kernel: 3, stride, padding };
            let input: Vec<f64> = (0..3 * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let weight: Vec<f64> = (0..2 * 27).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let fast = conv_forward(&im2col(&input, &g), &weight, 2, &g);
            for (a, b) in fast.iter().zip(naive_conv(&input, &weight, 2, &g)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn direct_kernels_match_gemm_kernels() {
        for &(padding, h, w, k) in &[(1, 5, 6, 3), (0, 7, 5, 3), (2, 4, 9, 5), (1, 1, 1, 3), (0, 3, 3, 1)] {
            let g = ConvGeometry { in_channels: 3, height: h, width: w, kernel: k, stride: 1, padding };
            let co = 2;
            let input: Vec<f64> = (0..3 * h * w).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let weight: Vec<f64> = (0..co * 3 * k * k).map(|i| ((i * 5 % 13) as f64) * 0.1 - 0.6).collect();
            let cols = im2col(&input, &g);
            let direct = conv_forward_direct(&input, &weight, co, &g);
            for (a, b) in direct.iter().zip(naive_conv(&input, &weight, co, &g)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            let go: Vec<f64> = (0..co * g.out_pixels()).map(|i| (i as f64 * 0.31).sin()).collect();
            let (mut gw1, mut gw2) = (vec![0.0; weight.len()], vec![0.0; weight.len()]);
            conv_weight_grad(&go, &cols, co, &g, &mut gw1);
            conv_weight_grad_direct(&go, &input, co, &g, &mut gw2);
            let (mut gi1, mut gi2) = (vec![0.0; input.len()], vec![0.0; input.len()]);
            conv_input_grad(&go, &weight, co, &g, &mut gi1);
            conv_input_grad_direct(&go, &weight, co, &g, &mut gi2);
            for (a, b) in gw1.iter().zip(&gw2).chain(gi1.iter().zip(&gi2)) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry { in_channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.3).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
