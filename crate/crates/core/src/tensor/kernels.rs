//! Slice-level forward and backward kernels behind the tape operations.

use super::Scalar;
use crate::error::{invalid, shape_err, Result};
use crate::geometry::RegionWindow;

/// Resolved dimensions of a 2D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(shape_err!("conv2d input must be NxCxHxW, got {input:?}"));
        };
        let [out_channels, wc, kernel_h, kernel_w] = *weight else {
            return Err(shape_err!("conv2d weight must be KxCxkhxkw, got {weight:?}"));
        };
        if wc != in_channels {
            return Err(shape_err!(
                "conv2d input has {in_channels} channels but weight expects {wc}"
            ));
        }
        if stride == 0 {
            return Err(invalid!("conv2d stride must be >= 1"));
        }
        if kernel_h > height + 2 * pad || kernel_w > width + 2 * pad {
            return Err(shape_err!(
                "kernel {kernel_h}x{kernel_w} larger than padded input {}x{}",
                height + 2 * pad,
                width + 2 * pad
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel_h) / stride + 1,
            out_w: (width + 2 * pad - kernel_w) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `ox` whose input column `ox*stride + kj - pad` lies inside
/// `0..width`, as a half-open range.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let off = kj as isize - g.pad as isize;
    let s = g.stride as isize;
    // smallest ox with ox*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // largest ox with ox*s + off <= width - 1, plus one
    let hi = (g.width as isize - 1 - off).div_euclid(s) + 1;
    let lo = lo.clamp(0, g.out_w as isize) as usize;
    let hi = hi.clamp(lo as isize, g.out_w as isize) as usize;
    (lo, hi)
}

/// Unfolds one image (`C x H x W`) into `(C*kh*kw) x (out_h*out_w)` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let src = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = valid_span(g, kj);
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    out_row[..lo].fill(T::zero());
                    out_row[hi..].fill(T::zero());
                    let first = lo * g.stride + kj - g.pad.min(lo * g.stride + kj);
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src_row[first..first + (hi - lo)]);
                    } else {
                        for (k, o) in out_row[lo..hi].iter_mut().enumerate() {
                            *o = src_row[first + k * g.stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds columns back onto one image, accumulating overlapping taps.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dst = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let (lo, hi) = valid_span(g, kj);
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize || lo == hi {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src_row = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    let first = lo * g.stride + kj - g.pad.min(lo * g.stride + kj);
                    if g.stride == 1 {
                        for (d, &v) in dst_row[first..first + (hi - lo)].iter_mut().zip(src_row) {
                            *d += v;
                        }
                    } else {
                        for (k, &v) in src_row.iter().enumerate() {
                            dst_row[first + k * g.stride] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[inline(always)]
fn dot_body<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 32;
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = x.mul_add(y, tail);
    }
    acc.iter().copied().sum::<T>() + tail
}

#[inline(always)]
fn gemm_nt_body<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for j in 0..n {
        let bj = &b[j * k..(j + 1) * k];
        for i in 0..m {
            c[i * n + j] += dot_body(&a[i * k..(i + 1) * k], bj);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_nt_avx2<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_nt_body(m, n, k, a, b, c)
}

/// `c[m x n] += a[m x k] * b[n x k]^T` with both operands row-major.
///
/// Used where `k` is long and `m` short (weight gradients of convolutions),
/// a shape for which packing-based GEMM spends most of its time copying.
pub fn gemm_nt_accumulate<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_nt_avx2(m, n, k, a, b, c) };
            return;
        }
    }
    gemm_nt_body(m, n, k, a, b, c)
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_channels * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    for n in 0..g.batch {
        let xn = &x[n * g.in_image()..(n + 1) * g.in_image()];
        let yn = &mut out[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for (k, chunk) in yn.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[k]);
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        T::gemm(
            g.out_channels,
            patch,
            plane,
            T::one(),
            weight,
            false,
            cols_ref,
            false,
            T::one(),
            yn,
        );
    }
    out
}

/// Gradients of a convolution. `dx` is only computed when requested.
pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dweight: Vec<T>,
    pub dbias: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut dweight = vec![T::zero(); g.out_channels * patch];
    let mut dbias = vec![T::zero(); g.out_channels];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * plane]
    };
    let mut dcols = if need_dx && !g.is_pointwise() {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    for n in 0..g.batch {
        let xn = &x[n * g.in_image()..(n + 1) * g.in_image()];
        let dyn_ = &dy[n * g.out_channels * plane..(n + 1) * g.out_channels * plane];
        for (k, chunk) in dyn_.chunks_exact(plane).enumerate() {
            dbias[k] += chunk.iter().copied().sum::<T>();
        }
        let cols_ref: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        // dW += dY_n * cols^T
        gemm_nt_accumulate(g.out_channels, patch, plane, dyn_, cols_ref, &mut dweight);
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            if g.is_pointwise() {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    true,
                    dyn_,
                    false,
                    T::one(),
                    dxn,
                );
            } else {
                T::gemm(
                    patch,
                    g.out_channels,
                    plane,
                    T::one(),
                    weight,
                    true,
                    dyn_,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, g, dxn);
            }
        }
    }
    ConvGrads { dx, dweight, dbias }
}

/// Resolved dimensions of a max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let [n, c, height, width] = *input else {
            return Err(shape_err!("max_pool2d input must be NxCxHxW, got {input:?}"));
        };
        if window == 0 || stride == 0 {
            return Err(invalid!("pool window and stride must be >= 1"));
        }
        if window > height || window > width {
            return Err(shape_err!(
                "pool window {window} exceeds spatial extent {height}x{width}"
            ));
        }
        Ok(Self {
            planes: n * c,
            height,
            width,
            window,
            stride,
            out_h: (height - window) / stride + 1,
            out_w: (width - window) / stride + 1,
        })
    }
}

/// Returns pooled values and, per output cell, the flat input index of the
/// first maximum in row-major window order.
pub fn max_pool2d_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let out_len = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(out_len);
    let mut argmax = Vec::with_capacity(out_len);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = base + oy * g.stride * g.width + ox * g.stride;
                let mut best_v = x[best];
                for dy in 0..g.window {
                    let row = base + (oy * g.stride + dy) * g.width + ox * g.stride;
                    for dx in 0..g.window {
                        let v = x[row + dx];
                        if v > best_v {
                            best_v = v;
                            best = row + dx;
                        }
                    }
                }
                out.push(best_v);
                argmax.push(best as u32);
            }
        }
    }
    (out, argmax)
}

pub fn max_pool2d_backward<T: Scalar>(dy: &[T], argmax: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(argmax) {
        dx[i as usize] += g;
    }
    dx
}

/// `y[N x E] = x[N x D] * w[D x E] + b[E]`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    d: usize,
    e: usize,
) -> Vec<T> {
    let mut y = Vec::with_capacity(n * e);
    for _ in 0..n {
        y.extend_from_slice(b);
    }
    T::gemm(n, d, e, T::one(), x, false, w, false, T::one(), &mut y);
    y
}

pub struct LinearGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    n: usize,
    d: usize,
    e: usize,
    need_dx: bool,
) -> LinearGrads<T> {
    let mut dw = vec![T::zero(); d * e];
    T::gemm(d, n, e, T::one(), x, true, dy, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); e];
    for row in dy.chunks_exact(e) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    let dx = need_dx.then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(n, e, d, T::one(), dy, false, w, true, T::zero(), &mut dx);
        dx
    });
    LinearGrads { dx, dw, db }
}

/// Validates that every window fits inside an `hf x wf` map and all windows
/// share one extent.
pub fn check_windows(windows: &[RegionWindow], hf: usize, wf: usize) -> Result<(usize, usize)> {
    let first = windows
        .first()
        .ok_or_else(|| invalid!("region crop needs at least one window"))?;
    let (w, h) = (first.w, first.h);
    for win in windows {
        if win.w != w || win.h != h {
            return Err(shape_err!("all crop windows in a batch must share one extent"));
        }
        if win.w == 0 || win.h == 0 || win.b_u + win.w > wf || win.b_v + win.h > hf {
            return Err(shape_err!(
                "window {win:?} does not lie inside the {hf}x{wf} feature map"
            ));
        }
    }
    Ok((w, h))
}

/// Crops `windows[n]` (or `windows[0]` for every sample) out of `N x C x Hf x Wf`.
pub fn crop_forward<T: Scalar>(x: &[T], shape: [usize; 4], windows: &[RegionWindow]) -> Vec<T> {
    let [n, c, hf, wf] = shape;
    let (w, h) = (windows[0].w, windows[0].h);
    let mut out = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        let win = if windows.len() == 1 { windows[0] } else { windows[s] };
        for ch in 0..c {
            let plane = (s * c + ch) * hf * wf;
            for y in 0..h {
                let start = plane + (win.b_v + y) * wf + win.b_u;
                out.extend_from_slice(&x[start..start + w]);
            }
        }
    }
    out
}

pub fn crop_backward_add<T: Scalar>(
    dy: &[T],
    shape: [usize; 4],
    windows: &[RegionWindow],
    dx: &mut [T],
) {
    let [n, c, hf, wf] = shape;
    let (w, h) = (windows[0].w, windows[0].h);
    let mut it = dy.chunks_exact(w);
    for s in 0..n {
        let win = if windows.len() == 1 { windows[0] } else { windows[s] };
        for ch in 0..c {
            let plane = (s * c + ch) * hf * wf;
            for y in 0..h {
                let start = plane + (win.b_v + y) * wf + win.b_u;
                let src = it.next().expect("gradient length matches crop");
                dx[start..start + w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}

/// Smooth-L1 value of one residual.
pub fn smooth_l1<T: Scalar>(x: T, beta: T) -> T {
    let half = T::lit(0.5);
    if x.abs() < beta {
        half * x * x / beta
    } else {
        x.abs() - half * beta
    }
}

/// Derivative of [`smooth_l1`]: `clamp(x / beta, -1, 1)`.
pub fn smooth_l1_grad<T: Scalar>(x: T, beta: T) -> T {
    (x / beta).max(-T::one()).min(T::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry() {
        let g = ConvGeom::new(&[2, 3, 10, 8], &[4, 3, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [2, 4, 5, 4]);
        assert!(ConvGeom::new(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 1).is_ok());
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 0, 0).is_err());
    }

    #[test]
    fn pool_ties_route_to_first() {
        let g = PoolGeom::new(&[1, 1, 2, 2], 2, 2).unwrap();
        let (out, arg) = max_pool2d_forward(&[3.0f32, 3.0, 3.0, 3.0], &g);
        assert_eq!(out, vec![3.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn smooth_l1_continuity() {
        let beta = 0.01f64;
        assert!((smooth_l1(beta, beta) - 0.5 * beta).abs() < 1e-15);
        assert!((smooth_l1(beta - 1e-12, beta) - 0.5 * beta).abs() < 1e-10);
        assert_eq!(smooth_l1_grad(1.0, beta), 1.0);
        assert_eq!(smooth_l1_grad(-1.0, beta), -1.0);
        assert_eq!(smooth_l1_grad(0.005, beta), 0.5);
    }

    #[test]
    fn windows_must_fit() {
        let ok = RegionWindow::new(5, 5, 7, 7);
        let bad = RegionWindow::new(6, 0, 7, 7);
        assert!(check_windows(&[ok], 12, 12).is_ok());
        assert!(check_windows(&[bad], 12, 12).is_err());
        assert!(check_windows(&[ok, RegionWindow::new(0, 0, 6, 6)], 12, 12).is_err());
    }
}
