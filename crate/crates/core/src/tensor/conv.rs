//! im2col convolution kernels. Layouts are NCHW for activations and
//! `[Cout, Cin, kh, kw]` for kernels.

use super::Float;

const DIRECT_MIN_PIXELS: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub padding: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 3x3 kernels, unit stride, size-preserving padding.
    /// Only large planes: below 32x32, im2col + GEMM is faster.
    fn is_same_3x3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1 && self.padding == 1 && self.h * self.w >= DIRECT_MIN_PIXELS
    }

    /// 1x1 kernels with unit stride need no unfolding.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one image `[Cin, H, W]` into `cols` of shape `[Cin*kh*kw, H'*W']`.
fn im2col<T: Float>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *slot = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
fn col2im<T: Float>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn forward<T: Float>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    if g.is_same_3x3() {
        return direct_forward(g, input, kernel, bias);
    }
    let (k, p) = (g.patch(), g.out_pixels());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_per];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for b in 0..g.n {
        let img = &input[b * in_per..(b + 1) * in_per];
        let dst = &mut out[b * out_per..(b + 1) * out_per];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(g.cout, k, p, T::one(), kernel, k as isize, 1, src, p as isize, 1, beta, dst, p as isize, 1);
    }
    out
}

fn bias_grad<T: Float>(g: &ConvGeom, grad_out: &[T]) -> Vec<T> {
    let p = g.out_pixels();
    let mut db = vec![T::zero(); g.cout];
    for dy in grad_out.chunks(g.cout * p) {
        for (co, chunk) in dy.chunks(p).enumerate() {
            db[co] += chunk.iter().fold(T::zero(), |acc, &v| acc + v);
        }
    }
    db
}

/// Gradients of a convolution. Only the requested ones are computed.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Float>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.patch(), g.out_pixels());
    let out_per = g.cout * p;
    if g.is_same_3x3() {
        let (input_grad, kernel_grad) = direct_backward(g, input, kernel, grad_out, want_input, want_kernel);
        return ConvGrads { input: input_grad, kernel: kernel_grad, bias: want_bias.then(|| bias_grad(g, grad_out)) };
    }
    let in_per = g.cin * g.h * g.w;
    let mut d_input = want_input.then(|| vec![T::zero(); g.n * in_per]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); g.cout * k]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut d_cols = if want_input && !g.is_pointwise() { vec![T::zero(); k * p] } else { Vec::new() };

    for b in 0..g.n {
        let dy = &grad_out[b * out_per..(b + 1) * out_per];
        if let Some(dk) = d_kernel.as_mut() {
            let img = &input[b * in_per..(b + 1) * in_per];
            let src: &[T] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            // dK[Cout, K] += dY[Cout, P] * cols^T[P, K]
            T::gemm(g.cout, p, k, T::one(), dy, p as isize, 1, src, 1, p as isize, T::one(), dk, k as isize, 1);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[b * in_per..(b + 1) * in_per];
            // dCols[K, P] = K^T[K, Cout] * dY[Cout, P]
            if g.is_pointwise() {
                T::gemm(k, g.cout, p, T::one(), kernel, 1, k as isize, dy, p as isize, 1, T::zero(), dst, p as isize, 1);
            } else {
                T::gemm(k, g.cout, p, T::one(), kernel, 1, k as isize, dy, p as isize, 1, T::zero(), &mut d_cols, p as isize, 1);
                col2im(g, &d_cols, dst);
            }
        }
    }
    ConvGrads { input: d_input, kernel: d_kernel, bias: want_bias.then(|| bias_grad(g, grad_out)) }
}


/// Copies each `[h, w]` plane into a zero-bordered `[h + 2, w + 2]` plane.
fn pad_planes<T: Float>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let pw = w + 2;
    let mut out = vec![T::zero(); planes * (h + 2) * pw];
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut out[p * (h + 2) * pw..(p + 1) * (h + 2) * pw];
        for y in 0..h {
            d[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&s[y * w..(y + 1) * w]);
        }
    }
    out
}

/// Re-lays `[h, w]` planes with row stride `w + 2`, zero-filling the gap.
fn widen_rows<T: Float>(src: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let pw = w + 2;
    let mut out = vec![T::zero(); planes * h * pw];
    for p in 0..planes {
        for y in 0..h {
            let s = &src[(p * h + y) * w..(p * h + y + 1) * w];
            out[(p * h + y) * pw..(p * h + y) * pw + w].copy_from_slice(s);
        }
    }
    out
}

#[inline(always)]
fn fmadd<T: Float, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Adds to `out` planes `co..co + CO` the correlation of every padded input
/// plane with its 3x3 taps, `PX` pixels of one row at a time.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn correlate_block<T: Float, const FMA: bool, const CO: usize, const PX: usize>(
    out: &mut [T],
    padded: &[T],
    kernel: &[T],
    co: usize,
    cin: usize,
    h: usize,
    w: usize,
) {
    let pw = w + 2;
    let plane = (h + 2) * pw;
    let hw = h * w;
    let mut taps = vec![[T::zero(); CO]; cin * 9];
    for c in 0..CO {
        for (i, t) in taps.iter_mut().enumerate() {
            t[c] = kernel[(co + c) * cin * 9 + i];
        }
    }
    for y in 0..h {
        let mut x = 0;
        while x + PX <= w {
            let mut acc = [[T::zero(); PX]; CO];
            for ci in 0..cin {
                let base = ci * plane + y * pw + x;
                for t in 0..9 {
                    let off = base + (t / 3) * pw + t % 3;
                    let inp: &[T; PX] = padded[off..off + PX].try_into().expect("row chunk");
                    let k = &taps[ci * 9 + t];
                    for c in 0..CO {
                        for l in 0..PX {
                            acc[c][l] = fmadd::<T, FMA>(k[c], inp[l], acc[c][l]);
                        }
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                let o = &mut out[(co + c) * hw + y * w + x..(co + c) * hw + y * w + x + PX];
                for l in 0..PX {
                    o[l] += a[l];
                }
            }
            x += PX;
        }
        for x in x..w {
            for c in 0..CO {
                let mut s = T::zero();
                for ci in 0..cin {
                    for t in 0..9 {
                        s += taps[ci * 9 + t][c] * padded[ci * plane + (y + t / 3) * pw + x + t % 3];
                    }
                }
                out[(co + c) * hw + y * w + x] += s;
            }
        }
    }
}

/// `out[co] += sum_ci correlate(padded[ci], kernel[co][ci])` for all `cout` planes.
#[inline(always)]
fn correlate_planes<T: Float, const FMA: bool>(
    out: &mut [T],
    padded: &[T],
    kernel: &[T],
    cout: usize,
    cin: usize,
    h: usize,
    w: usize,
) {
    let narrow = std::mem::size_of::<T>() <= 4;
    let mut co = 0;
    while co + 4 <= cout {
        if narrow {
            correlate_block::<T, FMA, 4, 16>(out, padded, kernel, co, cin, h, w);
        } else {
            correlate_block::<T, FMA, 4, 8>(out, padded, kernel, co, cin, h, w);
        }
        co += 4;
    }
    while co < cout {
        correlate_block::<T, FMA, 1, 16>(out, padded, kernel, co, cin, h, w);
        co += 1;
    }
}

#[inline(always)]
fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    const L: usize = 8;
    let mut acc = [T::zero(); L];
    let (ca, cb) = (a.chunks_exact(L), b.chunks_exact(L));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..L {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = acc.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `acc[t] += sum_{y,x} grad[y][x] * padded[y + t / 3][x + t % 3]`, where
/// `grad_wide` is the gradient laid out with row stride `w + 2` (zeros in the
/// two extra columns) and `padded` extends at least two values past its plane.
#[inline(always)]
fn tap_dots<T: Float>(acc: &mut [T], grad_wide: &[T], padded: &[T], w: usize) {
    let pw = w + 2;
    let len = grad_wide.len();
    for dy in 0..3 {
        for dx in 0..3 {
            let off = dy * pw + dx;
            acc[dy * 3 + dx] += dot(grad_wide, &padded[off..off + len]);
        }
    }
}

#[inline(always)]
fn direct_forward_body<T: Float, const FMA: bool>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    for b in 0..g.n {
        let padded = pad_planes(&input[b * g.cin * hw..(b + 1) * g.cin * hw], g.cin, h, w);
        let o = &mut out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(bias) = bias {
            for (co, plane) in o.chunks_exact_mut(hw).enumerate() {
                plane.fill(bias[co]);
            }
        }
        correlate_planes::<T, FMA>(o, &padded, kernel, g.cout, g.cin, h, w);
    }
    out
}

#[inline(always)]
fn direct_backward_body<T: Float, const FMA: bool>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (h, w) = (g.h, g.w);
    let hw = h * w;
    let plane = (h + 2) * (w + 2);
    let mut d_input = want_input.then(|| vec![T::zero(); g.n * g.cin * hw]);
    let mut d_kernel = want_kernel.then(|| vec![T::zero(); g.cout * g.cin * 9]);
    // Input gradient is a correlation of the padded output gradient with the
    // spatially flipped, channel-transposed kernel.
    let flipped: Vec<T> = if want_input {
        let mut f = vec![T::zero(); g.cin * g.cout * 9];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for t in 0..9 {
                    f[(ci * g.cout + co) * 9 + t] = kernel[(co * g.cin + ci) * 9 + 8 - t];
                }
            }
        }
        f
    } else {
        Vec::new()
    };
    for b in 0..g.n {
        let dy = &grad_out[b * g.cout * hw..(b + 1) * g.cout * hw];
        if let Some(dk) = d_kernel.as_mut() {
            let mut padded = pad_planes(&input[b * g.cin * hw..(b + 1) * g.cin * hw], g.cin, h, w);
            padded.extend_from_slice(&[T::zero(), T::zero()]);
            let wide = widen_rows(dy, g.cout, h, w);
            let wide_plane = h * (w + 2);
            for co in 0..g.cout {
                let gw = &wide[co * wide_plane..(co + 1) * wide_plane];
                for ci in 0..g.cin {
                    tap_dots(
                        &mut dk[(co * g.cin + ci) * 9..(co * g.cin + ci + 1) * 9],
                        gw,
                        &padded[ci * plane..],
                        w,
                    );
                }
            }
        }
        if let Some(dx) = d_input.as_mut() {
            let dy_pad = pad_planes(dy, g.cout, h, w);
            let o = &mut dx[b * g.cin * hw..(b + 1) * g.cin * hw];
            correlate_planes::<T, FMA>(o, &dy_pad, &flipped, g.cin, g.cout, h, w);
        }
    }
    (d_input, d_kernel)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn direct_forward_avx2<T: Float>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    direct_forward_body::<T, true>(g, input, kernel, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn direct_backward_avx2<T: Float>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    direct_backward_body::<T, true>(g, input, kernel, grad_out, want_input, want_kernel)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn direct_forward<T: Float>(g: &ConvGeom, input: &[T], kernel: &[T], bias: Option<&[T]>) -> Vec<T> {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2 and FMA, checked at runtime.
        return unsafe { direct_forward_avx2(g, input, kernel, bias) };
    }
    direct_forward_body::<T, false>(g, input, kernel, bias)
}

fn direct_backward<T: Float>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2 and FMA, checked at runtime.
        return unsafe { direct_backward_avx2(g, input, kernel, grad_out, want_input, want_kernel) };
    }
    direct_backward_body::<T, false>(g, input, kernel, grad_out, want_input, want_kernel)
}
