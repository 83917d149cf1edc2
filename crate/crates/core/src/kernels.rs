//! Slice-level compute kernels shared by the forward and backward passes.
//!
//! Layout conventions: feature maps are `[C, H, W]` row-major; a convolution
//! kernel is `[C_out, C_in, k, k]`; the unfolded neighbourhood matrix
//! ("cols") is `[C_in*k*k, H_out*W_out]` with row index `(c*k + ky)*k + kx`.

use crate::tensor::{gemm, Element};

/// Spatial output length of a stride-1 convolution.
pub fn conv_out_len(len: usize, k: usize, padding: usize) -> Option<usize> {
    (len + 2 * padding).checked_sub(k).map(|v| v + 1)
}

/// Unfolds `k x k` neighbourhoods of `src` (`channels x h x w`) into
/// `dst[(c_off + c)*k*k + ky*k + kx][oy*wo + ox]`. Out-of-range taps are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Element>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    c_off: usize,
    dst: &mut [T],
) {
    let ho = h + 2 * padding + 1 - k;
    let wo = w + 2 * padding + 1 - k;
    let p = ho * wo;
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c_off + c) * k + ky) * k + kx;
                let out = &mut dst[row * p..(row + 1) * p];
                // valid ox range: 0 <= ox + kx - padding < w
                let ox_lo = padding.saturating_sub(kx).min(wo);
                let ox_hi = (w + padding).saturating_sub(kx).min(wo).max(ox_lo);
                for oy in 0..ho {
                    let line = &mut out[oy * wo..(oy + 1) * wo];
                    let iy = oy + ky;
                    if iy < padding || iy - padding >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let iy = iy - padding;
                    line[..ox_lo].fill(T::zero());
                    line[ox_hi..].fill(T::zero());
                    if ox_hi > ox_lo {
                        let ix0 = ox_lo + kx - padding;
                        let n = ox_hi - ox_lo;
                        line[ox_lo..ox_hi].copy_from_slice(&plane[iy * w + ix0..iy * w + ix0 + n]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters rows `c_off..c_off+channels` of `cols`
/// back onto `dst` (accumulating).
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Element>(
    cols: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    c_off: usize,
    dst: &mut [T],
) {
    let ho = h + 2 * padding + 1 - k;
    let wo = w + 2 * padding + 1 - k;
    let p = ho * wo;
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c_off + c) * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                let ox_lo = padding.saturating_sub(kx).min(wo);
                let ox_hi = (w + padding).saturating_sub(kx).min(wo).max(ox_lo);
                if ox_hi <= ox_lo {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy + ky;
                    if iy < padding || iy - padding >= h {
                        continue;
                    }
                    let iy = iy - padding;
                    let ix0 = ox_lo + kx - padding;
                    let n = ox_hi - ox_lo;
                    let target = &mut plane[iy * w + ix0..iy * w + ix0 + n];
                    for (t, &s) in target.iter_mut().zip(&src[oy * wo + ox_lo..oy * wo + ox_hi]) {
                        *t = *t + s;
                    }
                }
            }
        }
    }
}

/// Geometry of a (possibly multi-input) stride-1 convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.padding + 1 - self.k
    }
    pub fn out_w(&self) -> usize {
        self.w + 2 * self.padding + 1 - self.k
    }
    pub fn cols_rows(&self) -> usize {
        self.in_channels * self.k * self.k
    }
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.padding == 0
    }
}

/// Builds the unfolded matrix for inputs that are channel-concatenated
/// without materializing the concatenation.
pub fn unfold_inputs<T: Element>(inputs: &[(&[T], usize)], g: &ConvGeom) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let mut cols = vec![T::zero(); g.cols_rows() * p];
    let mut c_off = 0;
    for &(data, ch) in inputs {
        if g.is_pointwise() {
            cols[c_off * p..(c_off + ch) * p].copy_from_slice(data);
        } else {
            im2col(data, ch, g.h, g.w, g.k, g.padding, c_off, &mut cols);
        }
        c_off += ch;
    }
    cols
}

/// `out[Co, P] = kernel[Co, K] * cols[K, P] (+ bias)`.
pub fn conv_forward<T: Element>(
    inputs: &[(&[T], usize)],
    kernel: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.out_h() * g.out_w();
    let kdim = g.cols_rows();
    let mut out = vec![T::zero(); g.out_channels * p];
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_mut(p).zip(b) {
            row.fill(bv);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    if g.is_pointwise() && inputs.len() == 1 {
        gemm(g.out_channels, kdim, p, T::one(), kernel, false, inputs[0].0, false, beta, &mut out);
    } else {
        let cols = unfold_inputs(inputs, g);
        gemm(g.out_channels, kdim, p, T::one(), kernel, false, &cols, false, beta, &mut out);
    }
    out
}

/// Gradients of [`conv_forward`] given `grad_out[Co, P]`. Returns
/// `(grad_kernel, grad_cols)`; `grad_cols` must be folded with [`col2im`]
/// (or copied, for pointwise convolutions) by the caller.
pub fn conv_backward<T: Element>(
    inputs: &[(&[T], usize)],
    kernel: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    want_kernel: bool,
    want_input: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.out_h() * g.out_w();
    let kdim = g.cols_rows();
    let gk = want_kernel.then(|| {
        let mut gk = vec![T::zero(); g.out_channels * kdim];
        if g.is_pointwise() && inputs.len() == 1 {
            gemm(g.out_channels, p, kdim, T::one(), grad_out, false, inputs[0].0, true, T::zero(), &mut gk);
        } else {
            let cols = unfold_inputs(inputs, g);
            gemm(g.out_channels, p, kdim, T::one(), grad_out, false, &cols, true, T::zero(), &mut gk);
        }
        gk
    });
    let gc = want_input.then(|| {
        let mut gc = vec![T::zero(); kdim * p];
        gemm(kdim, g.out_channels, p, T::one(), kernel, true, grad_out, false, T::zero(), &mut gc);
        gc
    });
    (gk, gc)
}

/// Folds `grad_cols` back onto input number `index` of a multi-input conv.
pub fn fold_input_grad<T: Element>(
    grad_cols: &[T],
    g: &ConvGeom,
    c_off: usize,
    channels: usize,
    dst: &mut [T],
) {
    if g.is_pointwise() {
        let p = g.h * g.w;
        for (d, &s) in dst.iter_mut().zip(&grad_cols[c_off * p..(c_off + channels) * p]) {
            *d = *d + s;
        }
    } else {
        col2im(grad_cols, channels, g.h, g.w, g.k, g.padding, c_off, dst);
    }
}

/// Source coordinate table for separable bilinear interpolation
/// (half-pixel centers, edge clamped).
#[derive(Clone, Debug)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl LerpAxis {
    pub fn new(in_len: usize, out_len: usize, scale: f64) -> Self {
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut frac = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) / scale - 0.5).max(0.0);
            let l = (src.floor() as usize).min(in_len - 1);
            let h = (l + 1).min(in_len - 1);
            lo.push(l);
            hi.push(h);
            frac.push(if l == in_len - 1 { 0.0 } else { src - l as f64 });
        }
        LerpAxis { lo, hi, frac }
    }
}

pub fn bilinear_forward<T: Element>(
    src: &[T],
    channels: usize,
    h: usize,
    w: usize,
    ys: &LerpAxis,
    xs: &LerpAxis,
) -> Vec<T> {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    let mut out = vec![T::zero(); channels * oh * ow];
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let fy = T::from_f64_lossy(ys.frac[oy]);
            let (r0, r1) = (&plane[ys.lo[oy] * w..], &plane[ys.hi[oy] * w..]);
            for ox in 0..ow {
                let fx = T::from_f64_lossy(xs.frac[ox]);
                let (x0, x1) = (xs.lo[ox], xs.hi[ox]);
                let top = r0[x0] + (r0[x1] - r0[x0]) * fx;
                let bot = r1[x0] + (r1[x1] - r1[x0]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Element>(
    grad_out: &[T],
    channels: usize,
    h: usize,
    w: usize,
    ys: &LerpAxis,
    xs: &LerpAxis,
    dst: &mut [T],
) {
    let (oh, ow) = (ys.lo.len(), xs.lo.len());
    for c in 0..channels {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        let g = &grad_out[c * oh * ow..(c + 1) * oh * ow];
        for oy in 0..oh {
            let fy = T::from_f64_lossy(ys.frac[oy]);
            let (y0, y1) = (ys.lo[oy], ys.hi[oy]);
            for ox in 0..ow {
                let fx = T::from_f64_lossy(xs.frac[ox]);
                let (x0, x1) = (xs.lo[ox], xs.hi[ox]);
                let v = g[oy * ow + ox];
                let top = v * (T::one() - fy);
                let bot = v * fy;
                plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
            }
        }
    }
}

/// Pixel-to-source and pixel-to-filter tables for the per-pixel feature
/// mapping. Both tables are separable: row `i` of the output reads LR row
/// `row_src[i]` and uses row-offset class `row_group[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MapPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub row_src: Vec<usize>,
    pub col_src: Vec<usize>,
    pub row_group: Vec<usize>,
    pub col_group: Vec<usize>,
    pub n_col_groups: usize,
    pub n_groups: usize,
    pub k: usize,
}

impl MapPlan {
    pub fn out_h(&self) -> usize {
        self.row_src.len()
    }
    pub fn out_w(&self) -> usize {
        self.col_src.len()
    }
}

/// Transposed unfold: one contiguous `C*k*k` row per LR pixel.
pub fn unfold_rows<T: Element>(features: &[T], channels: usize, plan: &MapPlan) -> Vec<T> {
    let g = ConvGeom {
        in_channels: channels,
        out_channels: 0,
        h: plan.in_h,
        w: plan.in_w,
        k: plan.k,
        padding: (plan.k - 1) / 2,
    };
    let cols = unfold_inputs(&[(features, channels)], &g);
    let (kdim, p) = (g.cols_rows(), plan.in_h * plan.in_w);
    let mut rows = vec![T::zero(); kdim * p];
    for m in 0..kdim {
        for q in 0..p {
            rows[q * kdim + m] = cols[m * p + q];
        }
    }
    rows
}

/// `[G, K, C_out]` -> `[G, C_out, K]`, so each output channel's weights are
/// contiguous.
fn transpose_filters<T: Element>(filters: &[T], out_c: usize, kdim: usize) -> Vec<T> {
    let per = kdim * out_c;
    let mut t = vec![T::zero(); filters.len()];
    for (src, dst) in filters.chunks_exact(per).zip(t.chunks_exact_mut(per)) {
        for m in 0..kdim {
            for o in 0..out_c {
                dst[o * kdim + m] = src[m * out_c + o];
            }
        }
    }
    t
}

/// Dot product with eight independent partial sums.
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s = s + x * y;
    }
    s
}

fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d = *d + alpha * v;
    }
}

/// `out[o, i, j] = sum_m rows[src(i,j)][m] * filters[group(i,j)][m][o]`.
pub fn meta_map_forward<T: Element>(rows: &[T], filters: &[T], out_c: usize, kdim: usize, plan: &MapPlan) -> Vec<T> {
    let (oh, ow) = (plan.out_h(), plan.out_w());
    let per_filter = kdim * out_c;
    let ft = transpose_filters(filters, out_c, kdim);
    let mut out = vec![T::zero(); out_c * oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let q = plan.row_src[i] * plan.in_w + plan.col_src[j];
            let gidx = plan.row_group[i] * plan.n_col_groups + plan.col_group[j];
            let patch = &rows[q * kdim..(q + 1) * kdim];
            let filt = &ft[gidx * per_filter..(gidx + 1) * per_filter];
            for (o, w) in filt.chunks_exact(kdim).enumerate() {
                out[(o * oh + i) * ow + j] = dot(patch, w);
            }
        }
    }
    out
}

/// Backward of [`meta_map_forward`]; returns `(grad_rows, grad_filters)`.
#[allow(clippy::too_many_arguments)]
pub fn meta_map_backward<T: Element>(
    rows: &[T],
    filters: &[T],
    grad_out: &[T],
    out_c: usize,
    kdim: usize,
    plan: &MapPlan,
    want_rows: bool,
    want_filters: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (oh, ow) = (plan.out_h(), plan.out_w());
    let per_filter = kdim * out_c;
    let ft = transpose_filters(filters, out_c, kdim);
    let mut g_rows = want_rows.then(|| vec![T::zero(); rows.len()]);
    let mut g_ft = want_filters.then(|| vec![T::zero(); filters.len()]);
    for i in 0..oh {
        for j in 0..ow {
            let q = plan.row_src[i] * plan.in_w + plan.col_src[j];
            let gidx = plan.row_group[i] * plan.n_col_groups + plan.col_group[j];
            let filt = &ft[gidx * per_filter..(gidx + 1) * per_filter];
            let patch = &rows[q * kdim..(q + 1) * kdim];
            for o in 0..out_c {
                let d = grad_out[(o * oh + i) * ow + j];
                if d == T::zero() {
                    continue;
                }
                if let Some(gr) = g_rows.as_mut() {
                    axpy(d, &filt[o * kdim..(o + 1) * kdim], &mut gr[q * kdim..(q + 1) * kdim]);
                }
                if let Some(gf) = g_ft.as_mut() {
                    let base = gidx * per_filter + o * kdim;
                    axpy(d, patch, &mut gf[base..base + kdim]);
                }
            }
        }
    }
    // back to the caller's [G, K, C_out] layout
    let g_filt = g_ft.map(|gt| {
        let mut g = vec![T::zero(); gt.len()];
        for (src, dst) in gt.chunks_exact(per_filter).zip(g.chunks_exact_mut(per_filter)) {
            for o in 0..out_c {
                for m in 0..kdim {
                    dst[m * out_c + o] = src[o * kdim + m];
                }
            }
        }
        g
    });
    (g_rows, g_filt)
}

/// Folds per-pixel row gradients from [`meta_map_backward`] back onto the
/// feature map.
pub fn fold_rows<T: Element>(grad_rows: &[T], channels: usize, plan: &MapPlan, dst: &mut [T]) {
    let g = ConvGeom {
        in_channels: channels,
        out_channels: 0,
        h: plan.in_h,
        w: plan.in_w,
        k: plan.k,
        padding: (plan.k - 1) / 2,
    };
    let (kdim, p) = (g.cols_rows(), plan.in_h * plan.in_w);
    let mut cols = vec![T::zero(); kdim * p];
    for q in 0..p {
        for m in 0..kdim {
            cols[m * p + q] = grad_rows[q * kdim + m];
        }
    }
    fold_input_grad(&cols, &g, 0, channels, dst);
}
