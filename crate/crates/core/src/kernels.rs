//! Raw numeric kernels on flat row-major buffers. No shape checking happens
//! here; callers in `autodiff::op` validate first.

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape m×k and `op(b)` k×n.
///
/// `a_t`/`b_t` mean the operand is stored transposed (k×m, resp. n×k).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; the strides describe exactly the
    // row-major (or transposed row-major) layouts of `a`, `b` and `c`.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output extent of a sliding window, or `None` when degenerate.
pub(crate) fn window_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output columns `oj` whose input column `oj·stride + kj − pad` lies inside
/// `0..w`.
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.padding);
    let lo = if kj >= pad { 0 } else { (pad - kj).div_ceil(s) };
    let hi = if g.w + pad > kj { ((g.w + pad - kj - 1) / s + 1).min(g.out_w) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    let line = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    if ii < 0 || ii >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &xc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (k, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + k * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_ch {
        let gxc = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.padding;
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - pad;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gxc[ii as usize * g.w..(ii as usize + 1) * g.w];
                    let line = &src[oi * g.out_w + lo..oi * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[start..start + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (k, v) in line.iter().enumerate() {
                            dst[start + k * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch: `x` [n, in_ch, h, w] → [n, out_ch, out_h, out_w].
pub(crate) fn conv2d_forward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let plane = g.out_plane();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * plane;
    let k = g.cols_rows();
    let mut out = vec![0.0; n * out_len];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; k * plane]
    };
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_exact_mut(plane).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(g.out_ch, k, plane, weight, false, xb, false, beta, ob);
        } else {
            im2col(xb, g, &mut cols);
            gemm(g.out_ch, k, plane, weight, false, &cols, false, beta, ob);
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of the convolution; batch contributions are summed in index order.
pub(crate) fn conv2d_backward(
    x: &[f64],
    n: usize,
    weight: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let plane = g.out_plane();
    let in_len = g.in_ch * g.h * g.w;
    let out_len = g.out_ch * plane;
    let k = g.cols_rows();
    let mut gx = need[0].then(|| vec![0.0; n * in_len]);
    let mut gw = need[1].then(|| vec![0.0; g.out_ch * k]);
    let mut gb = need[2].then(|| vec![0.0; g.out_ch]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { k * plane }];
    let mut gcols = vec![0.0; if g.is_pointwise() || !need[0] { 0 } else { k * plane }];
    for b in 0..n {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb_out = &gout[b * out_len..(b + 1) * out_len];
        if let Some(gw) = gw.as_mut() {
            if g.is_pointwise() {
                gemm(g.out_ch, plane, k, gb_out, false, xb, true, 1.0, gw);
            } else {
                im2col(xb, g, &mut cols);
                gemm(g.out_ch, plane, k, gb_out, false, &cols, true, 1.0, gw);
            }
        }
        if let Some(gbias) = gb.as_mut() {
            for (co, chunk) in gb_out.chunks_exact(plane).enumerate() {
                gbias[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(k, g.out_ch, plane, weight, true, gb_out, false, 0.0, gxb);
            } else {
                gemm(k, g.out_ch, plane, weight, true, gb_out, false, 0.0, &mut gcols);
                col2im_add(&gcols, g, gxb);
            }
        }
    }
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Window bounds clipped to the input, as half-open row/col ranges.
fn window(g: &PoolGeom, oi: usize, oj: usize) -> (usize, usize, usize, usize) {
    let pad = g.padding as isize;
    let i0 = (oi * g.stride) as isize - pad;
    let j0 = (oj * g.stride) as isize - pad;
    let i1 = (i0 + g.k as isize).min(g.h as isize);
    let j1 = (j0 + g.k as isize).min(g.w as isize);
    (
        i0.max(0) as usize,
        i1.max(0) as usize,
        j0.max(0) as usize,
        j1.max(0) as usize,
    )
}

/// Returns pooled values and, for max pooling, the flat argmax of every output.
pub(crate) fn pool2d_forward(x: &[f64], kind: PoolKind, g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.planes * out_plane];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; g.planes * out_plane],
        PoolKind::Avg => Vec::new(),
    };
    for p in 0..g.planes {
        let base = p * in_plane;
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let (i0, i1, j0, j1) = window(g, oi, oj);
                let o = p * out_plane + oi * g.out_w + oj;
                match kind {
                    PoolKind::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for i in i0..i1 {
                            for j in j0..j1 {
                                let idx = base + i * g.w + j;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                    PoolKind::Avg => {
                        let mut s = 0.0;
                        for i in i0..i1 {
                            for j in j0..j1 {
                                s += x[base + i * g.w + j];
                            }
                        }
                        out[o] = s / ((i1 - i0) * (j1 - j0)) as f64;
                    }
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn pool2d_backward(
    gout: &[f64],
    kind: PoolKind,
    g: &PoolGeom,
    argmax: &[usize],
) -> Vec<f64> {
    let in_plane = g.h * g.w;
    let out_plane = g.out_h * g.out_w;
    let mut gx = vec![0.0; g.planes * in_plane];
    match kind {
        PoolKind::Max => {
            for (o, &idx) in argmax.iter().enumerate() {
                gx[idx] += gout[o];
            }
        }
        PoolKind::Avg => {
            for p in 0..g.planes {
                let base = p * in_plane;
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        let (i0, i1, j0, j1) = window(g, oi, oj);
                        let share = gout[p * out_plane + oi * g.out_w + oj]
                            / ((i1 - i0) * (j1 - j0)) as f64;
                        for i in i0..i1 {
                            for j in j0..j1 {
                                gx[base + i * g.w + j] += share;
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}
