//! Array kernels behind the graph ops. Pure functions of their inputs, no
//! tape knowledge. Backward kernels accumulate (`+=`) into the gradient
//! buffers they are handed so one buffer can collect from several consumers.

use super::{numel, Element};

// ── broadcasting ─────────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes, aligned at the trailing axes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db {
            out[i] = da;
        } else if da == 1 {
            out[i] = db;
        } else if db == 1 {
            out[i] = da;
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides of `shape` when broadcast against `out` (stride 0 on
/// broadcast axes), aligned at the trailing axes of `out`.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; out.len()];
    let mut s = 1;
    let off = out.len() - shape.len();
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { s };
        s *= shape[i];
    }
    strides
}

/// Walks `out_shape` in row-major order handing the callback the two input
/// offsets for each output position.
fn bcast_walk(
    ash: &[usize],
    bsh: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out_shape);
    if n == 0 {
        return;
    }
    let sa = bcast_strides(ash, out_shape);
    let sb = bcast_strides(bsh, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    for i in 0..n {
        f(i, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
        }
    }
}

pub fn binary_bcast<T: Element>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    if ash == bsh {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    bcast_walk(ash, bsh, out_shape, |i, oa, ob| out[i] = f(a[oa], b[ob]));
    out
}

/// Shared backward walk for broadcasting binary ops: `da` and `db` receive
/// `d_out * ∂out/∂input` summed over the broadcast axes.
#[allow(clippy::too_many_arguments)]
pub fn binary_bcast_backward<T: Element>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out_shape: &[usize],
    g: &[T],
    da: Option<&mut [T]>,
    db: Option<&mut [T]>,
    dfa: impl Fn(T, T) -> T,
    dfb: impl Fn(T, T) -> T,
) {
    let mut da = da;
    let mut db = db;
    bcast_walk(ash, bsh, out_shape, |i, oa, ob| {
        let gi = g[i];
        if let Some(da) = da.as_deref_mut() {
            da[oa] = da[oa] + gi * dfa(a[oa], b[ob]);
        }
        if let Some(db) = db.as_deref_mut() {
            db[ob] = db[ob] + gi * dfb(a[oa], b[ob]);
        }
    });
}

/// Broadcast-copy of `a` to `out_shape` (used by explicit expand).
pub fn broadcast_to<T: Element>(a: &[T], ash: &[usize], out_shape: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); numel(out_shape)];
    bcast_walk(ash, ash, out_shape, |i, oa, _| out[i] = a[oa]);
    out
}

pub fn broadcast_to_backward<T: Element>(ash: &[usize], out_shape: &[usize], g: &[T], da: &mut [T]) {
    bcast_walk(ash, ash, out_shape, |i, oa, _| da[oa] = da[oa] + g[i]);
}

// ── matmul ───────────────────────────────────────────────────────────────

/// C[m,n] = A[m,k] · B[k,n]
pub fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + aip * brow[j];
            }
        }
    }
    c
}

/// C[m,n] += A[m,k] · B[n,k]ᵀ
pub fn mm_nt_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// C[m,n] += A[k,m]ᵀ · B[k,n]
pub fn mm_tn_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + api * brow[j];
            }
        }
    }
}

// ── conv2d (channels-last) ───────────────────────────────────────────────

pub fn conv2d_out_hw(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// input [b,h,w,ci], weight [co,kh,kw,ci], bias [co] → output [b,ho,wo,co].
/// Cross-correlation (no kernel flip), zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Element>(
    input: &[T],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    weight: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (ho, wo) = conv2d_out_hw(h, w, kh, kw, stride, pad);
    let mut out = vec![T::zero(); b * ho * wo * co];
    for bi in 0..b {
        let in_img = &input[bi * h * w * ci..(bi + 1) * h * w * ci];
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = &mut out[((bi * ho + oy) * wo + ox) * co..((bi * ho + oy) * wo + ox + 1) * co];
                if let Some(bias) = bias {
                    orow.copy_from_slice(bias);
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let irow = &in_img[((iy as usize * w) + ix as usize) * ci..][..ci];
                        for oc in 0..co {
                            let wrow = &weight[((oc * kh + ky) * kw + kx) * ci..][..ci];
                            let mut acc = T::zero();
                            for c in 0..ci {
                                acc = acc + irow[c] * wrow[c];
                            }
                            orow[oc] = orow[oc] + acc;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, weight, and bias gradients in one pass over the output.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    input: &[T],
    b: usize,
    h: usize,
    w: usize,
    ci: usize,
    weight: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    g: &[T],
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let (ho, wo) = conv2d_out_hw(h, w, kh, kw, stride, pad);
    for bi in 0..b {
        let in_img = &input[bi * h * w * ci..(bi + 1) * h * w * ci];
        for oy in 0..ho {
            for ox in 0..wo {
                let grow = &g[((bi * ho + oy) * wo + ox) * co..][..co];
                if let Some(dbias) = dbias.as_deref_mut() {
                    for oc in 0..co {
                        dbias[oc] = dbias[oc] + grow[oc];
                    }
                }
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ioff = ((iy as usize * w) + ix as usize) * ci;
                        let irow = &in_img[ioff..ioff + ci];
                        for oc in 0..co {
                            let gv = grow[oc];
                            if gv == T::zero() {
                                continue;
                            }
                            let woff = ((oc * kh + ky) * kw + kx) * ci;
                            if let Some(dw) = dweight.as_deref_mut() {
                                let dwr = &mut dw[woff..woff + ci];
                                for c in 0..ci {
                                    dwr[c] = dwr[c] + gv * irow[c];
                                }
                            }
                            if let Some(di) = dinput.as_deref_mut() {
                                let wrow = &weight[woff..woff + ci];
                                let dir = &mut di[bi * h * w * ci + ioff..][..ci];
                                for c in 0..ci {
                                    dir[c] = dir[c] + gv * wrow[c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── softmax / layer norm ─────────────────────────────────────────────────

/// (elements before axis, axis length, elements after axis)
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along one axis: the row max is subtracted
/// before exponentiation.
pub fn softmax<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = x[base];
            for a in 1..len {
                let v = x[base + a * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for a in 0..len {
                let e = (x[base + a * inner] - mx).exp();
                out[base + a * inner] = e;
                sum = sum + e;
            }
            let inv = T::one() / sum;
            for a in 0..len {
                out[base + a * inner] = out[base + a * inner] * inv;
            }
        }
    }
    out
}

/// dx = s ⊙ (g − Σ_axis g·s)
pub fn softmax_backward<T: Element>(s: &[T], shape: &[usize], axis: usize, g: &[T], dx: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for a in 0..len {
                let off = base + a * inner;
                dot = dot + g[off] * s[off];
            }
            for a in 0..len {
                let off = base + a * inner;
                dx[off] = dx[off] + s[off] * (g[off] - dot);
            }
        }
    }
}

/// Layer norm over the last axis with learned scale and shift.
pub fn layer_norm<T: Element>(x: &[T], d: usize, gamma: &[T], beta: &[T], eps: T) -> Vec<T> {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            var = var + (v - mean) * (v - mean);
        }
        var = var / dn;
        let inv = T::one() / (var + eps).sqrt();
        let orow = &mut out[r * d..(r + 1) * d];
        for c in 0..d {
            orow[c] = (row[c] - mean) * inv * gamma[c] + beta[c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Element>(
    x: &[T],
    d: usize,
    gamma: &[T],
    eps: T,
    g: &[T],
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let rows = x.len() / d;
    let dn = T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let grow = &g[r * d..(r + 1) * d];
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            var = var + (v - mean) * (v - mean);
        }
        var = var / dn;
        let inv = T::one() / (var + eps).sqrt();

        if let Some(dgamma) = dgamma.as_deref_mut() {
            for c in 0..d {
                dgamma[c] = dgamma[c] + grow[c] * (row[c] - mean) * inv;
            }
        }
        if let Some(dbeta) = dbeta.as_deref_mut() {
            for c in 0..d {
                dbeta[c] = dbeta[c] + grow[c];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dxhat = g·gamma; dx = inv/N · (N·dxhat − Σdxhat − xhat·Σ(dxhat·xhat))
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for c in 0..d {
                let dxhat = grow[c] * gamma[c];
                let xhat = (row[c] - mean) * inv;
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            }
            let drow = &mut dx[r * d..(r + 1) * d];
            for c in 0..d {
                let dxhat = grow[c] * gamma[c];
                let xhat = (row[c] - mean) * inv;
                drow[c] = drow[c] + inv / dn * (dn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
            }
        }
    }
}

// ── activations ──────────────────────────────────────────────────────────

pub fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

// ── bilinear sampling ────────────────────────────────────────────────────

/// Bilinear read of `map` (h×w, row-major) at real coordinate (x, y), where
/// x indexes width and y height. Reads outside [0,w-1]×[0,h-1] see zeros.
pub fn bilinear_at<T: Element>(map: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let x0 = x0.to_f64() as isize;
    let y0 = y0.to_f64() as isize;
    let get = |yy: isize, xx: isize| -> T {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            T::zero()
        } else {
            map[yy as usize * w + xx as usize]
        }
    };
    let v00 = get(y0, x0);
    let v01 = get(y0, x0 + 1);
    let v10 = get(y0 + 1, x0);
    let v11 = get(y0 + 1, x0 + 1);
    let one = T::one();
    (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11)
}

pub fn bilinear_sample<T: Element>(map: &[T], h: usize, w: usize, coords: &[T]) -> Vec<T> {
    coords
        .chunks_exact(2)
        .map(|c| bilinear_at(map, h, w, c[0], c[1]))
        .collect()
}

/// Gradients flow to the map (scatter into the four corners) and to the
/// coordinates (derivative of the interpolation weights). At integer
/// coordinates the coordinate derivative is the right-sided one.
#[allow(clippy::too_many_arguments)]
pub fn bilinear_sample_backward<T: Element>(
    map: &[T],
    h: usize,
    w: usize,
    coords: &[T],
    g: &[T],
    mut dmap: Option<&mut [T]>,
    mut dcoords: Option<&mut [T]>,
) {
    let one = T::one();
    for (n, c) in coords.chunks_exact(2).enumerate() {
        let gv = g[n];
        let (x, y) = (c[0], c[1]);
        let x0f = x.floor();
        let y0f = y.floor();
        let fx = x - x0f;
        let fy = y - y0f;
        let x0 = x0f.to_f64() as isize;
        let y0 = y0f.to_f64() as isize;
        let inb = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize;
        let get = |yy: isize, xx: isize| -> T {
            if inb(yy, xx) {
                map[yy as usize * w + xx as usize]
            } else {
                T::zero()
            }
        };
        if let Some(dmap) = dmap.as_deref_mut() {
            let mut scatter = |yy: isize, xx: isize, wgt: T| {
                if inb(yy, xx) {
                    let off = yy as usize * w + xx as usize;
                    dmap[off] = dmap[off] + gv * wgt;
                }
            };
            scatter(y0, x0, (one - fy) * (one - fx));
            scatter(y0, x0 + 1, (one - fy) * fx);
            scatter(y0 + 1, x0, fy * (one - fx));
            scatter(y0 + 1, x0 + 1, fy * fx);
        }
        if let Some(dcoords) = dcoords.as_deref_mut() {
            let v00 = get(y0, x0);
            let v01 = get(y0, x0 + 1);
            let v10 = get(y0 + 1, x0);
            let v11 = get(y0 + 1, x0 + 1);
            let ddx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
            let ddy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
            dcoords[2 * n] = dcoords[2 * n] + gv * ddx;
            dcoords[2 * n + 1] = dcoords[2 * n + 1] + gv * ddy;
        }
    }
}

// ── sinusoidal position features ─────────────────────────────────────────

/// Frequencies ω_j = 10000^(-4j/dim) for j in 0..dim/4.
pub fn pe_freqs(dim: usize) -> Vec<f64> {
    (0..dim / 4)
        .map(|j| 10_000f64.powf(-(4.0 * j as f64) / dim as f64))
        .collect()
}

/// coords [n,2] → out [n,dim]: first half encodes x, second half y, each
/// half interleaved (sin, cos) over the frequency ladder.
pub fn pos_embed<T: Element>(coords: &[T], dim: usize) -> Vec<T> {
    let freqs = pe_freqs(dim);
    let half = dim / 2;
    let n = coords.len() / 2;
    let mut out = vec![T::zero(); n * dim];
    for i in 0..n {
        let x = coords[2 * i];
        let y = coords[2 * i + 1];
        let row = &mut out[i * dim..(i + 1) * dim];
        for (j, &wf) in freqs.iter().enumerate() {
            let wj = T::from_f64(wf);
            row[2 * j] = (wj * x).sin();
            row[2 * j + 1] = (wj * x).cos();
            row[half + 2 * j] = (wj * y).sin();
            row[half + 2 * j + 1] = (wj * y).cos();
        }
    }
    out
}

pub fn pos_embed_backward<T: Element>(coords: &[T], dim: usize, g: &[T], dcoords: &mut [T]) {
    let freqs = pe_freqs(dim);
    let half = dim / 2;
    let n = coords.len() / 2;
    for i in 0..n {
        let x = coords[2 * i];
        let y = coords[2 * i + 1];
        let grow = &g[i * dim..(i + 1) * dim];
        let mut dx = T::zero();
        let mut dy = T::zero();
        for (j, &wf) in freqs.iter().enumerate() {
            let wj = T::from_f64(wf);
            dx = dx + grow[2 * j] * wj * (wj * x).cos() - grow[2 * j + 1] * wj * (wj * x).sin();
            dy = dy + grow[half + 2 * j] * wj * (wj * y).cos() - grow[half + 2 * j + 1] * wj * (wj * y).sin();
        }
        dcoords[2 * i] = dcoords[2 * i] + dx;
        dcoords[2 * i + 1] = dcoords[2 * i + 1] + dy;
    }
}

// ── structural ops ───────────────────────────────────────────────────────

/// [h,w,c] → [h,w,9,c]: the 3×3 neighborhood of every cell, zero-padded at
/// the borders, tap order row-major (dy, dx).
pub fn unfold3x3<T: Element>(x: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * 9 * c];
    for y in 0..h {
        for xx in 0..w {
            for t in 0..9 {
                let yy = y as isize + (t / 3) as isize - 1;
                let xi = xx as isize + (t % 3) as isize - 1;
                if yy < 0 || xi < 0 || yy >= h as isize || xi >= w as isize {
                    continue;
                }
                let src = ((yy as usize * w) + xi as usize) * c;
                let dst = (((y * w) + xx) * 9 + t) * c;
                out[dst..dst + c].copy_from_slice(&x[src..src + c]);
            }
        }
    }
    out
}

pub fn unfold3x3_backward<T: Element>(g: &[T], h: usize, w: usize, c: usize, dx: &mut [T]) {
    for y in 0..h {
        for xx in 0..w {
            for t in 0..9 {
                let yy = y as isize + (t / 3) as isize - 1;
                let xi = xx as isize + (t % 3) as isize - 1;
                if yy < 0 || xi < 0 || yy >= h as isize || xi >= w as isize {
                    continue;
                }
                let src = ((yy as usize * w) + xi as usize) * c;
                let dst = (((y * w) + xx) * 9 + t) * c;
                for k in 0..c {
                    dx[src + k] = dx[src + k] + g[dst + k];
                }
            }
        }
    }
}

/// Zero padding on the bottom/right of a [b,h,w,c] stack.
pub fn zero_pad2d<T: Element>(x: &[T], b: usize, h: usize, w: usize, c: usize, pb: usize, pr: usize) -> Vec<T> {
    let (ho, wo) = (h + pb, w + pr);
    let mut out = vec![T::zero(); b * ho * wo * c];
    for bi in 0..b {
        for y in 0..h {
            let src = ((bi * h) + y) * w * c;
            let dst = ((bi * ho) + y) * wo * c;
            out[dst..dst + w * c].copy_from_slice(&x[src..src + w * c]);
        }
    }
    out
}

pub fn zero_pad2d_backward<T: Element>(g: &[T], b: usize, h: usize, w: usize, c: usize, pb: usize, pr: usize, dx: &mut [T]) {
    let (ho, wo) = (h + pb, w + pr);
    let _ = ho;
    for bi in 0..b {
        for y in 0..h {
            let src = ((bi * h) + y) * w * c;
            let dst = ((bi * (h + pb)) + y) * wo * c;
            for k in 0..w * c {
                dx[src + k] = dx[src + k] + g[dst + k];
            }
        }
    }
}

pub fn permute<T: Element>(x: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let mut out = vec![T::zero(); n];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for (i, o) in out.iter_mut().enumerate() {
        let _ = i;
        *o = x[src];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= perm_strides[ax] * out_shape[ax];
        }
    }
    out
}

pub fn permute_backward<T: Element>(g: &[T], shape: &[usize], axes: &[usize], dx: &mut [T]) {
    // same walk, scattering instead of gathering
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for &gv in g.iter() {
        dx[src] = dx[src] + gv;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += perm_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
            src -= perm_strides[ax] * out_shape[ax];
        }
    }
}

pub fn sum_axis<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let ob = o * inner;
            for i in 0..inner {
                out[ob + i] = out[ob + i] + x[base + i];
            }
        }
    }
    out
}

pub fn sum_axis_backward<T: Element>(shape: &[usize], axis: usize, g: &[T], scale: T, dx: &mut [T]) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for a in 0..len {
            let base = (o * len + a) * inner;
            let ob = o * inner;
            for i in 0..inner {
                dx[base + i] = dx[base + i] + g[ob + i] * scale;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_follow_trailing_alignment() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2], &[3]), None);
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
    }

    #[test]
    fn matmul_matches_hand_computation() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = mm_nn(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 0.0, -1.0, 1.0, 0.5, 2.0]; // 3x2
        let c = mm_nn(&a, &b, 2, 3, 2);
        // bᵀ is 2x3
        let bt = permute(&b, &[3, 2], &[1, 0]);
        let mut c_nt = vec![0.0; 4];
        mm_nt_acc(&a, &bt, 2, 3, 2, &mut c_nt);
        assert_eq!(c, c_nt);
        let at = permute(&a, &[2, 3], &[1, 0]);
        let mut c_tn = vec![0.0; 4];
        mm_tn_acc(&at, &b, 2, 3, 2, &mut c_tn);
        assert_eq!(c, c_tn);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        // 1x1 kernel with weight 1 reproduces the input
        let input: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let out = conv2d(&input, 1, 3, 3, 1, &[1.0], 1, 1, 1, None, 1, 0);
        assert_eq!(out, input);
    }

    #[test]
    fn conv2d_stride2_shapes() {
        assert_eq!(conv2d_out_hw(8, 8, 3, 3, 2, 1), (4, 4));
        assert_eq!(conv2d_out_hw(7, 9, 3, 3, 2, 1), (4, 5));
        assert_eq!(conv2d_out_hw(4, 4, 3, 3, 1, 1), (4, 4));
    }

    #[test]
    fn conv2d_sums_box_kernel() {
        // all-ones 3x3 kernel with pad 1 computes neighborhood sums
        let input = vec![1.0f64; 4 * 4];
        let w = vec![1.0f64; 9];
        let out = conv2d(&input, 1, 4, 4, 1, &w, 1, 3, 3, None, 1, 1);
        assert_eq!(out[5], 9.0); // interior
        assert_eq!(out[0], 4.0); // corner sees 2x2
    }

    #[test]
    fn softmax_rows_sum_to_one_and_uniform_on_equal_inputs() {
        let s = softmax(&[0.0f64; 3], &[1, 3], 1);
        for v in &s {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&[1.0, 2.0, 3.0, 4.0, 100.0, 100.5], &[3, 2], 1);
        for row in s.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_center_of_2x2_is_mean() {
        let v: f64 = bilinear_at(&[1.0, 2.0, 3.0, 4.0], 2, 2, 0.5, 0.5);
        assert!((v - 2.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_integer_coords_hit_exact_values() {
        let map = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_at(&map, 2, 2, 1.0, 0.0), 2.0);
        assert_eq!(bilinear_at(&map, 2, 2, 0.0, 1.0), 3.0);
    }

    #[test]
    fn bilinear_far_outside_is_zero() {
        let map = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_at(&map, 2, 2, -5.0, 0.0), 0.0);
        assert_eq!(bilinear_at(&map, 2, 2, 0.0, 10.0), 0.0);
    }

    #[test]
    fn pos_embed_zero_coordinate() {
        let out = pos_embed(&[0.0f64, 0.0], 8);
        // all sin entries 0, all cos entries 1
        for j in 0..2 {
            assert_eq!(out[2 * j], 0.0);
            assert_eq!(out[2 * j + 1], 1.0);
            assert_eq!(out[4 + 2 * j], 0.0);
            assert_eq!(out[4 + 2 * j + 1], 1.0);
        }
    }

    #[test]
    fn pos_embed_first_frequency_is_unit() {
        // omega_0 = 1, so x = pi/2 puts sin at exactly 1
        let out = pos_embed(&[std::f64::consts::FRAC_PI_2, 0.0], 8);
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn permute_transposes_a_matrix() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn unfold_center_tap_is_identity() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 2x3x2
        let u = unfold3x3(&x, 2, 3, 2);
        for y in 0..2 {
            for xx in 0..3 {
                for c in 0..2 {
                    assert_eq!(u[(((y * 3) + xx) * 9 + 4) * 2 + c], x[((y * 3) + xx) * 2 + c]);
                }
            }
        }
    }
}
