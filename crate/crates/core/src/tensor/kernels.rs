//! Slice-level numeric kernels shared by the tape's forward and backward passes.

use super::Real;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Sums values in ascending order so the result does not depend on input order.
pub(crate) fn canonical_sum<T: Real>(vals: &mut [T]) -> T {
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    vals.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `da[m×k] += dc[m×n] · bᵀ`.
pub(crate) fn matmul_grad_a<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&d, &bv) in drow.iter().zip(brow) {
                s += d * bv;
            }
            da[i * k + p] += s;
        }
    }
}

/// `db[k×n] += aᵀ · dc[m×n]`.
pub(crate) fn matmul_grad_b<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let dbrow = &mut db[p * n..(p + 1) * n];
            for (dbv, &d) in dbrow.iter_mut().zip(drow) {
                *dbv += av * d;
            }
        }
    }
}

pub(crate) fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv<T: Real>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<T: Real>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let mut buf = Vec::with_capacity(len);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[idx(j)]);
            }
            buf.clear();
            for j in 0..len {
                let e = (x[idx(j)] - mx).exp();
                out[idx(j)] = e;
                buf.push(e);
            }
            let z = canonical_sum(&mut buf);
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / z;
            }
        }
    }
    out
}

pub(crate) fn softmax_grad<T: Real>(y: &[T], dy: &[T], dx: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot += dy[idx(j)] * y[idx(j)];
            }
            for j in 0..len {
                dx[idx(j)] += y[idx(j)] * (dy[idx(j)] - dot);
            }
        }
    }
}

/// Row-wise standardisation over the last axis; returns (normalised, inverse std).
pub(crate) fn layer_norm<T: Real>(x: &[T], n: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let nf = T::lit(n as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / nf;
        let is = T::one() / (var + eps).sqrt();
        for (o, &v) in y[r * n..(r + 1) * n].iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (y, inv)
}

pub(crate) fn layer_norm_grad<T: Real>(y: &[T], inv: &[T], dy: &[T], dx: &mut [T], n: usize) {
    let nf = T::lit(n as f64);
    for (r, &is) in inv.iter().enumerate() {
        let yr = &y[r * n..(r + 1) * n];
        let dr = &dy[r * n..(r + 1) * n];
        let mean_dy = dr.iter().fold(T::zero(), |a, &v| a + v) / nf;
        let mean_dyy = dr.iter().zip(yr).fold(T::zero(), |a, (&d, &v)| a + d * v) / nf;
        for ((o, &d), &v) in dx[r * n..(r + 1) * n].iter_mut().zip(dr).zip(yr) {
            *o += is * (d - mean_dy - v * mean_dyy);
        }
    }
}

/// Temporal shift on data laid out as `[t][m][c]`.
pub(crate) fn temporal_shift<T: Real>(x: &[T], t: usize, m: usize, c: usize, fold: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let at = |ti: usize, mi: usize, ci: usize| (ti * m + mi) * c + ci;
    for ti in 0..t {
        for mi in 0..m {
            for ci in 0..c {
                let src = if ci < fold {
                    (ti + 1 < t).then(|| at(ti + 1, mi, ci))
                } else if ci < 2 * fold {
                    (ti >= 1).then(|| at(ti - 1, mi, ci))
                } else {
                    Some(at(ti, mi, ci))
                };
                if let Some(s) = src {
                    out[at(ti, mi, ci)] = x[s];
                }
            }
        }
    }
    out
}

pub(crate) fn temporal_shift_grad<T: Real>(dy: &[T], dx: &mut [T], t: usize, m: usize, c: usize, fold: usize) {
    let at = |ti: usize, mi: usize, ci: usize| (ti * m + mi) * c + ci;
    for ti in 0..t {
        for mi in 0..m {
            for ci in 0..c {
                let src = if ci < fold {
                    (ti + 1 < t).then(|| at(ti + 1, mi, ci))
                } else if ci < 2 * fold {
                    (ti >= 1).then(|| at(ti - 1, mi, ci))
                } else {
                    Some(at(ti, mi, ci))
                };
                if let Some(s) = src {
                    dx[s] += dy[at(ti, mi, ci)];
                }
            }
        }
    }
}

/// Depthwise "same" convolution over time: `x[t×d]`, `w[d×k]`.
pub(crate) fn dwconv1d<T: Real>(x: &[T], w: &[T], t: usize, d: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let mut out = vec![T::zero(); t * d];
    for ti in 0..t {
        for j in 0..k {
            let src = ti + j;
            if src < pad || src - pad >= t {
                continue;
            }
            let s = src - pad;
            for di in 0..d {
                out[ti * d + di] += w[di * k + j] * x[s * d + di];
            }
        }
    }
    out
}

pub(crate) fn dwconv1d_grad<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    t: usize,
    d: usize,
    k: usize,
) {
    let pad = k / 2;
    if let Some(dx) = dx {
        for ti in 0..t {
            for j in 0..k {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                for di in 0..d {
                    dx[s * d + di] += w[di * k + j] * dy[ti * d + di];
                }
            }
        }
    }
    if let Some(dw) = dw {
        for ti in 0..t {
            for j in 0..k {
                let src = ti + j;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                for di in 0..d {
                    dw[di * k + j] += x[s * d + di] * dy[ti * d + di];
                }
            }
        }
    }
}

/// Geometry of a per-frame "same" 2-D convolution over `[t, h, w, cin]` with an odd square kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvGeom {
    fn taps(&self, y: usize, x: usize) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let pad = self.k / 2;
        (0..self.k).flat_map(move |ky| (0..self.k).map(move |kx| (ky, kx))).filter_map(move |(ky, kx)| {
            let sy = (y + ky).checked_sub(pad)?;
            let sx = (x + kx).checked_sub(pad)?;
            (sy < self.h && sx < self.w).then_some((ky, kx, sy, sx))
        })
    }
}

/// Kernel layout `[k][k][cin][cout]`.
pub(crate) fn conv2d<T: Real>(x: &[T], wt: &[T], g: ConvGeom) -> Vec<T> {
    let mut out = vec![T::zero(); g.t * g.h * g.w * g.cout];
    for ti in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let obase = ((ti * g.h + y) * g.w + xx) * g.cout;
                for (ky, kx, sy, sx) in g.taps(y, xx) {
                    let ibase = ((ti * g.h + sy) * g.w + sx) * g.cin;
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let xv = x[ibase + ci];
                        if xv == T::zero() {
                            continue;
                        }
                        let wrow = &wt[wbase + ci * g.cout..wbase + (ci + 1) * g.cout];
                        for (o, &wv) in out[obase..obase + g.cout].iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_grad<T: Real>(
    x: &[T],
    wt: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    g: ConvGeom,
) {
    for ti in 0..g.t {
        for y in 0..g.h {
            for xx in 0..g.w {
                let obase = ((ti * g.h + y) * g.w + xx) * g.cout;
                let drow = &dy[obase..obase + g.cout];
                for (ky, kx, sy, sx) in g.taps(y, xx) {
                    let ibase = ((ti * g.h + sy) * g.w + sx) * g.cin;
                    let wbase = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let wrow = wbase + ci * g.cout..wbase + (ci + 1) * g.cout;
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut s = T::zero();
                            for (&d, &wv) in drow.iter().zip(&wt[wrow.clone()]) {
                                s += d * wv;
                            }
                            dx[ibase + ci] += s;
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            let xv = x[ibase + ci];
                            for (o, &d) in dw[wrow].iter_mut().zip(drow) {
                                *o += xv * d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 average pooling over `[t, h, w, c]` with even `h`, `w`.
pub(crate) fn avg_pool2<T: Real>(x: &[T], t: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let mut out = vec![T::zero(); t * ho * wo * c];
    for ti in 0..t {
        for y in 0..ho {
            for xx in 0..wo {
                for ci in 0..c {
                    let mut s = T::zero();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        s += x[((ti * h + 2 * y + dy) * w + 2 * xx + dx) * c + ci];
                    }
                    out[((ti * ho + y) * wo + xx) * c + ci] = s * q;
                }
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_grad<T: Real>(dy: &[T], dx: &mut [T], t: usize, h: usize, w: usize, c: usize) {
    let (ho, wo) = (h / 2, w / 2);
    let q = T::lit(0.25);
    for ti in 0..t {
        for y in 0..ho {
            for xx in 0..wo {
                for ci in 0..c {
                    let g = dy[((ti * ho + y) * wo + xx) * c + ci] * q;
                    for (oy, ox) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        dx[((ti * h + 2 * y + oy) * w + 2 * xx + ox) * c + ci] += g;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference product by explicit triple sum.
    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        (0..m)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum())
            .collect()
    }

    #[test]
    fn matmul_agrees_with_elementwise_reference() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0];
        let r = naive_matmul(&a, &b, 2, 2, 1);
        assert_eq!(r, vec![17.0, 39.0]);
        assert_eq!(matmul(&a, &b, 2, 2, 1), r);
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let mut a = [0.1f64, 1e16, -1e16, 0.3];
        let mut b = [0.3f64, -1e16, 0.1, 1e16];
        assert_eq!(canonical_sum(&mut a).to_bits(), canonical_sum(&mut b).to_bits());
    }
}
