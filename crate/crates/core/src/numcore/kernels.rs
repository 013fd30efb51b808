//! Raw slice kernels behind the graph ops.

use super::graph::Border;

/// `out = a · b` for row-major `a: m×k`, `b: k×n`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out += g · bᵀ` for `g: m×n`, `b: k×n`, `out: m×k`.
pub fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

/// `out += aᵀ · g` for `a: m×k`, `g: m×n`, `out: k×n`.
pub fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// GELU (tanh form) and its derivative.
#[inline]
pub fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = K * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

pub fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let m = (0..len).map(|t| x[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for t in 0..len {
                let e = (x[at(t)] - m).exp();
                out[at(t)] = e;
                s += e;
            }
            for t in 0..len {
                out[at(t)] /= s;
            }
        }
    }
    out
}

/// Four neighbor indices and weights of one bilinear read.
#[derive(Clone, Copy)]
struct Corners {
    idx: [Option<usize>; 4],
    wy: f64,
    wx: f64,
}

impl Corners {
    #[inline]
    fn new(y: f64, x: f64, h: usize, w: usize, border: Border) -> Self {
        let y0 = y.floor();
        let x0 = x.floor();
        let (wy, wx) = (y - y0, x - x0);
        let (yi, xi) = (y0 as isize, x0 as isize);
        Self {
            idx: [
                border.resolve(yi, xi, h, w),
                border.resolve(yi, xi + 1, h, w),
                border.resolve(yi + 1, xi, h, w),
                border.resolve(yi + 1, xi + 1, h, w),
            ],
            wy,
            wx,
        }
    }

    #[inline]
    fn weights(&self) -> [f64; 4] {
        let (wy, wx) = (self.wy, self.wx);
        [
            (1.0 - wy) * (1.0 - wx),
            (1.0 - wy) * wx,
            wy * (1.0 - wx),
            wy * wx,
        ]
    }

    #[inline]
    fn values(&self, f: &[f64], c: usize, ch: usize) -> [f64; 4] {
        self.idx.map(|i| i.map_or(0.0, |p| f[p * c + ch]))
    }
}

fn corners_for(
    coords: &[f64],
    n: usize,
    groups: usize,
    dims: (usize, usize),
    border: Border,
) -> impl Iterator<Item = Corners> + '_ {
    (0..n * groups).map(move |q| {
        Corners::new(coords[2 * q], coords[2 * q + 1], dims.0, dims.1, border)
    })
}

pub fn bilinear_forward(
    f: &[f64],
    (h, w, c): (usize, usize, usize),
    coords: &[f64],
    n: usize,
    groups: usize,
    border: Border,
) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    let corners: Vec<Corners> = corners_for(coords, n, groups, (h, w), border).collect();
    for p in 0..n {
        for ch in 0..c {
            let cr = &corners[p * groups + ch % groups];
            let wt = cr.weights();
            let v = cr.values(f, c, ch);
            out[p * c + ch] = v[0] * wt[0] + v[1] * wt[1] + v[2] * wt[2] + v[3] * wt[3];
        }
    }
    out
}

pub fn bilinear_backward_f(
    g: &[f64],
    (h, w, c): (usize, usize, usize),
    coords: &[f64],
    n: usize,
    groups: usize,
    border: Border,
    gf: &mut [f64],
) {
    let corners: Vec<Corners> = corners_for(coords, n, groups, (h, w), border).collect();
    for p in 0..n {
        for ch in 0..c {
            let cr = &corners[p * groups + ch % groups];
            let wt = cr.weights();
            let gv = g[p * c + ch];
            for (i, idx) in cr.idx.iter().enumerate() {
                if let Some(q) = idx {
                    gf[q * c + ch] += gv * wt[i];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward_coords(
    g: &[f64],
    f: &[f64],
    (h, w, c): (usize, usize, usize),
    coords: &[f64],
    n: usize,
    groups: usize,
    border: Border,
    sign: f64,
    gc: &mut [f64],
) {
    let corners: Vec<Corners> = corners_for(coords, n, groups, (h, w), border).collect();
    for p in 0..n {
        for ch in 0..c {
            let q = p * groups + ch % groups;
            let cr = &corners[q];
            let [v00, v01, v10, v11] = cr.values(f, c, ch);
            let (wy, wx) = (cr.wy, cr.wx);
            let gv = g[p * c + ch] * sign;
            gc[2 * q] += gv * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
            gc[2 * q + 1] += gv * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
        }
    }
}

/// One output sample of a 1-D linear resize: `(1 − w)·x[i0] + w·x[i1]`.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w: f64,
}

/// Half-pixel linear resize taps from `n_in` to `n_out` samples.
pub fn resize_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                w: src - i0 as f64,
            }
        })
        .collect()
}

pub fn resize_forward(
    x: &[f64],
    (_h, w, c): (usize, usize, usize),
    rows: &[Tap],
    cols: &[Tap],
) -> Vec<f64> {
    let ow = cols.len();
    let mut out = vec![0.0; rows.len() * ow * c];
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, cx) in cols.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let at = |y: usize, xx: usize| (y * w + xx) * c;
            let (a, b, d, e) = (at(ry.i0, cx.i0), at(ry.i0, cx.i1), at(ry.i1, cx.i0), at(ry.i1, cx.i1));
            let (w00, w01) = ((1.0 - ry.w) * (1.0 - cx.w), (1.0 - ry.w) * cx.w);
            let (w10, w11) = (ry.w * (1.0 - cx.w), ry.w * cx.w);
            for ch in 0..c {
                out[o + ch] =
                    x[a + ch] * w00 + x[b + ch] * w01 + x[d + ch] * w10 + x[e + ch] * w11;
            }
        }
    }
    out
}

pub fn resize_backward(
    g: &[f64],
    (_h, w, c): (usize, usize, usize),
    rows: &[Tap],
    cols: &[Tap],
    gx: &mut [f64],
) {
    let ow = cols.len();
    for (oy, ry) in rows.iter().enumerate() {
        for (ox, cx) in cols.iter().enumerate() {
            let o = (oy * ow + ox) * c;
            let at = |y: usize, xx: usize| (y * w + xx) * c;
            let (w00, w01) = ((1.0 - ry.w) * (1.0 - cx.w), (1.0 - ry.w) * cx.w);
            let (w10, w11) = (ry.w * (1.0 - cx.w), ry.w * cx.w);
            for (base, wt) in [
                (at(ry.i0, cx.i0), w00),
                (at(ry.i0, cx.i1), w01),
                (at(ry.i1, cx.i0), w10),
                (at(ry.i1, cx.i1), w11),
            ] {
                for ch in 0..c {
                    gx[base + ch] += g[o + ch] * wt;
                }
            }
        }
    }
}
