//! Differentiable operations. Shapes are checked with assertions: callers in
//! the model crates validate user-facing shapes before building a graph.

use std::rc::Rc;

use crate::gemm::gemm;
use crate::tape::Var;
use crate::tensor::Tensor;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'t> Var<'t> {
    fn unary(self, value: Tensor, deriv: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(value);
        let y_for_grad = Rc::clone(&y);
        self.tape().push_rc(y, &[self], move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(y_for_grad.data())
                .map(|((&gi, &xi), &yi)| gi * deriv(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape(), data))]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape().push(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape().push(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape().push(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gi, bi| gi * bi)),
                need[1].then(|| g.zip_map(&a, |gi, ai| gi * ai)),
            ]
        })
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x * s);
        self.tape()
            .push(out, &[self], move |g, _| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape().push(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'t> {
        let out = self.value().map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(out, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn tanh(self) -> Var<'t> {
        let out = self.value().map(f64::tanh);
        self.unary(out, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(self) -> Var<'t> {
        let out = self.value().map(logistic);
        self.unary(out, |_, y| y * (1.0 - y))
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape()
            .push(Tensor::scalar(x.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// L1 norm; the subgradient at zero is taken as zero.
    pub fn abs_sum(self) -> Var<'t> {
        let x = self.value();
        let total = x.data().iter().map(|v| v.abs()).sum();
        self.tape()
            .push(Tensor::scalar(total), &[self], move |g, _| {
                let gi = g.item();
                vec![Some(x.map(|v| {
                    if v > 0.0 {
                        gi
                    } else if v < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                }))]
            })
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let x = self.value();
        let from = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.tape().push(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&from))]
        })
    }

    /// Same value, no gradient path.
    pub fn detach(self) -> Var<'t> {
        self.tape().constant((*self.value()).clone())
    }

    /// `(B, C) ⊙ (C)` broadcast over rows.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (x, r) = (self.value(), row.value());
        let (b, c) = x.dims2();
        assert_eq!(r.len(), c, "mul_row: row length mismatch");
        let mut out = Tensor::zeros(&[b, c]);
        for i in 0..b {
            for j in 0..c {
                out.data_mut()[i * c + j] = x.data()[i * c + j] * r.data()[j];
            }
        }
        let r_shape = r.shape().to_vec();
        self.tape().push(out, &[self, row], move |g, need| {
            let dx = need[0].then(|| {
                let mut d = Tensor::zeros(&[b, c]);
                for i in 0..b {
                    for j in 0..c {
                        d.data_mut()[i * c + j] = g.data()[i * c + j] * r.data()[j];
                    }
                }
                d
            });
            let dr = need[1].then(|| {
                let mut d = vec![0.0; c];
                for i in 0..b {
                    for (j, dj) in d.iter_mut().enumerate() {
                        *dj += g.data()[i * c + j] * x.data()[i * c + j];
                    }
                }
                Tensor::new(&r_shape, d)
            });
            vec![dx, dr]
        })
    }

    /// Columns `[start, start+len)` of a `(B, N)` matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let x = self.value();
        let (b, n) = x.dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let mut out = Vec::with_capacity(b * len);
        for i in 0..b {
            out.extend_from_slice(&x.data()[i * n + start..i * n + start + len]);
        }
        self.tape()
            .push(Tensor::new(&[b, len], out), &[self], move |g, _| {
                let mut d = Tensor::zeros(&[b, n]);
                for i in 0..b {
                    d.data_mut()[i * n + start..i * n + start + len]
                        .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
                }
                vec![Some(d)]
            })
    }

    /// Softmax over all entries of a vector.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let y = softmax_slice(x.data());
        let y_t = Tensor::new(x.shape(), y.clone());
        self.tape().push(y_t, &[self], move |g, _| {
            let dot: f64 = g.data().iter().zip(&y).map(|(a, b)| a * b).sum();
            let d = y
                .iter()
                .zip(g.data())
                .map(|(&yi, &gi)| yi * (gi - dot))
                .collect();
            vec![Some(Tensor::new(g.shape(), d))]
        })
    }
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Sum of elementwise products, as a scalar node.
pub fn dot<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.mul(b).sum()
}

/// `x (B, I) · w (I, O) + bias (O)`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let (xv, wv, bv) = (x.value(), w.value(), bias.value());
    let (b, i) = xv.dims2();
    let (wi, o) = wv.dims2();
    assert_eq!(i, wi, "linear: inner dimension mismatch");
    assert_eq!(bv.len(), o, "linear: bias length mismatch");
    let mut out = vec![0.0; b * o];
    for r in 0..b {
        out[r * o..(r + 1) * o].copy_from_slice(bv.data());
    }
    gemm(b, i, o, xv.data(), i, 1, wv.data(), o, 1, 1.0, &mut out);
    x.tape()
        .push(Tensor::new(&[b, o], out), &[x, w, bias], move |g, need| {
            let dx = need[0].then(|| {
                let mut d = vec![0.0; b * i];
                // g (B,O) · w^T (O,I)
                gemm(b, o, i, g.data(), o, 1, wv.data(), 1, o, 0.0, &mut d);
                Tensor::new(&[b, i], d)
            });
            let dw = need[1].then(|| {
                let mut d = vec![0.0; i * o];
                // x^T (I,B) · g (B,O)
                gemm(i, b, o, xv.data(), 1, i, g.data(), o, 1, 0.0, &mut d);
                Tensor::new(&[i, o], d)
            });
            let db = need[2].then(|| {
                let mut d = vec![0.0; o];
                for r in 0..b {
                    for (k, dk) in d.iter_mut().enumerate() {
                        *dk += g.data()[r * o + k];
                    }
                }
                Tensor::new(bv.shape(), d)
            });
            vec![dx, dw, db]
        })
}

/// Destination columns `[lo, hi)` of a row shifted by `dx` that map to
/// valid source columns.
fn valid_span(w: usize, dx: isize) -> (usize, usize) {
    let lo = (-dx).max(0) as usize;
    let hi = (w as isize - dx.max(0)).max(0) as usize;
    (lo.min(w), hi.max(lo.min(w)))
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = k as isize / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                let row =
                    &mut col[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let s0 = (lo as isize + dx) as usize;
                    dst[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = k as isize / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (lo, hi) = valid_span(w, dx);
                let row = &col[((ci * k + ky) * k + kx) * hw..((ci * k + ky) * k + kx + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (lo as isize + dx) as usize;
                    let dst = &mut x
                        [ci * hw + sy as usize * w + s0..ci * hw + sy as usize * w + s0 + hi - lo];
                    for (d, v) in dst.iter_mut().zip(&row[y * w + lo..y * w + hi]) {
                        *d += v;
                    }
                }
            }
        }
    }
}

const LANES: usize = 8;

/// Copy `(C, H, W)` into a zero-bordered `(C, H+2, W+2)` buffer.
fn pad1(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let src = &x[(ci * h + y) * w..(ci * h + y + 1) * w];
            let dst = (ci * ph + y + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

/// 3×3 convolution of one padded sample `xp (C, H+2, W+2)` accumulated into
/// `out (O, H, W)`. Output rows are produced in register-sized chunks.
fn conv3_padded(xp: &[f64], wt: &[f64], c: usize, o: usize, h: usize, w: usize, out: &mut [f64]) {
    let (ph, pw) = (h + 2, w + 2);
    let plane = ph * pw;
    for oi in 0..o {
        let wo = &wt[oi * c * 9..(oi + 1) * c * 9];
        for y in 0..h {
            let orow = &mut out[(oi * h + y) * w..(oi * h + y + 1) * w];
            let full = w / LANES * LANES;
            for x0 in (0..full).step_by(LANES) {
                let mut acc = [0.0f64; LANES];
                for ci in 0..c {
                    let wk = &wo[ci * 9..ci * 9 + 9];
                    for ky in 0..3 {
                        let start = ci * plane + (y + ky) * pw + x0;
                        let r = &xp[start..start + LANES + 2];
                        let (w0, w1, w2) = (wk[ky * 3], wk[ky * 3 + 1], wk[ky * 3 + 2]);
                        for t in 0..LANES {
                            acc[t] += w0 * r[t] + w1 * r[t + 1] + w2 * r[t + 2];
                        }
                    }
                }
                for (d, a) in orow[x0..x0 + LANES].iter_mut().zip(&acc) {
                    *d += a;
                }
            }
            for x in full..w {
                let mut acc = 0.0;
                for ci in 0..c {
                    let wk = &wo[ci * 9..ci * 9 + 9];
                    for ky in 0..3 {
                        let r = &xp[ci * plane + (y + ky) * pw + x..];
                        acc += wk[ky * 3] * r[0] + wk[ky * 3 + 1] * r[1] + wk[ky * 3 + 2] * r[2];
                    }
                }
                orow[x] += acc;
            }
        }
    }
}

/// `dw (O, C, 3, 3) += Σ g ⊗ shifted xp` for one padded sample.
fn conv3_weight_grad(
    xp: &[f64],
    g: &[f64],
    c: usize,
    o: usize,
    h: usize,
    w: usize,
    dw: &mut [f64],
) {
    let (ph, pw) = (h + 2, w + 2);
    let plane = ph * pw;
    let full = w / LANES * LANES;
    for oi in 0..o {
        for ci in 0..c {
            let mut acc = [[0.0f64; LANES]; 9];
            for y in 0..h {
                let grow = &g[(oi * h + y) * w..(oi * h + y + 1) * w];
                for x0 in (0..full).step_by(LANES) {
                    let gv = &grow[x0..x0 + LANES];
                    for ky in 0..3 {
                        let start = ci * plane + (y + ky) * pw + x0;
                        let r = &xp[start..start + LANES + 2];
                        for kx in 0..3 {
                            let a = &mut acc[ky * 3 + kx];
                            for t in 0..LANES {
                                a[t] += gv[t] * r[t + kx];
                            }
                        }
                    }
                }
                for x in full..w {
                    for ky in 0..3 {
                        let r = &xp[ci * plane + (y + ky) * pw + x..];
                        for kx in 0..3 {
                            acc[ky * 3 + kx][0] += grow[x] * r[kx];
                        }
                    }
                }
            }
            let base = (oi * c + ci) * 9;
            for (d, lanes) in dw[base..base + 9].iter_mut().zip(&acc) {
                *d += lanes.iter().sum::<f64>();
            }
        }
    }
}

/// Weights for the input gradient: channels swapped, kernel flipped.
fn flip3(wt: &[f64], c: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; wt.len()];
    for oi in 0..o {
        for ci in 0..c {
            for t in 0..9 {
                out[(ci * o + oi) * 9 + t] = wt[(oi * c + ci) * 9 + 8 - t];
            }
        }
    }
    out
}

/// Below this plane size im2col + gemm is faster than the row kernel.
const DIRECT_MIN_PLANE: usize = 512;

/// Stride-1 convolution with zero "same" padding and an odd square kernel.
/// `x (B, C, H, W)`, `weight (O, C, k, k)`, `bias (O)` → `(B, O, H, W)`.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let (xv, wv, bv) = (x.value(), weight.value(), bias.value());
    let (b, c, h, w) = xv.dims4();
    let (o, wc, k, k2) = wv.dims4();
    assert_eq!(c, wc, "conv2d: channel mismatch");
    assert!(
        k == k2 && k % 2 == 1,
        "conv2d: kernel must be odd and square"
    );
    assert_eq!(bv.len(), o, "conv2d: bias length mismatch");
    let hw = h * w;
    let ckk = c * k * k;
    let direct = k == 3 && hw >= DIRECT_MIN_PLANE;
    let mut out = vec![0.0; b * o * hw];
    let mut col = if k == 1 || direct {
        Vec::new()
    } else {
        vec![0.0; ckk * hw]
    };
    for bi in 0..b {
        let dst = &mut out[bi * o * hw..(bi + 1) * o * hw];
        for oi in 0..o {
            dst[oi * hw..(oi + 1) * hw].fill(bv.data()[oi]);
        }
        let src = xv.outer(bi);
        if direct {
            conv3_padded(&pad1(src, c, h, w), wv.data(), c, o, h, w, dst);
            continue;
        }
        let cols: &[f64] = if k == 1 {
            src
        } else {
            im2col(src, c, h, w, k, &mut col);
            &col
        };
        gemm(o, ckk, hw, wv.data(), ckk, 1, cols, hw, 1, 1.0, dst);
    }
    x.tape().push(
        Tensor::new(&[b, o, h, w], out),
        &[x, weight, bias],
        move |g, need| {
            let mut dx = need[0].then(|| vec![0.0; b * c * hw]);
            let mut dw = need[1].then(|| vec![0.0; o * ckk]);
            let db = need[2].then(|| {
                let mut d = vec![0.0; o];
                for bi in 0..b {
                    for (oi, di) in d.iter_mut().enumerate() {
                        *di += g.data()[(bi * o + oi) * hw..(bi * o + oi + 1) * hw]
                            .iter()
                            .sum::<f64>();
                    }
                }
                Tensor::new(&[o], d)
            });
            if direct {
                let flipped = flip3(wv.data(), c, o);
                for bi in 0..b {
                    let gb = g.outer(bi);
                    if let Some(dw) = dw.as_mut() {
                        conv3_weight_grad(&pad1(xv.outer(bi), c, h, w), gb, c, o, h, w, dw);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxb = &mut dx[bi * c * hw..(bi + 1) * c * hw];
                        conv3_padded(&pad1(gb, o, h, w), &flipped, o, c, h, w, dxb);
                    }
                }
                return vec![
                    dx.map(|d| Tensor::new(&[b, c, h, w], d)),
                    dw.map(|d| Tensor::new(&[o, c, k, k], d)),
                    db,
                ];
            }
            let mut col = if k == 1 {
                Vec::new()
            } else {
                vec![0.0; ckk * hw]
            };
            let mut dcol = if k == 1 {
                Vec::new()
            } else {
                vec![0.0; ckk * hw]
            };
            for bi in 0..b {
                let gb = g.outer(bi);
                if let Some(dw) = dw.as_mut() {
                    let src = xv.outer(bi);
                    let cols: &[f64] = if k == 1 {
                        src
                    } else {
                        im2col(src, c, h, w, k, &mut col);
                        &col
                    };
                    // g_b (O,HW) · cols^T (HW,CKK)
                    gemm(o, hw, ckk, gb, hw, 1, cols, 1, hw, 1.0, dw);
                }
                if let Some(dx) = dx.as_mut() {
                    let dxb = &mut dx[bi * c * hw..(bi + 1) * c * hw];
                    if k == 1 {
                        // w^T (C,O) · g_b (O,HW)
                        gemm(c, o, hw, wv.data(), 1, c, gb, hw, 1, 1.0, dxb);
                    } else {
                        gemm(ckk, o, hw, wv.data(), 1, ckk, gb, hw, 1, 0.0, &mut dcol);
                        col2im(&dcol, c, h, w, k, dxb);
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(&[b, c, h, w], d)),
                dw.map(|d| Tensor::new(&[o, c, k, k], d)),
                db,
            ]
        },
    )
}

/// 2×2 max pooling with stride 2; H and W must be even. Ties resolve to the
/// first maximum in row-major window order.
pub fn max_pool2<'t>(x: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4();
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "max_pool2: odd spatial size {h}x{w}"
    );
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; b * c * oh * ow];
    let mut arg = vec![0usize; b * c * oh * ow];
    for p in 0..b * c {
        let plane = &xv.data()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let mut best = 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (2 * y + dy) * w + 2 * xo + dx;
                    if plane[idx] > plane[best] {
                        best = idx;
                    }
                }
                let o = p * oh * ow + y * ow + xo;
                out[o] = plane[best];
                arg[o] = p * h * w + best;
            }
        }
    }
    x.tape()
        .push(Tensor::new(&[b, c, oh, ow], out), &[x], move |g, _| {
            let mut d = vec![0.0; b * c * h * w];
            for (gi, &a) in g.data().iter().zip(&arg) {
                d[a] += gi;
            }
            vec![Some(Tensor::new(&[b, c, h, w], d))]
        })
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<'t>(x: Var<'t>) -> Var<'t> {
    let xv = x.value();
    let (b, c, h, w) = xv.dims4();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; b * c * oh * ow];
    for p in 0..b * c {
        let src = &xv.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xo in 0..ow {
                dst[y * ow + xo] = src[(y / 2) * w + xo / 2];
            }
        }
    }
    x.tape()
        .push(Tensor::new(&[b, c, oh, ow], out), &[x], move |g, _| {
            let mut d = vec![0.0; b * c * h * w];
            for p in 0..b * c {
                let gp = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                let dp = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..oh {
                    for xo in 0..ow {
                        dp[(y / 2) * w + xo / 2] += gp[y * ow + xo];
                    }
                }
            }
            vec![Some(Tensor::new(&[b, c, h, w], d))]
        })
}

/// Channelwise affine map `γ ⊙ f + β` with per-sample `γ, β (B, C)`
/// broadcast over the spatial dimensions of `f (B, C, H, W)`.
pub fn modulate<'t>(f: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let (fv, gv, bv) = (f.value(), gamma.value(), beta.value());
    let (b, c, h, w) = fv.dims4();
    assert_eq!(gv.shape(), &[b, c], "modulate: gamma shape");
    assert_eq!(bv.shape(), &[b, c], "modulate: beta shape");
    let hw = h * w;
    let mut out = vec![0.0; b * c * hw];
    for p in 0..b * c {
        let (s, t) = (gv.data()[p], bv.data()[p]);
        for (o, &v) in out[p * hw..(p + 1) * hw]
            .iter_mut()
            .zip(&fv.data()[p * hw..(p + 1) * hw])
        {
            *o = s * v + t;
        }
    }
    f.tape().push(
        Tensor::new(&[b, c, h, w], out),
        &[f, gamma, beta],
        move |g, need| {
            let df = need[0].then(|| {
                let mut d = vec![0.0; b * c * hw];
                for p in 0..b * c {
                    let s = gv.data()[p];
                    for (di, &gi) in d[p * hw..(p + 1) * hw]
                        .iter_mut()
                        .zip(&g.data()[p * hw..(p + 1) * hw])
                    {
                        *di = s * gi;
                    }
                }
                Tensor::new(&[b, c, h, w], d)
            });
            let dgamma = need[1].then(|| {
                let d = (0..b * c)
                    .map(|p| {
                        g.data()[p * hw..(p + 1) * hw]
                            .iter()
                            .zip(&fv.data()[p * hw..(p + 1) * hw])
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                Tensor::new(&[b, c], d)
            });
            let dbeta = need[2].then(|| {
                let d = (0..b * c)
                    .map(|p| g.data()[p * hw..(p + 1) * hw].iter().sum())
                    .collect();
                Tensor::new(&[b, c], d)
            });
            vec![df, dgamma, dbeta]
        },
    )
}

/// Convex combination across the block axis: `blocks (B, K, N, D)`,
/// `weights (K)` → `(B, N, D)`.
pub fn weighted_block_sum<'t>(blocks: Var<'t>, weights: Var<'t>) -> Var<'t> {
    let (bv, wv) = (blocks.value(), weights.value());
    let (b, k, n, d) = bv.dims4();
    assert_eq!(wv.len(), k, "weighted_block_sum: weight count mismatch");
    let nd = n * d;
    let mut out = vec![0.0; b * nd];
    for bi in 0..b {
        let dst = &mut out[bi * nd..(bi + 1) * nd];
        for ki in 0..k {
            let pk = wv.data()[ki];
            let src = &bv.data()[(bi * k + ki) * nd..(bi * k + ki + 1) * nd];
            for (o, &s) in dst.iter_mut().zip(src) {
                *o += pk * s;
            }
        }
    }
    blocks.tape().push(
        Tensor::new(&[b, n, d], out),
        &[blocks, weights],
        move |g, need| {
            let dblocks = need[0].then(|| {
                let mut db = vec![0.0; b * k * nd];
                for bi in 0..b {
                    let gb = &g.data()[bi * nd..(bi + 1) * nd];
                    for ki in 0..k {
                        let pk = wv.data()[ki];
                        for (o, &gi) in db[(bi * k + ki) * nd..(bi * k + ki + 1) * nd]
                            .iter_mut()
                            .zip(gb)
                        {
                            *o = pk * gi;
                        }
                    }
                }
                Tensor::new(&[b, k, n, d], db)
            });
            let dweights = need[1].then(|| {
                let mut dw = vec![0.0; k];
                for bi in 0..b {
                    let gb = &g.data()[bi * nd..(bi + 1) * nd];
                    for (ki, dk) in dw.iter_mut().enumerate() {
                        let src = &bv.data()[(bi * k + ki) * nd..(bi * k + ki + 1) * nd];
                        *dk += src.iter().zip(gb).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                Tensor::new(wv.shape(), dw)
            });
            vec![dblocks, dweights]
        },
    )
}

/// Softmax attention pooling over tokens: `tokens (B, N, D)`, scoring
/// vector `w (D)`. Returns the pooled `(B, D)` node and the attention
/// weights `(B, N)` as a plain tensor.
pub fn attention_pool<'t>(tokens: Var<'t>, w: Var<'t>) -> (Var<'t>, Tensor) {
    let (fv, wv) = (tokens.value(), w.value());
    let shape = fv.shape().to_vec();
    assert_eq!(shape.len(), 3, "attention_pool: tokens must be (B, N, D)");
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    assert_eq!(
        wv.len(),
        d,
        "attention_pool: scoring vector length mismatch"
    );
    let mut attn = vec![0.0; b * n];
    let mut pooled = vec![0.0; b * d];
    for bi in 0..b {
        let f = &fv.data()[bi * n * d..(bi + 1) * n * d];
        let scores: Vec<f64> = (0..n)
            .map(|j| {
                f[j * d..(j + 1) * d]
                    .iter()
                    .zip(wv.data())
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let a = softmax_slice(&scores);
        let g = &mut pooled[bi * d..(bi + 1) * d];
        for (j, &aj) in a.iter().enumerate() {
            for (gi, &t) in g.iter_mut().zip(&f[j * d..(j + 1) * d]) {
                *gi += aj * t;
            }
        }
        attn[bi * n..(bi + 1) * n].copy_from_slice(&a);
    }
    let attn_t = Tensor::new(&[b, n], attn.clone());
    let out = tokens.tape().push(
        Tensor::new(&[b, d], pooled),
        &[tokens, w],
        move |g, need| {
            let mut df = need[0].then(|| vec![0.0; b * n * d]);
            let mut dw = need[1].then(|| vec![0.0; d]);
            for bi in 0..b {
                let f = &fv.data()[bi * n * d..(bi + 1) * n * d];
                let a = &attn[bi * n..(bi + 1) * n];
                let gb = &g.data()[bi * d..(bi + 1) * d];
                let da: Vec<f64> = (0..n)
                    .map(|j| {
                        f[j * d..(j + 1) * d]
                            .iter()
                            .zip(gb)
                            .map(|(x, y)| x * y)
                            .sum()
                    })
                    .collect();
                let mean_da: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                let ds: Vec<f64> = a
                    .iter()
                    .zip(&da)
                    .map(|(&aj, &daj)| aj * (daj - mean_da))
                    .collect();
                if let Some(df) = df.as_mut() {
                    let dfb = &mut df[bi * n * d..(bi + 1) * n * d];
                    for j in 0..n {
                        for k in 0..d {
                            dfb[j * d + k] = a[j] * gb[k] + ds[j] * wv.data()[k];
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    for j in 0..n {
                        for (k, dwk) in dw.iter_mut().enumerate() {
                            *dwk += ds[j] * f[j * d + k];
                        }
                    }
                }
            }
            vec![
                df.map(|v| Tensor::new(&[b, n, d], v)),
                dw.map(|v| Tensor::new(wv.shape(), v)),
            ]
        },
    );
    (out, attn_t)
}

/// Per-sample mean binary cross-entropy computed from logits, with the
/// probability clamped to `[eps, 1 - eps]`. The gradient through a clamped
/// pixel is zero. `logits` has leading batch axis; `target` matches it.
pub fn bce_with_logits_per_sample<'t>(logits: Var<'t>, target: &Tensor, eps: f64) -> Var<'t> {
    let z = logits.value();
    assert_eq!(z.shape(), target.shape(), "bce: shape mismatch");
    let b = z.shape()[0];
    let per = z.len() / b;
    let mut out = vec![0.0; b];
    let mut dz = vec![0.0; z.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in i * per..(i + 1) * per {
            let p = logistic(z.data()[j]);
            let y = target.data()[j];
            let pc = p.clamp(eps, 1.0 - eps);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            dz[j] = if p > eps && p < 1.0 - eps {
                (p - y) / per as f64
            } else {
                0.0
            };
        }
        *o = acc / per as f64;
    }
    let shape = z.shape().to_vec();
    logits
        .tape()
        .push(Tensor::new(&[b], out), &[logits], move |g, _| {
            let mut d = dz.clone();
            for (i, &gi) in g.data().iter().enumerate() {
                for v in &mut d[i * per..(i + 1) * per] {
                    *v *= gi;
                }
            }
            vec![Some(Tensor::new(&shape, d))]
        })
}

/// Per-sample mean of `(σ(a/τ) − σ(b/τ))²`.
pub fn kd_per_sample<'t>(a: Var<'t>, b: Var<'t>, tau: f64) -> Var<'t> {
    let (av, bv) = (a.value(), b.value());
    same_shape(&av, &bv, "kd");
    let n = av.shape()[0];
    let per = av.len() / n;
    let qa: Vec<f64> = av.data().iter().map(|&z| logistic(z / tau)).collect();
    let qb: Vec<f64> = bv.data().iter().map(|&z| logistic(z / tau)).collect();
    let out: Vec<f64> = (0..n)
        .map(|i| {
            (i * per..(i + 1) * per)
                .map(|j| (qa[j] - qb[j]).powi(2))
                .sum::<f64>()
                / per as f64
        })
        .collect();
    let shape = av.shape().to_vec();
    a.tape()
        .push(Tensor::new(&[n], out), &[a, b], move |g, need| {
            let grad_for = |sign: f64, q: &[f64]| {
                let d = (0..n * per)
                    .map(|j| {
                        let gi = g.data()[j / per];
                        sign * gi * 2.0 * (qa[j] - qb[j]) * q[j] * (1.0 - q[j]) / (tau * per as f64)
                    })
                    .collect();
                Tensor::new(&shape, d)
            };
            vec![
                need[0].then(|| grad_for(1.0, &qa)),
                need[1].then(|| grad_for(-1.0, &qb)),
            ]
        })
}

/// Batch-normalised softmax weights `w_i = exp(α_c(i)) / mean_k exp(α_c(k))`
/// for cluster `assignments` of the batch members.
pub fn batch_softmax_weights<'t>(alpha: Var<'t>, assignments: &[usize]) -> Var<'t> {
    let av = alpha.value();
    let k = av.len();
    assert!(
        assignments.iter().all(|&c| c < k),
        "batch weights: cluster index out of range"
    );
    let bsz = assignments.len();
    let m = assignments
        .iter()
        .map(|&c| av.data()[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = assignments
        .iter()
        .map(|&c| (av.data()[c] - m).exp())
        .collect();
    let s: f64 = e.iter().sum();
    let w: Vec<f64> = e.iter().map(|&v| bsz as f64 * v / s).collect();
    let mut share = vec![0.0; k];
    for (&c, &v) in assignments.iter().zip(&e) {
        share[c] += v / s;
    }
    let assign = assignments.to_vec();
    let a_shape = av.shape().to_vec();
    let w_out = w.clone();
    alpha
        .tape()
        .push(Tensor::new(&[bsz], w_out), &[alpha], move |g, _| {
            let gw: f64 = g.data().iter().zip(&w).map(|(a, b)| a * b).sum();
            let mut d: Vec<f64> = share.iter().map(|s| -gw * s).collect();
            for ((&c, &gi), &wi) in assign.iter().zip(g.data()).zip(&w) {
                d[c] += gi * wi;
            }
            vec![Some(Tensor::new(&a_shape, d))]
        })
}
