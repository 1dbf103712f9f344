//! Layer primitives with explicit reverse passes.

#[inline]
fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[inline]
pub fn silu(a: f64) -> f64 {
    a * sigmoid(a)
}

#[inline]
pub fn silu_grad(a: f64) -> f64 {
    let s = sigmoid(a);
    s * (1.0 + a * (1.0 - s))
}

/// `y = W x + b`, `W` row-major `[out, in]`.
pub fn linear(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    b.iter()
        .zip(w.chunks_exact(n_in))
        .map(|(bo, row)| bo + dot(row, x))
        .collect()
}

/// Dot product with four interleaved partial sums, so the compiler can
/// vectorize it while the summation order stays fixed.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Reverse of [`linear`]: accumulates `dW`, `db` and returns `dx` when asked.
pub fn linear_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] += g;
        if g != 0.0 {
            for (d, xi) in dw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *d += g * xi;
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g != 0.0 {
                for (d, wi) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *d += g * wi;
                }
            }
        }
        dx
    })
}

/// Geometry of a 3x3, padding-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h - 1) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w - 1) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * 9
    }

    fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold `[c_in, h, w]` into `[c_in * 9, out_h * out_w]`.
pub fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let mut cols = vec![0.0; g.c_in * 9 * n];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 9) + ky * 3 + kx) * n..((c * 9) + ky * 3 + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `out[m, n] += a[m, k] b[k, n]`, row-major. Four output rows are updated
/// per pass over a row of `b`. Each output element accumulates over `k` in
/// increasing order, so the result does not depend on the blocking.
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut rows = out.chunks_exact_mut(n);
    let mut r = 0;
    while r + 4 <= m {
        let (d0, d1, d2, d3) = (
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
            rows.next().expect("row"),
        );
        for ki in 0..k {
            let (w0, w1, w2, w3) = (
                a[r * k + ki],
                a[(r + 1) * k + ki],
                a[(r + 2) * k + ki],
                a[(r + 3) * k + ki],
            );
            let src = &b[ki * n..(ki + 1) * n];
            let (d0, d1, d2, d3) = (&mut d0[..n], &mut d1[..n], &mut d2[..n], &mut d3[..n]);
            for j in 0..n {
                let c = src[j];
                d0[j] += w0 * c;
                d1[j] += w1 * c;
                d2[j] += w2 * c;
                d3[j] += w3 * c;
            }
        }
        r += 4;
    }
    for (off, dst) in rows.enumerate() {
        let row = r + off;
        for ki in 0..k {
            let wv = a[row * k + ki];
            for (d, c) in dst.iter_mut().zip(&b[ki * n..(ki + 1) * n]) {
                *d += wv * c;
            }
        }
    }
}

/// Fold column gradients back onto the input grid.
fn col2im(g: &ConvGeom, dcols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    let mut dx = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[((c * 9) + ky * 3 + kx) * n..((c * 9) + ky * 3 + kx + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, s) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Convolution forward. Returns `[c_out, out_h, out_w]` and the unfolded
/// input, which the reverse pass needs.
pub fn conv2d(g: &ConvGeom, w: &[f64], b: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(g, x);
    let n = g.cols();
    let k = g.c_in * 9;
    let mut out = vec![0.0; g.c_out * n];
    for (co, dst) in out.chunks_exact_mut(n).enumerate() {
        dst.fill(b[co]);
    }
    gemm_acc(&w[..g.c_out * k], &cols, &mut out, g.c_out, k, n);
    (out, cols)
}

pub fn conv2d_backward(
    g: &ConvGeom,
    w: &[f64],
    cols: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    want_dx: bool,
) -> Option<Vec<f64>> {
    let n = g.cols();
    let k = g.c_in * 9;
    for co in 0..g.c_out {
        let gy = &dy[co * n..(co + 1) * n];
        db[co] += gy.iter().sum::<f64>();
        for ki in 0..k {
            dw[co * k + ki] += dot(gy, &cols[ki * n..(ki + 1) * n]);
        }
    }
    want_dx.then(|| {
        let mut dcols = vec![0.0; k * n];
        // dcols = W^T dy, with W^T materialized so the same kernel applies.
        let mut wt = vec![0.0; k * g.c_out];
        for co in 0..g.c_out {
            for ki in 0..k {
                wt[ki * g.c_out + co] = w[co * k + ki];
            }
        }
        gemm_acc(&wt, dy, &mut dcols, k, g.c_out, n);
        col2im(g, &dcols)
    })
}

/// Nearest-neighbour 2x upsampling of `[c, h, w]`.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * 4 * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[(ch * 2 * h + y) * 2 * w + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dx[(ch * h + y / 2) * w + xx / 2] += dy[(ch * 2 * h + y) * 2 * w + xx];
            }
        }
    }
    dx
}
