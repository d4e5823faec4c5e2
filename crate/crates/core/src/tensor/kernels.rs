//! Raw numeric kernels on flat row-major slices.
//!
//! These carry no autodiff bookkeeping; the tape and the frozen detector
//! both call into them.

/// Strided matrix view used by [`gemm`].
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            offset: 0,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }

    /// Column block `[c0, c0 + n)` of the matrix.
    pub fn cols(self, c0: usize, n: usize) -> Self {
        debug_assert!(c0 + n <= self.cols);
        MatRef {
            offset: self.offset + (c0 as isize * self.col_stride) as usize,
            cols: n,
            ..self
        }
    }

    /// Row block `[r0, r0 + n)` of the matrix.
    pub fn rows(self, r0: usize, n: usize) -> Self {
        debug_assert!(r0 + n <= self.rows);
        MatRef {
            offset: self.offset + (r0 as isize * self.row_stride) as usize,
            rows: n,
            ..self
        }
    }
}

/// Destination of [`gemm`]: a strided block of a mutable buffer.
pub struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], cols: usize) -> Self {
        MatMut {
            data,
            offset: 0,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner extent");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    // bounds of the strided regions
    check_extent(a.data.len(), a.offset, m, k, a.row_stride, a.col_stride);
    check_extent(b.data.len(), b.offset, k, n, b.row_stride, b.col_stride);
    check_extent(c.data.len(), c.offset, m, n, c.row_stride, c.col_stride);
    // SAFETY: all three regions were bounds-checked above; `c` is a unique
    // borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr().add(b.offset),
            b.row_stride,
            b.col_stride,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.row_stride,
            c.col_stride,
        );
    }
}

fn check_extent(len: usize, offset: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    if rows == 0 || cols == 0 {
        return;
    }
    let last = offset + (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds");
}

/// Plain row-major product `[m,k] @ [k,n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(
        1.0,
        MatRef::new(a, m, k),
        MatRef::new(b, k, n),
        0.0,
        MatMut::new(&mut out, n),
    );
    out
}

/// One of the four neighbours touched by a bilinear read.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    /// Flat `y * w + x` index, `None` when outside the map.
    pub index: Option<usize>,
    pub weight: f64,
    /// d weight / d x
    pub dx: f64,
    /// d weight / d y
    pub dy: f64,
}

/// Bilinear taps for the continuous pixel coordinate `(x, y)` on an `h x w`
/// grid where pixel `i` covers `[i, i + 1)` and has its centre at `i + 0.5`.
#[inline]
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [Tap; 4] {
    let u = x - 0.5;
    let v = y - 0.5;
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as i64;
    let y0 = y0f as i64;
    let at = |xi: i64, yi: i64| -> Option<usize> {
        if xi >= 0 && yi >= 0 && (xi as usize) < w && (yi as usize) < h {
            Some(yi as usize * w + xi as usize)
        } else {
            None
        }
    };
    [
        Tap {
            index: at(x0, y0),
            weight: (1.0 - fx) * (1.0 - fy),
            dx: -(1.0 - fy),
            dy: -(1.0 - fx),
        },
        Tap {
            index: at(x0 + 1, y0),
            weight: fx * (1.0 - fy),
            dx: 1.0 - fy,
            dy: -fx,
        },
        Tap {
            index: at(x0, y0 + 1),
            weight: (1.0 - fx) * fy,
            dx: -fy,
            dy: 1.0 - fx,
        },
        Tap {
            index: at(x0 + 1, y0 + 1),
            weight: fx * fy,
            dx: fy,
            dy: fx,
        },
    ]
}

/// Bilinear read of a single `h x w` plane with zero padding.
#[inline]
pub fn bilinear_read(plane: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    bilinear_taps(x, y, h, w)
        .iter()
        .filter_map(|t| t.index.map(|i| t.weight * plane[i]))
        .sum()
}

/// Sample positions used to resample an `in_h x in_w` grid to
/// `out_h x out_w`: output pixel centres mapped back onto the input and
/// clamped to the hull of input pixel centres (edge-replicate behaviour).
pub fn resize_points(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sx = in_w as f64 / out_w as f64;
    let sy = in_h as f64 / out_h as f64;
    let mut pts = Vec::with_capacity(out_h * out_w * 2);
    for i in 0..out_h {
        let y = ((i as f64 + 0.5) * sy).clamp(0.5, in_h as f64 - 0.5);
        for j in 0..out_w {
            let x = ((j as f64 + 0.5) * sx).clamp(0.5, in_w as f64 - 0.5);
            pts.push(x);
            pts.push(y);
        }
    }
    pts
}

/// Bilinear resize of a `[c, in_h, in_w]` buffer.
pub fn resize_bilinear(x: &[f64], c: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let pts = resize_points(in_h, in_w, out_h, out_w);
    let plane = in_h * in_w;
    let mut out = vec![0.0; c * out_h * out_w];
    for (p, xy) in pts.chunks_exact(2).enumerate() {
        let taps = bilinear_taps(xy[0], xy[1], in_h, in_w);
        for ch in 0..c {
            let src = &x[ch * plane..(ch + 1) * plane];
            let mut acc = 0.0;
            for t in &taps {
                if let Some(i) = t.index {
                    acc += t.weight * src[i];
                }
            }
            out[ch * out_h * out_w + p] = acc;
        }
    }
    out
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub depthwise: bool,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.stride >= 1 && self.h + 2 * self.pad >= self.kh && self.w + 2 * self.pad >= self.kw
    }
}

/// Column matrix `[cin*kh*kw, oh*ow]` for a dense convolution.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![0.0; g.cin * g.kh * g.kw * oh * ow];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * ow + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column matrix back onto the input layout.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation, zero padding).
pub fn conv2d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.cout * oh * ow];
    if g.depthwise {
        for c in 0..g.cin {
            let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
            let ker = &k[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                acc += ker[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    } else {
        let cols = im2col(x, g);
        let kk = g.cin * g.kh * g.kw;
        gemm(
            1.0,
            MatRef::new(k, g.cout, kk),
            MatRef::new(&cols, kk, oh * ow),
            0.0,
            MatMut::new(&mut out, oh * ow),
        );
    }
    if let Some(b) = bias {
        for (c, &bv) in b.iter().enumerate() {
            out[c * oh * ow..(c + 1) * oh * ow]
                .iter_mut()
                .for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let db: Vec<f64> = (0..g.cout)
        .map(|c| dout[c * oh * ow..(c + 1) * oh * ow].iter().sum())
        .collect();
    if g.depthwise {
        let mut dx = want_dx.then(|| vec![0.0; x.len()]);
        let mut dk = want_dk.then(|| vec![0.0; k.len()]);
        for c in 0..g.cin {
            let plane = c * g.h * g.w;
            let kbase = c * g.kh * g.kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = dout[c * oh * ow + oy * ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = plane + iy as usize * g.w + ix as usize;
                            let ki = kbase + ky * g.kw + kx;
                            if let Some(dx) = dx.as_mut() {
                                dx[xi] += k[ki] * go;
                            }
                            if let Some(dk) = dk.as_mut() {
                                dk[ki] += x[xi] * go;
                            }
                        }
                    }
                }
            }
        }
        return (dx, dk, db);
    }
    let kk = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let dk = want_dk.then(|| {
        let mut dk = vec![0.0; k.len()];
        gemm(
            1.0,
            MatRef::new(dout, g.cout, oh * ow),
            MatRef::new(&cols, kk, oh * ow).t(),
            0.0,
            MatMut::new(&mut dk, kk),
        );
        dk
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; kk * oh * ow];
        gemm(
            1.0,
            MatRef::new(k, g.cout, kk).t(),
            MatRef::new(dout, g.cout, oh * ow),
            0.0,
            MatMut::new(&mut dcols, oh * ow),
        );
        let mut dx = vec![0.0; x.len()];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dk, db)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// GELU in its tanh form, evaluated as `x * sigmoid(2u)` which is the same
/// function and avoids libm `tanh`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(2.0 * GELU_C * (x + 0.044715 * x * x * x));
    s + x * s * (1.0 - s) * 2.0 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
