use super::strides_of;

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> Mat<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Mat { data, rs: 1, cs: cols }
    }
}

/// `c = beta * c + a (m x k) * b (k x n)`, `c` row-major `m x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.data.len() > (m - 1) * a.rs + (k - 1) * a.cs);
        assert!(b.data.len() > (k - 1) * b.rs + (n - 1) * b.cs);
    }
    // SAFETY: bounds of every accessed element are checked by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let ohw = g.oh * g.ow;
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let ncols = g.col_cols();
    let ohw = g.oh * g.ow;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane_off = (n * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_off = plane_off + iy as usize * g.w;
                        let base = n * ohw + oy * g.ow;
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dx[row_off + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape` (row-major), the offset of the element of
/// `in_shape` it reads under broadcasting.
pub(crate) fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let in_strides = strides_of(in_shape);
    let mut strides = vec![0; rank];
    for i in 0..in_shape.len() {
        let oi = i + rank - in_shape.len();
        if in_shape[i] != 1 {
            strides[oi] = in_strides[i];
        }
    }
    strided_offsets(out_shape, &strides)
}

/// Offsets visited by a row-major walk over `shape` with custom `strides`.
pub(crate) fn strided_offsets(shape: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let mut out = Vec::with_capacity(total);
    if shape.is_empty() {
        out.push(0);
        return out;
    }
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let last = rank - 1;
    let (inner, inner_stride) = (shape[last], strides[last]);
    loop {
        for j in 0..inner {
            out.push(off + j * inner_stride);
        }
        // advance the outer odometer
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            off += strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}


/// Normalises consecutive chunks of `m` values; returns the output and the
/// inverse standard deviation of every chunk.
pub(crate) fn group_norm(x: &[f64], m: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv = Vec::with_capacity(x.len() / m);
    for (src, dst) in x.chunks(m).zip(y.chunks_mut(m)) {
        let mean = src.iter().sum::<f64>() / m as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (d, v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * s;
        }
        inv.push(s);
    }
    (y, inv)
}
