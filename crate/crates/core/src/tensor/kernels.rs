//! Raw numeric kernels shared by the graph ops: broadcasting, GEMM, im2col.

/// Output shape of a numpy-style broadcast, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every element of `out_shape` (row-major), the flat offset of the
/// element of `in_shape` it reads under broadcasting.
pub fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let lead = n - in_shape.len();
    // Strides of the input, expressed on output axes; zero on broadcast axes.
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[lead + i] = acc;
        }
        acc *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; n];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for ax in (0..n).rev() {
            index[ax] += 1;
            off += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    offsets
}

/// Walk of a broadcast row by row along the last output axis.
struct RowPlan {
    inner: usize,
    /// Input offset of the first element of each output row.
    bases: Vec<usize>,
    /// Input step along the last axis: 1, or 0 when it is broadcast.
    stride: usize,
}

fn row_plan(out_shape: &[usize], in_shape: &[usize]) -> RowPlan {
    let n = out_shape.len();
    if n == 0 {
        return RowPlan {
            inner: 1,
            bases: vec![0],
            stride: 0,
        };
    }
    let mut padded = vec![1usize; n - in_shape.len()];
    padded.extend_from_slice(in_shape);
    let last = padded[n - 1];
    let bases = broadcast_offsets(&out_shape[..n - 1], &padded[..n - 1])
        .into_iter()
        .map(|o| o * last)
        .collect();
    RowPlan {
        inner: out_shape[n - 1],
        bases,
        stride: usize::from(last != 1),
    }
}

/// `f(a_i, b_i)` over the broadcast of `a` and `b` onto `out_shape`.
pub fn broadcast_zip<F: Fn(f64, f64) -> f64>(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: F,
) -> Vec<f64> {
    if a_shape == out_shape && b_shape == out_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let pa = row_plan(out_shape, a_shape);
    let pb = row_plan(out_shape, b_shape);
    let inner = pa.inner;
    let mut out = Vec::with_capacity(pa.bases.len() * inner);
    for (&ra, &rb) in pa.bases.iter().zip(&pb.bases) {
        match (pa.stride, pb.stride) {
            (1, 1) => out.extend(a[ra..ra + inner].iter().zip(&b[rb..rb + inner]).map(|(&x, &y)| f(x, y))),
            (1, _) => {
                let y = b[rb];
                out.extend(a[ra..ra + inner].iter().map(|&x| f(x, y)));
            }
            (_, 1) => {
                let x = a[ra];
                out.extend(b[rb..rb + inner].iter().map(|&y| f(x, y)));
            }
            _ => {
                let v = f(a[ra], b[rb]);
                out.extend(std::iter::repeat(v).take(inner));
            }
        }
    }
    out
}

/// Sum a gradient laid out over `out_shape` down to `in_shape`.
pub fn reduce_to(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let mut acc = vec![0.0; in_shape.iter().product()];
    let plan = row_plan(out_shape, in_shape);
    let inner = plan.inner;
    for (r, &base) in plan.bases.iter().enumerate() {
        let row = &grad[r * inner..(r + 1) * inner];
        if plan.stride == 1 {
            for (a, g) in acc[base..base + inner].iter_mut().zip(row) {
                *a += g;
            }
        } else {
            acc[base] += row.iter().sum::<f64>();
        }
    }
    acc
}

/// `(outer, extent, inner)` factorisation of a shape around `axis`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Strided view of a row-major matrix operand, optionally transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// View of the transpose: `rows`/`cols` describe the stored matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: true,
        }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.cols as isize)
        } else {
            (self.rows, self.cols, self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` where `c` is a row-major `m×n` buffer.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (m, k, ars, acs) = a.logical();
    let (k2, n, brs, bcs) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(c.len(), m * n, "gemm output size");
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias the read-only inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            ars,
            acs,
            b.data.as_ptr(),
            brs,
            bcs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a single image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.padding;
        let pw = self.width + 2 * self.padding;
        if self.kernel == 0 || self.stride == 0 || ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfold one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw().expect("valid geometry");
    let k = g.kernel;
    let plane = ho * wo;
    debug_assert_eq!(cols.len(), g.col_rows() * plane);
    for c in 0..g.channels {
        let img = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &img[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = ox_range(g, kj, wo);
                    line[..lo].iter_mut().for_each(|v| *v = 0.0);
                    line[hi..].iter_mut().for_each(|v| *v = 0.0);
                    let first = lo * g.stride + kj - g.padding;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (n, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[first + n * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kj` lands inside the image row.
fn ox_range(g: ConvGeom, kj: usize, wo: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).div_ceil(g.stride).min(wo);
    let hi = if g.width + g.padding > kj {
        ((g.width + g.padding - kj - 1) / g.stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Adjoint of [`im2col`]: scatter-add columns back into a `C×H×W` buffer.
pub fn col2im(cols: &[f64], g: ConvGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw().expect("valid geometry");
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..g.channels {
        let img = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut img[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let (lo, hi) = ox_range(g, kj, wo);
                    let first = lo * g.stride + kj - g.padding;
                    for (n, v) in src[oy * wo + lo..oy * wo + hi].iter().enumerate() {
                        dst[first + n * g.stride] += v;
                    }
                }
            }
        }
    }
}
