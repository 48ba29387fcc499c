//! Same-padded, stride-1, dilated 3D convolution on contiguous channel blocks.
//!
//! The volume is processed in slabs of whole rows. For each slab the shifted
//! input windows of every (channel, tap) pair are gathered into a column
//! matrix `(C_in * taps, slab)`, so one matrix product with the
//! `(C_out, C_in * taps)` weight matrix produces the slab's output.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Geometry {
    pub fn voxels(&self) -> usize {
        self.d * self.h * self.w
    }

    pub fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    /// Spatial offset `(dz, dy, dx)` of tap `t`.
    fn offset(&self, t: usize) -> [isize; 3] {
        let k = self.k;
        let half = (k / 2) as isize;
        let dil = self.dilation as isize;
        let (tz, ty, tx) = (t / (k * k), (t / k) % k, t % k);
        [
            (tz as isize - half) * dil,
            (ty as isize - half) * dil,
            (tx as isize - half) * dil,
        ]
    }
}

/// Target size of one column matrix in `f64`s.
const COLUMN_BUDGET: usize = 1 << 16;

/// Rows `[r0, r1)` (a row is one `(z, y)` pair) per slab.
fn slabs(g: &Geometry, k_rows: usize) -> impl Iterator<Item = (usize, usize)> {
    let rows = g.d * g.h;
    let per = (COLUMN_BUDGET / (k_rows * g.w)).clamp(1, rows);
    (0..rows).step_by(per).map(move |r0| (r0, (r0 + per).min(rows)))
}

/// Source span of one destination row under tap offset `o`: the source row
/// offset and the destination column range `[x0, x1)`, or `None` when the
/// whole row reads outside the volume.
fn row_span(g: &Geometry, row: usize, o: [isize; 3]) -> Option<(usize, usize, usize)> {
    let (z, y) = ((row / g.h) as isize, (row % g.h) as isize);
    let (sz, sy) = (z + o[0], y + o[1]);
    let w = g.w as isize;
    if sz < 0 || sz >= g.d as isize || sy < 0 || sy >= g.h as isize {
        return None;
    }
    let x0 = (-o[2]).max(0);
    let x1 = (w - o[2]).min(w);
    if x0 >= x1 {
        return None;
    }
    Some((
        ((sz * g.h as isize + sy) * w + x0 + o[2]) as usize,
        x0 as usize,
        x1 as usize,
    ))
}

/// `col[(c * taps + t), q] = x[c, p0 + q + offset(t)]`, zero outside the volume,
/// for the slab of rows `[r0, r1)` starting at voxel `p0 = r0 * w`.
fn gather(x: &[f64], channels: usize, g: &Geometry, (r0, r1): (usize, usize), col: &mut [f64]) {
    let len = (r1 - r0) * g.w;
    let v = g.voxels();
    let taps = g.taps();
    for c in 0..channels {
        let src = &x[c * v..(c + 1) * v];
        for t in 0..taps {
            let o = g.offset(t);
            let dst = &mut col[(c * taps + t) * len..(c * taps + t + 1) * len];
            for row in r0..r1 {
                let d = &mut dst[(row - r0) * g.w..(row - r0 + 1) * g.w];
                match row_span(g, row, o) {
                    None => d.fill(0.0),
                    Some((s, x0, x1)) => {
                        d[..x0].fill(0.0);
                        d[x0..x1].copy_from_slice(&src[s..s + (x1 - x0)]);
                        d[x1..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`gather`]: scatters `col` back, adding into `dx`.
fn scatter_add(col: &[f64], channels: usize, g: &Geometry, (r0, r1): (usize, usize), dx: &mut [f64]) {
    let len = (r1 - r0) * g.w;
    let v = g.voxels();
    let taps = g.taps();
    for c in 0..channels {
        let dst = &mut dx[c * v..(c + 1) * v];
        for t in 0..taps {
            let o = g.offset(t);
            let src = &col[(c * taps + t) * len..(c * taps + t + 1) * len];
            for row in r0..r1 {
                if let Some((s, x0, x1)) = row_span(g, row, o) {
                    let from = &src[(row - r0) * g.w + x0..(row - r0) * g.w + x1];
                    for (a, b) in dst[s..s + (x1 - x0)].iter_mut().zip(from) {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Strided view of a row-major or transposed matrix.
#[derive(Clone, Copy)]
struct Mat {
    rs: isize,
    cs: isize,
}

/// `c = alpha * a @ b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], la: Mat, b: &[f64], lb: Mat, beta: f64, c: &mut [f64], lc: Mat) {
    let extent = |rows: usize, cols: usize, l: Mat| {
        (rows.saturating_sub(1) as isize * l.rs + cols.saturating_sub(1) as isize * l.cs) as usize + 1
    };
    assert!(a.len() >= extent(m, k, la));
    assert!(b.len() >= extent(k, n, lb));
    assert!(c.len() >= extent(m, n, lc));
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            lc.rs,
            lc.cs,
        );
    }
}

/// Forward convolution of one sample.
///
/// `x: (c_in, V)`, `w: (c_out, c_in, k, k, k)`, `bias: (c_out)`, `out: (c_out, V)`.
pub(crate) fn forward(x: &[f64], c_in: usize, g: &Geometry, w: &[f64], bias: &[f64], c_out: usize, out: &mut [f64]) {
    let v = g.voxels();
    let kk = c_in * g.taps();
    for (co, chunk) in out.chunks_exact_mut(v).enumerate() {
        chunk.fill(bias[co]);
    }
    let row = Mat { rs: v as isize, cs: 1 };
    let wm = Mat { rs: kk as isize, cs: 1 };
    if g.taps() == 1 {
        gemm(c_out, kk, v, w, wm, x, row, 1.0, out, row);
        return;
    }
    let mut col = Vec::new();
    for slab in slabs(g, kk) {
        let (p0, len) = (slab.0 * g.w, (slab.1 - slab.0) * g.w);
        col.resize(kk * len, 0.0);
        gather(x, c_in, g, slab, &mut col);
        let cm = Mat {
            rs: len as isize,
            cs: 1,
        };
        gemm(c_out, kk, len, w, wm, &col, cm, 1.0, &mut out[p0..], row);
    }
}

/// Backward convolution of one sample.
///
/// Accumulates into `dw` and `dbias`; writes `dx` (overwriting) when given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    x: &[f64],
    c_in: usize,
    g: &Geometry,
    w: &[f64],
    c_out: usize,
    dy: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<(&mut [f64], &mut [f64])>,
) {
    let v = g.voxels();
    let kk = c_in * g.taps();
    let row = Mat { rs: v as isize, cs: 1 };
    let wm = Mat { rs: kk as isize, cs: 1 };
    let wt = Mat { rs: 1, cs: kk as isize };
    if let Some(dx) = dx.as_deref_mut() {
        dx.fill(0.0);
    }
    if let Some((_, db)) = dw.as_mut() {
        for (co, chunk) in dy.chunks_exact(v).enumerate() {
            db[co] += chunk.iter().sum::<f64>();
        }
    }
    if g.taps() == 1 {
        if let Some((dw, _)) = dw.as_mut() {
            // dw += dy @ x^T
            gemm(c_out, v, kk, dy, row, x, Mat { rs: 1, cs: v as isize }, 1.0, dw, wm);
        }
        if let Some(dx) = dx {
            gemm(kk, c_out, v, w, wt, dy, row, 0.0, dx, row);
        }
        return;
    }
    let mut col = Vec::new();
    for slab in slabs(g, kk) {
        let (p0, len) = (slab.0 * g.w, (slab.1 - slab.0) * g.w);
        col.resize(kk * len, 0.0);
        let cm = Mat {
            rs: len as isize,
            cs: 1,
        };
        if let Some((dw, _)) = dw.as_mut() {
            gather(x, c_in, g, slab, &mut col);
            // dw += dy[:, slab] @ col^T
            gemm(
                c_out,
                len,
                kk,
                &dy[p0..],
                row,
                &col,
                Mat {
                    rs: 1,
                    cs: len as isize,
                },
                1.0,
                dw,
                wm,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            // dcol = w^T @ dy[:, slab], then undo the gather
            gemm(kk, c_out, len, w, wt, &dy[p0..], row, 0.0, &mut col, cm);
            scatter_add(&col, c_in, g, slab, dx);
        }
    }
}
