//! Stride-1 convolution (im2col + GEMM) and 2×2 max pooling on raw NHWC
//! slices. Shape validation happens in the graph layer.

use super::Real;

/// Upper bound on the im2col scratch buffer, in elements.
const COLS_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad_h + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad_w + 1 - self.kw
    }

    /// Output positions per sample.
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Length of one unrolled patch, ordered `(ky, kx, cin)` like the filters.
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// The patch matrix of a sample is the sample itself: the kernel covers
    /// the whole unpadded input, or it is 1×1 without padding.
    fn cols_are_input(&self) -> bool {
        self.pad_h == 0
            && self.pad_w == 0
            && ((self.kh == self.h && self.kw == self.w) || (self.kh == 1 && self.kw == 1))
    }

    fn chunk(&self) -> usize {
        (COLS_BUDGET / (self.positions() * self.patch()).max(1)).clamp(1, self.n.max(1))
    }
}

fn gemm<T: Real>(
    (m, k, n): (usize, usize, usize),
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len(), "gemm: A out of bounds");
        assert!(last(rsb, csb, k, n) < b.len(), "gemm: B out of bounds");
    }
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = g.kw * g.cin;
    let mut dst = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_h as isize;
                let out = &mut cols[dst..dst + row_len];
                dst += row_len;
                if iy < 0 || iy >= g.h as isize {
                    out.fill(T::zero());
                    continue;
                }
                let src_row = iy as usize * g.w * g.cin;
                let x0 = ox as isize - g.pad_w as isize;
                if x0 >= 0 && x0 as usize + g.kw <= g.w {
                    let s = src_row + x0 as usize * g.cin;
                    out.copy_from_slice(&x[s..s + row_len]);
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = x0 + kx as isize;
                    let o = &mut out[kx * g.cin..(kx + 1) * g.cin];
                    if ix < 0 || ix >= g.w as isize {
                        o.fill(T::zero());
                    } else {
                        let s = src_row + ix as usize * g.cin;
                        o.copy_from_slice(&x[s..s + g.cin]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let row_len = g.kw * g.cin;
    let mut src = 0;
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..g.kh {
                let iy = (oy + ky) as isize - g.pad_h as isize;
                let patch_row = &cols[src..src + row_len];
                src += row_len;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let dst_row = iy as usize * g.w * g.cin;
                for kx in 0..g.kw {
                    let ix = ox as isize + kx as isize - g.pad_w as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let d = dst_row + ix as usize * g.cin;
                    for (o, v) in dx[d..d + g.cin]
                        .iter_mut()
                        .zip(&patch_row[kx * g.cin..(kx + 1) * g.cin])
                    {
                        *o += *v;
                    }
                }
            }
        }
    }
}

/// Fills `cols` with the patch matrices of samples `start..start + count`
/// and returns it, or borrows the input directly when no unrolling is needed.
fn patches<'a, T: Real>(x: &'a [T], g: &ConvGeometry, start: usize, count: usize, cols: &'a mut Vec<T>) -> &'a [T] {
    let in_len = g.h * g.w * g.cin;
    if g.cols_are_input() {
        return &x[start * in_len..(start + count) * in_len];
    }
    let per = g.positions() * g.patch();
    cols.resize(count * per, T::zero());
    for s in 0..count {
        let xs = &x[(start + s) * in_len..(start + s + 1) * in_len];
        im2col(xs, g, &mut cols[s * per..(s + 1) * per]);
    }
    cols
}

/// Cross-correlation with zero padding and unit stride.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let k = g.patch();
    let mut y = vec![T::zero(); g.n * p * g.cout];
    for row in y.chunks_exact_mut(g.cout) {
        row.copy_from_slice(b);
    }
    let chunk = g.chunk();
    let mut cols = Vec::new();
    let mut start = 0;
    while start < g.n {
        let count = chunk.min(g.n - start);
        let a = patches(x, g, start, count, &mut cols);
        let out = &mut y[start * p * g.cout..(start + count) * p * g.cout];
        gemm(
            (count * p, k, g.cout),
            a,
            (k, 1),
            w,
            (g.cout, 1),
            T::one(),
            out,
            (g.cout, 1),
        );
        start += count;
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(x: &[T], w: &[T], dy: &[T], g: &ConvGeometry, need_dx: bool) -> ConvGrads<T> {
    let p = g.positions();
    let k = g.patch();
    let in_len = g.h * g.w * g.cin;

    let mut db = vec![T::zero(); g.cout];
    for row in dy.chunks_exact(g.cout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += *v;
        }
    }

    let mut dw = vec![T::zero(); k * g.cout];
    let mut dx = need_dx.then(|| vec![T::zero(); g.n * in_len]);
    let chunk = g.chunk();
    let mut cols = Vec::new();
    let mut dcols = Vec::new();
    let mut start = 0;
    while start < g.n {
        let count = chunk.min(g.n - start);
        let rows = count * p;
        let dys = &dy[start * p * g.cout..(start + count) * p * g.cout];
        {
            let a = patches(x, g, start, count, &mut cols);
            // dW (k × cout) += colsᵀ (k × rows) · dY (rows × cout)
            gemm(
                (k, rows, g.cout),
                a,
                (1, k),
                dys,
                (g.cout, 1),
                T::one(),
                &mut dw,
                (g.cout, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[start * in_len..(start + count) * in_len];
            if g.cols_are_input() {
                // dX (rows × k) = dY (rows × cout) · Wᵀ (cout × k)
                gemm(
                    (rows, g.cout, k),
                    dys,
                    (g.cout, 1),
                    w,
                    (1, g.cout),
                    T::zero(),
                    dxs,
                    (k, 1),
                );
            } else {
                dcols.resize(rows * k, T::zero());
                gemm(
                    (rows, g.cout, k),
                    dys,
                    (g.cout, 1),
                    w,
                    (1, g.cout),
                    T::zero(),
                    &mut dcols,
                    (k, 1),
                );
                let per = p * k;
                for s in 0..count {
                    col2im(
                        &dcols[s * per..(s + 1) * per],
                        g,
                        &mut dxs[s * in_len..(s + 1) * in_len],
                    );
                }
            }
        }
        start += count;
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 / stride 2 max pooling. Returns the pooled values and, per output
/// cell, the winning window offset `2·dy + dx`. Ties go to the first
/// position in row-major scan order.
pub fn maxpool2x2_forward<T: Real>(x: &[T], (n, h, w, c): (usize, usize, usize, usize)) -> (Vec<T>, Vec<u8>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let base = ((s * h + 2 * oy) * w + 2 * ox) * c + ch;
                    let (mut best, mut off) = (x[base], 0u8);
                    for (k, i) in [(1, base + c), (2, base + w * c), (3, base + w * c + c)] {
                        if x[i] > best {
                            best = x[i];
                            off = k;
                        }
                    }
                    y.push(best);
                    arg.push(off);
                }
            }
        }
    }
    (y, arg)
}

/// Flat input index selected by window offset `off` for output cell `o`.
#[inline]
pub fn pool_input_index(o: usize, off: u8, (_, h, w, c): (usize, usize, usize, usize)) -> usize {
    let (ow, oh) = (w / 2, h / 2);
    let ch = o % c;
    let cell = o / c;
    let (ox, rest) = (cell % ow, cell / ow);
    let (oy, s) = (rest % oh, rest / oh);
    let (dy, dx) = ((off >> 1) as usize, (off & 1) as usize);
    ((s * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch
}
