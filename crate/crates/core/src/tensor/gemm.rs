//! Safe strided wrapper over `matrixmultiply::dgemm`.

/// A strided read-only matrix view into a flat buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols` matrix starting at `offset`, row stride `ld`.
    pub fn rm(data: &'a [f64], offset: usize, rows: usize, cols: usize, ld: usize) -> Self {
        MatRef {
            data,
            offset,
            rows,
            cols,
            rs: ld,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "gemm view out of bounds");
        }
    }
}

/// Mutable strided output view.
pub(crate) struct MatMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatMut<'a> {
    pub fn rm(data: &'a mut [f64], offset: usize, ld: usize) -> Self {
        MatMut {
            data,
            offset,
            rs: ld,
            cs: 1,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: MatMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    let last = c.offset + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let p = c.offset + i * c.rs + j * c.cs;
                c.data[p] = if beta == 0.0 { 0.0 } else { beta * c.data[p] };
            }
        }
        return;
    }
    a.check();
    b.check();
    // SAFETY: every index touched by dgemm is bounded by the asserts above,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
