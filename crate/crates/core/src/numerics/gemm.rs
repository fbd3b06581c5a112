//! Bounds-checked wrapper around `matrixmultiply::dgemm`.

/// Strided matrix operand: `data[offset + r * rs + c * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

/// Mutable strided output operand.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn rows(data: &'a mut [f64], cols: usize) -> Self {
        ViewMut {
            data,
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }
}

fn last_index(offset: usize, m: usize, n: usize, rs: usize, cs: usize) -> usize {
    offset + (m - 1) * rs + (n - 1) * cs
}

/// `c = alpha * a(m×k) · b(k×n) + beta * c(m×n)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: ViewMut<'_>,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(last_index(c.offset, m, n, c.rs, c.cs) < c.data.len());
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c.data[c.offset + i * c.rs + j * c.cs];
                *v *= beta;
            }
        }
        return;
    }
    assert!(last_index(a.offset, m, k, a.rs, a.cs) < a.data.len());
    assert!(last_index(b.offset, k, n, b.rs, b.cs) < b.data.len());
    // SAFETY: every index touched by dgemm is `offset + i*rs + j*cs` with i, j
    // inside the extents checked above, so all accesses stay in bounds. `c`
    // is a unique borrow and cannot alias `a` or `b`.
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
