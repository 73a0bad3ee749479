//! Dense row-major matrices and the few kernels the encoder needs.

/// Row-major `rows x cols` matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self::from_vec(1, data.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for r in self.data.chunks_exact_mut(self.cols) {
            for (x, b) in r.iter_mut().zip(bias) {
                *x += b;
            }
        }
    }

    /// Column sums added into `out`.
    pub fn col_sums_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.cols);
        for r in self.data.chunks_exact(self.cols) {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
    }

    pub fn view(&self) -> View<'_> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols as isize,
            cs: 1,
        }
    }

    /// Columns `start..start + width` as a strided view.
    pub fn cols_view(&self, start: usize, width: usize) -> View<'_> {
        assert!(start + width <= self.cols);
        View {
            data: &self.data[start..],
            rows: self.rows,
            cols: width,
            rs: self.cols as isize,
            cs: 1,
        }
    }
}

/// Borrowed strided matrix.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            data: self.data,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Mutable strided destination.
pub struct ViewMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: isize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> Self {
        let (rows, cols) = m.shape();
        Self {
            data: &mut m.data,
            rows,
            cols,
            rs: cols as isize,
        }
    }

    pub fn cols_of(m: &'a mut Mat, start: usize, width: usize) -> Self {
        let (rows, cols) = m.shape();
        assert!(start + width <= cols);
        Self {
            data: &mut m.data[start..],
            rows,
            cols: width,
            rs: cols as isize,
        }
    }
}

/// `c = alpha * a * b + beta * c`.
pub fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output shape");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.max_index() < a.data.len().max(1) || k == 0);
    assert!(b.max_index() < b.data.len().max(1) || k == 0);
    assert!((m - 1) * c.rs as usize + (n - 1) < c.data.len());
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.data.as_mut_ptr(),
            c.rs,
            1,
        );
    }
}

/// `a * b` as a new matrix.
pub fn matmul(a: View<'_>, b: View<'_>) -> Mat {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm(1.0, a, b, 0.0, ViewMut::of(&mut c));
    c
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// `log softmax(row)[index]`.
pub fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                c.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
            }
        }
        c
    }

    fn filled(r: usize, c: usize, seed: f64) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|i| ((i as f64 + seed) * 0.37).sin()).collect())
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = filled(5, 3, 1.0);
        let b = filled(3, 4, 2.0);
        let c = matmul(a.view(), b.view());
        let expect = naive(&a, &b);
        for (x, y) in c.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = filled(3, 5, 3.0);
        let c2 = matmul(at.view().t(), b.view());
        let mut at_t = Mat::zeros(5, 3);
        for i in 0..5 {
            for j in 0..3 {
                at_t.set(i, j, at.get(j, i));
            }
        }
        let expect2 = naive(&at_t, &b);
        for (x, y) in c2.data().iter().zip(expect2.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn column_block_views() {
        let a = filled(4, 6, 0.5);
        let b = filled(4, 6, 1.5);
        // a[:, 2..4] * b[:, 2..4]^T
        let c = matmul(a.cols_view(2, 2), b.cols_view(2, 2).t());
        for i in 0..4 {
            for j in 0..4 {
                let e: f64 = (2..4).map(|k| a.get(i, k) * b.get(j, k)).sum();
                assert!((c.get(i, j) - e).abs() < 1e-12);
            }
        }
        let mut out = Mat::zeros(4, 6);
        gemm(1.0, a.cols_view(0, 2), filled(2, 2, 0.0).view(), 0.0, ViewMut::cols_of(&mut out, 4, 2));
        assert!(out.row(0)[..4].iter().all(|&x| x == 0.0));
        assert!(out.row(0)[4] != 0.0);
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1000.0, 999.0, -5.0];
        softmax_in_place(&mut r);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((log_softmax_at(&[0.0, 0.0, 0.0, 0.0], 2) + 4f64.ln()).abs() < 1e-15);
    }
}
