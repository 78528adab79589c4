//! Dense row-major f64 matrix used for encoded centerlines, noise, and
//! denoiser activations. Small and allocation-honest; no BLAS.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `a*self + b*other`; shapes must match.
    pub fn lin_comb(&self, a: f64, other: &Mat, b: f64) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Copy of columns `c0..c0+width`.
    pub fn col_block(&self, c0: usize, width: usize) -> Mat {
        let mut out = Mat::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[c0..c0 + width]);
        }
        out
    }

    /// Accumulate `block` into columns `c0..`.
    pub fn add_col_block(&mut self, c0: usize, block: &Mat) {
        assert_eq!(self.rows, block.rows);
        let w = block.cols;
        for r in 0..self.rows {
            let dst = &mut self.row_mut(r)[c0..c0 + w];
            for (d, s) in dst.iter_mut().zip(block.row(r)) {
                *d += s;
            }
        }
    }
}

/// `a·b` with `a: [m×k]`, `b: [k×n]`.
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.rows, "matmul: inner dims differ");
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a·b^T` with `a: [m×k]`, `b: [n×k]`.
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.cols, b.cols, "matmul_nt: inner dims differ");
    let mut out = Mat::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.set(i, j, acc);
        }
    }
    out
}

/// `a^T·b` with `a: [k×m]`, `b: [k×n]`.
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    assert_eq!(a.rows, b.rows, "matmul_tn: inner dims differ");
    let mut out = Mat::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `y = x · w^T + b`, with `x: [n×in]`, `w: [out×in]`, `b: [out]` → `y: [n×out]`.
///
/// The i-k-j loop order keeps the inner loop contiguous in both `w` and `y`.
pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let (n, d_in) = x.shape();
    let (d_out, w_in) = w.shape();
    assert_eq!(d_in, w_in, "linear: input width mismatch");
    assert_eq!(b.len(), d_out, "linear: bias length mismatch");
    let mut y = Mat::zeros(n, d_out);
    for i in 0..n {
        let yrow = y.row_mut(i);
        yrow.copy_from_slice(b);
    }
    for i in 0..n {
        let xrow = x.row(i);
        for o in 0..d_out {
            let wrow = w.row(o);
            let mut acc = 0.0;
            for k in 0..d_in {
                acc += xrow[k] * wrow[k];
            }
            y.set(i, o, y.get(i, o) + acc);
        }
    }
    y
}

/// Backward pass of [`linear`]: given `dy: [n×out]`, accumulates `dw += dy^T·x`,
/// `db += colsum(dy)` and returns `dx = dy·w`.
pub fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut [f64]) -> Mat {
    let (n, d_in) = x.shape();
    let (d_out, _) = w.shape();
    assert_eq!(dy.shape(), (n, d_out));
    assert_eq!(dw.shape(), w.shape());
    assert_eq!(db.len(), d_out);

    for i in 0..n {
        let dyrow = dy.row(i);
        let xrow = x.row(i);
        for o in 0..d_out {
            let g = dyrow[o];
            db[o] += g;
            let dwrow = dw.row_mut(o);
            for k in 0..d_in {
                dwrow[k] += g * xrow[k];
            }
        }
    }

    let mut dx = Mat::zeros(n, d_in);
    for i in 0..n {
        let dyrow = dy.row(i);
        let dxrow = dx.row_mut(i);
        for o in 0..d_out {
            let g = dyrow[o];
            let wrow = w.row(o);
            for k in 0..d_in {
                dxrow[k] += g * wrow[k];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual_product() {
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = Mat::from_vec(2, 3, vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]);
        let b = [10.0, 20.0];
        let y = linear(&x, &w, &b);
        assert_eq!(y.get(0, 0), 10.0 + 1.0 - 3.0);
        assert_eq!(y.get(0, 1), 20.0 + 3.0);
        assert_eq!(y.get(1, 0), 10.0 + 4.0 - 6.0);
        assert_eq!(y.get(1, 1), 20.0 + 7.5);
    }

    #[test]
    fn lin_comb_rejects_shape_mismatch() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(3, 2);
        assert!(a.lin_comb(1.0, &b, 1.0).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let ab = matmul(&a, &b);
        assert_eq!(ab.as_slice(), &[58.0, 64.0, 139.0, 154.0]);

        // a·b == a·(b^T)^T and (a^T)^T·b
        let bt = Mat::from_fn(2, 3, |i, j| b.get(j, i));
        assert_eq!(matmul_nt(&a, &bt), ab);
        let at = Mat::from_fn(3, 2, |i, j| a.get(j, i));
        assert_eq!(matmul_tn(&at, &b), ab);
    }

    #[test]
    fn col_block_round_trip() {
        let m = Mat::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let blk = m.col_block(1, 2);
        assert_eq!(blk.row(0), &[1.0, 2.0]);
        let mut acc = Mat::zeros(3, 4);
        acc.add_col_block(1, &blk);
        assert_eq!(acc.get(1, 2), m.get(1, 2));
        assert_eq!(acc.get(1, 0), 0.0);
    }
}
