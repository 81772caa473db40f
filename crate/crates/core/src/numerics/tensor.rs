use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting inconsistent shapes, zero dimensions and
    /// non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::usage(format!("tensor shape {shape:?} has a zero dimension")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape("tensor", expected, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// A `rows x cols` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// A matrix whose rows are the given points.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("tensor rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension, treating a vector as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[i, :] = a[i, :] · w + b` for row-major `a (n x k)`, `w (k x m)`.
///
/// Each output row depends only on its own input row and the summation order
/// is fixed, so results are independent of batch composition.
pub(crate) fn affine_rows(a: &[f64], k: usize, w: &[f64], b: &[f64], out: &mut [f64]) {
    let m = b.len();
    for (x, y) in a.chunks_exact(k).zip(out.chunks_exact_mut(m)) {
        y.copy_from_slice(b);
        for (&xi, wr) in x.iter().zip(w.chunks_exact(m)) {
            if xi != 0.0 {
                for (yj, &wj) in y.iter_mut().zip(wr) {
                    *yj += xi * wj;
                }
            }
        }
    }
}

/// `dw += aᵀ · g`, `db += Σ_rows g`.
pub(crate) fn accumulate_affine_grads(
    a: &[f64],
    k: usize,
    g: &[f64],
    m: usize,
    dw: &mut [f64],
    db: &mut [f64],
) {
    for (x, gr) in a.chunks_exact(k).zip(g.chunks_exact(m)) {
        for (dbj, &gj) in db.iter_mut().zip(gr) {
            *dbj += gj;
        }
        for (&xi, dwr) in x.iter().zip(dw.chunks_exact_mut(m)) {
            if xi != 0.0 {
                for (d, &gj) in dwr.iter_mut().zip(gr) {
                    *d += xi * gj;
                }
            }
        }
    }
}

/// `dx[i, :] = g[i, :] · wᵀ`.
pub(crate) fn backprop_rows(g: &[f64], m: usize, w: &[f64], k: usize, dx: &mut [f64]) {
    for (gr, dxr) in g.chunks_exact(m).zip(dx.chunks_exact_mut(k)) {
        for (d, wr) in dxr.iter_mut().zip(w.chunks_exact(m)) {
            *d = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes_and_nan() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        let t = Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        assert_eq!(t.rows(), 2);
    }

    #[test]
    fn affine_matches_hand_product() {
        // [1 2] · [[1 0 2], [3 1 0]] + [0.5 0 0]
        let mut out = vec![0.0; 3];
        affine_rows(&[1.0, 2.0], 2, &[1.0, 0.0, 2.0, 3.0, 1.0, 0.0], &[0.5, 0.0, 0.0], &mut out);
        assert_eq!(out, vec![7.5, 2.0, 2.0]);
    }
}
