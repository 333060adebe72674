use serde::{Deserialize, Serialize};

/// Dense row-major `f32` tensor.
///
/// Every reduction in the engine walks `values` in index order, so results
/// never depend on thread count or hashing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBuf {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

impl TensorBuf {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        TensorBuf { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorBuf { shape, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Bitwise equality, so `-0.0 != 0.0` and equal NaN payloads match.
    pub fn bit_eq(&self, other: &TensorBuf) -> bool {
        self.shape == other.shape
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().fold(0.0, |acc, &v| acc + v as f64)
    }
}

/// `y = A x` for a `rows x cols` matrix stored row-major.
pub(crate) fn matvec(a: &[f32], rows: usize, cols: usize, x: &[f32]) -> Vec<f32> {
    (0..rows)
        .map(|r| {
            let row = &a[r * cols..(r + 1) * cols];
            row.iter().zip(x).fold(0.0f32, |acc, (w, v)| acc + w * v)
        })
        .collect()
}

/// `y += A^T g`.
pub(crate) fn matvec_t_acc(a: &[f32], rows: usize, cols: usize, g: &[f32], y: &mut [f32]) {
    for r in 0..rows {
        let gr = g[r];
        if gr == 0.0 {
            continue;
        }
        let row = &a[r * cols..(r + 1) * cols];
        for (yc, w) in y.iter_mut().zip(row) {
            *yc += w * gr;
        }
    }
}

/// `G += g x^T`.
pub(crate) fn outer_acc(grad: &mut [f32], rows: usize, cols: usize, g: &[f32], x: &[f32]) {
    for r in 0..rows {
        let gr = g[r];
        let row = &mut grad[r * cols..(r + 1) * cols];
        for (w, v) in row.iter_mut().zip(x) {
            *w += gr * v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(matvec(&a, 2, 3, &[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        let mut y = vec![0.0; 3];
        matvec_t_acc(&a, 2, 3, &[1.0, 1.0], &mut y);
        assert_eq!(y, vec![5.0, 7.0, 9.0]);
        let mut g = vec![0.0; 6];
        outer_acc(&mut g, 2, 3, &[1.0, 2.0], &[1.0, 0.0, 3.0]);
        assert_eq!(g, vec![1.0, 0.0, 3.0, 2.0, 0.0, 6.0]);
    }

    #[test]
    fn bit_eq_distinguishes_signed_zero() {
        let a = TensorBuf::new(vec![1], vec![0.0]);
        let b = TensorBuf::new(vec![1], vec![-0.0]);
        assert!(!a.bit_eq(&b));
        assert!(a.bit_eq(&a.clone()));
    }
}
