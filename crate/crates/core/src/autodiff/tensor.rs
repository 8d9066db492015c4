//! Dense 2-D tensor with copy-on-write storage.
//!
//! Vectors are `[1, n]` or `[n, 1]`; scalars are `[1, 1]`. Higher-rank
//! payloads (image tiles) live outside the graph and are flattened into
//! matrices before entering it.

use std::sync::Arc;

use super::elem::Elem;

/// A `rows x cols` matrix of `E`, cheap to clone.
#[derive(Clone, Debug)]
pub struct Tensor<E: Elem = f32> {
    rows: usize,
    cols: usize,
    data: Arc<Vec<E>>,
}

impl<E: Elem> Tensor<E> {
    pub fn new(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match shape {}x{}",
            data.len(),
            rows,
            cols
        );
        Self { rows, cols, data: Arc::new(data) }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![E::ZERO; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: E) -> Self {
        Self::new(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: E) -> Self {
        Self::new(1, 1, vec![value])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> E) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Row vector `[1, n]` from a slice.
    pub fn row(values: &[E]) -> Self {
        Self::new(1, values.len(), values.to_vec())
    }

    /// Column vector `[n, 1]` from a slice.
    pub fn col(values: &[E]) -> Self {
        Self::new(values.len(), 1, values.to_vec())
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

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable view, cloning the buffer if shared.
    pub(crate) fn data_mut(&mut self) -> &mut [E] {
        std::sync::Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn get(&self, r: usize, c: usize) -> E {
        assert!(r < self.rows && c < self.cols, "index ({r},{c}) out of {:?}", self.shape());
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[E] {
        assert!(r < self.rows);
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `[1,1]` tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.shape(), (1, 1), "item() requires a scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, other: &Self, f: impl Fn(E, E) -> E) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in elementwise op");
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.rows, self.cols, data)
    }

    /// In-place `self += other`, reusing the buffer when uniquely owned.
    pub fn add_in_place(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in accumulate");
        let buf = Arc::make_mut(&mut self.data);
        for (a, &b) in buf.iter_mut().zip(other.data.iter()) {
            *a = *a + b;
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![E::ZERO; self.numel()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self::new(self.cols, self.rows, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Set one coordinate, cloning storage if shared. Test/gradcheck helper.
    pub fn with_coord(&self, r: usize, c: usize, value: E) -> Self {
        let mut data = self.data.as_ref().clone();
        data[r * self.cols + c] = value;
        Self::new(self.rows, self.cols, data)
    }
}

impl Tensor<f32> {
    /// Little-endian byte image of the buffer (checkpoint/payload format).
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * 4);
        for x in self.data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), rows * cols * 4, "byte length does not match shape");
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::new(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_bytes() {
        let t = Tensor::<f32>::from_fn(3, 2, |r, c| (r * 2 + c) as f32 * 0.5 - 1.0);
        let b = t.to_le_bytes();
        let back = Tensor::<f32>::from_le_bytes(3, 2, &b);
        assert_eq!(t.data(), back.data());
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn bad_shape_panics() {
        let _ = Tensor::<f32>::new(2, 2, vec![0.0; 3]);
    }

    #[test]
    fn transpose_involution() {
        let t = Tensor::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let tt = t.transpose().transpose();
        assert_eq!(t.data(), tt.data());
        assert_eq!(t.shape(), tt.shape());
    }
}
