//! Core data carriers shared across the crate: images, feature tensors and
//! channel-ready symbol frames.
//!
//! Layout conventions are fixed once here and relied on everywhere else:
//! images are `(height, width, channel)`, transmitted features are
//! `(h, w, c)` with the defense operating along the first axis `h`, and a
//! [`SymbolFrame`] stores `N` complex symbols as an `N x 2` array of
//! (real, imaginary) parts.

use ndarray::{Array2, Array3};
use thiserror::Error;

/// Shape errors raised by the constructors in this module.
#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("image dimensions must all be >= 1, got {0}x{1}x{2}")]
    EmptyImage(usize, usize, usize),
    #[error("pixel value {value} at {index:?} outside [0,1]")]
    PixelOutOfRange { value: f64, index: (usize, usize, usize) },
    #[error("non-finite value encountered at {0:?}")]
    NonFinite((usize, usize, usize)),
    #[error("feature element count {0} is odd; cannot form complex symbols")]
    OddElementCount(usize),
    #[error("symbol frame expects {expected} symbols for shape {shape:?}, got {got}")]
    SymbolCountMismatch {
        expected: usize,
        got: usize,
        shape: (usize, usize, usize),
    },
    #[error("expected shape {expected:?}, got {got:?}")]
    Mismatch {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
}

/// An image with pixel intensities in `[0, 1]`, stored `(H, W, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
}

impl ImageTensor {
    /// Wraps an array, validating the `[0, 1]` range and shape invariants.
    pub fn new(pixels: Array3<f64>) -> Result<Self, ShapeError> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(ShapeError::EmptyImage(h, w, c));
        }
        for ((i, j, k), &v) in pixels.indexed_iter() {
            if !v.is_finite() {
                return Err(ShapeError::NonFinite((i, j, k)));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(ShapeError::PixelOutOfRange {
                    value: v,
                    index: (i, j, k),
                });
            }
        }
        Ok(Self { pixels })
    }

    /// Clamps every element to `[0, 1]` and wraps the result.
    ///
    /// This is the module-boundary clamp: decoders and attack outputs go
    /// through here so the range invariant holds regardless of what the
    /// network produced.
    pub fn from_unclamped(mut pixels: Array3<f64>) -> Result<Self, ShapeError> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 || c == 0 {
            return Err(ShapeError::EmptyImage(h, w, c));
        }
        for ((i, j, k), v) in pixels.indexed_iter_mut() {
            if !v.is_finite() {
                return Err(ShapeError::NonFinite((i, j, k)));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Ok(Self { pixels })
    }

    /// A constant-intensity image.
    pub fn constant(shape: (usize, usize, usize), value: f64) -> Result<Self, ShapeError> {
        Self::new(Array3::from_elem(shape, value))
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    /// Number of scalar pixel values (`H * W * C`).
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Sum of squared pixel differences against another image of equal shape.
    pub fn squared_error(&self, other: &Self) -> Result<f64, ShapeError> {
        if self.shape() != other.shape() {
            return Err(ShapeError::Mismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(self
            .pixels
            .iter()
            .zip(other.pixels.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Semantic features `z` produced by the semantic encoder, stored `(C, H, W)`
/// to match the convolution layout used internally.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticTensor {
    values: Array3<f64>,
}

impl SemanticTensor {
    pub fn new(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Transmitted features `(h, w, c)`. The defense permutes along axis 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    values: Array3<f64>,
}

impl FeatureTensor {
    pub fn new(values: Array3<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self {
            values: Array3::zeros(shape),
        }
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    /// `(h, w, c)` dimensions.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Number of scalar elements `h * w * c`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Mean power per element, `(1/L) * sum(v^2)`.
    pub fn mean_element_power(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }
}

/// `N` complex channel symbols as an `N x 2` array (column 0 real parts,
/// column 1 imaginary parts), remembering the `(h, w, c)` feature shape they
/// were reshaped from.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolFrame {
    symbols: Array2<f64>,
    origin_shape: (usize, usize, usize),
}

impl SymbolFrame {
    /// Wraps a raw symbol array, checking `N = h*w*c/2`.
    pub fn new(symbols: Array2<f64>, origin_shape: (usize, usize, usize)) -> Result<Self, ShapeError> {
        let (h, w, c) = origin_shape;
        let elems = h * w * c;
        if elems % 2 != 0 {
            return Err(ShapeError::OddElementCount(elems));
        }
        let expected = elems / 2;
        if symbols.dim() != (expected, 2) {
            return Err(ShapeError::SymbolCountMismatch {
                expected,
                got: symbols.dim().0,
                shape: origin_shape,
            });
        }
        Ok(Self {
            symbols,
            origin_shape,
        })
    }

    /// Number of complex symbols `N`.
    pub fn num_symbols(&self) -> usize {
        self.symbols.dim().0
    }

    pub fn symbols(&self) -> &Array2<f64> {
        &self.symbols
    }

    pub fn symbols_mut(&mut self) -> &mut Array2<f64> {
        &mut self.symbols
    }

    pub fn origin_shape(&self) -> (usize, usize, usize) {
        self.origin_shape
    }

    /// Mean complex-symbol power `(1/N) * sum(re^2 + im^2)`.
    pub fn mean_complex_power(&self) -> f64 {
        let n = self.num_symbols();
        if n == 0 {
            return 0.0;
        }
        self.symbols.iter().map(|v| v * v).sum::<f64>() / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr3;

    #[test]
    fn image_rejects_out_of_range() {
        let arr = arr3(&[[[0.5, 1.2]]]);
        assert!(matches!(
            ImageTensor::new(arr),
            Err(ShapeError::PixelOutOfRange { .. })
        ));
    }

    #[test]
    fn clamp_boundary_constructor() {
        let arr = arr3(&[[[-0.5, 1.5], [0.25, 0.75]]]);
        let img = ImageTensor::from_unclamped(arr).unwrap();
        let p = img.pixels();
        assert_eq!(p[(0, 0, 0)], 0.0);
        assert_eq!(p[(0, 0, 1)], 1.0);
        assert_eq!(p[(0, 1, 0)], 0.25);
    }

    #[test]
    fn symbol_frame_shape_check() {
        let sym = Array2::zeros((4, 2));
        assert!(SymbolFrame::new(sym.clone(), (2, 2, 2)).is_ok());
        assert!(SymbolFrame::new(sym, (3, 1, 1)).is_err());
    }

    #[test]
    fn mean_power_of_unit_symbols() {
        let mut sym = Array2::zeros((4, 2));
        sym.column_mut(0).fill(1.0);
        let frame = SymbolFrame::new(sym, (2, 2, 2)).unwrap();
        assert!((frame.mean_complex_power() - 1.0).abs() < 1e-12);
    }
}
