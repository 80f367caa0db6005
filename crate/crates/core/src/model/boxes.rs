use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::scalar::Real;

/// Normalised box; `(x, y)` is the centre, `(w, h)` the extent, all in image
/// fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox<T = f64> {
    pub x: T,
    pub y: T,
    pub w: T,
    pub h: T,
}

impl<T: Real> BoundingBox<T> {
    pub fn new(x: T, y: T, w: T, h: T) -> Self {
        Self { x, y, w, h }
    }

    /// From corner coordinates `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        let half = T::lit(0.5);
        Self {
            x: (x1 + x2) * half,
            y: (y1 + y2) * half,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> [T; 4] {
        let half = T::lit(0.5);
        [
            self.x - self.w * half,
            self.y - self.h * half,
            self.x + self.w * half,
            self.y + self.h * half,
        ]
    }

    pub fn area(&self) -> T {
        self.w.max(T::zero()) * self.h.max(T::zero())
    }

    pub fn to_array(&self) -> [T; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_slice(v: &[T]) -> Result<Self> {
        match *v {
            [x, y, w, h] => Ok(Self { x, y, w, h }),
            _ => Err(Error::Dimension(format!("a box needs 4 values, got {}", v.len()))),
        }
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::new(vec![4], self.to_array().to_vec()).expect("4-vector")
    }

    /// All components lie in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.to_array()
            .iter()
            .all(|&v| v >= T::zero() && v <= T::one())
    }

    /// The box lies completely inside the unit square.
    pub fn is_inside_image(&self) -> bool {
        let [x1, y1, x2, y2] = self.corners();
        let (zero, one) = (T::zero(), T::one());
        let tol = T::lit(1e-12);
        self.w >= zero
            && self.h >= zero
            && x1 >= zero - tol
            && y1 >= zero - tol
            && x2 <= one + tol
            && y2 <= one + tol
    }

    pub fn cast<U: Real>(&self) -> BoundingBox<U> {
        BoundingBox {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            w: U::lit(self.w.as_f64()),
            h: U::lit(self.h.as_f64()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_round_trip() {
        let b = BoundingBox::<f64>::new(0.3, 0.4, 0.2, 0.1);
        let [x1, y1, x2, y2] = b.corners();
        let back = BoundingBox::from_corners(x1, y1, x2, y2);
        for (a, c) in b.to_array().iter().zip(back.to_array()) {
            assert!((a - c).abs() < 1e-15);
        }
        assert!(b.is_inside_image());
        assert!(!BoundingBox::new(0.95, 0.5, 0.2, 0.2).is_inside_image());
    }
}
