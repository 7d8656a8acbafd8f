//! Row-major 2D arrays used for images, masks and labelings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid<T> {
    h: usize,
    w: usize,
    data: Vec<T>,
}

/// Grayscale image with intensities in `[0, 1]`.
pub type Image = Grid<f32>;
/// Binary mask, values in `{0, 1}`.
pub type Mask = Grid<u8>;
/// Segment ids; 0 is background or boundary.
pub type Labeling = Grid<u32>;

impl<T: Copy> Grid<T> {
    pub fn new(h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::InvalidArgument(format!(
                "grid {h}×{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Grid { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: T) -> Self {
        Grid {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Grid { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.w + x] = v;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_square(&self) -> bool {
        self.h == self.w
    }

    pub(crate) fn check_same_dims<U>(&self, other: &Grid<U>, op: &str) -> Result<()> {
        if self.h != other.h || self.w != other.w {
            return Err(Error::InvalidArgument(format!(
                "{op}: dimension mismatch, {}×{} vs {}×{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

impl Image {
    /// `[1, 1, H, W]` tensor of the same values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec([1, 1, self.h, self.w], data).expect("sized from grid")
    }

    /// Channel `c` of batch item `n`.
    pub fn from_plane<T: Scalar>(t: &Tensor<T>, n: usize, c: usize) -> Self {
        let s = t.shape();
        Grid {
            h: s.h(),
            w: s.w(),
            data: t.plane(n, c).iter().map(|v| v.as_f64() as f32).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.dims(), other.dims());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }
}

/// An image and its binary label of identical dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub image: Image,
    pub label: Mask,
}

impl SamplePair {
    pub fn new(image: Image, label: Mask) -> Result<Self> {
        image.check_same_dims(&label, "sample pair")?;
        if label.data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("sample pair: label values must be 0 or 1".into()));
        }
        Ok(SamplePair { image, label })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}
