use std::fmt;

use crate::error::{Error, Result};
use crate::speckle_sim::GrayImage;

/// `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

/// Dense NCHW tensor of f64, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(
                format!("{} elements for shape {shape}", shape.len()),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    /// Stacks equally sized images into a `(n, 1, h, w)` tensor.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a GrayImage>) -> Result<Self> {
        let mut data = Vec::new();
        let mut dims = None;
        let mut count = 0;
        for img in images {
            match dims {
                None => dims = Some(img.dims()),
                Some(d) if d != img.dims() => {
                    return Err(Error::shape(format!("{}x{}", d.0, d.1), format!("{}x{}", img.height(), img.width())))
                }
                _ => {}
            }
            data.extend_from_slice(img.data());
            count += 1;
        }
        let (h, w) = dims.ok_or_else(|| Error::invalid("cannot stack an empty image list"))?;
        Self::from_vec(Shape::new(count, 1, h, w), data)
    }

    /// Splits a single-channel tensor into images, clamping negative values
    /// to zero.
    pub fn to_images(&self) -> Result<Vec<GrayImage>> {
        if self.shape.channels != 1 {
            return Err(Error::shape("1 channel", format!("{} channels", self.shape.channels)));
        }
        let plane = self.shape.plane();
        self.data
            .chunks_exact(plane)
            .map(|c| GrayImage::from_clamped(self.shape.height, self.shape.width, c.to_vec()))
            .collect()
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.shape.channels + c) * self.shape.height + y) * self.shape.width + x
    }

    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(b, c, y, x)]
    }

    /// Contiguous `height * width` slice of one channel of one item.
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_shape(&self, expected: Shape) -> Result<()> {
        if self.shape != expected {
            return Err(Error::shape(expected, self.shape));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_width_fastest() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |i| i as f64);
        assert_eq!(t.at(1, 2, 3, 4), (t.len() - 1) as f64);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.plane(1, 0)[0], 60.0);
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn image_stacking_roundtrip() {
        let a = GrayImage::from_fn(2, 3, |r, c| (r + c) as f64).unwrap();
        let b = GrayImage::filled(2, 3, 0.5).unwrap();
        let t = Tensor::from_images([&a, &b]).unwrap();
        assert_eq!(t.shape(), Shape::new(2, 1, 2, 3));
        assert_eq!(t.to_images().unwrap(), vec![a.clone(), b]);
        let c = GrayImage::filled(3, 2, 0.5).unwrap();
        assert!(Tensor::from_images([&a, &c]).is_err());
    }
}
