use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel semantic class ids for one image. Class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(ClassMask { height, width, labels })
    }

    pub fn uniform(height: usize, width: usize, class: u8) -> Self {
        ClassMask { height, width, labels: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn num_pixels(&self) -> usize {
        self.labels.len()
    }

    pub fn region_len(&self, class: usize) -> usize {
        self.labels.iter().filter(|&&l| l as usize == class).count()
    }

    /// Distinct classes in ascending order.
    pub fn classes_present(&self) -> Vec<usize> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..256).filter(|&c| seen[c]).collect()
    }

    pub fn max_class(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }

    /// `[1, 1, H, W]` indicator of `class`.
    pub fn indicator(&self, class: usize) -> Tensor {
        let data = self.labels.iter().map(|&l| (l as usize == class) as u8 as f64).collect();
        Tensor::image(self.height, self.width, data).expect("mask dims")
    }

    /// `[1, classes, H, W]` one-hot encoding.
    pub fn one_hot(&self, classes: usize) -> Result<Tensor> {
        if self.max_class() >= classes {
            return Err(Error::domain(format!(
                "mask holds class {} but only {classes} classes exist",
                self.max_class()
            )));
        }
        let plane = self.height * self.width;
        let mut data = vec![0.0; classes * plane];
        for (p, &l) in self.labels.iter().enumerate() {
            data[l as usize * plane + p] = 1.0;
        }
        Tensor::new([1, classes, self.height, self.width], data)
    }

    /// Errors unless `(height, width)` match the trailing dims of `shape`.
    pub fn expect_fits(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [.., h, w] if *h == self.height && *w == self.width => Ok(()),
            _ => Err(Error::shape(format!(
                "mask {}x{} does not fit tensor {shape:?}",
                self.height, self.width
            ))),
        }
    }
}
