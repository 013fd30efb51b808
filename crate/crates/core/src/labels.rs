//! Integer label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Label value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Row-major `H×W` map of class indices (or [`IGNORE`]).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}x{width} with {} entries",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Nearest-neighbor resampling (pixel centers, half-pixel convention).
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize)
                .min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize)
                    .min(self.width - 1);
                data.push(self.get(sy, sx));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Encodes as an `H×W` tensor of f64 integers (PDT1 storage form).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.height, self.width],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("label map shape is consistent")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [h, w] = t.shape() else {
            return Err(Error::Data(format!("label tensor of shape {:?}", t.shape())));
        };
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v.fract() == 0.0 && (0.0..=255.0).contains(&v) {
                    Ok(v as u8)
                } else {
                    Err(Error::Data(format!("label value {v} is not a u8 integer")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabelMap::new(*h, *w, data)
    }

    /// Per-class pixel counts for classes `0..k` (ignore and out-of-range skipped).
    pub fn histogram(&self, k: usize) -> Vec<usize> {
        let mut h = vec![0; k];
        for &v in &self.data {
            if (v as usize) < k {
                h[v as usize] += 1;
            }
        }
        h
    }
}
