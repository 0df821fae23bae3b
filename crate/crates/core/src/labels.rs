use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class ids for a batch, laid out `(n, h, w)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::Shape(format!("label map ({n},{h},{w}) needs {} values, got {}", n * h * w, data.len())));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, class: u8) -> Self {
        LabelMap { n, h, w, data: vec![class; n * h * w] }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    /// Sample `n` as its own single-item map.
    pub fn sample(&self, n: usize) -> LabelMap {
        let p = self.h * self.w;
        LabelMap { n: 1, h: self.h, w: self.w, data: self.data[n * p..(n + 1) * p].to_vec() }
    }

    /// Stack equally sized maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Contract("cannot stack zero label maps".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in maps {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::Shape(format!(
                    "label maps differ in size: {}x{} vs {}x{}",
                    first.h, first.w, m.h, m.w
                )));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Ok(LabelMap { n, h: first.h, w: first.w, data })
    }

    /// Every value must be a class id below `nc` or [`IGNORE_INDEX`].
    pub fn validate(&self, nc: usize) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != IGNORE_INDEX && v as usize >= nc {
                let p = self.h * self.w;
                let (n, y, x) = (i / p, (i % p) / self.w, i % self.w);
                return Err(Error::Label(format!(
                    "class id {v} at sample {n}, row {y}, col {x} is out of range for {nc} classes"
                )));
            }
        }
        Ok(())
    }

    /// Check that the map lines up with a `(n, nc, h, w)` score tensor.
    pub fn check_against<T: Scalar>(&self, scores: &Tensor<T>) -> Result<()> {
        let s = scores.shape();
        if (s.n(), s.h(), s.w()) != (self.n, self.h, self.w) {
            return Err(Error::Shape(format!(
                "scores {s} vs labels ({},{},{})",
                self.n, self.h, self.w
            )));
        }
        self.validate(s.c())
    }
}
