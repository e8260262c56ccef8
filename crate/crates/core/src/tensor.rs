//! Dense row-major HWC feature tensors and categorical label maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Class identifier. `0` is the background class.
pub type ClassId = u16;

pub const BACKGROUND: ClassId = 0;

/// An `h × w × c` real tensor stored row-major with channels innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::contract(format!(
                "tensor data length {} does not match {h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.idx(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        let i = self.idx(y, x, ch);
        self.data[i] = v;
    }

    /// Channel vector at spatial position `p = y * w + x`.
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.c..(p + 1) * self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.c..(p + 1) * self.c]
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor3) -> bool {
        self.h == other.h && self.w == other.w && self.c == other.c
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// An `h × w` map of class IDs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<ClassId>,
}

impl LabelMap {
    pub fn filled(h: usize, w: usize, class: ClassId) -> Self {
        Self {
            h,
            w,
            data: vec![class; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<ClassId>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::contract(format!(
                "label data length {} does not match {h}x{w}",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> ClassId {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: ClassId) {
        self.data[y * self.w + x] = v;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Nearest-neighbour downsampling by an integer factor. Output cell
    /// `(y, x)` takes the input pixel at `(y*s + s/2, x*s + s/2)`.
    pub fn downsample(&self, stride: usize) -> LabelMap {
        let h = self.h / stride;
        let w = self.w / stride;
        let off = stride / 2;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y * stride + off, x * stride + off));
            }
        }
        LabelMap { h, w, data }
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&self, stride: usize) -> LabelMap {
        let h = self.h * stride;
        let w = self.w * stride;
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y / stride, x / stride));
            }
        }
        LabelMap { h, w, data }
    }

    /// Sorted distinct non-background classes present.
    pub fn foreground_classes(&self) -> Vec<ClassId> {
        let mut seen: Vec<ClassId> = self
            .data
            .iter()
            .copied()
            .filter(|&c| c != BACKGROUND)
            .collect();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Returns `v / ‖v‖₂`, or `None` for a zero (or non-finite) norm.
pub fn normalized(v: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        Some(v.iter().map(|x| x / n).collect())
    } else {
        None
    }
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
