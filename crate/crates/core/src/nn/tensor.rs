use crate::error::{invalid, Result};

/// Dense `(batch, channels, height, width)` tensor, width fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(invalid(format!(
                "tensor {:?} needs {} values, got {}",
                dims,
                len,
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    /// Pixels per channel plane.
    pub fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
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

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.offset(b, c, y, x)]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn same_dims(&self, other: &Tensor4, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                other.dims, self.dims
            )));
        }
        Ok(())
    }

    /// Channel-major copy: `channels x (batch * plane)`.
    pub(crate) fn to_channel_major(&self) -> Vec<f64> {
        let [b, c, _, _] = self.dims;
        let p = self.plane();
        let mut out = vec![0.0; self.data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * p;
                let dst = ci * b * p + bi * p;
                out[dst..dst + p].copy_from_slice(&self.data[src..src + p]);
            }
        }
        out
    }

    pub(crate) fn from_channel_major(dims: [usize; 4], cm: &[f64]) -> Self {
        let [b, c, h, w] = dims;
        let p = h * w;
        let mut data = vec![0.0; cm.len()];
        for bi in 0..b {
            for ci in 0..c {
                let dst = (bi * c + ci) * p;
                let src = ci * b * p + bi * p;
                data[dst..dst + p].copy_from_slice(&cm[src..src + p]);
            }
        }
        Self { dims, data }
    }
}
