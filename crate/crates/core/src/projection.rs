//! Discrete parallel-beam projection.
//!
//! The forward projector is pixel driven: every pixel centre is mapped to a
//! detector coordinate and its value is split between the two bracketing
//! bins with linear-interpolation weights. The single-view back projector
//! gathers with the same weights, so it is the exact transpose of the
//! forward projector rather than an approximation of it.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// Square image, row-major, row index increasing downward.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(invalid("image size must be positive"));
        }
        if data.len() != size * size {
            return Err(invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                size * size
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite image value at index {i}")));
        }
        Ok(Self { size, data })
    }

    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
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
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.size + col] = value;
    }

    pub fn clamp_unit(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    /// Mask of pixels whose centres lie within `(n - 1) / 2` of the grid
    /// centre. Mass inside this disc stays on an `n`-bin detector at every
    /// angle.
    pub fn support_mask(size: usize) -> Vec<bool> {
        let centre = (size as f64 - 1.0) / 2.0;
        let r2 = centre * centre;
        (0..size * size)
            .map(|i| {
                let dy = (i / size) as f64 - centre;
                let dx = (i % size) as f64 - centre;
                dx * dx + dy * dy <= r2
            })
            .collect()
    }
}

/// Parallel-beam geometry: unit detector pitch, rotation about the pixel
/// grid centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionGeometry {
    size: usize,
    channels: usize,
}

impl ProjectionGeometry {
    /// Default geometry with as many detector channels as image columns.
    pub fn new(size: usize) -> Self {
        Self {
            size,
            channels: size,
        }
    }

    pub fn with_channels(size: usize, channels: usize) -> Result<Self> {
        if size == 0 || channels == 0 {
            return Err(invalid("geometry sizes must be positive"));
        }
        Ok(Self { size, channels })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn rotation_centre(&self) -> f64 {
        (self.size as f64 - 1.0) / 2.0
    }

    fn detector_offset(&self) -> f64 {
        (self.channels as f64 - 1.0) / 2.0
    }

    /// Detector coordinate of pixel `(row, col)` at the given angle.
    pub fn detector_coordinate(&self, row: usize, col: usize, angle: f64) -> f64 {
        let c = self.rotation_centre();
        let (s, co) = angle.sin_cos();
        (col as f64 - c) * co + (row as f64 - c) * s + self.detector_offset()
    }

    /// Lower bin and interpolation fraction for detector coordinate `t`, or
    /// `None` when `t` falls off the detector.
    #[inline]
    fn bin(&self, t: f64) -> Option<(usize, f64)> {
        // Coordinates that sit on the detector edge up to rounding are snapped
        // onto it, identically for both directions of the operator pair.
        const SNAP: f64 = 1e-9;
        let last = (self.channels - 1) as f64;
        let t = if t < 0.0 && t > -SNAP {
            0.0
        } else if t > last && t < last + SNAP {
            last
        } else {
            t
        };
        if !(0.0..=last).contains(&t) {
            return None;
        }
        let lo = t.floor();
        Some((lo as usize, t - lo))
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.size() != self.size {
            return Err(invalid(format!(
                "image is {}x{}, geometry expects {}x{}",
                image.size(),
                image.size(),
                self.size,
                self.size
            )));
        }
        Ok(())
    }
}

/// Reduces an angle into `[0, pi)`.
pub fn canonical_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(PI);
    if a >= PI {
        0.0
    } else {
        a
    }
}

/// `views` angles evenly spaced over `[0, pi)`, starting at zero.
pub fn uniform_angles(views: usize) -> Vec<f64> {
    (0..views).map(|j| j as f64 * PI / views as f64).collect()
}

fn validate_angles(angles: &[f64]) -> Result<Vec<f64>> {
    if angles.is_empty() {
        return Err(invalid("angle list is empty"));
    }
    if angles.iter().any(|a| !a.is_finite()) {
        return Err(invalid("non-finite view angle"));
    }
    let reduced: Vec<f64> = angles.iter().map(|&a| canonical_angle(a)).collect();
    if reduced.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("view angles must be strictly increasing in [0, pi)"));
    }
    Ok(reduced)
}

/// `channels x views` line integrals; column `j` is the view at `angles[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    channels: usize,
    angles: Vec<f64>,
    /// Row-major `channels x views`.
    data: Vec<f64>,
}

impl Sinogram {
    pub fn new(channels: usize, angles: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let angles = validate_angles(&angles)?;
        if channels == 0 {
            return Err(invalid("sinogram needs at least one channel"));
        }
        if data.len() != channels * angles.len() {
            return Err(invalid(format!(
                "sinogram data has {} values, expected {}x{}",
                data.len(),
                channels,
                angles.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite sinogram value"));
        }
        Ok(Self {
            channels,
            angles,
            data,
        })
    }

    pub fn zeros(channels: usize, angles: Vec<f64>) -> Result<Self> {
        let views = angles.len();
        Self::new(channels, angles, vec![0.0; channels * views])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let m = self.views();
        (0..self.channels).map(|i| self.data[i * m + j]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        let m = self.views();
        for (i, &v) in values.iter().enumerate() {
            self.data[i * m + j] = v;
        }
    }
}

/// Stack of single-view back projections, one `n x n` slab per view.
#[derive(Debug, Clone, PartialEq)]
pub struct BpTensor {
    size: usize,
    angles: Vec<f64>,
    /// Slab-major: `views x size x size`.
    data: Vec<f64>,
}

impl BpTensor {
    pub fn new(size: usize, angles: Vec<f64>, data: Vec<f64>) -> Result<Self> {
        let angles = validate_angles(&angles)?;
        if data.len() != angles.len() * size * size {
            return Err(invalid(format!(
                "tensor data has {} values, expected {}x{}x{}",
                data.len(),
                angles.len(),
                size,
                size
            )));
        }
        Ok(Self { size, angles, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn slab(&self, j: usize) -> &[f64] {
        let len = self.size * self.size;
        &self.data[j * len..(j + 1) * len]
    }
}

/// Projects an image onto the detector at one angle.
pub fn project_view(image: &Image, angle: f64, geometry: &ProjectionGeometry) -> Result<Vec<f64>> {
    geometry.check_image(image)?;
    if image.data().iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite image value"));
    }
    let angle = canonical_angle(angle);
    let n = geometry.size();
    let mut view = vec![0.0; geometry.channels()];
    for r in 0..n {
        for c in 0..n {
            let value = image.get(r, c);
            if value == 0.0 {
                continue;
            }
            if let Some((lo, frac)) = geometry.bin(geometry.detector_coordinate(r, c, angle)) {
                view[lo] += (1.0 - frac) * value;
                if frac > 0.0 {
                    view[lo + 1] += frac * value;
                }
            }
        }
    }
    Ok(view)
}

/// Forward projection at every angle.
pub fn radon(image: &Image, angles: &[f64], geometry: &ProjectionGeometry) -> Result<Sinogram> {
    let angles = validate_angles(angles)?;
    let mut sino = Sinogram::zeros(geometry.channels(), angles.clone())?;
    for (j, &a) in angles.iter().enumerate() {
        let view = project_view(image, a, geometry)?;
        sino.set_column(j, &view);
    }
    Ok(sino)
}

/// Adjoint of [`project_view`]: smears one view back across the image.
pub fn back_project_view(view: &[f64], angle: f64, geometry: &ProjectionGeometry) -> Result<Image> {
    if view.len() != geometry.channels() {
        return Err(invalid(format!(
            "view has {} bins, geometry has {} channels",
            view.len(),
            geometry.channels()
        )));
    }
    if view.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite view value"));
    }
    let angle = canonical_angle(angle);
    let n = geometry.size();
    let mut image = Image::zeros(n);
    for r in 0..n {
        for c in 0..n {
            if let Some((lo, frac)) = geometry.bin(geometry.detector_coordinate(r, c, angle)) {
                let mut v = (1.0 - frac) * view[lo];
                if frac > 0.0 {
                    v += frac * view[lo + 1];
                }
                image.set(r, c, v);
            }
        }
    }
    Ok(image)
}

fn check_sinogram(sino: &Sinogram, geometry: &ProjectionGeometry) -> Result<()> {
    if sino.channels() != geometry.channels() {
        return Err(invalid(format!(
            "sinogram has {} channels, geometry has {}",
            sino.channels(),
            geometry.channels()
        )));
    }
    Ok(())
}

/// Back-projects every view separately and stacks the slabs in view order.
pub fn build_bp_tensor(sino: &Sinogram, geometry: &ProjectionGeometry) -> Result<BpTensor> {
    check_sinogram(sino, geometry)?;
    let n = geometry.size();
    let mut data = Vec::with_capacity(sino.views() * n * n);
    for (j, &a) in sino.angles().iter().enumerate() {
        data.extend_from_slice(back_project_view(&sino.column(j), a, geometry)?.data());
    }
    BpTensor::new(n, sino.angles().to_vec(), data)
}

/// Sum of all single-view back projections.
pub fn back_project(sino: &Sinogram, geometry: &ProjectionGeometry) -> Result<Image> {
    check_sinogram(sino, geometry)?;
    let n = geometry.size();
    let mut acc = Image::zeros(n);
    for (j, &a) in sino.angles().iter().enumerate() {
        let slab = back_project_view(&sino.column(j), a, geometry)?;
        for (dst, src) in acc.data_mut().iter_mut().zip(slab.data()) {
            *dst += src;
        }
    }
    Ok(acc)
}

/// Spatial Ram-Lak tap at integer offset `k` (unit detector pitch).
pub fn ram_lak_tap(k: isize) -> f64 {
    if k == 0 {
        0.25
    } else if k % 2 == 0 {
        0.0
    } else {
        let k = k as f64;
        -1.0 / (PI * PI * k * k)
    }
}

/// Convolves every view with the Ram-Lak kernel, keeping the original
/// `channels` samples of the full linear convolution.
pub fn ramp_filter(sino: &Sinogram) -> Sinogram {
    let nc = sino.channels() as isize;
    let taps: Vec<f64> = (-(nc - 1)..nc).map(ram_lak_tap).collect();
    let mut out = sino.clone();
    for j in 0..sino.views() {
        let col = sino.column(j);
        let filtered: Vec<f64> = (0..nc)
            .map(|i| {
                col.iter()
                    .enumerate()
                    .map(|(k, &v)| taps[(i - k as isize + nc - 1) as usize] * v)
                    .sum()
            })
            .collect();
        out.set_column(j, &filtered);
    }
    out
}

/// Filtered back projection before the final clamp.
pub fn fbp_unclamped(sino: &Sinogram, geometry: &ProjectionGeometry) -> Result<Image> {
    let mut image = back_project(&ramp_filter(sino), geometry)?;
    let weight = PI / sino.views() as f64;
    for v in image.data_mut() {
        *v *= weight;
    }
    Ok(image)
}

/// Filtered back projection, clamped to the phantom range `[0, 1]`.
pub fn fbp(sino: &Sinogram, geometry: &ProjectionGeometry) -> Result<Image> {
    Ok(fbp_unclamped(sino, geometry)?.clamp_unit())
}
