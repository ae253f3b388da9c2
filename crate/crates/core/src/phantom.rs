//! Multi-grain phantoms: a Voronoi tessellation of the inscribed disc with
//! one uniform intensity per grain.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::projection::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub size: usize,
    pub min_grains: usize,
    pub max_grains: usize,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            min_grains: 6,
            max_grains: 14,
            min_intensity: 0.2,
            max_intensity: 1.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(invalid(format!("phantom size {} is below 8", self.size)));
        }
        if self.min_grains < 2 {
            return Err(invalid("phantoms need at least 2 grains"));
        }
        if self.min_grains > self.max_grains {
            return Err(invalid(format!(
                "grain range {}:{} is empty",
                self.min_grains, self.max_grains
            )));
        }
        let (lo, hi) = (self.min_intensity, self.max_intensity);
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || lo >= hi {
            return Err(invalid(format!("intensity range [{lo}, {hi}] is not a non-empty subrange of [0, 1]")));
        }
        Ok(())
    }
}

/// A Voronoi site in pixel coordinates with the intensity of its cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grain {
    pub row: f64,
    pub col: f64,
    pub intensity: f64,
}

/// Paints the disc support with nearest-site intensities. Ties go to the
/// lowest grain index.
pub fn render_grains(size: usize, grains: &[Grain]) -> Result<Image> {
    if grains.is_empty() {
        return Err(invalid("at least one grain is required"));
    }
    let mask = Image::support_mask(size);
    let mut data = vec![0.0; size * size];
    for (i, px) in data.iter_mut().enumerate() {
        if !mask[i] {
            continue;
        }
        if let Some(k) = nearest_grain(grains, (i / size) as f64, (i % size) as f64) {
            *px = grains[k].intensity;
        }
    }
    Image::new(size, data)
}

/// Index of the grain closest to a point.
pub fn nearest_grain(grains: &[Grain], row: f64, col: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, g) in grains.iter().enumerate() {
        let d = (g.row - row).powi(2) + (g.col - col).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((k, d));
        }
    }
    best.map(|(k, _)| k)
}

/// Draws the grain sites for a spec.
pub fn sample_grains(spec: &PhantomSpec) -> Result<Vec<Grain>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let count = rng.gen_range(spec.min_grains..=spec.max_grains);
    let centre = (spec.size as f64 - 1.0) / 2.0;
    let radius = centre;
    let mut grains = Vec::with_capacity(count);
    while grains.len() < count {
        let dy = rng.gen_range(-radius..=radius);
        let dx = rng.gen_range(-radius..=radius);
        if dx * dx + dy * dy > radius * radius {
            continue;
        }
        let intensity = rng.gen_range(spec.min_intensity..=spec.max_intensity);
        grains.push(Grain {
            row: centre + dy,
            col: centre + dx,
            intensity,
        });
    }
    Ok(grains)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image> {
    render_grains(spec.size, &sample_grains(spec)?)
}

/// `count` phantoms; image `k` uses seed `base_seed + k`.
pub fn generate_dataset(template: &PhantomSpec, count: usize, base_seed: u64) -> Result<Vec<Image>> {
    if count == 0 {
        return Err(invalid("dataset count must be at least 1"));
    }
    (0..count as u64)
        .map(|k| {
            generate_phantom(&PhantomSpec {
                seed: base_seed.wrapping_add(k),
                ..template.clone()
            })
        })
        .collect()
}
