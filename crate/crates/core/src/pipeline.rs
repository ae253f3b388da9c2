//! Dataset assembly, patch sampling, training and tiled inference.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::nn::{adam_step, mse_loss, AdamState, Architecture, Layer, Model, Tensor4};
use crate::projection::{build_bp_tensor, radon, uniform_angles, BpTensor, Image, ProjectionGeometry, Sinogram};

/// The eight symmetries of the square. Each maps output pixel `(r, c)` of a
/// `p x p` patch to the source pixel it is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dihedral {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipHorizontal,
    FlipVertical,
    Transpose,
    AntiTranspose,
}

impl Dihedral {
    pub const ALL: [Dihedral; 8] = [
        Dihedral::Identity,
        Dihedral::Rot90,
        Dihedral::Rot180,
        Dihedral::Rot270,
        Dihedral::FlipHorizontal,
        Dihedral::FlipVertical,
        Dihedral::Transpose,
        Dihedral::AntiTranspose,
    ];

    #[inline]
    pub fn source(self, r: usize, c: usize, p: usize) -> (usize, usize) {
        let l = p - 1;
        match self {
            Dihedral::Identity => (r, c),
            Dihedral::Rot90 => (c, l - r),
            Dihedral::Rot180 => (l - r, l - c),
            Dihedral::Rot270 => (l - c, r),
            Dihedral::FlipHorizontal => (r, l - c),
            Dihedral::FlipVertical => (l - r, c),
            Dihedral::Transpose => (c, r),
            Dihedral::AntiTranspose => (l - c, l - r),
        }
    }

    /// Transforms every `p x p` plane of `planes` the same way.
    pub fn apply(self, planes: &[f64], p: usize) -> Vec<f64> {
        let mut out = vec![0.0; planes.len()];
        for (src, dst) in planes.chunks_exact(p * p).zip(out.chunks_exact_mut(p * p)) {
            for r in 0..p {
                for c in 0..p {
                    let (sr, sc) = self.source(r, c, p);
                    dst[r * p + c] = src[sr * p + sc];
                }
            }
        }
        out
    }
}

/// An aligned input/target window pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub scan: usize,
    /// Top-left `(row, col)` of the window before augmentation.
    pub origin: (usize, usize),
    pub transform: Dihedral,
    pub size: usize,
    /// `views x size x size`.
    pub input: Vec<f64>,
    /// `size x size`.
    pub target: Vec<f64>,
}

/// Copies the `p x p` window at `origin` out of each `n x n` plane.
pub fn window(planes: &[f64], n: usize, origin: (usize, usize), p: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(planes.len() / (n * n) * p * p);
    for plane in planes.chunks_exact(n * n) {
        for r in origin.0..origin.0 + p {
            out.extend_from_slice(&plane[r * n + origin.1..r * n + origin.1 + p]);
        }
    }
    out
}

/// Samples `count` windows uniformly (with replacement) and augments each
/// with a uniformly chosen dihedral transform shared by all channels and
/// the target. Deterministic in `(seed, scan)`.
pub fn extract_patches(
    z: &BpTensor,
    x: &Image,
    count: usize,
    patch: usize,
    seed: u64,
    scan: usize,
) -> Result<Vec<PatchPair>> {
    let n = z.size();
    if x.size() != n {
        return Err(invalid(format!("tensor is {n}x{n}, image is {0}x{0}", x.size())));
    }
    if count == 0 {
        return Err(invalid("patch count must be at least 1"));
    }
    if patch == 0 || patch > n {
        return Err(invalid(format!("patch size {patch} does not fit in {n}x{n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scan as u64);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let origin = (rng.gen_range(0..=n - patch), rng.gen_range(0..=n - patch));
        let transform = Dihedral::ALL[rng.gen_range(0..8)];
        out.push(PatchPair {
            scan,
            origin,
            transform,
            size: patch,
            input: transform.apply(&window(z.data(), n, origin, patch), patch),
            target: transform.apply(&window(x.data(), n, origin, patch), patch),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Lite,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(Preset::Lite),
            "paper" => Ok(Preset::Paper),
            other => Err(invalid(format!("unknown preset {other:?} (expected lite or paper)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Lite => "lite",
            Preset::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub patches_per_scan: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// 50 epochs, batch 128, 3200 patches per scan (256000 over 80 scans),
    /// 15 middle blocks of width 64.
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            epochs: 50,
            batch_size: 128,
            lr_start: 1e-3,
            lr_end: 1e-5,
            patches_per_scan: 3200,
            patch_size: 8,
            depth: 15,
            width: 64,
            seed: 0,
        }
    }

    /// Desk-scale run: 5 middle blocks of width 32, 250 patches per scan
    /// (20000 over 80 scans), 15 epochs, batch 64.
    pub fn lite() -> Self {
        Self {
            preset: Preset::Lite,
            epochs: 15,
            batch_size: 64,
            patches_per_scan: 250,
            depth: 5,
            width: 32,
            ..Self::paper()
        }
    }

    pub fn for_preset(preset: Preset) -> Self {
        match preset {
            Preset::Lite => Self::lite(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(invalid("batch size must be at least 2 for batch normalization"));
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(invalid(format!(
                "learning rates must satisfy start >= end > 0, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.patches_per_scan == 0 || self.patch_size < 3 || self.width == 0 {
            return Err(invalid("patch count, patch size (>= 3) and width must be positive"));
        }
        Ok(())
    }

    pub fn architecture(&self, views: usize) -> Architecture {
        Architecture {
            views,
            width: self.width,
            depth: self.depth,
        }
    }
}

/// Geometric decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Usage(format!(
            "epoch {epoch} is outside 0..{}",
            config.epochs
        )));
    }
    if config.epochs == 1 {
        return Ok(config.lr_start);
    }
    let progress = epoch as f64 / (config.epochs - 1) as f64;
    Ok(config.lr_start * (config.lr_end / config.lr_start).powf(progress))
}

/// Ordered train/test split of scan ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    /// The first `train_count` ids train, the rest test.
    pub fn ordered(count: usize, train_count: usize) -> Result<Self> {
        if train_count == 0 || train_count >= count {
            return Err(invalid(format!(
                "cannot split {count} scans with {train_count} for training"
            )));
        }
        Ok(Self {
            train: (0..train_count).collect(),
            test: (train_count..count).collect(),
        })
    }

    /// 80/20 by ascending id.
    pub fn default_for(count: usize) -> Result<Self> {
        Self::ordered(count, (count * 4 / 5).max(1))
    }

    pub fn validate(&self, count: usize) -> Result<()> {
        let mut all: Vec<usize> = self.train.iter().chain(&self.test).copied().collect();
        all.sort_unstable();
        if all != (0..count).collect::<Vec<_>>() {
            return Err(invalid("split must partition the scan ids"));
        }
        if self.train.is_empty() {
            return Err(invalid("split has no training scans"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
        format!("train={}\ntest={}\n", join(&self.train), join(&self.test))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let map = crate::io::parse_key_values(text).map_err(invalid)?;
        let ids = |k: &str| -> Result<Vec<usize>> {
            let v = map.get(k).ok_or_else(|| invalid(format!("split is missing {k}")))?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| s.trim().parse().map_err(|e| invalid(format!("split {k}: {e}"))))
                .collect()
        };
        Ok(Self {
            train: ids("train")?,
            test: ids("test")?,
        })
    }
}

/// A phantom with its back-projection tensor.
#[derive(Debug, Clone)]
pub struct Scan {
    pub id: usize,
    pub image: Image,
    pub bp: BpTensor,
}

/// Projects every image at `views` uniform angles and stacks its
/// single-view back projections.
pub fn prepare_scans(images: &[Image], views: usize, geometry: &ProjectionGeometry) -> Result<Vec<Scan>> {
    let angles = uniform_angles(views);
    images
        .iter()
        .enumerate()
        .map(|(id, image)| {
            let sino = radon(image, &angles, geometry)?;
            Ok(Scan {
                id,
                image: image.clone(),
                bp: build_bp_tensor(&sino, geometry)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// One `epoch,lr,mean_loss` line per epoch.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{},{},{}", e.epoch, e.lr, e.mean_loss).unwrap();
        }
        s
    }
}

/// Samples training patches from the manifest's training scans only.
pub fn training_patches(scans: &[Scan], manifest: &SplitManifest, config: &TrainConfig) -> Result<Vec<PatchPair>> {
    let mut patches = Vec::with_capacity(manifest.train.len() * config.patches_per_scan);
    for &id in &manifest.train {
        let scan = scans
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| invalid(format!("training scan {id} is not in the dataset")))?;
        patches.extend(extract_patches(
            &scan.bp,
            &scan.image,
            config.patches_per_scan,
            config.patch_size,
            config.seed,
            id,
        )?);
    }
    Ok(patches)
}

fn batch_tensors(patches: &[&PatchPair], views: usize, p: usize) -> Result<(Tensor4, Tensor4)> {
    let b = patches.len();
    let mut input = Vec::with_capacity(b * views * p * p);
    let mut target = Vec::with_capacity(b * p * p);
    for pp in patches {
        input.extend_from_slice(&pp.input);
        target.extend_from_slice(&pp.target);
    }
    Ok((Tensor4::new([b, views, p, p], input)?, Tensor4::new([b, 1, p, p], target)?))
}

/// Minimizes the batch MSE with Adam over shuffled patch mini-batches.
/// `on_epoch` sees each epoch's log line as soon as it is complete.
pub fn train_with(
    scans: &[Scan],
    manifest: &SplitManifest,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, TrainLog)> {
    config.validate()?;
    manifest.validate(scans.len())?;
    let views = scans
        .first()
        .map(|s| s.bp.views())
        .ok_or_else(|| invalid("dataset is empty"))?;
    let patches = training_patches(scans, manifest, config)?;
    if let Some(p) = patches.iter().find(|p| !manifest.train.contains(&p.scan)) {
        return Err(invalid(format!("patch from non-training scan {} reached the optimizer", p.scan)));
    }

    let mut model = Model::new(config.architecture(views), config.seed)?;
    let mut adam = AdamState::new(&model.param_lengths());
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX);
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config)?;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&PatchPair> = chunk.iter().map(|&i| &patches[i]).collect();
            let (input, target) = batch_tensors(&batch, views, config.patch_size)?;
            let (pred, tape) = model.forward_train(&input).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} batch {bi}: {m}")),
                other => other,
            })?;
            let (loss, grad) = mse_loss(&pred, &target)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch} batch {bi}")));
            }
            let grads = model.backward(&tape, &grad)?;
            adam_step(&mut model.params_mut(), &grads, &mut adam, lr).map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("epoch {epoch} batch {bi}: {m}")),
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        if seen == 0 {
            return Err(invalid("no mini-batch holds at least two patches"));
        }
        let entry = EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / seen as f64,
        };
        on_epoch(&entry);
        log.epochs.push(entry);
    }
    for layer in model.layers_mut() {
        if let Layer::BatchNorm(bn) = layer {
            bn.clear_cache();
        }
    }
    Ok((model, log))
}

pub fn train(scans: &[Scan], manifest: &SplitManifest, config: &TrainConfig) -> Result<(Model, TrainLog)> {
    train_with(scans, manifest, config, |_| {})
}

/// Patch size used when tiling a slice at inference time.
pub const INFER_PATCH: usize = 8;
/// Default stride between inference tiles. Equal to the patch size, so the
/// tiles partition the slice; smaller strides average overlapping tiles and
/// score higher at a roughly quadratic cost in run time.
pub const INFER_STRIDE: usize = 8;

/// Tile origins along one axis: `0, stride, ...`, with the last tile flush
/// against the far edge. Strides beyond `patch` are clamped so no pixel is
/// skipped.
pub fn tile_origins(n: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || patch > n {
        return Err(invalid(format!("cannot tile {n} pixels with patch {patch} and stride {stride}")));
    }
    let mut origins: Vec<usize> = (0..=n - patch).step_by(stride.min(patch)).collect();
    if *origins.last().unwrap() != n - patch {
        origins.push(n - patch);
    }
    Ok(origins)
}

/// Runs the network on overlapping `patch`-sized tiles of `z` and averages
/// the overlapping predictions. Tiles see the same context as training
/// patches, so zero padding at tile borders matches what the network learned.
pub fn reconstruct_tiled(z: &BpTensor, model: &Model, patch: usize, stride: usize) -> Result<Image> {
    let n = z.size();
    let m = z.views();
    if m != model.architecture().views {
        return Err(invalid(format!(
            "back-projection tensor has {m} views, model was trained on {}",
            model.architecture().views
        )));
    }
    let origins = tile_origins(n, patch, stride)?;
    let tiles: Vec<(usize, usize)> =
        origins.iter().flat_map(|&r| origins.iter().map(move |&c| (r, c))).collect();
    let plane = patch * patch;
    let mut input = Vec::with_capacity(tiles.len() * m * plane);
    for &origin in &tiles {
        input.extend(window(z.data(), n, origin, patch));
    }
    let out = model.forward(&Tensor4::new([tiles.len(), m, patch, patch], input)?)?;
    let mut sum = vec![0.0; n * n];
    let mut hits = vec![0u32; n * n];
    for (k, &(r0, c0)) in tiles.iter().enumerate() {
        let tile = &out.data()[k * plane..(k + 1) * plane];
        for r in 0..patch {
            for c in 0..patch {
                let idx = (r0 + r) * n + c0 + c;
                sum[idx] += tile[r * patch + c];
                hits[idx] += 1;
            }
        }
    }
    let data = sum.iter().zip(&hits).map(|(s, &h)| s / f64::from(h)).collect();
    Image::new(n, data)
}

/// Reconstructs a slice from a sparse-view sinogram with a trained model,
/// clamped to `[0, 1]`.
pub fn reconstruct_dbp(sino: &Sinogram, model: &Model, geometry: &ProjectionGeometry) -> Result<Image> {
    reconstruct_dbp_with_stride(sino, model, geometry, INFER_STRIDE)
}

pub fn reconstruct_dbp_with_stride(
    sino: &Sinogram,
    model: &Model,
    geometry: &ProjectionGeometry,
    stride: usize,
) -> Result<Image> {
    let expected = model.architecture().views;
    if sino.views() != expected {
        return Err(invalid(format!(
            "sinogram has {} views, model was trained on {expected}",
            sino.views()
        )));
    }
    let z = build_bp_tensor(sino, geometry)?;
    let patch = INFER_PATCH.min(z.size());
    Ok(reconstruct_tiled(&z, model, patch, stride)?.clamp_unit())
}
