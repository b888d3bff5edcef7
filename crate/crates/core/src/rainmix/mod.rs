//! RainMix augmentation.
//!
//! A rain map `R_org` is drawn from a streak set; four transform chains are
//! sampled (each chain is one of `o1`, `o2 o1`, `o3 o2 o1` over random
//! operations), their warps of `R_org` are mixed with Dirichlet weights into
//! `R_mix`, and the result `w R_org + (1 - w) R_mix` uses a Beta-distributed
//! blend weight `w`. [`composite_rainy`] adds the map onto an image.

mod geometry;
mod streaks;

pub use geometry::{apply_geometric_op, chain_affine, Affine, GeometricOp, OpKind};
pub use streaks::{
    generate_streak_map, generate_synthetic_streaks, seeded_streak_set, StreakStyle,
    DEFAULT_STREAK_COUNT, DEFAULT_STREAK_SIZE,
};

use std::path::Path;

use rand::Rng;
use rand_distr::{Beta, Dirichlet, Distribution};

use crate::error::{invalid_arg, Error, Result};
use crate::image_io;
use crate::tensor::Tensor;

/// Chains whose composite determinant falls below this are resampled.
pub const MIN_CHAIN_DETERMINANT: f64 = 1e-6;

/// Number of mixed chains per draw.
pub const MIX_WIDTH: usize = 4;

/// Single-channel additive rain intensity in `[0, 1]`, stored `(H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RainMap(Tensor);

impl RainMap {
    /// Clamps every value into `[0, 1]`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_arg!("rain map must be non-empty"));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self(Tensor::new(vec![height, width], data)?))
    }

    /// Accepts `(H, W)` or `(1, 1, H, W)`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w] | [1, 1, h, w] => Self::from_vec(h, w, t.data().to_vec()),
            _ => Err(invalid_arg!(
                "rain map must be single-channel, got shape {:?}",
                t.shape()
            )),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[height, width]))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / self.data().len() as f64
    }

    /// `(1, 1, H, W)` view for saving or compositing.
    pub fn to_image(&self) -> Tensor {
        Tensor::new(
            vec![1, 1, self.height(), self.width()],
            self.data().to_vec(),
        )
        .expect("same element count")
    }

    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resized(&self, height: usize, width: usize) -> RainMap {
        if (height, width) == (self.height(), self.width()) {
            return self.clone();
        }
        let (sh, sw) = (self.height(), self.width());
        let (ry, rx) = (sh as f64 / height as f64, sw as f64 / width as f64);
        let src = self.data();
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * ry - 0.5).clamp(0.0, (sh - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(sh - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * rx - 0.5).clamp(0.0, (sw - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(sw - 1);
                let tx = fx - x0 as f64;
                let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
                let bottom = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
                out.push(top * (1.0 - ty) + bottom * ty);
            }
        }
        RainMap::from_vec(height, width, out).expect("non-empty")
    }
}

/// Rain maps with source identifiers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RainStreakSet {
    maps: Vec<RainMap>,
    sources: Vec<String>,
}

impl RainStreakSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, source: impl Into<String>, map: RainMap) {
        self.sources.push(source.into());
        self.maps.push(map);
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&RainMap> {
        self.maps.get(index)
    }

    pub fn source(&self, index: usize) -> Option<&str> {
        self.sources.get(index).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RainMap)> {
        self.sources.iter().map(String::as_str).zip(&self.maps)
    }

    /// Loads every `*.png` in `dir` (sorted by file name) as a grayscale map.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::new();
        for path in crate::pipeline::dataset::list_pngs(dir)? {
            let map = RainMap::from_tensor(&image_io::load_gray(&path)?)?;
            let name = path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            set.push(name, map);
        }
        if set.is_empty() {
            return Err(Error::InvalidState(format!(
                "no PNG rain maps found in {}",
                dir.display()
            )));
        }
        Ok(set)
    }
}

/// Uniform sampling ranges per operation kind, as `(low, high)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpRanges {
    pub rotate_deg: (f64, f64),
    pub shear: (f64, f64),
    pub translate: (f64, f64),
    pub zoom: (f64, f64),
}

impl Default for OpRanges {
    fn default() -> Self {
        Self {
            rotate_deg: (-30.0, 30.0),
            shear: (-0.2, 0.2),
            translate: (-0.1, 0.1),
            zoom: (0.8, 1.25),
        }
    }
}

impl OpRanges {
    /// Zero-width ranges at each kind's identity magnitude.
    pub fn identity() -> Self {
        Self {
            rotate_deg: (0.0, 0.0),
            shear: (0.0, 0.0),
            translate: (0.0, 0.0),
            zoom: (1.0, 1.0),
        }
    }

    pub fn range(&self, kind: OpKind) -> (f64, f64) {
        match kind {
            OpKind::Rotate => self.rotate_deg,
            OpKind::ShearX | OpKind::ShearY => self.shear,
            OpKind::TranslateX | OpKind::TranslateY => self.translate,
            OpKind::ZoomX | OpKind::ZoomY => self.zoom,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> GeometricOp {
        let kind = OpKind::ALL[rng.random_range(0..OpKind::ALL.len())];
        let (lo, hi) = self.range(kind);
        let magnitude = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        GeometricOp::new(kind, magnitude)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RainMixConfig {
    pub dirichlet_alpha: [f64; MIX_WIDTH],
    pub beta: (f64, f64),
    pub ranges: OpRanges,
}

impl Default for RainMixConfig {
    fn default() -> Self {
        Self {
            dirichlet_alpha: [1.0; MIX_WIDTH],
            beta: (1.0, 1.0),
            ranges: OpRanges::default(),
        }
    }
}

/// Every random choice of one RainMix call.
#[derive(Clone, Debug, PartialEq)]
pub struct MixDraw {
    /// Index of `R_org` in the streak set.
    pub source: usize,
    pub weights: [f64; MIX_WIDTH],
    pub blend: f64,
    pub chains: [Vec<GeometricOp>; MIX_WIDTH],
}

pub fn sample_draw<R: Rng + ?Sized>(
    streaks: &RainStreakSet,
    rng: &mut R,
    config: &RainMixConfig,
) -> Result<MixDraw> {
    if streaks.is_empty() {
        return Err(Error::InvalidState(
            "cannot sample from an empty rain streak set".into(),
        ));
    }
    let dirichlet = Dirichlet::new(config.dirichlet_alpha)
        .map_err(|e| invalid_arg!("bad Dirichlet parameters: {e}"))?;
    let beta = Beta::new(config.beta.0, config.beta.1)
        .map_err(|e| invalid_arg!("bad Beta parameters: {e}"))?;

    let source = rng.random_range(0..streaks.len());
    let (h, w) = {
        let m = &streaks.maps[source];
        (m.height(), m.width())
    };
    let weights = dirichlet.sample(rng);
    let chains = std::array::from_fn(|_| loop {
        let ops = [
            config.ranges.sample(rng),
            config.ranges.sample(rng),
            config.ranges.sample(rng),
        ];
        let len = rng.random_range(1..=3);
        let chain = ops[..len].to_vec();
        if chain_affine(&chain, h, w).determinant().abs() >= MIN_CHAIN_DETERMINANT {
            break chain;
        }
    });
    let blend = beta.sample(rng);
    Ok(MixDraw {
        source,
        weights,
        blend,
        chains,
    })
}

/// Evaluates a draw: `R = w R_org + (1 - w) sum_i w_i o_i(R_org)`, clamped.
pub fn apply_draw(streaks: &RainStreakSet, draw: &MixDraw) -> Result<RainMap> {
    let original = streaks
        .get(draw.source)
        .ok_or_else(|| invalid_arg!("draw source {} out of range", draw.source))?;
    let n = original.data().len();
    // R_mix - R_org accumulated as sum_i w_i (o_i(R_org) - R_org); equal to
    // sum_i w_i o_i(R_org) - R_org since the weights sum to one, and exactly
    // zero when every chain is the identity.
    let mut offset = vec![0.0; n];
    for (chain, &wi) in draw.chains.iter().zip(&draw.weights) {
        let warped = apply_geometric_op(original, chain);
        for ((o, &t), &r) in offset.iter_mut().zip(warped.data()).zip(original.data()) {
            *o += wi * (t - r);
        }
    }
    let keep = 1.0 - draw.blend;
    let out = original
        .data()
        .iter()
        .zip(&offset)
        .map(|(&r, &d)| r + keep * d)
        .collect();
    RainMap::from_vec(original.height(), original.width(), out)
}

pub fn rain_mix<R: Rng + ?Sized>(
    streaks: &RainStreakSet,
    rng: &mut R,
    config: &RainMixConfig,
) -> Result<RainMap> {
    let draw = sample_draw(streaks, rng, config)?;
    apply_draw(streaks, &draw)
}

/// `clamp(x + r, 0, 1)` per channel, with `r` resized to the image's size.
pub fn composite_rainy(image: &Tensor, rain: &RainMap) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    let r = rain.resized(h, w);
    let mut out = image.clone();
    for plane in out.data_mut().chunks_exact_mut(h * w).take(n * c) {
        plane
            .iter_mut()
            .zip(r.data())
            .for_each(|(v, &rv)| *v = (*v + rv).clamp(0.0, 1.0));
    }
    Ok(out)
}
