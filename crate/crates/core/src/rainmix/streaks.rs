//! Procedural rain streaks: sparse salt noise smeared by an oriented motion
//! blur, then rescaled so the brightest streak hits a random peak.

use rand::Rng;

use super::{RainMap, RainStreakSet};
use crate::error::{invalid_arg, Result};
use crate::rng::PinnedRng;

/// Streak-set size used when no streak directory is given.
pub const DEFAULT_STREAK_COUNT: usize = 16;
pub const DEFAULT_STREAK_SIZE: usize = 128;
/// RNG stream reserved for seeded streak sets, distinct from the training streams.
const STREAK_STREAM: u64 = 7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreakStyle {
    /// Fraction of pixels seeded with a drop.
    pub density: (f64, f64),
    /// Streak direction in degrees from the x axis (90 is vertical).
    pub angle_deg: (f64, f64),
    /// Motion-blur length in pixels.
    pub length_px: (f64, f64),
    /// Value of the brightest pixel after rescaling.
    pub peak: (f64, f64),
}

impl Default for StreakStyle {
    fn default() -> Self {
        Self {
            density: (0.002, 0.005),
            angle_deg: (60.0, 120.0),
            length_px: (8.0, 24.0),
            peak: (0.6, 1.0),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn splat(buf: &mut [f64], size: usize, x: f64, y: f64, value: f64) {
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    let n = size as isize;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0 && xx >= 0 && yy < n && xx < n {
                buf[yy as usize * size + xx as usize] += value * wx * wy;
            }
        }
    }
}

/// One square streak map of side `size`.
pub fn generate_streak_map<R: Rng + ?Sized>(
    size: usize,
    style: &StreakStyle,
    rng: &mut R,
) -> Result<RainMap> {
    if size == 0 {
        return Err(invalid_arg!("streak map size must be positive"));
    }
    let density = uniform(rng, style.density);
    let (dy, dx) = uniform(rng, style.angle_deg).to_radians().sin_cos();
    let length = uniform(rng, style.length_px);
    let peak = uniform(rng, style.peak);

    let mut buf = vec![0.0; size * size];
    let samples = (2.0 * length).ceil().max(1.0) as usize;
    for y in 0..size {
        for x in 0..size {
            if rng.random::<f64>() >= density {
                continue;
            }
            let value = rng.random_range(0.5..=1.0);
            // line kernel: `samples` equal taps along the streak direction
            for s in 0..samples {
                let t = if samples == 1 {
                    0.0
                } else {
                    (s as f64 / (samples - 1) as f64 - 0.5) * length
                };
                splat(
                    &mut buf,
                    size,
                    x as f64 + t * dx,
                    y as f64 + t * dy,
                    value / samples as f64,
                );
            }
        }
    }
    let max = buf.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        let scale = peak / max;
        buf.iter_mut().for_each(|v| *v *= scale);
    } else {
        // no drop landed: place a single streak through the centre
        let c = size as f64 / 2.0;
        for s in 0..samples {
            let t = (s as f64 / samples.max(2).saturating_sub(1) as f64 - 0.5) * length;
            splat(&mut buf, size, c + t * dx, c + t * dy, peak);
        }
    }
    RainMap::from_vec(size, size, buf)
}

/// `count` procedural maps of side `size`, named `synthetic_000`, ...
pub fn generate_synthetic_streaks<R: Rng + ?Sized>(
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<RainStreakSet> {
    if count < 1 {
        return Err(invalid_arg!("streak count must be >= 1"));
    }
    let style = StreakStyle::default();
    let mut set = RainStreakSet::new();
    for i in 0..count {
        set.push(
            format!("synthetic_{i:03}"),
            generate_streak_map(size, &style, rng)?,
        );
    }
    Ok(set)
}

/// The streak set a seed stands for when no real streaks are supplied.
pub fn seeded_streak_set(count: usize, size: usize, seed: u64) -> Result<RainStreakSet> {
    let mut rng = <PinnedRng as rand::SeedableRng>::seed_from_u64(seed);
    rng.set_stream(STREAK_STREAM);
    generate_synthetic_streaks(count, size, &mut rng)
}
