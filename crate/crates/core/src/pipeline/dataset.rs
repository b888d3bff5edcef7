use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};

use crate::error::{invalid_arg, Error, Result};
use crate::image_io::{load_image, save_image};
use crate::loss::quantize_8bit;
use crate::rainmix::{composite_rainy, generate_streak_map, StreakStyle};
use crate::rng::PinnedRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub name: String,
    pub rainy: PathBuf,
    pub clean: PathBuf,
}

/// Rainy/clean file pairs matched by file name across two directories.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub pairs: Vec<PairPaths>,
    pub split: Split,
}

/// Sorted `*.png` files directly inside `dir`.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .is_some_and(|ext| ext.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetIndex {
    pub fn discover(
        rainy_dir: impl AsRef<Path>,
        clean_dir: impl AsRef<Path>,
        split: Split,
    ) -> Result<Self> {
        let (rainy_dir, clean_dir) = (rainy_dir.as_ref(), clean_dir.as_ref());
        let clean: BTreeMap<String, PathBuf> = list_pngs(clean_dir)?
            .into_iter()
            .map(|p| (file_name(&p), p))
            .collect();
        let mut pairs = Vec::new();
        for rainy in list_pngs(rainy_dir)? {
            let name = file_name(&rainy);
            let clean = clean.get(&name).ok_or_else(|| {
                invalid_arg!(
                    "rainy image {} has no counterpart in {}",
                    rainy.display(),
                    clean_dir.display()
                )
            })?;
            pairs.push(PairPaths {
                name,
                rainy,
                clean: clean.clone(),
            });
        }
        if pairs.is_empty() {
            return Err(Error::InvalidState(format!(
                "no PNG images found in {}",
                rainy_dir.display()
            )));
        }
        Ok(Self { pairs, split })
    }

    pub fn load(&self) -> Result<Dataset> {
        let pairs = self
            .pairs
            .iter()
            .map(|p| {
                Ok(ImagePair {
                    name: p.name.clone(),
                    rainy: load_image(&p.rainy)?,
                    clean: load_image(&p.clean)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(pairs)
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub name: String,
    pub rainy: Tensor,
    pub clean: Tensor,
}

/// In-memory image pairs, each `(1, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
}

impl Dataset {
    pub fn new(pairs: Vec<ImagePair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidState("dataset is empty".into()));
        }
        for p in &pairs {
            if p.rainy.shape() != p.clean.shape() {
                return Err(invalid_arg!(
                    "pair {}: rainy {:?} and clean {:?} differ in shape",
                    p.name,
                    p.rainy.shape(),
                    p.clean.shape()
                ));
            }
            let (n, _, _, _) = p.rainy.dims4()?;
            if n != 1 {
                return Err(invalid_arg!("pair {}: expected a single image", p.name));
            }
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Dataset whose rainy inputs are the clean images themselves.
    pub fn clean_only(&self) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|p| ImagePair {
                    name: p.name.clone(),
                    rainy: p.clean.clone(),
                    clean: p.clean.clone(),
                })
                .collect(),
        }
    }

    /// Writes `rainy/<name>` and `clean/<name>` PNGs under `root`.
    pub fn write_dirs(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for sub in ["rainy", "clean"] {
            let d = root.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for p in &self.pairs {
            save_image(root.join("rainy").join(&p.name), &p.rainy)?;
            save_image(root.join("clean").join(&p.name), &p.clean)?;
        }
        Ok(())
    }
}

/// Smooth RGB test texture: colour gradient, sinusoidal shading and a few
/// flat-coloured rectangles and discs for hard edges. Values stay in `[0.05, 0.85]`.
pub fn clean_texture<R: Rng + ?Sized>(height: usize, width: usize, rng: &mut R) -> Tensor {
    let mut base = [[0.0; 3]; 3];
    for c in base.iter_mut() {
        for v in c.iter_mut() {
            *v = rng.random_range(0.15..0.7);
        }
    }
    let freq = (rng.random_range(1.0..4.0), rng.random_range(1.0..4.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(2..5) {
        let colour = [
            rng.random_range(0.05..0.85),
            rng.random_range(0.05..0.85),
            rng.random_range(0.05..0.85),
        ];
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let r = rng.random_range(0.1..0.3) * height.min(width) as f64;
        let disc = rng.random_bool(0.5);
        shapes.push((colour, cy, cx, r, disc));
    }
    let mut data = vec![0.0; 3 * height * width];
    for y in 0..height {
        let v = y as f64 / height.max(1) as f64;
        for x in 0..width {
            let u = x as f64 / width.max(1) as f64;
            let shade = 0.08 * (std::f64::consts::TAU * (freq.0 * u + freq.1 * v) + phase).sin();
            let mut px = [0.0; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = base[c][0] * (1.0 - u)
                    + base[c][1] * u * (1.0 - v)
                    + base[c][2] * u * v
                    + shade;
            }
            for &(colour, cy, cx, r, disc) in &shapes {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= r * r
                } else {
                    dy.abs() <= r && dx.abs() <= 0.6 * r
                };
                if inside {
                    px = colour;
                }
            }
            for (c, p) in px.iter().enumerate() {
                data[(c * height + y) * width + x] = p.clamp(0.05, 0.85);
            }
        }
    }
    Tensor::new(vec![1, 3, height, width], data).expect("consistent shape")
}

/// `count` clean textures with rainy counterparts built by compositing
/// procedural streak maps, quantised to 8 bits so they survive a PNG round
/// trip unchanged. Names are `pair_000.png`, ...
pub fn synthetic_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || size == 0 {
        return Err(invalid_arg!(
            "synthetic dataset needs count >= 1 and size >= 1"
        ));
    }
    let mut rng = PinnedRng::seed_from_u64(seed);
    let style = StreakStyle::default();
    let pairs = (0..count)
        .map(|i| {
            let clean = quantize_8bit(&clean_texture(size, size, &mut rng));
            let rain = generate_streak_map(size, &style, &mut rng)?;
            Ok(ImagePair {
                name: format!("pair_{i:03}.png"),
                rainy: quantize_8bit(&composite_rainy(&clean, &rain)?),
                clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discover_matches_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(3, 16, 1).unwrap();
        ds.write_dirs(dir.path()).unwrap();
        let idx = DatasetIndex::discover(
            dir.path().join("rainy"),
            dir.path().join("clean"),
            Split::Train,
        )
        .unwrap();
        assert_eq!(idx.pairs.len(), 3);
        assert_eq!(idx.pairs[1].name, "pair_001.png");
        let loaded = idx.load().unwrap();
        assert_eq!(loaded.len(), 3);
        assert!(loaded.pairs[0].clean.max_abs_diff(&ds.pairs[0].clean) <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn missing_counterpart_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        synthetic_dataset(2, 8, 2)
            .unwrap()
            .write_dirs(dir.path())
            .unwrap();
        std::fs::remove_file(dir.path().join("clean/pair_001.png")).unwrap();
        let err = DatasetIndex::discover(
            dir.path().join("rainy"),
            dir.path().join("clean"),
            Split::Val,
        )
        .unwrap_err();
        assert!(err.to_string().contains("pair_001.png"));
    }

    #[test]
    fn empty_directory_is_invalid_state() {
        let dir = tempfile::tempdir().unwrap();
        let err = DatasetIndex::discover(dir.path(), dir.path(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::InvalidState(_)));
        assert!(matches!(Dataset::new(vec![]), Err(Error::InvalidState(_))));
    }

    #[test]
    fn synthetic_pairs_are_rainier_than_clean() {
        let ds = synthetic_dataset(4, 32, 3).unwrap();
        for p in &ds.pairs {
            assert!(p
                .rainy
                .data()
                .iter()
                .zip(p.clean.data())
                .all(|(r, c)| r >= c));
            assert!(p.rainy.sum() > p.clean.sum());
        }
    }
}
