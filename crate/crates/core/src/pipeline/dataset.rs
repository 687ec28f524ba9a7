use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, invalid, Error, Result};
use crate::raster::{Grid, RgbImage};
use crate::scene::SegmentationMap;

/// Contents of `classes.json`: label names in id order and the subset
/// treated as object classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub classes: Vec<String>,
    pub foreground: Vec<String>,
}

impl ClassInfo {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let info: Self = serde_json::from_slice(&text)?;
        info.validate()?;
        Ok(info)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.classes.len() > 256 {
            return Err(invalid!("need 1..=256 classes, got {}", self.classes.len()));
        }
        for f in &self.foreground {
            self.id_of(f)?;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn id_of(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| invalid!("unknown class {name}"))
    }

    pub fn name_of(&self, id: usize) -> &str {
        self.classes.get(id).map(String::as_str).unwrap_or("?")
    }

    /// Sorted label ids of the object classes.
    pub fn foreground_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.foreground.iter().filter_map(|f| self.id_of(f).ok()).collect();
        ids.sort_unstable();
        ids
    }

    pub fn background_flags(&self) -> Vec<bool> {
        let fg = self.foreground_ids();
        (0..self.num_classes()).map(|c| !fg.contains(&c)).collect()
    }

    pub fn segmentation(&self, labels: Grid<u8>) -> Result<SegmentationMap> {
        SegmentationMap::new(labels, self.num_classes(), self.foreground_ids())
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub seg: SegmentationMap,
    pub instances: Option<Grid<u16>>,
}

/// `root/classes.json` plus `root/samples/<name>/{image,seg,inst}.png`; the
/// instance map is optional.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub classes: ClassInfo,
    pub samples: Vec<Sample>,
    /// SHA-256 over every file read.
    pub id: String,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let classes = ClassInfo::load(&root.join("classes.json"))?;
        let dir = root.join("samples");
        let mut names: Vec<String> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(invalid!("no samples under {}", dir.display()));
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&classes)?);
        let mut samples = Vec::new();
        for name in names {
            let d = dir.join(&name);
            for f in ["image.png", "seg.png", "inst.png"] {
                if let Ok(bytes) = std::fs::read(d.join(f)) {
                    hasher.update(name.as_bytes());
                    hasher.update(&bytes);
                }
            }
            let sample = load_sample(&d, &name, &classes)?;
            samples.push(sample);
        }
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            samples,
            id: hex::encode(hasher.finalize()),
        })
    }

    /// Fails unless every sample is `size x size`.
    pub fn check_size(&self, size: usize) -> Result<()> {
        for s in &self.samples {
            if s.image.dims() != (size, size) {
                return Err(dim_err!("sample {} is {:?}, expected {size}x{size}", s.name, s.image.dims()));
            }
        }
        Ok(())
    }
}

fn load_sample(dir: &Path, name: &str, classes: &ClassInfo) -> Result<Sample> {
    let image = RgbImage::load_png(&dir.join("image.png"))?;
    let labels = Grid::<u8>::load_png_u8(&dir.join("seg.png"))?;
    if labels.dims() != image.dims() {
        return Err(dim_err!("{name}: seg {:?} vs image {:?}", labels.dims(), image.dims()));
    }
    let seg = classes.segmentation(labels)?;
    let inst_path = dir.join("inst.png");
    let instances = if inst_path.exists() {
        let inst = Grid::<u16>::load_png_u16(&inst_path)?;
        if inst.dims() != image.dims() {
            return Err(dim_err!("{name}: inst {:?} vs image {:?}", inst.dims(), image.dims()));
        }
        Some(inst)
    } else {
        None
    };
    Ok(Sample {
        name: name.to_string(),
        image,
        seg,
        instances,
    })
}

pub const TOY_CLASSES: [&str; 5] = ["sky", "road", "vegetation", "car", "person"];
pub const TOY_FOREGROUND: [&str; 2] = ["car", "person"];

/// Street-like synthetic scenes: sky, tree line, road, a few cars with random
/// paint and one or two pedestrians.
pub fn make_toy_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 32 {
        return Err(invalid!("toy scenes need size >= 32, got {size}"));
    }
    let classes = ClassInfo {
        classes: TOY_CLASSES.iter().map(|s| s.to_string()).collect(),
        foreground: TOY_FOREGROUND.iter().map(|s| s.to_string()).collect(),
    };
    std::fs::create_dir_all(root.join("samples")).map_err(|e| Error::io(root, e))?;
    let cpath = root.join("classes.json");
    std::fs::write(&cpath, serde_json::to_vec_pretty(&classes)?).map_err(|e| Error::io(&cpath, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let (image, labels, inst) = toy_scene(size, &mut rng);
        let dir = root.join("samples").join(format!("{i:04}"));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        image.save_png(&dir.join("image.png"))?;
        labels.save_png_u8(&dir.join("seg.png"))?;
        inst.save_png_u16(&dir.join("inst.png"))?;
    }
    Dataset::load(root)
}

const SKY: u8 = 0;
const ROAD: u8 = 1;
const VEGETATION: u8 = 2;
const CAR: u8 = 3;
const PERSON: u8 = 4;

fn toy_scene(n: usize, rng: &mut impl Rng) -> (RgbImage, Grid<u8>, Grid<u16>) {
    let s = n as f64;
    let mut img = RgbImage::new(n, n);
    let mut labels = Grid::<u8>::new(n, n);
    let mut inst = Grid::<u16>::new(n, n);

    let horizon = (s * rng.gen_range(0.40..0.55)) as usize;
    let tree_amp = s * rng.gen_range(0.03..0.08);
    let tree_freq = rng.gen_range(0.15..0.35) * 64.0 / s;
    let phase = rng.gen_range(0.0..6.28);
    let sky_top = [rng.gen_range(0.35..0.55), rng.gen_range(0.55..0.75), rng.gen_range(0.85..1.0)];
    let road_tone = rng.gen_range(0.30..0.45f32);
    let green = [rng.gen_range(0.10..0.25), rng.gen_range(0.40..0.60), rng.gen_range(0.10..0.25)];
    for y in 0..n {
        for x in 0..n {
            let tree_top = horizon as f64 - s * 0.12 - tree_amp * (1.0 + (x as f64 * tree_freq + phase).sin());
            let (class, px) = if y >= horizon {
                let t = (y - horizon) as f32 / (n - horizon) as f32;
                let stripe = (x as i64 - n as i64 / 2).abs() < (n / 40).max(1) as i64 && (y / 4) % 2 == 0;
                let v = if stripe { 0.85 } else { road_tone + 0.1 * t };
                (ROAD, [v, v, v * 1.02])
            } else if (y as f64) >= tree_top {
                let shade = 0.85 + 0.15 * ((x * 7 + y * 3) % 5) as f32 / 5.0;
                (VEGETATION, [green[0] * shade, green[1] * shade, green[2] * shade])
            } else {
                let t = y as f32 / horizon.max(1) as f32;
                (SKY, [sky_top[0] + 0.3 * t, sky_top[1] + 0.2 * t, sky_top[2]])
            };
            labels.set(y, x, class);
            img.set_pixel(y, x, px.map(|v| v.clamp(0.0, 1.0)));
        }
    }

    let mut next_id = 1u16;
    let cars = rng.gen_range(1..=3);
    for _ in 0..cars {
        let w = (s * rng.gen_range(0.20..0.32)) as usize;
        let h = (w as f64 * rng.gen_range(0.45..0.6)) as usize;
        let bottom = rng.gen_range(horizon + h / 2..n.saturating_sub(1).max(horizon + h / 2 + 1)).min(n - 1);
        let top = bottom.saturating_sub(h);
        let left = rng.gen_range(0..n - w);
        let paint = [rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32)];
        let id = next_id;
        next_id += 1;
        for y in top..=bottom {
            for x in left..left + w {
                let ry = (y - top) as f64 / h.max(1) as f64;
                let rx = (x - left) as f64 / w as f64;
                // Cabin narrower than the body.
                if ry < 0.4 && !(0.2..0.8).contains(&rx) {
                    continue;
                }
                let window = ry < 0.4 && ry > 0.1 && (0.28..0.72).contains(&rx);
                let wheel = ry > 0.8 && ((0.12..0.3).contains(&rx) || (0.7..0.88).contains(&rx));
                let px = if wheel {
                    [0.08, 0.08, 0.08]
                } else if window {
                    [0.55, 0.7, 0.8]
                } else {
                    let shade = 1.0 - 0.25 * ry as f32;
                    paint.map(|c| c * shade)
                };
                labels.set(y, x, CAR);
                inst.set(y, x, id);
                img.set_pixel(y, x, px);
            }
        }
    }
    let people = rng.gen_range(1..=2);
    for _ in 0..people {
        let h = (s * rng.gen_range(0.18..0.26)) as usize;
        let w = (h / 4).max(2);
        let bottom = rng.gen_range(horizon + 2..n);
        let top = bottom.saturating_sub(h);
        let left = rng.gen_range(0..n - w);
        let shirt = [rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32), rng.gen_range(0.0..1.0f32)];
        let id = next_id;
        next_id += 1;
        for y in top..=bottom {
            for x in left..left + w {
                let ry = (y - top) as f64 / h.max(1) as f64;
                let px = if ry < 0.2 {
                    [0.85, 0.65, 0.5]
                } else if ry < 0.6 {
                    shirt
                } else {
                    [0.15, 0.15, 0.3]
                };
                labels.set(y, x, PERSON);
                inst.set(y, x, id);
                img.set_pixel(y, x, px);
            }
        }
    }
    (img, labels, inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::foreground_instances;

    #[test]
    fn toy_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = make_toy_dataset(dir.path(), 3, 64, 9).unwrap();
        assert_eq!(ds.samples.len(), 3);
        ds.check_size(64).unwrap();
        assert_eq!(ds.classes.foreground_ids(), vec![3, 4]);
        for s in &ds.samples {
            let inst = foreground_instances(&s.seg, s.instances.as_ref()).unwrap();
            assert!(!inst.is_empty());
        }
        let again = Dataset::load(dir.path()).unwrap();
        assert_eq!(again.id, ds.id);
    }

    #[test]
    fn class_lookup() {
        let info = ClassInfo {
            classes: vec!["a".into(), "b".into()],
            foreground: vec!["b".into()],
        };
        assert_eq!(info.id_of("b").unwrap(), 1);
        assert!(info.id_of("c").is_err());
        assert_eq!(info.background_flags(), vec![true, false]);
        let bad = ClassInfo {
            classes: vec!["a".into()],
            foreground: vec!["z".into()],
        };
        assert!(bad.validate().is_err());
    }
}
