//! Degradation families, synthetic datasets, image files and manifests.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{
    compose, format_specs, gen_clean, parse_specs, BlurParams, Degradation, DegradationSpec, Image, RainParams,
    Sample,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stateless 64-bit mixing of a seed with a sequence of values.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = splitmix(z ^ splitmix(p.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix(z)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A distribution over degradations of one kind, or an ordered composite.
#[derive(Clone, Debug, PartialEq)]
pub enum Family {
    Noise { sigmas: Vec<f64> },
    Haze { airlight: (f64, f64), transmission: (f64, f64) },
    Rain { count: (usize, usize), length: (usize, usize), angle: (f64, f64), intensity: (f64, f64) },
    Blur { length: (usize, usize), angle: (f64, f64) },
    LowLight { gamma: (f64, f64), scale: (f64, f64) },
    Composite(Vec<Family>),
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

impl Family {
    /// Default ranges per kind; `a+b` builds a composite.
    pub fn preset(name: &str, noise_sigmas: &[f64]) -> Result<Self> {
        let name = name.trim();
        if name.contains('+') {
            let parts = name.split('+').map(|p| Self::preset(p, noise_sigmas)).collect::<Result<Vec<_>>>()?;
            return Ok(Self::Composite(parts));
        }
        Ok(match name {
            "noise" => {
                if noise_sigmas.is_empty() || noise_sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
                    return Err(Error::invalid("noise family", format!("invalid sigma list {noise_sigmas:?}")));
                }
                Self::Noise {
                    sigmas: noise_sigmas.to_vec(),
                }
            }
            "haze" => Self::Haze {
                airlight: (0.7, 1.0),
                transmission: (0.4, 0.7),
            },
            "rain" => Self::Rain {
                count: (20, 50),
                length: (6, 12),
                angle: (70.0, 110.0),
                intensity: (0.4, 0.8),
            },
            "blur" => Self::Blur {
                length: (5, 9),
                angle: (0.0, 180.0),
            },
            "lowlight" => Self::LowLight {
                gamma: (1.5, 2.5),
                scale: (0.3, 0.6),
            },
            other => return Err(Error::invalid("family", format!("unknown degradation family {other:?}"))),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Self::Noise { .. } => "noise".into(),
            Self::Haze { .. } => "haze".into(),
            Self::Rain { .. } => "rain".into(),
            Self::Blur { .. } => "blur".into(),
            Self::LowLight { .. } => "lowlight".into(),
            Self::Composite(parts) => parts.iter().map(Self::label).collect::<Vec<_>>().join("+"),
        }
    }

    /// Draws concrete degradations, each with its own seed.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<DegradationSpec> {
        let d = match self {
            Self::Composite(parts) => return parts.iter().flat_map(|p| p.sample(rng)).collect(),
            Self::Noise { sigmas } => Degradation::Noise {
                sigma: sigmas[rng.gen_range(0..sigmas.len())],
            },
            Self::Haze { airlight, transmission } => Degradation::Haze {
                airlight: uniform(rng, *airlight),
                transmission: uniform(rng, *transmission),
            },
            Self::Rain {
                count,
                length,
                angle,
                intensity,
            } => Degradation::Rain(RainParams {
                count: rng.gen_range(count.0..=count.1),
                length: rng.gen_range(length.0..=length.1),
                angle: uniform(rng, *angle),
                intensity: uniform(rng, *intensity),
            }),
            Self::Blur { length, angle } => Degradation::Blur(BlurParams {
                length: rng.gen_range(length.0..=length.1),
                angle: uniform(rng, *angle),
            }),
            Self::LowLight { gamma, scale } => Degradation::LowLight {
                gamma: uniform(rng, *gamma),
                scale: uniform(rng, *scale),
            },
        };
        vec![DegradationSpec::new(d, rng.gen())]
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Synthetic task: which degradations to learn and how much data to draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskConfig {
    pub families: Vec<Family>,
    /// Degradations used only at evaluation time, e.g. composites.
    pub eval_only: Vec<Family>,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Folder of clean images replacing procedural training images.
    pub clean_dir: Option<PathBuf>,
}

impl TaskConfig {
    /// Mixed denoising (sigma 25) and dehazing on 64x64 procedural images.
    pub fn smoke() -> Self {
        Self {
            families: vec![Family::preset("noise", &[25.0]).unwrap(), Family::preset("haze", &[]).unwrap()],
            eval_only: Vec::new(),
            train_images: 200,
            val_images: 50,
            image_size: 64,
            seed: 1,
            clean_dir: None,
        }
    }
}

/// Clean training images plus a fixed degraded validation set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Image>,
    pub val: Vec<Sample>,
    pub families: Vec<Family>,
}

const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;

impl Dataset {
    pub fn build(task: &TaskConfig) -> Result<Self> {
        if task.families.is_empty() {
            return Err(Error::invalid("dataset", "no degradation families"));
        }
        let train = match &task.clean_dir {
            Some(dir) => load_folder(dir)?,
            None => (0..task.train_images)
                .map(|i| gen_clean(derive_seed(task.seed, &[TRAIN_STREAM, i as u64]), task.image_size, task.image_size))
                .collect::<Result<Vec<_>>>()?,
        };
        if train.is_empty() {
            return Err(Error::invalid("dataset", "no training images"));
        }
        let mut val = Vec::new();
        let all: Vec<&Family> = task.families.iter().chain(&task.eval_only).collect();
        for i in 0..task.val_images {
            let clean = gen_clean(derive_seed(task.seed, &[VAL_STREAM, i as u64]), task.image_size, task.image_size)?;
            for (f, family) in all.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, &[VAL_STREAM, i as u64, f as u64]));
                let specs = family.sample(&mut rng);
                val.push(compose(format!("val{i}"), &clean, &specs)?);
            }
        }
        Ok(Self {
            train,
            val,
            families: task.families.clone(),
        })
    }

    /// Full-size degraded training image; image, family and parameters are
    /// all drawn from `seed`.
    pub fn train_sample(&self, seed: u64) -> Result<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = rng.gen_range(0..self.train.len());
        let family = &self.families[rng.gen_range(0..self.families.len())];
        let specs = family.sample(&mut rng);
        compose(format!("train{idx}"), &self.train[idx], &specs)
    }
}

/// Converts an 8-bit RGB file to a `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Image {
                path: path.to_path_buf(),
                detail: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Inverse of [`load_image`] with round-and-clamp quantisation; PNG output.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let [3, h, w] = *img.shape() else {
        return Err(Error::shape("save_image", format!("{:?} is not [3, H, W]", img.shape())));
    };
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn load_folder(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_image(p)).collect()
}

/// One manifest row: a clean source (file path or procedural seed) and the
/// degradations to apply.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: String,
    pub specs: Vec<DegradationSpec>,
}

impl ManifestEntry {
    /// Materialises the sample; relative paths resolve against `base`.
    pub fn load(&self, base: &Path, size: usize) -> Result<Sample> {
        let clean = match self.source.strip_prefix("seed:") {
            Some(seed) => {
                let seed = seed.parse().map_err(|_| Error::invalid("manifest", format!("bad seed {:?}", self.source)))?;
                gen_clean(seed, size, size)?
            }
            None => load_image(&base.join(&self.source))?,
        };
        compose(self.id.clone(), &clean, &self.specs)
    }
}

/// `id,source,spec,seed` CSV. `spec` joins degradations with `+`; stage `k`
/// of a row uses `derive_seed(seed, [k])`.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let csv_err = |detail: String| Error::Csv {
        path: path.to_path_buf(),
        detail,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "source", "spec", "seed"] {
        return Err(csv_err(format!("header {headers:?}, expected id,source,spec,seed")));
    }
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(e.to_string()))?;
        let seed: u64 = rec[3].parse().map_err(|_| csv_err(format!("row {}: bad seed {:?}", row + 1, &rec[3])))?;
        let specs = parse_specs(&rec[2])
            .map_err(|e| csv_err(format!("row {}: {e}", row + 1)))?
            .into_iter()
            .enumerate()
            .map(|(k, d)| DegradationSpec::new(d, derive_seed(seed, &[k as u64])))
            .collect();
        out.push(ManifestEntry {
            id: rec[0].to_string(),
            source: rec[1].to_string(),
            specs,
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, rows: &[(String, String, Vec<Degradation>, u64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut write = |rec: &[&str]| {
        w.write_record(rec).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    };
    write(&["id", "source", "spec", "seed"])?;
    for (id, source, specs, seed) in rows {
        write(&[id, source, &format_specs(specs), &seed.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, &[0, 0]);
        assert_eq!(a, derive_seed(1, &[0, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 0]));
    }

    #[test]
    fn families_sample_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let haze = Family::preset("haze", &[]).unwrap();
        for _ in 0..100 {
            match haze.sample(&mut rng)[0].degradation {
                Degradation::Haze { airlight, transmission } => {
                    assert!((0.7..=1.0).contains(&airlight) && (0.4..=0.7).contains(&transmission));
                }
                d => panic!("{d:?}"),
            }
        }
        let comp = Family::preset("noise+haze", &[25.0]).unwrap();
        assert_eq!(comp.label(), "noise+haze");
        assert_eq!(comp.sample(&mut rng).len(), 2);
        assert!(Family::preset("snow", &[]).is_err());
        assert!(Family::preset("noise", &[]).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let mut task = TaskConfig::smoke();
        task.train_images = 3;
        task.val_images = 2;
        task.image_size = 32;
        task.eval_only = vec![Family::preset("noise+haze", &[25.0]).unwrap()];
        let a = Dataset::build(&task).unwrap();
        let b = Dataset::build(&task).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.val.len(), 6);
        let labels: Vec<_> = a.val.iter().map(Sample::label).collect();
        assert_eq!(labels[..3], ["noise", "haze", "noise+haze"]);
        assert_eq!(a.train_sample(5).unwrap(), b.train_sample(5).unwrap());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = gen_clean(3, 16, 20).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 16, 20]);
        assert!(back.max_abs_diff(&img).unwrap() <= 0.5 / 255.0 + 1e-6);
        save_image(&back, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), back);
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            ("a".to_string(), "seed:4".to_string(), parse_specs("noise:sigma=15").unwrap(), 7),
            ("b".to_string(), "seed:5".to_string(), parse_specs("noise:sigma=25+haze:a=0.9,t=0.5").unwrap(), 8),
        ];
        write_manifest(&path, &rows).unwrap();
        let entries = read_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[1].specs.len(), 2);
        let s = entries[1].load(dir.path(), 32).unwrap();
        assert_eq!(s.label(), "noise+haze");
        assert_eq!(s, entries[1].load(dir.path(), 32).unwrap());
    }
}
