//! Dataset ingestion: IDX image/label files, CSV persistence and the
//! synthetic Gaussian-blobs-plus-OOD-ring generator.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One labelled example set: features as rows of `x`, labels aligned.
#[derive(Clone, Debug)]
pub struct Split {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                x.rows(),
                y.len()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols()
    }
}

/// A dataset with its split structure.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Split,
    pub valid: Option<Split>,
    pub test: Option<Split>,
    pub num_classes: usize,
    /// Set when rows are flattened H x W x C images (enables augmentation).
    pub image_dims: Option<(usize, usize, usize)>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        let check = |s: &Split, name: &str| -> Result<()> {
            if s.y.iter().any(|&l| l >= self.num_classes) {
                return Err(Error::Domain(format!(
                    "{name} split has labels outside [0, {})",
                    self.num_classes
                )));
            }
            Ok(())
        };
        check(&self.train, "train")?;
        if let Some(v) = &self.valid {
            check(v, "valid")?;
        }
        if let Some(t) = &self.test {
            check(t, "test")?;
        }
        if let Some((h, w, c)) = self.image_dims {
            if h * w * c != self.train.feature_dim() {
                return Err(Error::Dimension(format!(
                    "image dims {h}x{w}x{c} do not match feature dim {}",
                    self.train.feature_dim()
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// IDX files (big-endian, u8 payload)

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], off: usize) -> Result<u32> {
    let slice = bytes
        .get(off..off + 4)
        .ok_or_else(|| Error::Format("truncated IDX header".into()))?;
    Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
}

/// Parse an IDX image file (magic 0x00000803): returns row-flattened images
/// scaled to [0,1] plus the (height, width, 1) dims.
pub fn load_idx_images(path: &Path) -> Result<(Tensor, (usize, usize, usize))> {
    let bytes = std::fs::read(path)?;
    parse_idx_images(&bytes)
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<(Tensor, (usize, usize, usize))> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let h = read_u32_be(bytes, 8)? as usize;
    let w = read_u32_be(bytes, 12)? as usize;
    let payload = &bytes[16..];
    if payload.len() != n * h * w {
        return Err(Error::Format(format!(
            "IDX image payload has {} bytes, expected {}",
            payload.len(),
            n * h * w
        )));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Format("empty IDX image file".into()));
    }
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Tensor::matrix(n, h * w, data)?, (h, w, 1)))
}

/// Parse an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    parse_idx_labels(&bytes)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(bytes, 4)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::Format(format!(
            "IDX label payload has {} bytes, expected {n}",
            payload.len()
        )));
    }
    if n == 0 {
        return Err(Error::Format("empty IDX label file".into()));
    }
    Ok(payload.iter().map(|&b| b as usize).collect())
}

/// Write u8 images in IDX layout (used for round-trip tests and fixtures).
pub fn write_idx_images(path: &Path, images: &[u8], n: usize, h: usize, w: usize) -> Result<()> {
    if images.len() != n * h * w {
        return Err(Error::Dimension(format!(
            "payload has {} bytes, expected {}",
            images.len(),
            n * h * w
        )));
    }
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend_from_slice(&(h as u32).to_be_bytes());
    out.extend_from_slice(&(w as u32).to_be_bytes());
    out.extend_from_slice(images);
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    std::fs::write(path, out)?;
    Ok(())
}

/// Load paired IDX image/label files into a split.
pub fn load_idx_split(images: &Path, labels: &Path) -> Result<(Split, (usize, usize, usize))> {
    let (x, dims) = load_idx_images(images)?;
    let y = load_idx_labels(labels)?;
    if x.rows() != y.len() {
        return Err(Error::Format(format!(
            "IDX image count {} does not match label count {}",
            x.rows(),
            y.len()
        )));
    }
    Ok((Split::new(x, y)?, dims))
}

// ---------------------------------------------------------------------------
// synthetic generator

/// Gaussian blobs inside the unit square plus an OOD ring around the origin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// Training points per class; valid/test get a quarter each.
    pub points_per_class: usize,
    pub means: Vec<(f64, f64)>,
    /// Isotropic standard deviation of each blob.
    pub cov_scale: f64,
    pub ood_ring_radius: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Class means evenly spaced on a circle of radius 0.25 around (0.5, 0.5),
    /// so blobs stay inside the [0,1] pixel domain.
    pub fn default_means(k: usize) -> Vec<(f64, f64)> {
        (0..k)
            .map(|i| {
                let angle = 2.0 * std::f64::consts::PI * i as f64 / k as f64;
                (0.5 + 0.25 * angle.cos(), 0.5 + 0.25 * angle.sin())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.means.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} means for {} classes",
                self.means.len(),
                self.num_classes
            )));
        }
        if self.points_per_class == 0 {
            return Err(Error::InvalidConfig("points_per_class must be >= 1".into()));
        }
        if !(self.cov_scale > 0.0) || !self.cov_scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "degenerate covariance scale {}",
                self.cov_scale
            )));
        }
        let max_mean_norm = self
            .means
            .iter()
            .map(|(a, b)| (a * a + b * b).sqrt())
            .fold(0.0_f64, f64::max);
        if !(self.ood_ring_radius > max_mean_norm) {
            return Err(Error::InvalidConfig(format!(
                "OOD ring radius {} must exceed the largest mean norm {max_mean_norm}",
                self.ood_ring_radius
            )));
        }
        Ok(())
    }
}

/// Generate blobs and the OOD ring. Blob features are clipped to [0,1] so
/// every in-domain point is a valid attack input; ring points are exact and
/// unclipped. Deterministic in `spec.seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(DatasetSplit, Split)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.cov_scale).expect("positive scale");
    let k = spec.num_classes;

    let blob_split = |per_class: usize, rng: &mut ChaCha8Rng| -> Result<Split> {
        let mut xs = Vec::with_capacity(per_class * k * 2);
        let mut ys = Vec::with_capacity(per_class * k);
        for (class, &(mx, my)) in spec.means.iter().enumerate() {
            for _ in 0..per_class {
                xs.push((mx + normal.sample(rng)).clamp(0.0, 1.0));
                xs.push((my + normal.sample(rng)).clamp(0.0, 1.0));
                ys.push(class);
            }
        }
        Split::new(Tensor::matrix(ys.len(), 2, xs)?, ys)
    };

    let eval_per_class = (spec.points_per_class / 4).max(1);
    let train = blob_split(spec.points_per_class, &mut rng)?;
    let valid = blob_split(eval_per_class, &mut rng)?;
    let test = blob_split(eval_per_class, &mut rng)?;

    let ood_count = (k * spec.points_per_class / 2).max(8);
    let mut xs = Vec::with_capacity(ood_count * 2);
    for _ in 0..ood_count {
        let theta = rng.random_range(0.0..(2.0 * std::f64::consts::PI));
        xs.push(spec.ood_ring_radius * theta.cos());
        xs.push(spec.ood_ring_radius * theta.sin());
    }
    let ood = Split::new(Tensor::matrix(ood_count, 2, xs)?, vec![0; ood_count])?;

    let dataset = DatasetSplit {
        train,
        valid: Some(valid),
        test: Some(test),
        num_classes: k,
        image_dims: None,
    };
    dataset.validate()?;
    Ok((dataset, ood))
}

// ---------------------------------------------------------------------------
// CSV + dataset directory persistence

/// Write one split as CSV: label,f1,f2,... per row. Floats use the shortest
/// round-trip representation, so read-back is bit-exact.
pub fn write_split_csv(path: &Path, split: &Split) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = split.feature_dim();
    for (r, &label) in split.y.iter().enumerate() {
        write!(f, "{label}")?;
        for c in 0..d {
            write!(f, ",{}", split.x.data()[r * d + c])?;
        }
        writeln!(f)?;
    }
    Ok(())
}

pub fn read_split_csv(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path)?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let label: usize = parts
            .next()
            .unwrap()
            .parse()
            .map_err(|e| Error::Format(format!("{path:?}:{}: bad label: {e}", lineno + 1)))?;
        let feats: Vec<f64> = parts
            .map(|p| {
                p.parse()
                    .map_err(|e| Error::Format(format!("{path:?}:{}: bad float: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(Error::Format(format!(
                    "{path:?}:{}: ragged row ({} vs {d} features)",
                    lineno + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        xs.extend(feats);
        ys.push(label);
    }
    let d = dim.ok_or_else(|| Error::Format(format!("{path:?} is empty")))?;
    Split::new(Tensor::matrix(ys.len(), d, xs)?, ys)
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    feature_dim: usize,
    image_dims: Option<(usize, usize, usize)>,
}

/// Persist a dataset directory: train/valid/test/ood CSVs plus meta.json.
pub fn save_dataset(dir: &Path, data: &DatasetSplit, ood: Option<&Split>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_split_csv(&dir.join("train.csv"), &data.train)?;
    if let Some(v) = &data.valid {
        write_split_csv(&dir.join("valid.csv"), v)?;
    }
    if let Some(t) = &data.test {
        write_split_csv(&dir.join("test.csv"), t)?;
    }
    if let Some(o) = ood {
        write_split_csv(&dir.join("ood.csv"), o)?;
    }
    let meta = DatasetMeta {
        num_classes: data.num_classes,
        feature_dim: data.train.feature_dim(),
        image_dims: data.image_dims,
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    std::fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetSplit, Option<Split>)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| Error::Format(format!("meta.json: {e}")))?;
    let train = read_split_csv(&dir.join("train.csv"))?;
    let read_opt = |name: &str| -> Result<Option<Split>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_split_csv(&p)?))
        } else {
            Ok(None)
        }
    };
    let data = DatasetSplit {
        train,
        valid: read_opt("valid.csv")?,
        test: read_opt("test.csv")?,
        num_classes: meta.num_classes,
        image_dims: meta.image_dims,
    };
    data.validate()?;
    let ood = read_opt("ood.csv")?;
    Ok((data, ood))
}
