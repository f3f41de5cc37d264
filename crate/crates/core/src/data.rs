//! Datasets in the MVTec AD directory layout and a procedural stand-in.
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect>/*.png          (defect "good" = normal)
//! <root>/<category>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! Category tags are kept for per-category reporting only; training never
//! sees them.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{load_rgb, preprocess, ImageTensor};
use crate::config::ModelConfig;
use crate::error::{Result, SivtError};
use crate::seed::derive_seed;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Record {
    pub category: String,
    pub split: Split,
    /// `"good"` for defect-free images.
    pub defect: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

impl Record {
    pub fn is_anomalous(&self) -> bool {
        self.defect != "good"
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
}

impl DatasetIndex {
    /// Sort records into the canonical order and check the invariants:
    /// train records are defect-free without masks, defective test
    /// records have masks, defect-free test records do not.
    pub fn new(mut records: Vec<Record>) -> Result<Self> {
        records.sort();
        for r in &records {
            let ok = match (r.split, r.is_anomalous()) {
                (Split::Train, false) | (Split::Test, false) => r.mask.is_none(),
                (Split::Test, true) => r.mask.is_some(),
                (Split::Train, true) => false,
            };
            if !ok {
                return Err(SivtError::Index(format!(
                    "inconsistent record {} (defect `{}`, mask {:?})",
                    r.image.display(),
                    r.defect,
                    r.mask
                )));
            }
        }
        Ok(Self { records })
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn categories(&self) -> Vec<String> {
        let mut c: Vec<String> = self.records.iter().map(|r| r.category.clone()).collect();
        c.dedup();
        c
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Which categories to index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Categories {
    /// Every category directory under the root, merged into one index.
    All,
    Only(Vec<String>),
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| SivtError::io(dir, e))? {
        out.push(entry.map_err(|e| SivtError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    Ok(sorted_entries(dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect())
}

fn file_name(p: &Path) -> String {
    p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string()
}

fn find_mask(category_dir: &Path, defect: &str, image: &Path) -> Option<PathBuf> {
    let stem = image.file_stem()?.to_str()?;
    let dir = category_dir.join("ground_truth").join(defect);
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{stem}_mask.{ext}")))
        .find(|p| p.is_file())
}

pub fn index_mvtec(root: &Path, categories: &Categories) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(SivtError::Index(format!("{} is not a directory", root.display())));
    }
    let mut dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.join("train").is_dir() || p.join("test").is_dir())
        .collect();
    if let Categories::Only(wanted) = categories {
        for w in wanted {
            if !dirs.iter().any(|d| file_name(d) == *w) {
                return Err(SivtError::Index(format!("category `{w}` not found under {}", root.display())));
            }
        }
        dirs.retain(|d| wanted.contains(&file_name(d)));
    }
    let mut records = Vec::new();
    for dir in &dirs {
        let category = file_name(dir);
        for image in image_files(&dir.join("train").join("good"))? {
            records.push(Record {
                category: category.clone(),
                split: Split::Train,
                defect: "good".into(),
                image,
                mask: None,
            });
        }
        let test = dir.join("test");
        if test.is_dir() {
            for defect_dir in sorted_entries(&test)?.into_iter().filter(|p| p.is_dir()) {
                let defect = file_name(&defect_dir);
                for image in image_files(&defect_dir)? {
                    let mask = if defect == "good" {
                        None
                    } else {
                        Some(find_mask(dir, &defect, &image).ok_or_else(|| {
                            SivtError::Index(format!("missing ground-truth mask for {}", image.display()))
                        })?)
                    };
                    records.push(Record {
                        category: category.clone(),
                        split: Split::Test,
                        defect: defect.clone(),
                        image,
                        mask,
                    });
                }
            }
        }
    }
    if records.is_empty() {
        return Err(SivtError::Index(format!("no images found under {}", root.display())));
    }
    DatasetIndex::new(records)
}

/// Load a mask as booleans (nonzero = defect) resized by nearest neighbour.
pub fn load_mask(path: &Path, height: usize, width: usize) -> Result<Array2<bool>> {
    let img = image::open(path)
        .map_err(|e| SivtError::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        let sy = (y * h) / height;
        let sx = (x * w) / width;
        img.get_pixel(sx as u32, sy as u32)[0] != 0
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyShape {
    Blob,
    Scratch,
    MissingRegion,
}

impl AnomalyShape {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyShape::Blob => "blob",
            AnomalyShape::Scratch => "scratch",
            AnomalyShape::MissingRegion => "missing_region",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub image_size: usize,
    pub families: usize,
    pub train_per_family: usize,
    pub test_good_per_family: usize,
    pub test_defect_per_family: usize,
    pub shapes: Vec<AnomalyShape>,
    /// Defect area as a fraction of the image, `[min, max]`.
    pub area_fraction: [f64; 2],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            families: 3,
            train_per_family: 100,
            test_good_per_family: 10,
            test_defect_per_family: 10,
            shapes: vec![AnomalyShape::Blob, AnomalyShape::Scratch, AnomalyShape::MissingRegion],
            area_fraction: [0.02, 0.08],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.area_fraction;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return Err(SivtError::Parameter(format!(
                "area fraction range [{lo}, {hi}] must lie within (0, 0.5)"
            )));
        }
        if self.families == 0 || self.image_size < 8 {
            return Err(SivtError::Parameter("need at least one family and 8-pixel images".into()));
        }
        if self.test_defect_per_family > 0 && self.shapes.is_empty() {
            return Err(SivtError::Parameter("defective images need at least one shape".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| SivtError::io(path, e))?;
        let spec: Self = toml::from_str(&text).map_err(|e| SivtError::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Spectral signature of a texture family.
struct Family {
    /// Radial frequency band in cycles per image.
    band: (f64, f64),
    /// Orientation centre and spread in radians.
    orientation: (f64, f64),
    tint: [f64; 3],
}

fn family(k: usize) -> Family {
    // Families alternate low/mid/high bands with rotating orientation and tint.
    let band = match k % 3 {
        0 => (1.5, 4.0),
        1 => (5.0, 9.0),
        _ => (11.0, 16.0),
    };
    let angle = (k as f64 * 0.9) % PI;
    let spread = if k.is_multiple_of(2) { PI } else { 0.35 };
    let hue = k as f64 * 2.399_963; // golden angle
    let tint = [
        0.5 + 0.25 * hue.cos(),
        0.5 + 0.25 * (hue + 2.094).cos(),
        0.5 + 0.25 * (hue + 4.189).cos(),
    ];
    Family {
        band,
        orientation: (angle, spread),
        tint,
    }
}

/// Sum of random-phase sinusoids drawn from the family spectrum, values in
/// `[0, 1]`.
fn render_texture(fam: &Family, size: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    const WAVES: usize = 24;
    let mut field = Array2::<f64>::zeros((size, size));
    for _ in 0..WAVES {
        let radius = rng.random_range(fam.band.0..fam.band.1);
        let theta = fam.orientation.0 + rng.random_range(-0.5..0.5) * fam.orientation.1;
        let (fx, fy) = (radius * theta.cos() / size as f64, radius * theta.sin() / size as f64);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.5..1.0);
        for ((y, x), v) in field.indexed_iter_mut() {
            *v += amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).cos();
        }
    }
    let scale = 1.0 / (WAVES as f64).sqrt();
    let contrast = rng.random_range(0.9..1.1);
    Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        let v = field[[y, x]] * scale * 0.35 * contrast;
        (fam.tint[c] + v * (0.6 + 0.2 * c as f64)).clamp(0.0, 1.0)
    })
}

/// Rasterize a defect covering roughly `area` pixels.
fn render_shape(shape: AnomalyShape, size: usize, area: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let s = size as f64;
    let mut mask = Array2::from_elem((size, size), false);
    match shape {
        AnomalyShape::Blob => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let a = (area * aspect / PI).sqrt();
            let b = area / (PI * a);
            let rot: f64 = rng.random_range(0.0..PI);
            let margin = a.max(b);
            let cx = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9));
            let cy = rng.random_range(margin.min(s / 2.0)..(s - margin).max(s / 2.0 + 1e-9));
            for ((y, x), m) in mask.indexed_iter_mut() {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * rot.cos() + dy * rot.sin();
                let v = -dx * rot.sin() + dy * rot.cos();
                *m = (u / a).powi(2) + (v / b).powi(2) <= 1.0;
            }
        }
        AnomalyShape::Scratch => {
            let width = (area / (0.8 * s)).max(3.0);
            let length = (area / width).min(s * 0.9);
            let theta: f64 = rng.random_range(0.0..PI);
            let (ux, uy) = (theta.cos(), theta.sin());
            let half = length / 2.0;
            let mx = (half * ux.abs() + width).min(s / 2.0);
            let my = (half * uy.abs() + width).min(s / 2.0);
            let cx = rng.random_range(mx..=(s - mx));
            let cy = rng.random_range(my..=(s - my));
            for ((y, x), m) in mask.indexed_iter_mut() {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let along = dx * ux + dy * uy;
                let across = -dx * uy + dy * ux;
                *m = along.abs() <= half && across.abs() <= width / 2.0;
            }
        }
        AnomalyShape::MissingRegion => {
            let aspect: f64 = rng.random_range(0.6..1.6);
            let w = ((area * aspect).sqrt().round() as usize).clamp(1, size);
            let h = ((area / w as f64).round() as usize).clamp(1, size);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    mask[[y, x]] = true;
                }
            }
        }
    }
    mask
}

fn save_rgb(img: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, _) = img.dim();
    let buf: Vec<u8> = img.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| SivtError::io(path, std::io::Error::other(e)))
}

fn save_mask(mask: &Array2<bool>, path: &Path) -> Result<()> {
    let (h, w) = mask.dim();
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer matches dimensions")
        .save(path)
        .map_err(|e| SivtError::io(path, std::io::Error::other(e)))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| SivtError::io(path, e))
}

/// Render a seeded corpus in the MVTec layout. Categories are named
/// `texture_<k>`; defective test images paste a texture from another
/// family (or a flat fill for missing regions) inside a shape mask.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    let n = spec.image_size;
    let mut records = Vec::new();
    for k in 0..spec.families {
        let fam = family(k);
        let category = format!("texture_{k}");
        let cat_dir = out.join(&category);
        let train_dir = cat_dir.join("train").join("good");
        mkdir(&train_dir)?;
        for i in 0..spec.train_per_family {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k as u64, 0, i as u64]));
            let path = train_dir.join(format!("{i:03}.png"));
            save_rgb(&render_texture(&fam, n, &mut rng), &path)?;
            records.push(Record {
                category: category.clone(),
                split: Split::Train,
                defect: "good".into(),
                image: path,
                mask: None,
            });
        }
        let good_dir = cat_dir.join("test").join("good");
        mkdir(&good_dir)?;
        for i in 0..spec.test_good_per_family {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k as u64, 1, i as u64]));
            let path = good_dir.join(format!("{i:03}.png"));
            save_rgb(&render_texture(&fam, n, &mut rng), &path)?;
            records.push(Record {
                category: category.clone(),
                split: Split::Test,
                defect: "good".into(),
                image: path,
                mask: None,
            });
        }
        let mut per_shape = vec![0usize; spec.shapes.len()];
        for i in 0..spec.test_defect_per_family {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[k as u64, 2, i as u64]));
            let si = i % spec.shapes.len();
            let shape = spec.shapes[si];
            let j = per_shape[si];
            per_shape[si] += 1;

            let mut img = render_texture(&fam, n, &mut rng);
            let frac = rng.random_range(spec.area_fraction[0]..=spec.area_fraction[1]);
            let mask = render_shape(shape, n, frac * (n * n) as f64, &mut rng);
            let fill = match shape {
                AnomalyShape::MissingRegion => {
                    let v = rng.random_range(0.05..0.2);
                    Array3::from_elem((n, n, 3), v)
                }
                _ => {
                    let other = (k + 1 + rng.random_range(0..spec.families.max(2) - 1)) % spec.families.max(2);
                    render_texture(&family(other), n, &mut rng)
                }
            };
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    for c in 0..3 {
                        img[[y, x, c]] = fill[[y, x, c]];
                    }
                }
            }
            let img_dir = cat_dir.join("test").join(shape.name());
            let gt_dir = cat_dir.join("ground_truth").join(shape.name());
            mkdir(&img_dir)?;
            mkdir(&gt_dir)?;
            let path = img_dir.join(format!("{j:03}.png"));
            let mask_path = gt_dir.join(format!("{j:03}_mask.png"));
            save_rgb(&img, &path)?;
            save_mask(&mask, &mask_path)?;
            records.push(Record {
                category: category.clone(),
                split: Split::Test,
                defect: shape.name().into(),
                image: path,
                mask: Some(mask_path),
            });
        }
    }
    DatasetIndex::new(records)
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64]));
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Vec<ImageTensor>,
    pub categories: Vec<String>,
    pub paths: Vec<PathBuf>,
}

/// Shuffled, preprocessed mini-batches over a list of records.
pub struct BatchIterator<'a> {
    records: Vec<&'a Record>,
    batch_size: usize,
    seed: u64,
    config: &'a ModelConfig,
    skip_unreadable: bool,
}

impl<'a> BatchIterator<'a> {
    pub fn new(records: Vec<&'a Record>, batch_size: usize, seed: u64, config: &'a ModelConfig) -> Result<Self> {
        if batch_size == 0 {
            return Err(SivtError::Parameter("batch size must be at least 1".into()));
        }
        Ok(Self {
            records,
            batch_size,
            seed,
            config,
            skip_unreadable: config.training.skip_unreadable,
        })
    }

    /// Record indices of each batch for an epoch; the last batch may be short.
    pub fn batch_indices(&self, epoch: usize) -> Vec<Vec<usize>> {
        epoch_order(self.records.len(), self.seed, epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.batch_indices(epoch).into_iter().map(move |idx| {
            let mut batch = Batch {
                images: Vec::with_capacity(idx.len()),
                categories: Vec::with_capacity(idx.len()),
                paths: Vec::with_capacity(idx.len()),
            };
            for i in idx {
                let r = self.records[i];
                match load_rgb(&r.image).and_then(|raw| preprocess(&raw, self.config)) {
                    Ok(img) => {
                        batch.images.push(img);
                        batch.categories.push(r.category.clone());
                        batch.paths.push(r.image.clone());
                    }
                    Err(e) if self.skip_unreadable => log::warn!("skipping {}: {e}", r.image.display()),
                    Err(e) => return Err(e),
                }
            }
            Ok(batch)
        })
    }
}
