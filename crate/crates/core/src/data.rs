//! Paired sketch/photo datasets.
//!
//! On disk a dataset is `root/images/{id}.png` plus `root/sketches/{id}.png`,
//! both 8-bit RGB. [`synth_pair`] procedurally draws garment-like pairs for
//! runs without real data.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{downsample_pyramid, FeatureMap};
use crate::imageio::{encode_png, flatten_on_white, letterbox, rgb_to_tensor};
use crate::schedule::ResolutionSchedule;

pub const IMAGES_DIR: &str = "images";
pub const SKETCHES_DIR: &str = "sketches";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone)]
pub struct SketchImagePair {
    pub id: String,
    pub sketch: FeatureMap,
    pub photo: FeatureMap,
}

impl SketchImagePair {
    pub fn new(id: String, sketch: FeatureMap, photo: FeatureMap) -> Result<Self> {
        let (bs, cs, hs, ws) = sketch.dims();
        if sketch.dims() != photo.dims() || bs != 1 || cs != 3 || hs != ws {
            return Err(Error::Shape(format!(
                "pair {id}: sketch {:?} and photo {:?} must both be (1, 3, r, r)",
                sketch.dims(),
                photo.dims()
            )));
        }
        Ok(Self { id, sketch, photo })
    }

    pub fn resolution(&self) -> usize {
        self.sketch.resolution()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Every pair id, lexicographically sorted.
    pub ids: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Side length of the first photo on disk.
    pub resolution: usize,
}

impl DatasetManifest {
    pub fn photo_path(&self, id: &str) -> PathBuf {
        self.root.join(IMAGES_DIR).join(format!("{id}.png"))
    }

    pub fn sketch_path(&self, id: &str) -> PathBuf {
        self.root.join(SKETCHES_DIR).join(format!("{id}.png"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad manifest: {e}")))
    }

    /// Writes the manifest as `root/manifest.json`.
    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn png_ids(dir: &Path) -> Result<BTreeSet<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut ids = BTreeSet::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.insert(stem.to_string());
            }
        }
    }
    Ok(ids)
}

/// Scans `root`, pairing photos and sketches by file name. Every id starts
/// in the training split.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let photos = png_ids(&root.join(IMAGES_DIR))?;
    let sketches = png_ids(&root.join(SKETCHES_DIR))?;
    let unpaired: Vec<String> = photos.symmetric_difference(&sketches).cloned().collect();
    if !unpaired.is_empty() {
        return Err(Error::Pairing(unpaired));
    }
    let ids: Vec<String> = photos.into_iter().collect();
    let resolution = match ids.first() {
        Some(id) => {
            let path = root.join(IMAGES_DIR).join(format!("{id}.png"));
            let (w, h) = image::image_dimensions(&path)?;
            w.max(h) as usize
        }
        None => 0,
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        train: ids.clone(),
        test: Vec::new(),
        ids,
        resolution,
    })
}

/// Seeded shuffle of all ids, then the first `train_count` train and the
/// rest test.
pub fn split(manifest: &DatasetManifest, train_count: usize, seed: u64) -> Result<DatasetManifest> {
    if train_count > manifest.ids.len() {
        return Err(Error::Split(format!(
            "train_count {train_count} exceeds {} pairs",
            manifest.ids.len()
        )));
    }
    let mut order = manifest.ids.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(train_count);
    Ok(DatasetManifest {
        train: order,
        test,
        ..manifest.clone()
    })
}

fn read_rgb(path: &Path, resolution: usize) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?;
    Ok(letterbox(&flatten_on_white(&img), resolution as u32))
}

/// Reads pairs `ids` and fits both images to `resolution`.
pub fn load_pairs(manifest: &DatasetManifest, ids: &[String], resolution: usize, dtype: DType) -> Result<Vec<SketchImagePair>> {
    ids.iter()
        .map(|id| {
            let sketch = read_rgb(&manifest.sketch_path(id), resolution)?;
            let photo = read_rgb(&manifest.photo_path(id), resolution)?;
            pair_from_rgb(id.clone(), &sketch, &photo, dtype)
        })
        .collect()
}

pub fn pair_from_rgb(id: String, sketch: &RgbImage, photo: &RgbImage, dtype: DType) -> Result<SketchImagePair> {
    let to_map = |img: &RgbImage| -> Result<FeatureMap> { FeatureMap::image(rgb_to_tensor(img, dtype)?.unsqueeze(0)?) };
    SketchImagePair::new(id, to_map(sketch)?, to_map(photo)?)
}

/// One training batch: per-level tensors, coarsest first.
#[derive(Debug, Clone)]
pub struct PyramidBatch {
    pub ids: Vec<String>,
    pub sketches: Vec<Tensor>,
    pub photos: Vec<Tensor>,
}

impl PyramidBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Groups `pairs` (in the given order) into batches of `batch_size`, keeping
/// a final partial batch, and builds both pyramids for each.
pub fn batch_pyramids(pairs: &[SketchImagePair], schedule: &ResolutionSchedule, batch_size: usize) -> Result<Vec<PyramidBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    pairs
        .chunks(batch_size)
        .map(|chunk| {
            let stack = |pick: fn(&SketchImagePair) -> &FeatureMap| -> Result<Vec<Tensor>> {
                let tensors: Vec<Tensor> = chunk.iter().map(|p| pick(p).tensor().clone()).collect();
                let batch = FeatureMap::image(Tensor::cat(&tensors, 0)?)?;
                Ok(downsample_pyramid(&batch, schedule)?
                    .into_iter()
                    .map(FeatureMap::into_tensor)
                    .collect())
            };
            Ok(PyramidBatch {
                ids: chunk.iter().map(|p| p.id.clone()).collect(),
                sketches: stack(|p| &p.sketch)?,
                photos: stack(|p| &p.photo)?,
            })
        })
        .collect()
}

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const INK: Rgb<u8> = Rgb([0, 0, 0]);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Garment {
    Top,
    Dress,
    Trousers,
}

/// Region polygons in unit coordinates, painted in order; later regions
/// overwrite earlier ones.
fn garment_regions(rng: &mut ChaCha8Rng) -> Vec<Vec<(f64, f64)>> {
    let kind = [Garment::Top, Garment::Dress, Garment::Trousers][rng.gen_range(0..3)];
    let cx = 0.5 + rng.gen_range(-0.04..0.04);
    let top = rng.gen_range(0.12..0.22);
    let bottom = rng.gen_range(0.78..0.9);
    let half = rng.gen_range(0.16..0.24);
    match kind {
        Garment::Top => {
            let sleeve = rng.gen_range(0.12..0.2);
            let drop = rng.gen_range(0.15..0.3);
            let body = vec![(cx - half, top), (cx + half, top), (cx + half, bottom), (cx - half, bottom)];
            let left = vec![
                (cx - half, top),
                (cx - half - sleeve, top + drop),
                (cx - half - sleeve + 0.06, top + drop + 0.08),
                (cx - half, top + 0.16),
            ];
            let right: Vec<_> = left.iter().map(|&(x, y)| (2.0 * cx - x, y)).collect();
            let collar = vec![(cx - 0.07, top), (cx + 0.07, top), (cx, top + rng.gen_range(0.06..0.12))];
            let band_y = rng.gen_range(top + 0.25..bottom - 0.12);
            let band = vec![(cx - half, band_y), (cx + half, band_y), (cx + half, band_y + 0.07), (cx - half, band_y + 0.07)];
            vec![body, left, right, collar, band]
        }
        Garment::Dress => {
            let waist = rng.gen_range(0.35..0.5);
            let flare = rng.gen_range(0.06..0.16);
            let bodice = vec![
                (cx - half * 0.7, top),
                (cx + half * 0.7, top),
                (cx + half * 0.6, waist),
                (cx - half * 0.6, waist),
            ];
            let skirt = vec![
                (cx - half * 0.6, waist),
                (cx + half * 0.6, waist),
                (cx + half + flare, bottom),
                (cx - half - flare, bottom),
            ];
            let belt = vec![
                (cx - half * 0.6, waist - 0.03),
                (cx + half * 0.6, waist - 0.03),
                (cx + half * 0.6, waist + 0.03),
                (cx - half * 0.6, waist + 0.03),
            ];
            vec![bodice, skirt, belt]
        }
        Garment::Trousers => {
            let crotch = rng.gen_range(0.38..0.5);
            let gap = rng.gen_range(0.02..0.05);
            let waistband = vec![(cx - half, top), (cx + half, top), (cx + half, top + 0.06), (cx - half, top + 0.06)];
            let hips = vec![(cx - half, top + 0.06), (cx + half, top + 0.06), (cx + half, crotch), (cx - half, crotch)];
            let left = vec![(cx - half, crotch), (cx - gap, crotch), (cx - gap, bottom), (cx - half + 0.02, bottom)];
            let right: Vec<_> = left.iter().map(|&(x, y)| (2.0 * cx - x, y)).collect();
            vec![hips, left, right, waistband]
        }
    }
}

fn inside(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut hit = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            hit = !hit;
        }
        j = i;
    }
    hit
}

/// Procedural garment photo and its edge sketch, both `resolution²` RGB
/// on white. Deterministic per seed.
pub fn synth_rgb_pair(seed: u64, resolution: usize) -> (RgbImage, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regions = garment_regions(&mut rng);
    let colors: Vec<Rgb<u8>> = (0..regions.len())
        .map(|_| Rgb([rng.gen_range(20..220), rng.gen_range(20..220), rng.gen_range(20..220)]))
        .collect();
    let r = resolution;
    let mut labels = vec![0usize; r * r];
    for y in 0..r {
        for x in 0..r {
            let (fx, fy) = ((x as f64 + 0.5) / r as f64, (y as f64 + 0.5) / r as f64);
            for (i, poly) in regions.iter().enumerate() {
                if inside(poly, fx, fy) {
                    labels[y * r + x] = i + 1;
                }
            }
        }
    }
    let photo = RgbImage::from_fn(r as u32, r as u32, |x, y| match labels[y as usize * r + x as usize] {
        0 => WHITE,
        l => colors[l - 1],
    });
    let sketch = RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let l = labels[y * r + x];
        let differs = |nx: usize, ny: usize| labels[ny * r + nx] != l;
        let edge = l != 0
            && (x == 0 || y == 0 || x + 1 == r || y + 1 == r || differs(x - 1, y) || differs(x + 1, y) || differs(x, y - 1) || differs(x, y + 1));
        if edge {
            INK
        } else {
            WHITE
        }
    });
    (photo, sketch)
}

pub fn synth_pair(seed: u64, resolution: usize, dtype: DType) -> Result<SketchImagePair> {
    let (photo, sketch) = synth_rgb_pair(seed, resolution);
    pair_from_rgb(synth_id(seed), &sketch, &photo, dtype)
}

pub fn synth_id(seed: u64) -> String {
    format!("synth-{seed:05}")
}

/// Writes `count` synthetic pairs (seeds `seed..seed + count`) under `root`
/// in the on-disk layout and returns the manifest.
pub fn write_synthetic(root: &Path, count: usize, resolution: usize, seed: u64) -> Result<DatasetManifest> {
    for dir in [IMAGES_DIR, SKETCHES_DIR] {
        let d = root.join(dir);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in seed..seed + count as u64 {
        let (photo, sketch) = synth_rgb_pair(s, resolution);
        for (dir, img) in [(IMAGES_DIR, &photo), (SKETCHES_DIR, &sketch)] {
            let path = root.join(dir).join(format!("{}.png", synth_id(s)));
            std::fs::write(&path, encode_png(img)?).map_err(|e| Error::io(&path, e))?;
        }
    }
    load_manifest(root)
}
