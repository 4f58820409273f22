//! Procedural attribute-conditioned images and the dataset manifest.
//!
//! The image is divided into a two-column grid with one cell per attribute.
//! An active attribute paints its cell: a solid color block for most
//! groups, a cross glyph for accessory and bag groups. Inactive cells stay
//! at the gray background. A per-image jitter of up to two pixels moves
//! every mark inside its cell and seeded Gaussian noise is added on top.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ClearError, Result};
use crate::query::{build_pseudo_description, DEFAULT_N_WORDS};
use crate::schema::{AttributeSchema, AttributeVector};

pub const BACKGROUND: f32 = 0.5;
pub const MAX_JITTER: i64 = 2;
const COLUMNS: usize = 2;

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.0, 0.0, 0.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub image_hw: [usize; 2],
    pub n_categories: usize,
    /// Training images per seen category.
    pub images_per_category: usize,
    pub gallery_per_category: usize,
    pub query_per_category: usize,
    /// Fraction of categories withheld from the train split.
    pub holdout_fraction: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_hw: [32, 16],
            n_categories: 100,
            images_per_category: 25,
            gallery_per_category: 4,
            query_per_category: 2,
            holdout_fraction: 0.2,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let n = schema.n_attr();
        if n == 0 || n > 63 {
            return Err(ClearError::Config(format!("synthetic data supports 1..=63 attributes, got {n}")));
        }
        if self.n_categories == 0 || self.n_categories as u128 > 1u128 << n {
            return Err(ClearError::Config(format!(
                "{} categories requested but only {} attribute combinations exist",
                self.n_categories,
                1u128 << n
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(ClearError::Config("noise_std must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(ClearError::Config("holdout_fraction must be in [0, 1)".into()));
        }
        let layout = CellLayout::new(self.image_hw, n);
        if layout.cell_h < 4 || layout.cell_w < 4 {
            return Err(ClearError::Config(format!(
                "image {:?} is too small for {n} attribute cells",
                self.image_hw
            )));
        }
        Ok(())
    }

    pub fn n_unseen(&self) -> usize {
        (self.n_categories as f64 * self.holdout_fraction).round() as usize
    }
}

/// Pixel rectangle of each attribute's cell.
#[derive(Debug, Clone, Copy)]
pub struct CellLayout {
    pub rows: usize,
    pub cell_h: usize,
    pub cell_w: usize,
}

impl CellLayout {
    pub fn new(image_hw: [usize; 2], n_attr: usize) -> Self {
        let rows = n_attr.div_ceil(COLUMNS).max(1);
        CellLayout { rows, cell_h: image_hw[0] / rows, cell_w: image_hw[1] / COLUMNS }
    }

    /// (top, left) of the cell for attribute `i`.
    pub fn origin(&self, i: usize) -> (usize, usize) {
        ((i / COLUMNS) * self.cell_h, (i % COLUMNS) * self.cell_w)
    }
}

/// A rendered RGB image, channel-major with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl SynthImage {
    fn filled(height: usize, width: usize, value: f32) -> Self {
        SynthImage { height, width, data: vec![value; 3 * height * width] }
    }

    pub fn pixel(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[(c * self.height + y) * self.width + x] = v;
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), &Device::Cpu)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [0, 1, 2].map(|c| (self.pixel(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (width, height) = (img.width() as usize, img.height() as usize);
        let mut out = SynthImage::filled(height, width, 0.0);
        for (x, y, px) in img.enumerate_pixels() {
            out.set(y as usize, x as usize, px.0.map(|v| f32::from(v) / 255.0));
        }
        Ok(out)
    }
}

fn is_glyph_group(group: &str) -> bool {
    let g = group.to_ascii_lowercase();
    g.contains("accessory") || g.contains("bag")
}

/// Deterministic render of `attrs` under `instance_seed`.
pub fn render(
    schema: &AttributeSchema,
    attrs: &AttributeVector,
    image_hw: [usize; 2],
    noise_std: f64,
    instance_seed: u64,
) -> Result<SynthImage> {
    attrs.check(schema)?;
    let [h, w] = image_hw;
    let layout = CellLayout::new(image_hw, schema.n_attr());
    let mut rng = ChaCha8Rng::seed_from_u64(instance_seed);
    let dy = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let dx = rng.random_range(-MAX_JITTER..=MAX_JITTER);
    let mut img = SynthImage::filled(h, w, BACKGROUND);
    for i in attrs.active() {
        let color = PALETTE[i % PALETTE.len()];
        let (top, left) = layout.origin(i);
        let (ch, cw) = (layout.cell_h as i64, layout.cell_w as i64);
        let glyph = is_glyph_group(&schema.attributes()[i].group);
        for cy in 0..ch {
            for cx in 0..cw {
                // Position in the unjittered mark's frame.
                let (my, mx) = (cy - dy, cx - dx);
                let on = if glyph {
                    (my == ch / 2 || mx == cw / 2) && (1..ch - 1).contains(&my) && (1..cw - 1).contains(&mx)
                } else {
                    (1..ch - 1).contains(&my) && (1..cw - 1).contains(&mx)
                };
                if on {
                    img.set(top + cy as usize, left + cx as usize, color);
                }
            }
        }
    }
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|e| ClearError::Config(e.to_string()))?;
        for v in img.data.iter_mut() {
            *v = (*v + normal.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Reads attributes back from a noise-free render: a cell is active when any
/// of its pixels departs from the background by more than a quarter.
pub fn decode_render(img: &SynthImage, n_attr: usize) -> AttributeVector {
    let layout = CellLayout::new([img.height, img.width], n_attr);
    let bits = (0..n_attr)
        .map(|i| {
            let (top, left) = layout.origin(i);
            let active = (0..layout.cell_h).any(|y| {
                (0..layout.cell_w)
                    .any(|x| (0..3).any(|c| (img.pixel(c, top + y, left + x) - BACKGROUND).abs() > 0.25))
            });
            u8::from(active)
        })
        .collect();
    AttributeVector::new(bits).expect("binary")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Query,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub attrs: AttributeVector,
    pub category: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    schema_hash: String,
}

/// Dataset index. Image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub schema_hash: String,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(ClearError::Empty("manifest has no records".into()));
        }
        let mut paths = BTreeSet::new();
        let mut by_category: BTreeMap<usize, &AttributeVector> = BTreeMap::new();
        let mut by_attrs: BTreeMap<&AttributeVector, usize> = BTreeMap::new();
        for r in &self.records {
            if !paths.insert(r.image.as_str()) {
                return Err(ClearError::Config(format!("duplicate image path {}", r.image)));
            }
            let consistent = *by_category.entry(r.category).or_insert(&r.attrs) == &r.attrs
                && *by_attrs.entry(&r.attrs).or_insert(r.category) == r.category;
            if !consistent {
                return Err(ClearError::Config(format!(
                    "record {} has category {} inconsistent with its attributes",
                    r.image, r.category
                )));
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ManifestHeader { schema_hash: self.schema_hash.clone() })?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let mut f = fs::File::create(path).map_err(|e| ClearError::io(path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes()).map_err(|e| ClearError::io(path, e))
}

/// Loads a manifest and checks it was written for `schema`.
pub fn load_manifest(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Manifest> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| ClearError::io(path, e))?;
    let parse_err = |line: usize, message: String| ClearError::Parse { path: path.to_path_buf(), line, message };
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| ClearError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            header = Some(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?);
            continue;
        }
        let r: Record = serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        r.attrs.check(schema).map_err(|e| parse_err(i + 1, e.to_string()))?;
        records.push(r);
    }
    let header = header.ok_or_else(|| ClearError::Empty(format!("{} is empty", path.display())))?;
    let expected = schema.hash();
    if header.schema_hash != expected {
        return Err(ClearError::SchemaMismatch { expected, found: header.schema_hash });
    }
    let manifest = Manifest { schema_hash: header.schema_hash, records };
    manifest.validate()?;
    Ok(manifest)
}

/// Samples distinct attribute combinations that also yield a well-formed
/// pseudo-description under `schema`.
fn sample_categories(schema: &AttributeSchema, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<AttributeVector>> {
    let n_attr = schema.n_attr();
    let space = 1u64 << n_attr;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    let candidates: Box<dyn Iterator<Item = u64>> = if n_attr <= 16 {
        let mut all: Vec<u64> = (0..space).collect();
        all.shuffle(rng);
        Box::new(all.into_iter())
    } else {
        let draws: Vec<u64> = (0..n.saturating_mul(64)).map(|_| rng.random_range(0..space)).collect();
        Box::new(draws.into_iter())
    };
    for code in candidates {
        if out.len() == n {
            break;
        }
        let v = AttributeVector::from_code(code, n_attr);
        if seen.insert(code) && build_pseudo_description(schema, &v, DEFAULT_N_WORDS).is_ok() {
            out.push(v);
        }
    }
    if out.len() < n {
        return Err(ClearError::Config(format!(
            "only {} describable attribute combinations available, {n} requested",
            out.len()
        )));
    }
    Ok(out)
}

/// Samples categories, renders every image into `out_dir/images`, and
/// writes `out_dir/manifest.jsonl`. The first `n_unseen` sampled categories
/// have no train images.
pub fn generate_dataset(cfg: &SynthConfig, schema: &AttributeSchema, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    cfg.validate(schema)?;
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| ClearError::io(&image_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let categories = sample_categories(schema, cfg.n_categories, &mut rng)?;
    let n_unseen = cfg.n_unseen();
    let mut records = Vec::new();
    for (cat, attrs) in categories.iter().enumerate() {
        let mut plan = vec![(Split::Query, cfg.query_per_category), (Split::Gallery, cfg.gallery_per_category)];
        if cat >= n_unseen {
            plan.push((Split::Train, cfg.images_per_category));
        }
        for (split, count) in plan {
            for k in 0..count {
                let name = format!("images/c{cat:04}_{}_{k:03}.png", split_name(split));
                let img = render(schema, attrs, cfg.image_hw, cfg.noise_std, rng.random())?;
                img.save_png(&out_dir.join(&name))?;
                records.push(Record { image: name, attrs: attrs.clone(), category: cat, split });
            }
        }
    }
    let manifest = Manifest { schema_hash: schema.hash(), records };
    save_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Gallery => "gallery",
        Split::Query => "query",
    }
}

/// Images and labels of one split, loaded into memory.
#[derive(Debug, Clone)]
pub struct SplitData {
    pub ids: Vec<String>,
    /// (N, 3, H, W) in `f32`.
    pub images: Tensor,
    pub labels: Vec<AttributeVector>,
    pub categories: Vec<usize>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn load(manifest: &Manifest, base: &Path, split: Split) -> Result<Self> {
        let records = manifest.split(split);
        if records.is_empty() {
            return Err(ClearError::Empty(format!("no {} records", split_name(split))));
        }
        let mut tensors = Vec::with_capacity(records.len());
        for r in &records {
            let p: PathBuf = base.join(&r.image);
            tensors.push(SynthImage::load_png(&p)?.to_tensor()?);
        }
        Ok(SplitData {
            ids: records.iter().map(|r| r.image.clone()).collect(),
            images: Tensor::stack(&tensors, 0)?.to_dtype(DType::F32)?,
            labels: records.iter().map(|r| r.attrs.clone()).collect(),
            categories: records.iter().map(|r| r.category).collect(),
        })
    }
}
