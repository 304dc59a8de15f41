//! Synthetic pedestrian images with attributes painted into body regions,
//! plus the line-delimited sample manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::catalog::{AttrRef, AttributeCatalog};
use crate::image::Image;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("region of group {group} is [{lo}, {hi}), expected 0 <= lo < hi <= 1")]
    Interval { group: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no render rule for attribute `{0}`")]
    MissingRule(String),
    #[error("attributes `{a}` and `{b}` of group `{group}` render identically")]
    AmbiguousRules { group: String, a: String, b: String },
    #[error(transparent)]
    Layout(#[from] LayoutError),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("manifest line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Vertical `[lo, hi)` interval per group, as fractions of image height.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionLayout {
    pub intervals: Vec<[f64; 2]>,
}

impl RegionLayout {
    pub fn from_catalog(catalog: &AttributeCatalog) -> Self {
        Self {
            intervals: catalog.groups().iter().map(|g| g.region_interval()).collect(),
        }
    }

    /// Every group covering the whole image.
    pub fn full(groups: usize) -> Self {
        Self {
            intervals: vec![[0.0, 1.0]; groups],
        }
    }

    pub fn validate(&self) -> Result<(), LayoutError> {
        for (group, &[lo, hi]) in self.intervals.iter().enumerate() {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
                return Err(LayoutError::Interval { group, lo, hi });
            }
        }
        Ok(())
    }
}

/// Horizontal span a group is painted into. Groups sharing a body band get
/// disjoint columns so one does not paint over the other.
pub fn column_span(key: &str) -> [f64; 2] {
    match key.to_ascii_lowercase().as_str() {
        "gender" => [0.0, 0.125],
        "age" => [0.875, 1.0],
        "hair" | "upperbody" => [0.125, 0.5],
        "accessory" | "carry" => [0.5, 0.875],
        "lowerbody" | "foot" => [0.125, 0.875],
        _ => [0.0, 1.0],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    const ALL: [Texture; 4] = [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots];

    /// Whether pixel (y, x) of a painted rectangle takes the full color
    /// rather than its dimmed variant.
    fn lit(self, y: usize, x: usize) -> bool {
        match self {
            Texture::Solid => true,
            Texture::Stripes => (y / 2) % 2 == 0,
            Texture::Checker => (y / 2 + x / 2) % 2 == 0,
            Texture::Dots => y % 3 != 1 || x % 3 != 1,
        }
    }
}

const DIM: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderRule {
    pub color: [f64; 3],
    pub texture: Texture,
}

impl RenderRule {
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        if self.texture.lit(y, x) {
            self.color
        } else {
            self.color.map(|c| c * DIM)
        }
    }
}

/// Built-in look of the desk catalog's words. A word looks the same in
/// every group it appears in.
fn builtin_rule(word: &str) -> Option<RenderRule> {
    use Texture::*;
    let (color, texture) = match word {
        "long" => ([0.35, 0.2, 0.1], Stripes),
        "short" => ([0.95, 0.85, 0.4], Dots),
        "black" => ([0.05, 0.05, 0.05], Solid),
        "white" => ([0.97, 0.97, 0.97], Solid),
        "brown" => ([0.55, 0.35, 0.15], Solid),
        "male" => ([0.1, 0.3, 0.9], Solid),
        "female" => ([0.95, 0.4, 0.7], Solid),
        "unknown" => ([0.6, 0.6, 0.6], Checker),
        "less15" => ([0.2, 0.9, 0.2], Solid),
        "less30" => ([0.2, 0.9, 0.9], Stripes),
        "less45" => ([0.9, 0.9, 0.2], Checker),
        "less60" => ([0.9, 0.5, 0.1], Dots),
        "larger60" => ([0.6, 0.2, 0.8], Solid),
        "backpack" => ([0.1, 0.5, 0.3], Checker),
        "messengerbag" => ([0.7, 0.1, 0.2], Stripes),
        "plasticbags" => ([0.85, 0.95, 1.0], Dots),
        "nothing" => ([0.45, 0.45, 0.75], Dots),
        "sunglasses" => ([0.15, 0.15, 0.35], Stripes),
        "hat" => ([1.0, 0.6, 0.0], Solid),
        "muffler" => ([0.8, 0.2, 0.5], Checker),
        "leathershoes" => ([0.3, 0.15, 0.05], Checker),
        "sandals" => ([0.9, 0.75, 0.55], Stripes),
        "casual" => ([0.3, 0.7, 0.5], Dots),
        "formal" => ([0.2, 0.2, 0.5], Solid),
        "plaid" => ([0.9, 0.3, 0.2], Checker),
        "striped" => ([0.2, 0.6, 0.95], Stripes),
        "red" => ([0.95, 0.1, 0.1], Solid),
        "jeans" => ([0.15, 0.3, 0.65], Dots),
        "shorts" => ([0.75, 0.7, 0.5], Checker),
        _ => return None,
    };
    Some(RenderRule { color, texture })
}

/// Deterministic fallback look for words without a built-in rule.
pub fn hashed_rule(word: &str) -> RenderRule {
    let h = Sha256::digest(word.as_bytes());
    let c = |i: usize| 0.15 + 0.8 * h[i] as f64 / 255.0;
    RenderRule {
        color: [c(0), c(1), c(2)],
        texture: Texture::ALL[h[3] as usize % 4],
    }
}

/// Generation parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub background: f64,
    pub rules: BTreeMap<String, RenderRule>,
}

impl SyntheticSpec {
    /// Rules for every word of `catalog`: built-in where available, hashed
    /// otherwise.
    pub fn for_catalog(catalog: &AttributeCatalog, height: usize, width: usize, noise: f64) -> Result<Self, SynthError> {
        let mut rules = BTreeMap::new();
        for g in catalog.groups() {
            for a in &g.attributes {
                rules
                    .entry(a.clone())
                    .or_insert_with(|| builtin_rule(a).unwrap_or_else(|| hashed_rule(a)));
            }
        }
        let spec = Self {
            height,
            width,
            noise,
            background: 0.25,
            rules,
        };
        spec.check(catalog)?;
        Ok(spec)
    }

    /// Every attribute has a rule and no two attributes of one group share
    /// one.
    pub fn check(&self, catalog: &AttributeCatalog) -> Result<(), SynthError> {
        RegionLayout::from_catalog(catalog).validate()?;
        for g in catalog.groups() {
            for (i, a) in g.attributes.iter().enumerate() {
                let ra = self.rule(a)?;
                for b in &g.attributes[i + 1..] {
                    if ra == self.rule(b)? {
                        return Err(SynthError::AmbiguousRules {
                            group: g.key.clone(),
                            a: a.clone(),
                            b: b.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn rule(&self, word: &str) -> Result<&RenderRule, SynthError> {
        self.rules
            .get(word)
            .ok_or_else(|| SynthError::MissingRule(word.to_string()))
    }
}

fn pixel_span(interval: [f64; 2], size: usize) -> (usize, usize) {
    let lo = (interval[0] * size as f64).round() as usize;
    let hi = ((interval[1] * size as f64).round() as usize).max(lo + 1).min(size);
    (lo, hi)
}

/// Paints one image: groups in catalog order, each group's first attribute
/// filling its rectangle, then Gaussian noise and clamping.
pub fn render(
    spec: &SyntheticSpec,
    catalog: &AttributeCatalog,
    labels: &[AttrRef],
    rng: &mut ChaCha8Rng,
) -> Result<Image, SynthError> {
    let mut img = Image::filled(spec.height, spec.width, [spec.background; 3]);
    for (g, group) in catalog.groups().iter().enumerate() {
        let Some(a) = labels.iter().find(|a| a.group == g) else {
            continue;
        };
        let rule = spec.rule(catalog.value(*a))?;
        let (y0, y1) = pixel_span(group.region_interval(), spec.height);
        let (x0, x1) = pixel_span(column_span(&group.key), spec.width);
        for y in y0..y1 {
            for x in x0..x1 {
                img.set_pixel(y, x, rule.pixel(y - y0, x - x0));
            }
        }
    }
    if spec.noise > 0.0 {
        let n = Normal::new(0.0, spec.noise).expect("finite noise");
        for v in img.data_mut() {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }
    Ok(img)
}

/// Draws one attribute per group from `choices[g]` and renders it.
pub fn generate_sample(
    spec: &SyntheticSpec,
    catalog: &AttributeCatalog,
    choices: &[Vec<AttrRef>],
    rng: &mut ChaCha8Rng,
) -> Result<(Image, Vec<AttrRef>), SynthError> {
    let labels: Vec<AttrRef> = choices
        .iter()
        .filter(|c| !c.is_empty())
        .map(|c| c[rng.random_range(0..c.len())])
        .collect();
    let img = render(spec, catalog, &labels, rng)?;
    Ok((img, labels))
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticSplit {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<AttrRef>>,
}

#[derive(Clone, Debug, Default)]
pub struct SyntheticDataset {
    pub train: SyntheticSplit,
    pub test: SyntheticSplit,
}

/// Training images draw only seen attributes, test images draw from every
/// attribute of the catalog, both uniformly per group.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    catalog: &AttributeCatalog,
    n_train: usize,
    n_test: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticDataset, SynthError> {
    spec.check(catalog)?;
    let seen: Vec<Vec<AttrRef>> = (0..catalog.num_groups()).map(|g| catalog.seen_in_group(g)).collect();
    let all: Vec<Vec<AttrRef>> = (0..catalog.num_groups())
        .map(|g| {
            (0..catalog.group(g).attributes.len())
                .map(|index| AttrRef { group: g, index })
                .collect()
        })
        .collect();
    let mut out = SyntheticDataset::default();
    for (n, choices, split) in [(n_train, &seen, &mut out.train), (n_test, &all, &mut out.test)] {
        for _ in 0..n {
            let (img, labels) = generate_sample(spec, catalog, choices, rng)?;
            split.images.push(img);
            split.labels.push(labels);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub flip_prob: f64,
    pub erase_prob: f64,
}

impl AugmentOptions {
    pub const NONE: Self = Self {
        flip_prob: 0.0,
        erase_prob: 0.0,
    };
    pub const STANDARD: Self = Self {
        flip_prob: 0.5,
        erase_prob: 0.25,
    };
}

/// Random horizontal flip, then random erasing of a rectangle covering
/// 2–20% of the image with uniform noise. Returns the erased pixel count.
pub fn augment(image: &mut Image, options: AugmentOptions, rng: &mut ChaCha8Rng) -> usize {
    if options.flip_prob > 0.0 && rng.random_bool(options.flip_prob) {
        *image = image.flip_horizontal();
    }
    if options.erase_prob <= 0.0 || !rng.random_bool(options.erase_prob) {
        return 0;
    }
    let (h, w) = (image.height(), image.width());
    let total = (h * w) as f64;
    for _ in 0..10 {
        let area = rng.random_range(0.02..0.2) * total;
        let aspect = rng.random_range(0.3f64.ln()..(1.0f64 / 0.3).ln()).exp();
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        let frac = (eh * ew) as f64 / total;
        if eh == 0 || ew == 0 || eh > h || ew > w || !(0.02..=0.2).contains(&frac) {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                image.set_pixel(y, x, [rng.random(), rng.random(), rng.random()]);
            }
        }
        return eh * ew;
    }
    0
}

/// One manifest line: an image path and its labels by group key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub labels: IndexMap<String, Vec<String>>,
}

impl SampleRecord {
    pub fn from_refs(image: String, catalog: &AttributeCatalog, labels: &[AttrRef]) -> Self {
        let mut map: IndexMap<String, Vec<String>> = IndexMap::new();
        for &a in labels {
            map.entry(catalog.group(a.group).key.clone())
                .or_default()
                .push(catalog.value(a).to_string());
        }
        Self { image, labels: map }
    }

    /// Labels resolved against `catalog`, in record order.
    pub fn resolve(&self, catalog: &AttributeCatalog) -> Result<Vec<AttrRef>, String> {
        let mut out = Vec::new();
        for (group, values) in &self.labels {
            if catalog.group_index(group).is_none() {
                return Err(format!("unknown group `{group}`"));
            }
            if values.is_empty() {
                return Err(format!("group `{group}` has an empty label list"));
            }
            for v in values {
                out.push(
                    catalog
                        .find(group, v)
                        .ok_or_else(|| format!("unknown attribute `{group}:{v}`"))?,
                );
            }
        }
        Ok(out)
    }
}

pub fn manifest_to_string(records: &[SampleRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(records: &[SampleRecord], path: &Path) -> Result<(), ManifestError> {
    fs::write(path, manifest_to_string(records))?;
    Ok(())
}

/// Parses a manifest and checks every label against `catalog`.
pub fn parse_manifest(text: &str, catalog: &AttributeCatalog) -> Result<Vec<SampleRecord>, ManifestError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| ManifestError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.resolve(catalog)
            .map_err(|message| ManifestError::Validation { line: i + 1, message })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_manifest(path: &Path, catalog: &AttributeCatalog) -> Result<Vec<SampleRecord>, ManifestError> {
    parse_manifest(&fs::read_to_string(path)?, catalog)
}
