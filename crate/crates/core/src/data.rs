//! Paired datasets: on-disk benchmark layouts, the haze forward model and a
//! procedural synthetic set.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::Image;
use crate::error::{Error, Result};
use crate::metrics::list_images;

/// Smallest transmission the exact inversion accepts.
pub const T_FLOOR: f64 = 1e-3;

/// Number of O-HAZE pairs in the training split; the rest are test pairs.
pub const OHAZE_TRAIN_PAIRS: usize = 35;

#[derive(Clone, Debug)]
pub struct PairedSample {
    pub id: String,
    pub hazy: Image,
    pub clear: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "reside_its")]
    ResideIts,
    #[serde(rename = "reside_sots")]
    ResideSots,
    #[serde(rename = "ohaze")]
    Ohaze,
    #[serde(rename = "hazerd")]
    Hazerd,
    #[serde(rename = "flat_pairs")]
    FlatPairs,
}

impl Layout {
    pub fn name(self) -> &'static str {
        match self {
            Layout::ResideIts => "reside_its",
            Layout::ResideSots => "reside_sots",
            Layout::Ohaze => "ohaze",
            Layout::Hazerd => "hazerd",
            Layout::FlatPairs => "flat_pairs",
        }
    }

    /// Default hazy-stem → clear-id mapping for many-to-one layouts.
    pub fn default_pattern(self) -> Option<&'static str> {
        match self {
            Layout::ResideIts | Layout::ResideSots => Some(r"^(?P<id>[^_]+)_"),
            Layout::Hazerd => Some(r"^(?P<id>.+)_[^_]+$"),
            Layout::Ohaze | Layout::FlatPairs => None,
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Ok(match norm.as_str() {
            "reside_its" | "its" => Layout::ResideIts,
            "reside_sots" | "sots" => Layout::ResideSots,
            "ohaze" | "o_haze" => Layout::Ohaze,
            "hazerd" => Layout::Hazerd,
            "flat_pairs" | "flat" => Layout::FlatPairs,
            _ => return Err(Error::Config(format!("unknown dataset layout `{s}`"))),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    All,
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "all" => Ok(Split::All),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub layout: Layout,
    pub split: Split,
    /// Regex with an `id` capture group mapping a hazy file stem to its
    /// clear image stem. Overrides the layout default.
    pub pattern: Option<String>,
}

impl LoadOptions {
    pub fn new(layout: Layout) -> Self {
        Self {
            layout,
            split: Split::All,
            pattern: None,
        }
    }

    pub fn split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Atmospheric scattering parameters for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub airlight: [f64; 3],
    pub beta: f64,
    pub height: usize,
    pub width: usize,
    /// Row-major depth map, `height * width` entries.
    pub depth: Vec<f64>,
}

impl HazeParams {
    pub fn uniform(airlight: [f64; 3], beta: f64, height: usize, width: usize, depth: f64) -> Self {
        Self {
            airlight,
            beta,
            height,
            width,
            depth: vec![depth; height * width],
        }
    }

    /// Parameters whose transmission is exactly `t` everywhere (`β = 1`).
    pub fn with_transmission(airlight: [f64; 3], height: usize, width: usize, t: f64) -> Self {
        Self::uniform(airlight, 1.0, height, width, -t.ln())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.airlight.iter().find(|a| !(0.7..=1.0).contains(*a)) {
            return Err(Error::HazeParams(format!("atmospheric light {a} outside [0.7, 1]")));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::HazeParams(format!("beta {} must be finite and ≥ 0", self.beta)));
        }
        if self.depth.len() != self.height * self.width {
            return Err(Error::HazeParams("depth map size does not match its dimensions".into()));
        }
        if let Some(d) = self.depth.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return Err(Error::HazeParams(format!("depth {d} must be finite and ≥ 0")));
        }
        Ok(())
    }

    #[inline]
    pub fn transmission(&self, y: usize, x: usize) -> f64 {
        (-self.beta * self.depth[y * self.width + x]).exp()
    }

    pub fn min_transmission(&self) -> f64 {
        let dmax = self.depth.iter().copied().fold(0.0, f64::max);
        (-self.beta * dmax).exp()
    }

    pub fn crop(&self, w: &CropWindow) -> Result<HazeParams> {
        let as_img = Image::new(self.height, self.width, 1, self.depth.clone())?;
        let mut depth = as_img.crop(w.top, w.left, w.size, w.size)?;
        if w.flip {
            depth = depth.flip_horizontal();
        }
        Ok(HazeParams {
            airlight: self.airlight,
            beta: self.beta,
            height: w.size,
            width: w.size,
            depth: depth.into_data(),
        })
    }

    fn check_dims(&self, img: &Image) -> Result<()> {
        self.validate()?;
        img.validate()?;
        if img.dims() != (self.height, self.width) {
            return Err(Error::HazeParams(format!(
                "depth is {}x{}, image is {}x{}",
                self.height,
                self.width,
                img.height(),
                img.width()
            )));
        }
        Ok(())
    }
}

/// `I = J·t + A·(1 - t)`, `t = exp(-β·d)`.
pub fn synthesize_haze(clear: &Image, params: &HazeParams) -> Result<Image> {
    params.check_dims(clear)?;
    if let Some(index) = clear.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::HazeParams(format!("clear image value at {index} outside [0, 1]")));
    }
    let mut out = clear.clone();
    for y in 0..clear.height() {
        for x in 0..clear.width() {
            let t = params.transmission(y, x);
            for c in 0..3 {
                let v = clear.get(y, x, c) * t + params.airlight[c] * (1.0 - t);
                out.set(y, x, c, v);
            }
        }
    }
    Ok(out)
}

/// `J = (I - A·(1 - t)) / t`, the algebraic inverse of [`synthesize_haze`].
pub fn exact_dehaze_oracle(hazy: &Image, params: &HazeParams) -> Result<Image> {
    params.check_dims(hazy)?;
    let t_min = params.min_transmission();
    if t_min < T_FLOOR {
        return Err(Error::TransmissionFloor {
            value: t_min,
            floor: T_FLOOR,
        });
    }
    let mut out = hazy.clone();
    for y in 0..hazy.height() {
        for x in 0..hazy.width() {
            let t = params.transmission(y, x);
            for c in 0..3 {
                let v = (hazy.get(y, x, c) - params.airlight[c] * (1.0 - t)) / t;
                out.set(y, x, c, v);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
enum Source {
    Files { hazy: PathBuf, clear: PathBuf },
    Memory {
        sample: Arc<PairedSample>,
        params: Option<Arc<HazeParams>>,
    },
}

#[derive(Clone, Debug)]
struct Entry {
    id: String,
    source: Source,
}

/// An ordered, indexable collection of paired samples. Index order is
/// deterministic: sorted by id for on-disk layouts, generation order for
/// synthetic sets.
#[derive(Clone, Debug)]
pub struct Dataset {
    name: String,
    entries: Vec<Entry>,
}

impl Dataset {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn get(&self, index: usize) -> Result<PairedSample> {
        let entry = self.entries.get(index).ok_or_else(|| {
            Error::Config(format!("sample index {index} out of range for {} samples", self.entries.len()))
        })?;
        match &entry.source {
            Source::Files { hazy, clear } => {
                let hazy = Image::load(hazy)?;
                let mut clear = Image::load(clear)?;
                if clear.dims() != hazy.dims() {
                    // Some releases ship ground truth a few pixels larger.
                    let (h, w) = hazy.dims();
                    if clear.height() >= h && clear.width() >= w {
                        let top = (clear.height() - h) / 2;
                        let left = (clear.width() - w) / 2;
                        clear = clear.crop(top, left, h, w)?;
                    } else {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: hazy {}x{} vs clear {}x{}",
                            entry.id,
                            h,
                            w,
                            clear.height(),
                            clear.width()
                        )));
                    }
                }
                Ok(PairedSample {
                    id: entry.id.clone(),
                    hazy,
                    clear,
                })
            }
            Source::Memory { sample, .. } => Ok(sample.as_ref().clone()),
        }
    }

    /// Haze parameters, for synthetic samples.
    pub fn haze_params(&self, index: usize) -> Option<&HazeParams> {
        match &self.entries.get(index)?.source {
            Source::Memory { params, .. } => params.as_deref(),
            Source::Files { .. } => None,
        }
    }

    /// Sub-dataset of the entries in `range`.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            name: format!("{}[{}..{}]", self.name, range.start, range.end),
            entries: self.entries[range].to_vec(),
        }
    }

    pub fn from_samples(name: impl Into<String>, samples: Vec<PairedSample>) -> Dataset {
        Dataset {
            name: name.into(),
            entries: samples
                .into_iter()
                .map(|s| Entry {
                    id: s.id.clone(),
                    source: Source::Memory {
                        sample: Arc::new(s),
                        params: None,
                    },
                })
                .collect(),
        }
    }

    /// Writes `hazy/` and `clear/` PNG directories with identical filenames.
    pub fn write_flat_pairs(&self, root: &Path) -> Result<()> {
        for sub in ["hazy", "clear"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::output(&dir, e))?;
        }
        let mut params = String::new();
        for i in 0..self.len() {
            let s = self.get(i)?;
            let file = format!("{}.png", s.id);
            s.hazy.save_png(root.join("hazy").join(&file))?;
            s.clear.save_png(root.join("clear").join(&file))?;
            if let Some(p) = self.haze_params(i) {
                let record = serde_json::json!({ "id": s.id, "airlight": p.airlight, "beta": p.beta });
                params.push_str(&serde_json::to_string(&record)?);
                params.push('\n');
            }
        }
        if !params.is_empty() {
            let path = root.join("haze_params.jsonl");
            fs::write(&path, params).map_err(|e| Error::output(&path, e))?;
        }
        Ok(())
    }
}

fn find_dir(root: &Path, candidates: &[&str]) -> Option<PathBuf> {
    candidates
        .iter()
        .map(|c| if c.is_empty() { root.to_path_buf() } else { root.join(c) })
        .find(|p| p.is_dir())
}

fn stem(name: &str) -> &str {
    Path::new(name).file_stem().and_then(|s| s.to_str()).unwrap_or(name)
}

fn by_stem(files: &BTreeMap<String, PathBuf>) -> BTreeMap<String, PathBuf> {
    files.iter().map(|(n, p)| (stem(n).to_string(), p.clone())).collect()
}

/// Enumerates a dataset root in one of the supported layouts.
pub fn load_dataset(root: &Path, opts: &LoadOptions) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::ZeroSamples(format!("{} (not a directory)", root.display())));
    }
    // (id, hazy path, clear path if found)
    let mut found: Vec<(String, PathBuf, Option<PathBuf>)> = Vec::new();
    let mut missing = 0usize;

    match opts.layout {
        Layout::FlatPairs => {
            let hazy = list_images(&root.join("hazy"))?;
            let clear = list_images(&root.join("clear"))?;
            for (name, path) in hazy {
                found.push((stem(&name).to_string(), path, clear.get(&name).cloned()));
            }
        }
        Layout::ResideIts | Layout::ResideSots | Layout::Hazerd => {
            let pattern = opts
                .pattern
                .as_deref()
                .or(opts.layout.default_pattern())
                .expect("many-to-one layouts have a default pattern");
            let re = Regex::new(pattern).map_err(|e| Error::Config(format!("bad filename pattern: {e}")))?;
            let hazy_dir = find_dir(root, &["hazy", "simu"]).unwrap_or_else(|| root.join("hazy"));
            let clear_dir = find_dir(root, &["clear", "gt", "GT", "img"]).unwrap_or_else(|| root.join("clear"));
            let clear = by_stem(&list_images(&clear_dir)?);
            for (name, path) in list_images(&hazy_dir)? {
                let s = stem(&name);
                let id = re.captures(s).and_then(|c| c.name("id")).map(|m| m.as_str().to_string());
                match id {
                    Some(id) => found.push((s.to_string(), path, clear.get(&id).cloned())),
                    None => {
                        log::warn!("{name} does not match pattern `{pattern}`; skipped");
                        missing += 1;
                    }
                }
            }
        }
        Layout::Ohaze => {
            let hazy_dir = find_dir(root, &["hazy", ""]).expect("root exists");
            let gt_dir = find_dir(root, &["GT", "gt", "clear", ""]).expect("root exists");
            let gt = by_stem(&list_images(&gt_dir)?);
            for (name, path) in list_images(&hazy_dir)? {
                let s = stem(&name);
                if !s.contains("_hazy") {
                    continue;
                }
                let gt_stem = s.replacen("_hazy", "_GT", 1);
                let id = s.replacen("_hazy", "", 1);
                found.push((id, path, gt.get(&gt_stem).cloned()));
            }
        }
    }

    let mut entries = Vec::with_capacity(found.len());
    for (id, hazy, clear) in found {
        match clear {
            Some(clear) => entries.push(Entry {
                id,
                source: Source::Files { hazy, clear },
            }),
            None => {
                log::warn!("{}: no clear counterpart for {id}; skipped", root.display());
                missing += 1;
            }
        }
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if opts.layout == Layout::Ohaze {
        let cut = OHAZE_TRAIN_PAIRS.min(entries.len());
        match opts.split {
            Split::Train => entries.truncate(cut),
            Split::Test => {
                entries.drain(..cut);
            }
            Split::All => {}
        }
    }
    if missing > 0 {
        log::warn!("{}: {missing} file(s) skipped", root.display());
    }
    if entries.is_empty() {
        return Err(Error::ZeroSamples(root.display().to_string()));
    }
    Ok(Dataset {
        name: format!("{}:{}", opts.layout, root.display()),
        entries,
    })
}

/// Low-frequency field: sum of three random-direction cosine gratings,
/// min-max normalized to `[0, max_depth]`.
fn cosine_depth(rng: &mut ChaCha8Rng, size: usize, max_depth: f64) -> Vec<f64> {
    use std::f64::consts::TAU;
    let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.random_range(0.0..TAU);
            let freq = rng.random_range(0.3..1.5);
            let phase = rng.random_range(0.0..TAU);
            let amp = rng.random_range(0.5..1.0);
            (theta, freq, phase, amp)
        })
        .collect();
    let mut field = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            let d: f64 = gratings
                .iter()
                .map(|&(th, f, ph, a)| a * (TAU * f * (u * th.cos() + v * th.sin()) + ph).cos())
                .sum();
            field.push(d);
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    field.iter_mut().for_each(|d| *d = (*d - lo) / span * max_depth);
    field
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// Smooth four-corner gradient with a few flat-coloured discs and boxes.
fn procedural_scene(rng: &mut ChaCha8Rng, size: usize) -> Image {
    let corners: [[f64; 3]; 4] = std::array::from_fn(|_| random_color(rng));
    let n_shapes = rng.random_range(3..=6);
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..n_shapes)
        .map(|_| {
            let disc = rng.random_bool(0.5);
            let cy = rng.random_range(0.0..1.0);
            let cx = rng.random_range(0.0..1.0);
            let ry = rng.random_range(0.05..0.25);
            let rx = rng.random_range(0.05..0.25);
            (disc, cy, cx, ry, rx, random_color(rng))
        })
        .collect();
    let stripe_freq = rng.random_range(4.0..12.0);
    let stripe_amp = rng.random_range(0.0..0.06);
    Image::from_fn(size, size, |y, x, c| {
        let (v, u) = ((y as f64 + 0.5) / size as f64, (x as f64 + 0.5) / size as f64);
        let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
        let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
        let mut value = top * (1.0 - v) + bottom * v;
        for &(disc, cy, cx, ry, rx, color) in &shapes {
            let inside = if disc {
                ((v - cy) / ry).powi(2) + ((u - cx) / rx).powi(2) <= 1.0
            } else {
                (v - cy).abs() <= ry && (u - cx).abs() <= rx
            };
            if inside {
                value = color[c];
            }
        }
        value += stripe_amp * (std::f64::consts::TAU * stripe_freq * (u + 0.5 * v)).sin();
        value.clamp(0.0, 1.0)
    })
}

/// `n` procedural clear images of `size × size`, each hazed with seeded
/// random `A ∈ [0.7, 1]`, `β ∈ [0.4, 1.6]` and depth in `[0, 3]`.
pub fn make_synthetic_set(n: usize, size: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::ZeroSamples("synthetic set of size 0".into()));
    }
    if size == 0 {
        return Err(Error::Config("synthetic image size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let clear = procedural_scene(&mut rng, size);
        let a = rng.random_range(0.7..=1.0);
        let beta = rng.random_range(0.4..=1.6);
        let depth = cosine_depth(&mut rng, size, 3.0);
        let params = HazeParams {
            airlight: [a; 3],
            beta,
            height: size,
            width: size,
            depth,
        };
        let hazy = synthesize_haze(&clear, &params)?;
        let id = format!("{i:04}");
        entries.push(Entry {
            id: id.clone(),
            source: Source::Memory {
                sample: Arc::new(PairedSample { id, hazy, clear }),
                params: Some(Arc::new(params)),
            },
        });
    }
    Ok(Dataset {
        name: format!("synthetic(n={n}, size={size}, seed={seed})"),
        entries,
    })
}

/// A square crop, optionally mirrored left-right after cropping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    pub flip: bool,
}

impl CropWindow {
    /// `None` when the image is smaller than the crop.
    pub fn choose<R: Rng + ?Sized>(height: usize, width: usize, size: usize, flip_prob: f64, rng: &mut R) -> Option<Self> {
        if height < size || width < size {
            return None;
        }
        let top = rng.random_range(0..=height - size);
        let left = rng.random_range(0..=width - size);
        let flip = flip_prob > 0.0 && rng.random_bool(flip_prob.min(1.0));
        Some(Self { top, left, size, flip })
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        let c = img.crop(self.top, self.left, self.size, self.size)?;
        Ok(if self.flip { c.flip_horizontal() } else { c })
    }
}

/// Applies one random window (and flip) to both images of a pair. Pairs
/// smaller than the crop are resized whole instead.
pub fn random_crop_pair<R: Rng + ?Sized>(s: &PairedSample, size: usize, flip_prob: f64, rng: &mut R) -> Result<PairedSample> {
    let (h, w) = s.hazy.dims();
    match CropWindow::choose(h, w, size, flip_prob, rng) {
        Some(win) => Ok(PairedSample {
            id: s.id.clone(),
            hazy: win.apply(&s.hazy)?,
            clear: win.apply(&s.clear)?,
        }),
        None => {
            log::info!("{} is {h}x{w}, smaller than crop {size}; resizing whole image", s.id);
            let flip = flip_prob > 0.0 && rng.random_bool(flip_prob.min(1.0));
            let fit = |img: &Image| {
                let r = img.resize(size, size);
                if flip {
                    r.flip_horizontal()
                } else {
                    r
                }
            };
            Ok(PairedSample {
                id: s.id.clone(),
                hazy: fit(&s.hazy),
                clear: fit(&s.clear),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn write_png(path: &Path, v: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        image::RgbImage::from_pixel(4, 4, image::Rgb([v, v, v])).save(path).unwrap();
    }

    #[test]
    fn haze_examples() {
        let clear = Image::filled(3, 3, 0.8);
        let p = HazeParams::with_transmission([1.0; 3], 3, 3, 0.5);
        let hazy = synthesize_haze(&clear, &p).unwrap();
        assert!(hazy.data().iter().all(|v| (v - 0.9).abs() < 1e-12));
        let none = HazeParams::uniform([0.9; 3], 0.0, 3, 3, 5.0);
        assert_eq!(synthesize_haze(&clear, &none).unwrap(), clear);
        let dense = HazeParams::uniform([0.75, 0.8, 0.85], 1.0, 3, 3, 60.0);
        let h = synthesize_haze(&clear, &dense).unwrap();
        assert!((h.get(1, 1, 0) - 0.75).abs() < 1e-12 && (h.get(2, 0, 2) - 0.85).abs() < 1e-12);
    }

    #[test]
    fn oracle_examples() {
        let p = HazeParams::with_transmission([1.0; 3], 2, 2, 0.5);
        let j = exact_dehaze_oracle(&Image::filled(2, 2, 0.9), &p).unwrap();
        assert!(j.data().iter().all(|v| (v - 0.8).abs() < 1e-12));
        let id = HazeParams::uniform([0.8; 3], 0.0, 2, 2, 1.0);
        let img = Image::from_fn(2, 2, |y, x, c| (y + x + c) as f64 / 5.0);
        assert_eq!(exact_dehaze_oracle(&img, &id).unwrap(), img);
        let thin = HazeParams::with_transmission([1.0; 3], 2, 2, 1e-4);
        assert!(matches!(
            exact_dehaze_oracle(&img, &thin),
            Err(Error::TransmissionFloor { .. })
        ));
    }

    #[test]
    fn invalid_params() {
        let img = Image::filled(2, 2, 0.5);
        let bad_a = HazeParams::uniform([0.5, 0.9, 0.9], 1.0, 2, 2, 1.0);
        assert!(matches!(synthesize_haze(&img, &bad_a), Err(Error::HazeParams(_))));
        let bad_depth = HazeParams::uniform([0.9; 3], 1.0, 2, 2, -1.0);
        assert!(synthesize_haze(&img, &bad_depth).is_err());
        let wrong_size = HazeParams::uniform([0.9; 3], 1.0, 3, 2, 1.0);
        assert!(synthesize_haze(&img, &wrong_size).is_err());
    }

    #[test]
    fn synthetic_set_contract() {
        let a = make_synthetic_set(6, 32, 7).unwrap();
        let b = make_synthetic_set(6, 32, 7).unwrap();
        assert_eq!(a.len(), 6);
        for i in 0..6 {
            let (x, y) = (a.get(i).unwrap(), b.get(i).unwrap());
            assert_eq!(x.hazy, y.hazy);
            assert_eq!(x.clear, y.clear);
            assert_eq!(x.hazy.dims(), (32, 32));
            let p = a.haze_params(i).unwrap();
            assert!((0.7..=1.0).contains(&p.airlight[0]) && (0.4..=1.6).contains(&p.beta));
            let dmax = p.depth.iter().copied().fold(0.0, f64::max);
            assert!((dmax - 3.0).abs() < 1e-9);
        }
        let other = make_synthetic_set(6, 32, 8).unwrap();
        assert_ne!(other.get(0).unwrap().clear, a.get(0).unwrap().clear);
        let mean: f64 = (0..6)
            .map(|i| {
                let s = a.get(i).unwrap();
                psnr(&s.hazy, &s.clear).unwrap()
            })
            .sum::<f64>()
            / 6.0;
        assert!(mean.is_finite() && mean < 30.0, "{mean}");
        assert!(make_synthetic_set(0, 32, 1).is_err());
    }

    #[test]
    fn crop_commutes_with_haze() {
        let set = make_synthetic_set(1, 24, 3).unwrap();
        let s = set.get(0).unwrap();
        let p = set.haze_params(0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let win = CropWindow::choose(24, 24, 10, 0.5, &mut rng).unwrap();
        let crop_then_haze = synthesize_haze(&win.apply(&s.clear).unwrap(), &p.crop(&win).unwrap()).unwrap();
        let haze_then_crop = win.apply(&s.hazy).unwrap();
        for (a, b) in crop_then_haze.data().iter().zip(haze_then_crop.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn crop_windows() {
        let img = Image::from_fn(8, 8, |y, x, c| (y * 8 + x + c) as f64 / 70.0);
        let s = PairedSample {
            id: "x".into(),
            hazy: img.clone(),
            clear: img.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = random_crop_pair(&s, 8, 0.0, &mut rng).unwrap();
        assert_eq!(full.hazy, img);
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = random_crop_pair(&s, 5, 0.5, &mut r1).unwrap();
        let b = random_crop_pair(&s, 5, 0.5, &mut r2).unwrap();
        assert_eq!(a.hazy, b.hazy);
        assert_eq!(a.hazy, a.clear);
        let up = random_crop_pair(&s, 12, 0.0, &mut rng).unwrap();
        assert_eq!(up.hazy.dims(), (12, 12));
    }

    #[test]
    fn flat_pairs_layout() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["b.png", "a.png", "c.png"] {
            write_png(&dir.path().join("hazy").join(n), 100);
        }
        for n in ["a.png", "b.png"] {
            write_png(&dir.path().join("clear").join(n), 50);
        }
        let ds = load_dataset(dir.path(), &LoadOptions::new(Layout::FlatPairs)).unwrap();
        assert_eq!(ds.ids(), vec!["a", "b"]);
        let s = ds.get(1).unwrap();
        assert!((s.hazy.get(0, 0, 0) - 100.0 / 255.0).abs() < 1e-12);
        let again = load_dataset(dir.path(), &LoadOptions::new(Layout::FlatPairs)).unwrap();
        assert_eq!(again.ids(), ds.ids());
    }

    #[test]
    fn empty_flat_pairs() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("hazy")).unwrap();
        fs::create_dir_all(dir.path().join("clear")).unwrap();
        let err = load_dataset(dir.path(), &LoadOptions::new(Layout::FlatPairs)).unwrap_err();
        assert!(err.to_string().contains("zero samples"), "{err}");
    }

    #[test]
    fn ohaze_split() {
        let dir = tempfile::tempdir().unwrap();
        for i in 1..=45 {
            write_png(&dir.path().join("hazy").join(format!("{i:02}_outdoor_hazy.jpg")), 200);
            write_png(&dir.path().join("GT").join(format!("{i:02}_outdoor_GT.jpg")), 20);
        }
        let train = load_dataset(dir.path(), &LoadOptions::new(Layout::Ohaze).split(Split::Train)).unwrap();
        let test = load_dataset(dir.path(), &LoadOptions::new(Layout::Ohaze).split(Split::Test)).unwrap();
        assert_eq!((train.len(), test.len()), (35, 10));
        assert_eq!(train.ids()[0], "01_outdoor");
        assert_eq!(test.ids()[0], "36_outdoor");
    }

    #[test]
    fn hazerd_many_to_one() {
        let dir = tempfile::tempdir().unwrap();
        for scene in 0..15 {
            write_png(&dir.path().join("clear").join(format!("IMG_{scene:04}.png")), 10);
            for cond in ["50", "100", "200", "500", "1000"] {
                write_png(&dir.path().join("hazy").join(format!("IMG_{scene:04}_{cond}.png")), 220);
            }
        }
        let ds = load_dataset(dir.path(), &LoadOptions::new(Layout::Hazerd)).unwrap();
        assert_eq!(ds.len(), 75);
    }

    #[test]
    fn reside_pattern_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("clear").join("1400.png"), 10);
        write_png(&dir.path().join("clear").join("1401.png"), 10);
        for n in ["1400_1_0.85.png", "1400_2_0.9.png", "1401_1_0.7.png", "9999_1_0.7.png"] {
            write_png(&dir.path().join("hazy").join(n), 90);
        }
        let ds = load_dataset(dir.path(), &LoadOptions::new(Layout::ResideIts)).unwrap();
        assert_eq!(ds.len(), 3);
        let custom = LoadOptions {
            layout: Layout::ResideSots,
            split: Split::All,
            pattern: Some(r"^(?P<id>\d{4})_1_".into()),
        };
        assert_eq!(load_dataset(dir.path(), &custom).unwrap().len(), 2);
    }

    #[test]
    fn layout_names() {
        assert_eq!("O-HAZE".parse::<Layout>().unwrap(), Layout::Ohaze);
        assert_eq!("flat".parse::<Layout>().unwrap(), Layout::FlatPairs);
        assert!("nope".parse::<Layout>().is_err());
    }
}
