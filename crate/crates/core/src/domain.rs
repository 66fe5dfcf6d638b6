//! Shared image and configuration types.
//!
//! Images are stored interleaved (row-major, channel-last) as `f64` in the
//! unit range. The model works on `f32` or `f64` NCHW tensors; conversion
//! happens at the boundary via [`Image::to_tensor`] and [`Image::from_tensor`].

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `H×W×C` image, `C = 3` for every valid RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved samples. Only the buffer length is
    /// checked here; use [`Image::validate`] for the full invariant set.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn rgb(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, 3, data)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels: 3,
            data: vec![value; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels: 3,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let idx = (y * self.width + x) * self.channels + c;
        self.data[idx] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * self.channels;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Checks every invariant and reports the first violation.
    pub fn validate(&self) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::ChannelMismatch(self.channels));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::EmptyImage {
                height: self.height,
                width: self.width,
            });
        }
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    pub fn clamp_unit(&self) -> Result<Image> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(self.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Round-trips through 8-bit storage, as a saved PNG would.
    pub fn quantize_u8(&self) -> Image {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let row = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[row..row + width * c]);
        }
        Image::new(height, width, c, data)
    }

    pub fn flip_horizontal(&self) -> Image {
        let c = self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * c;
                data.extend_from_slice(&self.data[i..i + c]);
            }
        }
        Image { data, ..*self }
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize(&self, height: usize, width: usize) -> Image {
        let c = self.channels;
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            let (y0, y1, fy) = sample_coord(y, sy, self.height);
            for x in 0..width {
                let (x0, x1, fx) = sample_coord(x, sx, self.width);
                for ch in 0..c {
                    let top = self.get(y0, x0, ch) * (1.0 - fx) + self.get(y0, x1, ch) * fx;
                    let bottom = self.get(y1, x0, ch) * (1.0 - fx) + self.get(y1, x1, ch) * fx;
                    data.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
        Image {
            height,
            width,
            channels: c,
            data,
        }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        self.validate()?;
        let (h, w) = (self.height, self.width);
        let mut planar = vec![0f64; self.data.len()];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c];
            }
        }
        Ok(Tensor::from_vec(planar, (1, 3, h, w), device)?.to_dtype(dtype)?)
    }

    /// Stacks same-sized images into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&Image], device: &Device, dtype: DType) -> Result<Tensor> {
        let parts = images
            .iter()
            .map(|img| img.to_tensor(device, dtype))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Accepts `(3, H, W)` or `(1, 3, H, W)`; also `(1, H, W)`-style single
    /// channel maps, which become a 1-channel image.
    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let t = match t.rank() {
            4 => {
                if t.dim(0)? != 1 {
                    return Err(Error::ShapeMismatch(format!(
                        "expected a single image, got batch of {}",
                        t.dim(0)?
                    )));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => return Err(Error::ShapeMismatch(format!("expected rank 3 or 4 tensor, got {r}"))),
        };
        let (c, h, w) = t.dims3()?;
        let planar = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let mut data = vec![0f64; planar.len()];
        for ch in 0..c {
            for i in 0..h * w {
                data[i * c + ch] = planar[ch * h * w + i];
            }
        }
        Image::new(h, w, c, data)
    }

    /// Decodes an 8-bit sRGB file and normalizes to `[0, 1]`.
    pub fn load(path: impl AsRef<Path>) -> Result<Image> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect();
        Image::rgb(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(Error::ChannelMismatch(self.channels));
        }
        let raw = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::ShapeMismatch("buffer does not match dimensions".into()))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::output(path, io),
                other => Error::Image(other),
            })
    }

    /// Saves channel 0 of a single-channel map as an 8-bit grayscale PNG.
    pub fn save_gray_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let raw = (0..self.height * self.width)
            .map(|i| (self.data[i * self.channels].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let gray = image::GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::ShapeMismatch("buffer does not match dimensions".into()))?;
        gray.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::output(path, io),
                other => Error::Image(other),
            })
    }
}

fn sample_coord(dst: usize, scale: f64, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn clamp_unit(img: &Image) -> Result<Image> {
    img.clamp_unit()
}

pub fn validate_image(img: &Image) -> Result<()> {
    img.validate()
}

/// The six elementary-function dehazing components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    /// Atmospheric scattering: `I - A(1 - T)`.
    #[serde(rename = "AS")]
    As,
    /// `I * R`.
    #[serde(rename = "MUL")]
    Mul,
    /// `I + R`.
    #[serde(rename = "ADD")]
    Add,
    /// `I ^ R`.
    #[serde(rename = "EXP")]
    Exp,
    /// `ln(1 + I * R)`.
    #[serde(rename = "LOG")]
    Log,
    /// `sin(I + R)`.
    #[serde(rename = "SIN")]
    Sin,
}

impl ComponentKind {
    /// Canonical head order.
    pub const ALL: [ComponentKind; 6] = [
        ComponentKind::As,
        ComponentKind::Mul,
        ComponentKind::Add,
        ComponentKind::Exp,
        ComponentKind::Log,
        ComponentKind::Sin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComponentKind::As => "AS",
            ComponentKind::Mul => "MUL",
            ComponentKind::Add => "ADD",
            ComponentKind::Exp => "EXP",
            ComponentKind::Log => "LOG",
            ComponentKind::Sin => "SIN",
        }
    }

    fn rank(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::UnknownKind(s.trim().to_string()))
    }
}

/// A named, non-empty set of active components in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantSpec {
    name: String,
    kinds: Vec<ComponentKind>,
}

impl VariantSpec {
    /// Builds a spec from any ordering of distinct kinds; the stored order is
    /// always the canonical one.
    pub fn new(name: impl Into<String>, kinds: &[ComponentKind]) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::EmptyVariant);
        }
        let mut sorted = kinds.to_vec();
        sorted.sort_by_key(|k| k.rank());
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateKind(w[0]));
        }
        Ok(Self {
            name: name.into(),
            kinds: sorted,
        })
    }

    /// Parses a comma-separated kind list such as `AS,MUL,SIN`.
    pub fn from_heads(list: &str) -> Result<Self> {
        let kinds = list
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(ComponentKind::from_str)
            .collect::<Result<Vec<_>>>()?;
        let spec = Self::new("custom", &kinds)?;
        let name = spec.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join("+");
        Ok(Self { name, ..spec })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kinds(&self) -> &[ComponentKind] {
        &self.kinds
    }

    pub fn arity(&self) -> usize {
        self.kinds.len()
    }

    pub fn contains(&self, kind: ComponentKind) -> bool {
        self.kinds.contains(&kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clamp_leaves_in_range_values() {
        let img = Image::filled(4, 4, 0.5);
        assert_eq!(img.clamp_unit().unwrap(), img);
    }

    #[test]
    fn clamp_bounds() {
        let img = Image::rgb(1, 2, vec![1.3, 0.2, 0.4, -0.2, 0.0, 1.0]).unwrap();
        let out = img.clamp_unit().unwrap();
        assert_eq!(out.data(), &[1.0, 0.2, 0.4, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn clamp_rejects_nan_with_index() {
        let mut img = Image::filled(2, 2, 0.1);
        img.data_mut()[7] = f64::NAN;
        match img.clamp_unit() {
            Err(Error::NonFinite { index }) => assert_eq!(index, 7),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validate_cases() {
        assert!(Image::filled(4, 4, 0.3).validate().is_ok());

        let mut nan = Image::filled(4, 4, 0.3);
        nan.data_mut()[5] = f64::NAN;
        let err = nan.validate().unwrap_err();
        assert!(err.to_string().contains("non-finite value"), "{err}");

        let gray = Image::new(4, 4, 1, vec![0.5; 16]).unwrap();
        let err = gray.validate().unwrap_err();
        assert!(err.to_string().contains("channel mismatch"), "{err}");

        let empty = Image::new(0, 4, 3, vec![]).unwrap();
        assert!(matches!(empty.validate(), Err(Error::EmptyImage { .. })));
    }

    #[test]
    fn tensor_round_trip_keeps_layout() {
        let img = Image::from_fn(3, 5, |y, x, c| (y * 100 + x * 10 + c) as f64 / 1000.0);
        let t = img.to_tensor(&Device::Cpu, DType::F64).unwrap();
        assert_eq!(t.dims(), &[1, 3, 3, 5]);
        let v = t.get(0).unwrap().get(2).unwrap().get(1).unwrap().get(4).unwrap();
        assert_eq!(v.to_scalar::<f64>().unwrap(), img.get(1, 4, 2));
        assert_eq!(Image::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn crop_and_flip() {
        let img = Image::from_fn(4, 4, |y, x, c| (y * 4 + x) as f64 + c as f64 * 0.1);
        let c = img.crop(1, 2, 2, 2).unwrap();
        assert_eq!(c.get(0, 0, 0), img.get(1, 2, 0));
        assert_eq!(c.get(1, 1, 2), img.get(2, 3, 2));
        let f = img.flip_horizontal();
        assert_eq!(f.get(2, 0, 1), img.get(2, 3, 1));
        assert_eq!(f.flip_horizontal(), img);
        assert!(img.crop(3, 3, 2, 2).is_err());
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Image::from_fn(5, 7, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 105.0);
        let r = img.resize(5, 7);
        for (a, b) in r.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kinds_parse_and_order() {
        assert_eq!("sin".parse::<ComponentKind>().unwrap(), ComponentKind::Sin);
        assert!("tanh".parse::<ComponentKind>().is_err());
        let spec = VariantSpec::from_heads("SIN, AS ,MUL").unwrap();
        assert_eq!(
            spec.kinds(),
            &[ComponentKind::As, ComponentKind::Mul, ComponentKind::Sin]
        );
        assert_eq!(spec.name(), "AS+MUL+SIN");
        assert!(matches!(VariantSpec::from_heads(""), Err(Error::EmptyVariant)));
        assert!(matches!(
            VariantSpec::from_heads("AS,as"),
            Err(Error::DuplicateKind(ComponentKind::As))
        ));
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent_and_monotone(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let img = Image::rgb(1, 1, vec![a, b, a.min(b)]).unwrap();
            let once = img.clamp_unit().unwrap();
            prop_assert_eq!(once.clamp_unit().unwrap(), once.clone());
            let (lo, hi) = if a <= b { (0, 1) } else { (1, 0) };
            prop_assert!(once.data()[lo] <= once.data()[hi]);
            prop_assert!(once.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
