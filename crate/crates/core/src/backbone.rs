//! Multi-scale feature extraction and attention-weighted level aggregation.
//!
//! Two profiles share the [`FeaturePyramid`] contract:
//!
//! * `Full` is a ResNeXt-style residual network (grouped 3×3 bottlenecks,
//!   strides 4/8/16/32). Its default layout is ResNeXt-101 32×4d.
//! * `Tiny` is a plain conv stack used for desk-scale runs and tests.
//!
//! Aggregation projects every level to a common width with a 1×1 conv,
//! resizes to the finest level, and blends levels with a per-position softmax
//! over level logits. The model holds two independent aggregators, one for the
//! atmospheric branch and one shared by the remaining heads.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ParamPath};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "lowercase")]
pub enum BackboneConfig {
    /// Plain conv stack. Level `k` has stride `first_stride * 2^k` and
    /// `widths[k]` channels.
    Tiny {
        widths: Vec<usize>,
        first_stride: usize,
    },
    /// ResNeXt bottleneck stages after a stride-4 stem.
    Full {
        stem_width: usize,
        blocks: Vec<usize>,
        widths: Vec<usize>,
        cardinality: usize,
        group_width: usize,
    },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl BackboneConfig {
    /// Desk-scale profile: two levels at strides 4 and 8.
    pub fn tiny() -> Self {
        BackboneConfig::Tiny {
            widths: vec![16, 32],
            first_stride: 4,
        }
    }

    /// ResNeXt-101 32×4d layout.
    pub fn full() -> Self {
        BackboneConfig::Full {
            stem_width: 64,
            blocks: vec![3, 4, 23, 3],
            widths: vec![256, 512, 1024, 2048],
            cardinality: 32,
            group_width: 4,
        }
    }

    pub fn strides(&self) -> Vec<usize> {
        match self {
            BackboneConfig::Tiny {
                widths,
                first_stride,
            } => (0..widths.len()).map(|k| first_stride << k).collect(),
            BackboneConfig::Full { widths, .. } => (0..widths.len()).map(|k| 4 << k).collect(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        match self {
            BackboneConfig::Tiny { widths, .. } | BackboneConfig::Full { widths, .. } => widths,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = self.widths();
        if widths.len() < 2 {
            return Err(Error::Config("backbone needs at least 2 levels".into()));
        }
        if widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        match self {
            BackboneConfig::Tiny { first_stride, .. } => {
                if !first_stride.is_power_of_two() || *first_stride < 2 {
                    return Err(Error::Config(format!(
                        "tiny backbone first stride must be a power of two ≥ 2, got {first_stride}"
                    )));
                }
            }
            BackboneConfig::Full {
                stem_width,
                blocks,
                cardinality,
                group_width,
                ..
            } => {
                if blocks.len() != widths.len() || blocks.contains(&0) {
                    return Err(Error::Config(
                        "full backbone needs one positive block count per level".into(),
                    ));
                }
                if *stem_width == 0 || *cardinality == 0 || *group_width == 0 {
                    return Err(Error::Config("full backbone widths must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FeatureLevel {
    pub stride: usize,
    /// `(B, C, ceil(H / stride), ceil(W / stride))`.
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub input_size: (usize, usize),
    pub levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    /// Structural checks shared by the extractor and the aggregator. A single
    /// level is accepted here; the extractor itself always emits at least two.
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::PyramidInconsistent("no levels".into()));
        }
        let (h, w) = self.input_size;
        let batch = self.levels[0].features.dim(0)?;
        let mut prev = 0;
        for (k, level) in self.levels.iter().enumerate() {
            if level.stride <= prev {
                return Err(Error::PyramidInconsistent(format!(
                    "stride of level {k} ({}) does not increase",
                    level.stride
                )));
            }
            prev = level.stride;
            let (b, _, lh, lw) = level.features.dims4()?;
            let expected = (h.div_ceil(level.stride), w.div_ceil(level.stride));
            if (lh, lw) != expected || b != batch {
                return Err(Error::PyramidInconsistent(format!(
                    "level {k} is {b}x{lh}x{lw}, expected {batch}x{}x{}",
                    expected.0, expected.1
                )));
            }
        }
        Ok(())
    }

    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| {
                let d = l.features.dims();
                (d[2], d[3])
            })
            .collect()
    }
}

struct Bottleneck {
    reduce: Conv2d,
    grouped: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

impl Bottleneck {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = nn::conv_relu(&self.reduce, x)?;
        let y = nn::conv_relu(&self.grouped, &y)?;
        let y = self.expand.forward(&y)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(x)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

enum Stage {
    Plain(Vec<Conv2d>),
    Residual(Vec<Bottleneck>),
}

/// Feature extractor for either profile.
pub struct Backbone {
    config: BackboneConfig,
    stem: Vec<Conv2d>,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(config: &BackboneConfig, p: &ParamPath) -> Result<Self> {
        config.validate()?;
        let mut stem = Vec::new();
        let mut stages = Vec::new();
        match config {
            BackboneConfig::Tiny {
                widths,
                first_stride,
            } => {
                let steps = first_stride.trailing_zeros() as usize;
                for i in 0..steps {
                    let in_ch = if i == 0 { 3 } else { widths[0] };
                    stem.push(nn::conv3x3(&p.pp(format!("stem.{i}")), in_ch, widths[0], 2)?);
                }
                for (k, &width) in widths.iter().enumerate() {
                    let sp = p.pp(format!("level{k}"));
                    let mut convs = Vec::new();
                    if k > 0 {
                        convs.push(nn::conv3x3(&sp.pp("down"), widths[k - 1], width, 2)?);
                    }
                    convs.push(nn::conv3x3(&sp.pp("conv"), width, width, 1)?);
                    stages.push(Stage::Plain(convs));
                }
            }
            BackboneConfig::Full {
                stem_width,
                blocks,
                widths,
                cardinality,
                group_width,
            } => {
                stem.push(nn::conv(&p.pp("stem.0"), 3, *stem_width, 7, 2, 1)?);
                stem.push(nn::conv3x3(&p.pp("stem.1"), *stem_width, *stem_width, 2)?);
                let mut in_ch = *stem_width;
                for (k, (&n, &out_ch)) in blocks.iter().zip(widths).enumerate() {
                    let inner = cardinality * group_width << k;
                    let mut stage = Vec::with_capacity(n);
                    for b in 0..n {
                        let bp = p.pp(format!("level{k}.block{b}"));
                        let stride = if b == 0 && k > 0 { 2 } else { 1 };
                        let shortcut = if b == 0 && (in_ch != out_ch || stride != 1) {
                            Some(nn::conv(&bp.pp("shortcut"), in_ch, out_ch, 1, stride, 1)?)
                        } else {
                            None
                        };
                        stage.push(Bottleneck {
                            reduce: nn::conv1x1(&bp.pp("reduce"), in_ch, inner)?,
                            grouped: nn::conv(&bp.pp("grouped"), inner, inner, 3, stride, *cardinality)?,
                            expand: nn::conv1x1(&bp.pp("expand"), inner, out_ch)?,
                            shortcut,
                        });
                        in_ch = out_ch;
                    }
                    stages.push(Stage::Residual(stage));
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Runs the extractor on a `(B, 3, H, W)` batch.
    pub fn extract_features(&self, x: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::ChannelMismatch(c));
        }
        let strides = self.config.strides();
        let max_stride = *strides.last().expect("validated: at least two levels");
        if h < max_stride || w < max_stride {
            return Err(Error::InputTooSmall {
                height: h,
                width: w,
                stride: max_stride,
            });
        }
        let mut y = x.clone();
        for conv in &self.stem {
            y = nn::conv_relu(conv, &y)?;
        }
        let mut levels = Vec::with_capacity(self.stages.len());
        for (stage, stride) in self.stages.iter().zip(strides) {
            match stage {
                Stage::Plain(convs) => {
                    for conv in convs {
                        y = nn::conv_relu(conv, &y)?;
                    }
                }
                Stage::Residual(blocks) => {
                    for block in blocks {
                        y = block.forward(&y)?;
                    }
                }
            }
            levels.push(FeatureLevel {
                stride,
                features: y.clone(),
            });
        }
        let pyramid = FeaturePyramid {
            input_size: (h, w),
            levels,
        };
        pyramid.validate()?;
        Ok(pyramid)
    }
}

/// Per-position softmax blend of projected pyramid levels.
pub struct LevelAttention {
    level_widths: Vec<usize>,
    width: usize,
    projections: Vec<Conv2d>,
    logits: Conv2d,
}

impl LevelAttention {
    pub fn new(level_widths: &[usize], width: usize, p: &ParamPath) -> Result<Self> {
        if level_widths.is_empty() || width == 0 {
            return Err(Error::Config("aggregation needs ≥ 1 level and a positive width".into()));
        }
        let projections = level_widths
            .iter()
            .enumerate()
            .map(|(k, &c)| nn::conv1x1(&p.pp(format!("proj{k}")), c, width))
            .collect::<Result<Vec<_>>>()?;
        let logits = nn::conv1x1(&p.pp("logits"), width * level_widths.len(), level_widths.len())?;
        Ok(Self {
            level_widths: level_widths.to_vec(),
            width,
            projections,
            logits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn check(&self, pyr: &FeaturePyramid) -> Result<()> {
        pyr.validate()?;
        if pyr.levels.len() != self.level_widths.len() {
            return Err(Error::PyramidInconsistent(format!(
                "aggregator expects {} levels, pyramid has {}",
                self.level_widths.len(),
                pyr.levels.len()
            )));
        }
        for (k, (level, &c)) in pyr.levels.iter().zip(&self.level_widths).enumerate() {
            let got = level.features.dim(1)?;
            if got != c {
                return Err(Error::PyramidInconsistent(format!(
                    "level {k} has {got} channels, aggregator expects {c}"
                )));
            }
        }
        Ok(())
    }

    /// Projected levels, all resized to the finest level.
    pub fn project(&self, pyr: &FeaturePyramid) -> Result<Vec<Tensor>> {
        self.check(pyr)?;
        let (_, _, h0, w0) = pyr.levels[0].features.dims4()?;
        pyr.levels
            .iter()
            .zip(&self.projections)
            .map(|(level, proj)| nn::resize_bilinear(&proj.forward(&level.features)?, h0, w0))
            .collect()
    }

    pub fn level_logits(&self, projected: &[Tensor]) -> Result<Tensor> {
        Ok(self.logits.forward(&Tensor::cat(projected, 1)?)?)
    }

    /// `Σ_l softmax(logits)_l · projected_l`; returns the blend and the
    /// `(B, L, h, w)` weights.
    pub fn combine(projected: &[Tensor], logits: &Tensor) -> Result<(Tensor, Tensor)> {
        let weights = nn::channel_softmax(logits)?;
        let mut acc: Option<Tensor> = None;
        for (l, feat) in projected.iter().enumerate() {
            let term = feat.broadcast_mul(&weights.narrow(1, l, 1)?)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        let blended = acc.ok_or_else(|| Error::PyramidInconsistent("no levels".into()))?;
        Ok((blended, weights))
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Result<(Tensor, Tensor)> {
        let projected = self.project(pyr)?;
        let logits = self.level_logits(&projected)?;
        Self::combine(&projected, &logits)
    }
}

/// Working-resolution features consumed by the heads and the attention trunk.
#[derive(Clone, Debug)]
pub struct AggregatedFeatures {
    pub atmospheric: Tensor,
    pub shared: Tensor,
    pub working_stride: usize,
    pub input_size: (usize, usize),
    /// Level weights of the atmospheric and shared aggregators.
    pub level_weights: (Tensor, Tensor),
}

/// The two aggregators (atmospheric and shared).
pub struct FeatureAggregation {
    atmospheric: LevelAttention,
    shared: LevelAttention,
}

impl FeatureAggregation {
    pub fn new(level_widths: &[usize], width: usize, p: &ParamPath) -> Result<Self> {
        Ok(Self {
            atmospheric: LevelAttention::new(level_widths, width, &p.pp("atmospheric"))?,
            shared: LevelAttention::new(level_widths, width, &p.pp("shared"))?,
        })
    }

    pub fn width(&self) -> usize {
        self.shared.width()
    }

    pub fn aggregate_features(&self, pyr: &FeaturePyramid) -> Result<AggregatedFeatures> {
        let (atmospheric, atm_w) = self.atmospheric.forward(pyr)?;
        let (shared, shared_w) = self.shared.forward(pyr)?;
        Ok(AggregatedFeatures {
            atmospheric,
            shared,
            working_stride: pyr.levels[0].stride,
            input_size: pyr.input_size,
            level_weights: (atm_w, shared_w),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn store() -> ParamStore {
        ParamStore::new(11, Device::Cpu, DType::F32)
    }

    fn input(h: usize, w: usize) -> Tensor {
        Tensor::rand(0f32, 1f32, (1, 3, h, w), &Device::Cpu).unwrap()
    }

    #[test]
    fn full_layout_strides_and_sizes() {
        let cfg = BackboneConfig::Full {
            stem_width: 8,
            blocks: vec![1, 1, 1, 1],
            widths: vec![16, 32, 64, 128],
            cardinality: 4,
            group_width: 2,
        };
        assert_eq!(cfg.strides(), vec![4, 8, 16, 32]);
        let bb = Backbone::new(&cfg, &store().root()).unwrap();
        let pyr = bb.extract_features(&input(256, 256)).unwrap();
        assert_eq!(pyr.spatial_sizes(), vec![(64, 64), (32, 32), (16, 16), (8, 8)]);
        assert_eq!(pyr.levels[3].features.dim(1).unwrap(), 128);
    }

    #[test]
    fn default_full_is_resnext101() {
        let BackboneConfig::Full { blocks, cardinality, group_width, .. } = BackboneConfig::full() else {
            panic!("full profile");
        };
        assert_eq!(blocks, vec![3, 4, 23, 3]);
        assert_eq!((cardinality, group_width), (32, 4));
    }

    #[test]
    fn tiny_two_level_sizes() {
        let cfg = BackboneConfig::Tiny {
            widths: vec![8, 16],
            first_stride: 2,
        };
        let bb = Backbone::new(&cfg, &store().root()).unwrap();
        let pyr = bb.extract_features(&input(128, 128)).unwrap();
        assert_eq!(pyr.spatial_sizes(), vec![(64, 64), (32, 32)]);
    }

    #[test]
    fn odd_sizes_round_up() {
        let bb = Backbone::new(&BackboneConfig::tiny(), &store().root()).unwrap();
        let pyr = bb.extract_features(&input(30, 21)).unwrap();
        assert_eq!(pyr.spatial_sizes(), vec![(8, 6), (4, 3)]);
    }

    #[test]
    fn too_small_input() {
        let cfg = BackboneConfig::Full {
            stem_width: 4,
            blocks: vec![1, 1, 1, 1],
            widths: vec![8, 8, 8, 8],
            cardinality: 2,
            group_width: 2,
        };
        let bb = Backbone::new(&cfg, &store().root()).unwrap();
        let err = bb.extract_features(&input(8, 8)).unwrap_err();
        assert!(err.to_string().contains("input too small"), "{err}");
    }

    #[test]
    fn rejects_single_level_config() {
        let cfg = BackboneConfig::Tiny {
            widths: vec![8],
            first_stride: 2,
        };
        assert!(Backbone::new(&cfg, &store().root()).is_err());
    }

    #[test]
    fn equal_logits_give_level_mean() {
        let s = store();
        let bb = Backbone::new(&BackboneConfig::tiny(), &s.root().pp("bb")).unwrap();
        let agg = LevelAttention::new(&[16, 32], 8, &s.root().pp("agg")).unwrap();
        let pyr = bb.extract_features(&input(32, 32)).unwrap();
        let projected = agg.project(&pyr).unwrap();
        let logits = Tensor::zeros((1, 2, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let (out, _) = LevelAttention::combine(&projected, &logits).unwrap();
        let mean = ((&projected[0] + &projected[1]).unwrap() / 2.0).unwrap();
        let diff = (out - mean).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-6);
    }

    #[test]
    fn single_level_is_its_projection() {
        let s = store();
        let feats = Tensor::rand(0f32, 1f32, (1, 4, 5, 5), &Device::Cpu).unwrap();
        let pyr = FeaturePyramid {
            input_size: (20, 20),
            levels: vec![FeatureLevel {
                stride: 4,
                features: feats,
            }],
        };
        let agg = LevelAttention::new(&[4], 6, &s.root()).unwrap();
        let projected = agg.project(&pyr).unwrap();
        let (out, w) = agg.forward(&pyr).unwrap();
        assert_eq!(
            out.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            projected[0].flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(w.flatten_all().unwrap().min(0).unwrap().to_scalar::<f32>().unwrap(), 1.0);
    }

    #[test]
    fn level_weights_sum_to_one() {
        let s = store();
        let bb = Backbone::new(&BackboneConfig::tiny(), &s.root().pp("bb")).unwrap();
        let agg = FeatureAggregation::new(&[16, 32], 8, &s.root().pp("agg")).unwrap();
        // Larger weights so the logits are not all ~0.
        for (name, var) in s.vars() {
            if name.contains("logits.weight") {
                let t = Tensor::randn(0f32, 3f32, var.dims(), &Device::Cpu).unwrap();
                var.set(&t).unwrap();
            }
        }
        let feats = agg
            .aggregate_features(&bb.extract_features(&input(48, 40)).unwrap())
            .unwrap();
        assert_eq!(feats.working_stride, 4);
        assert_eq!(feats.shared.dims(), &[1, 8, 12, 10]);
        for w in [&feats.level_weights.0, &feats.level_weights.1] {
            let sums = w.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
        }
    }

    #[test]
    fn mismatched_pyramid() {
        let s = store();
        let agg = LevelAttention::new(&[4, 8], 6, &s.root()).unwrap();
        let pyr = FeaturePyramid {
            input_size: (16, 16),
            levels: vec![
                FeatureLevel {
                    stride: 4,
                    features: Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap(),
                },
                FeatureLevel {
                    stride: 8,
                    features: Tensor::zeros((1, 7, 2, 2), DType::F32, &Device::Cpu).unwrap(),
                },
            ],
        };
        let err = agg.forward(&pyr).unwrap_err();
        assert!(err.to_string().contains("pyramid inconsistent"), "{err}");

        let bad_dims = FeaturePyramid {
            input_size: (16, 16),
            levels: vec![FeatureLevel {
                stride: 4,
                features: Tensor::zeros((1, 4, 3, 4), DType::F32, &Device::Cpu).unwrap(),
            }],
        };
        assert!(matches!(bad_dims.validate(), Err(Error::PyramidInconsistent(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let s = store();
        let bb = Backbone::new(&BackboneConfig::tiny(), &s.root()).unwrap();
        let x = input(32, 32);
        let a = bb.extract_features(&x).unwrap().levels[1].features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = bb.extract_features(&x).unwrap().levels[1].features.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
