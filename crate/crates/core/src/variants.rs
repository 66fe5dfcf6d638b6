//! Named variants and end-to-end model assembly.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::{AggregatedFeatures, Backbone, BackboneConfig, FeatureAggregation};
use crate::domain::{ComponentKind, Image, VariantSpec};
use crate::error::{Error, Result};
use crate::fusion::{self, AttentionMaps, AttentionTrunk};
use crate::heads::{ComponentOutput, Head};
use crate::nn::ParamStore;

use ComponentKind::*;

/// The ablation rows, in table order.
pub const PRESETS: [&str; 8] = ["FD-AS", "FD-J1", "FD-J2", "FD-J3", "CL2S", "DM2F", "FD-J1,4", "FDNet"];

fn removed_from_full(name: &str) -> Option<(&'static str, &'static [ComponentKind])> {
    let canonical: String = name
        .trim()
        .chars()
        .map(|c| if c == '\u{2212}' || c == '\u{2013}' { '-' } else { c })
        .filter(|c| !c.is_whitespace())
        .collect::<String>()
        .to_ascii_uppercase();
    let row: (&'static str, &'static [ComponentKind]) = match canonical.as_str() {
        "FDNET" => ("FDNet", &[]),
        "FD-AS" => ("FD-AS", &[As]),
        "FD-J1" => ("FD-J1", &[Mul]),
        "FD-J2" => ("FD-J2", &[Add]),
        "FD-J3" => ("FD-J3", &[Exp]),
        "CL2S" | "FD-J4" => ("CL2S", &[Log]),
        "DM2F" | "FD-J5" => ("DM2F", &[Sin]),
        "FD-J1,4" | "FD-J14" => ("FD-J1,4", &[Mul, Log]),
        _ => return None,
    };
    Some(row)
}

impl VariantSpec {
    /// Resolves a preset name (case-insensitive; `FD-J4` and `FD-J5` are
    /// accepted for CL2S and DM2F).
    pub fn preset(name: &str) -> Result<Self> {
        let (canonical, removed) =
            removed_from_full(name).ok_or_else(|| Error::UnknownVariant(name.trim().to_string()))?;
        let kinds: Vec<ComponentKind> = ComponentKind::ALL
            .into_iter()
            .filter(|k| !removed.contains(k))
            .collect();
        VariantSpec::new(canonical, &kinds)
    }

    pub fn presets() -> Vec<VariantSpec> {
        PRESETS
            .iter()
            .map(|n| VariantSpec::preset(n).expect("preset table is valid"))
            .collect()
    }
}

/// Resolves `--variant` / `--heads`: an explicit head list wins.
pub fn resolve_variant(variant: Option<&str>, heads: Option<&str>) -> Result<VariantSpec> {
    match (heads, variant) {
        (Some(h), _) => VariantSpec::from_heads(h),
        (None, Some(v)) => VariantSpec::preset(v),
        (None, None) => VariantSpec::preset("CL2S"),
    }
}

/// Layer widths around the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Common width of the aggregated features.
    pub feature_width: usize,
    /// Hidden width of each head's driving-map layers.
    pub head_width: usize,
    /// Hidden width of the attention trunk.
    pub attention_width: usize,
    /// Use `(I - A(1 - T)) / T` for the AS head instead of `I - A(1 - T)`.
    #[serde(default)]
    pub divide_by_t: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            feature_width: 32,
            head_width: 16,
            attention_width: 32,
            divide_by_t: false,
        }
    }

    pub fn full() -> Self {
        Self {
            backbone: BackboneConfig::full(),
            feature_width: 128,
            head_width: 64,
            attention_width: 128,
            divide_by_t: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.feature_width == 0 || self.head_width == 0 || self.attention_width == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

/// Raw tensors of one forward pass over a batch.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    /// Unclamped `(B, 3, H, W)` fusion.
    pub fused: Tensor,
    pub attention: AttentionMaps,
    pub components: Vec<ComponentOutput>,
}

/// Single-image inference result.
#[derive(Clone, Debug)]
pub struct DehazeOutput {
    /// Fused prediction clamped to `[0, 1]`.
    pub image: Image,
    pub attention: AttentionMaps,
    pub components: Vec<ComponentOutput>,
}

impl DehazeOutput {
    /// Weight map of component `k` as a 1-channel image.
    pub fn attention_image(&self, k: usize) -> Result<Image> {
        Image::from_tensor(&self.attention.weight(k)?)
    }
}

/// Backbone, aggregation, active heads and attention trunk sharing one
/// parameter store.
pub struct Dehazer {
    spec: VariantSpec,
    config: ModelConfig,
    seed: u64,
    params: ParamStore,
    backbone: Backbone,
    aggregation: FeatureAggregation,
    heads: Vec<Head>,
    attention: AttentionTrunk,
}

impl Dehazer {
    pub fn new(spec: &VariantSpec, config: &ModelConfig, seed: u64, device: &Device, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::new(seed, device.clone(), dtype);
        let root = params.root();
        let backbone = Backbone::new(&config.backbone, &root.pp("backbone"))?;
        let aggregation = FeatureAggregation::new(config.backbone.widths(), config.feature_width, &root.pp("aggregation"))?;
        let heads = spec
            .kinds()
            .iter()
            .map(|&k| Head::new(k, &root.pp("heads"), config.feature_width, config.head_width, config.divide_by_t))
            .collect::<Result<Vec<_>>>()?;
        let attention = AttentionTrunk::new(spec.kinds(), &root.pp("attention"), config.feature_width, config.attention_width)?;
        Ok(Self {
            spec: spec.clone(),
            config: config.clone(),
            seed,
            params,
            backbone,
            aggregation,
            heads,
            attention,
        })
    }

    pub fn build_variant(spec: &VariantSpec) -> Result<Self> {
        Self::on_cpu(spec, &ModelConfig::default(), 0)
    }

    /// `f32` model on the CPU.
    pub fn on_cpu(spec: &VariantSpec, config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(spec, config, seed, &Device::Cpu, DType::F32)
    }

    pub fn spec(&self) -> &VariantSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn head_kinds(&self) -> Vec<ComponentKind> {
        self.heads.iter().map(|h| h.kind()).collect()
    }

    pub fn attention_arity(&self) -> usize {
        self.attention.arity()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn features(&self, x: &Tensor) -> Result<AggregatedFeatures> {
        let pyramid = self.backbone.extract_features(x)?;
        self.aggregation.aggregate_features(&pyramid)
    }

    /// Full pipeline on a `(B, 3, H, W)` batch.
    pub fn forward_batch(&self, x: &Tensor) -> Result<ForwardPass> {
        let feats = self.features(x)?;
        let components = self
            .heads
            .iter()
            .map(|h| h.forward(x, &feats, None))
            .collect::<Result<Vec<_>>>()?;
        let attention = self.attention.compute_attention(&feats)?;
        let fused = fusion::fuse(&components, &attention)?;
        Ok(ForwardPass {
            fused,
            attention,
            components,
        })
    }

    /// Dehazes one image; the fused output is clamped to `[0, 1]`.
    pub fn dehaze(&self, img: &Image) -> Result<DehazeOutput> {
        let x = img.to_tensor(self.device(), self.dtype())?;
        let pass = self.forward_batch(&x)?;
        let image = Image::from_tensor(&pass.fused)?.clamp_unit()?;
        Ok(DehazeOutput {
            image,
            attention: pass.attention,
            components: pass.components,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(name: &str) -> Vec<ComponentKind> {
        VariantSpec::preset(name).unwrap().kinds().to_vec()
    }

    fn without(remove: &[ComponentKind]) -> Vec<ComponentKind> {
        ComponentKind::ALL.into_iter().filter(|k| !remove.contains(k)).collect()
    }

    #[test]
    fn preset_table() {
        assert_eq!(kinds("CL2S"), vec![As, Mul, Add, Exp, Sin]);
        assert_eq!(kinds("DM2F"), vec![As, Mul, Add, Exp, Log]);
        assert_eq!(kinds("FDNet"), ComponentKind::ALL.to_vec());
        assert_eq!(kinds("FD-AS"), without(&[As]));
        assert_eq!(kinds("FD-J1"), without(&[Mul]));
        assert_eq!(kinds("FD-J2"), without(&[Add]));
        assert_eq!(kinds("FD-J3"), without(&[Exp]));
        assert_eq!(kinds("FD-J1,4"), without(&[Mul, Log]));
        assert_eq!(kinds("fd-j4"), kinds("CL2S"));
        assert_eq!(kinds("FD\u{2212}J5"), kinds("DM2F"));
        assert_eq!(VariantSpec::preset("fd-j5").unwrap().name(), "DM2F");
    }

    #[test]
    fn unknown_and_empty() {
        let err = VariantSpec::preset("NOPE").unwrap_err();
        assert!(err.to_string().contains("unknown variant"), "{err}");
        assert!(matches!(VariantSpec::new("x", &[]), Err(Error::EmptyVariant)));
    }

    #[test]
    fn resolve_prefers_heads() {
        let v = resolve_variant(Some("DM2F"), Some("ADD")).unwrap();
        assert_eq!(v.kinds(), &[Add]);
        assert_eq!(resolve_variant(None, None).unwrap().name(), "CL2S");
    }

    #[test]
    fn assembly_arity_and_order() {
        for spec in VariantSpec::presets() {
            let m = Dehazer::build_variant(&spec).unwrap();
            assert_eq!(m.head_kinds(), spec.kinds());
            assert_eq!(m.attention_arity(), spec.arity());
        }
    }

    #[test]
    fn removing_a_head_shrinks_the_model() {
        let full = Dehazer::build_variant(&VariantSpec::preset("FDNet").unwrap()).unwrap();
        for name in ["FD-AS", "FD-J1", "FD-J2", "FD-J3", "CL2S", "DM2F"] {
            let smaller = Dehazer::build_variant(&VariantSpec::preset(name).unwrap()).unwrap();
            assert!(smaller.parameter_count() < full.parameter_count(), "{name}");
        }
        let j14 = Dehazer::build_variant(&VariantSpec::preset("FD-J1,4").unwrap()).unwrap();
        let cl2s = Dehazer::build_variant(&VariantSpec::preset("CL2S").unwrap()).unwrap();
        assert!(j14.parameter_count() < cl2s.parameter_count());
    }

    #[test]
    fn forward_shapes_and_diagnostics() {
        let m = Dehazer::build_variant(&VariantSpec::preset("CL2S").unwrap()).unwrap();
        let img = Image::from_fn(36, 44, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
        let out = m.dehaze(&img).unwrap();
        assert_eq!(out.image.dims(), (36, 44));
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let kinds: Vec<_> = out.components.iter().map(|c| c.kind).collect();
        assert_eq!(kinds, vec![As, Mul, Add, Exp, Sin]);
        assert_eq!(out.attention.weights.dims(), &[1, 5, 36, 44]);
        assert_eq!(out.attention_image(2).unwrap().channels(), 1);
    }

    #[test]
    fn single_head_variant_is_that_head() {
        let spec = VariantSpec::from_heads("ADD").unwrap();
        let m = Dehazer::new(&spec, &ModelConfig::tiny(), 3, &Device::Cpu, DType::F64).unwrap();
        let img = Image::from_fn(16, 16, |y, x, c| ((y * 3 + x + c) % 11) as f64 / 11.0);
        let x = img.to_tensor(&Device::Cpu, DType::F64).unwrap();
        let pass = m.forward_batch(&x).unwrap();
        let diff = (&pass.fused - &pass.components[0].prediction)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn same_seed_same_model() {
        let spec = VariantSpec::preset("DM2F").unwrap();
        let a = Dehazer::new(&spec, &ModelConfig::tiny(), 9, &Device::Cpu, DType::F32).unwrap();
        let b = Dehazer::new(&spec, &ModelConfig::tiny(), 9, &Device::Cpu, DType::F32).unwrap();
        let img = Image::from_fn(16, 16, |y, x, c| ((y * 5 + x * 3 + c) % 13) as f64 / 13.0);
        assert_eq!(a.dehaze(&img).unwrap().image, b.dehaze(&img).unwrap().image);
    }
}
