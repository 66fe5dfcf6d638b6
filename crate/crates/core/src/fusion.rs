//! Per-pixel attention over the active components and their convex fusion.

use candle_core::{Module, Tensor};
use candle_nn::Conv2d;

use crate::backbone::AggregatedFeatures;
use crate::domain::ComponentKind;
use crate::error::{Error, Result};
use crate::heads::ComponentOutput;
use crate::nn::{self, ParamPath};

/// `(B, N, H, W)` weights, softmax-normalized over `N`.
#[derive(Clone, Debug)]
pub struct AttentionMaps {
    pub kinds: Vec<ComponentKind>,
    pub weights: Tensor,
}

impl AttentionMaps {
    pub fn from_logits(kinds: &[ComponentKind], logits: &Tensor) -> Result<Self> {
        let n = logits.dim(1)?;
        if n != kinds.len() {
            return Err(Error::FusionArity(format!(
                "{n} logit channels for {} components",
                kinds.len()
            )));
        }
        Ok(Self {
            kinds: kinds.to_vec(),
            weights: nn::channel_softmax(logits)?,
        })
    }

    pub fn arity(&self) -> usize {
        self.kinds.len()
    }

    /// Weight map of component `k`, `(B, 1, H, W)`.
    pub fn weight(&self, k: usize) -> Result<Tensor> {
        Ok(self.weights.narrow(1, k, 1)?)
    }
}

/// 1×1 → 3×3 → 3×3 → 1×1 (N channels) → softmax.
pub struct AttentionTrunk {
    kinds: Vec<ComponentKind>,
    reduce: Conv2d,
    conv_a: Conv2d,
    conv_b: Conv2d,
    out: Conv2d,
}

impl AttentionTrunk {
    /// Input is the channel concatenation of the atmospheric and shared
    /// features, `2 * feature_width` channels.
    pub fn new(kinds: &[ComponentKind], p: &ParamPath, feature_width: usize, hidden: usize) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("attention needs at least one component".into()));
        }
        Ok(Self {
            kinds: kinds.to_vec(),
            reduce: nn::conv1x1(&p.pp("reduce"), 2 * feature_width, hidden)?,
            conv_a: nn::conv3x3(&p.pp("conv_a"), hidden, hidden, 1)?,
            conv_b: nn::conv3x3(&p.pp("conv_b"), hidden, hidden, 1)?,
            out: nn::conv1x1(&p.pp("out"), hidden, kinds.len())?,
        })
    }

    pub fn arity(&self) -> usize {
        self.kinds.len()
    }

    /// Pre-softmax logits at input resolution.
    pub fn logits(&self, feats: &AggregatedFeatures) -> Result<Tensor> {
        let x = Tensor::cat(&[&feats.atmospheric, &feats.shared], 1)?;
        let y = nn::conv_relu(&self.reduce, &x)?;
        let y = nn::conv_relu(&self.conv_a, &y)?;
        let y = nn::conv_relu(&self.conv_b, &y)?;
        let (h, w) = feats.input_size;
        nn::resize_bilinear(&self.out.forward(&y)?, h, w)
    }

    pub fn compute_attention(&self, feats: &AggregatedFeatures) -> Result<AttentionMaps> {
        AttentionMaps::from_logits(&self.kinds, &self.logits(feats)?)
    }
}

/// `J_f = Σ_k W_k ⊙ J_k`, broadcast over the colour channels.
pub fn fuse_predictions(predictions: &[&Tensor], attention: &AttentionMaps) -> Result<Tensor> {
    if predictions.len() != attention.arity() || predictions.is_empty() {
        return Err(Error::FusionArity(format!(
            "{} components for {} weight maps",
            predictions.len(),
            attention.arity()
        )));
    }
    let (b, _, h, w) = attention.weights.dims4()?;
    let mut acc: Option<Tensor> = None;
    for (k, pred) in predictions.iter().enumerate() {
        let (pb, pc, ph, pw) = pred.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::FusionArity(format!(
                "component {k} is {pb}x{pc}x{ph}x{pw}, weights are {b}x{h}x{w}"
            )));
        }
        let term = pred.broadcast_mul(&attention.weight(k)?)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok(acc.expect("non-empty"))
}

/// Fuses head outputs, checking that their kinds line up with the maps.
pub fn fuse(outputs: &[ComponentOutput], attention: &AttentionMaps) -> Result<Tensor> {
    if outputs.len() == attention.arity() {
        if let Some((k, o)) = outputs
            .iter()
            .enumerate()
            .find(|(k, o)| o.kind != attention.kinds[*k])
        {
            return Err(Error::FusionArity(format!(
                "component {k} is {}, weight map is for {}",
                o.kind, attention.kinds[k]
            )));
        }
    }
    let preds: Vec<&Tensor> = outputs.iter().map(|o| &o.prediction).collect();
    fuse_predictions(&preds, attention)
}
