//! The six elementary-function dehazing components.
//!
//! Each head turns the hazy input `I` and a learned driving map into a
//! candidate dehazed image:
//!
//! | kind | prediction                      |
//! |------|---------------------------------|
//! | AS   | `I - A·(1 - T)`                 |
//! | MUL  | `I · R`                         |
//! | ADD  | `I + R`                         |
//! | EXP  | `clamp(I, ε, 1) ^ R`            |
//! | LOG  | `ln(1 + max(I·R, δ - 1))`       |
//! | SIN  | `sin(I + R)`                    |
//!
//! Predictions are left unclamped; only the fused output is clamped.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Linear};

use crate::backbone::AggregatedFeatures;
use crate::domain::ComponentKind;
use crate::error::{Error, Result};
use crate::nn::{self, ParamPath};

/// Lower clamp applied to the base of the exponential head.
pub const EXP_BASE_FLOOR: f64 = 1e-4;
/// Floor on the argument of the logarithm.
pub const LOG_ARG_FLOOR: f64 = 1e-6;
/// Transmission maps are rescaled into `(T_MIN, 1]`.
pub const T_MIN: f64 = 0.05;

/// The per-head driving maps. Shapes: `R` is `(B, 3, H, W)`; `A` is
/// `(B, 3, 1, 1)`; `T` is `(B, 1, H, W)`.
#[derive(Clone, Debug)]
pub enum Drive {
    Residual(Tensor),
    Atmospheric { light: Tensor, transmission: Tensor },
}

#[derive(Clone, Debug)]
pub struct ComponentOutput {
    pub kind: ComponentKind,
    /// `(B, 3, H, W)`, not range-restricted.
    pub prediction: Tensor,
    pub aux: Drive,
}

pub fn atmospheric(input: &Tensor, light: &Tensor, transmission: &Tensor, divide_by_t: bool) -> Result<Tensor> {
    let haze = light.broadcast_mul(&transmission.affine(-1.0, 1.0)?)?;
    let j = input.broadcast_sub(&haze)?;
    if divide_by_t {
        Ok(j.broadcast_div(transmission)?)
    } else {
        Ok(j)
    }
}

pub fn multiplicative(input: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(input.mul(r)?)
}

pub fn additive(input: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(input.add(r)?)
}

pub fn exponential(input: &Tensor, r: &Tensor) -> Result<Tensor> {
    let base = input.clamp(EXP_BASE_FLOOR, 1.0)?;
    Ok(r.mul(&base.log()?)?.exp()?)
}

pub fn logarithmic(input: &Tensor, r: &Tensor) -> Result<Tensor> {
    let product = input.mul(r)?.maximum(LOG_ARG_FLOOR - 1.0)?;
    Ok((product + 1.0)?.log()?)
}

pub fn sine(input: &Tensor, r: &Tensor) -> Result<Tensor> {
    Ok(input.add(r)?.sin()?)
}

/// Evaluates a component's formula on an explicit drive. This is also the
/// test hook used to bypass the learned layers.
pub fn apply(kind: ComponentKind, input: &Tensor, drive: &Drive, divide_by_t: bool) -> Result<Tensor> {
    match (kind, drive) {
        (ComponentKind::As, Drive::Atmospheric { light, transmission }) => {
            atmospheric(input, light, transmission, divide_by_t)
        }
        (ComponentKind::Mul, Drive::Residual(r)) => multiplicative(input, r),
        (ComponentKind::Add, Drive::Residual(r)) => additive(input, r),
        (ComponentKind::Exp, Drive::Residual(r)) => exponential(input, r),
        (ComponentKind::Log, Drive::Residual(r)) => logarithmic(input, r),
        (ComponentKind::Sin, Drive::Residual(r)) => sine(input, r),
        (kind, _) => Err(Error::Config(format!("drive does not match head {kind}"))),
    }
}

/// conv3×3 → ReLU → conv3×3 (3 channels), resized to input resolution.
struct ResidualMapNet {
    hidden: Conv2d,
    out: Conv2d,
}

impl ResidualMapNet {
    fn new(p: &ParamPath, in_ch: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            hidden: nn::conv3x3(&p.pp("hidden"), in_ch, hidden, 1)?,
            out: nn::conv3x3(&p.pp("out"), hidden, 3, 1)?,
        })
    }

    fn forward(&self, shared: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
        let y = nn::conv_relu(&self.hidden, shared)?;
        nn::resize_bilinear(&self.out.forward(&y)?, h, w)
    }
}

/// Global light from pooled features; per-pixel transmission map.
struct AtmosphericNet {
    light_hidden: Linear,
    light_out: Linear,
    t_hidden: Conv2d,
    t_out: Conv2d,
}

impl AtmosphericNet {
    fn new(p: &ParamPath, in_ch: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            light_hidden: nn::linear(&p.pp("light.hidden"), in_ch, hidden)?,
            light_out: nn::linear(&p.pp("light.out"), hidden, 3)?,
            t_hidden: nn::conv3x3(&p.pp("transmission.hidden"), in_ch, hidden, 1)?,
            t_out: nn::conv3x3(&p.pp("transmission.out"), hidden, 1, 1)?,
        })
    }

    fn forward(&self, feats: &Tensor, (h, w): (usize, usize)) -> Result<Drive> {
        let pooled = nn::global_avg_pool(feats)?;
        let light = self.light_out.forward(&self.light_hidden.forward(&pooled)?.relu()?)?;
        let light = nn::sigmoid(&light)?.unsqueeze(2)?.unsqueeze(3)?;

        let t = self.t_out.forward(&nn::conv_relu(&self.t_hidden, feats)?)?;
        let t = nn::resize_bilinear(&t, h, w)?;
        let transmission = nn::sigmoid(&t)?.affine(1.0 - T_MIN, T_MIN)?;
        Ok(Drive::Atmospheric { light, transmission })
    }
}

enum HeadNet {
    Residual(ResidualMapNet),
    Atmospheric(AtmosphericNet),
}

pub struct Head {
    kind: ComponentKind,
    net: HeadNet,
    divide_by_t: bool,
}

impl Head {
    pub fn new(kind: ComponentKind, p: &ParamPath, feature_width: usize, hidden: usize, divide_by_t: bool) -> Result<Self> {
        let p = p.pp(kind.name().to_ascii_lowercase());
        let net = match kind {
            ComponentKind::As => HeadNet::Atmospheric(AtmosphericNet::new(&p, feature_width, hidden)?),
            _ => HeadNet::Residual(ResidualMapNet::new(&p, feature_width, hidden)?),
        };
        Ok(Self {
            kind,
            net,
            divide_by_t,
        })
    }

    pub fn kind(&self) -> ComponentKind {
        self.kind
    }

    /// Learned driving maps at input resolution.
    pub fn drive(&self, feats: &AggregatedFeatures) -> Result<Drive> {
        match &self.net {
            HeadNet::Residual(net) => Ok(Drive::Residual(net.forward(&feats.shared, feats.input_size)?)),
            HeadNet::Atmospheric(net) => {
                let drive = net.forward(&feats.atmospheric, feats.input_size)?;
                if let Drive::Atmospheric { transmission, .. } = &drive {
                    check_transmission(transmission)?;
                }
                Ok(drive)
            }
        }
    }

    /// `injected` replaces the learned drive when present.
    pub fn forward(&self, input: &Tensor, feats: &AggregatedFeatures, injected: Option<&Drive>) -> Result<ComponentOutput> {
        let drive = match injected {
            Some(d) => d.clone(),
            None => self.drive(feats)?,
        };
        let prediction = apply(self.kind, input, &drive, self.divide_by_t)?;
        Ok(ComponentOutput {
            kind: self.kind,
            prediction,
            aux: drive,
        })
    }
}

fn check_transmission(t: &Tensor) -> Result<()> {
    let flat = t.flatten_all()?.to_dtype(candle_core::DType::F64)?;
    let lo = flat.min(0)?.to_scalar::<f64>()?;
    let hi = flat.max(0)?.to_scalar::<f64>()?;
    if !(lo > 0.0 && hi <= 1.0) {
        return Err(Error::Invariant(format!("transmission range [{lo}, {hi}] outside (0, 1]")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn scalar_map(v: f64) -> Tensor {
        Tensor::full(v, (1, 3, 2, 2), &Device::Cpu).unwrap()
    }

    fn values(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn close(t: &Tensor, expected: f64) {
        for v in values(t) {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    fn as_drive(a: f64, t: f64) -> (Tensor, Tensor) {
        (
            Tensor::full(a, (1, 3, 1, 1), &Device::Cpu).unwrap(),
            Tensor::full(t, (1, 1, 2, 2), &Device::Cpu).unwrap(),
        )
    }

    #[test]
    fn atmospheric_examples() {
        let (a, t) = as_drive(1.0, 0.5);
        close(&atmospheric(&scalar_map(0.9), &a, &t, false).unwrap(), 0.4);
        let (a, t) = as_drive(0.8, 0.25);
        close(&atmospheric(&scalar_map(0.5), &a, &t, false).unwrap(), -0.1);
        let (a, t) = as_drive(0.7, 1.0);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(values(&atmospheric(&i, &a, &t, false).unwrap()), values(&i));
        // Standard inversion when dividing by T.
        let (a, t) = as_drive(1.0, 0.5);
        close(&atmospheric(&scalar_map(0.9), &a, &t, true).unwrap(), 0.8);
    }

    #[test]
    fn multiplicative_examples() {
        let i = Tensor::rand(0f64, 1f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(values(&multiplicative(&i, &scalar_map(1.0)).unwrap()), values(&i));
        close(&multiplicative(&scalar_map(0.5), &scalar_map(2.0)).unwrap(), 1.0);
        close(&multiplicative(&scalar_map(0.0), &scalar_map(-7.0)).unwrap(), 0.0);
    }

    #[test]
    fn additive_examples() {
        close(&additive(&scalar_map(0.3), &scalar_map(0.0)).unwrap(), 0.3);
        close(&additive(&scalar_map(0.3), &scalar_map(-0.1)).unwrap(), 0.3 - 0.1);
        close(&additive(&scalar_map(0.3), &scalar_map(0.9)).unwrap(), 0.3 + 0.9);
    }

    #[test]
    fn exponential_examples() {
        close(&exponential(&scalar_map(0.37), &scalar_map(1.0)).unwrap(), 0.37);
        close(&exponential(&scalar_map(0.25), &scalar_map(0.5)).unwrap(), 0.5);
        for v in values(&exponential(&scalar_map(0.0), &scalar_map(2.0)).unwrap()) {
            assert!((v - 1e-8).abs() < 1e-18, "{v}");
        }
        // No singularity for a negative exponent at I = 0.
        assert!(values(&exponential(&scalar_map(0.0), &scalar_map(-1.0)).unwrap())
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn logarithmic_examples() {
        close(&logarithmic(&scalar_map(0.6), &scalar_map(0.0)).unwrap(), 0.0);
        close(&logarithmic(&scalar_map(1.0), &scalar_map(std::f64::consts::E - 1.0)).unwrap(), 1.0);
        close(&logarithmic(&scalar_map(0.5), &scalar_map(2.0)).unwrap(), std::f64::consts::LN_2);
        // (δ - 1) + 1 rounds away from δ in the last bits.
        let guarded = logarithmic(&scalar_map(1.0), &scalar_map(-5.0)).unwrap();
        for v in values(&guarded) {
            assert!((v - LOG_ARG_FLOOR.ln()).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn sine_examples() {
        close(&sine(&scalar_map(0.0), &scalar_map(0.0)).unwrap(), 0.0);
        close(&sine(&scalar_map(0.5), &scalar_map(std::f64::consts::FRAC_PI_2 - 0.5)).unwrap(), 1.0);
        let i = Tensor::rand(0f64, 1f64, (1, 3, 2, 2), &Device::Cpu).unwrap();
        let neg = i.neg().unwrap();
        for v in values(&sine(&i, &neg).unwrap()) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn drive_kind_mismatch() {
        let i = scalar_map(0.5);
        let (a, t) = as_drive(1.0, 1.0);
        let atm = Drive::Atmospheric { light: a, transmission: t };
        assert!(apply(ComponentKind::Mul, &i, &atm, false).is_err());
        assert!(apply(ComponentKind::As, &i, &Drive::Residual(scalar_map(1.0)), false).is_err());
    }

    #[test]
    fn learned_transmission_is_bounded() {
        use crate::backbone::{Backbone, BackboneConfig, FeatureAggregation};
        use crate::nn::ParamStore;
        let store = ParamStore::new(5, Device::Cpu, DType::F32);
        let bb = Backbone::new(&BackboneConfig::tiny(), &store.root().pp("bb")).unwrap();
        let agg = FeatureAggregation::new(&[16, 32], 8, &store.root().pp("agg")).unwrap();
        let head = Head::new(ComponentKind::As, &store.root().pp("heads"), 8, 8, false).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 24, 20), &Device::Cpu).unwrap();
        let feats = agg.aggregate_features(&bb.extract_features(&x).unwrap()).unwrap();
        let out = head.forward(&x, &feats, None).unwrap();
        assert_eq!(out.prediction.dims(), &[2, 3, 24, 20]);
        let Drive::Atmospheric { light, transmission } = out.aux else {
            panic!("AS head yields an atmospheric drive");
        };
        assert_eq!(light.dims(), &[2, 3, 1, 1]);
        let t = transmission.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(t.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}
