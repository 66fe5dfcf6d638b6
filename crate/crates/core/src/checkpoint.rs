//! Versioned checkpoint files.
//!
//! A checkpoint is a safetensors archive holding every parameter under its
//! module path plus a `__probe__` tensor: the model's output on a fixed probe
//! image at save time. The header metadata carries the format tag, version,
//! variant, model config, iteration, RNG state, an optional training-config
//! snapshot and a SHA-256 over all tensor bytes. Loading rebuilds the model,
//! verifies the checksum and re-runs the probe.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::{SafeTensors, View};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Image, VariantSpec};
use crate::error::{Error, Result};
use crate::variants::{Dehazer, ModelConfig};

pub const FORMAT: &str = "cl2s-checkpoint";
pub const VERSION: u32 = 1;
const PROBE_KEY: &str = "__probe__";
/// Maximum deviation tolerated between the stored and recomputed probe.
pub const PROBE_TOLERANCE: f64 = 1e-6;

/// Fixed probe input; large enough for the full backbone's stride 32.
pub fn probe_image() -> Image {
    Image::from_fn(32, 32, |y, x, c| {
        let v = 0.5 + 0.35 * ((y as f64 * 0.37 + x as f64 * 0.21 + c as f64).sin());
        (v * 255.0).round() / 255.0
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte ChaCha seed.
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return Err(Error::CheckpointParse("rng seed must be 32 hex bytes".into()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::CheckpointParse(format!("rng seed: {e}")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub variant: VariantSpec,
    pub model: ModelConfig,
    pub init_seed: u64,
    pub dtype: String,
    pub iteration: usize,
    pub rng: Option<RngState>,
    pub train: Option<serde_json::Value>,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Config(format!("unsupported parameter dtype {other:?}"))),
    }
}

fn parse_dtype(name: &str) -> Result<DType> {
    match name {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(Error::CheckpointParse(format!("unsupported dtype `{other}`"))),
    }
}

fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in tensors {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn probe_output(model: &Dehazer) -> Result<Tensor> {
    let x = probe_image().to_tensor(model.device(), model.dtype())?;
    Ok(model.forward_batch(&x)?.fused)
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint(
    model: &Dehazer,
    path: &Path,
    iteration: usize,
    rng: Option<&ChaCha8Rng>,
    train: Option<serde_json::Value>,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model
        .params()
        .vars()
        .into_iter()
        .map(|(name, var)| (name, var.as_tensor().clone()))
        .collect();
    tensors.push((PROBE_KEY.to_string(), probe_output(model)?));

    let views: Vec<(String, std::borrow::Cow<'_, [u8]>)> =
        tensors.iter().map(|(n, t)| (n.clone(), View::data(t))).collect();
    let digest = checksum(views.iter().map(|(n, b)| (n.as_str(), b.as_ref())));

    let meta = CheckpointMeta {
        version: VERSION,
        variant: model.spec().clone(),
        model: model.config().clone(),
        init_seed: model.seed(),
        dtype: dtype_name(model.dtype())?.to_string(),
        iteration,
        rng: rng.map(RngState::capture),
        train,
    };
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert("version".to_string(), VERSION.to_string());
    header.insert("meta".to_string(), serde_json::to_string(&meta)?);
    header.insert("checksum".to_string(), digest);

    let bytes = safetensors::serialize(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(header))
        .map_err(|e| Error::CheckpointParse(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::output(dir, e))?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::output(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::output(path, e))?;
    Ok(())
}

/// Parsed and verified checkpoint contents.
struct Parsed {
    meta: CheckpointMeta,
    params: Vec<(String, Tensor)>,
    probe: Tensor,
}

fn parse(bytes: &[u8], device: &Device) -> Result<Parsed> {
    let bad = |m: String| Error::CheckpointParse(m);
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
    let info = header
        .metadata()
        .as_ref()
        .ok_or_else(|| bad("missing header metadata".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(bad("not a cl2s checkpoint".into()));
    }
    let version: u32 = info
        .get("version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version".into()))?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let meta: CheckpointMeta =
        serde_json::from_str(info.get("meta").ok_or_else(|| bad("missing meta".into()))?)
            .map_err(|e| bad(format!("meta: {e}")))?;

    let mut names: Vec<String> = st.names().into_iter().map(String::from).collect();
    names.sort();
    let mut entries = Vec::with_capacity(names.len());
    for name in &names {
        let view = st.tensor(name).map_err(|e| bad(e.to_string()))?;
        entries.push((name.clone(), view));
    }
    // Same order as at save time: parameters by path, probe last.
    let ordered = entries
        .iter()
        .filter(|(n, _)| n.as_str() != PROBE_KEY)
        .chain(entries.iter().filter(|(n, _)| n.as_str() == PROBE_KEY));
    let digest = checksum(ordered.map(|(n, v)| (n.as_str(), v.data())));
    if info.get("checksum") != Some(&digest) {
        return Err(bad("checksum mismatch".into()));
    }

    let mut params = Vec::new();
    let mut probe = None;
    for (name, view) in &entries {
        let t = view.load(device)?;
        if name.as_str() == PROBE_KEY {
            probe = Some(t);
        } else {
            params.push((name.clone(), t));
        }
    }
    let probe = probe.ok_or_else(|| bad("missing probe tensor".into()))?;
    Ok(Parsed { meta, params, probe })
}

fn install(model: &Dehazer, parsed: &Parsed) -> Result<()> {
    let expected = model.params().len();
    if parsed.params.len() != expected {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint has {} parameters, model has {expected}",
            parsed.params.len()
        )));
    }
    for (name, t) in &parsed.params {
        model.params().assign(name, t)?;
    }
    let probe = probe_output(model)?;
    let diff = (probe.to_dtype(DType::F64)? - parsed.probe.to_dtype(DType::F64)?)?
        .abs()?
        .max_all()?
        .to_scalar::<f64>()?;
    if !(diff <= PROBE_TOLERANCE) {
        return Err(Error::CheckpointParse(format!(
            "probe output differs from the recorded one by {diff}"
        )));
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Dehazer,
    pub meta: CheckpointMeta,
}

/// Rebuilds the stored model.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path)?;
    let parsed = parse(&bytes, &Device::Cpu)?;
    let meta = parsed.meta.clone();
    let model = Dehazer::new(&meta.variant, &meta.model, meta.init_seed, &Device::Cpu, parse_dtype(&meta.dtype)?)?;
    install(&model, &parsed)?;
    Ok(LoadedCheckpoint { model, meta })
}

/// Loads weights into an existing assembly. Fails without touching the
/// model when the variant or configuration differs.
pub fn load_into(model: &Dehazer, path: &Path) -> Result<CheckpointMeta> {
    let bytes = fs::read(path)?;
    let parsed = parse(&bytes, model.device())?;
    if parsed.meta.variant.kinds() != model.spec().kinds() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint is {} ({}), model is {} ({})",
            parsed.meta.variant.name(),
            kinds_list(&parsed.meta.variant),
            model.spec().name(),
            kinds_list(model.spec())
        )));
    }
    if &parsed.meta.model != model.config() {
        return Err(Error::IncompatibleCheckpoint("model configuration differs".into()));
    }
    install(model, &parsed)?;
    Ok(parsed.meta)
}

fn kinds_list(spec: &VariantSpec) -> String {
    spec.kinds().iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..17 {
            rng.next_u32();
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        assert_eq!(rng.next_u64(), restored.next_u64());
    }

    #[test]
    fn probe_is_in_range() {
        let p = probe_image();
        assert!(p.validate().is_ok());
        assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
