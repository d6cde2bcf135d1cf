use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use labelrefine::seeding::derive_seed;
use labelrefine::{MineConfig, NoiseConfig, PostprocConfig, RefineConfig, SynthStyle};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub side: usize,
    pub style: SynthStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            side: 64,
            style: SynthStyle::default(),
        }
    }
}

/// Whole-image inference settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Tile side; `null` uses the largest generator-compatible square.
    pub tile: Option<usize>,
    pub overlap: usize,
    /// Refinement rounds; `null` uses `refine.n_iters`.
    pub n_iters: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Stored intensity (in [0, 1]) at or above which a label pixel is vessel.
    pub label_threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            label_threshold: labelrefine::raster::DEFAULT_LABEL_THRESHOLD,
        }
    }
}

/// Every tunable of the pipeline. Section `seed` fields are derived from the
/// top-level `seed` whenever a configuration is loaded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub mine: MineConfig,
    pub noise: NoiseConfig,
    pub refine: RefineConfig,
    pub postproc: PostprocConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

const SYNTH_STREAM: u64 = 1;
const MINE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const TRAIN_STREAM: u64 = 4;

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Re-derives the per-stage seeds from `seed`.
    pub fn resolve_seeds(&mut self) {
        self.mine.seed = derive_seed(self.seed, &[MINE_STREAM]);
        self.noise.seed = derive_seed(self.seed, &[NOISE_STREAM]);
        self.refine.seed = derive_seed(self.seed, &[TRAIN_STREAM]);
    }

    pub fn synth_seed(&self) -> u64 {
        derive_seed(self.seed, &[SYNTH_STREAM])
    }

    pub fn validate(&self) -> Result<()> {
        self.mine.validate()?;
        self.noise.validate()?;
        self.refine.validate()?;
        if self.postproc.otsu_bins < 2 {
            return Err(UsageError("postproc.otsu_bins must be at least 2".into()).into());
        }
        if !(0.0..=1.0).contains(&self.eval.label_threshold) {
            return Err(UsageError("eval.label_threshold must lie in [0, 1]".into()).into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

/// `key = default` lines for every configuration key.
pub fn config_keys_help() -> String {
    let mut keys = Vec::new();
    flatten("", &serde_json::to_value(PipelineConfig::default()).expect("serializable"), &mut keys);
    let mut s = String::from(
        "Configuration keys (JSON file given with --config; defaults shown).\n\
         Section seeds are derived from the top-level seed.\n",
    );
    for (k, v) in keys {
        writeln!(s, "  {k} = {v}").expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_constants() {
        let c = PipelineConfig::default();
        assert_eq!((c.refine.lambda, c.refine.n_iters), (50.0, 3));
        assert_eq!(c.refine.iter_weights, vec![1.0, 1.6, 2.2]);
        assert_eq!((c.refine.adam.lr, c.refine.adam.beta1, c.refine.adam.beta2), (0.0002, 0.5, 0.999));
        assert_eq!((c.noise.p_erode, c.noise.p_dilate, c.noise.p_open, c.noise.p_close), (0.25, 0.25, 0.10, 0.10));
        assert_eq!((c.noise.se_erode_dilate, c.noise.se_open_close), (2, 3));
        assert_eq!(c.mine.ratio_min, 0.05);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let mut c = PipelineConfig { seed: 9, ..Default::default() };
        c.resolve_seeds();
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"refine": {"lamda": 1}}"#).is_err());
        let partial: PipelineConfig = serde_json::from_str(r#"{"refine": {"epochs": 2}}"#).unwrap();
        assert_eq!(partial.refine.epochs, 2);
        assert_eq!(partial.refine.lambda, 50.0);
    }

    #[test]
    fn help_lists_every_key() {
        let h = config_keys_help();
        for key in ["refine.lambda = 50.0", "refine.iter_weights = [1.0,1.6,2.2]", "noise.p_open = 0.1", "mine.ratio_min = 0.05", "refine.adam.lr = 0.0002"] {
            assert!(h.contains(key), "missing {key}");
        }
    }
}
