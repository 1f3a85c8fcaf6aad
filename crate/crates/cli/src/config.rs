//! Run configuration: a flat `key = value` file, overridden by flags.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! cpe.temperature = 0.2
//! cpe.reweight = one
//! detector.steps = 2000
//! finetune.variant = strong
//! ```

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use fsce_core::cpe::CpeConfig;
use fsce_core::detector::DetectorConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// How the base model is adapted to the balanced set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Backbone frozen, doubled proposal cap, halved RoI batch.
    Strong,
    /// Only the box predictor trains.
    Frozen,
}

impl std::str::FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strong" => Ok(Variant::Strong),
            "frozen" => Ok(Variant::Frozen),
            other => bail!("unknown fine-tune variant `{other}` (expected strong or frozen)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub variant: Variant,
    /// Contrastive embedding width; `None` keeps the base model's.
    pub contrast_dim: Option<usize>,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        FinetuneSettings {
            steps: 500,
            variant: Variant::Strong,
            contrast_dim: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Base-stage detector knobs.
    pub detector: DetectorConfig,
    pub finetune: FinetuneSettings,
    pub cpe: CpeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            detector: DetectorConfig::default(),
            finetune: FinetuneSettings::default(),
            cpe: CpeConfig::default(),
        }
    }
}

/// Parses a scalar the way a JSON literal would read, falling back to a string.
fn literal(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_field<T>(target: &mut T, field: &str, raw: &str, key: &str) -> Result<()>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut value = serde_json::to_value(&*target)?;
    let obj = value.as_object_mut().expect("struct serializes to an object");
    if !obj.contains_key(field) {
        bail!("unknown config key `{key}`");
    }
    obj.insert(field.to_string(), literal(raw));
    *target = serde_json::from_value(value).map_err(|e| anyhow!("bad value `{raw}` for `{key}`: {e}"))?;
    Ok(())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let raw = raw.trim();
        match key.split_once('.') {
            None if key == "seed" => {
                self.seed = raw.parse().with_context(|| format!("bad value `{raw}` for `seed`"))?;
            }
            Some(("detector", f)) => set_field(&mut self.detector, f, raw, key)?,
            Some(("cpe", "reweight")) => self.cpe.reweight = raw.parse()?,
            Some(("cpe", f)) => set_field(&mut self.cpe, f, raw, key)?,
            Some(("finetune", "variant")) => self.finetune.variant = raw.parse()?,
            Some(("finetune", f)) => set_field(&mut self.finetune, f, raw, key)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(k.trim(), v).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    /// Defaults, then the file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = file {
            if !p.exists() {
                bail!("config file does not exist: {}", p.display());
            }
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.detector.validate()?;
        cfg.cpe.validate()?;
        Ok(cfg)
    }

    /// Fine-tuning detector config derived from the base model's.
    pub fn finetune_detector(&self, base: &DetectorConfig) -> DetectorConfig {
        let mut cfg = match self.finetune.variant {
            Variant::Strong => base.strong_baseline_finetune(self.finetune.steps),
            Variant::Frozen => base.frozen_finetune(self.finetune.steps),
        };
        if let Some(d) = self.finetune.contrast_dim {
            cfg.contrast_dim = d;
        }
        cfg
    }

    /// Flat `key = value` rendering that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        let sections: [(&str, Value); 3] = [
            ("detector", serde_json::to_value(&self.detector).expect("serializable")),
            ("finetune", serde_json::to_value(&self.finetune).expect("serializable")),
            ("cpe", serde_json::to_value(self.cpe).expect("serializable")),
        ];
        for (name, v) in sections {
            for (k, v) in v.as_object().expect("object") {
                let s = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                out.push_str(&format!("{name}.{k} = {s}\n"));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fsce_core::cpe::Reweight;

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 4\ncpe.temperature = 0.07 # sharp\n\ndetector.steps=10\ncpe.reweight = expm1", "t")
            .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.cpe.temperature, 0.07);
        assert_eq!(cfg.cpe.reweight, Reweight::Expm1);
        assert_eq!(cfg.detector.steps, 10);
        cfg.set("cpe.temperature", "0.5").unwrap();
        assert_eq!(cfg.cpe.temperature, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("cpe.tau", "0.2").is_err());
        assert!(cfg.set("detector.steps", "many").is_err());
        assert!(cfg.set("cpe.reweight", "square").is_err());
        assert!(cfg.set("finetune.variant", "loose").is_err());
        assert!(cfg.apply_text("seed 3", "t").is_err());
    }

    #[test]
    fn nested_and_list_values() {
        let mut cfg = RunConfig::default();
        cfg.set("detector.anchor_sizes", "[8, 16]").unwrap();
        cfg.set("finetune.contrast_dim", "256").unwrap();
        assert_eq!(cfg.detector.anchor_sizes, vec![8.0, 16.0]);
        assert_eq!(cfg.finetune.contrast_dim, Some(256));
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.set("cpe.lambda", "0").unwrap();
        cfg.set("finetune.variant", "frozen").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text(), "t").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn finetune_variants() {
        let mut cfg = RunConfig::default();
        let base = DetectorConfig::default();
        let strong = cfg.finetune_detector(&base);
        assert_eq!(strong.rpn_post_nms_cap, 2 * base.rpn_post_nms_cap);
        cfg.finetune.variant = Variant::Frozen;
        cfg.finetune.contrast_dim = Some(256);
        let frozen = cfg.finetune_detector(&base);
        assert!(frozen.freeze.rpn);
        assert_eq!(frozen.contrast_dim, 256);
    }
}
