//! Run configuration files: `[model]`, `[train]` and `[data]` sections of
//! `key = value` lines. `#` starts a comment. Keys left out keep the defaults
//! of [`RunConfig::default`]; unknown keys and sections are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::blocks::CstConfig;
use crate::error::{CstError, Result};
use crate::hsi::{PatchProtocol, TestEdge};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: CstConfig,
    pub train: TrainConfig,
    pub data: PatchProtocol,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: CstConfig::full(128, 4),
            train: TrainConfig::default(),
            data: PatchProtocol::chikusei(4),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CstError::Config(format!("bad value '{}' for {}", v, key)))
}

fn opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

fn train_pairs(t: &TrainConfig) -> Vec<(&'static str, String)> {
    let halve: Vec<String> = t.halve_at.iter().map(usize::to_string).collect();
    vec![
        ("epochs", t.epochs.to_string()),
        ("batch", t.batch.to_string()),
        ("lr0", t.lr0.to_string()),
        ("halve_at", halve.join(",")),
        ("lambda_s", t.weights.lambda_s.to_string()),
        ("lambda_g", t.weights.lambda_g.to_string()),
        ("seed", t.seed.to_string()),
        ("max_steps", show_opt(&t.max_steps)),
        ("grad_clip", show_opt(&t.grad_clip)),
        ("augment", t.augment.to_string()),
    ]
}

fn set_train(t: &mut TrainConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "epochs" => t.epochs = num(key, v)?,
        "batch" => t.batch = num(key, v)?,
        "lr0" => t.lr0 = num(key, v)?,
        "halve_at" => {
            t.halve_at = v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect::<Result<_>>()?
        }
        "lambda_s" => t.weights.lambda_s = num(key, v)?,
        "lambda_g" => t.weights.lambda_g = num(key, v)?,
        "seed" => t.seed = num(key, v)?,
        "max_steps" => t.max_steps = opt(key, v)?,
        "grad_clip" => t.grad_clip = opt(key, v)?,
        "augment" => t.augment = num(key, v)?,
        _ => return Err(CstError::Config(format!("unknown train key '{}'", key))),
    }
    Ok(())
}

fn data_pairs(p: &PatchProtocol) -> Vec<(&'static str, String)> {
    vec![
        ("region_y", p.region.y.to_string()),
        ("region_x", p.region.x.to_string()),
        ("region_h", p.region.h.to_string()),
        ("region_w", p.region.w.to_string()),
        ("test_side", p.test_side.to_string()),
        ("test_count", p.test_count.to_string()),
        ("test_edge", p.test_edge.as_str().to_string()),
        ("lr_patch", p.lr_patch.to_string()),
        ("scale", p.scale.to_string()),
        ("stride", show_opt(&p.stride)),
        ("val_fraction", p.val_fraction.to_string()),
    ]
}

fn set_data(p: &mut PatchProtocol, key: &str, v: &str) -> Result<()> {
    match key {
        "region_y" => p.region.y = num(key, v)?,
        "region_x" => p.region.x = num(key, v)?,
        "region_h" => p.region.h = num(key, v)?,
        "region_w" => p.region.w = num(key, v)?,
        "test_side" => p.test_side = num(key, v)?,
        "test_count" => p.test_count = num(key, v)?,
        "test_edge" => p.test_edge = TestEdge::parse(v)?,
        "lr_patch" => p.lr_patch = num(key, v)?,
        "scale" => p.scale = num(key, v)?,
        "stride" => p.stride = opt(key, v)?,
        "val_fraction" => p.val_fraction = num(key, v)?,
        _ => return Err(CstError::Config(format!("unknown data key '{}'", key))),
    }
    Ok(())
}

impl RunConfig {
    /// Tiny model, short schedule and the small protocol for a `side`×`side` synthetic cube.
    pub fn desk(bands: usize, scale: usize, side: usize) -> Self {
        RunConfig {
            model: CstConfig::tiny(bands, 16, scale),
            train: TrainConfig::desk(),
            data: PatchProtocol::desk(side, side, scale),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.scale != self.model.scale {
            return Err(CstError::Config(format!(
                "data scale {} differs from model scale {}",
                self.data.scale, self.model.scale
            )));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !matches!(name, "model" | "train" | "data") {
                    return Err(CstError::Config(format!("line {}: unknown section [{}]", n + 1, name)));
                }
                section = Some(name.to_string());
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CstError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let res = match section.as_deref() {
                Some("model") => cfg.model.set(k, v),
                Some("train") => set_train(&mut cfg.train, k, v),
                Some("data") => set_data(&mut cfg.data, k, v),
                _ => Err(CstError::Config("key outside of a section".into())),
            };
            res.map_err(|e| CstError::Config(format!("line {}: {}", n + 1, e)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, pairs) in [
            ("model", self.model.to_pairs()),
            ("train", train_pairs(&self.train)),
            ("data", data_pairs(&self.data)),
        ] {
            if !out.is_empty() {
                out.push('\n');
            }
            let _ = writeln!(out, "[{}]", name);
            for (k, v) in pairs {
                let _ = writeln!(out, "{} = {}", k, v);
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CstError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| CstError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::Variant;

    #[test]
    fn serialize_parse_is_fixed_point() {
        let mut c = RunConfig::desk(8, 2, 128);
        c.model.variant = Variant::NoCsa;
        c.train.grad_clip = Some(0.5);
        c.train.halve_at = vec![];
        c.data.stride = Some(12);
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::parse("[model]\nvariant = no_cse  # ablation\n").unwrap();
        assert_eq!(c.model.variant, Variant::NoCse);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        assert!(RunConfig::parse("[model]\nwidth = 3\n").is_err());
        assert!(RunConfig::parse("[optim]\n").is_err());
        assert!(RunConfig::parse("epochs = 3\n").is_err());
        assert!(RunConfig::parse("[train]\nlr0 = fast\n").is_err());
        assert!(RunConfig::parse("[data]\nscale = 2\n").is_err());
    }
}
