//! Effective run configuration: preset defaults, then the config file, then
//! command-line overrides.

use std::collections::BTreeSet;
use std::path::Path;

use wavray::model::ModelConfig;
use wavray::train::TrainConfig;
use wavray::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl Preset {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(TensorError::Config(format!("unknown preset {s:?} (expected desk or full)"))),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Keys set by the file or a flag rather than taken from the preset.
    pub explicit: BTreeSet<String>,
}

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            TensorError::Config(format!("{origin}:{}: expected key = value, got {line:?}", n + 1))
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Splits a `--set key=value` argument.
pub fn parse_override(arg: &str) -> Result<(String, String)> {
    let (k, v) = arg
        .split_once('=')
        .ok_or_else(|| TensorError::Config(format!("override {arg:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl CliConfig {
    pub fn preset(preset: Preset) -> Self {
        let (model, train) = match preset {
            Preset::Desk => (ModelConfig::desk(0, 3), TrainConfig::desk()),
            Preset::Full => (ModelConfig::full(0), TrainConfig::default()),
        };
        Self {
            preset,
            model,
            train,
            explicit: BTreeSet::new(),
        }
    }

    /// Applies `pairs` in order over the preset they name (desk if none).
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let preset = pairs
            .iter()
            .rev()
            .find(|(k, _)| k == "preset")
            .map(|(_, v)| Preset::parse(v))
            .transpose()?
            .unwrap_or(Preset::Desk);
        let mut cfg = Self::preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Reads the optional config file, then the overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| TensorError::io(path, e))?;
                parse_pairs(&text, &path.display().to_string())?
            }
            None => Vec::new(),
        };
        pairs.extend_from_slice(overrides);
        Self::from_pairs(&pairs)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if ModelConfig::KEYS.contains(&key) {
            self.model.set(key, value)?;
        } else if TrainConfig::KEYS.contains(&key) {
            self.train.set(key, value)?;
        } else {
            return Err(TensorError::Config(format!("unknown config key {key:?}")));
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Every key with its effective value, readable back by [`CliConfig::load`].
    pub fn render(&self) -> String {
        let mut out = format!("preset = {}\n", self.preset.as_str());
        for (k, v) in self.model.to_pairs().into_iter().chain(self.train.to_pairs()) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(text: &str) -> Vec<(String, String)> {
        parse_pairs(text, "test").unwrap()
    }

    #[test]
    fn comments_and_blank_lines() {
        let p = pairs("# header\n\nrays = 3  # trailing\n epochs=5\n");
        assert_eq!(p, vec![("rays".into(), "3".into()), ("epochs".into(), "5".into())]);
    }

    #[test]
    fn missing_equals_names_the_line() {
        let err = parse_pairs("rays = 1\nepochs 5\n", "run.cfg").unwrap_err();
        assert!(err.to_string().contains("run.cfg:2"), "{err}");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(CliConfig::from_pairs(&pairs("learning_rate = 0.1")).is_err());
    }

    #[test]
    fn later_values_win() {
        let mut p = pairs("rays = 1\nseed = 4");
        p.push(parse_override("rays=3").unwrap());
        let cfg = CliConfig::from_pairs(&p).unwrap();
        assert_eq!(cfg.model.rays, 3);
        assert_eq!(cfg.train.seed, 4);
        assert!(cfg.is_explicit("rays") && !cfg.is_explicit("classes"));
    }

    #[test]
    fn preset_selects_defaults_regardless_of_position() {
        let cfg = CliConfig::from_pairs(&pairs("rays = 3\npreset = full")).unwrap();
        assert_eq!(cfg.model.image_extent, 224);
        assert_eq!(cfg.model.rays, 3);
        assert_eq!(cfg.train.batch_size, 1024);
        let desk = CliConfig::from_pairs(&[]).unwrap();
        assert_eq!((desk.train.epochs, desk.train.batch_size), (200, 32));
    }

    #[test]
    fn render_round_trips() {
        let cfg = CliConfig::from_pairs(&pairs("rays = 2\nlr = 0.003\nextraction = 4,6,8")).unwrap();
        let back = CliConfig::from_pairs(&pairs(&cfg.render())).unwrap();
        assert_eq!((back.model, back.train), (cfg.model, cfg.train));
    }
}
