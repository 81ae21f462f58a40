//! Architecture and training settings, with a flat `key = value` text form.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every architecture dimension of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub hop: usize,
    /// Frames of context on each side of the current frame.
    pub context: usize,
    pub bands: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub pool: usize,
    /// Hidden sizes of the shared Bi-LSTM layers.
    pub shared_lstm: Vec<usize>,
    /// Hidden size of each branch Bi-LSTM; `2 · branch_lstm` must equal `bands`.
    pub branch_lstm: usize,
    pub saaf_intervals: usize,
    pub sfir_units: usize,
    pub ts: usize,
    /// Output widths of the waveshaper's dense layers, ending at `bands`.
    pub dnn_saaf: Vec<usize>,
    /// `[lstm, fc1, fc2]` widths of each gain block.
    pub se_lstm: Vec<usize>,
    pub dropout: f64,
    pub sample_rate: u32,
    pub lipschitz_l: f64,
    pub lipschitz_weight: f64,
}

impl ModelConfig {
    /// Full-size network: 4096-sample frames at 16 kHz, 32 bands.
    pub fn full() -> Self {
        ModelConfig {
            frame_size: 4096,
            hop: 2048,
            context: 4,
            bands: 32,
            kernel1: 64,
            kernel2: 128,
            pool: 64,
            shared_lstm: vec![64, 32],
            branch_lstm: 16,
            saaf_intervals: 25,
            sfir_units: 1024,
            ts: 8,
            dnn_saaf: vec![32, 16, 16, 32],
            se_lstm: vec![32, 512, 32],
            dropout: 0.1,
            sample_rate: 16000,
            lipschitz_l: 1.0,
            lipschitz_weight: 1e-3,
        }
    }

    /// Scaled-down network that trains in seconds per epoch on one core.
    pub fn desk() -> Self {
        ModelConfig {
            frame_size: 512,
            hop: 256,
            bands: 8,
            kernel1: 16,
            kernel2: 32,
            pool: 8,
            shared_lstm: vec![16, 8],
            branch_lstm: 4,
            sfir_units: 128,
            dnn_saaf: vec![8, 4, 4, 8],
            se_lstm: vec![8, 64, 8],
            ..Self::full()
        }
    }

    /// Pooled steps per frame.
    pub fn steps(&self) -> usize {
        self.frame_size / self.pool
    }

    pub fn window(&self) -> usize {
        2 * self.context + 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let positive = [
            ("frame_size", self.frame_size),
            ("hop", self.hop),
            ("bands", self.bands),
            ("kernel1", self.kernel1),
            ("kernel2", self.kernel2),
            ("pool", self.pool),
            ("branch_lstm", self.branch_lstm),
            ("saaf_intervals", self.saaf_intervals),
            ("sfir_units", self.sfir_units),
            ("ts", self.ts),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return fail(format!("{k} must be positive"));
        }
        if self.frame_size != 2 * self.hop {
            return fail(format!("frame_size {} must be twice hop {}", self.frame_size, self.hop));
        }
        if self.frame_size % self.pool != 0 {
            return fail(format!("pool {} does not divide frame_size {}", self.pool, self.frame_size));
        }
        if self.sample_rate == 0 || self.sample_rate as usize % self.ts != 0 || self.sample_rate as usize / self.ts != 2000 {
            return fail(format!("sample_rate / ts must be 2000, got {} / {}", self.sample_rate, self.ts));
        }
        if self.shared_lstm.is_empty() || self.shared_lstm.contains(&0) {
            return fail("shared_lstm needs at least one positive width".into());
        }
        if 2 * self.branch_lstm != self.bands {
            return fail(format!("2 * branch_lstm = {} must equal bands {}", 2 * self.branch_lstm, self.bands));
        }
        if self.dnn_saaf.last() != Some(&self.bands) || self.dnn_saaf.contains(&0) {
            return fail(format!("dnn_saaf {:?} must be positive and end at bands {}", self.dnn_saaf, self.bands));
        }
        if self.se_lstm.len() != 3 || self.se_lstm[2] != self.bands || self.se_lstm.contains(&0) {
            return fail(format!("se_lstm {:?} must be three positive widths ending at bands {}", self.se_lstm, self.bands));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lipschitz_l > 0.0) || !(self.lipschitz_weight >= 0.0) {
            return fail("lipschitz_l must be positive and lipschitz_weight non-negative".into());
        }
        Ok(())
    }
}

/// Optimizer schedule, data conditioning and seeding.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub patience: usize,
    pub finetune_factor: f64,
    pub max_epochs_pretrain: usize,
    pub max_epochs_main: usize,
    pub max_epochs_finetune: usize,
    pub seed: u64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub normalize: bool,
    pub fadeout_s: f64,
}

impl TrainConfig {
    pub fn full() -> Self {
        TrainConfig {
            lr: 1e-4,
            patience: 25,
            finetune_factor: 0.75,
            max_epochs_pretrain: 1000,
            max_epochs_main: 5000,
            max_epochs_finetune: 5000,
            seed: 0,
            val_frac: 0.05,
            test_frac: 0.05,
            normalize: true,
            fadeout_s: 0.5,
        }
    }

    pub fn desk() -> Self {
        TrainConfig { lr: 3e-3, max_epochs_pretrain: 200, max_epochs_main: 500, max_epochs_finetune: 200, fadeout_s: 0.1, ..Self::full() }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if self.patience == 0 {
            return fail("patience must be positive");
        }
        if !(self.finetune_factor > 0.0 && self.finetune_factor <= 1.0) {
            return fail("finetune_factor must lie in (0, 1]");
        }
        if !(self.val_frac > 0.0 && self.test_frac > 0.0 && self.val_frac + self.test_frac < 1.0) {
            return fail("val_frac and test_frac must be positive with a sum below 1");
        }
        if !(self.fadeout_s >= 0.0) {
            return fail("fadeout_s must be non-negative");
        }
        Ok(())
    }
}

/// Both halves of a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn full() -> Self {
        Config { model: ModelConfig::full(), train: TrainConfig::full() }
    }

    pub fn desk() -> Self {
        Config { model: ModelConfig::desk(), train: TrainConfig::desk() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path.as_ref())?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.as_ref().display())),
            e => e,
        })
    }

    /// Parses `key = value` lines. Blank lines and `#` comments are skipped.
    /// An optional `preset = desk|full` line picks the defaults; it must
    /// precede every other key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::full();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            if seen.iter().any(|k| k == key) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            if key == "preset" {
                if !seen.is_empty() {
                    return Err(Error::Config(format!("line {}: preset must come first", n + 1)));
                }
                cfg = Config::preset(value)?;
            } else {
                cfg.set(key, value).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            }
            seen.push(key.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "frame_size" => m.frame_size = num(key, value)?,
            "hop" => m.hop = num(key, value)?,
            "context" => m.context = num(key, value)?,
            "bands" => m.bands = num(key, value)?,
            "kernel1" => m.kernel1 = num(key, value)?,
            "kernel2" => m.kernel2 = num(key, value)?,
            "pool" => m.pool = num(key, value)?,
            "shared_lstm" => m.shared_lstm = list(key, value)?,
            "branch_lstm" => m.branch_lstm = num(key, value)?,
            "saaf_intervals" => m.saaf_intervals = num(key, value)?,
            "sfir_units" => m.sfir_units = num(key, value)?,
            "ts" => m.ts = num(key, value)?,
            "dnn_saaf" => m.dnn_saaf = list(key, value)?,
            "se_lstm" => m.se_lstm = list(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "sample_rate" => m.sample_rate = num(key, value)?,
            "lipschitz_l" => m.lipschitz_l = num(key, value)?,
            "lipschitz_weight" => m.lipschitz_weight = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "finetune_factor" => t.finetune_factor = num(key, value)?,
            "max_epochs_pretrain" => t.max_epochs_pretrain = num(key, value)?,
            "max_epochs_main" => t.max_epochs_main = num(key, value)?,
            "max_epochs_finetune" => t.max_epochs_finetune = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "val_frac" => t.val_frac = num(key, value)?,
            "test_frac" => t.test_frac = num(key, value)?,
            "normalize" => t.normalize = num(key, value)?,
            "fadeout_s" => t.fadeout_s = num(key, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Every key, in a form [`Config::parse`] reads back to an equal value.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("frame_size", m.frame_size.to_string());
        kv("hop", m.hop.to_string());
        kv("context", m.context.to_string());
        kv("bands", m.bands.to_string());
        kv("kernel1", m.kernel1.to_string());
        kv("kernel2", m.kernel2.to_string());
        kv("pool", m.pool.to_string());
        kv("shared_lstm", join(&m.shared_lstm));
        kv("branch_lstm", m.branch_lstm.to_string());
        kv("saaf_intervals", m.saaf_intervals.to_string());
        kv("sfir_units", m.sfir_units.to_string());
        kv("ts", m.ts.to_string());
        kv("dnn_saaf", join(&m.dnn_saaf));
        kv("se_lstm", join(&m.se_lstm));
        kv("dropout", format!("{:?}", m.dropout));
        kv("sample_rate", m.sample_rate.to_string());
        kv("lipschitz_l", format!("{:?}", m.lipschitz_l));
        kv("lipschitz_weight", format!("{:?}", m.lipschitz_weight));
        kv("lr", format!("{:?}", t.lr));
        kv("patience", t.patience.to_string());
        kv("finetune_factor", format!("{:?}", t.finetune_factor));
        kv("max_epochs_pretrain", t.max_epochs_pretrain.to_string());
        kv("max_epochs_main", t.max_epochs_main.to_string());
        kv("max_epochs_finetune", t.max_epochs_finetune.to_string());
        kv("seed", t.seed.to_string());
        kv("val_frac", format!("{:?}", t.val_frac));
        kv("test_frac", format!("{:?}", t.test_frac));
        kv("normalize", t.normalize.to_string());
        kv("fadeout_s", format!("{:?}", t.fadeout_s));
        s
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> std::result::Result<V, String> {
    value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| num(key, v.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        Config::full().validate().unwrap();
        Config::desk().validate().unwrap();
        let d = ModelConfig::desk();
        assert_eq!((d.frame_size, d.bands, d.pool, d.steps()), (512, 8, 8, 64));
        assert_eq!(ModelConfig::full().steps(), 64);
    }

    #[test]
    fn text_round_trip() {
        for cfg in [Config::full(), Config::desk()] {
            assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
        }
    }

    #[test]
    fn preset_and_overrides() {
        let cfg = Config::parse("# desk run\npreset = desk\nlr = 1e-4 # slow\nshared_lstm = 12, 6\n\nnormalize = false\n").unwrap();
        assert_eq!(cfg.model.frame_size, 512);
        assert_eq!(cfg.model.shared_lstm, vec![12, 6]);
        assert_eq!(cfg.train.lr, 1e-4);
        assert!(!cfg.train.normalize);
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "frame_size = 4000",
            "bogus = 1",
            "lr 3",
            "lr = fast",
            "lr = 1\nlr = 2",
            "lr = 1\npreset = desk",
            "preset = huge",
            "ts = 4",
            "branch_lstm = 8",
            "dnn_saaf = 32, 16",
            "se_lstm = 32, 32",
            "pool = 100",
            "dropout = 1.5",
            "val_frac = 0.6\ntest_frac = 0.6",
        ] {
            assert!(matches!(Config::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}
