use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::generator::Variant;
use crate::error::{Error, Result};

/// Every training hyperparameter. Rendered and parsed as flat `key = value`
/// text; `include = other.cfg` pulls in another file first.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub lambda_rec: f32,
    pub lambda_perc: f32,
    pub lambda_style: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub lr_g: f32,
    pub lr_d: f32,
    pub epochs: usize,
    /// Stop after this many steps; 0 runs all epochs.
    pub max_steps: usize,
    pub batch_size: usize,
    pub resolution: usize,
    pub seed: u64,
    pub variant: Variant,
    pub enc_channels: Vec<usize>,
    pub res_blocks: usize,
    pub sga_blocks: usize,
    pub disc_channels: Vec<usize>,
    pub self_reference: bool,
    pub tps_grid: usize,
    pub tps_max_displacement: f64,
    pub jitter_brightness: f64,
    pub jitter_contrast: f64,
    pub jitter_saturation: f64,
    pub jitter_hue: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda_rec: 30.0,
            lambda_perc: 0.01,
            lambda_style: 50.0,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            lr_g: 1e-4,
            lr_d: 2e-4,
            epochs: 40,
            max_steps: 0,
            batch_size: 4,
            resolution: 64,
            seed: 0,
            variant: Variant::Sga,
            enc_channels: vec![16, 32, 64, 128],
            res_blocks: 2,
            sga_blocks: 1,
            disc_channels: vec![32, 64, 128],
            self_reference: false,
            tps_grid: 4,
            tps_max_displacement: 0.08,
            jitter_brightness: 0.2,
            jitter_contrast: 0.2,
            jitter_saturation: 0.2,
            jitter_hue: 0.05,
            checkpoint_every: 0,
        }
    }
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

impl TrainingConfig {
    /// Sorted `(key, value)` pairs covering every field.
    pub fn entries(&self) -> BTreeMap<&'static str, String> {
        let mut m = BTreeMap::new();
        m.insert("lambda_rec", self.lambda_rec.to_string());
        m.insert("lambda_perc", self.lambda_perc.to_string());
        m.insert("lambda_style", self.lambda_style.to_string());
        m.insert("beta1", self.beta1.to_string());
        m.insert("beta2", self.beta2.to_string());
        m.insert("adam_eps", self.adam_eps.to_string());
        m.insert("lr_g", self.lr_g.to_string());
        m.insert("lr_d", self.lr_d.to_string());
        m.insert("epochs", self.epochs.to_string());
        m.insert("max_steps", self.max_steps.to_string());
        m.insert("batch_size", self.batch_size.to_string());
        m.insert("resolution", self.resolution.to_string());
        m.insert("seed", self.seed.to_string());
        m.insert("variant", self.variant.label().to_string());
        m.insert("enc_channels", list(&self.enc_channels));
        m.insert("res_blocks", self.res_blocks.to_string());
        m.insert("sga_blocks", self.sga_blocks.to_string());
        m.insert("disc_channels", list(&self.disc_channels));
        m.insert("self_reference", self.self_reference.to_string());
        m.insert("tps_grid", self.tps_grid.to_string());
        m.insert("tps_max_displacement", self.tps_max_displacement.to_string());
        m.insert("jitter_brightness", self.jitter_brightness.to_string());
        m.insert("jitter_contrast", self.jitter_contrast.to_string());
        m.insert("jitter_saturation", self.jitter_saturation.to_string());
        m.insert("jitter_hue", self.jitter_hue.to_string());
        m.insert("checkpoint_every", self.checkpoint_every.to_string());
        m
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "lambda_rec" => self.lambda_rec = num(key, v)?,
            "lambda_perc" => self.lambda_perc = num(key, v)?,
            "lambda_style" => self.lambda_style = num(key, v)?,
            "beta1" => self.beta1 = num(key, v)?,
            "beta2" => self.beta2 = num(key, v)?,
            "adam_eps" => self.adam_eps = num(key, v)?,
            "lr_g" => self.lr_g = num(key, v)?,
            "lr_d" => self.lr_d = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "max_steps" => self.max_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "resolution" => self.resolution = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "variant" => self.variant = v.parse()?,
            "enc_channels" => self.enc_channels = parse_list(key, v)?,
            "res_blocks" => self.res_blocks = num(key, v)?,
            "sga_blocks" => self.sga_blocks = num(key, v)?,
            "disc_channels" => self.disc_channels = parse_list(key, v)?,
            "self_reference" => self.self_reference = num(key, v)?,
            "tps_grid" => self.tps_grid = num(key, v)?,
            "tps_max_displacement" => self.tps_max_displacement = num(key, v)?,
            "jitter_brightness" => self.jitter_brightness = num(key, v)?,
            "jitter_contrast" => self.jitter_contrast = num(key, v)?,
            "jitter_saturation" => self.jitter_saturation = num(key, v)?,
            "jitter_hue" => self.jitter_hue = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_rec, self.lambda_perc, self.lambda_style];
        if lambdas.iter().any(|l| l.is_nan() || *l < 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.sga_blocks == 0 {
            return Err(Error::Config("batch_size and sga_blocks must be positive".into()));
        }
        if self.enc_channels.len() < 3 {
            return Err(Error::Config("enc_channels needs at least 3 layers".into()));
        }
        let stride = 1 << self.enc_channels.len();
        if self.resolution == 0 || !self.resolution.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by the encoder stride {stride}",
                self.resolution
            )));
        }
        if self.resolution >> self.disc_channels.len() == 0 {
            return Err(Error::Config("discriminator is deeper than the image".into()));
        }
        Ok(())
    }

    /// One `key = value` line per field, sorted by key.
    pub fn render(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the sorted rendering; independent of source key order.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))
    }

    /// Applies `key = value` lines onto `self`. Blank lines and `#` comments
    /// are skipped; `include` paths resolve against `base`.
    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        self.apply_text_depth(text, base, 0)
    }

    fn apply_text_depth(&mut self, text: &str, base: Option<&Path>, depth: usize) -> Result<()> {
        if depth > 8 {
            return Err(Error::Config("config includes nested too deeply".into()));
        }
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "include" {
                let path = base.map_or_else(|| Path::new(v).to_path_buf(), |b| b.join(v));
                let inner = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                self.apply_text_depth(&inner, path.parent(), depth + 1)?;
            } else {
                self.set(k, v)?;
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainingConfig::default();
        cfg.apply_text(&text, path.parent())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generator_config(&self) -> super::GeneratorConfig {
        super::GeneratorConfig {
            variant: self.variant,
            enc_channels: self.enc_channels.clone(),
            res_blocks: self.res_blocks,
            sga_blocks: self.sga_blocks,
            seed: crate::data::derive_seed(self.seed, 0x6E4),
        }
    }

    pub fn triple_config(&self) -> crate::data::TripleConfig {
        crate::data::TripleConfig {
            jitter: crate::data::JitterRanges {
                brightness: self.jitter_brightness,
                contrast: self.jitter_contrast,
                saturation: self.jitter_saturation,
                hue: self.jitter_hue,
            },
            tps: crate::data::TpsParams {
                grid: (self.tps_grid, self.tps_grid),
                max_displacement: self.tps_max_displacement,
                seed: 0,
            },
            self_reference: self.self_reference,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let cfg = TrainingConfig {
            variant: Variant::SgaNoSelf,
            enc_channels: vec![8, 8, 16],
            ..TrainingConfig::default()
        };
        let mut back = TrainingConfig::default();
        back.apply_text(&cfg.render(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn hash_ignores_key_order() {
        let mut a = TrainingConfig::default();
        a.apply_text("epochs = 3\nseed = 9\n", None).unwrap();
        let mut b = TrainingConfig::default();
        b.apply_text("seed = 9\n# comment\n\nepochs = 3", None).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), TrainingConfig::default().hash());
    }

    #[test]
    fn include_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "lr_g = 0.5\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nepochs = 2\n").unwrap();
        let cfg = TrainingConfig::from_file(&dir.path().join("run.cfg")).unwrap();
        assert_eq!((cfg.lr_g, cfg.epochs), (0.5, 2));

        let mut c = TrainingConfig::default();
        assert!(c.apply_text("nope = 1", None).is_err());
        assert!(c.apply_text("epochs", None).is_err());
        c.lambda_rec = -1.0;
        assert!(c.validate().is_err());
    }
}
