//! Run configuration: a flat `key = value` file with `#` comments.
//! Unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use statrs::distribution::{ContinuousCDF, Normal};

use crate::cyclegan::NetSizes;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::localization::{Connectivity, LocalizeParams, StatsDomain};
use crate::nn::ConvNetSpec;
use crate::syndiff::SynDiffSizes;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    SynDiff,
    CycleGan,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SynDiff => "syndiff",
            ModelKind::CycleGan => "cyclegan",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub n_patients: usize,
    pub lesion_radius: f64,
    pub lesion_contrast: f64,
    /// Noise added to lesion-free twins to form the oracle pseudo-normal set.
    pub oracle_sigma: f64,
    pub model: ModelKind,
    pub train: TrainConfig,
    pub gen_base: usize,
    pub gen_depth: usize,
    pub disc_base: usize,
    pub disc_depth: usize,
    pub time_embed_dim: usize,
    pub diffusion_steps: usize,
    pub diffusion_stride: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub localize: LocalizeParams,
    /// Significance level the Z threshold was derived from, if given that way.
    pub significance: Option<f64>,
    pub feature_seed: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 28,
            n_test: 8,
            n_patients: 80,
            lesion_radius: 8.0,
            lesion_contrast: 0.3,
            oracle_sigma: 0.02,
            model: ModelKind::SynDiff,
            train: TrainConfig::default(),
            gen_base: 32,
            gen_depth: 3,
            disc_base: 32,
            disc_depth: 3,
            time_embed_dim: 128,
            diffusion_steps: 1000,
            diffusion_stride: 250,
            beta_start: 1e-4,
            beta_end: 0.02,
            localize: LocalizeParams::default(),
            significance: None,
            feature_seed: 0,
            seed: 0,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

/// One-sided lower-tail Z threshold for significance level `p`.
pub fn z_for_significance(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 0.5) {
        return Err(Error::Config(format!("significance must lie in (0, 0.5), got {p}")));
    }
    Ok(Normal::new(0.0, 1.0).unwrap().inverse_cdf(p))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if seen.insert(k.clone(), v).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
            }
        }
        let mut cfg = RunConfig::default();
        let mut z_given = false;
        for (k, v) in &seen {
            let t = &mut cfg.train;
            match k.as_str() {
                "size" => cfg.size = parse_num(k, v)?,
                "n_train" => cfg.n_train = parse_num(k, v)?,
                "n_test" => cfg.n_test = parse_num(k, v)?,
                "n_patients" => cfg.n_patients = parse_num(k, v)?,
                "lesion_radius" => cfg.lesion_radius = parse_num(k, v)?,
                "lesion_contrast" => cfg.lesion_contrast = parse_num(k, v)?,
                "oracle_sigma" => cfg.oracle_sigma = parse_num(k, v)?,
                "model" => {
                    cfg.model = match v.as_str() {
                        "syndiff" => ModelKind::SynDiff,
                        "cyclegan" => ModelKind::CycleGan,
                        _ => return Err(Error::Config(format!("model must be syndiff or cyclegan, got {v:?}"))),
                    }
                }
                "epochs" => t.epochs = parse_num(k, v)?,
                "batch_size" => t.batch_size = parse_num(k, v)?,
                "learning_rate" => t.learning_rate = parse_num(k, v)?,
                "adam_beta1" => t.adam_beta1 = parse_num(k, v)?,
                "adam_beta2" => t.adam_beta2 = parse_num(k, v)?,
                "lambda_cycle" => t.lambda_cycle = parse_num(k, v)?,
                "lambda_rec" => t.lambda_rec = parse_num(k, v)?,
                "gen_base" => cfg.gen_base = parse_num(k, v)?,
                "gen_depth" => cfg.gen_depth = parse_num(k, v)?,
                "disc_base" => cfg.disc_base = parse_num(k, v)?,
                "disc_depth" => cfg.disc_depth = parse_num(k, v)?,
                "time_embed_dim" => cfg.time_embed_dim = parse_num(k, v)?,
                "diffusion_steps" => cfg.diffusion_steps = parse_num(k, v)?,
                "diffusion_stride" => cfg.diffusion_stride = parse_num(k, v)?,
                "beta_start" => cfg.beta_start = parse_num(k, v)?,
                "beta_end" => cfg.beta_end = parse_num(k, v)?,
                "z_thresh" => {
                    cfg.localize.z_thresh = parse_num(k, v)?;
                    z_given = true;
                }
                "significance" => cfg.significance = Some(parse_num(k, v)?),
                "k_thresh" => {
                    cfg.localize.k_thresh = if v == "auto" { None } else { Some(parse_num(k, v)?) };
                }
                "connectivity" => cfg.localize.connectivity = Connectivity::parse(v)?,
                "stats_domain" => cfg.localize.stats_domain = StatsDomain::parse(v)?,
                "feature_seed" => cfg.feature_seed = parse_num(k, v)?,
                "seed" => cfg.seed = parse_num(k, v)?,
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                _ => return Err(Error::Config(format!("unknown key {k:?}"))),
            }
        }
        if let Some(p) = cfg.significance {
            if z_given {
                return Err(Error::Config("give either z_thresh or significance, not both".into()));
            }
            cfg.localize.z_thresh = z_for_significance(p)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 32 {
            return bad(format!("size {} below 32", self.size));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return bad("n_train and n_test must be positive".into());
        }
        if !(self.lesion_radius > 0.0) || !(0.0..1.0).contains(&self.lesion_contrast) {
            return bad("lesion_radius must be positive and lesion_contrast in [0,1)".into());
        }
        if !(self.oracle_sigma >= 0.0) {
            return bad("oracle_sigma must be non-negative".into());
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        if !self.localize.z_thresh.is_finite() {
            return bad("z_thresh must be finite".into());
        }
        self.schedule()?;
        for spec in [
            ConvNetSpec::generator(self.gen_base, self.gen_depth, self.time_embed_dim, 2),
            ConvNetSpec::discriminator(self.disc_base, self.disc_depth, 2),
        ] {
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        let m = (1 << self.gen_depth.saturating_sub(1)).max(1 << self.disc_depth);
        if !self.size.is_multiple_of(m) {
            return bad(format!("size {} is not a multiple of {m} required by the network depths", self.size));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.diffusion_steps, self.diffusion_stride, self.beta_start, self.beta_end)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn net_sizes(&self) -> NetSizes {
        NetSizes {
            gen_base: self.gen_base,
            gen_depth: self.gen_depth,
            disc_base: self.disc_base,
            disc_depth: self.disc_depth,
        }
    }

    pub fn syndiff_sizes(&self) -> SynDiffSizes {
        SynDiffSizes { diffusive: self.net_sizes(), time_embed_dim: self.time_embed_dim, translator: self.net_sizes() }
    }

    /// Canonical `key = value` text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let l = &self.localize;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("size", self.size.to_string());
        kv("n_train", self.n_train.to_string());
        kv("n_test", self.n_test.to_string());
        kv("n_patients", self.n_patients.to_string());
        kv("lesion_radius", self.lesion_radius.to_string());
        kv("lesion_contrast", self.lesion_contrast.to_string());
        kv("oracle_sigma", self.oracle_sigma.to_string());
        kv("model", self.model.name().to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("learning_rate", t.learning_rate.to_string());
        kv("adam_beta1", t.adam_beta1.to_string());
        kv("adam_beta2", t.adam_beta2.to_string());
        kv("lambda_cycle", t.lambda_cycle.to_string());
        kv("lambda_rec", t.lambda_rec.to_string());
        kv("gen_base", self.gen_base.to_string());
        kv("gen_depth", self.gen_depth.to_string());
        kv("disc_base", self.disc_base.to_string());
        kv("disc_depth", self.disc_depth.to_string());
        kv("time_embed_dim", self.time_embed_dim.to_string());
        kv("diffusion_steps", self.diffusion_steps.to_string());
        kv("diffusion_stride", self.diffusion_stride.to_string());
        kv("beta_start", self.beta_start.to_string());
        kv("beta_end", self.beta_end.to_string());
        match self.significance {
            Some(p) => kv("significance", p.to_string()),
            None => kv("z_thresh", l.z_thresh.to_string()),
        }
        kv("k_thresh", l.k_thresh.map_or("auto".into(), |k| k.to_string()));
        kv("connectivity", l.connectivity.code().to_string());
        kv("stats_domain", l.stats_domain.name().to_string());
        kv("feature_seed", self.feature_seed.to_string());
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let cfg = RunConfig::parse("# comment\n\nmodel = cyclegan  # trailing\nepochs = 3\n").unwrap();
        assert_eq!(cfg.model, ModelKind::CycleGan);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.localize.z_thresh, crate::localization::DEFAULT_Z_THRESH);
        assert_eq!((cfg.n_train, cfg.n_test, cfg.n_patients), (28, 8, 80));
    }

    #[test]
    fn unknown_and_duplicate_keys_rejected() {
        assert!(matches!(RunConfig::parse("epoch = 3"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = x").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse("size = 60").is_err());
        assert!(RunConfig::parse("diffusion_stride = 300").is_err());
        assert!(RunConfig::parse("lesion_contrast = 1.5").is_err());
        assert!(RunConfig::parse("gen_depth = 1").is_err());
        assert!(RunConfig::parse("stats_domain = brain").is_err());
        assert!(RunConfig::parse("connectivity = 6").is_err());
    }

    #[test]
    fn significance_sets_threshold() {
        let cfg = RunConfig::parse("significance = 0.05").unwrap();
        assert!((cfg.localize.z_thresh + 1.6448536269514722).abs() < 1e-9);
        assert!(RunConfig::parse("significance = 0.05\nz_thresh = -2").is_err());
        assert!(RunConfig::parse("significance = 0.7").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg =
            RunConfig::parse("model = cyclegan\nk_thresh = 12\nstats_domain = whole\nlearning_rate = 0.001").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let d = RunConfig::default();
        assert_eq!(RunConfig::parse(&d.to_text()).unwrap(), d);
    }
}
