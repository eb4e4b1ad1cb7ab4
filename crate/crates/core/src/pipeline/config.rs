use crate::error::{Error, Result};
use crate::field::FieldConfig;
use crate::metrics::MetricSettings;
use crate::rimls::RimlsParams;
use crate::training::TrainerConfig;

/// Every tunable of the reconstruction pipeline as one flat key/value set.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub field: FieldConfig,
    pub trainer: TrainerConfig,
    /// Final extraction grid resolution.
    pub grid_resolution: usize,
    /// Grid resolution for the intermediate level set.
    pub level_set_resolution: usize,
    /// Inpaint sparse regions before normal assignment.
    pub fill: bool,
    /// Level-set samples drawn for inpainting; 0 uses the input point count.
    pub fill_samples: usize,
    /// Refine with RIMLS; otherwise the neural field is meshed directly.
    pub mls: bool,
    pub rimls: RimlsParams,
    pub metrics: MetricSettings,
    /// Worker threads; 0 lets the runtime decide.
    pub threads: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            field: FieldConfig::default(),
            trainer: TrainerConfig::default(),
            grid_resolution: 256,
            level_set_resolution: 128,
            fill: true,
            fill_samples: 0,
            mls: true,
            rimls: RimlsParams::default(),
            metrics: MetricSettings::default(),
            threads: 0,
        }
    }
}

const FIELD_KEYS: [&str; 7] = ["bands", "dict_size", "embed_dim", "heads", "layers", "hidden", "attention"];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl PipelineConfig {
    /// Reduced settings that run end to end on one CPU core in minutes.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        for (k, v) in [
            ("layers", "4"),
            ("hidden", "128"),
            ("embed_dim", "128"),
            ("dict_size", "8"),
            ("heads", "4"),
            ("iterations", "2000"),
            ("lr", "1e-3"),
            ("warmup", "200"),
            ("batch_off", "256"),
            ("batch_on", "256"),
            ("checkpoint_every", "500"),
            ("grid_resolution", "128"),
            ("level_set_resolution", "128"),
        ] {
            cfg.set(k, v).expect("desk preset keys are valid");
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.trainer.validate()?;
        self.rimls.validate()?;
        for (name, r) in [
            ("grid_resolution", self.grid_resolution),
            ("level_set_resolution", self.level_set_resolution),
        ] {
            if r < 8 {
                return Err(Error::Config(format!("{name} must be at least 8, got {r}")));
            }
        }
        if !(self.metrics.tau_fraction > 0.0) || self.metrics.distance_samples == 0 || self.metrics.fscore_samples == 0 {
            return Err(Error::Config("metric sample counts and tau must be positive".into()));
        }
        Ok(())
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.trainer;
        match key {
            k if FIELD_KEYS.contains(&k) => self.field.set(k, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                t.seed = self.seed;
                self.rimls.seed = self.seed;
                self.metrics.seed = self.seed;
            }
            "iterations" => {
                t.iterations = parse(key, value)?;
                t.schedule.total = t.iterations;
                t.schedule.warmup = t.schedule.warmup.min(t.iterations);
            }
            "lr" => t.schedule.base = parse(key, value)?,
            "warmup" => t.schedule.warmup = parse(key, value)?,
            "batch_off" => t.batch_off = parse(key, value)?,
            "batch_on" => t.batch_on = parse(key, value)?,
            "rounds" => t.rounds = parse(key, value)?,
            "dis_scale" => t.dis_scale = parse(key, value)?,
            "scale_neighbors" => t.scale_neighbors = parse(key, value)?,
            "point_cap" => t.point_cap = parse(key, value)?,
            "scales" => {
                t.scales = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "alpha" => t.weights.alpha = parse(key, value)?,
            "beta" => t.weights.beta = parse(key, value)?,
            "gamma" => t.weights.gamma = parse(key, value)?,
            "delta" => t.weights.delta = parse(key, value)?,
            "rho" => t.weights.rho = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "grid_resolution" => self.grid_resolution = parse(key, value)?,
            "level_set_resolution" => self.level_set_resolution = parse(key, value)?,
            "fill" => self.fill = parse(key, value)?,
            "fill_samples" => self.fill_samples = parse(key, value)?,
            "mls" => self.mls = parse(key, value)?,
            "rimls_radius_factor" => self.rimls.radius_factor = parse(key, value)?,
            "rimls_radius" => {
                let r: f64 = parse(key, value)?;
                self.rimls.radius = (r > 0.0).then_some(r);
            }
            "rimls_residual_factor" => self.rimls.residual_factor = parse(key, value)?,
            "rimls_normal_scale" => self.rimls.normal_scale = parse(key, value)?,
            "rimls_iterations" => self.rimls.max_iterations = parse(key, value)?,
            "rimls_tolerance" => self.rimls.tolerance = parse(key, value)?,
            "rimls_doublings" => self.rimls.max_doublings = parse(key, value)?,
            "rimls_robust" => self.rimls.robust = parse(key, value)?,
            "metric_distance_samples" => self.metrics.distance_samples = parse(key, value)?,
            "metric_fscore_samples" => self.metrics.fscore_samples = parse(key, value)?,
            "metric_tau_fraction" => self.metrics.tau_fraction = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every recognised key, in file order.
    pub fn keys() -> Vec<String> {
        Self::default()
            .to_text()
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, _)| k.trim().to_string()))
            .collect()
    }

    /// Fully resolved configuration; [`PipelineConfig::parse`] reads it back
    /// unchanged.
    pub fn to_text(&self) -> String {
        let t = &self.trainer;
        let w = &t.weights;
        let r = &self.rimls;
        let m = &self.metrics;
        let scales: Vec<String> = t.scales.iter().map(|s| s.to_string()).collect();
        let mut out = format!("seed = {}\n", self.seed);
        out.push_str(&self.field.to_text());
        let rows: Vec<(&str, String)> = vec![
            ("iterations", t.iterations.to_string()),
            ("lr", format!("{:e}", t.schedule.base)),
            ("warmup", t.schedule.warmup.to_string()),
            ("batch_off", t.batch_off.to_string()),
            ("batch_on", t.batch_on.to_string()),
            ("rounds", t.rounds.to_string()),
            ("dis_scale", format!("{:e}", t.dis_scale)),
            ("scale_neighbors", t.scale_neighbors.to_string()),
            ("point_cap", t.point_cap.to_string()),
            ("scales", scales.join(",")),
            ("alpha", format!("{:e}", w.alpha)),
            ("beta", format!("{:e}", w.beta)),
            ("gamma", format!("{:e}", w.gamma)),
            ("delta", format!("{:e}", w.delta)),
            ("rho", format!("{:e}", w.rho)),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("grid_resolution", self.grid_resolution.to_string()),
            ("level_set_resolution", self.level_set_resolution.to_string()),
            ("fill", self.fill.to_string()),
            ("fill_samples", self.fill_samples.to_string()),
            ("mls", self.mls.to_string()),
            ("rimls_radius_factor", format!("{:e}", r.radius_factor)),
            ("rimls_radius", format!("{:e}", r.radius.unwrap_or(0.0))),
            ("rimls_residual_factor", format!("{:e}", r.residual_factor)),
            ("rimls_normal_scale", format!("{:e}", r.normal_scale)),
            ("rimls_iterations", r.max_iterations.to_string()),
            ("rimls_tolerance", format!("{:e}", r.tolerance)),
            ("rimls_doublings", r.max_doublings.to_string()),
            ("rimls_robust", r.robust.to_string()),
            ("metric_distance_samples", m.distance_samples.to_string()),
            ("metric_fscore_samples", m.fscore_samples.to_string()),
            ("metric_tau_fraction", format!("{:e}", m.tau_fraction)),
            ("threads", self.threads.to_string()),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}
