//! Mapping configuration: defaults, the flat `key = value` config file
//! format, and command-line overrides.
//!
//! Precedence is defaults < file < overrides. Unknown keys are rejected so
//! typos fail loudly instead of silently running with defaults.

use crate::error::{Error, Result};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct MapConfig {
    /// Number of feature-grid resolution levels (finest first).
    pub levels: usize,
    /// Feature vector length per grid vertex.
    pub feature_dim: usize,
    /// Number of temporal basis functions (first one is constant).
    pub basis_count: usize,
    /// Edge length of the finest-level voxels, meters.
    pub finest_voxel_size: f64,
    /// Voxel size multiplier from each level to the next coarser one.
    pub level_scale_factor: f64,
    pub mlp_hidden_layers: usize,
    pub mlp_hidden_width: usize,
    /// Truncation distance tau, meters.
    pub truncation: f64,
    /// Range threshold below which free-space samples count as dense, meters.
    pub r_dense: f64,
    /// Samples drawn per ray inside the surface band.
    pub surface_samples: usize,
    /// Samples drawn per ray in the free-space section.
    pub free_samples: usize,
    pub lambda_eikonal: f64,
    pub lambda_free: f64,
    pub lambda_certain: f64,
    /// Static-SDF threshold for calling a point dynamic, meters.
    pub d_static: f64,
    pub learning_rate: f64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Initial perturbation for numerical gradients, meters.
    pub eps_start: f64,
    /// Final perturbation after decay, meters.
    pub eps_end: f64,
    /// Fraction of training over which eps decays from start to end.
    pub eps_decay_fraction: f64,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        let finest_voxel_size = 0.3f64;
        let level_scale_factor = 2.0f64;
        let levels = 2;
        let coarsest = finest_voxel_size * level_scale_factor.powi(levels as i32 - 1);
        MapConfig {
            levels,
            feature_dim: 8,
            basis_count: 32,
            finest_voxel_size,
            level_scale_factor,
            mlp_hidden_layers: 2,
            mlp_hidden_width: 64,
            truncation: 0.5,
            r_dense: 15.0,
            surface_samples: 5,
            free_samples: 15,
            lambda_eikonal: 0.02,
            lambda_free: 0.25,
            lambda_certain: 0.2,
            d_static: 0.16,
            learning_rate: 0.01,
            train_steps: 20_000,
            batch_size: 4096,
            eps_start: coarsest,
            eps_end: finest_voxel_size / 4.0,
            eps_decay_fraction: 0.7,
            seed: 42,
        }
    }
}

impl MapConfig {
    pub fn voxel_size(&self, level: usize) -> f64 {
        self.finest_voxel_size * self.level_scale_factor.powi(level as i32)
    }

    pub fn coarsest_voxel_size(&self) -> f64 {
        self.voxel_size(self.levels - 1)
    }

    /// Loads a config using the full precedence chain. `path` and
    /// `overrides` may each be empty.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<MapConfig> {
        let mut cfg = MapConfig::default();
        let mut touched = BTreeSet::new();
        if let Some(path) = path {
            let text =
                std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, &mut touched)?;
        }
        for entry in overrides {
            let (key, value) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override `{entry}` is not of the form key=value"))
            })?;
            cfg.apply_kv(key.trim(), value.trim(), &mut touched)?;
        }
        // eps defaults follow the voxel sizes unless pinned explicitly
        if !touched.contains("eps_start") {
            cfg.eps_start = cfg.coarsest_voxel_size();
        }
        if !touched.contains("eps_end") {
            cfg.eps_end = cfg.finest_voxel_size / 4.0;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str, touched: &mut BTreeSet<String>) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.apply_kv(key.trim(), value.trim(), touched)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    fn apply_kv(&mut self, key: &str, value: &str, touched: &mut BTreeSet<String>) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
        }
        match key {
            "levels" => self.levels = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "basis_count" => self.basis_count = num(key, value)?,
            "finest_voxel_size" => self.finest_voxel_size = num(key, value)?,
            "level_scale_factor" => self.level_scale_factor = num(key, value)?,
            "mlp_hidden_layers" => self.mlp_hidden_layers = num(key, value)?,
            "mlp_hidden_width" => self.mlp_hidden_width = num(key, value)?,
            "truncation" => self.truncation = num(key, value)?,
            "r_dense" => self.r_dense = num(key, value)?,
            "surface_samples" => self.surface_samples = num(key, value)?,
            "free_samples" => self.free_samples = num(key, value)?,
            "lambda_eikonal" => self.lambda_eikonal = num(key, value)?,
            "lambda_free" => self.lambda_free = num(key, value)?,
            "lambda_certain" => self.lambda_certain = num(key, value)?,
            "d_static" => self.d_static = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "train_steps" => self.train_steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "eps_start" => self.eps_start = num(key, value)?,
            "eps_end" => self.eps_end = num(key, value)?,
            "eps_decay_fraction" => self.eps_decay_fraction = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        touched.insert(key.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("finest_voxel_size", self.finest_voxel_size),
            ("truncation", self.truncation),
            ("r_dense", self.r_dense),
            ("lambda_eikonal", self.lambda_eikonal),
            ("lambda_free", self.lambda_free),
            ("lambda_certain", self.lambda_certain),
            ("d_static", self.d_static),
            ("learning_rate", self.learning_rate),
            ("eps_start", self.eps_start),
            ("eps_end", self.eps_end),
            ("eps_decay_fraction", self.eps_decay_fraction),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.level_scale_factor <= 1.0 {
            return Err(Error::Config(format!(
                "level_scale_factor must be > 1, got {}",
                self.level_scale_factor
            )));
        }
        if self.basis_count < 2 {
            return Err(Error::Config(format!(
                "basis_count must be at least 2, got {}",
                self.basis_count
            )));
        }
        if self.eps_start < self.eps_end {
            return Err(Error::Config(format!(
                "eps_start ({}) must be >= eps_end ({})",
                self.eps_start, self.eps_end
            )));
        }
        for (name, v) in [
            ("levels", self.levels),
            ("feature_dim", self.feature_dim),
            ("mlp_hidden_layers", self.mlp_hidden_layers),
            ("mlp_hidden_width", self.mlp_hidden_width),
            ("surface_samples", self.surface_samples),
            ("free_samples", self.free_samples),
            ("train_steps", self.train_steps),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be nonzero")));
            }
        }
        Ok(())
    }
}
