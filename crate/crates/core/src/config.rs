//! Flat `key = value` configuration with dotted namespaces.
//!
//! Every key has a default; files and `--set key=value` overrides may only
//! name known keys. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Known keys with their defaults. An empty default means "unset".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("arc.arc_degrees", "18"),
    ("arc.axis_max", "2.25"),
    ("arc.axis_min", "0.75"),
    ("arc.camera_height", "2"),
    ("arc.n_cameras", "5"),
    ("arc.n_seeds", "10"),
    ("arc.radius", "12"),
    ("arc.surface_points", "200"),
    ("arc.trials_per_seed", "10"),
    ("arc.yaw_range", "5"),
    ("association.gate", "3.5"),
    ("association.theta1", "2"),
    ("association.theta2", "1"),
    ("association.theta3", "1"),
    ("camera.cx", "320"),
    ("camera.cy", "240"),
    ("camera.fx", "500"),
    ("camera.fy", "500"),
    ("camera.height", "480"),
    ("camera.width", "640"),
    ("eval.mc_samples", "100000"),
    ("eval.mc_seed", "0"),
    ("init.max_iters", "50"),
    ("init.min_frames", "3"),
    ("init.min_points", "10"),
    ("init.min_view_angle", "10"),
    ("init.prior_axis_sigma", "0.5"),
    ("init.prior_size_weight", "10"),
    ("motion.belief_high", "0.6"),
    ("motion.belief_low", "0.4"),
    ("motion.d_min", "0.2"),
    ("motion.dynamic_ratio", "0.3"),
    ("motion.ema_alpha", "0.3"),
    ("motion.fvb_tolerance_px", "2"),
    ("motion.min_translation", "0.02"),
    ("motion.scene_flow_thresh", "0.15"),
    ("motion.translation_window", "5"),
    ("noise.bbox_pct", "0"),
    ("noise.pose_translation_pct", "0"),
    ("noise.rotation_pct", "0"),
    ("optimizer.lambda0", "0.001"),
    ("optimizer.max_iters", "10"),
    ("optimizer.schur_threshold", "200"),
    ("optimizer.window", "15"),
    ("pipeline.camera_mode", "given"),
    ("pipeline.planar_prior", "false"),
    ("pipeline.separate_quadric_solve", "false"),
    ("pipeline.use_quadric_factors", "true"),
    ("robust.huber_delta", "2.447"),
    ("robust.t_nu", "5"),
    ("sigma.bbox_px", "4"),
    ("sigma.depth_floor_m", "0.01"),
    ("sigma.depth_k", "0.001"),
    ("sigma.feature_px", "1"),
    ("sigma.given_pose", "0.001"),
    ("sigma.motion", "0.01"),
    ("sigma.planar", "0.05"),
    ("sigma.static_object", "0.001"),
    ("simulate.bbox_sigma_px", ""),
    ("simulate.depth_k", ""),
    ("simulate.feature_sigma_px", ""),
    ("simulate.frames", ""),
    ("simulate.scene", "single"),
    ("sweep.methods", "oqi,svd_baseline"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Config {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.assign(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn assign(&mut self, line: &str) -> std::result::Result<(), String> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("expected `key = value`, got `{line}`"))?;
        let (k, v) = (k.trim(), v.trim());
        match self.values.get_mut(k) {
            Some(slot) => {
                *slot = v.to_string();
                Ok(())
            }
            None => Err(format!("unknown key `{k}`")),
        }
    }

    /// Applies one `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        self.assign(assignment).map_err(Error::Config)
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("unregistered config key {key}"))
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        let v = self.str(key);
        if v.is_empty() {
            return Ok(None);
        }
        v.parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
    }

    pub fn opt_f64(&self, key: &str) -> Result<Option<f64>> {
        self.parsed(key)
    }

    pub fn opt_usize(&self, key: &str) -> Result<Option<usize>> {
        self.parsed(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.opt_f64(key)?
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.opt_usize(key)?
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parsed(key)?
            .ok_or_else(|| Error::Config(format!("`{key}` is not set")))
    }

    /// Canonical listing of every key, one `key = value` per line.
    pub fn render(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_override() {
        let c = Config::parse(
            "# window\noptimizer.window = 10  # frames\n\npipeline.camera_mode=estimate\n",
        )
        .unwrap();
        assert_eq!(c.usize("optimizer.window").unwrap(), 10);
        assert_eq!(c.str("pipeline.camera_mode"), "estimate");
        assert_eq!(c.f64("init.prior_size_weight").unwrap(), 10.0);
        let mut c = c;
        c.set("init.prior_size_weight=25").unwrap();
        assert_eq!(c.f64("init.prior_size_weight").unwrap(), 25.0);
        assert_eq!(c.opt_f64("simulate.depth_k").unwrap(), None);
    }

    #[test]
    fn errors() {
        assert!(
            matches!(Config::parse("nope.key = 1"), Err(Error::Config(m)) if m.contains("line 1"))
        );
        assert!(Config::parse("optimizer.window 10").is_err());
        let c = Config::parse("optimizer.window = ten").unwrap();
        assert!(c.usize("optimizer.window").is_err());
        assert!(Config::default().set("x=1").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.set("sigma.feature_px = 2").unwrap();
        let back = Config::parse(&c.render()).unwrap();
        assert_eq!(back, c);
        let keys: Vec<_> = DEFAULTS.iter().map(|d| d.0).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(keys, sorted);
    }
}
