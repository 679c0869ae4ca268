//! Builds simulator and sweep settings from a [`Config`].

use crate::config::Config;
use crate::dataset::FrameObservation;
use crate::error::{Error, Result};
use crate::se3::Intrinsics;
use crate::simulator::{
    gen_dynamic_scene, gen_static_benchmark, static_trials_to_frames, DynamicSceneConfig,
    NoiseConfig, StaticArcConfig,
};
use crate::sweep::{benchmark_refine_config, Method, NoiseAxis, SweepConfig};

pub fn intrinsics(c: &Config) -> Result<Intrinsics> {
    Ok(Intrinsics::new(
        c.f64("camera.fx")?,
        c.f64("camera.fy")?,
        c.f64("camera.cx")?,
        c.f64("camera.cy")?,
    ))
}

fn image_size(c: &Config) -> Result<(u32, u32)> {
    let w = c.usize("camera.width")?;
    let h = c.usize("camera.height")?;
    if w == 0 || h == 0 {
        return Err(Error::Config(
            "camera.width and camera.height must be positive".into(),
        ));
    }
    Ok((w as u32, h as u32))
}

pub fn static_arc(c: &Config) -> Result<StaticArcConfig> {
    let (width, height) = image_size(c)?;
    let arc = StaticArcConfig {
        n_cameras: c.usize("arc.n_cameras")?,
        arc_degrees: c.f64("arc.arc_degrees")?,
        radius: c.f64("arc.radius")?,
        axis_min: c.f64("arc.axis_min")?,
        axis_max: c.f64("arc.axis_max")?,
        yaw_range_deg: c.f64("arc.yaw_range")?,
        camera_height: c.f64("arc.camera_height")?,
        width,
        height,
        intrinsics: intrinsics(c)?,
        n_surface_points: c.usize("arc.surface_points")?,
    };
    if arc.n_cameras < 3 {
        return Err(Error::Config("arc.n_cameras must be at least 3".into()));
    }
    if !(arc.axis_min > 0.0 && arc.axis_min <= arc.axis_max) {
        return Err(Error::Config(
            "arc axis range must satisfy 0 < axis_min <= axis_max".into(),
        ));
    }
    Ok(arc)
}

pub fn noise(c: &Config) -> Result<NoiseConfig> {
    Ok(NoiseConfig {
        pose_translation_pct: c.f64("noise.pose_translation_pct")?,
        rotation_pct: c.f64("noise.rotation_pct")?,
        bbox_pct: c.f64("noise.bbox_pct")?,
    })
}

/// Named dynamic scene with optional noise and length overrides.
pub fn dynamic_scene(c: &Config, seed: u64) -> Result<DynamicSceneConfig> {
    let mut s = match c.str("simulate.scene") {
        "single" => DynamicSceneConfig::single(seed),
        "crossing" => DynamicSceneConfig::crossing(seed),
        "static" => DynamicSceneConfig::static_scene(seed),
        other => {
            return Err(Error::Config(format!(
                "unknown scene `{other}` (single, crossing, static)"
            )))
        }
    };
    let (width, height) = image_size(c)?;
    s.width = width;
    s.height = height;
    s.intrinsics = intrinsics(c)?;
    if let Some(n) = c.opt_usize("simulate.frames")? {
        s.n_frames = n;
    }
    if let Some(v) = c.opt_f64("simulate.feature_sigma_px")? {
        s.feature_sigma_px = v;
    }
    if let Some(v) = c.opt_f64("simulate.depth_k")? {
        s.depth_k = v;
    }
    if let Some(v) = c.opt_f64("simulate.bbox_sigma_px")? {
        s.bbox_sigma_px = v;
    }
    Ok(s)
}

/// Static-arc dataset over seeds `seed .. seed + arc.n_seeds`.
pub fn static_arc_frames(c: &Config, seed: u64) -> Result<Vec<FrameObservation>> {
    let arc = static_arc(c)?;
    let seeds: Vec<u64> = (seed..seed + c.u64("arc.n_seeds")?).collect();
    let trials = gen_static_benchmark(&arc, &noise(c)?, &seeds, c.usize("arc.trials_per_seed")?);
    Ok(static_trials_to_frames(&arc, &trials))
}

pub fn dynamic_frames(c: &Config, seed: u64) -> Result<Vec<FrameObservation>> {
    Ok(gen_dynamic_scene(&dynamic_scene(c, seed)?))
}

pub fn methods(c: &Config) -> Result<Vec<Method>> {
    let list: Vec<&str> = c
        .str("sweep.methods")
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if list.is_empty() {
        return Err(Error::Config("sweep.methods is empty".into()));
    }
    list.into_iter()
        .map(|m| {
            Method::parse(m)
                .ok_or_else(|| Error::Config(format!("unknown method `{m}` (oqi, svd_baseline)")))
        })
        .collect()
}

/// Sweep over `levels` on `axis`, with `trials` trials per seed.
pub fn sweep(
    c: &Config,
    axis: NoiseAxis,
    levels: Vec<f64>,
    seeds: Vec<u64>,
    trials: usize,
) -> Result<SweepConfig> {
    Ok(SweepConfig {
        seeds,
        trials_per_seed: trials,
        methods: methods(c)?,
        arc: static_arc(c)?,
        refine: benchmark_refine_config(),
        ..SweepConfig::new(axis, levels)
    })
}
