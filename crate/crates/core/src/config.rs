//! Run configuration: a sectioned `key = value` plain-text format with all
//! defaults embedded. Angles are degrees in files and radians internally.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::geometry::CgParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("invalid value for {key}: {msg}")]
    Invalid { key: String, msg: String },
    #[error("io error reading {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Estimator operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    /// Camera-ground parameters estimated online from scratch.
    OnlineCalibration,
    /// Camera-ground parameters fixed from a prior; factors active from t=0.
    PreCalibrated,
    /// No camera-ground factors at all (pure VIO baseline).
    NoCgBaseline,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::OnlineCalibration => "online-calibration",
            RunMode::PreCalibrated => "pre-calibrated",
            RunMode::NoCgBaseline => "no-cg-baseline",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "online-calibration" => Some(RunMode::OnlineCalibration),
            "pre-calibrated" => Some(RunMode::PreCalibrated),
            "no-cg-baseline" => Some(RunMode::NoCgBaseline),
            _ => None,
        }
    }
}

/// A piecewise schedule: sorted (time, value) knots blended smoothly.
#[derive(Debug, Clone, PartialEq)]
pub struct Keyframes(pub Vec<(f64, f64)>);

impl Keyframes {
    fn parse(s: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let (t, v) = part
                .split_once(':')
                .ok_or_else(|| format!("expected t:value, got {part:?}"))?;
            let t: f64 = t.trim().parse().map_err(|e| format!("bad time {t:?}: {e}"))?;
            let v: f64 = v.trim().parse().map_err(|e| format!("bad value {v:?}: {e}"))?;
            out.push((t, v));
        }
        if out.is_empty() {
            return Err("empty keyframe list".into());
        }
        if !out.windows(2).all(|w| w[0].0 < w[1].0) {
            return Err("keyframe times must be strictly increasing".into());
        }
        Ok(Keyframes(out))
    }

    fn format(&self) -> String {
        self.0
            .iter()
            .map(|(t, v)| format!("{t}:{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Simulation (world, trajectory, sensors) settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub duration_s: f64,
    pub imu_rate_hz: f64,
    pub cam_rate_hz: f64,

    pub image_width: u32,
    pub image_height: u32,
    pub fov_deg: f64,

    pub ground_density_per_100m: f64,
    pub offground_density_per_100m: f64,
    pub outlier_density_per_100m: f64,
    pub corridor_half_width_m: f64,
    pub offground_dist_min_m: f64,
    pub offground_dist_max_m: f64,
    pub offground_height_max_m: f64,
    pub outlier_height_min_m: f64,
    pub outlier_height_max_m: f64,
    pub spurious_rate: f64,

    pub speed_keyframes: Keyframes,
    pub heading_keyframes_deg: Keyframes,
    pub vib_amp_deg: f64,
    pub vib_freq_hz: f64,
    pub vib_noise_amp_deg: f64,
    pub slope_crest_s_m: f64,
    pub slope_angle_deg: f64,
    pub slope_blend_m: f64,

    pub cg_h_m: f64,
    pub cg_theta_deg: f64,
    pub cg_alpha_deg: f64,
    pub lever_arm_x_m: f64,

    pub sigma_px: f64,
    pub sigma_bev_m: f64,
    pub vrw_ms_sqrt_hr: f64,
    pub arw_deg_sqrt_hr: f64,
    pub accel_bias_mgal: f64,
    pub gyro_bias_deg_hr: f64,
    pub noise_enabled: bool,

    pub max_common_features: usize,
    pub max_ground_features: usize,
    pub roi_forward_m: f64,
    pub roi_half_width_m: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration_s: 60.0,
            imu_rate_hz: 100.0,
            cam_rate_hz: 10.0,
            image_width: 1024,
            image_height: 768,
            fov_deg: 60.0,
            ground_density_per_100m: 400.0,
            offground_density_per_100m: 120.0,
            outlier_density_per_100m: 0.0,
            corridor_half_width_m: 8.0,
            offground_dist_min_m: 4.0,
            offground_dist_max_m: 40.0,
            offground_height_max_m: 8.0,
            outlier_height_min_m: 0.3,
            outlier_height_max_m: 1.5,
            spurious_rate: 0.01,
            speed_keyframes: Keyframes(vec![(0.0, 0.0), (5.0, 8.0)]),
            heading_keyframes_deg: Keyframes(vec![(0.0, 0.0)]),
            vib_amp_deg: 0.5,
            vib_freq_hz: 2.0,
            vib_noise_amp_deg: 0.1,
            slope_crest_s_m: -1.0,
            slope_angle_deg: 0.0,
            slope_blend_m: 10.0,
            cg_h_m: 1.7803,
            cg_theta_deg: -1.151,
            cg_alpha_deg: -0.153,
            lever_arm_x_m: 0.8,
            sigma_px: 1.0,
            sigma_bev_m: 0.015,
            vrw_ms_sqrt_hr: 0.12,
            arw_deg_sqrt_hr: 0.5,
            accel_bias_mgal: 1000.0,
            gyro_bias_deg_hr: 100.0,
            noise_enabled: true,
            max_common_features: 250,
            max_ground_features: 40,
            roi_forward_m: 15.0,
            roi_half_width_m: 3.0,
        }
    }
}

impl SimConfig {
    /// Focal length in pixels implied by width and horizontal FOV.
    pub fn focal_px(&self) -> f64 {
        self.image_width as f64 / (2.0 * (self.fov_deg.to_radians() / 2.0).tan())
    }
    /// Normalized-coordinate half-extents of the image.
    pub fn image_bounds(&self) -> (f64, f64) {
        let bx = (self.fov_deg.to_radians() / 2.0).tan();
        (bx, bx * self.image_height as f64 / self.image_width as f64)
    }
    pub fn cg_true(&self) -> CgParams {
        CgParams {
            h: self.cg_h_m,
            theta: self.cg_theta_deg.to_radians(),
            alpha: self.cg_alpha_deg.to_radians(),
        }
    }
}

/// Back-end estimator settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorConfig {
    pub mode: RunMode,
    pub window_size: usize,
    pub time_budget_ms: f64,
    pub huber_px: f64,
    pub cauchy_m: f64,
    pub cutoff_m: f64,
    pub sigma_px: f64,
    pub sigma_cg_m: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gt_init: bool,
    pub pitch_comp: bool,
    pub parallax_min_rad: f64,
    pub cg_gate_ratio: f64,
    pub cg_min_obs: usize,
    pub cg_prior_h_m: f64,
    pub cg_prior_theta_deg: f64,
    pub cg_prior_alpha_deg: f64,
    pub excitation_gyro_var: f64,
    pub max_iterations: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mode: RunMode::OnlineCalibration,
            window_size: 11,
            time_budget_ms: 50.0,
            huber_px: 1.5,
            cauchy_m: 0.05,
            cutoff_m: 0.15,
            sigma_px: 1.0,
            sigma_cg_m: 0.02,
            lambda_min: 1.0 / 80.0,
            lambda_max: 2.0,
            gt_init: false,
            pitch_comp: true,
            parallax_min_rad: 0.004,
            cg_gate_ratio: 0.05,
            cg_min_obs: 30,
            cg_prior_h_m: 0.0,
            cg_prior_theta_deg: 0.0,
            cg_prior_alpha_deg: 0.0,
            excitation_gyro_var: 0.005,
            max_iterations: 8,
        }
    }
}

impl EstimatorConfig {
    pub fn cg_prior(&self) -> Option<CgParams> {
        if self.cg_prior_h_m > 0.0 {
            Some(CgParams {
                h: self.cg_prior_h_m,
                theta: self.cg_prior_theta_deg.to_radians(),
                alpha: self.cg_prior_alpha_deg.to_radians(),
            })
        } else {
            None
        }
    }
}

/// Evaluation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub six_dof_alignment: bool,
    pub include_short_lengths: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { six_dof_alignment: false, include_short_lengths: true }
    }
}

/// Complete configuration for one run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub sim: SimConfig,
    pub estimator: EstimatorConfig,
    pub eval: EvalConfig,
}

macro_rules! emit {
    ($out:expr, $($arg:tt)*) => { let _ = writeln!($out, $($arg)*); };
}

impl Config {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| {
            Err(ConfigError::Invalid { key: key.into(), msg: msg.into() })
        };
        let s = &self.sim;
        if s.duration_s <= 0.0 {
            return bad("sim.duration_s", "must be > 0");
        }
        if s.imu_rate_hz < s.cam_rate_hz || s.cam_rate_hz <= 0.0 {
            return bad("sim.imu_rate_hz", "rates must satisfy imu >= cam > 0");
        }
        if s.ground_density_per_100m <= 0.0 && s.offground_density_per_100m <= 0.0 {
            return bad("sim.ground_density_per_100m", "nothing observable: both densities zero");
        }
        if s.cg_h_m <= 0.0 {
            return bad("sim.cg_h_m", "camera height must be > 0");
        }
        if s.speed_keyframes.0.iter().any(|&(_, v)| v < 0.0) {
            return bad("sim.speed_keyframes", "speeds must be >= 0");
        }
        let e = &self.estimator;
        if e.window_size < 3 {
            return bad("estimator.window_size", "must be >= 3");
        }
        for (k, v) in [
            ("estimator.huber_px", e.huber_px),
            ("estimator.cauchy_m", e.cauchy_m),
            ("estimator.cutoff_m", e.cutoff_m),
            ("estimator.sigma_px", e.sigma_px),
            ("estimator.sigma_cg_m", e.sigma_cg_m),
            ("estimator.time_budget_ms", e.time_budget_ms),
        ] {
            if v <= 0.0 {
                return bad(k, "scale must be > 0");
            }
        }
        if e.mode == RunMode::PreCalibrated && e.cg_prior().is_none() {
            return bad("estimator.cg_prior_h_m", "pre-calibrated mode requires a cg prior");
        }
        Ok(())
    }

    /// Serialize to the sectioned key=value text format.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let s = &self.sim;
        emit!(o, "[sim]");
        emit!(o, "seed = {}", s.seed);
        emit!(o, "duration_s = {}", s.duration_s);
        emit!(o, "imu_rate_hz = {}", s.imu_rate_hz);
        emit!(o, "cam_rate_hz = {}", s.cam_rate_hz);
        emit!(o, "image_width = {}", s.image_width);
        emit!(o, "image_height = {}", s.image_height);
        emit!(o, "fov_deg = {}", s.fov_deg);
        emit!(o, "ground_density_per_100m = {}", s.ground_density_per_100m);
        emit!(o, "offground_density_per_100m = {}", s.offground_density_per_100m);
        emit!(o, "outlier_density_per_100m = {}", s.outlier_density_per_100m);
        emit!(o, "corridor_half_width_m = {}", s.corridor_half_width_m);
        emit!(o, "offground_dist_min_m = {}", s.offground_dist_min_m);
        emit!(o, "offground_dist_max_m = {}", s.offground_dist_max_m);
        emit!(o, "offground_height_max_m = {}", s.offground_height_max_m);
        emit!(o, "outlier_height_min_m = {}", s.outlier_height_min_m);
        emit!(o, "outlier_height_max_m = {}", s.outlier_height_max_m);
        emit!(o, "spurious_rate = {}", s.spurious_rate);
        emit!(o, "speed_keyframes = {}", s.speed_keyframes.format());
        emit!(o, "heading_keyframes_deg = {}", s.heading_keyframes_deg.format());
        emit!(o, "vib_amp_deg = {}", s.vib_amp_deg);
        emit!(o, "vib_freq_hz = {}", s.vib_freq_hz);
        emit!(o, "vib_noise_amp_deg = {}", s.vib_noise_amp_deg);
        emit!(o, "slope_crest_s_m = {}", s.slope_crest_s_m);
        emit!(o, "slope_angle_deg = {}", s.slope_angle_deg);
        emit!(o, "slope_blend_m = {}", s.slope_blend_m);
        emit!(o, "cg_h_m = {}", s.cg_h_m);
        emit!(o, "cg_theta_deg = {}", s.cg_theta_deg);
        emit!(o, "cg_alpha_deg = {}", s.cg_alpha_deg);
        emit!(o, "lever_arm_x_m = {}", s.lever_arm_x_m);
        emit!(o, "sigma_px = {}", s.sigma_px);
        emit!(o, "sigma_bev_m = {}", s.sigma_bev_m);
        emit!(o, "vrw_ms_sqrt_hr = {}", s.vrw_ms_sqrt_hr);
        emit!(o, "arw_deg_sqrt_hr = {}", s.arw_deg_sqrt_hr);
        emit!(o, "accel_bias_mgal = {}", s.accel_bias_mgal);
        emit!(o, "gyro_bias_deg_hr = {}", s.gyro_bias_deg_hr);
        emit!(o, "noise_enabled = {}", s.noise_enabled);
        emit!(o, "max_common_features = {}", s.max_common_features);
        emit!(o, "max_ground_features = {}", s.max_ground_features);
        emit!(o, "roi_forward_m = {}", s.roi_forward_m);
        emit!(o, "roi_half_width_m = {}", s.roi_half_width_m);
        let e = &self.estimator;
        emit!(o, "");
        emit!(o, "[estimator]");
        emit!(o, "mode = {}", e.mode.as_str());
        emit!(o, "window_size = {}", e.window_size);
        emit!(o, "time_budget_ms = {}", e.time_budget_ms);
        emit!(o, "huber_px = {}", e.huber_px);
        emit!(o, "cauchy_m = {}", e.cauchy_m);
        emit!(o, "cutoff_m = {}", e.cutoff_m);
        emit!(o, "sigma_px = {}", e.sigma_px);
        emit!(o, "sigma_cg_m = {}", e.sigma_cg_m);
        emit!(o, "lambda_min = {}", e.lambda_min);
        emit!(o, "lambda_max = {}", e.lambda_max);
        emit!(o, "gt_init = {}", e.gt_init);
        emit!(o, "pitch_comp = {}", e.pitch_comp);
        emit!(o, "parallax_min_rad = {}", e.parallax_min_rad);
        emit!(o, "cg_gate_ratio = {}", e.cg_gate_ratio);
        emit!(o, "cg_min_obs = {}", e.cg_min_obs);
        emit!(o, "cg_prior_h_m = {}", e.cg_prior_h_m);
        emit!(o, "cg_prior_theta_deg = {}", e.cg_prior_theta_deg);
        emit!(o, "cg_prior_alpha_deg = {}", e.cg_prior_alpha_deg);
        emit!(o, "excitation_gyro_var = {}", e.excitation_gyro_var);
        emit!(o, "max_iterations = {}", e.max_iterations);
        let ev = &self.eval;
        emit!(o, "");
        emit!(o, "[eval]");
        emit!(o, "six_dof_alignment = {}", ev.six_dof_alignment);
        emit!(o, "include_short_lengths = {}", ev.include_short_lengths);
        o
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut section = String::new();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Parse {
                    file: file.into(),
                    line: lineno,
                    msg: format!("malformed section header {line:?}"),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                file: file.into(),
                line: lineno,
                msg: format!("expected key = value, got {line:?}"),
            })?;
            let key = key.trim();
            let value = value.trim();
            let full = format!("{section}.{key}");
            if let Some(prev) = seen.insert(full.clone(), lineno) {
                return Err(ConfigError::Parse {
                    file: file.into(),
                    line: lineno,
                    msg: format!("duplicate key {full} (previous at line {prev})"),
                });
            }
            cfg.apply(&section, key, value).map_err(|msg| ConfigError::Parse {
                file: file.into(),
                line: lineno,
                msg,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(path.display().to_string(), e))?;
        Self::from_text(&text, &path.display().to_string())
    }

    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| format!("bad number {v:?}: {e}"))
        }
        fn boolean(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("bad boolean {v:?}")),
            }
        }
        match (section, key) {
            ("sim", "seed") => self.sim.seed = num(value)?,
            ("sim", "duration_s") => self.sim.duration_s = num(value)?,
            ("sim", "imu_rate_hz") => self.sim.imu_rate_hz = num(value)?,
            ("sim", "cam_rate_hz") => self.sim.cam_rate_hz = num(value)?,
            ("sim", "image_width") => self.sim.image_width = num(value)?,
            ("sim", "image_height") => self.sim.image_height = num(value)?,
            ("sim", "fov_deg") => self.sim.fov_deg = num(value)?,
            ("sim", "ground_density_per_100m") => self.sim.ground_density_per_100m = num(value)?,
            ("sim", "offground_density_per_100m") => {
                self.sim.offground_density_per_100m = num(value)?
            }
            ("sim", "outlier_density_per_100m") => self.sim.outlier_density_per_100m = num(value)?,
            ("sim", "corridor_half_width_m") => self.sim.corridor_half_width_m = num(value)?,
            ("sim", "offground_dist_min_m") => self.sim.offground_dist_min_m = num(value)?,
            ("sim", "offground_dist_max_m") => self.sim.offground_dist_max_m = num(value)?,
            ("sim", "offground_height_max_m") => self.sim.offground_height_max_m = num(value)?,
            ("sim", "outlier_height_min_m") => self.sim.outlier_height_min_m = num(value)?,
            ("sim", "outlier_height_max_m") => self.sim.outlier_height_max_m = num(value)?,
            ("sim", "spurious_rate") => self.sim.spurious_rate = num(value)?,
            ("sim", "speed_keyframes") => self.sim.speed_keyframes = Keyframes::parse(value)?,
            ("sim", "heading_keyframes_deg") => {
                self.sim.heading_keyframes_deg = Keyframes::parse(value)?
            }
            ("sim", "vib_amp_deg") => self.sim.vib_amp_deg = num(value)?,
            ("sim", "vib_freq_hz") => self.sim.vib_freq_hz = num(value)?,
            ("sim", "vib_noise_amp_deg") => self.sim.vib_noise_amp_deg = num(value)?,
            ("sim", "slope_crest_s_m") => self.sim.slope_crest_s_m = num(value)?,
            ("sim", "slope_angle_deg") => self.sim.slope_angle_deg = num(value)?,
            ("sim", "slope_blend_m") => self.sim.slope_blend_m = num(value)?,
            ("sim", "cg_h_m") => self.sim.cg_h_m = num(value)?,
            ("sim", "cg_theta_deg") => self.sim.cg_theta_deg = num(value)?,
            ("sim", "cg_alpha_deg") => self.sim.cg_alpha_deg = num(value)?,
            ("sim", "lever_arm_x_m") => self.sim.lever_arm_x_m = num(value)?,
            ("sim", "sigma_px") => self.sim.sigma_px = num(value)?,
            ("sim", "sigma_bev_m") => self.sim.sigma_bev_m = num(value)?,
            ("sim", "vrw_ms_sqrt_hr") => self.sim.vrw_ms_sqrt_hr = num(value)?,
            ("sim", "arw_deg_sqrt_hr") => self.sim.arw_deg_sqrt_hr = num(value)?,
            ("sim", "accel_bias_mgal") => self.sim.accel_bias_mgal = num(value)?,
            ("sim", "gyro_bias_deg_hr") => self.sim.gyro_bias_deg_hr = num(value)?,
            ("sim", "noise_enabled") => self.sim.noise_enabled = boolean(value)?,
            ("sim", "max_common_features") => self.sim.max_common_features = num(value)?,
            ("sim", "max_ground_features") => self.sim.max_ground_features = num(value)?,
            ("sim", "roi_forward_m") => self.sim.roi_forward_m = num(value)?,
            ("sim", "roi_half_width_m") => self.sim.roi_half_width_m = num(value)?,
            ("estimator", "mode") => {
                self.estimator.mode =
                    RunMode::parse(value).ok_or_else(|| format!("unknown mode {value:?}"))?
            }
            ("estimator", "window_size") => self.estimator.window_size = num(value)?,
            ("estimator", "time_budget_ms") => self.estimator.time_budget_ms = num(value)?,
            ("estimator", "huber_px") => self.estimator.huber_px = num(value)?,
            ("estimator", "cauchy_m") => self.estimator.cauchy_m = num(value)?,
            ("estimator", "cutoff_m") => self.estimator.cutoff_m = num(value)?,
            ("estimator", "sigma_px") => self.estimator.sigma_px = num(value)?,
            ("estimator", "sigma_cg_m") => self.estimator.sigma_cg_m = num(value)?,
            ("estimator", "lambda_min") => self.estimator.lambda_min = num(value)?,
            ("estimator", "lambda_max") => self.estimator.lambda_max = num(value)?,
            ("estimator", "gt_init") => self.estimator.gt_init = boolean(value)?,
            ("estimator", "pitch_comp") => self.estimator.pitch_comp = boolean(value)?,
            ("estimator", "parallax_min_rad") => self.estimator.parallax_min_rad = num(value)?,
            ("estimator", "cg_gate_ratio") => self.estimator.cg_gate_ratio = num(value)?,
            ("estimator", "cg_min_obs") => self.estimator.cg_min_obs = num(value)?,
            ("estimator", "cg_prior_h_m") => self.estimator.cg_prior_h_m = num(value)?,
            ("estimator", "cg_prior_theta_deg") => {
                self.estimator.cg_prior_theta_deg = num(value)?
            }
            ("estimator", "cg_prior_alpha_deg") => {
                self.estimator.cg_prior_alpha_deg = num(value)?
            }
            ("estimator", "excitation_gyro_var") => {
                self.estimator.excitation_gyro_var = num(value)?
            }
            ("estimator", "max_iterations") => self.estimator.max_iterations = num(value)?,
            ("eval", "six_dof_alignment") => self.eval.six_dof_alignment = boolean(value)?,
            ("eval", "include_short_lengths") => self.eval.include_short_lengths = boolean(value)?,
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }
}
