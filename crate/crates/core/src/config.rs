//! Hyperparameters for integration, optimization, and learning.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kv::KvFile;

/// How the momentum is advanced between time steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MomentumUpdate {
    /// `z_{t+1} = z_t + f_theta_t(z_t, I_t) / T` with a per-step conv block.
    #[default]
    ResNet,
    /// `z_{t+1} = z_t - div(z_t v_t) / T`, the explicit geodesic update.
    Pde,
}

impl fmt::Display for MomentumUpdate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MomentumUpdate::ResNet => "resnet",
            MomentumUpdate::Pde => "pde",
        })
    }
}

impl FromStr for MomentumUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet" => Ok(MomentumUpdate::ResNet),
            "pde" => Ok(MomentumUpdate::Pde),
            other => Err(Error::Config(format!("unknown momentum update `{other}` (resnet|pde)"))),
        }
    }
}

/// Kernel width used at the reference resolution of 200 pixels.
pub const REFERENCE_SIGMA: f64 = 3.0;
pub const REFERENCE_WIDTH: f64 = 200.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    /// Number of time steps `T` (and of residual blocks).
    pub steps: usize,
    /// Weight of the additive intensity channel; `0` is pure LDDMM.
    pub mu: f64,
    pub lambda: f64,
    /// Gaussian kernel width in pixels; `None` scales [`REFERENCE_SIGMA`]
    /// with the image width.
    pub sigma: Option<f64>,
    pub mode: MomentumUpdate,

    pub hidden_channels: usize,
    pub kernel_size: usize,
    pub negative_slope: f64,
    pub init_gain: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub plateau_tol: f64,
    pub plateau_window: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,

    pub seed: u64,
    pub threads: usize,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            mu: 1.0,
            lambda: 1e-6,
            sigma: None,
            mode: MomentumUpdate::ResNet,
            hidden_channels: 4,
            kernel_size: 3,
            negative_slope: 0.01,
            init_gain: 0.1,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_iters: 1000,
            plateau_tol: 1e-6,
            plateau_window: 25,
            epochs: 10,
            batch_size: 8,
            shuffle: true,
            seed: 0,
            threads: 1,
        }
    }
}

impl RegistrationConfig {
    /// Kernel width for images of the given width.
    pub fn sigma_for(&self, width: usize) -> f64 {
        self.sigma
            .unwrap_or(REFERENCE_SIGMA * width as f64 / REFERENCE_WIDTH)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.steps == 0 {
            return fail("steps (T) must be at least 1".into());
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return fail(format!("mu must be finite and >= 0, got {}", self.mu));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return fail(format!("sigma must be positive, got {s}"));
            }
        }
        if self.hidden_channels == 0 {
            return fail("hidden channel count must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return fail(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if !(self.negative_slope > 0.0 && self.negative_slope < 1.0) {
            return fail(format!("negative slope must lie in (0,1), got {}", self.negative_slope));
        }
        if !(self.init_gain >= 0.0 && self.init_gain.is_finite()) {
            return fail(format!("init gain must be >= 0, got {}", self.init_gain));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("adam betas must lie in [0,1)".into());
        }
        if !(self.epsilon > 0.0) {
            return fail("adam epsilon must be positive".into());
        }
        if self.plateau_window == 0 {
            return fail("plateau window must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch size must be positive".into());
        }
        if self.threads == 0 {
            return fail("thread count must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("steps", self.steps)
            .push("mu", self.mu)
            .push("lambda", self.lambda)
            .push(
                "sigma",
                self.sigma.map_or_else(|| "auto".to_string(), |s| s.to_string()),
            )
            .push("mode", self.mode)
            .push("hidden_channels", self.hidden_channels)
            .push("kernel_size", self.kernel_size)
            .push("negative_slope", self.negative_slope)
            .push("init_gain", self.init_gain)
            .push("learning_rate", self.learning_rate)
            .push("beta1", self.beta1)
            .push("beta2", self.beta2)
            .push("epsilon", self.epsilon)
            .push("max_iters", self.max_iters)
            .push("plateau_tol", self.plateau_tol)
            .push("plateau_window", self.plateau_window)
            .push("epochs", self.epochs)
            .push("batch_size", self.batch_size)
            .push("shuffle", self.shuffle)
            .push("seed", self.seed)
            .push("threads", self.threads);
        kv
    }

    /// Inverse of [`to_kv`](Self::to_kv); `origin` is only used in errors.
    pub fn from_kv(kv: &KvFile, origin: &Path) -> Result<Self> {
        let sigma = match kv.get("sigma") {
            None | Some("auto") => None,
            Some(_) => Some(kv.parse_value("sigma", origin)?),
        };
        let mode = kv
            .get("mode")
            .ok_or_else(|| Error::malformed(origin, "missing key `mode`"))?
            .parse()?;
        let config = Self {
            steps: kv.parse_value("steps", origin)?,
            mu: kv.parse_value("mu", origin)?,
            lambda: kv.parse_value("lambda", origin)?,
            sigma,
            mode,
            hidden_channels: kv.parse_value("hidden_channels", origin)?,
            kernel_size: kv.parse_value("kernel_size", origin)?,
            negative_slope: kv.parse_value("negative_slope", origin)?,
            init_gain: kv.parse_value("init_gain", origin)?,
            learning_rate: kv.parse_value("learning_rate", origin)?,
            beta1: kv.parse_value("beta1", origin)?,
            beta2: kv.parse_value("beta2", origin)?,
            epsilon: kv.parse_value("epsilon", origin)?,
            max_iters: kv.parse_value("max_iters", origin)?,
            plateau_tol: kv.parse_value("plateau_tol", origin)?,
            plateau_window: kv.parse_value("plateau_window", origin)?,
            epochs: kv.parse_value("epochs", origin)?,
            batch_size: kv.parse_value("batch_size", origin)?,
            shuffle: kv.parse_value("shuffle", origin)?,
            seed: kv.parse_value("seed", origin)?,
            threads: kv.parse_value("threads", origin)?,
        };
        config.validate()?;
        Ok(config)
    }
}
