//! Registration quality metrics and difference panels.
//!
//! Metrics files are flat `key = value` text with these keys:
//! `format`, `version`, `ssd`, `initial_ssd`, `ssd_reduction`, optional
//! `dice`, and one `time.<phase>` entry (seconds) per timed phase.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_ops::ScalarField;
use crate::io::save_gray;
use crate::kv::KvFile;
use crate::scalar::Scalar;

pub const METRICS_FORMAT: &str = "metamorph-metrics";
pub const METRICS_VERSION: u32 = 1;
/// Width in pixels of the gray bars between panel tiles.
pub const PANEL_SEPARATOR: usize = 4;

fn same_shape<S: Scalar>(a: &ScalarField<S>, b: &ScalarField<S>) -> Result<()> {
    a.tensor().expect_same_shape(b.tensor())
}

/// Unnormalized sum of squared differences.
pub fn ssd<S: Scalar>(a: &ScalarField<S>, b: &ScalarField<S>) -> Result<f64> {
    same_shape(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum())
}

/// Dice overlap of two `{0,1}` masks; two empty masks score 1.
pub fn dice<S: Scalar>(a: &ScalarField<S>, b: &ScalarField<S>) -> Result<f64> {
    same_shape(a, b)?;
    let binary = |f: &ScalarField<S>| f.data().iter().all(|&v| v == S::zero() || v == S::one());
    if !binary(a) || !binary(b) {
        return Err(Error::Contract("dice expects binary masks with values in {0, 1}".into()));
    }
    let count = |f: &ScalarField<S>| f.data().iter().filter(|&&v| v == S::one()).count();
    let inter = a
        .data()
        .iter()
        .zip(b.data())
        .filter(|(&x, &y)| x == S::one() && y == S::one())
        .count();
    let total = count(a) + count(b);
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub ssd: f64,
    pub dice: Option<f64>,
    pub initial_ssd: f64,
    pub ssd_reduction: f64,
    /// `(phase, seconds)` in insertion order.
    pub timings: Vec<(String, f64)>,
}

impl Metrics {
    /// `ssd_reduction` is `1 - ssd / initial_ssd`, or 0 when `initial_ssd` is 0.
    pub fn new(ssd: f64, initial_ssd: f64) -> Self {
        let ssd_reduction = if initial_ssd > 0.0 { 1.0 - ssd / initial_ssd } else { 0.0 };
        Self {
            ssd,
            dice: None,
            initial_ssd,
            ssd_reduction,
            timings: Vec::new(),
        }
    }

    /// Metrics of `output` against `target`, relative to the unregistered `source`.
    pub fn compare<S: Scalar>(output: &ScalarField<S>, target: &ScalarField<S>, source: &ScalarField<S>) -> Result<Self> {
        Ok(Self::new(ssd(output, target)?, ssd(source, target)?))
    }

    pub fn with_timing(mut self, phase: impl Into<String>, seconds: f64) -> Self {
        self.timings.push((phase.into(), seconds));
        self
    }

    pub fn timing(&self, phase: &str) -> Option<f64> {
        self.timings.iter().find(|(p, _)| p == phase).map(|(_, s)| *s)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.push("format", METRICS_FORMAT)
            .push("version", METRICS_VERSION)
            .push("ssd", self.ssd)
            .push("initial_ssd", self.initial_ssd)
            .push("ssd_reduction", self.ssd_reduction);
        if let Some(d) = self.dice {
            kv.push("dice", d);
        }
        for (phase, s) in &self.timings {
            kv.push(format!("time.{phase}"), s);
        }
        kv
    }

    pub fn from_kv(kv: &KvFile, origin: &Path) -> Result<Self> {
        if kv.get("format") != Some(METRICS_FORMAT) {
            return Err(Error::malformed(origin, format!("not a {METRICS_FORMAT} file")));
        }
        let dice = kv.get("dice").map(|_| kv.parse_value("dice", origin)).transpose()?;
        let mut timings = Vec::new();
        for (k, _) in kv.with_prefix("time.") {
            timings.push((k["time.".len()..].to_string(), kv.parse_value(k, origin)?));
        }
        Ok(Self {
            ssd: kv.parse_value("ssd", origin)?,
            dice,
            initial_ssd: kv.parse_value("initial_ssd", origin)?,
            ssd_reduction: kv.parse_value("ssd_reduction", origin)?,
            timings,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_kv().write(path, "registration metrics (ssd is unnormalized)")
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvFile::read(path)?, path)
    }
}

/// `|output - target|` rescaled so the largest difference is white.
pub fn difference_image<S: Scalar>(output: &ScalarField<S>, target: &ScalarField<S>) -> Result<ScalarField<f64>> {
    same_shape(output, target)?;
    let diff: Vec<f64> = output
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .collect();
    let max = diff.iter().cloned().fold(0.0, f64::max);
    let w = output.width();
    Ok(ScalarField::from_fn(output.height(), w, |y, x| {
        if max > 0.0 {
            diff[y * w + x] / max
        } else {
            0.0
        }
    }))
}

/// Tiles images left to right with mid-gray separators.
pub fn panel_image<S: Scalar>(tiles: &[&ScalarField<S>]) -> Result<ScalarField<f64>> {
    let first = tiles.first().ok_or_else(|| Error::Contract("panel needs at least one tile".into()))?;
    for t in tiles {
        same_shape(first, t)?;
    }
    let (h, w) = (first.height(), first.width());
    let stride = w + PANEL_SEPARATOR;
    let total = tiles.len() * w + (tiles.len() - 1) * PANEL_SEPARATOR;
    Ok(ScalarField::from_fn(h, total, |y, x| {
        let (tile, col) = (x / stride, x % stride);
        if col < w {
            tiles[tile].get(y, col).as_f64().clamp(0.0, 1.0)
        } else {
            0.5
        }
    }))
}

/// Writes `diff.png` (rescaled absolute difference) and `panel.png`
/// (source | output | target) into `dir`.
pub fn diff_panel<S: Scalar>(
    source: &ScalarField<S>,
    output: &ScalarField<S>,
    target: &ScalarField<S>,
    dir: &Path,
) -> Result<()> {
    save_gray(&difference_image(output, target)?, &dir.join("diff.png"))?;
    save_gray(&panel_image(&[source, output, target])?, &dir.join("panel.png"))
}
