//! Synthetic "C" images and random elastic deformations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_ops::{warp, ScalarField, VectorField};
use crate::kv::KvFile;
use crate::scalar::Scalar;

/// Geometry of the white "C" on black background, in fractions of the image
/// size and degrees.
#[derive(Clone, Debug, PartialEq)]
pub struct CShape {
    pub outer_radius: f64,
    pub inner_radius: f64,
    /// Angular width of the opening.
    pub opening_deg: f64,
    /// Direction the opening faces; 0 = +x (right), 90 = +y (down).
    pub opening_direction_deg: f64,
    /// Angular width of the gap cut from the middle of the arc (target only).
    pub cut_deg: f64,
}

impl Default for CShape {
    fn default() -> Self {
        Self {
            outer_radius: 0.35,
            inner_radius: 0.20,
            opening_deg: 60.0,
            opening_direction_deg: 0.0,
            cut_deg: 30.0,
        }
    }
}

/// Smallest accepted image side for the generators.
pub const MIN_C_SIZE: usize = 64;

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

impl CShape {
    fn validate(&self, size: usize) -> Result<()> {
        if size < MIN_C_SIZE {
            return Err(Error::Config(format!("C image size must be >= {MIN_C_SIZE}, got {size}")));
        }
        if !(0.0 < self.inner_radius && self.inner_radius < self.outer_radius && self.outer_radius <= 0.5) {
            return Err(Error::Config("C radii must satisfy 0 < inner < outer <= 0.5".into()));
        }
        if !(0.0..360.0).contains(&self.opening_deg) || !(0.0..360.0).contains(&self.cut_deg) {
            return Err(Error::Config("C angles must lie in [0, 360)".into()));
        }
        Ok(())
    }

    /// Renders the shape; `with_cut` removes the mid-arc sector.
    /// Edges are anti-aliased over one pixel using the signed distance.
    pub fn render<S: Scalar>(&self, size: usize, with_cut: bool) -> Result<ScalarField<S>> {
        self.validate(size)?;
        let n = size as f64;
        let c = (n - 1.0) / 2.0;
        let (ro, ri) = (self.outer_radius * n, self.inner_radius * n);
        let dir = self.opening_direction_deg.to_radians();
        let half_open = self.opening_deg.to_radians() / 2.0;
        let half_cut = self.cut_deg.to_radians() / 2.0;
        let cut = with_cut && self.cut_deg > 0.0;
        Ok(ScalarField::from_fn(size, size, |y, x| {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let r = dx.hypot(dy);
            let theta = dy.atan2(dx);
            let mut d = (ro - r).min(r - ri);
            if self.opening_deg > 0.0 {
                let from_opening = wrap_angle(theta - dir).abs();
                d = d.min((from_opening - half_open) * r);
            }
            if cut {
                let from_cut = wrap_angle(theta - dir - PI).abs();
                d = d.min((from_cut - half_cut) * r);
            }
            S::lit((0.5 + d).clamp(0.0, 1.0))
        }))
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.push("c.outer_radius", self.outer_radius)
            .push("c.inner_radius", self.inner_radius)
            .push("c.opening_deg", self.opening_deg)
            .push("c.opening_direction_deg", self.opening_direction_deg)
            .push("c.cut_deg", self.cut_deg);
    }

    pub fn from_kv(kv: &KvFile, origin: &std::path::Path) -> Result<Self> {
        Ok(Self {
            outer_radius: kv.parse_value("c.outer_radius", origin)?,
            inner_radius: kv.parse_value("c.inner_radius", origin)?,
            opening_deg: kv.parse_value("c.opening_deg", origin)?,
            opening_direction_deg: kv.parse_value("c.opening_direction_deg", origin)?,
            cut_deg: kv.parse_value("c.cut_deg", origin)?,
        })
    }
}

/// White "C" on black, default geometry.
pub fn generate_c_image<S: Scalar>(size: usize) -> Result<ScalarField<S>> {
    CShape::default().render(size, false)
}

/// The default "C" with a gap cut out of the middle of its arc.
pub fn generate_cut_c_target<S: Scalar>(size: usize) -> Result<ScalarField<S>> {
    CShape::default().render(size, true)
}

/// Random elastic deformation drawn on a coarse control grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ElasticDeformConfig {
    /// Control-point spacing in pixels.
    pub spacing: usize,
    /// Bound on each control-point displacement component, in pixels.
    pub max_displacement: f64,
    pub seed: u64,
}

impl Default for ElasticDeformConfig {
    fn default() -> Self {
        Self {
            spacing: 20,
            max_displacement: 8.0,
            seed: 0,
        }
    }
}

/// Redraws allowed before a folding deformation is reported.
const MAX_REDRAWS: usize = 64;

impl ElasticDeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.spacing < 8 {
            return Err(Error::Config(format!("control spacing must be >= 8, got {}", self.spacing)));
        }
        if !(self.max_displacement >= 0.0 && self.max_displacement < self.spacing as f64 / 2.0) {
            return Err(Error::Config(format!(
                "max displacement must lie in [0, spacing/2), got {}",
                self.max_displacement
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvFile) {
        kv.push("elastic.spacing", self.spacing)
            .push("elastic.max_displacement", self.max_displacement);
    }

    /// Dense displacement field for an image of `height x width`. Draws are
    /// repeated (deterministically) until the sampled Jacobian of
    /// `x -> x - d(x)` is positive everywhere.
    pub fn displacement_field<S: Scalar>(&self, height: usize, width: usize) -> Result<VectorField<S>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let s = self.spacing;
        let (gh, gw) = ((height - 1).div_ceil(s) + 1, (width - 1).div_ceil(s) + 1);
        for _ in 0..MAX_REDRAWS {
            let mut control = vec![(0.0f64, 0.0f64); gh * gw];
            if self.max_displacement > 0.0 {
                let m = self.max_displacement;
                for c in &mut control {
                    *c = (rng.gen_range(-m..=m), rng.gen_range(-m..=m));
                }
            }
            let dense = |y: usize, x: usize| -> (f64, f64) {
                let (cy, cx) = (y / s, x / s);
                let (fy, fx) = ((y % s) as f64 / s as f64, (x % s) as f64 / s as f64);
                let (cy1, cx1) = ((cy + 1).min(gh - 1), (cx + 1).min(gw - 1));
                let at = |i: usize, j: usize| control[i * gw + j];
                let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
                let top = lerp(at(cy, cx), at(cy, cx1), fx);
                let bottom = lerp(at(cy1, cx), at(cy1, cx1), fx);
                lerp(top, bottom, fy)
            };
            let field: Vec<(f64, f64)> = (0..height * width).map(|i| dense(i / width, i % width)).collect();
            if jacobian_positive(&field, height, width) {
                return Ok(VectorField::from_fn(height, width, |y, x| {
                    let (dx, dy) = field[y * width + x];
                    (S::lit(dx), S::lit(dy))
                }));
            }
        }
        Err(Error::Config(format!(
            "elastic deformation kept folding after {MAX_REDRAWS} draws; lower max displacement"
        )))
    }
}

/// Checks `det(I - grad d) > 0` at every pixel using forward differences.
fn jacobian_positive(field: &[(f64, f64)], height: usize, width: usize) -> bool {
    for y in 0..height - 1 {
        for x in 0..width - 1 {
            let i = y * width + x;
            let (d, dr, dd) = (field[i], field[i + 1], field[i + width]);
            let a = 1.0 - (dr.0 - d.0);
            let b = -(dd.0 - d.0);
            let c = -(dr.1 - d.1);
            let e = 1.0 - (dd.1 - d.1);
            if a * e - b * c <= 0.0 {
                return false;
            }
        }
    }
    true
}

/// Applies a random elastic deformation to `image`.
pub fn elastic_deform<S: Scalar>(image: &ScalarField<S>, config: &ElasticDeformConfig) -> Result<ScalarField<S>> {
    let field = config.displacement_field(image.height(), image.width())?;
    warp(image, &field)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn foreground(f: &ScalarField<f64>) -> f64 {
        f.data().iter().sum()
    }

    #[test]
    fn c_image_geometry() {
        let c = generate_c_image::<f64>(200).unwrap();
        assert_eq!((c.height(), c.width()), (200, 200));
        assert!(c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let frac = foreground(&c) / 40000.0;
        // annulus pi (70^2 - 40^2) px^2 minus a 60 degree opening
        let expected = PI * (70.0f64.powi(2) - 40.0f64.powi(2)) * (300.0 / 360.0) / 40000.0;
        assert!((frac - expected).abs() < 0.01, "{frac} vs {expected}");
        assert!(frac > 0.05 && frac < 0.35);
        assert_eq!(c.get(100, 100), 0.0);
        assert_eq!(c.get(99, 100), 0.0);
    }

    #[test]
    fn c_image_symmetries() {
        let east = generate_c_image::<f64>(96).unwrap();
        // symmetric about the horizontal axis
        for y in 0..96 {
            for x in 0..96 {
                assert!((east.get(y, x) - east.get(95 - y, x)).abs() < 1e-9);
            }
        }
        let west = CShape {
            opening_direction_deg: 180.0,
            ..Default::default()
        }
        .render::<f64>(96, false)
        .unwrap();
        for y in 0..96 {
            for x in 0..96 {
                assert!((east.get(y, 95 - x) - west.get(y, x)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cut_target_differs_only_in_the_cut_sector() {
        let n = 200;
        let shape = CShape::default();
        let c = shape.render::<f64>(n, false).unwrap();
        let t = shape.render::<f64>(n, true).unwrap();
        let center = (n as f64 - 1.0) / 2.0;
        let half_cut = shape.cut_deg.to_radians() / 2.0;
        for y in 0..n {
            for x in 0..n {
                if c.get(y, x) != t.get(y, x) {
                    let (dx, dy) = (x as f64 - center, y as f64 - center);
                    let from_cut = wrap_angle(dy.atan2(dx) - PI).abs();
                    assert!((from_cut - half_cut) * dx.hypot(dy) < 0.5);
                }
            }
        }
        assert!(foreground(&t) < foreground(&c));
        let no_cut = CShape { cut_deg: 0.0, ..shape }.render::<f64>(n, true).unwrap();
        assert_eq!(no_cut, c);
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(generate_c_image::<f64>(32).is_err());
    }

    #[test]
    fn elastic_identity_and_determinism() {
        let c = generate_c_image::<f64>(64).unwrap();
        let zero = ElasticDeformConfig {
            max_displacement: 0.0,
            ..Default::default()
        };
        assert_eq!(elastic_deform(&c, &zero).unwrap(), c);
        let cfg = ElasticDeformConfig {
            seed: 9,
            ..Default::default()
        };
        let a = elastic_deform(&c, &cfg).unwrap();
        assert_eq!(a, elastic_deform(&c, &cfg).unwrap());
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn elastic_rejects_bad_config() {
        let c = generate_c_image::<f64>(64).unwrap();
        for bad in [
            ElasticDeformConfig { spacing: 6, max_displacement: 1.0, seed: 0 },
            ElasticDeformConfig { spacing: 20, max_displacement: 10.0, seed: 0 },
        ] {
            assert!(matches!(elastic_deform(&c, &bad), Err(Error::Config(_))));
        }
    }
}
