//! Spatial operators on pixel grids: finite-difference gradient and
//! divergence, separable Gaussian smoothing, and bilinear back-warping.
//!
//! The raw kernels here work on plain tensors; the differentiable versions
//! are exposed through [`Tape`](crate::tape::Tape). Grids use unit pixel
//! spacing, `x` runs along columns and `y` along rows, and vector fields are
//! stored as `[2, H, W]` with component 0 = x.

use crate::conv::valid_range;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Smallest grid side supported by the stencils.
pub const MIN_SIDE: usize = 3;

/// Scalar image on an `[H, W]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField<S = f64>(Tensor<S>);

/// Two-component vector field on a `[2, H, W]` grid, in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<S = f64>(Tensor<S>);

impl<S: Scalar> ScalarField<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        match *tensor.shape() {
            [h, w] if h >= MIN_SIDE && w >= MIN_SIDE => Ok(Self(tensor)),
            _ => Err(Error::Shape(format!(
                "scalar field must be [H,W] with H,W >= {MIN_SIDE}, got {:?}",
                tensor.shape()
            ))),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::from_fn(height, width, |_, _| S::zero())
    }

    /// Builds a field from `f(y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        assert!(height >= MIN_SIDE && width >= MIN_SIDE, "field too small");
        Self(Tensor::from_fn([height, width], |i| f(i[0], i[1])))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn get(&self, y: usize, x: usize) -> S {
        self.0.data()[y * self.width() + x]
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    pub fn data(&self) -> &[S] {
        self.0.data()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self(self.0.map(f))
    }
}

impl<S: Scalar> VectorField<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        match *tensor.shape() {
            [2, h, w] if h >= MIN_SIDE && w >= MIN_SIDE => Ok(Self(tensor)),
            _ => Err(Error::Shape(format!(
                "vector field must be [2,H,W] with H,W >= {MIN_SIDE}, got {:?}",
                tensor.shape()
            ))),
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros([2, height, width]))
    }

    /// Builds a field from `f(y, x) -> (v_x, v_y)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (S, S)) -> Self {
        assert!(height >= MIN_SIDE && width >= MIN_SIDE, "field too small");
        let mut t = Tensor::zeros([2, height, width]);
        for y in 0..height {
            for x in 0..width {
                let (vx, vy) = f(y, x);
                t.set(&[0, y, x], vx);
                t.set(&[1, y, x], vy);
            }
        }
        Self(t)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn component(&self, axis: usize) -> &[S] {
        self.0.channel(axis)
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// Partial derivative of `f` ([H,W]) along x, written into `out`.
fn diff_x<S: Scalar>(f: &[S], out: &mut [S], h: usize, w: usize) {
    let half = S::lit(0.5);
    for y in 0..h {
        let r = &f[y * w..(y + 1) * w];
        let o = &mut out[y * w..(y + 1) * w];
        o[0] = r[1] - r[0];
        for x in 1..w - 1 {
            o[x] = (r[x + 1] - r[x - 1]) * half;
        }
        o[w - 1] = r[w - 1] - r[w - 2];
    }
}

/// Transpose of [`diff_x`], accumulated into `out`.
fn diff_x_adjoint<S: Scalar>(g: &[S], out: &mut [S], h: usize, w: usize) {
    let half = S::lit(0.5);
    for y in 0..h {
        let r = &g[y * w..(y + 1) * w];
        let o = &mut out[y * w..(y + 1) * w];
        o[0] -= r[0];
        o[1] += r[0];
        for x in 1..w - 1 {
            o[x + 1] += r[x] * half;
            o[x - 1] -= r[x] * half;
        }
        o[w - 1] += r[w - 1];
        o[w - 2] -= r[w - 1];
    }
}

fn diff_y<S: Scalar>(f: &[S], out: &mut [S], h: usize, w: usize) {
    let half = S::lit(0.5);
    for x in 0..w {
        out[x] = f[w + x] - f[x];
        out[(h - 1) * w + x] = f[(h - 1) * w + x] - f[(h - 2) * w + x];
    }
    for y in 1..h - 1 {
        for x in 0..w {
            out[y * w + x] = (f[(y + 1) * w + x] - f[(y - 1) * w + x]) * half;
        }
    }
}

fn diff_y_adjoint<S: Scalar>(g: &[S], out: &mut [S], h: usize, w: usize) {
    let half = S::lit(0.5);
    for x in 0..w {
        out[x] -= g[x];
        out[w + x] += g[x];
        out[(h - 1) * w + x] += g[(h - 1) * w + x];
        out[(h - 2) * w + x] -= g[(h - 1) * w + x];
    }
    for y in 1..h - 1 {
        for x in 0..w {
            let v = g[y * w + x] * half;
            out[(y + 1) * w + x] += v;
            out[(y - 1) * w + x] -= v;
        }
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [h, w] if h >= MIN_SIDE && w >= MIN_SIDE => Ok((h, w)),
        _ => Err(Error::Shape(format!("{what} expects [H,W] (H,W >= 3), got {:?}", t.shape()))),
    }
}

fn dims_vec<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [2, h, w] if h >= MIN_SIDE && w >= MIN_SIDE => Ok((h, w)),
        _ => Err(Error::Shape(format!("{what} expects [2,H,W] (H,W >= 3), got {:?}", t.shape()))),
    }
}

/// Central differences in the interior, one-sided at the borders.
pub fn gradient_raw<S: Scalar>(f: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = dims2(f, "spatial_gradient")?;
    let mut out = vec![S::zero(); 2 * h * w];
    let (gx, gy) = out.split_at_mut(h * w);
    diff_x(f.data(), gx, h, w);
    diff_y(f.data(), gy, h, w);
    Tensor::new([2, h, w], out)
}

pub fn gradient_adjoint_raw<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let (_, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let mut out = vec![S::zero(); h * w];
    diff_x_adjoint(g.channel(0), &mut out, h, w);
    diff_y_adjoint(g.channel(1), &mut out, h, w);
    Tensor::new([h, w], out).expect("consistent shape")
}

/// `d_x w_x + d_y w_y` using the same stencils as [`gradient_raw`].
pub fn divergence_raw<S: Scalar>(field: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = dims_vec(field, "divergence")?;
    let mut out = vec![S::zero(); h * w];
    let mut tmp = vec![S::zero(); h * w];
    diff_x(field.channel(0), &mut out, h, w);
    diff_y(field.channel(1), &mut tmp, h, w);
    for (o, t) in out.iter_mut().zip(&tmp) {
        *o += *t;
    }
    Tensor::new([h, w], out)
}

pub fn divergence_adjoint_raw<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let (h, w) = (g.shape()[0], g.shape()[1]);
    let mut out = Tensor::zeros([2, h, w]);
    diff_x_adjoint(g.data(), out.channel_mut(0), h, w);
    diff_y_adjoint(g.data(), out.channel_mut(1), h, w);
    out
}

/// Normalized 1D Gaussian truncated at radius `ceil(3 sigma)`.
pub fn gaussian_kernel<S: Scalar>(sigma: f64) -> Result<Vec<S>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!("gaussian sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|v| S::lit(v / total)).collect())
}

/// Separable zero-padded smoothing of every leading-axis slice of a
/// `[C, H, W]` tensor. Self-adjoint for symmetric kernels.
pub fn smooth_raw<S: Scalar>(field: &Tensor<S>, kernel: &[S]) -> Result<Tensor<S>> {
    let [c, h, w] = *field.shape() else {
        return Err(Error::Shape(format!(
            "gaussian_smooth expects [C,H,W], got {:?}",
            field.shape()
        )));
    };
    let r = (kernel.len() / 2) as isize;
    let plane = h * w;
    let mut out = vec![S::zero(); c * plane];
    let mut tmp = vec![S::zero(); plane];
    for ch in 0..c {
        let src = field.channel(ch);
        tmp.fill(S::zero());
        for y in 0..h {
            let in_row = &src[y * w..(y + 1) * w];
            let t_row = &mut tmp[y * w..(y + 1) * w];
            for (i, &kw) in kernel.iter().enumerate() {
                let off = i as isize - r;
                let (x0, x1) = valid_range(w, off);
                let s0 = (x0 as isize + off) as usize;
                for (d, &s) in t_row[x0..x1].iter_mut().zip(&in_row[s0..s0 + (x1 - x0)]) {
                    *d += kw * s;
                }
            }
        }
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for y in 0..h {
            let o_row = &mut dst[y * w..(y + 1) * w];
            for (i, &kw) in kernel.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let t_row = &tmp[sy as usize * w..(sy as usize + 1) * w];
                for (d, &s) in o_row.iter_mut().zip(t_row) {
                    *d += kw * s;
                }
            }
        }
    }
    Tensor::new([c, h, w], out)
}

/// Bilinear sample location for one pixel: base indices, fractional parts,
/// and whether each coordinate stayed inside the domain (derivative passes).
#[derive(Clone, Copy)]
struct Sample<S> {
    x0: usize,
    y0: usize,
    fx: S,
    fy: S,
    inside_x: bool,
    inside_y: bool,
}

#[inline]
fn locate<S: Scalar>(p: S, n: usize) -> (usize, S, bool) {
    let max = S::lit((n - 1) as f64);
    let inside = p >= S::zero() && p <= max;
    let c = p.max(S::zero()).min(max);
    let mut i0 = c.floor().to_usize().unwrap_or(0);
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    (i0, c - S::lit(i0 as f64), inside)
}

#[inline]
fn sample_at<S: Scalar>(d: &Tensor<S>, y: usize, x: usize, h: usize, w: usize) -> Sample<S> {
    let i = y * w + x;
    let px = S::lit(x as f64) - d.channel(0)[i];
    let py = S::lit(y as f64) - d.channel(1)[i];
    let (x0, fx, inside_x) = locate(px, w);
    let (y0, fy, inside_y) = locate(py, h);
    Sample { x0, y0, fx, fy, inside_x, inside_y }
}

/// `out(x) = f(x - d(x))`, bilinear, coordinates clamped to the border.
pub fn warp_raw<S: Scalar>(f: &Tensor<S>, d: &Tensor<S>) -> Result<Tensor<S>> {
    let (h, w) = dims2(f, "warp")?;
    let dd = dims_vec(d, "warp displacement")?;
    if dd != (h, w) {
        return Err(Error::Shape(format!(
            "warp: image {:?} vs displacement {:?}",
            f.shape(),
            d.shape()
        )));
    }
    let src = f.data();
    let one = S::one();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let s = sample_at(d, y, x, h, w);
            let i00 = s.y0 * w + s.x0;
            let top = (one - s.fx) * src[i00] + s.fx * src[i00 + 1];
            let bottom = (one - s.fx) * src[i00 + w] + s.fx * src[i00 + w + 1];
            out.push((one - s.fy) * top + s.fy * bottom);
        }
    }
    Tensor::new([h, w], out)
}

/// Gradients of `warp_raw` with respect to the image and the displacement.
pub fn warp_backward_raw<S: Scalar>(
    f: &Tensor<S>,
    d: &Tensor<S>,
    grad_out: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (h, w) = (f.shape()[0], f.shape()[1]);
    let src = f.data();
    let g = grad_out.data();
    let one = S::one();
    let mut gf = vec![S::zero(); h * w];
    let mut gd = Tensor::zeros([2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let go = g[i];
            if go == S::zero() {
                continue;
            }
            let s = sample_at(d, y, x, h, w);
            let i00 = s.y0 * w + s.x0;
            let (f00, f01, f10, f11) = (src[i00], src[i00 + 1], src[i00 + w], src[i00 + w + 1]);
            gf[i00] += go * (one - s.fx) * (one - s.fy);
            gf[i00 + 1] += go * s.fx * (one - s.fy);
            gf[i00 + w] += go * (one - s.fx) * s.fy;
            gf[i00 + w + 1] += go * s.fx * s.fy;
            // sample point is x - d, hence the negated derivatives
            if s.inside_x {
                let dpx = (one - s.fy) * (f01 - f00) + s.fy * (f11 - f10);
                gd.channel_mut(0)[i] = -go * dpx;
            }
            if s.inside_y {
                let dpy = (one - s.fx) * (f10 - f00) + s.fx * (f11 - f01);
                gd.channel_mut(1)[i] = -go * dpy;
            }
        }
    }
    (Tensor::new([h, w], gf).expect("consistent shape"), gd)
}

/// Gradient of a scalar field.
pub fn spatial_gradient<S: Scalar>(f: &ScalarField<S>) -> VectorField<S> {
    VectorField(gradient_raw(&f.0).expect("validated field"))
}

pub fn divergence<S: Scalar>(field: &VectorField<S>) -> ScalarField<S> {
    ScalarField(divergence_raw(&field.0).expect("validated field"))
}

/// Componentwise Gaussian smoothing of a vector field.
pub fn gaussian_smooth<S: Scalar>(field: &VectorField<S>, sigma: f64) -> Result<VectorField<S>> {
    let kernel = gaussian_kernel(sigma)?;
    Ok(VectorField(smooth_raw(&field.0, &kernel)?))
}

/// Back-warps `f` by a pixel displacement field.
pub fn warp<S: Scalar>(f: &ScalarField<S>, displacement: &VectorField<S>) -> Result<ScalarField<S>> {
    Ok(ScalarField(warp_raw(&f.0, &displacement.0)?))
}
