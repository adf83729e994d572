//! Reverse-mode differentiation over an explicit, single-use tape.
//!
//! A [`Tape`] records every operation whose inputs require gradients. Each
//! record keeps the forward values its backward rule needs. Calling
//! [`Tape::backward`] consumes the tape and returns the gradients of every
//! tracked leaf. A tape built with [`Tape::no_grad`] evaluates the same
//! operations without recording anything.

use std::cell::RefCell;
use std::rc::Rc;

use crate::conv;
use crate::error::{Error, Result};
use crate::image_ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value computed on a tape. Cheap to clone.
#[derive(Clone, Debug)]
pub struct Var<S: Scalar = f64> {
    id: Option<usize>,
    value: Rc<Tensor<S>>,
}

impl<S: Scalar> Var<S> {
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    /// Whether gradients flow back through this value.
    pub fn requires_grad(&self) -> bool {
        self.id.is_some()
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> S {
        self.value.item().expect("scalar variable")
    }

    fn input(&self) -> Input<S> {
        Input {
            id: self.id,
            value: Rc::clone(&self.value),
        }
    }
}

#[derive(Debug)]
struct Input<S> {
    id: Option<usize>,
    value: Rc<Tensor<S>>,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul(Input<S>, Input<S>),
    Scale(usize, S),
    SumAll(usize, Vec<usize>),
    SumSquares(Input<S>),
    Conv2d {
        input: Input<S>,
        kernel: Input<S>,
        bias: Option<usize>,
        padding: usize,
    },
    LeakyRelu {
        input: usize,
        output: Rc<Tensor<S>>,
        slope: S,
    },
    Clamp {
        input: Input<S>,
        lo: S,
        hi: S,
    },
    Stack(Vec<Option<usize>>),
    Select {
        input: usize,
        index: usize,
        shape: Vec<usize>,
    },
    Reshape(usize, Vec<usize>),
    Gradient(usize),
    Divergence(usize),
    Smooth(usize, Rc<Vec<S>>),
    Warp {
        image: Input<S>,
        displacement: Input<S>,
    },
}

/// Ordered record of executed operations.
#[derive(Debug)]
pub struct Tape<S: Scalar = f64> {
    nodes: RefCell<Vec<Op<S>>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug)]
pub struct Gradients<S: Scalar = f64> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `d(loss)/d(var)`, absent when `var` was not tracked or did not reach
    /// the loss.
    pub fn get(&self, var: &Var<S>) -> Option<&Tensor<S>> {
        var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<S>) -> Option<Tensor<S>> {
        var.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take)
    }
}

fn any_tracked(ids: &[Option<usize>]) -> bool {
    ids.iter().any(Option::is_some)
}

impl<S: Scalar> Tape<S> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that evaluates operations without recording them.
    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Number of recorded operations (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every record. Variables created before the call stay readable
    /// but no longer propagate gradients on this tape.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(&self, value: Tensor<S>, op: impl FnOnce() -> Op<S>, tracked: bool) -> Var<S> {
        let id = if self.recording && tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(op());
            Some(nodes.len() - 1)
        } else {
            None
        };
        Var {
            id,
            value: Rc::new(value),
        }
    }

    /// A leaf variable; gradients are reported for it when `requires_grad`.
    pub fn leaf(&self, value: Tensor<S>, requires_grad: bool) -> Var<S> {
        self.push(value, || Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor<S>) -> Var<S> {
        self.leaf(value, false)
    }

    pub fn add(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let value = a.value.zip_map(&b.value, |x, y| x + y)?;
        Ok(self.push(value, || Op::Add(a.id, b.id), any_tracked(&[a.id, b.id])))
    }

    pub fn sub(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let value = a.value.zip_map(&b.value, |x, y| x - y)?;
        Ok(self.push(value, || Op::Sub(a.id, b.id), any_tracked(&[a.id, b.id])))
    }

    pub fn mul(&self, a: &Var<S>, b: &Var<S>) -> Result<Var<S>> {
        let value = a.value.zip_map(&b.value, |x, y| x * y)?;
        Ok(self.push(
            value,
            || Op::Mul(a.input(), b.input()),
            any_tracked(&[a.id, b.id]),
        ))
    }

    pub fn scale(&self, a: &Var<S>, s: S) -> Var<S> {
        let value = a.value.map(|x| x * s);
        self.push(value, || Op::Scale(a.id.unwrap_or(0), s), a.id.is_some())
    }

    pub fn sum_all(&self, a: &Var<S>) -> Var<S> {
        let value = Tensor::scalar(a.value.sum());
        self.push(
            value,
            || Op::SumAll(a.id.unwrap_or(0), a.shape().to_vec()),
            a.id.is_some(),
        )
    }

    pub fn sum_squares(&self, a: &Var<S>) -> Var<S> {
        let value = Tensor::scalar(a.value.sum_squares());
        self.push(value, || Op::SumSquares(a.input()), a.id.is_some())
    }

    /// Zero-padded "same" cross-correlation with an optional per-channel bias.
    pub fn conv2d(
        &self,
        input: &Var<S>,
        kernel: &Var<S>,
        bias: Option<&Var<S>>,
        padding: usize,
    ) -> Result<Var<S>> {
        let value = conv::forward(&input.value, &kernel.value, bias.map(|b| b.value()), padding)?;
        let bias_id = bias.and_then(|b| b.id);
        Ok(self.push(
            value,
            || Op::Conv2d {
                input: input.input(),
                kernel: kernel.input(),
                bias: bias_id,
                padding,
            },
            any_tracked(&[input.id, kernel.id, bias_id]),
        ))
    }

    /// `x` for `x >= 0`, `slope * x` otherwise. The kink takes the positive
    /// branch.
    pub fn leaky_relu(&self, input: &Var<S>, slope: S) -> Result<Var<S>> {
        if !(slope > S::zero() && slope < S::one()) {
            return Err(Error::Config(format!(
                "leaky relu slope must lie in (0,1), got {slope}"
            )));
        }
        let value = Rc::new(input.value.map(|x| if x >= S::zero() { x } else { slope * x }));
        let id = if self.recording && input.id.is_some() {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Op::LeakyRelu {
                input: input.id.unwrap(),
                output: Rc::clone(&value),
                slope,
            });
            Some(nodes.len() - 1)
        } else {
            None
        };
        Ok(Var { id, value })
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes where the input was
    /// inside the interval.
    pub fn clamp(&self, input: &Var<S>, lo: S, hi: S) -> Var<S> {
        let value = input.value.map(|x| x.max(lo).min(hi));
        self.push(value, || Op::Clamp { input: input.input(), lo, hi }, input.id.is_some())
    }

    /// Stacks equally shaped variables along a new leading axis.
    pub fn stack(&self, parts: &[&Var<S>]) -> Result<Var<S>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.value.len() * parts.len());
        for p in parts {
            first.value.expect_same_shape(&p.value)?;
            data.extend_from_slice(p.value.data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(first.shape());
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        let tracked = any_tracked(&ids);
        Ok(self.push(Tensor::new(shape, data)?, || Op::Stack(ids), tracked))
    }

    /// Slice `index` along the leading axis.
    pub fn select(&self, input: &Var<S>, index: usize) -> Result<Var<S>> {
        let shape = input.shape();
        if shape.is_empty() || index >= shape[0] {
            return Err(Error::Shape(format!("select {index} from {shape:?}")));
        }
        let value = Tensor::new(&shape[1..], input.value.channel(index).to_vec())?;
        Ok(self.push(
            value,
            || Op::Select {
                input: input.id.unwrap_or(0),
                index,
                shape: shape.to_vec(),
            },
            input.id.is_some(),
        ))
    }

    pub fn reshape(&self, input: &Var<S>, shape: &[usize]) -> Result<Var<S>> {
        let value = (*input.value).clone().reshape(shape.to_vec())?;
        Ok(self.push(
            value,
            || Op::Reshape(input.id.unwrap_or(0), input.shape().to_vec()),
            input.id.is_some(),
        ))
    }

    /// Spatial gradient `[H,W] -> [2,H,W]`.
    pub fn spatial_gradient(&self, f: &Var<S>) -> Result<Var<S>> {
        let value = image_ops::gradient_raw(&f.value)?;
        Ok(self.push(value, || Op::Gradient(f.id.unwrap_or(0)), f.id.is_some()))
    }

    /// Divergence `[2,H,W] -> [H,W]`.
    pub fn divergence(&self, w: &Var<S>) -> Result<Var<S>> {
        let value = image_ops::divergence_raw(&w.value)?;
        Ok(self.push(value, || Op::Divergence(w.id.unwrap_or(0)), w.id.is_some()))
    }

    /// Separable Gaussian smoothing of each component of a `[C,H,W]` field.
    pub fn gaussian_smooth(&self, w: &Var<S>, sigma: f64) -> Result<Var<S>> {
        let kernel = Rc::new(image_ops::gaussian_kernel::<S>(sigma)?);
        self.smooth_with(w, kernel)
    }

    pub(crate) fn smooth_with(&self, w: &Var<S>, kernel: Rc<Vec<S>>) -> Result<Var<S>> {
        let value = image_ops::smooth_raw(&w.value, &kernel)?;
        Ok(self.push(value, || Op::Smooth(w.id.unwrap_or(0), kernel), w.id.is_some()))
    }

    /// Bilinear back-warp `out(x) = f(x - d(x))` with border clamping.
    pub fn warp(&self, image: &Var<S>, displacement: &Var<S>) -> Result<Var<S>> {
        let value = image_ops::warp_raw(&image.value, &displacement.value)?;
        Ok(self.push(
            value,
            || Op::Warp {
                image: image.input(),
                displacement: displacement.input(),
            },
            any_tracked(&[image.id, displacement.id]),
        ))
    }

    /// Back-propagates from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: &Var<S>) -> Result<Gradients<S>> {
        if loss.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.into_inner();
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        let Some(root) = loss.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(Tensor::full(loss.shape().to_vec(), S::one()));

        for id in (0..=root).rev() {
            if matches!(nodes[id], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes[id], g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], id: Option<usize>, g: Tensor<S>) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(existing) => existing.axpy(S::one(), &g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<S: Scalar>(op: &Op<S>, g: Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, g.clone());
            }
            accumulate(grads, *a, g);
        }
        Op::Sub(a, b) => {
            if b.is_some() {
                accumulate(grads, *b, g.map(|x| -x));
            }
            accumulate(grads, *a, g);
        }
        Op::Mul(a, b) => {
            if a.id.is_some() {
                accumulate(grads, a.id, g.zip_map(&b.value, |x, y| x * y).unwrap());
            }
            if b.id.is_some() {
                accumulate(grads, b.id, g.zip_map(&a.value, |x, y| x * y).unwrap());
            }
        }
        Op::Scale(a, s) => accumulate(grads, Some(*a), g.map(|x| x * *s)),
        Op::SumAll(a, shape) => {
            let gs = g.data()[0];
            accumulate(grads, Some(*a), Tensor::full(shape.clone(), gs));
        }
        Op::SumSquares(a) => {
            let two_g = S::lit(2.0) * g.data()[0];
            accumulate(grads, a.id, a.value.map(|x| two_g * x));
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
            padding,
        } => {
            if bias.is_some() {
                accumulate(grads, *bias, conv::backward_bias(&g));
            }
            if kernel.id.is_some() {
                let k = kernel.value.shape()[2];
                accumulate(grads, kernel.id, conv::backward_kernel(&g, &input.value, k, *padding));
            }
            if input.id.is_some() {
                accumulate(grads, input.id, conv::backward_input(&g, &kernel.value, *padding));
            }
        }
        Op::LeakyRelu {
            input,
            output,
            slope,
        } => {
            let gi = g
                .zip_map(output, |gx, y| if y >= S::zero() { gx } else { gx * *slope })
                .unwrap();
            accumulate(grads, Some(*input), gi);
        }
        Op::Clamp { input, lo, hi } => {
            let gi = g
                .zip_map(&input.value, |gx, x| if x >= *lo && x <= *hi { gx } else { S::zero() })
                .unwrap();
            accumulate(grads, input.id, gi);
        }
        Op::Stack(ids) => {
            let part_shape = g.shape()[1..].to_vec();
            for (i, id) in ids.iter().enumerate() {
                if id.is_some() {
                    let part = Tensor::new(part_shape.clone(), g.channel(i).to_vec()).unwrap();
                    accumulate(grads, *id, part);
                }
            }
        }
        Op::Select {
            input,
            index,
            shape,
        } => {
            let mut gi = Tensor::zeros(shape.clone());
            gi.channel_mut(*index).copy_from_slice(g.data());
            accumulate(grads, Some(*input), gi);
        }
        Op::Reshape(input, shape) => {
            accumulate(grads, Some(*input), g.reshape(shape.clone()).unwrap());
        }
        Op::Gradient(f) => accumulate(grads, Some(*f), image_ops::gradient_adjoint_raw(&g)),
        Op::Divergence(w) => accumulate(grads, Some(*w), image_ops::divergence_adjoint_raw(&g)),
        Op::Smooth(w, kernel) => {
            let gi = image_ops::smooth_raw(&g, kernel).unwrap();
            accumulate(grads, Some(*w), gi);
        }
        Op::Warp {
            image,
            displacement,
        } => {
            let (gf, gd) = image_ops::warp_backward_raw(&image.value, &displacement.value, &g);
            accumulate(grads, image.id, gf);
            accumulate(grads, displacement.id, gd);
        }
    }
}
