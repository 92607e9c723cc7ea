//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! Forward values are computed eagerly with the kernels in [`crate::tensor`]
//! and kept on the tape; [`Tape::backward`] walks the nodes in reverse and
//! returns gradients for every node and every convolution parameter.

use crate::error::{Error, Result};
use crate::tensor::{
    conv, conv_backward, gelu_grad, interpolate_bilinear, interpolate_bilinear_backward,
    pixel_shuffle, pixel_unshuffle, Activation, Axis, ConvId, ConvParams, ElementwiseOp, Real,
    Shape3, Tensor3,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Input,
    Conv { x: Var, id: ConvId },
    Gap(Var),
    Act { x: Var, kind: Activation },
    Roll(Var),
    Interp(Var),
    Unshuffle { x: Var, r: usize },
    Shuffle { x: Var, r: usize },
    Combine { a: Var, b: Var, op: ElementwiseOp },
    Clamp { x: Var, lo: T, hi: T },
    Slice { x: Var, axis: Axis, start: usize },
    Concat { parts: Vec<Var>, axis: Axis },
    Sum(Var),
    L1 { pred: Var, target: Var },
}

struct Node<T> {
    value: Tensor3<T>,
    op: Op<T>,
}

pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: Vec<ConvParams<T>>,
    linearize: bool,
}

impl<T: Real> Tape<T> {
    pub fn new(params: Vec<ConvParams<T>>) -> Self {
        Tape {
            nodes: Vec::new(),
            params,
            linearize: false,
        }
    }

    /// Test mode: activations and clamps are recorded as identities.
    pub fn linearized(mut self) -> Self {
        self.linearize = true;
        self
    }

    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor3<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor3<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape3 {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor3<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn conv(&mut self, x: Var, id: ConvId) -> Result<Var> {
        let y = conv(self.value(x), &self.params[id.0])?;
        Ok(self.push(y, Op::Conv { x, id }))
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let y = self.value(x).gap();
        self.push(y, Op::Gap(x))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let kind = if self.linearize {
            Activation::Identity
        } else {
            kind
        };
        let y = self.value(x).activation(kind);
        self.push(y, Op::Act { x, kind })
    }

    pub fn permute_roll(&mut self, x: Var) -> Var {
        let y = self.value(x).permute_roll();
        self.push(y, Op::Roll(x))
    }

    pub fn interpolate(&mut self, x: Var, width: usize, height: usize) -> Var {
        let y = interpolate_bilinear(self.value(x), width, height);
        self.push(y, Op::Interp(x))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pixel_unshuffle(self.value(x), r)?;
        Ok(self.push(y, Op::Unshuffle { x, r }))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let y = pixel_shuffle(self.value(x), r)?;
        Ok(self.push(y, Op::Shuffle { x, r }))
    }

    pub fn combine(&mut self, a: Var, b: Var, op: ElementwiseOp) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.combine_assign(self.value(b), op)?;
        Ok(self.push(y, Op::Combine { a, b, op }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, ElementwiseOp::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.combine(a, b, ElementwiseOp::Mul)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        if self.linearize {
            let y = self.value(x).clone();
            return self.push(
                y,
                Op::Act {
                    x,
                    kind: Activation::Identity,
                },
            );
        }
        let y = self.value(x).clamp(lo, hi);
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn slice(&mut self, x: Var, axis: Axis, start: usize, len: usize) -> Var {
        let y = self.value(x).slice(axis, start, len);
        self.push(y, Op::Slice { x, axis, start })
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor3::concat(axis, &vals)?;
        Ok(self.push(
            y,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Sum of all elements as a `(1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor3::full(Shape3::new(1, 1, 1), s), Op::Sum(x))
    }

    /// Mean absolute error as a `(1, 1, 1)` tensor.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("l1_loss", p.shape(), t.shape()));
        }
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .sum();
        let v = T::lit(s / p.len() as f64);
        Ok(self.push(
            Tensor3::full(Shape3::new(1, 1, 1), v),
            Op::L1 { pred, target },
        ))
    }

    /// Propagates `seed` (the cotangent of `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor3<T>) -> Result<Gradients<T>> {
        if seed.shape() != self.shape(output) {
            return Err(Error::shape("backward seed", self.shape(output), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor3<T>>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<ConvParams<T>> = self.params.iter().map(|p| p.zeros_like()).collect();
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                // Leaf gradients are kept; intermediate ones are dropped once propagated.
                Op::Input => grads[i] = Some(g),
                Op::Conv { x, id } => {
                    let (dx, dp) = conv_backward(self.value(*x), &self.params[id.0], &g);
                    let acc = &mut pgrads[id.0];
                    acc.weight.iter_mut().zip(&dp.weight).for_each(|(a, &d)| *a = *a + d);
                    acc.bias.iter_mut().zip(&dp.bias).for_each(|(a, &d)| *a = *a + d);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gap(x) => {
                    let s = self.shape(*x);
                    let n = T::lit(s.plane() as f64);
                    let dx = Tensor3::from_fn(s, |c, _, _| g.data()[c] / n);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Act { x, kind } => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    match kind {
                        Activation::Identity => {}
                        Activation::Relu => zip_in_place(&mut dx, xv, |g, x| {
                            if x > T::zero() {
                                g
                            } else {
                                T::zero()
                            }
                        }),
                        Activation::Sigmoid => {
                            zip_in_place(&mut dx, &node.value, |g, y| g * y * (T::one() - y))
                        }
                        Activation::Gelu => zip_in_place(&mut dx, xv, |g, x| g * gelu_grad(x)),
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Roll(x) => accumulate(&mut grads, *x, g.permute_unroll()),
                Op::Interp(x) => {
                    let dx = interpolate_bilinear_backward(self.shape(*x), &g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Unshuffle { x, r } => accumulate(&mut grads, *x, pixel_shuffle(&g, *r)?),
                Op::Shuffle { x, r } => accumulate(&mut grads, *x, pixel_unshuffle(&g, *r)?),
                Op::Combine { a, b, op } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (da, db) = match op {
                        ElementwiseOp::Add => (g.clone(), g),
                        ElementwiseOp::Mul => {
                            let mut da = g.clone();
                            da.combine_assign(bv, ElementwiseOp::Mul)?;
                            let mut db = g;
                            db.combine_assign(av, ElementwiseOp::Mul)?;
                            (da, db)
                        }
                    };
                    let db = if bv.shape() == av.shape() {
                        db
                    } else {
                        // b was broadcast over space; reduce back to (C, 1, 1).
                        let data = (0..db.shape().c)
                            .map(|c| db.channel(c).iter().copied().sum())
                            .collect();
                        Tensor3::new(bv.shape(), data)?
                    };
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = g;
                    let (lo, hi) = (*lo, *hi);
                    zip_in_place(&mut dx, self.value(*x), |g, x| {
                        if x > lo && x < hi {
                            g
                        } else {
                            T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Slice { x, axis, start } => {
                    let mut dx = Tensor3::zeros(self.shape(*x));
                    dx.write_block(*axis, *start, &g, false);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.shape(p).dim(*axis);
                        accumulate(&mut grads, p, g.slice(*axis, offset, len));
                        offset += len;
                    }
                }
                Op::Sum(x) => {
                    let dx = Tensor3::full(self.shape(*x), g.data()[0]);
                    accumulate(&mut grads, *x, dx);
                }
                Op::L1 { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let scale = g.data()[0] / T::lit(p.len() as f64);
                    let mut dp = p.clone();
                    zip_in_place(&mut dp, t, |p, t| {
                        if p > t {
                            scale
                        } else if p < t {
                            -scale
                        } else {
                            T::zero()
                        }
                    });
                    let dt = dp.map(|v| -v);
                    accumulate(&mut grads, *pred, dp);
                    accumulate(&mut grads, *target, dt);
                }
            }
        }
        Ok(Gradients {
            nodes: grads,
            params: pgrads,
        })
    }
}

fn zip_in_place<T: Real>(dst: &mut Tensor3<T>, other: &Tensor3<T>, f: impl Fn(T, T) -> T) {
    dst.data_mut()
        .iter_mut()
        .zip(other.data())
        .for_each(|(d, &o)| *d = f(*d, o));
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor3<T>>], v: Var, g: Tensor3<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc
            .combine_assign(&g, ElementwiseOp::Add)
            .expect("gradient shape matches its value"),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T: Real = f32> {
    nodes: Vec<Option<Tensor3<T>>>,
    params: Vec<ConvParams<T>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to a recorded input. `None` if the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor3<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ConvId) -> &ConvParams<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<ConvParams<T>> {
        self.params
    }

    /// All parameter gradients flattened in parameter order (weights, then bias, per conv).
    pub fn flat(&self) -> Vec<T> {
        flatten(&self.params)
    }
}

pub fn flatten<T: Real>(params: &[ConvParams<T>]) -> Vec<T> {
    params
        .iter()
        .flat_map(|p| p.weight.iter().chain(&p.bias).copied())
        .collect()
}

/// Mutable access to the `index`-th scalar of a flattened parameter list.
pub fn flat_param_mut<T: Real>(params: &mut [ConvParams<T>], mut index: usize) -> &mut T {
    for p in params.iter_mut() {
        if index < p.weight.len() {
            return &mut p.weight[index];
        }
        index -= p.weight.len();
        if index < p.bias.len() {
            return &mut p.bias[index];
        }
        index -= p.bias.len();
    }
    panic!("parameter index out of range");
}

/// `|a − b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `f` at `params` for the
/// probed indices and returns the worst relative error.
pub fn finite_diff_check<T: Real>(
    params: &[T],
    analytic: &[T],
    h: T,
    probe: impl IntoIterator<Item = usize>,
    mut f: impl FnMut(&[T]) -> T,
) -> f64 {
    assert!(h > T::zero(), "finite-difference step must be positive");
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in probe {
        let orig = p[i];
        p[i] = orig + h;
        let fp = f(&p);
        p[i] = orig - h;
        let fm = f(&p);
        p[i] = orig;
        let fd = (fp - fm) / (h + h);
        worst = worst.max(relative_error(fd.as_f64(), analytic[i].as_f64()));
    }
    worst
}
