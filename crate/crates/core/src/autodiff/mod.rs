//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Values are computed eagerly as ops are recorded. `Tape::backward` builds
//! the gradient *as more tape ops*, so a gradient is itself differentiable:
//! calling `backward` on a scalar function of a gradient yields exact
//! second-order derivatives. The discriminator gradient penalty relies on
//! this to backpropagate through its own input-gradient norm.
//!
//! The op set is deliberately small and closed under differentiation. In
//! particular `{conv2d, conv_transpose2d, conv_weight_grad}` map into each
//! other, and the padding/concat ops come in adjoint pairs.
//!
//! Parameters live outside the tape (see [`crate::nn::WeightSet`]); a
//! training step registers them as leaves, runs forward, differentiates,
//! applies the update, and drops the tape.

pub mod conv;

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

/// Scalar element: f32 for training, f64 for high-precision gradient checks.
pub trait Elem:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Shorthand conversion from f64 literals.
    fn c(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite literal")
    }
}

impl Elem for f32 {}
impl Elem for f64 {}

#[derive(Debug, Clone)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, E),
    AddScalar(usize, E),
    Recip(usize),
    Sqrt(usize),
    Abs(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    LeakyRelu(usize, E),
    ClampMin(usize, E),
    Sum(usize),
    Broadcast(usize),
    SpatialMean(usize),
    BroadcastSpatial(usize),
    ChannelSum(usize),
    BroadcastChannel(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    ConcatChannels(usize, usize),
    SliceChannels { x: usize, start: usize, len: usize },
    PadChannels { x: usize, before: usize },
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvTranspose2d { z: usize, w: usize, stride: usize, pad: usize },
    ConvWeightGrad { x: usize, g: usize, stride: usize, pad: usize },
    ReflectPad { x: usize, pad: usize },
    ReflectPadAdjoint { z: usize, pad: usize },
}

impl<E> Op<E> {
    fn parents(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) | ConcatChannels(a, b) => {
                [Some(a), Some(b)]
            }
            Neg(a) | Scale(a, _) | AddScalar(a, _) | Recip(a) | Sqrt(a) | Abs(a) | Tanh(a)
            | Sigmoid(a) | Softplus(a) | LeakyRelu(a, _) | ClampMin(a, _) | Sum(a)
            | Broadcast(a) | SpatialMean(a) | BroadcastSpatial(a) | ChannelSum(a)
            | BroadcastChannel(a) | Transpose(a) | Reshape(a) => [Some(a), None],
            SliceChannels { x, .. } | PadChannels { x, .. } | ReflectPad { x, .. } => {
                [Some(x), None]
            }
            ReflectPadAdjoint { z, .. } => [Some(z), None],
            Conv2d { x, w, .. } => [Some(x), Some(w)],
            ConvTranspose2d { z, w, .. } => [Some(z), Some(w)],
            ConvWeightGrad { x, g, .. } => [Some(x), Some(g)],
        }
    }
}

struct Node<E> {
    value: ArrayD<E>,
    op: Op<E>,
}

/// Append-only computation record. Create one per training step.
pub struct Tape<E: Elem> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle into a [`Tape`]; cheap to copy.
pub struct Tensor<'t, E: Elem> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Elem> std::fmt::Debug for Tensor<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl<E: Elem> Clone for Tensor<'_, E> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<E: Elem> Copy for Tensor<'_, E> {}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<E>, op: Op<E>) -> Tensor<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Tensor { tape: self, id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: ArrayD<E>) -> Tensor<'_, E> {
        self.push(value.as_standard_layout().into_owned(), Op::Leaf)
    }

    pub fn leaf_scalar(&self, v: E) -> Tensor<'_, E> {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Leaf)
    }

    fn value_of(&self, id: usize) -> ArrayD<E> {
        self.nodes.borrow()[id].value.clone()
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn unary(&self, a: usize, op: Op<E>, f: impl FnOnce(&ArrayD<E>) -> ArrayD<E>) -> Tensor<'_, E> {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value)
        };
        self.push(v, op)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op<E>,
        f: impl FnOnce(&ArrayD<E>, &ArrayD<E>) -> ArrayD<E>,
    ) -> Tensor<'_, E> {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(v, op)
    }

    /// Gradient of scalar `loss` with respect to each tensor in `wrt`.
    ///
    /// Gradients are recorded on the same tape; differentiate them again for
    /// higher-order derivatives. Entries with no path to the loss are `None`.
    pub fn backward<'t>(
        &'t self,
        loss: Tensor<'t, E>,
        wrt: &[Tensor<'t, E>],
    ) -> Vec<Option<Tensor<'t, E>>> {
        assert!(
            self.nodes.borrow()[loss.id].value.len() == 1,
            "backward requires a scalar loss"
        );
        let n = loss.id + 1;
        let mut requires = vec![false; n];
        for t in wrt {
            if t.id < n {
                requires[t.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for (id, req) in requires.iter_mut().enumerate().take(n) {
                if *req {
                    continue;
                }
                let _ = id;
            }
            // propagate: a node requires grad if any parent does
            for id in 0..n {
                if requires[id] {
                    continue;
                }
                let ps = nodes[id].op.parents();
                if ps.iter().flatten().any(|&p| requires[p]) {
                    requires[id] = true;
                }
            }
        }
        if !requires[loss.id] {
            return wrt.iter().map(|_| None).collect();
        }

        let mut grads: Vec<Option<Tensor<'t, E>>> = vec![None; n];
        let seed_shape = self.shape_of(loss.id);
        grads[loss.id] = Some(self.leaf(ArrayD::ones(IxDyn(&seed_shape))));

        for id in (0..n).rev() {
            if !requires[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            let out = Tensor { tape: self, id };
            let acc = |grads: &mut Vec<Option<Tensor<'t, E>>>, target: usize, t: Tensor<'t, E>| {
                if !requires[target] {
                    return;
                }
                grads[target] = Some(match grads[target] {
                    None => t,
                    Some(old) => old.add(t),
                });
            };
            use Op::*;
            match op {
                Leaf => {}
                Add(a, b) => {
                    acc(&mut grads, a, g);
                    acc(&mut grads, b, g);
                }
                Sub(a, b) => {
                    acc(&mut grads, a, g);
                    acc(&mut grads, b, g.neg());
                }
                Mul(a, b) => {
                    let (ta, tb) = (Tensor { tape: self, id: a }, Tensor { tape: self, id: b });
                    acc(&mut grads, a, g.mul(tb));
                    acc(&mut grads, b, g.mul(ta));
                }
                Neg(a) => acc(&mut grads, a, g.neg()),
                Scale(a, c) => acc(&mut grads, a, g.scale(c)),
                AddScalar(a, _) => acc(&mut grads, a, g),
                Recip(a) => {
                    // d(1/x) = -y^2 dx
                    acc(&mut grads, a, g.mul(out.mul(out)).neg());
                }
                Sqrt(a) => {
                    // d(sqrt x) = dx / (2 y)
                    acc(&mut grads, a, g.mul(out.recip().scale(E::c(0.5))));
                }
                Abs(a) => {
                    let mask = self.unary(a, Op::Leaf, |x| {
                        x.mapv(|v| {
                            if v > E::zero() {
                                E::one()
                            } else if v < E::zero() {
                                -E::one()
                            } else {
                                E::zero()
                            }
                        })
                    });
                    acc(&mut grads, a, g.mul(mask));
                }
                Tanh(a) => {
                    let one_minus_sq = out.mul(out).neg().add_scalar(E::one());
                    acc(&mut grads, a, g.mul(one_minus_sq));
                }
                Sigmoid(a) => {
                    let ds = out.mul(out.neg().add_scalar(E::one()));
                    acc(&mut grads, a, g.mul(ds));
                }
                Softplus(a) => {
                    let ta = Tensor { tape: self, id: a };
                    acc(&mut grads, a, g.mul(ta.sigmoid()));
                }
                LeakyRelu(a, slope) => {
                    let mask = self.unary(a, Op::Leaf, |x| {
                        x.mapv(|v| if v >= E::zero() { E::one() } else { slope })
                    });
                    acc(&mut grads, a, g.mul(mask));
                }
                ClampMin(a, c) => {
                    let mask = self.unary(a, Op::Leaf, |x| {
                        x.mapv(|v| if v >= c { E::one() } else { E::zero() })
                    });
                    acc(&mut grads, a, g.mul(mask));
                }
                Sum(a) => {
                    let shape = self.shape_of(a);
                    acc(&mut grads, a, g.broadcast_to(&shape));
                }
                Broadcast(a) => acc(&mut grads, a, g.sum()),
                SpatialMean(a) => {
                    let shape = self.shape_of(a);
                    let (h, w) = (shape[2], shape[3]);
                    let scale = E::one() / E::c((h * w) as f64);
                    acc(&mut grads, a, g.broadcast_spatial(h, w).scale(scale));
                }
                BroadcastSpatial(a) => {
                    let shape = self.shape_of(id);
                    let hw = E::c((shape[2] * shape[3]) as f64);
                    acc(&mut grads, a, g.spatial_mean().scale(hw));
                }
                ChannelSum(a) => {
                    let shape = self.shape_of(a);
                    acc(&mut grads, a, g.broadcast_channel(shape[0], shape[2], shape[3]));
                }
                BroadcastChannel(a) => acc(&mut grads, a, g.channel_sum()),
                MatMul(a, b) => {
                    let (ta, tb) = (Tensor { tape: self, id: a }, Tensor { tape: self, id: b });
                    acc(&mut grads, a, g.matmul(tb.transpose()));
                    acc(&mut grads, b, ta.transpose().matmul(g));
                }
                Transpose(a) => acc(&mut grads, a, g.transpose()),
                Reshape(a) => {
                    let shape = self.shape_of(a);
                    acc(&mut grads, a, g.reshape(&shape));
                }
                ConcatChannels(a, b) => {
                    let ca = self.shape_of(a)[1];
                    let cb = self.shape_of(b)[1];
                    acc(&mut grads, a, g.slice_channels(0, ca));
                    acc(&mut grads, b, g.slice_channels(ca, cb));
                }
                SliceChannels { x, start, len } => {
                    let total = self.shape_of(x)[1];
                    acc(&mut grads, x, g.pad_channels(start, total - start - len));
                }
                PadChannels { x, before } => {
                    let len = self.shape_of(x)[1];
                    acc(&mut grads, x, g.slice_channels(before, len));
                }
                Conv2d { x, w, stride, pad } => {
                    let (tx, tw) = (Tensor { tape: self, id: x }, Tensor { tape: self, id: w });
                    let xs = self.shape_of(x);
                    let ws = self.shape_of(w);
                    acc(&mut grads, x, g.conv_transpose2d(tw, stride, pad, (xs[2], xs[3])));
                    acc(&mut grads, w, conv_weight_grad_t(tx, g, stride, pad, ws[2], ws[3]));
                }
                ConvTranspose2d { z, w, stride, pad } => {
                    let (tz, tw) = (Tensor { tape: self, id: z }, Tensor { tape: self, id: w });
                    let ws = self.shape_of(w);
                    acc(&mut grads, z, g.conv2d(tw, stride, pad));
                    // dw[o,c,u,v] contracts z (as the "output" role) with the
                    // upstream gradient (as the "input" role)
                    acc(&mut grads, w, conv_weight_grad_t(g, tz, stride, pad, ws[2], ws[3]));
                }
                ConvWeightGrad { x, g: gi, stride, pad } => {
                    let (tx, tg) = (Tensor { tape: self, id: x }, Tensor { tape: self, id: gi });
                    let xs = self.shape_of(x);
                    acc(&mut grads, x, tg.conv_transpose2d(g, stride, pad, (xs[2], xs[3])));
                    acc(&mut grads, gi, tx.conv2d(g, stride, pad));
                }
                ReflectPad { x, pad } => {
                    let xs = self.shape_of(x);
                    acc(&mut grads, x, g.reflect_pad_adjoint(pad, (xs[2], xs[3])));
                }
                ReflectPadAdjoint { z, pad } => {
                    acc(&mut grads, z, g.reflect_pad(pad));
                }
            }
        }
        wrt.iter().map(|t| if t.id < n { grads[t.id] } else { None }).collect()
    }
}

/// `dw`-style contraction as a first-class differentiable op.
///
/// The kernel size must be passed explicitly: strided convolutions with
/// floor division map several kernel sizes onto the same output size, so it
/// cannot be recovered from the geometry.
fn conv_weight_grad_t<'t, E: Elem>(
    x: Tensor<'t, E>,
    g: Tensor<'t, E>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Tensor<'t, E> {
    let tape = x.tape;
    tape.binary(
        x.id,
        g.id,
        Op::ConvWeightGrad { x: x.id, g: g.id, stride, pad },
        |xv, gv| conv::conv_weight_grad(xv, gv, stride, pad, kh, kw),
    )
}

impl<'t, E: Elem> Tensor<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn value(&self) -> ArrayD<E> {
        self.tape.value_of(self.id)
    }

    /// Extract a scalar (panics unless the tensor has exactly one element).
    pub fn scalar(&self) -> E {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn add(self, o: Tensor<'t, E>) -> Tensor<'t, E> {
        self.tape.binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| a + b)
    }

    pub fn sub(self, o: Tensor<'t, E>) -> Tensor<'t, E> {
        self.tape.binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| a - b)
    }

    pub fn mul(self, o: Tensor<'t, E>) -> Tensor<'t, E> {
        self.tape.binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| a * b)
    }

    pub fn neg(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| a.mapv(|v| -v))
    }

    pub fn scale(self, c: E) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Scale(self.id, c), |a| a.mapv(|v| v * c))
    }

    pub fn add_scalar(self, c: E) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::AddScalar(self.id, c), |a| a.mapv(|v| v + c))
    }

    pub fn recip(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Recip(self.id), |a| a.mapv(|v| E::one() / v))
    }

    pub fn sqrt(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Sqrt(self.id), |a| a.mapv(|v| v.sqrt()))
    }

    pub fn abs(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Abs(self.id), |a| a.mapv(|v| v.abs()))
    }

    pub fn tanh(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Tanh(self.id), |a| a.mapv(|v| v.tanh()))
    }

    pub fn sigmoid(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), |a| {
            a.mapv(|v| E::one() / (E::one() + (-v).exp()))
        })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Softplus(self.id), |a| {
            a.mapv(|v| {
                let vmax = if v > E::zero() { v } else { E::zero() };
                vmax + (E::one() + (-v.abs()).exp()).ln() - E::zero()
            })
        })
    }

    pub fn leaky_relu(self, slope: E) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::LeakyRelu(self.id, slope), |a| {
            a.mapv(|v| if v >= E::zero() { v } else { v * slope })
        })
    }

    pub fn relu(self) -> Tensor<'t, E> {
        self.leaky_relu(E::zero())
    }

    pub fn clamp_min(self, c: E) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::ClampMin(self.id, c), |a| {
            a.mapv(|v| if v >= c { v } else { c })
        })
    }

    /// Reduce to a 0-d scalar by summation.
    pub fn sum(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Sum(self.id), |a| {
            ArrayD::from_elem(IxDyn(&[]), a.iter().fold(E::zero(), |acc, &v| acc + v))
        })
    }

    pub fn mean(self) -> Tensor<'t, E> {
        let n = self.value().len();
        self.sum().scale(E::one() / E::c(n as f64))
    }

    /// Broadcast a scalar to an arbitrary shape.
    pub fn broadcast_to(self, shape: &[usize]) -> Tensor<'t, E> {
        let shape = shape.to_vec();
        self.tape.unary(self.id, Op::Broadcast(self.id), move |a| {
            assert_eq!(a.len(), 1, "broadcast_to expects a scalar");
            ArrayD::from_elem(IxDyn(&shape), *a.iter().next().unwrap())
        })
    }

    /// `[N,C,H,W] -> [N,C,1,1]` mean over the spatial axes.
    pub fn spatial_mean(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::SpatialMean(self.id), |a| {
            let s = a.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut out = ArrayD::zeros(vec![n, c, 1, 1]);
            let inv = E::one() / E::c((h * w) as f64);
            for ni in 0..n {
                for ci in 0..c {
                    let mut acc = E::zero();
                    for y in 0..h {
                        for x in 0..w {
                            acc = acc + a[[ni, ci, y, x]];
                        }
                    }
                    out[[ni, ci, 0, 0]] = acc * inv;
                }
            }
            out
        })
    }

    /// `[N,C,1,1] -> [N,C,H,W]`.
    pub fn broadcast_spatial(self, h: usize, w: usize) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::BroadcastSpatial(self.id), move |a| {
            let s = a.shape();
            let (n, c) = (s[0], s[1]);
            let mut out = ArrayD::zeros(vec![n, c, h, w]);
            for ni in 0..n {
                for ci in 0..c {
                    let v = a[[ni, ci, 0, 0]];
                    for y in 0..h {
                        for x in 0..w {
                            out[[ni, ci, y, x]] = v;
                        }
                    }
                }
            }
            out
        })
    }

    /// `[N,C,H,W] -> [C]` sum over batch and spatial axes.
    pub fn channel_sum(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::ChannelSum(self.id), |a| {
            let s = a.shape();
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let mut out = ArrayD::zeros(vec![c]);
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out[[ci]] = out[[ci]] + a[[ni, ci, y, x]];
                        }
                    }
                }
            }
            out
        })
    }

    /// `[C] -> [N,C,H,W]` broadcast, used for bias terms.
    pub fn broadcast_channel(self, n: usize, h: usize, w: usize) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::BroadcastChannel(self.id), move |a| {
            let c = a.shape()[0];
            let mut out = ArrayD::zeros(vec![n, c, h, w]);
            for ni in 0..n {
                for ci in 0..c {
                    let v = a[[ci]];
                    for y in 0..h {
                        for x in 0..w {
                            out[[ni, ci, y, x]] = v;
                        }
                    }
                }
            }
            out
        })
    }

    /// 2-d matrix product.
    pub fn matmul(self, o: Tensor<'t, E>) -> Tensor<'t, E> {
        self.tape.binary(self.id, o.id, Op::MatMul(self.id, o.id), |a, b| {
            let a2 = a.view().into_dimensionality::<ndarray::Ix2>().expect("matmul lhs 2-d");
            let b2 = b.view().into_dimensionality::<ndarray::Ix2>().expect("matmul rhs 2-d");
            a2.dot(&b2).into_dyn()
        })
    }

    pub fn transpose(self) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::Transpose(self.id), |a| {
            a.view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("transpose expects 2-d")
                .t()
                .as_standard_layout()
                .into_owned()
                .into_dyn()
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Tensor<'t, E> {
        let shape = shape.to_vec();
        self.tape.unary(self.id, Op::Reshape(self.id), move |a| {
            a.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(&shape))
                .expect("reshape size mismatch")
        })
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_channels(self, o: Tensor<'t, E>) -> Tensor<'t, E> {
        self.tape.binary(self.id, o.id, Op::ConcatChannels(self.id, o.id), |a, b| {
            ndarray::concatenate(ndarray::Axis(1), &[a.view(), b.view()])
                .expect("concat shape mismatch")
                .as_standard_layout()
                .into_owned()
        })
    }

    pub fn slice_channels(self, start: usize, len: usize) -> Tensor<'t, E> {
        self.tape.unary(
            self.id,
            Op::SliceChannels { x: self.id, start, len },
            move |a| {
                a.slice_axis(ndarray::Axis(1), ndarray::Slice::from(start..start + len))
                    .as_standard_layout()
                    .into_owned()
            },
        )
    }

    /// Zero-pad along the channel axis.
    pub fn pad_channels(self, before: usize, after: usize) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::PadChannels { x: self.id, before }, move |a| {
            let s = a.shape();
            let mut shape = s.to_vec();
            shape[1] = s[1] + before + after;
            let mut out = ArrayD::zeros(shape);
            out.slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(before..before + s[1]))
                .assign(a);
            out
        })
    }

    pub fn conv2d(self, w: Tensor<'t, E>, stride: usize, pad: usize) -> Tensor<'t, E> {
        self.tape.binary(
            self.id,
            w.id,
            Op::Conv2d { x: self.id, w: w.id, stride, pad },
            |x, wv| conv::conv2d(x, wv, stride, pad),
        )
    }

    pub fn conv_transpose2d(
        self,
        w: Tensor<'t, E>,
        stride: usize,
        pad: usize,
        out_hw: (usize, usize),
    ) -> Tensor<'t, E> {
        self.tape.binary(
            self.id,
            w.id,
            Op::ConvTranspose2d { z: self.id, w: w.id, stride, pad },
            |z, wv| conv::conv_transpose2d(z, wv, stride, pad, out_hw),
        )
    }

    pub fn reflect_pad(self, pad: usize) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::ReflectPad { x: self.id, pad }, move |x| {
            conv::reflect_pad(x, pad)
        })
    }

    fn reflect_pad_adjoint(self, pad: usize, out_hw: (usize, usize)) -> Tensor<'t, E> {
        self.tape.unary(self.id, Op::ReflectPadAdjoint { z: self.id, pad }, move |z| {
            conv::reflect_pad_adjoint(z, pad, out_hw)
        })
    }

    /// Sum of squares reduced to a scalar.
    pub fn sum_squares(self) -> Tensor<'t, E> {
        self.mul(self).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of `backward` for an arbitrary
    /// build function. Relative error must stay below `tol`.
    fn fd_check(
        inputs: &[ArrayD<f64>],
        build: impl Fn(&Tape<f64>, &[Tensor<'_, f64>]) -> usize,
        tol: f64,
    ) {
        let eval = |vals: &[ArrayD<f64>]| -> f64 {
            let tape = Tape::new();
            let leaves: Vec<Tensor<f64>> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
            let out = build(&tape, &leaves);
            Tensor { tape: &tape, id: out }.scalar()
        };
        // analytic
        let tape = Tape::new();
        let leaves: Vec<Tensor<f64>> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
        let out_id = build(&tape, &leaves);
        let loss = Tensor { tape: &tape, id: out_id };
        let grads = tape.backward(loss, &leaves);

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let g = grads[k].map(|t| t.value());
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[k].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[k].as_slice_mut().unwrap()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = g
                    .as_ref()
                    .map(|a| a.as_slice().unwrap()[idx])
                    .unwrap_or(0.0);
                // FD noise floor is ~1e-9 for O(1) values and h=1e-6
                if (numeric - analytic).abs() < 1e-8 {
                    continue;
                }
                let denom = numeric.abs().max(analytic.abs()).max(1e-4);
                assert!(
                    (numeric - analytic).abs() / denom < tol,
                    "input {k} index {idx}: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[2, 3]);
        let b = randn(&mut rng, &[2, 3]).mapv(|v| v + 2.5); // keep positive
        fd_check(&[a, b], |_, l| {
            let x = l[0];
            let y = l[1];
            let z = x
                .mul(y)
                .add(x.tanh())
                .sub(y.sigmoid())
                .add(x.softplus())
                .add(y.sqrt())
                .add(y.recip())
                .scale(0.7)
                .add_scalar(0.1)
                .neg();
            z.sum().id()
        }, 1e-6);
    }

    #[test]
    fn nonsmooth_ops_gradcheck_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // keep inputs away from 0 so abs/relu kinks don't break FD
        let a = randn(&mut rng, &[3, 3]).mapv(|v| if v.abs() < 0.2 { v + 0.5 } else { v });
        fd_check(&[a], |_, l| {
            let x = l[0];
            x.abs().add(x.leaky_relu(0.2)).add(x.clamp_min(-0.9)).sum().id()
        }, 1e-6);
    }

    #[test]
    fn reductions_and_broadcasts_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let bias = randn(&mut rng, &[3]);
        fd_check(&[x, bias], |_, l| {
            let x = l[0];
            let b = l[1];
            let y = x.add(b.broadcast_channel(2, 4, 4));
            let mu = y.spatial_mean();
            let centered = y.sub(mu.broadcast_spatial(4, 4));
            let scaled = centered.mul(centered).mean();
            let z = scaled.broadcast_to(&[2, 2]).sum().add(x.channel_sum().sum());
            z.id()
        }, 1e-6);
    }

    #[test]
    fn matmul_reshape_concat_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        let c = randn(&mut rng, &[1, 2, 2, 2]);
        let d = randn(&mut rng, &[1, 1, 2, 2]);
        fd_check(&[a, b, c, d], |_, l| {
            let m = l[0].matmul(l[1]).transpose().reshape(&[6]);
            let cat = l[2].concat_channels(l[3]);
            let sliced = cat.slice_channels(1, 2).pad_channels(0, 1);
            m.sum().add(sliced.sum_squares()).id()
        }, 1e-6);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(n, c, h, w, o, k, s, p) in
            &[(1, 3, 8, 8, 4, 3, 1, 1), (2, 2, 9, 7, 3, 4, 2, 1), (1, 1, 6, 6, 2, 3, 2, 0)]
        {
            let x = randn(&mut rng, &[n, c, h, w]);
            let wt = randn(&mut rng, &[o, c, k, k]);
            let fast = conv::conv2d(&x, &wt, s, p);
            let slow = conv::conv2d_naive(&x, &wt, s, p);
            let diff = (&fast - &slow).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "conv mismatch {diff} for {:?}", (n, c, h, w, o, k, s, p));
        }
    }

    #[test]
    fn conv_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[1, 2, 6, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        fd_check(&[x.clone(), w.clone()], |_, l| {
            l[0].conv2d(l[1], 2, 1).tanh().sum().id()
        }, 1e-5);
        // transposed convolution: upsample 3x3 -> 6x6
        let z = randn(&mut rng, &[1, 3, 3, 3]);
        let wt = randn(&mut rng, &[3, 2, 4, 4]);
        fd_check(&[z, wt], |_, l| {
            l[0].conv_transpose2d(l[1], 2, 1, (6, 6)).sum_squares().id()
        }, 1e-5);
    }

    #[test]
    fn reflect_pad_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[1, 2, 4, 5]);
        fd_check(&[x], |_, l| l[0].reflect_pad(2).sum_squares().id(), 1e-6);
    }

    #[test]
    fn reflect_pad_values() {
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let padded = conv::reflect_pad(&x, 1);
        assert_eq!(padded.shape(), &[1, 1, 5, 5]);
        // row that mirrors the original first row: [2 1 2 3 2]
        let row: Vec<f64> = (0..5).map(|j| padded[[0, 0, 1, j]]).collect();
        assert_eq!(row, vec![2.0, 1.0, 2.0, 3.0, 2.0]);
        // top padded row mirrors the second source row
        let top: Vec<f64> = (0..5).map(|j| padded[[0, 0, 0, j]]).collect();
        assert_eq!(top, vec![5.0, 4.0, 5.0, 6.0, 5.0]);
    }

    #[test]
    fn double_backward_matches_analytic() {
        // y = sum(tanh x); g = dy/dx = 1 - tanh^2 x
        // s = sum(g^2); ds/dx = -4 tanh x (1 - tanh^2 x)^2
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[5]);
        let tape = Tape::new();
        let xt = tape.leaf(x.clone());
        let y = xt.tanh().sum();
        let g = tape.backward(y, &[xt])[0].expect("grad exists");
        let s = g.sum_squares();
        let ddx = tape.backward(s, &[xt])[0].expect("second grad exists");
        let got = ddx.value();
        for (i, &xi) in x.iter().enumerate() {
            let t = xi.tanh();
            let want = -4.0 * t * (1.0 - t * t) * (1.0 - t * t);
            assert!(
                (got.as_slice().unwrap()[i] - want).abs() < 1e-10,
                "index {i}: {} vs {want}",
                got.as_slice().unwrap()[i]
            );
        }
    }

    #[test]
    fn double_backward_through_conv() {
        // numerically check d/dw of ||d mean(conv(x,w)) / dx||^2
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[1, 1, 4, 4]);
        let w = randn(&mut rng, &[1, 1, 3, 3]);
        let eval = |wv: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let xt = tape.leaf(x.clone());
            let wt = tape.leaf(wv.clone());
            let y = xt.conv2d(wt, 1, 1).tanh().mean();
            let gx = tape.backward(y, &[xt])[0].unwrap();
            gx.sum_squares().scalar()
        };
        let tape = Tape::new();
        let xt = tape.leaf(x.clone());
        let wt = tape.leaf(w.clone());
        let y = xt.conv2d(wt, 1, 1).tanh().mean();
        let gx = tape.backward(y, &[xt])[0].unwrap();
        let s = gx.sum_squares();
        let dw = tape.backward(s, &[wt])[0].expect("second-order grad wrt w");
        let dw_v = dw.value();
        let h = 1e-6;
        for idx in 0..w.len() {
            let mut plus = w.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = w.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = dw_v.as_slice().unwrap()[idx];
            let denom = numeric.abs().max(analytic.abs()).max(1e-6);
            assert!(
                (numeric - analytic).abs() / denom < 1e-5,
                "w[{idx}]: numeric {numeric} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn no_path_returns_none() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf_scalar(2.0);
        let b = tape.leaf_scalar(3.0);
        let loss = a.mul(a);
        let grads = tape.backward(loss, &[a, b]);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }
}
