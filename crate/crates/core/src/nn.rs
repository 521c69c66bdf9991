//! Network builders and weight handling.
//!
//! Three architectures cover the whole pipeline: a ResNet generator
//! (translation), a U-Net generator (segmentation), and the 70x70-receptive-
//! field patch discriminator shared by both adversarial stages. Topology is
//! derived deterministically from a [`NetworkSpec`]; parameters live in a
//! [`WeightSet`] keyed by layer name so checkpoints are plain name->array
//! maps.
//!
//! Spectral normalization follows the power-iteration scheme: the left
//! singular vector estimate `u` persists in the weight set (suffix `.sn_u`),
//! one iteration refreshes it per bound forward pass, and the normalized
//! weight `W / sigma` enters the graph with `u`,`v` treated as constants.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Elem, Tape, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "nucleigan-ckpt-v1";
/// Conv weights are drawn from N(0, 0.02); biases start at zero.
pub const INIT_STD: f64 = 0.02;
const INSTANCE_NORM_EPS: f64 = 1e-5;
const SIGMA_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    ResnetGenerator,
    UnetGenerator,
    PatchDiscriminator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-sample, per-channel spatial normalization (no affine parameters).
    Instance,
    /// At batch size 1 (the only size this pipeline trains with) this is
    /// the same computation as instance norm.
    Batch,
}

/// Architecture description; everything needed to rebuild a network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub kind: NetworkKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    /// Residual block count (ResNet generator only).
    pub n_resblocks: usize,
    /// Encoder depth (U-Net generator only).
    pub n_levels: usize,
    pub norm: NormKind,
    pub spectral_norm: bool,
}

impl NetworkSpec {
    pub fn resnet_generator(in_channels: usize, out_channels: usize, base_width: usize, n_resblocks: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::ResnetGenerator,
            in_channels,
            out_channels,
            base_width,
            n_resblocks,
            n_levels: 0,
            norm: NormKind::Instance,
            spectral_norm: false,
        }
    }

    pub fn unet_generator(in_channels: usize, out_channels: usize, base_width: usize, n_levels: usize) -> Self {
        NetworkSpec {
            kind: NetworkKind::UnetGenerator,
            in_channels,
            out_channels,
            base_width,
            n_resblocks: 0,
            n_levels,
            norm: NormKind::Instance,
            spectral_norm: false,
        }
    }

    pub fn patch_discriminator(in_channels: usize, base_width: usize, spectral_norm: bool) -> Self {
        NetworkSpec {
            kind: NetworkKind::PatchDiscriminator,
            in_channels,
            out_channels: 1,
            base_width,
            n_resblocks: 0,
            n_levels: 0,
            norm: NormKind::Instance,
            spectral_norm,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            NetworkKind::ResnetGenerator if self.n_resblocks < 1 => Err(Error::InvalidArgument(
                "resnet generator needs n_resblocks >= 1".into(),
            )),
            NetworkKind::UnetGenerator if self.n_levels < 2 => {
                Err(Error::InvalidArgument("unet generator needs n_levels >= 2".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Named parameter arrays (plus `.sn_u` power-iteration state).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<E: Elem> {
    pub params: BTreeMap<String, ArrayD<E>>,
}

impl<E: Elem> Default for WeightSet<E> {
    fn default() -> Self {
        WeightSet { params: BTreeMap::new() }
    }
}

impl<E: Elem> WeightSet<E> {
    pub fn get(&self, name: &str) -> &ArrayD<E> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?} in weight set"))
    }

    /// Number of trainable scalars (power-iteration buffers excluded).
    pub fn total_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| !name.ends_with(".sn_u"))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Names of trainable parameters, in deterministic order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params.keys().filter(|n| !n.ends_with(".sn_u")).cloned().collect()
    }
}

// ---------------------------------------------------------------------------
// layer plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ConvPlan {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    transposed: bool,
}

#[derive(Debug, Clone)]
enum LayerPlan {
    Conv(ConvPlan),
    InstanceNorm,
    Relu,
    Tanh,
    ReflectPad(usize),
    /// Marks the start of a residual block body (the skip add closes it).
    ResBegin,
    ResEnd,
}

fn resnet_plan(spec: &NetworkSpec) -> Vec<LayerPlan> {
    use LayerPlan::*;
    let w = spec.base_width;
    let mut plan = vec![
        ReflectPad(3),
        Conv(ConvPlan { name: "stem".into(), in_c: spec.in_channels, out_c: w, k: 7, stride: 1, pad: 0, transposed: false }),
        InstanceNorm,
        Relu,
        Conv(ConvPlan { name: "down1".into(), in_c: w, out_c: 2 * w, k: 3, stride: 2, pad: 1, transposed: false }),
        InstanceNorm,
        Relu,
        Conv(ConvPlan { name: "down2".into(), in_c: 2 * w, out_c: 4 * w, k: 3, stride: 2, pad: 1, transposed: false }),
        InstanceNorm,
        Relu,
    ];
    for i in 0..spec.n_resblocks {
        plan.push(ResBegin);
        plan.push(ReflectPad(1));
        plan.push(Conv(ConvPlan { name: format!("res{i}a"), in_c: 4 * w, out_c: 4 * w, k: 3, stride: 1, pad: 0, transposed: false }));
        plan.push(InstanceNorm);
        plan.push(Relu);
        plan.push(ReflectPad(1));
        plan.push(Conv(ConvPlan { name: format!("res{i}b"), in_c: 4 * w, out_c: 4 * w, k: 3, stride: 1, pad: 0, transposed: false }));
        plan.push(InstanceNorm);
        plan.push(ResEnd);
    }
    plan.extend([
        Conv(ConvPlan { name: "up1".into(), in_c: 4 * w, out_c: 2 * w, k: 3, stride: 2, pad: 1, transposed: true }),
        InstanceNorm,
        Relu,
        Conv(ConvPlan { name: "up2".into(), in_c: 2 * w, out_c: w, k: 3, stride: 2, pad: 1, transposed: true }),
        InstanceNorm,
        Relu,
        ReflectPad(3),
        Conv(ConvPlan { name: "head".into(), in_c: w, out_c: spec.out_channels, k: 7, stride: 1, pad: 0, transposed: false }),
        Tanh,
    ]);
    plan
}

/// Channel width at U-Net level i (1-based); capped at 8x base.
fn unet_width(base: usize, level: usize) -> usize {
    base * (1usize << (level - 1).min(3))
}

/// Discriminator stack: three stride-2 convs, one stride-1, then the score
/// conv; kernels 4, pads 1 throughout. Receptive field works out to 70.
fn disc_channels(spec: &NetworkSpec) -> [(usize, usize, usize); 5] {
    let w = spec.base_width;
    // (in, out, stride)
    [
        (spec.in_channels, w, 2),
        (w, 2 * w, 2),
        (2 * w, 4 * w, 2),
        (4 * w, 8 * w, 1),
        (8 * w, 1, 1),
    ]
}

/// Analytic receptive field of one discriminator output score.
pub fn discriminator_receptive_field(spec: &NetworkSpec) -> usize {
    let mut rf = 1usize;
    for (_, _, stride) in disc_channels(spec).iter().rev() {
        rf = (rf - 1) * stride + 4;
    }
    rf
}

/// U-Net bottleneck spatial size for a given input size (stride arithmetic).
pub fn unet_bottleneck_size(spec: &NetworkSpec, input: usize) -> Result<usize> {
    let div = 1usize << spec.n_levels;
    if input % div != 0 {
        return Err(Error::InvalidArgument(format!(
            "input size {input} not divisible by 2^{} for {} levels",
            spec.n_levels, spec.n_levels
        )));
    }
    Ok(input / div)
}

// ---------------------------------------------------------------------------
// initialization
// ---------------------------------------------------------------------------

struct Init<E: Elem> {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
    ws: WeightSet<E>,
    spectral: bool,
}

impl<E: Elem> Init<E> {
    fn new(seed: u64, spectral: bool) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
            ws: WeightSet::default(),
            spectral,
        }
    }

    fn conv(&mut self, plan: &ConvPlan) {
        // transposed convs store weight as [in, out, k, k] matching the
        // conv_transpose2d contraction
        let shape = if plan.transposed {
            vec![plan.in_c, plan.out_c, plan.k, plan.k]
        } else {
            vec![plan.out_c, plan.in_c, plan.k, plan.k]
        };
        let w = ArrayD::from_shape_fn(IxDyn(&shape), |_| E::c(self.normal.sample(&mut self.rng)));
        let rows = shape[0];
        self.ws.params.insert(format!("{}.w", plan.name), w);
        self.ws
            .params
            .insert(format!("{}.b", plan.name), ArrayD::zeros(IxDyn(&[plan.out_c])));
        if self.spectral {
            let mut u = Array1::from_shape_fn(rows, |_| E::c(self.normal.sample(&mut self.rng)));
            let norm = u.iter().fold(E::zero(), |a, &v| a + v * v).sqrt();
            if norm > E::zero() {
                u.mapv_inplace(|v| v / norm);
            }
            self.ws.params.insert(format!("{}.w.sn_u", plan.name), u.into_dyn());
        }
    }
}

/// Build a network: validate the spec and initialize its weights.
///
/// Generic over element type so gradient checks can run in f64; training
/// uses f32.
pub fn build_network<E: Elem>(spec: &NetworkSpec, seed: u64) -> Result<(Network, WeightSet<E>)> {
    spec.validate()?;
    let mut init = Init::<E>::new(seed, spec.spectral_norm);
    match spec.kind {
        NetworkKind::ResnetGenerator => {
            for layer in resnet_plan(spec) {
                if let LayerPlan::Conv(c) = layer {
                    init.conv(&c);
                }
            }
        }
        NetworkKind::UnetGenerator => {
            let n = spec.n_levels;
            for i in 1..=n {
                let in_c = if i == 1 { spec.in_channels } else { unet_width(spec.base_width, i - 1) };
                init.conv(&ConvPlan {
                    name: format!("enc{i}"),
                    in_c,
                    out_c: unet_width(spec.base_width, i),
                    k: 4,
                    stride: 2,
                    pad: 1,
                    transposed: false,
                });
            }
            for i in (1..=n).rev() {
                let cin = if i == n { unet_width(spec.base_width, n) } else { 2 * unet_width(spec.base_width, i) };
                let cout = if i == 1 { spec.out_channels } else { unet_width(spec.base_width, i - 1) };
                init.conv(&ConvPlan {
                    name: format!("dec{i}"),
                    in_c: cin,
                    out_c: cout,
                    k: 4,
                    stride: 2,
                    pad: 1,
                    transposed: true,
                });
            }
        }
        NetworkKind::PatchDiscriminator => {
            for (idx, (in_c, out_c, stride)) in disc_channels(spec).iter().enumerate() {
                init.conv(&ConvPlan {
                    name: format!("d{idx}"),
                    in_c: *in_c,
                    out_c: *out_c,
                    k: 4,
                    stride: *stride,
                    pad: 1,
                    transposed: false,
                });
            }
        }
    }
    Ok((Network { spec: spec.clone() }, init.ws))
}

// ---------------------------------------------------------------------------
// parameter binding and forward passes
// ---------------------------------------------------------------------------

/// Per-tape parameter registry. Binds each named parameter to exactly one
/// leaf per tape (so several forward passes share gradients) and stages
/// spectral-norm `u` refreshes until the trainer applies them.
pub struct Binding<'t, E: Elem> {
    tape: &'t Tape<E>,
    bound: std::cell::RefCell<BTreeMap<String, Tensor<'t, E>>>,
    normalized: std::cell::RefCell<BTreeMap<String, Tensor<'t, E>>>,
    staged_u: std::cell::RefCell<BTreeMap<String, ArrayD<E>>>,
}

impl<'t, E: Elem> Binding<'t, E> {
    pub fn new(tape: &'t Tape<E>) -> Self {
        Binding {
            tape,
            bound: Default::default(),
            normalized: Default::default(),
            staged_u: Default::default(),
        }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Leaf tensor for a named parameter (bound once per tape).
    pub fn param(&self, ws: &WeightSet<E>, name: &str) -> Tensor<'t, E> {
        if let Some(&t) = self.bound.borrow().get(name) {
            return t;
        }
        let t = self.tape.leaf(ws.get(name).clone());
        self.bound.borrow_mut().insert(name.to_string(), t);
        t
    }

    /// Raw leaves for a set of parameter names (for backward + updates).
    pub fn bound_params(&self, names: &[String]) -> Vec<(String, Tensor<'t, E>)> {
        let bound = self.bound.borrow();
        names
            .iter()
            .filter_map(|n| bound.get(n).map(|&t| (n.clone(), t)))
            .collect()
    }

    /// Write staged power-iteration vectors back into the weight set.
    pub fn apply_staged_u(&self, ws: &mut WeightSet<E>) {
        for (name, u) in self.staged_u.borrow_mut().drain_filter_all() {
            ws.params.insert(name, u);
        }
    }
}

trait DrainAll<K, V> {
    fn drain_filter_all(&mut self) -> Vec<(K, V)>;
}

impl<K: Ord + Clone, V> DrainAll<K, V> for BTreeMap<K, V> {
    fn drain_filter_all(&mut self) -> Vec<(K, V)> {
        let keys: Vec<K> = self.keys().cloned().collect();
        keys.into_iter().map(|k| { let v = self.remove(&k).unwrap(); (k, v) }).collect()
    }
}

/// One power-iteration round in value space.
///
/// `v = normalize(W^T u)`, `u' = normalize(W v)`, `sigma = u'^T W v`.
/// Returns `(sigma, u', v)`.
fn power_iterate<E: Elem>(
    w2d: &ndarray::Array2<E>,
    u: &Array1<E>,
    n_iters: usize,
) -> (E, Array1<E>, Array1<E>) {
    let normalize = |v: Array1<E>| -> Array1<E> {
        let n = v.iter().fold(E::zero(), |a, &x| a + x * x).sqrt();
        if n > E::c(SIGMA_FLOOR) {
            v.mapv(|x| x / n)
        } else {
            v
        }
    };
    let mut u = u.clone();
    let mut v = normalize(w2d.t().dot(&u));
    for it in 0..n_iters {
        if it > 0 {
            v = normalize(w2d.t().dot(&u));
        }
        u = normalize(w2d.dot(&v));
    }
    let sigma = u.dot(&w2d.dot(&v));
    (sigma, u, v)
}

/// Spectrally normalize a weight (any shape, reshaped to `[out, rest]`).
///
/// Returns the normalized weight, the updated `u`, and the sigma estimate.
/// Sigma is clamped to 1e-12 so zero matrices return zeros.
pub fn spectral_normalize<E: Elem>(
    weight: &ArrayD<E>,
    u: &Array1<E>,
    n_power_iters: usize,
) -> (ArrayD<E>, Array1<E>, E) {
    let rows = weight.shape()[0];
    let cols: usize = weight.len() / rows;
    let w2d = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, cols))
        .expect("weight reshape");
    let (sigma, u_new, _v) = power_iterate(&w2d, u, n_power_iters);
    let sigma_c = if sigma > E::c(SIGMA_FLOOR) { sigma } else { E::c(SIGMA_FLOOR) };
    (weight.mapv(|x| x / sigma_c), u_new, sigma)
}

/// Tape-side spectral normalization: power-iterate in value space, then
/// divide the weight by the differentiable sigma = u^T W v with u, v
/// constant, mirroring the standard implementation.
fn spectral_normalize_t<'t, E: Elem>(
    binding: &Binding<'t, E>,
    ws: &WeightSet<E>,
    name: &str,
) -> Tensor<'t, E> {
    if let Some(&t) = binding.normalized.borrow().get(name) {
        return t;
    }
    let w = binding.param(ws, name);
    let u_name = format!("{name}.sn_u");
    let u_arr = ws
        .get(&u_name)
        .view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("sn_u is a vector")
        .to_owned();
    let w_val = w.value();
    let rows = w_val.shape()[0];
    let cols = w_val.len() / rows;
    let w2d_val = w_val
        .into_shape_with_order((rows, cols))
        .expect("weight reshape");
    let (_, u_new, v) = power_iterate(&w2d_val, &u_arr, 1);
    binding.staged_u.borrow_mut().insert(u_name, u_new.clone().into_dyn());

    let tape = binding.tape;
    let u_t = tape.leaf(u_new.into_shape_with_order((1, rows)).unwrap().into_dyn());
    let v_t = tape.leaf(v.into_shape_with_order((cols, 1)).unwrap().into_dyn());
    let w2d = w.reshape(&[rows, cols]);
    let sigma = u_t.matmul(w2d).matmul(v_t).reshape(&[]).clamp_min(E::c(SIGMA_FLOOR));
    let shape = w.shape();
    let w_sn = w.mul(sigma.recip().broadcast_to(&shape));
    binding.normalized.borrow_mut().insert(name.to_string(), w_sn);
    w_sn
}

/// Conv layer application (optionally transposed / spectrally normalized).
fn apply_conv<'t, E: Elem>(
    binding: &Binding<'t, E>,
    ws: &WeightSet<E>,
    plan: &ConvPlan,
    spectral: bool,
    x: Tensor<'t, E>,
) -> Tensor<'t, E> {
    let w_name = format!("{}.w", plan.name);
    let w = if spectral {
        spectral_normalize_t(binding, ws, &w_name)
    } else {
        binding.param(ws, &w_name)
    };
    let y = if plan.transposed {
        let s = x.shape();
        // k=3,s=2,p=1 with output padding 1 and k=4,s=2,p=1 both double
        let out_hw = (s[2] * 2, s[3] * 2);
        x.conv_transpose2d(w, plan.stride, plan.pad, out_hw)
    } else {
        x.conv2d(w, plan.stride, plan.pad)
    };
    let b = binding.param(ws, &format!("{}.b", plan.name));
    let ys = y.shape();
    y.add(b.broadcast_channel(ys[0], ys[2], ys[3]))
}

fn instance_norm<'t, E: Elem>(x: Tensor<'t, E>) -> Tensor<'t, E> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mu = x.spatial_mean();
    let centered = x.sub(mu.broadcast_spatial(h, w));
    let var = centered.mul(centered).spatial_mean();
    let denom = var.add_scalar(E::c(INSTANCE_NORM_EPS)).sqrt().recip();
    centered.mul(denom.broadcast_spatial(h, w))
}

/// A constructed network. Topology is a pure function of the spec; weights
/// travel separately in a [`WeightSet`].
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
}

impl Network {
    pub fn forward<'t, E: Elem>(
        &self,
        binding: &Binding<'t, E>,
        ws: &WeightSet<E>,
        x: Tensor<'t, E>,
    ) -> Result<Tensor<'t, E>> {
        match self.spec.kind {
            NetworkKind::ResnetGenerator => self.forward_resnet(binding, ws, x),
            NetworkKind::UnetGenerator => self.forward_unet(binding, ws, x),
            NetworkKind::PatchDiscriminator => Ok(self.forward_disc(binding, ws, x)),
        }
    }

    fn forward_resnet<'t, E: Elem>(
        &self,
        binding: &Binding<'t, E>,
        ws: &WeightSet<E>,
        x: Tensor<'t, E>,
    ) -> Result<Tensor<'t, E>> {
        let s = x.shape();
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "resnet generator input must be divisible by 4, got {}x{}",
                s[2], s[3]
            )));
        }
        let mut h = x;
        let mut skip: Option<Tensor<E>> = None;
        for layer in resnet_plan(&self.spec) {
            h = match layer {
                LayerPlan::Conv(c) => apply_conv(binding, ws, &c, false, h),
                LayerPlan::InstanceNorm => instance_norm(h),
                LayerPlan::Relu => h.relu(),
                LayerPlan::Tanh => h.tanh(),
                LayerPlan::ReflectPad(p) => h.reflect_pad(p),
                LayerPlan::ResBegin => {
                    skip = Some(h);
                    h
                }
                LayerPlan::ResEnd => h.add(skip.take().expect("res block opened")),
            };
        }
        Ok(h)
    }

    fn forward_unet<'t, E: Elem>(
        &self,
        binding: &Binding<'t, E>,
        ws: &WeightSet<E>,
        x: Tensor<'t, E>,
    ) -> Result<Tensor<'t, E>> {
        let spec = &self.spec;
        let n = spec.n_levels;
        let s = x.shape();
        unet_bottleneck_size(spec, s[2])?;
        unet_bottleneck_size(spec, s[3])?;
        let slope = E::c(0.2);
        // encoder: leaky ReLU before every conv except the first; norm after
        // every conv except the first and the innermost
        let mut feats: Vec<Tensor<E>> = Vec::with_capacity(n);
        let mut h = x;
        for i in 1..=n {
            let input = if i == 1 { h } else { h.leaky_relu(slope) };
            let plan = ConvPlan {
                name: format!("enc{i}"),
                in_c: 0,
                out_c: 0,
                k: 4,
                stride: 2,
                pad: 1,
                transposed: false,
            };
            let mut e = apply_conv(binding, ws, &plan, false, input);
            if i != 1 && i != n {
                e = instance_norm(e);
            }
            feats.push(e);
            h = e;
        }
        // decoder: ReLU then transposed conv; norm everywhere except the
        // outermost layer, which ends in Tanh
        let mut d = feats[n - 1];
        for i in (1..=n).rev() {
            let input = if i == n { d } else { feats[i - 1].concat_channels(d) };
            let plan = ConvPlan {
                name: format!("dec{i}"),
                in_c: 0,
                out_c: 0,
                k: 4,
                stride: 2,
                pad: 1,
                transposed: true,
            };
            let up = apply_conv(binding, ws, &plan, false, input.relu());
            d = if i == 1 { up.tanh() } else { instance_norm(up) };
        }
        Ok(d)
    }

    fn forward_disc<'t, E: Elem>(
        &self,
        binding: &Binding<'t, E>,
        ws: &WeightSet<E>,
        x: Tensor<'t, E>,
    ) -> Tensor<'t, E> {
        let spec = &self.spec;
        let mut h = x;
        let stack = disc_channels(spec);
        for (idx, (in_c, out_c, stride)) in stack.iter().enumerate() {
            let plan = ConvPlan {
                name: format!("d{idx}"),
                in_c: *in_c,
                out_c: *out_c,
                k: 4,
                stride: *stride,
                pad: 1,
                transposed: false,
            };
            h = apply_conv(binding, ws, &plan, spec.spectral_norm, h);
            let last = idx == stack.len() - 1;
            if !last {
                // no normalization after the first conv; instance norm on the
                // middle layers
                if idx != 0 {
                    h = instance_norm(h);
                }
                h = h.leaky_relu(E::c(0.2));
            }
        }
        h
    }
}

/// Builder for the mask->image / image->mask translators.
pub fn build_resnet_generator<E: Elem>(spec: &NetworkSpec, seed: u64) -> Result<(Network, WeightSet<E>)> {
    if spec.kind != NetworkKind::ResnetGenerator {
        return Err(Error::InvalidArgument("spec.kind must be resnet_generator".into()));
    }
    build_network(spec, seed)
}

/// Builder for the segmentation generator.
pub fn build_unet_generator<E: Elem>(spec: &NetworkSpec, seed: u64) -> Result<(Network, WeightSet<E>)> {
    if spec.kind != NetworkKind::UnetGenerator {
        return Err(Error::InvalidArgument("spec.kind must be unet_generator".into()));
    }
    build_network(spec, seed)
}

/// Builder for the 70x70 patch discriminator.
pub fn build_patch_discriminator<E: Elem>(spec: &NetworkSpec, seed: u64) -> Result<(Network, WeightSet<E>)> {
    if spec.kind != NetworkKind::PatchDiscriminator {
        return Err(Error::InvalidArgument("spec.kind must be patch_discriminator".into()));
    }
    build_network(spec, seed)
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: NetworkSpec,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// Write a single-network checkpoint: versioned header, JSON metadata, then
/// shape-tagged little-endian f32 arrays keyed by parameter name.
pub fn save_checkpoint(path: impl AsRef<Path>, meta: &CheckpointMeta, ws: &WeightSet<f32>) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
    buf.push(b'\n');
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    buf.extend_from_slice(&(ws.params.len() as u64).to_le_bytes());
    for (name, arr) in &ws.params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(arr.ndim() as u64).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let std = arr.as_standard_layout();
        for &v in std.as_slice().expect("standard layout") {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::raster::write_bytes_atomic(path, &buf)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(CheckpointMeta, WeightSet<f32>)> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut cur = std::io::Cursor::new(&buf);
    let mut header = vec![0u8; CHECKPOINT_HEADER.len() + 1];
    cur.read_exact(&mut header).map_err(|_| bad_ckpt(path, "truncated header"))?;
    if &header[..CHECKPOINT_HEADER.len()] != CHECKPOINT_HEADER.as_bytes() || header[CHECKPOINT_HEADER.len()] != b'\n' {
        return Err(bad_ckpt(path, "bad header (not a nucleigan-ckpt-v1 file)"));
    }
    let read_u64 = |cur: &mut std::io::Cursor<&Vec<u8>>| -> Result<u64> {
        let mut b = [0u8; 8];
        cur.read_exact(&mut b).map_err(|_| bad_ckpt(path, "truncated"))?;
        Ok(u64::from_le_bytes(b))
    };
    let meta_len = read_u64(&mut cur)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes).map_err(|_| bad_ckpt(path, "truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| bad_ckpt(path, &format!("metadata: {e}")))?;
    let count = read_u64(&mut cur)? as usize;
    let mut ws = WeightSet::default();
    for _ in 0..count {
        let name_len = read_u64(&mut cur)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        cur.read_exact(&mut name_bytes).map_err(|_| bad_ckpt(path, "truncated name"))?;
        let name = String::from_utf8(name_bytes).map_err(|_| bad_ckpt(path, "non-utf8 name"))?;
        let ndim = read_u64(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut cur)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let mut b = [0u8; 4];
            cur.read_exact(&mut b).map_err(|_| bad_ckpt(path, "truncated data"))?;
            data.push(f32::from_le_bytes(b));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| bad_ckpt(path, &format!("shape: {e}")))?;
        ws.params.insert(name, arr);
    }
    Ok((meta, ws))
}

fn bad_ckpt(path: &Path, msg: &str) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

#[allow(dead_code)]
fn _write_api_check(mut w: impl Write) {
    let _ = w.write_all(b"");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn randn_f64(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn resnet_preserves_shape_and_range() {
        let spec = NetworkSpec::resnet_generator(3, 3, 4, 2);
        let (net, ws) = build_network::<f32>(&spec, 1).unwrap();
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| {
            rng.random_range(-1.0f32..1.0)
        }));
        let y = net.forward(&binding, &ws, x).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 64, 64]);
        for &v in y.value().iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn resnet_rejects_non_divisible_input() {
        let spec = NetworkSpec::resnet_generator(3, 3, 4, 1);
        let (net, ws) = build_network::<f32>(&spec, 1).unwrap();
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 30, 30])));
        assert!(net.forward(&binding, &ws, x).is_err());
    }

    #[test]
    fn resnet_parameter_count_matches_arithmetic() {
        // independent layer-by-layer count for base width 64, 9 blocks
        let w = 64usize;
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let mut expect = 0usize;
        expect += conv(3, w, 7); // stem
        expect += conv(w, 2 * w, 3); // down1
        expect += conv(2 * w, 4 * w, 3); // down2
        expect += 9 * 2 * conv(4 * w, 4 * w, 3); // residual blocks
        expect += conv(4 * w, 2 * w, 3); // up1
        expect += conv(2 * w, w, 3); // up2
        expect += conv(w, 3, 7); // head
        let spec = NetworkSpec::resnet_generator(3, 3, 64, 9);
        let (_, ws) = build_network::<f32>(&spec, 0).unwrap();
        assert_eq!(ws.total_params(), expect);
    }

    #[test]
    fn unet_output_shape_and_bottleneck() {
        let spec = NetworkSpec::unet_generator(3, 1, 4, 4);
        let (net, ws) = build_network::<f32>(&spec, 3).unwrap();
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = tape.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 3, 32, 32]), |_| {
            rng.random_range(-1.0f32..1.0)
        }));
        let y = net.forward(&binding, &ws, x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 32, 32]);
        for &v in y.value().iter() {
            assert!((-1.0..=1.0).contains(&v));
        }
        // stride-arithmetic oracle for the bottleneck
        let spec8 = NetworkSpec::unet_generator(3, 1, 4, 8);
        assert_eq!(unet_bottleneck_size(&spec8, 256).unwrap(), 1);
        assert_eq!(unet_bottleneck_size(&spec, 32).unwrap(), 2);
        assert!(unet_bottleneck_size(&spec, 30).is_err());
    }

    #[test]
    fn unet_zero_input_zero_head_gives_zero() {
        let spec = NetworkSpec::unet_generator(3, 1, 4, 3);
        let (net, mut ws) = build_network::<f32>(&spec, 5).unwrap();
        for name in ["dec1.w", "dec1.b"] {
            let z = ws.get(name).mapv(|_| 0.0);
            ws.params.insert(name.into(), z);
        }
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        let y = net.forward(&binding, &ws, x).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn discriminator_score_map_and_receptive_field() {
        let spec = NetworkSpec::patch_discriminator(3, 8, true);
        assert_eq!(discriminator_receptive_field(&spec), 70);
        let (net, ws) = build_network::<f32>(&spec, 7).unwrap();
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let x = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 256, 256])));
        let y = net.forward(&binding, &ws, x).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 30, 30]);
        // fully convolutional: doubling the input scales the score map
        let x2 = tape.leaf(ArrayD::zeros(IxDyn(&[1, 3, 512, 512])));
        let y2 = net.forward(&binding, &ws, x2).unwrap();
        assert_eq!(y2.shape(), vec![1, 1, 62, 62]);
    }

    #[test]
    fn init_std_is_near_002() {
        let spec = NetworkSpec::resnet_generator(3, 3, 32, 4);
        let (_, ws) = build_network::<f32>(&spec, 11).unwrap();
        let mut vals = Vec::new();
        for (name, arr) in &ws.params {
            if name.ends_with(".w") {
                vals.extend(arr.iter().map(|&v| v as f64));
            }
        }
        assert!(vals.len() > 10_000, "need >= 1e4 samples, got {}", vals.len());
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std =
            (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((0.018..=0.022).contains(&std), "std {std}");
    }

    #[test]
    fn init_is_deterministic() {
        let spec = NetworkSpec::patch_discriminator(4, 8, true);
        let (_, a) = build_network::<f32>(&spec, 42).unwrap();
        let (_, b) = build_network::<f32>(&spec, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_normalize_identity() {
        let eye = ndarray::Array2::<f64>::eye(3).into_dyn();
        let u = Array1::from_vec(vec![1.0, 0.0, 0.0]);
        let (w, _, sigma) = spectral_normalize(&eye, &u, 5);
        assert!((sigma - 1.0).abs() < 1e-9);
        for (a, b) in w.iter().zip(eye.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_normalize_diagonal() {
        let w = ndarray::arr2(&[[3.0f64, 0.0], [0.0, 1.0]]).into_dyn();
        let u = Array1::from_vec(vec![0.6, 0.8]);
        let (wn, _, _) = spectral_normalize(&w, &u, 20);
        assert!((wn[[0, 0]] - 1.0).abs() < 1e-4, "{}", wn[[0, 0]]);
        assert!((wn[[1, 1]] - 1.0 / 3.0).abs() < 1e-4, "{}", wn[[1, 1]]);
    }

    #[test]
    fn spectral_normalize_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let w = randn_f64(&mut rng, &[8, 8]);
            let u0 = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
            let (_, _, sigma) = spectral_normalize(&w, &u0, 50);
            let m = nalgebra::DMatrix::from_row_iterator(8, 8, w.iter().copied());
            let svd_sigma = m.singular_values()[0];
            assert!(
                (sigma - svd_sigma).abs() < 1e-4,
                "power iteration {sigma} vs svd {svd_sigma}"
            );
        }
    }

    #[test]
    fn spectral_normalize_zero_matrix() {
        let w = ArrayD::<f64>::zeros(IxDyn(&[3, 3]));
        let u = Array1::from_vec(vec![1.0, 0.0, 0.0]);
        let (wn, _, _) = spectral_normalize(&w, &u, 5);
        assert!(wn.iter().all(|&v| v == 0.0));
    }

    /// Input-gradient check: analytic d(sum(net(x)))/dx vs central FD.
    fn input_gradient_check(spec: &NetworkSpec, in_shape: &[usize]) {
        let (net, ws) = build_network::<f64>(spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x0 = randn_f64(&mut rng, in_shape);
        let eval = |x: &ArrayD<f64>| -> f64 {
            let tape = Tape::new();
            let binding = Binding::new(&tape);
            let xt = tape.leaf(x.clone());
            net.forward(&binding, &ws, xt).unwrap().sum().scalar()
        };
        let tape = Tape::new();
        let binding = Binding::new(&tape);
        let xt = tape.leaf(x0.clone());
        let y = net.forward(&binding, &ws, xt).unwrap().sum();
        let g = tape.backward(y, &[xt])[0].expect("input gradient").value();
        let h = 1e-6;
        let mut rng2 = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..12 {
            let idx = rng2.random_range(0..x0.len());
            let mut plus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            let mut minus = x0.clone();
            minus.as_slice_mut().unwrap()[idx] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let analytic = g.as_slice().unwrap()[idx];
            if (numeric - analytic).abs() < 1e-8 {
                continue;
            }
            let denom = numeric.abs().max(analytic.abs()).max(1e-4);
            assert!(
                (numeric - analytic).abs() / denom < 1e-3,
                "idx {idx}: numeric {numeric} analytic {analytic}"
            );
        }
    }

    #[test]
    fn resnet_input_gradient_check() {
        input_gradient_check(&NetworkSpec::resnet_generator(2, 2, 3, 1), &[1, 2, 16, 16]);
    }

    #[test]
    fn unet_input_gradient_check() {
        input_gradient_check(&NetworkSpec::unet_generator(2, 1, 3, 3), &[1, 2, 16, 16]);
    }

    #[test]
    fn discriminator_input_gradient_check() {
        // 32x32 is the smallest input the canonical 5-conv stack accepts
        input_gradient_check(&NetworkSpec::patch_discriminator(2, 3, true), &[1, 2, 32, 32]);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let spec = NetworkSpec::patch_discriminator(4, 4, true);
        let (_, ws) = build_network::<f32>(&spec, 9).unwrap();
        let meta = CheckpointMeta {
            spec: spec.clone(),
            extra: BTreeMap::from([("step".to_string(), "12".to_string())]),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        save_checkpoint(&path, &meta, &ws).unwrap();
        let (meta2, ws2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2.spec, spec);
        assert_eq!(meta2.extra.get("step").unwrap(), "12");
        assert_eq!(ws, ws2);
        // corrupted header must be rejected
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
