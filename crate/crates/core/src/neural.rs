//! A small neural-network substrate with hand-written reverse mode:
//! fully-connected layers, GRU layers over sequences, residual blocks and
//! multi-input / multi-head wiring (inputs -> concat -> trunk -> heads).
//!
//! Parameters live in one flat vector ([`NetworkParams`]) with named slices,
//! so SGD, target-network copies and checkpoints are plain vector operations.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Fc { width: usize, activation: Activation },
    /// Consumes its input as a sequence and emits the final hidden state.
    Gru { width: usize },
    /// `inner(x) + x`; the inner stack must preserve the width.
    Residual { inner: Vec<LayerSpec> },
}

/// One input component, presented as `steps` vectors of `features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub name: String,
    pub steps: usize,
    pub features: usize,
    pub layers: Vec<LayerSpec>,
}

/// Inputs are processed separately, concatenated, passed through the trunk,
/// then fanned out to every head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub inputs: Vec<InputSpec>,
    pub trunk: Vec<LayerSpec>,
    pub heads: Vec<Vec<LayerSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with named slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub values: Vec<f64>,
    pub slices: Vec<ParamSlice>,
    /// Bumped on every in-place update so stale caches can be detected.
    #[serde(skip)]
    version: u64,
}

impl NetworkParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.offset..s.offset + s.len])
    }

    pub fn slice_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.version += 1;
        let s = self.slices.iter().find(|s| s.name == name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len])
    }

    /// Overwrites values from `other` (same layout) in place.
    pub fn copy_from(&mut self, other: &NetworkParams) -> Result<()> {
        if other.values.len() != self.values.len() {
            return Err(invalid("parameter vectors differ in length"));
        }
        self.values.copy_from_slice(&other.values);
        self.version += 1;
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
        self.version += 1;
    }

    pub fn touch(&mut self) {
        self.version += 1;
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params: self.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                file.format, file.version
            )));
        }
        let total: usize = file.params.slices.iter().map(|s| s.len).sum();
        if total != file.params.values.len() {
            return Err(Error::Config("checkpoint slices do not cover the values".into()));
        }
        Ok(file.params)
    }
}

const CHECKPOINT_FORMAT: &str = "iosim-params";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    params: NetworkParams,
}

/// Same shape as [`NetworkParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self::zeros(params.len())
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|g| g.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// `params <- params - lr * grad`.
pub fn sgd_step(params: &mut NetworkParams, grad: &Gradient, lr: f64) -> Result<()> {
    if grad.0.len() != params.len() {
        return Err(invalid("gradient and parameters differ in length"));
    }
    if !(lr >= 0.0) {
        return Err(invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    if !grad.is_finite() {
        return Err(Error::Numerical("non-finite gradient".into()));
    }
    for (p, g) in params.values.iter_mut().zip(&grad.0) {
        *p -= lr * g;
    }
    params.version += 1;
    Ok(())
}

/// Plain SGD with optional heavy-ball momentum (off by default).
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grad: &Gradient) -> Result<()> {
        if self.momentum == 0.0 {
            return sgd_step(params, grad, self.lr);
        }
        if !grad.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        if self.velocity.len() != params.len() {
            self.velocity = vec![0.0; params.len()];
        }
        for ((p, g), v) in params.values.iter_mut().zip(&grad.0).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        params.version += 1;
        Ok(())
    }
}

/// `||pred - target||^2 / batch_count` and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64], batch_count: usize) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(invalid(format!(
            "prediction has {} entries, target {}",
            pred.len(),
            target.len()
        )));
    }
    if batch_count == 0 {
        return Err(invalid("batch count must be positive"));
    }
    let scale = 1.0 / batch_count as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d * scale
        })
        .collect();
    Ok((loss * scale, grad))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[i] += sum_j w[i * cols + j] * x[j]` for `rows` rows.
#[inline]
fn matvec_acc(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (row, o) in w.chunks_exact(cols).zip(out.iter_mut()) {
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *o += acc;
    }
}

/// `dx[j] += sum_i w[i * cols + j] * dy[i]`.
#[inline]
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64]) {
    let cols = dx.len();
    for (row, d) in w.chunks_exact(cols).zip(dy) {
        if *d == 0.0 {
            continue;
        }
        for (o, a) in dx.iter_mut().zip(row) {
            *o += a * d;
        }
    }
}

/// `dw[i * cols + j] += dy[i] * x[j]`.
#[inline]
fn outer_acc(dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let cols = x.len();
    for (row, d) in dw.chunks_exact_mut(cols).zip(dy) {
        if *d == 0.0 {
            continue;
        }
        for (o, a) in row.iter_mut().zip(x) {
            *o += a * d;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense {
        w: usize,
        b: usize,
        input: usize,
        output: usize,
        activation: Activation,
    },
    Gru {
        w: usize,
        u: usize,
        b: usize,
        input: usize,
        hidden: usize,
    },
    Residual {
        inner: Vec<Layer>,
        width: usize,
    },
}

#[derive(Debug, Clone)]
enum LayerCache {
    Dense {
        x: Vec<f64>,
        y: Vec<f64>,
    },
    Gru {
        xs: Vec<f64>,
        /// `steps + 1` hidden states, the first all zero.
        hs: Vec<f64>,
        zs: Vec<f64>,
        rs: Vec<f64>,
        ns: Vec<f64>,
    },
    Residual {
        inner: Vec<LayerCache>,
    },
}

struct Builder {
    slices: Vec<ParamSlice>,
    next: usize,
    init_ranges: Vec<(usize, usize, f64)>,
}

impl Builder {
    fn alloc(&mut self, name: String, len: usize, bound: f64) -> usize {
        let offset = self.next;
        self.slices.push(ParamSlice { name, offset, len });
        self.init_ranges.push((offset, len, bound));
        self.next += len;
        offset
    }

    fn layer(&mut self, spec: &LayerSpec, input: usize, prefix: &str) -> Result<(Layer, usize)> {
        match spec {
            LayerSpec::Fc { width, activation } => {
                if *width == 0 || input == 0 {
                    return Err(invalid(format!("{prefix}: zero-width layer")));
                }
                let bound = 1.0 / (input as f64).sqrt();
                let w = self.alloc(format!("{prefix}.weight"), width * input, bound);
                let b = self.alloc(format!("{prefix}.bias"), *width, bound);
                Ok((
                    Layer::Dense {
                        w,
                        b,
                        input,
                        output: *width,
                        activation: *activation,
                    },
                    *width,
                ))
            }
            LayerSpec::Gru { width } => {
                if *width == 0 || input == 0 {
                    return Err(invalid(format!("{prefix}: zero-width layer")));
                }
                let bound = 1.0 / (*width as f64).sqrt();
                let w = self.alloc(format!("{prefix}.input_weight"), 3 * width * input, bound);
                let u = self.alloc(format!("{prefix}.hidden_weight"), 3 * width * width, bound);
                let b = self.alloc(format!("{prefix}.bias"), 3 * width, bound);
                Ok((
                    Layer::Gru {
                        w,
                        u,
                        b,
                        input,
                        hidden: *width,
                    },
                    *width,
                ))
            }
            LayerSpec::Residual { inner } => {
                let (layers, out) = self.stack(inner, input, &format!("{prefix}.res"))?;
                if out != input {
                    return Err(invalid(format!(
                        "{prefix}: residual block maps {input} to {out} features"
                    )));
                }
                Ok((Layer::Residual { inner: layers, width: input }, input))
            }
        }
    }

    fn stack(
        &mut self,
        specs: &[LayerSpec],
        mut width: usize,
        prefix: &str,
    ) -> Result<(Vec<Layer>, usize)> {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let (layer, out) = self.layer(spec, width, &format!("{prefix}.{i}"))?;
            layers.push(layer);
            width = out;
        }
        Ok((layers, width))
    }
}

/// Resolved network: layer offsets into a [`NetworkParams`] layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    inputs: Vec<(usize, usize, Vec<Layer>)>,
    trunk: Vec<Layer>,
    heads: Vec<Vec<Layer>>,
    head_widths: Vec<usize>,
    slices: Vec<ParamSlice>,
    init_ranges: Vec<(usize, usize, f64)>,
    len: usize,
}

/// Activations recorded by [`Network::forward`] for one sample.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    len: usize,
    inputs: Vec<Vec<LayerCache>>,
    input_widths: Vec<usize>,
    trunk: Vec<LayerCache>,
    heads: Vec<Vec<LayerCache>>,
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        if spec.inputs.is_empty() || spec.heads.is_empty() {
            return Err(invalid("a network needs at least one input and one head"));
        }
        let mut b = Builder {
            slices: Vec::new(),
            next: 0,
            init_ranges: Vec::new(),
        };
        let mut inputs = Vec::new();
        let mut concat = 0;
        for inp in &spec.inputs {
            if inp.steps == 0 || inp.features == 0 {
                return Err(invalid(format!("input '{}' is empty", inp.name)));
            }
            let first_is_gru = matches!(inp.layers.first(), Some(LayerSpec::Gru { .. }));
            let width = if first_is_gru { inp.features } else { inp.steps * inp.features };
            let (layers, out) = b.stack(&inp.layers, width, &inp.name)?;
            concat += out;
            inputs.push((inp.steps, inp.features, layers));
        }
        let (trunk, trunk_out) = b.stack(&spec.trunk, concat, "trunk")?;
        let mut heads = Vec::new();
        let mut head_widths = Vec::new();
        for (h, head) in spec.heads.iter().enumerate() {
            if head.is_empty() {
                return Err(invalid(format!("head {h} has no layers")));
            }
            let (layers, out) = b.stack(head, trunk_out, &format!("head{h}"))?;
            heads.push(layers);
            head_widths.push(out);
        }
        Ok(Self {
            spec,
            inputs,
            trunk,
            heads,
            head_widths,
            slices: b.slices,
            init_ranges: b.init_ranges,
            len: b.next,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    pub fn head_widths(&self) -> &[usize] {
        &self.head_widths
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> NetworkParams {
        let mut values = vec![0.0; self.len];
        for &(offset, len, bound) in &self.init_ranges {
            for v in &mut values[offset..offset + len] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        NetworkParams {
            values,
            slices: self.slices.clone(),
            version: 0,
        }
    }

    pub fn zero_params(&self) -> NetworkParams {
        NetworkParams {
            values: vec![0.0; self.len],
            slices: self.slices.clone(),
            version: 0,
        }
    }

    fn check(&self, params: &NetworkParams, inputs: &[&[f64]]) -> Result<()> {
        if params.len() != self.len {
            return Err(invalid(format!(
                "parameter vector has {} values, network needs {}",
                params.len(),
                self.len
            )));
        }
        if inputs.len() != self.inputs.len() {
            return Err(invalid(format!(
                "{} inputs given, network has {}",
                inputs.len(),
                self.inputs.len()
            )));
        }
        for ((steps, feats, _), x) in self.inputs.iter().zip(inputs) {
            if x.len() != steps * feats {
                return Err(invalid(format!(
                    "input of length {} where {}x{} expected",
                    x.len(),
                    steps,
                    feats
                )));
            }
        }
        Ok(())
    }

    /// Evaluation without recording activations.
    pub fn predict(&self, params: &NetworkParams, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        self.check(params, inputs)?;
        let p = &params.values;
        let mut concat = Vec::new();
        for ((_, _, layers), x) in self.inputs.iter().zip(inputs) {
            concat.extend(run_stack(layers, p, x.to_vec(), None));
        }
        let shared = run_stack(&self.trunk, p, concat, None);
        Ok(self
            .heads
            .iter()
            .map(|h| run_stack(h, p, shared.clone(), None))
            .collect())
    }

    /// Evaluation that records what [`Network::backward`] needs.
    pub fn forward(&self, params: &NetworkParams, inputs: &[&[f64]]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        self.check(params, inputs)?;
        let p = &params.values;
        let mut concat = Vec::new();
        let mut input_caches = Vec::new();
        let mut input_widths = Vec::new();
        for ((_, _, layers), x) in self.inputs.iter().zip(inputs) {
            let mut caches = Vec::with_capacity(layers.len());
            let out = run_stack(layers, p, x.to_vec(), Some(&mut caches));
            input_widths.push(out.len());
            concat.extend(out);
            input_caches.push(caches);
        }
        let mut trunk_cache = Vec::new();
        let shared = run_stack(&self.trunk, p, concat, Some(&mut trunk_cache));
        let mut outputs = Vec::new();
        let mut head_caches = Vec::new();
        for h in &self.heads {
            let mut caches = Vec::new();
            outputs.push(run_stack(h, p, shared.clone(), Some(&mut caches)));
            head_caches.push(caches);
        }
        Ok((
            outputs,
            ForwardCache {
                version: params.version,
                len: params.len(),
                inputs: input_caches,
                input_widths,
                trunk: trunk_cache,
                heads: head_caches,
            },
        ))
    }

    /// Accumulates `d(sum_h <output_grads[h], outputs[h]>)/d params` into
    /// `grad`. Heads given `None` contribute nothing.
    pub fn backward(
        &self,
        params: &NetworkParams,
        cache: &ForwardCache,
        output_grads: &[Option<&[f64]>],
        grad: &mut Gradient,
    ) -> Result<()> {
        if cache.version != params.version || cache.len != params.len() {
            return Err(Error::State("forward cache is stale for these parameters".into()));
        }
        if grad.0.len() != self.len {
            return Err(invalid("gradient buffer has the wrong length"));
        }
        if output_grads.len() != self.heads.len() {
            return Err(invalid("one output gradient slot per head is required"));
        }
        let p = &params.values;
        let g = &mut grad.0;
        let shared_width = match self.trunk.last() {
            Some(l) => layer_width(l),
            None => cache.input_widths.iter().sum(),
        };
        let mut d_shared = vec![0.0; shared_width];
        let mut any = false;
        for ((layers, caches), dy) in self.heads.iter().zip(&cache.heads).zip(output_grads) {
            let Some(dy) = dy else { continue };
            let dx = back_stack(layers, caches, p, g, dy.to_vec(), true);
            for (a, b) in d_shared.iter_mut().zip(dx) {
                *a += b;
            }
            any = true;
        }
        if !any {
            return Ok(());
        }
        let d_concat = back_stack(&self.trunk, &cache.trunk, p, g, d_shared, true);
        let mut start = 0;
        for (((_, _, layers), caches), width) in self.inputs.iter().zip(&cache.inputs).zip(&cache.input_widths) {
            let d = d_concat[start..start + width].to_vec();
            start += width;
            back_stack(layers, caches, p, g, d, false);
        }
        Ok(())
    }
}

fn layer_width(layer: &Layer) -> usize {
    match layer {
        Layer::Dense { output, .. } => *output,
        Layer::Gru { hidden, .. } => *hidden,
        Layer::Residual { width, .. } => *width,
    }
}

fn run_stack(layers: &[Layer], p: &[f64], mut x: Vec<f64>, mut caches: Option<&mut Vec<LayerCache>>) -> Vec<f64> {
    for layer in layers {
        x = run_layer(layer, p, x, caches.as_deref_mut());
    }
    x
}

fn run_layer(layer: &Layer, p: &[f64], x: Vec<f64>, cache: Option<&mut Vec<LayerCache>>) -> Vec<f64> {
    match layer {
        Layer::Dense {
            w,
            b,
            input,
            output,
            activation,
        } => {
            debug_assert_eq!(x.len(), *input);
            let mut y = p[*b..*b + output].to_vec();
            matvec_acc(&p[*w..*w + output * input], &x, &mut y);
            for v in y.iter_mut() {
                *v = activation.apply(*v);
            }
            if let Some(c) = cache {
                c.push(LayerCache::Dense { x, y: y.clone() });
            }
            y
        }
        Layer::Gru {
            w,
            u,
            b,
            input,
            hidden,
        } => {
            let h = *hidden;
            let steps = x.len() / input;
            let wm = &p[*w..*w + 3 * h * input];
            let um = &p[*u..*u + 3 * h * h];
            let bias = &p[*b..*b + 3 * h];
            let record = cache.is_some();
            let mut hs = vec![0.0; if record { (steps + 1) * h } else { 0 }];
            let (mut zs, mut rs, mut ns) = if record {
                (vec![0.0; steps * h], vec![0.0; steps * h], vec![0.0; steps * h])
            } else {
                (Vec::new(), Vec::new(), Vec::new())
            };
            let mut hcur = vec![0.0; h];
            let mut pre = vec![0.0; 3 * h];
            let mut rec = vec![0.0; 2 * h];
            let mut gated = vec![0.0; h];
            let mut cand = vec![0.0; h];
            for t in 0..steps {
                let xt = &x[t * input..(t + 1) * input];
                pre.copy_from_slice(bias);
                matvec_acc(wm, xt, &mut pre);
                rec.iter_mut().for_each(|v| *v = 0.0);
                matvec_acc(&um[..2 * h * h], &hcur, &mut rec);
                for i in 0..h {
                    let z = sigmoid(pre[i] + rec[i]);
                    let r = sigmoid(pre[h + i] + rec[h + i]);
                    gated[i] = r * hcur[i];
                    if record {
                        zs[t * h + i] = z;
                        rs[t * h + i] = r;
                    }
                    rec[i] = z;
                }
                cand.copy_from_slice(&pre[2 * h..]);
                matvec_acc(&um[2 * h * h..], &gated, &mut cand);
                for i in 0..h {
                    let n = cand[i].tanh();
                    let z = rec[i];
                    if record {
                        ns[t * h + i] = n;
                    }
                    hcur[i] = (1.0 - z) * hcur[i] + z * n;
                }
                if record {
                    hs[(t + 1) * h..(t + 2) * h].copy_from_slice(&hcur);
                }
            }
            if let Some(c) = cache {
                c.push(LayerCache::Gru { xs: x, hs, zs, rs, ns });
            }
            hcur
        }
        Layer::Residual { inner, .. } => {
            let mut inner_cache = cache.as_ref().map(|_| Vec::new());
            let mut y = run_stack(inner, p, x.clone(), inner_cache.as_mut());
            for (a, b) in y.iter_mut().zip(&x) {
                *a += b;
            }
            if let Some(c) = cache {
                c.push(LayerCache::Residual {
                    inner: inner_cache.unwrap_or_default(),
                });
            }
            y
        }
    }
}

/// Backpropagates `dy` through a stack; returns the input gradient when
/// `need_dx`, else an empty vector for the first layer.
fn back_stack(
    layers: &[Layer],
    caches: &[LayerCache],
    p: &[f64],
    g: &mut [f64],
    mut dy: Vec<f64>,
    need_dx: bool,
) -> Vec<f64> {
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        dy = back_layer(layer, cache, p, g, dy, need_dx || i > 0);
    }
    dy
}

fn back_layer(layer: &Layer, cache: &LayerCache, p: &[f64], g: &mut [f64], mut dy: Vec<f64>, need_dx: bool) -> Vec<f64> {
    match (layer, cache) {
        (
            Layer::Dense {
                w,
                b,
                input,
                output,
                activation,
            },
            LayerCache::Dense { x, y },
        ) => {
            if *activation == Activation::Relu {
                for (d, v) in dy.iter_mut().zip(y) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            for (gb, d) in g[*b..*b + output].iter_mut().zip(&dy) {
                *gb += d;
            }
            outer_acc(&dy, x, &mut g[*w..*w + output * input]);
            if need_dx {
                let mut dx = vec![0.0; *input];
                matvec_t_acc(&p[*w..*w + output * input], &dy, &mut dx);
                dx
            } else {
                Vec::new()
            }
        }
        (
            Layer::Gru {
                w,
                u,
                b,
                input,
                hidden,
            },
            LayerCache::Gru { xs, hs, zs, rs, ns },
        ) => {
            let h = *hidden;
            let steps = xs.len() / input;
            let wm = &p[*w..*w + 3 * h * input];
            let um = &p[*u..*u + 3 * h * h];
            let mut dx = if need_dx { vec![0.0; xs.len()] } else { Vec::new() };
            let mut dh = dy;
            let mut da = vec![0.0; 3 * h];
            let mut dg = vec![0.0; h];
            let mut gated = vec![0.0; h];
            let mut dh_prev = vec![0.0; h];
            for t in (0..steps).rev() {
                let hp = &hs[t * h..(t + 1) * h];
                let z = &zs[t * h..(t + 1) * h];
                let r = &rs[t * h..(t + 1) * h];
                let n = &ns[t * h..(t + 1) * h];
                let xt = &xs[t * input..(t + 1) * input];
                for i in 0..h {
                    let dz = dh[i] * (n[i] - hp[i]);
                    let dn = dh[i] * z[i];
                    dh_prev[i] = dh[i] * (1.0 - z[i]);
                    da[i] = dz * z[i] * (1.0 - z[i]);
                    da[2 * h + i] = dn * (1.0 - n[i] * n[i]);
                    gated[i] = r[i] * hp[i];
                }
                // candidate path: U_n (r * h_prev)
                dg.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(&um[2 * h * h..], &da[2 * h..], &mut dg);
                outer_acc(&da[2 * h..], &gated, &mut g[*u + 2 * h * h..*u + 3 * h * h]);
                for i in 0..h {
                    let dr = dg[i] * hp[i];
                    dh_prev[i] += dg[i] * r[i];
                    da[h + i] = dr * r[i] * (1.0 - r[i]);
                }
                matvec_t_acc(&um[..2 * h * h], &da[..2 * h], &mut dh_prev);
                outer_acc(&da[..2 * h], hp, &mut g[*u..*u + 2 * h * h]);
                outer_acc(&da, xt, &mut g[*w..*w + 3 * h * input]);
                for (gb, d) in g[*b..*b + 3 * h].iter_mut().zip(&da) {
                    *gb += d;
                }
                if need_dx {
                    matvec_t_acc(wm, &da, &mut dx[t * input..(t + 1) * input]);
                }
                std::mem::swap(&mut dh, &mut dh_prev);
            }
            dx
        }
        (Layer::Residual { inner, .. }, LayerCache::Residual { inner: caches }) => {
            let mut dx = back_stack(inner, caches, p, g, dy.clone(), true);
            for (a, b) in dx.iter_mut().zip(&dy) {
                *a += b;
            }
            dy.clear();
            dx
        }
        _ => unreachable!("cache does not match layer"),
    }
}
