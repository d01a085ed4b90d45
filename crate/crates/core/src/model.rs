//! The trainable encoder, projection head, and prototype bank, with forward
//! passes and analytic parameter gradients.
//!
//! Conventions: batches are row matrices, an affine layer computes
//! `y = x W + b` with `W` of shape (in x out), and every normalization is
//! differentiated exactly through the Jacobian of `v -> v / |v|`.

use std::path::Path;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dataset::ViewPair;
use crate::error::{GcdError, Result};
use crate::numeric::{dot, norm, Mat64};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat64,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Model sizing; input dimension and class count come from the dataset.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the encoder output h.
    pub hidden_dim: usize,
    /// Width of the projected feature z.
    pub proj_dim: usize,
    /// Number of tanh encoder layers (first maps input -> hidden).
    pub encoder_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden_dim: 32, proj_dim: 16, encoder_layers: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.proj_dim == 0 || self.encoder_layers == 0 {
            return Err(GcdError::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable state: encoder layers, projection layers, and the K x d_h
/// prototype bank whose rows act as classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub proj: Vec<Layer>,
    pub prototypes: Mat64,
}

impl ModelParams {
    /// Random initialization: weights N(0, 1/sqrt(fan_in)), zero biases,
    /// prototypes drawn from a unit Gaussian then L2-normalized.
    pub fn init(input_dim: usize, k_total: usize, cfg: &ModelConfig, rng: &Rng) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 || k_total == 0 {
            return Err(GcdError::Config("input_dim and k_total must be positive".into()));
        }
        let mut wrng = rng.split(0);
        let mut make_layer = |fan_in: usize, fan_out: usize, act: Activation| {
            let std = 1.0 / (fan_in as f64).sqrt();
            let data = wrng.normal_vec(fan_in * fan_out, 0.0, std);
            Layer {
                weight: Mat64::from_vec(fan_in, fan_out, data).expect("layer shape"),
                bias: vec![0.0; fan_out],
                activation: act,
            }
        };
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        let mut width = input_dim;
        for _ in 0..cfg.encoder_layers {
            encoder.push(make_layer(width, cfg.hidden_dim, Activation::Tanh));
            width = cfg.hidden_dim;
        }
        let proj = vec![make_layer(cfg.hidden_dim, cfg.proj_dim, Activation::Identity)];

        let mut prng = rng.split(1);
        let mut prototypes = Mat64::zeros(k_total, cfg.hidden_dim);
        for k in 0..k_total {
            loop {
                let raw = prng.normal_vec(cfg.hidden_dim, 0.0, 1.0);
                if let Ok(unit) = crate::numeric::l2_normalize(&raw) {
                    prototypes.row_mut(k).copy_from_slice(&unit);
                    break;
                }
            }
        }
        Ok(ModelParams { encoder, proj, prototypes })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].in_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.encoder.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn proj_dim(&self) -> usize {
        self.proj.last().map(Layer::out_dim).unwrap_or(0)
    }

    pub fn k_total(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.proj.is_empty() {
            return Err(GcdError::Config("model needs at least one encoder and one projection layer".into()));
        }
        let mut width = self.encoder[0].in_dim();
        for (i, layer) in self.encoder.iter().chain(self.proj.iter()).enumerate() {
            if layer.in_dim() != width {
                return Err(GcdError::ShapeMismatch {
                    expected: format!("layer {i} input {width}"),
                    got: format!("{}", layer.in_dim()),
                });
            }
            if layer.bias.len() != layer.out_dim() {
                return Err(GcdError::ShapeMismatch {
                    expected: format!("bias of {}", layer.out_dim()),
                    got: format!("{}", layer.bias.len()),
                });
            }
            width = layer.out_dim();
        }
        if self.prototypes.cols() != self.hidden_dim() {
            return Err(GcdError::ShapeMismatch {
                expected: format!("prototypes of width {}", self.hidden_dim()),
                got: format!("{}", self.prototypes.cols()),
            });
        }
        let finite = self.encoder.iter().chain(self.proj.iter()).all(|l| {
            l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite())
        }) && self.prototypes.is_finite();
        if !finite {
            return Err(GcdError::InvariantViolation("non-finite model parameter".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.encoder
            .iter()
            .chain(self.proj.iter())
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum::<usize>()
            + self.prototypes.data().len()
    }

    /// Canonical flat order: encoder layers (weights then bias), projection
    /// layers, prototypes.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for layer in self.encoder.iter().chain(self.proj.iter()) {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        out.extend_from_slice(self.prototypes.data());
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(GcdError::LengthMismatch { left: flat.len(), right: self.num_parameters() });
        }
        let mut offset = 0;
        for layer in self.encoder.iter_mut().chain(self.proj.iter_mut()) {
            let w = layer.weight.data_mut();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let blen = layer.bias.len();
            layer.bias.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        let p = self.prototypes.data_mut();
        p.copy_from_slice(&flat[offset..offset + p.len()]);
        Ok(())
    }
}

/// Parameter-shaped gradients, flattened in the same canonical order.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub encoder: Vec<(Mat64, Vec<f64>)>,
    pub proj: Vec<(Mat64, Vec<f64>)>,
    pub prototypes: Mat64,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| (Mat64::zeros(l.in_dim(), l.out_dim()), vec![0.0; l.out_dim()]))
                .collect()
        };
        ModelGrads {
            encoder: zero(&params.encoder),
            proj: zero(&params.proj),
            prototypes: Mat64::zeros(params.prototypes.rows(), params.prototypes.cols()),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.encoder.iter().chain(self.proj.iter()) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out.extend_from_slice(self.prototypes.data());
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for ((w, b), (ow, ob)) in self
            .encoder
            .iter_mut()
            .chain(self.proj.iter_mut())
            .zip(other.encoder.iter().chain(other.proj.iter()))
        {
            w.add_assign(ow);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        self.prototypes.add_assign(&other.prototypes);
    }
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct StackCache {
    /// acts[0] is the stack input; acts[l + 1] the output of layer l.
    acts: Vec<Mat64>,
}

fn stack_forward(layers: &[Layer], input: &Mat64) -> Result<(Mat64, StackCache)> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(input.clone());
    for layer in layers {
        let x = acts.last().unwrap();
        if x.cols() != layer.in_dim() {
            return Err(GcdError::ShapeMismatch {
                expected: format!("batch of width {}", layer.in_dim()),
                got: format!("{}", x.cols()),
            });
        }
        let mut y = x.matmul(&layer.weight);
        for i in 0..y.rows() {
            let row = y.row_mut(i);
            for (v, &b) in row.iter_mut().zip(&layer.bias) {
                *v = layer.activation.apply(*v + b);
            }
        }
        acts.push(y);
    }
    let out = acts.last().unwrap().clone();
    Ok((out, StackCache { acts }))
}

/// Backpropagates through a layer stack, accumulating parameter gradients
/// into `grads` and returning the gradient at the stack input.
fn stack_backward(layers: &[Layer], cache: &StackCache, d_out: &Mat64, grads: &mut [(Mat64, Vec<f64>)]) -> Mat64 {
    let mut upstream = d_out.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        let y = &cache.acts[l + 1];
        let x = &cache.acts[l];
        // Through the activation.
        let mut d_pre = upstream;
        for (dy, &out) in d_pre.data_mut().iter_mut().zip(y.data()) {
            *dy *= layer.activation.derivative_from_output(out);
        }
        // dW = x^T d_pre, db = column sums, dX = d_pre W^T.
        grads[l].0.add_assign(&x.transpose_matmul(&d_pre));
        for i in 0..d_pre.rows() {
            for (gb, &d) in grads[l].1.iter_mut().zip(d_pre.row(i)) {
                *gb += d;
            }
        }
        upstream = d_pre.matmul_transpose(&layer.weight);
    }
    upstream
}

/// Per-view forward bookkeeping needed for the exact backward pass.
pub struct ViewCache {
    enc: StackCache,
    proj: StackCache,
    /// Norms of the raw projection outputs, one per row.
    u_norms: Vec<f64>,
    /// Encoder output f(x).
    pub h: Mat64,
    /// Normalized projected feature g(f(x)) / |.|.
    pub z: Mat64,
}

/// Cache of one paired forward call.
pub struct ForwardCache {
    pub a: ViewCache,
    pub b: ViewCache,
}

fn view_forward(params: &ModelParams, input: &Mat64) -> Result<ViewCache> {
    let (h, enc) = stack_forward(&params.encoder, input)?;
    let (u, proj) = stack_forward(&params.proj, &h)?;
    let mut z = u.clone();
    let mut u_norms = Vec::with_capacity(u.rows());
    for i in 0..u.rows() {
        let n = norm(u.row(i));
        if n <= crate::numeric::ZERO_NORM_EPS {
            return Err(GcdError::ZeroVector { norm: n });
        }
        for v in z.row_mut(i) {
            *v /= n;
        }
        u_norms.push(n);
    }
    Ok(ViewCache { enc, proj, u_norms, h, z })
}

/// Runs both views through encoder and projection head. Hidden features come
/// back raw; projected features are L2-normalized per row.
pub fn forward(params: &ModelParams, batch: &ViewPair) -> Result<ForwardCache> {
    if batch.view_a.rows() != batch.view_b.rows() || batch.view_a.cols() != batch.view_b.cols() {
        return Err(GcdError::ShapeMismatch {
            expected: format!("{}x{}", batch.view_a.rows(), batch.view_a.cols()),
            got: format!("{}x{}", batch.view_b.rows(), batch.view_b.cols()),
        });
    }
    Ok(ForwardCache {
        a: view_forward(params, &batch.view_a)?,
        b: view_forward(params, &batch.view_b)?,
    })
}

/// Single-view forward used for evaluation and the per-epoch embedding
/// refresh.
pub fn forward_single(params: &ModelParams, rows: &Mat64) -> Result<ViewCache> {
    view_forward(params, rows)
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// State needed to backpropagate through the cosine classifier.
pub struct ClassifyCache {
    h_hat: Mat64,
    h_norms: Vec<f64>,
    t_hat: Mat64,
    t_norms: Vec<f64>,
    tau: f64,
    pub probs: Mat64,
}

fn normalize_rows(m: &Mat64) -> Result<(Mat64, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if n <= crate::numeric::ZERO_NORM_EPS {
            return Err(GcdError::ZeroVector { norm: n });
        }
        for v in out.row_mut(i) {
            *v /= n;
        }
        norms.push(n);
    }
    Ok((out, norms))
}

/// Cosine logits (1/tau) h_hat t_hat^T without the softmax.
pub fn cosine_logits(params: &ModelParams, h: &Mat64, tau: f64) -> Result<(Mat64, ClassifyCache)> {
    if tau <= 0.0 {
        return Err(GcdError::NonPositiveTemperature(tau));
    }
    if h.cols() != params.prototypes.cols() {
        return Err(GcdError::ShapeMismatch {
            expected: format!("hidden width {}", params.prototypes.cols()),
            got: format!("{}", h.cols()),
        });
    }
    let (h_hat, h_norms) = normalize_rows(h)?;
    let (t_hat, t_norms) = normalize_rows(&params.prototypes)?;
    let mut logits = h_hat.matmul_transpose(&t_hat);
    logits.scale(1.0 / tau);
    Ok((
        logits,
        ClassifyCache { h_hat, h_norms, t_hat, t_norms, tau, probs: Mat64::zeros(0, 0) },
    ))
}

/// Softmax over cosine similarity to each prototype; rows sum to 1.
pub fn classify_with_cache(params: &ModelParams, h: &Mat64, tau: f64) -> Result<(Mat64, ClassifyCache)> {
    let (logits, mut cache) = cosine_logits(params, h, tau)?;
    let mut probs = Mat64::zeros(logits.rows(), logits.cols());
    for i in 0..logits.rows() {
        let row = crate::numeric::softmax_temp(logits.row(i), 1.0)?;
        probs.row_mut(i).copy_from_slice(&row);
    }
    cache.probs = probs.clone();
    Ok((probs, cache))
}

pub fn classify(params: &ModelParams, h: &Mat64, tau: f64) -> Result<Mat64> {
    classify_with_cache(params, h, tau).map(|(p, _)| p)
}

/// Gradient of `v / |v|` composed with an upstream gradient on the unit
/// vector: `(g - (g . v_hat) v_hat) / |v|`.
fn unnormalize_grad(upstream: &[f64], unit: &[f64], raw_norm: f64, out: &mut [f64]) {
    let along = dot(upstream, unit);
    for ((o, &g), &u) in out.iter_mut().zip(upstream).zip(unit) {
        *o = (g - along * u) / raw_norm;
    }
}

/// Maps a gradient on the classifier logits to gradients on the raw hidden
/// features and the raw prototype rows.
pub fn classify_backward(cache: &ClassifyCache, d_logits: &Mat64) -> Result<(Mat64, Mat64)> {
    if d_logits.rows() != cache.h_hat.rows() || d_logits.cols() != cache.t_hat.rows() {
        return Err(GcdError::CacheMismatch(format!(
            "logit gradient {}x{} vs cache {}x{}",
            d_logits.rows(),
            d_logits.cols(),
            cache.h_hat.rows(),
            cache.t_hat.rows()
        )));
    }
    let inv_tau = 1.0 / cache.tau;
    // d h_hat = (1/tau) d_logits t_hat; d t_hat = (1/tau) d_logits^T h_hat.
    let mut d_h_hat = d_logits.matmul(&cache.t_hat);
    d_h_hat.scale(inv_tau);
    let mut d_t_hat = d_logits.transpose_matmul(&cache.h_hat);
    d_t_hat.scale(inv_tau);

    let mut d_h = Mat64::zeros(d_h_hat.rows(), d_h_hat.cols());
    for i in 0..d_h.rows() {
        unnormalize_grad(d_h_hat.row(i), cache.h_hat.row(i), cache.h_norms[i], d_h.row_mut(i));
    }
    let mut d_t = Mat64::zeros(d_t_hat.rows(), d_t_hat.cols());
    for k in 0..d_t.rows() {
        unnormalize_grad(d_t_hat.row(k), cache.t_hat.row(k), cache.t_norms[k], d_t.row_mut(k));
    }
    Ok((d_h, d_t))
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

/// Upstream gradients for one paired forward pass. `d_h_*` are direct
/// gradients on the hidden features (from the classifier path), `d_z_*` act
/// on the normalized projected features, and `d_prototypes` on the raw
/// prototype rows.
pub struct UpstreamGrads {
    pub d_h_a: Mat64,
    pub d_h_b: Mat64,
    pub d_z_a: Mat64,
    pub d_z_b: Mat64,
    pub d_prototypes: Mat64,
}

impl UpstreamGrads {
    pub fn zeros(batch: usize, params: &ModelParams) -> Self {
        UpstreamGrads {
            d_h_a: Mat64::zeros(batch, params.hidden_dim()),
            d_h_b: Mat64::zeros(batch, params.hidden_dim()),
            d_z_a: Mat64::zeros(batch, params.proj_dim()),
            d_z_b: Mat64::zeros(batch, params.proj_dim()),
            d_prototypes: Mat64::zeros(params.k_total(), params.hidden_dim()),
        }
    }
}

fn view_backward(
    params: &ModelParams,
    cache: &ViewCache,
    d_h_direct: &Mat64,
    d_z: &Mat64,
    grads: &mut ModelGrads,
) -> Result<()> {
    if d_z.rows() != cache.z.rows() || d_z.cols() != cache.z.cols() {
        return Err(GcdError::CacheMismatch(format!(
            "z gradient {}x{} vs cache {}x{}",
            d_z.rows(),
            d_z.cols(),
            cache.z.rows(),
            cache.z.cols()
        )));
    }
    if d_h_direct.rows() != cache.h.rows() || d_h_direct.cols() != cache.h.cols() {
        return Err(GcdError::CacheMismatch(format!(
            "h gradient {}x{} vs cache {}x{}",
            d_h_direct.rows(),
            d_h_direct.cols(),
            cache.h.rows(),
            cache.h.cols()
        )));
    }
    // Through z = u / |u|.
    let mut d_u = Mat64::zeros(d_z.rows(), d_z.cols());
    for i in 0..d_z.rows() {
        unnormalize_grad(d_z.row(i), cache.z.row(i), cache.u_norms[i], d_u.row_mut(i));
    }
    // Through the projection head into h, then add the direct h gradient.
    let mut d_h = stack_backward(&params.proj, &cache.proj, &d_u, &mut grads.proj);
    d_h.add_assign(d_h_direct);
    // Through the encoder; the input gradient is discarded.
    let _ = stack_backward(&params.encoder, &cache.enc, &d_h, &mut grads.encoder);
    Ok(())
}

/// Exact reverse accumulation through both views. Returns gradients of the
/// same shape as the parameters; zero upstream gives zero gradient.
pub fn backward(params: &ModelParams, cache: &ForwardCache, upstream: &UpstreamGrads) -> Result<ModelGrads> {
    let mut grads = ModelGrads::zeros_like(params);
    view_backward(params, &cache.a, &upstream.d_h_a, &upstream.d_z_a, &mut grads)?;
    view_backward(params, &cache.b, &upstream.d_h_b, &upstream.d_z_b, &mut grads)?;
    if upstream.d_prototypes.rows() != params.prototypes.rows()
        || upstream.d_prototypes.cols() != params.prototypes.cols()
    {
        return Err(GcdError::CacheMismatch("prototype gradient shape".into()));
    }
    grads.prototypes.add_assign(&upstream.d_prototypes);
    Ok(grads)
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct LayerSpec {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    k_total: usize,
    hidden_dim: usize,
    encoder: Vec<LayerSpec>,
    proj: Vec<LayerSpec>,
    /// Base64 of the canonical flat parameter vector, little-endian f64.
    blob: String,
}

fn layer_specs(layers: &[Layer]) -> Vec<LayerSpec> {
    layers
        .iter()
        .map(|l| LayerSpec { in_dim: l.in_dim(), out_dim: l.out_dim(), activation: l.activation })
        .collect()
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let flat = params.flatten();
    let mut bytes = Vec::with_capacity(flat.len() * 8);
    for v in flat {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let ckpt = Checkpoint {
        version: 1,
        k_total: params.k_total(),
        hidden_dim: params.hidden_dim(),
        encoder: layer_specs(&params.encoder),
        proj: layer_specs(&params.proj),
        blob: base64::engine::general_purpose::STANDARD.encode(&bytes),
    };
    let json = serde_json::to_string_pretty(&ckpt)?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != 1 {
        return Err(GcdError::Config(format!("unsupported checkpoint version {}", ckpt.version)));
    }
    let build = |specs: &[LayerSpec]| -> Vec<Layer> {
        specs
            .iter()
            .map(|s| Layer {
                weight: Mat64::zeros(s.in_dim, s.out_dim),
                bias: vec![0.0; s.out_dim],
                activation: s.activation,
            })
            .collect()
    };
    let mut params = ModelParams {
        encoder: build(&ckpt.encoder),
        proj: build(&ckpt.proj),
        prototypes: Mat64::zeros(ckpt.k_total, ckpt.hidden_dim),
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(ckpt.blob.as_bytes())
        .map_err(|e| GcdError::Config(format!("bad checkpoint blob: {e}")))?;
    if bytes.len() != params.num_parameters() * 8 {
        return Err(GcdError::LengthMismatch { left: bytes.len() / 8, right: params.num_parameters() });
    }
    let flat: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    params.assign_from_flat(&flat)?;
    params.validate()?;
    Ok(params)
}
