//! Mean-field Gaussian multi-head MLP.
//!
//! Every weight and bias carries an independent Gaussian `N(mu, exp(logvar))`.
//! The network is a shared ReLU trunk followed by one linear head per task.
//! Training minimises the β-ELBO loss
//!
//! ```text
//! loss = nll + beta * KL(q || prior) / n_task
//! ```
//!
//! where `nll` is the Monte-Carlo mean negative log-likelihood of a minibatch
//! under reparameterised weight samples `w = mu + exp(logvar / 2) * eps`.
//! Gradients are computed in closed form by [`VariationalNet::backward_gradients`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numerics::{affine, matmul_nt, matmul_tn, AdamState, Rng, Tensor2};

/// Log-variance every parameter starts from.
pub const INIT_LOGVAR: f64 = -6.0;

/// Upper bound on the standard deviation of freshly initialised means.
const INIT_MEAN_STD: f64 = 0.1;

/// KL divergence between two scalar Gaussians parameterised by mean and
/// log-variance: `KL(N(mu_q, e^lv_q) || N(mu_p, e^lv_p))`.
pub fn gaussian_kl(mu_q: f64, logvar_q: f64, mu_p: f64, logvar_p: f64) -> f64 {
    let d = logvar_q - logvar_p;
    let diff = mu_q - mu_p;
    // exp(d) - 1 - d >= 0; exp_m1 keeps it accurate near d = 0.
    let var_term = (d.exp_m1() - d).max(0.0);
    0.5 * (var_term + diff * diff * (-logvar_p).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalLayer {
    pub mu_w: Tensor2,
    pub logvar_w: Tensor2,
    pub mu_b: Vec<f64>,
    pub logvar_b: Vec<f64>,
}

impl VariationalLayer {
    /// Means drawn from `N(0, s^2)` with `s = min(0.1, 1/sqrt(fan_in))`, zero
    /// bias means, and log-variance [`INIT_LOGVAR`] everywhere.
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut Rng) -> Self {
        let std = INIT_MEAN_STD.min(1.0 / (input_dim as f64).sqrt());
        let mut mu_w = Tensor2::zeros(input_dim, output_dim);
        for v in mu_w.data_mut() {
            *v = std * rng.normal();
        }
        Self {
            mu_w,
            logvar_w: Tensor2::filled(input_dim, output_dim, INIT_LOGVAR),
            mu_b: vec![0.0; output_dim],
            logvar_b: vec![INIT_LOGVAR; output_dim],
        }
    }

    /// `N(0, 1)` on every parameter.
    pub fn standard_normal(input_dim: usize, output_dim: usize) -> Self {
        Self {
            mu_w: Tensor2::zeros(input_dim, output_dim),
            logvar_w: Tensor2::zeros(input_dim, output_dim),
            mu_b: vec![0.0; output_dim],
            logvar_b: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mu_w.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.mu_w.cols()
    }

    pub fn param_count(&self) -> usize {
        2 * (self.mu_w.data().len() + self.mu_b.len())
    }

    fn same_shape(&self, other: &VariationalLayer) -> bool {
        self.mu_w.shape() == other.mu_w.shape() && self.mu_b.len() == other.mu_b.len()
    }

    fn is_finite(&self) -> bool {
        self.mu_w.is_finite()
            && self.logvar_w.is_finite()
            && self.mu_b.iter().chain(&self.logvar_b).all(|v| v.is_finite())
    }

    /// Total KL from this layer's posterior to `prior`. Shapes must agree.
    pub fn kl_to(&self, prior: &VariationalLayer) -> f64 {
        let w: f64 = self
            .mu_w
            .data()
            .iter()
            .zip(self.logvar_w.data())
            .zip(prior.mu_w.data().iter().zip(prior.logvar_w.data()))
            .map(|((&mq, &lq), (&mp, &lp))| gaussian_kl(mq, lq, mp, lp))
            .sum();
        let b: f64 = self
            .mu_b
            .iter()
            .zip(&self.logvar_b)
            .zip(prior.mu_b.iter().zip(&prior.logvar_b))
            .map(|((&mq, &lq), (&mp, &lp))| gaussian_kl(mq, lq, mp, lp))
            .sum();
        w + b
    }

    /// Reparameterised weights and biases for one noise draw.
    fn sample(&self, noise: &LayerNoise, sigma_scale: f64) -> (Tensor2, Vec<f64>) {
        let mut w = self.mu_w.clone();
        for ((w, &lv), &e) in w
            .data_mut()
            .iter_mut()
            .zip(self.logvar_w.data())
            .zip(noise.w.data())
        {
            *w += sigma_scale * (0.5 * lv).exp() * e;
        }
        let b = self
            .mu_b
            .iter()
            .zip(&self.logvar_b)
            .zip(&noise.b)
            .map(|((&m, &lv), &e)| m + sigma_scale * (0.5 * lv).exp() * e)
            .collect();
        (w, b)
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.mu_w.data());
        out.extend_from_slice(self.logvar_w.data());
        out.extend_from_slice(&self.mu_b);
        out.extend_from_slice(&self.logvar_b);
    }

    fn unflatten_from(&mut self, src: &[f64]) -> usize {
        let nw = self.mu_w.data().len();
        let nb = self.mu_b.len();
        let mut at = 0;
        self.mu_w.data_mut().copy_from_slice(&src[at..at + nw]);
        at += nw;
        self.logvar_w.data_mut().copy_from_slice(&src[at..at + nw]);
        at += nw;
        self.mu_b.copy_from_slice(&src[at..at + nb]);
        at += nb;
        self.logvar_b.copy_from_slice(&src[at..at + nb]);
        at + nb
    }
}

/// Standard-normal noise for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

/// Frozen reparameterisation noise for `n_samples` passes through the trunk
/// and one head. Drawing it separately from the forward pass lets tests
/// evaluate the loss repeatedly under identical noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSet {
    head: usize,
    samples: Vec<Vec<LayerNoise>>,
}

impl NoiseSet {
    /// Draws sample-major, layer-major: for every sample, each layer's weight
    /// noise then bias noise.
    pub fn draw(net: &VariationalNet, head: usize, n_samples: usize, rng: &mut Rng) -> Result<Self> {
        Self::build(net, head, n_samples, |len, out| {
            debug_assert_eq!(out.len(), len);
            rng.fill_normal(out)
        })
    }

    /// All-zero noise: every sample uses the mean weights.
    pub fn zeros(net: &VariationalNet, head: usize, n_samples: usize) -> Result<Self> {
        Self::build(net, head, n_samples, |_, _| {})
    }

    fn build(
        net: &VariationalNet,
        head: usize,
        n_samples: usize,
        mut fill: impl FnMut(usize, &mut [f64]),
    ) -> Result<Self> {
        if n_samples == 0 {
            return Err(Error::arg("n_samples must be at least 1"));
        }
        let layers = net.layers(head)?;
        let samples = (0..n_samples)
            .map(|_| {
                layers
                    .iter()
                    .map(|l| {
                        let mut w = Tensor2::zeros(l.input_dim(), l.output_dim());
                        let len = w.data().len();
                        fill(len, w.data_mut());
                        let mut b = vec![0.0; l.output_dim()];
                        fill(b.len(), &mut b);
                        LayerNoise { w, b }
                    })
                    .collect()
            })
            .collect();
        Ok(Self { head, samples })
    }

    pub fn head(&self) -> usize {
        self.head
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn sample(&self, s: usize) -> &[LayerNoise] {
        &self.samples[s]
    }

    pub fn sample_mut(&mut self, s: usize) -> &mut [LayerNoise] {
        &mut self.samples[s]
    }
}

#[derive(Debug, Clone)]
struct SampleCache {
    /// Input to every layer after the first (post-ReLU hidden activations).
    hidden: Vec<Tensor2>,
    /// Sampled weight matrices, one per layer.
    weights: Vec<Tensor2>,
    probs: Tensor2,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    head: usize,
    input: Tensor2,
    noise: NoiseSet,
    samples: Vec<SampleCache>,
    labels: Option<Vec<usize>>,
}

impl ForwardCache {
    pub fn head(&self) -> usize {
        self.head
    }

    pub fn noise(&self) -> &NoiseSet {
        &self.noise
    }

    /// Softmax outputs of each Monte-Carlo sample.
    pub fn probabilities(&self) -> impl Iterator<Item = &Tensor2> {
        self.samples.iter().map(|s| &s.probs)
    }
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// One `[B x O]` logit matrix per Monte-Carlo sample.
    pub logits: Vec<Tensor2>,
    pub cache: ForwardCache,
}

/// Loss components of one β-ELBO evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub n_task: usize,
    pub loss: f64,
}

impl ElboBreakdown {
    pub fn new(nll: f64, kl: f64, beta: f64, n_task: usize) -> Self {
        Self {
            nll,
            kl,
            beta,
            n_task,
            loss: nll + beta * kl / n_task as f64,
        }
    }
}

/// Gradient with the same layout as a [`VariationalLayer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub mu_w: Tensor2,
    pub logvar_w: Tensor2,
    pub mu_b: Vec<f64>,
    pub logvar_b: Vec<f64>,
}

impl LayerGrad {
    fn zeros_like(l: &VariationalLayer) -> Self {
        Self {
            mu_w: Tensor2::zeros(l.input_dim(), l.output_dim()),
            logvar_w: Tensor2::zeros(l.input_dim(), l.output_dim()),
            mu_b: vec![0.0; l.output_dim()],
            logvar_b: vec![0.0; l.output_dim()],
        }
    }

    fn slices(&self) -> [&[f64]; 4] {
        [
            self.mu_w.data(),
            self.logvar_w.data(),
            &self.mu_b,
            &self.logvar_b,
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.mu_w.data_mut(),
            self.logvar_w.data_mut(),
            &mut self.mu_b,
            &mut self.logvar_b,
        ]
    }
}

/// Gradients for the trunk layers followed by the active head.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrad>,
}

impl ParamGrads {
    /// Flattened in the same order as [`VariationalNet::flat_params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for s in l.slices() {
                out.extend_from_slice(s);
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add(&self, other: &ParamGrads) -> ParamGrads {
        let mut out = self.clone();
        for (a, b) in out.layers.iter_mut().zip(&other.layers) {
            for (sa, sb) in a.slices_mut().into_iter().zip(b.slices()) {
                for (x, y) in sa.iter_mut().zip(sb) {
                    *x += y;
                }
            }
        }
        out
    }
}

/// Gradient of the β-ELBO loss, split into its likelihood and KL parts.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub likelihood: ParamGrads,
    /// Already scaled by `beta / n_task`.
    pub kl: ParamGrads,
}

impl Gradients {
    pub fn total(&self) -> ParamGrads {
        self.likelihood.add(&self.kl)
    }
}

/// Frozen copy of the variational parameters, used as the prior of the next
/// task. Heads absent from the snapshot are treated as `N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    trunk: Vec<VariationalLayer>,
    heads: BTreeMap<usize, VariationalLayer>,
}

impl PosteriorSnapshot {
    /// `N(0, 1)` on every trunk parameter and no recorded heads.
    pub fn standard_normal(net: &VariationalNet) -> Self {
        Self {
            trunk: net
                .trunk
                .iter()
                .map(|l| VariationalLayer::standard_normal(l.input_dim(), l.output_dim()))
                .collect(),
            heads: BTreeMap::new(),
        }
    }

    pub fn trunk(&self) -> &[VariationalLayer] {
        &self.trunk
    }

    pub fn head(&self, index: usize) -> Option<&VariationalLayer> {
        self.heads.get(&index)
    }

    /// Binary encoding; the byte layout is documented in the repository README.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&(self.trunk.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.heads.len() as u32).to_le_bytes());
        let write_layer = |out: &mut Vec<u8>, l: &VariationalLayer| {
            out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
            let mut flat = Vec::with_capacity(l.param_count());
            l.flatten_into(&mut flat);
            for v in flat {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for l in &self.trunk {
            write_layer(&mut out, l);
        }
        for (&idx, l) in &self.heads {
            out.extend_from_slice(&(idx as u32).to_le_bytes());
            write_layer(&mut out, l);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::decode(bytes, Path::new("<memory>"))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::decode(&bytes, path)
    }

    fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader {
            bytes,
            at: 0,
            path: path.to_path_buf(),
        };
        let magic = r.take(SNAPSHOT_MAGIC.len())?;
        if magic != SNAPSHOT_MAGIC {
            return Err(r.error(0, "bad snapshot magic"));
        }
        let n_trunk = r.u32()? as usize;
        let n_heads = r.u32()? as usize;
        let mut trunk = Vec::with_capacity(n_trunk);
        for _ in 0..n_trunk {
            trunk.push(r.layer()?);
        }
        let mut heads = BTreeMap::new();
        for _ in 0..n_heads {
            let idx = r.u32()? as usize;
            heads.insert(idx, r.layer()?);
        }
        if r.at != bytes.len() {
            return Err(r.error(r.at, "trailing bytes after snapshot"));
        }
        Ok(Self { trunk, heads })
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"VCLSNAP1";

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: PathBuf,
}

impl ByteReader<'_> {
    fn error(&self, offset: usize, detail: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: offset as u64,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.error(self.at, "unexpected end of snapshot"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| self.error(self.at, "layer size overflows"))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn layer(&mut self) -> Result<VariationalLayer> {
        let i = self.u32()? as usize;
        let o = self.u32()? as usize;
        let mu_w = Tensor2::new(i, o, self.f64s(i * o)?)?;
        let logvar_w = Tensor2::new(i, o, self.f64s(i * o)?)?;
        let mu_b = self.f64s(o)?;
        let logvar_b = self.f64s(o)?;
        Ok(VariationalLayer {
            mu_w,
            logvar_w,
            mu_b,
            logvar_b,
        })
    }
}

/// Adam state for every parameter array of the trunk and one head.
#[derive(Debug, Clone)]
pub struct NetOptimizer {
    head: usize,
    states: Vec<[AdamState; 4]>,
}

impl NetOptimizer {
    pub fn new(net: &VariationalNet, head: usize, lr: f64) -> Result<Self> {
        let states = net
            .layers(head)?
            .iter()
            .map(|l| {
                let nw = l.mu_w.data().len();
                let nb = l.mu_b.len();
                [
                    AdamState::new(nw, lr),
                    AdamState::new(nw, lr),
                    AdamState::new(nb, lr),
                    AdamState::new(nb, lr),
                ]
            })
            .collect();
        Ok(Self { head, states })
    }

    pub fn head(&self) -> usize {
        self.head
    }
}

/// Layer widths of a network: input, hidden trunk, and per-head output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dims: &[usize], output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
        }
    }

    pub fn build(&self, rng: &mut Rng) -> Result<VariationalNet> {
        VariationalNet::init_network(self.input_dim, &self.hidden_dims, self.output_dim, rng)
    }
}

/// Shared-trunk, multi-head variational MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalNet {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    head_output_dim: usize,
    trunk: Vec<VariationalLayer>,
    heads: BTreeMap<usize, VariationalLayer>,
    zero_variance: bool,
    version: u64,
}

impl VariationalNet {
    /// Builds the trunk; heads are added per task with [`Self::add_head`].
    pub fn init_network(
        input_dim: usize,
        hidden_dims: &[usize],
        head_output_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || head_output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::arg(format!(
                "network dimensions must be positive: input {input_dim}, hidden {hidden_dims:?}, output {head_output_dim}"
            )));
        }
        if hidden_dims.is_empty() {
            return Err(Error::arg("at least one hidden layer is required"));
        }
        let mut trunk = Vec::with_capacity(hidden_dims.len());
        let mut prev = input_dim;
        for &h in hidden_dims {
            trunk.push(VariationalLayer::init(prev, h, rng));
            prev = h;
        }
        Ok(Self {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            head_output_dim,
            trunk,
            heads: BTreeMap::new(),
            zero_variance: false,
            version: 0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn head_output_dim(&self) -> usize {
        self.head_output_dim
    }

    pub fn trunk(&self) -> &[VariationalLayer] {
        &self.trunk
    }

    pub fn head(&self, index: usize) -> Result<&VariationalLayer> {
        self.heads
            .get(&index)
            .ok_or_else(|| Error::Lookup(format!("no head with index {index}")))
    }

    pub fn has_head(&self, index: usize) -> bool {
        self.heads.contains_key(&index)
    }

    pub fn head_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.keys().copied()
    }

    /// Monotone counter bumped by every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Adds a freshly initialised head. Returns `false` if it already existed.
    pub fn add_head(&mut self, index: usize, rng: &mut Rng) -> bool {
        if self.heads.contains_key(&index) {
            return false;
        }
        let last = *self.hidden_dims.last().expect("non-empty trunk");
        self.heads
            .insert(index, VariationalLayer::init(last, self.head_output_dim, rng));
        self.version += 1;
        true
    }

    pub fn trunk_layer_mut(&mut self, i: usize) -> &mut VariationalLayer {
        self.version += 1;
        &mut self.trunk[i]
    }

    pub fn head_mut(&mut self, index: usize) -> Result<&mut VariationalLayer> {
        self.version += 1;
        self.heads
            .get_mut(&index)
            .ok_or_else(|| Error::Lookup(format!("no head with index {index}")))
    }

    /// Forces every sampled weight to its mean (the `logvar -> -inf` limit).
    pub fn set_zero_variance(&mut self, on: bool) {
        self.zero_variance = on;
        self.version += 1;
    }

    fn sigma_scale(&self) -> f64 {
        if self.zero_variance {
            0.0
        } else {
            1.0
        }
    }

    /// Trunk layers followed by the requested head.
    pub fn layers(&self, head: usize) -> Result<Vec<&VariationalLayer>> {
        let h = self.head(head)?;
        Ok(self.trunk.iter().chain(std::iter::once(h)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.iter().chain(self.heads.values()).all(|l| l.is_finite())
    }

    /// Trunk and head parameters flattened layer by layer as
    /// `mu_w, logvar_w, mu_b, logvar_b`.
    pub fn flat_params(&self, head: usize) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for l in self.layers(head)? {
            l.flatten_into(&mut out);
        }
        Ok(out)
    }

    pub fn set_flat_params(&mut self, head: usize, params: &[f64]) -> Result<()> {
        let expected: usize = self.layers(head)?.iter().map(|l| l.param_count()).sum();
        if params.len() != expected {
            return Err(Error::dim(
                "set_flat_params",
                format!("expected {expected} values, got {}", params.len()),
            ));
        }
        let mut at = 0;
        for l in self.trunk.iter_mut() {
            at += l.unflatten_from(&params[at..]);
        }
        let h = self.heads.get_mut(&head).expect("checked by layers()");
        h.unflatten_from(&params[at..]);
        self.version += 1;
        Ok(())
    }

    /// Draws fresh noise and runs `n_samples` stochastic forward passes.
    pub fn reparameterized_forward(
        &self,
        head: usize,
        x: &Tensor2,
        rng: &mut Rng,
        n_samples: usize,
    ) -> Result<ForwardPass> {
        let noise = NoiseSet::draw(self, head, n_samples, rng)?;
        self.forward_with_noise(head, x, noise)
    }

    /// Forward pass under caller-supplied noise.
    pub fn forward_with_noise(&self, head: usize, x: &Tensor2, noise: NoiseSet) -> Result<ForwardPass> {
        let layers = self.layers(head)?;
        if x.cols() != self.input_dim {
            return Err(Error::dim(
                "forward",
                format!("input has {} columns, network expects {}", x.cols(), self.input_dim),
            ));
        }
        if noise.head != head {
            return Err(Error::State(format!(
                "noise drawn for head {}, forward requested head {head}",
                noise.head
            )));
        }
        for sample in &noise.samples {
            let ok = sample.len() == layers.len()
                && sample
                    .iter()
                    .zip(&layers)
                    .all(|(n, l)| n.w.shape() == l.mu_w.shape() && n.b.len() == l.mu_b.len());
            if !ok {
                return Err(Error::dim("forward", "noise shapes do not match the network"));
            }
        }
        let scale = self.sigma_scale();
        let last = layers.len() - 1;
        let mut logits_out = Vec::with_capacity(noise.samples.len());
        let mut samples = Vec::with_capacity(noise.samples.len());
        for sample_noise in &noise.samples {
            let mut hidden = Vec::with_capacity(last);
            let mut weights = Vec::with_capacity(layers.len());
            let mut z = Tensor2::zeros(0, 0);
            for (li, (layer, n)) in layers.iter().zip(sample_noise).enumerate() {
                let (w, b) = layer.sample(n, scale);
                let input = if li == 0 { x } else { &hidden[li - 1] };
                z = affine(input, &w, &b)?;
                weights.push(w);
                if li < last {
                    z.map_inplace(|v| v.max(0.0));
                    hidden.push(std::mem::replace(&mut z, Tensor2::zeros(0, 0)));
                }
            }
            let probs = crate::numerics::softmax_rows(&z);
            logits_out.push(z);
            samples.push(SampleCache {
                hidden,
                weights,
                probs,
            });
        }
        Ok(ForwardPass {
            logits: logits_out,
            cache: ForwardCache {
                version: self.version,
                head,
                input: x.clone(),
                noise,
                samples,
                labels: None,
            },
        })
    }

    /// Forward pass that keeps only the softmax outputs.
    fn predict_probs(&self, head: usize, x: &Tensor2, noise: &NoiseSet) -> Result<Tensor2> {
        let layers = self.layers(head)?;
        if x.cols() != self.input_dim {
            return Err(Error::dim(
                "posterior_predict",
                format!("input has {} columns, network expects {}", x.cols(), self.input_dim),
            ));
        }
        let scale = self.sigma_scale();
        let last = layers.len() - 1;
        let mut mean = Tensor2::zeros(x.rows(), self.head_output_dim);
        for sample_noise in &noise.samples {
            let mut a = x.clone();
            for (li, (layer, n)) in layers.iter().zip(sample_noise).enumerate() {
                let (w, b) = layer.sample(n, scale);
                a = affine(&a, &w, &b)?;
                if li < last {
                    a.map_inplace(|v| v.max(0.0));
                }
            }
            let p = crate::numerics::softmax_rows(&a);
            for (m, v) in mean.data_mut().iter_mut().zip(p.data()) {
                *m += v;
            }
        }
        let n = noise.samples.len() as f64;
        mean.map_inplace(|v| v / n);
        Ok(mean)
    }

    /// Posterior predictive: softmax probabilities averaged over
    /// `n_eval_samples` weight draws.
    pub fn posterior_predict(
        &self,
        head: usize,
        x: &Tensor2,
        rng: &mut Rng,
        n_eval_samples: usize,
    ) -> Result<Tensor2> {
        let noise = NoiseSet::draw(self, head, n_eval_samples, rng)?;
        self.predict_probs(head, x, &noise)
    }

    /// KL from the trunk and `active_head` to `prior`. Other heads are
    /// ignored; an active head missing from the prior is compared to `N(0, 1)`.
    pub fn kl_to_prior(&self, prior: &PosteriorSnapshot, active_head: usize) -> Result<f64> {
        self.check_prior(prior)?;
        let mut kl: f64 = self
            .trunk
            .iter()
            .zip(&prior.trunk)
            .map(|(q, p)| q.kl_to(p))
            .sum();
        let h = self.head(active_head)?;
        kl += match prior.heads.get(&active_head) {
            Some(p) if p.same_shape(h) => h.kl_to(p),
            Some(_) => {
                return Err(Error::dim(
                    "kl_to_prior",
                    format!("prior head {active_head} has a different shape"),
                ))
            }
            None => h.kl_to(&VariationalLayer::standard_normal(h.input_dim(), h.output_dim())),
        };
        Ok(kl)
    }

    fn check_prior(&self, prior: &PosteriorSnapshot) -> Result<()> {
        let ok = prior.trunk.len() == self.trunk.len()
            && prior.trunk.iter().zip(&self.trunk).all(|(p, q)| p.same_shape(q));
        if ok {
            Ok(())
        } else {
            Err(Error::dim("kl_to_prior", "prior trunk shapes differ from the network"))
        }
    }

    fn validate_batch(&self, head: usize, x: &Tensor2, labels: &[usize], beta: f64, n_task: usize) -> Result<()> {
        if labels.len() != x.rows() {
            return Err(Error::dim(
                "beta_elbo_loss",
                format!("{} labels for {} inputs", labels.len(), x.rows()),
            ));
        }
        let classes = self.head(head)?.output_dim();
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::arg(format!("label {bad} out of range for {classes} classes")));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::arg(format!("beta must be positive and finite, got {beta}")));
        }
        if n_task < labels.len() {
            return Err(Error::arg(format!(
                "n_task ({n_task}) must be at least the batch size ({})",
                labels.len()
            )));
        }
        Ok(())
    }

    /// β-ELBO loss under the given noise; returns the cache needed by
    /// [`Self::backward_gradients`].
    #[allow(clippy::too_many_arguments)]
    pub fn elbo_forward(
        &self,
        prior: &PosteriorSnapshot,
        head: usize,
        x: &Tensor2,
        labels: &[usize],
        beta: f64,
        n_task: usize,
        noise: NoiseSet,
    ) -> Result<(ElboBreakdown, ForwardCache)> {
        self.validate_batch(head, x, labels, beta, n_task)?;
        let pass = self.forward_with_noise(head, x, noise)?;
        let mut total = 0.0;
        for z in &pass.logits {
            for (r, &y) in labels.iter().enumerate() {
                let row = z.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
        }
        let nll = total / (pass.logits.len() * labels.len()) as f64;
        let kl = self.kl_to_prior(prior, head)?;
        let breakdown = ElboBreakdown::new(nll, kl, beta, n_task);
        let mut cache = pass.cache;
        cache.labels = Some(labels.to_vec());
        Ok((breakdown, cache))
    }

    /// β-ELBO loss with freshly drawn noise.
    #[allow(clippy::too_many_arguments)]
    pub fn beta_elbo_loss(
        &self,
        prior: &PosteriorSnapshot,
        head: usize,
        x: &Tensor2,
        labels: &[usize],
        beta: f64,
        n_task: usize,
        rng: &mut Rng,
        n_samples: usize,
    ) -> Result<ElboBreakdown> {
        self.validate_batch(head, x, labels, beta, n_task)?;
        let noise = NoiseSet::draw(self, head, n_samples, rng)?;
        Ok(self.elbo_forward(prior, head, x, labels, beta, n_task, noise)?.0)
    }

    /// Exact gradient of the β-ELBO loss for the trunk and the cached head.
    pub fn backward_gradients(
        &self,
        prior: &PosteriorSnapshot,
        cache: &ForwardCache,
        beta: f64,
        n_task: usize,
    ) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::State(format!(
                "forward cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        let labels = cache
            .labels
            .as_ref()
            .ok_or_else(|| Error::State("forward cache carries no labels".into()))?;
        self.check_prior(prior)?;
        let layers = self.layers(cache.head)?;
        let scale = self.sigma_scale();
        let n_layers = layers.len();
        let norm = 1.0 / (cache.samples.len() * labels.len()) as f64;

        // Pathwise factor d w / d logvar = 0.5 * sigma * eps.
        let half_sigma_w: Vec<Vec<f64>> = layers
            .iter()
            .map(|l| l.logvar_w.data().iter().map(|&lv| 0.5 * scale * (0.5 * lv).exp()).collect())
            .collect();
        let half_sigma_b: Vec<Vec<f64>> = layers
            .iter()
            .map(|l| l.logvar_b.iter().map(|&lv| 0.5 * scale * (0.5 * lv).exp()).collect())
            .collect();

        let mut lik: Vec<LayerGrad> = layers.iter().map(|l| LayerGrad::zeros_like(l)).collect();
        for (s, sample) in cache.samples.iter().enumerate() {
            let noise = cache.noise.sample(s);
            let mut dz = sample.probs.clone();
            for (r, &y) in labels.iter().enumerate() {
                let row = dz.row_mut(r);
                row[y] -= 1.0;
                for v in row.iter_mut() {
                    *v *= norm;
                }
            }
            for li in (0..n_layers).rev() {
                let input = if li == 0 { &cache.input } else { &sample.hidden[li - 1] };
                let dw = matmul_tn(input, &dz)?;
                let g = &mut lik[li];
                for (((gm, gl), &d), (&e, &hs)) in g
                    .mu_w
                    .data_mut()
                    .iter_mut()
                    .zip(g.logvar_w.data_mut().iter_mut())
                    .zip(dw.data())
                    .zip(noise[li].w.data().iter().zip(&half_sigma_w[li]))
                {
                    *gm += d;
                    *gl += d * e * hs;
                }
                for c in 0..dz.cols() {
                    let db: f64 = (0..dz.rows()).map(|r| dz.get(r, c)).sum();
                    g.mu_b[c] += db;
                    g.logvar_b[c] += db * noise[li].b[c] * half_sigma_b[li][c];
                }
                if li > 0 {
                    let mut da = matmul_nt(&dz, &sample.weights[li])?;
                    for (d, &a) in da.data_mut().iter_mut().zip(input.data()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    dz = da;
                }
            }
        }

        let coef = beta / n_task as f64;
        let std_head;
        let head_prior = match prior.heads.get(&cache.head) {
            Some(p) => p,
            None => {
                let h = layers[n_layers - 1];
                std_head = VariationalLayer::standard_normal(h.input_dim(), h.output_dim());
                &std_head
            }
        };
        let priors: Vec<&VariationalLayer> = prior.trunk.iter().chain(std::iter::once(head_prior)).collect();
        let kl = layers
            .iter()
            .zip(&priors)
            .map(|(q, p)| {
                let mut g = LayerGrad::zeros_like(q);
                kl_grad(
                    q.mu_w.data(),
                    q.logvar_w.data(),
                    p.mu_w.data(),
                    p.logvar_w.data(),
                    coef,
                    g.mu_w.data_mut(),
                    g.logvar_w.data_mut(),
                );
                kl_grad(&q.mu_b, &q.logvar_b, &p.mu_b, &p.logvar_b, coef, &mut g.mu_b, &mut g.logvar_b);
                g
            })
            .collect();
        Ok(Gradients {
            likelihood: ParamGrads { layers: lik },
            kl: ParamGrads { layers: kl },
        })
    }

    /// Applies one optimizer step to the trunk and the optimizer's head.
    pub fn apply_gradients(&mut self, opt: &mut NetOptimizer, grads: &ParamGrads) -> Result<()> {
        let n_trunk = self.trunk.len();
        if grads.layers.len() != n_trunk + 1 || opt.states.len() != n_trunk + 1 {
            return Err(Error::dim("apply_gradients", "gradient layer count differs from network"));
        }
        let head = self
            .heads
            .get_mut(&opt.head)
            .ok_or_else(|| Error::Lookup(format!("no head with index {}", opt.head)))?;
        let layers = self.trunk.iter_mut().chain(std::iter::once(head));
        for ((layer, g), states) in layers.zip(&grads.layers).zip(opt.states.iter_mut()) {
            let params: [&mut [f64]; 4] = [
                layer.mu_w.data_mut(),
                layer.logvar_w.data_mut(),
                &mut layer.mu_b,
                &mut layer.logvar_b,
            ];
            for ((p, gs), st) in params.into_iter().zip(g.slices()).zip(states.iter_mut()) {
                st.step(p, gs)?;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Forward, backward and one Adam step on a minibatch.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        prior: &PosteriorSnapshot,
        opt: &mut NetOptimizer,
        x: &Tensor2,
        labels: &[usize],
        beta: f64,
        n_task: usize,
        n_samples: usize,
        rng: &mut Rng,
    ) -> Result<ElboBreakdown> {
        let head = opt.head;
        let noise = NoiseSet::draw(self, head, n_samples, rng)?;
        let (breakdown, cache) = self.elbo_forward(prior, head, x, labels, beta, n_task, noise)?;
        if !breakdown.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {} (nll {}, kl {})",
                breakdown.loss, breakdown.nll, breakdown.kl
            )));
        }
        let grads = self.backward_gradients(prior, &cache, beta, n_task)?;
        self.apply_gradients(opt, &grads.total())?;
        if !self.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(breakdown)
    }

    /// Snapshot of the current posterior, to serve as the next prior.
    pub fn advance_prior(&self) -> PosteriorSnapshot {
        PosteriorSnapshot {
            trunk: self.trunk.clone(),
            heads: self.heads.clone(),
        }
    }
}

fn kl_grad(
    mu_q: &[f64],
    lv_q: &[f64],
    mu_p: &[f64],
    lv_p: &[f64],
    coef: f64,
    g_mu: &mut [f64],
    g_lv: &mut [f64],
) {
    for i in 0..mu_q.len() {
        g_mu[i] = coef * (mu_q[i] - mu_p[i]) * (-lv_p[i]).exp();
        g_lv[i] = coef * 0.5 * (lv_q[i] - lv_p[i]).exp_m1();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn small_net(dims: (usize, usize, usize), seed: u64) -> VariationalNet {
        let mut rng = Rng::seed_from(seed);
        let mut net = VariationalNet::init_network(dims.0, &[dims.1], dims.2, &mut rng).unwrap();
        net.add_head(0, &mut rng);
        net
    }

    /// Randomises means and log-variances so gradients are far from trivial.
    fn scramble(net: &mut VariationalNet, head: usize, seed: u64) {
        let mut rng = Rng::seed_from(seed);
        let p = net.flat_params(head).unwrap();
        let p: Vec<f64> = p.iter().map(|_| 0.5 * rng.normal()).collect();
        net.set_flat_params(head, &p).unwrap();
        // Keep variances moderate: log-variances in roughly [-3, -1].
        let mut at = 0;
        let n_layers = net.trunk().len() + 1;
        let mut flat = net.flat_params(head).unwrap();
        for li in 0..n_layers {
            let l = if li < net.trunk().len() { &net.trunk()[li] } else { net.head(head).unwrap() };
            let nw = l.mu_w.data().len();
            let nb = l.mu_b.len();
            at += nw;
            for v in &mut flat[at..at + nw] {
                *v = -2.0 + 0.5 * *v;
            }
            at += nw + nb;
            for v in &mut flat[at..at + nb] {
                *v = -2.0 + 0.5 * *v;
            }
            at += nb;
        }
        net.set_flat_params(head, &flat).unwrap();
    }

    fn perturbed_prior(net: &VariationalNet, head: usize, seed: u64) -> PosteriorSnapshot {
        let mut other = net.clone();
        scramble(&mut other, head, seed);
        other.advance_prior()
    }

    #[test]
    fn init_shapes_follow_architecture() {
        let mut rng = Rng::seed_from(0);
        let mut net = VariationalNet::init_network(784, &[256, 256], 2, &mut rng).unwrap();
        assert_eq!(net.trunk()[0].mu_w.shape(), (784, 256));
        assert_eq!(net.trunk()[1].mu_w.shape(), (256, 256));
        assert!(net.head(0).is_err());
        net.add_head(0, &mut rng);
        assert_eq!(net.head(0).unwrap().mu_w.shape(), (256, 2));
        let expected = (-6.0f64).exp();
        for l in net.layers(0).unwrap() {
            assert!(l.logvar_w.data().iter().all(|&v| (v.exp() - expected).abs() < 1e-15));
            assert!(l.logvar_b.iter().all(|&v| v == INIT_LOGVAR));
        }
    }

    #[test]
    fn init_permuted_architecture() {
        let mut rng = Rng::seed_from(0);
        let net = VariationalNet::init_network(784, &[100, 100], 10, &mut rng).unwrap();
        assert_eq!(net.trunk()[1].mu_w.shape(), (100, 100));
        assert_eq!(net.head_output_dim(), 10);
    }

    #[test]
    fn init_rejects_zero_dims() {
        let mut rng = Rng::seed_from(0);
        assert!(matches!(
            VariationalNet::init_network(0, &[4], 2, &mut rng),
            Err(Error::Argument(_))
        ));
        assert!(VariationalNet::init_network(4, &[0], 2, &mut rng).is_err());
        assert!(VariationalNet::init_network(4, &[4], 0, &mut rng).is_err());
    }

    #[test]
    fn zero_variance_forward_is_deterministic_mlp() {
        let mut net = small_net((4, 3, 2), 1);
        scramble(&mut net, 0, 2);
        net.set_zero_variance(true);
        let mut rng = Rng::seed_from(5);
        let x = crate::numerics::gaussian_sample(&mut rng, 3, 4);
        let pass = net.reparameterized_forward(0, &x, &mut rng, 3).unwrap();
        let l0 = &net.trunk()[0];
        let mut h = affine(&x, &l0.mu_w, &l0.mu_b).unwrap();
        h.map_inplace(|v| v.max(0.0));
        let hd = net.head(0).unwrap();
        let want = affine(&h, &hd.mu_w, &hd.mu_b).unwrap();
        for z in &pass.logits {
            assert!(z.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn forward_is_seed_deterministic() {
        let net = small_net((4, 3, 2), 1);
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(0), 2, 4);
        let a = net.reparameterized_forward(0, &x, &mut Rng::seed_from(9), 2).unwrap();
        let b = net.reparameterized_forward(0, &x, &mut Rng::seed_from(9), 2).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn hand_forward_2_2_2() {
        let mut net = small_net((2, 2, 2), 0);
        {
            let l = net.trunk_layer_mut(0);
            l.mu_w = Tensor2::from_rows(&[[1.0, -1.0], [2.0, 0.5]]).unwrap();
            l.mu_b = vec![0.5, -3.0];
        }
        {
            let h = net.head_mut(0).unwrap();
            h.mu_w = Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
            h.mu_b = vec![0.0, 1.0];
        }
        // x = [1, 1]: pre-activations [1+2+0.5, -1+0.5-3] = [3.5, -3.5]
        // ReLU -> [3.5, 0]; logits [3.5, 7 + 1] = [3.5, 8].
        let x = Tensor2::from_rows(&[[1.0, 1.0]]).unwrap();
        let noise = NoiseSet::zeros(&net, 0, 1).unwrap();
        let pass = net.forward_with_noise(0, &x, noise).unwrap();
        assert_eq!(pass.logits[0].data(), &[3.5, 8.0]);
    }

    #[test]
    fn forward_missing_head_is_lookup_error() {
        let net = small_net((4, 3, 2), 1);
        let x = Tensor2::zeros(1, 4);
        let r = net.reparameterized_forward(7, &x, &mut Rng::seed_from(0), 1);
        assert!(matches!(r, Err(Error::Lookup(_))));
        assert!(matches!(
            net.posterior_predict(7, &x, &mut Rng::seed_from(0), 1),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn scalar_kl_values() {
        assert_eq!(gaussian_kl(0.3, -1.2, 0.3, -1.2), 0.0);
        assert!((gaussian_kl(1.0, 0.0, 0.0, 0.0) - 0.5).abs() < 1e-15);
        let want = 0.5 * (-(4.0f64).ln() + 4.0 - 1.0);
        assert!((gaussian_kl(0.0, 4.0f64.ln(), 0.0, 0.0) - want).abs() < 1e-12);
        assert!((want - 0.80685).abs() < 1e-5);
    }

    #[test]
    fn kl_of_posterior_to_itself_is_zero() {
        let mut net = small_net((5, 4, 3), 3);
        scramble(&mut net, 0, 4);
        let snap = net.advance_prior();
        assert_eq!(net.kl_to_prior(&snap, 0).unwrap(), 0.0);
    }

    #[test]
    fn kl_ignores_inactive_heads_and_defaults_new_head_to_standard_normal() {
        let mut rng = Rng::seed_from(0);
        let mut net = VariationalNet::init_network(3, &[2], 2, &mut rng).unwrap();
        net.add_head(0, &mut rng);
        let snap = net.advance_prior();
        net.add_head(1, &mut rng);
        // Head 1 is new: trunk matches, head compared against N(0,1).
        let h1 = net.head(1).unwrap();
        let want = h1.kl_to(&VariationalLayer::standard_normal(2, 2));
        assert!((net.kl_to_prior(&snap, 1).unwrap() - want).abs() < 1e-12);
        // Head 0 is still at its snapshot even though head 1 exists.
        assert_eq!(net.kl_to_prior(&snap, 0).unwrap(), 0.0);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = small_net((4, 3, 2), 0);
        let b = small_net((4, 5, 2), 0);
        assert!(matches!(
            a.kl_to_prior(&b.advance_prior(), 0),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn loss_arithmetic() {
        let b = ElboBreakdown::new(0.7, 10.0, 2.0, 1000);
        assert!((b.loss - 0.72).abs() < 1e-12);
    }

    #[test]
    fn loss_equals_nll_when_net_is_prior() {
        let net = small_net((4, 3, 2), 0);
        let prior = net.advance_prior();
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(1), 4, 4);
        let b = net
            .beta_elbo_loss(&prior, 0, &x, &[0, 1, 1, 0], 3.0, 100, &mut Rng::seed_from(2), 2)
            .unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.loss, b.nll);
    }

    #[test]
    fn loss_approaches_nll_as_beta_vanishes() {
        let net = small_net((4, 3, 2), 0);
        let prior = PosteriorSnapshot::standard_normal(&net);
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(1), 4, 4);
        let b = net
            .beta_elbo_loss(&prior, 0, &x, &[0, 1, 1, 0], 1e-12, 100, &mut Rng::seed_from(2), 2)
            .unwrap();
        assert!(b.kl > 0.0);
        assert!((b.loss - b.nll).abs() < 1e-8);
    }

    #[test]
    fn loss_rejects_bad_labels_and_beta() {
        let net = small_net((4, 3, 2), 0);
        let prior = net.advance_prior();
        let x = Tensor2::zeros(2, 4);
        let mut rng = Rng::seed_from(0);
        assert!(matches!(
            net.beta_elbo_loss(&prior, 0, &x, &[0, 2], 1.0, 10, &mut rng, 1),
            Err(Error::Argument(_))
        ));
        assert!(net.beta_elbo_loss(&prior, 0, &x, &[0, 1], 0.0, 10, &mut rng, 1).is_err());
        assert!(net.beta_elbo_loss(&prior, 0, &x, &[0, 1], 1.0, 1, &mut rng, 1).is_err());
    }

    fn check_gradients(dims: (usize, usize, usize), batch: usize, n_samples: usize, seed: u64) -> f64 {
        let mut net = small_net(dims, seed);
        scramble(&mut net, 0, seed + 1);
        let prior = perturbed_prior(&net, 0, seed + 2);
        let mut rng = Rng::seed_from(seed + 3);
        let x = crate::numerics::gaussian_sample(&mut rng, batch, dims.0);
        let labels: Vec<usize> = (0..batch).map(|i| i % dims.2).collect();
        let noise = NoiseSet::draw(&net, 0, n_samples, &mut rng).unwrap();
        let (beta, n_task) = (1.7, 20);
        let (_, cache) = net
            .elbo_forward(&prior, 0, &x, &labels, beta, n_task, noise.clone())
            .unwrap();
        let analytic = net
            .backward_gradients(&prior, &cache, beta, n_task)
            .unwrap()
            .total()
            .to_flat();
        let base = net.flat_params(0).unwrap();
        let mut probe = net.clone();
        let numeric = finite_diff_grad(
            |p| {
                probe.set_flat_params(0, p).unwrap();
                probe
                    .elbo_forward(&prior, 0, &x, &labels, beta, n_task, noise.clone())
                    .unwrap()
                    .0
                    .loss
            },
            &base,
            1e-5,
        )
        .unwrap();
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn gradient_check_2_2_2() {
        let err = check_gradients((2, 2, 2), 3, 2, 11);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_4_3_2() {
        let err = check_gradients((4, 3, 2), 2, 1, 21);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_10_8_4() {
        let err = check_gradients((10, 8, 4), 2, 1, 31);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn kl_gradient_vanishes_at_prior_and_scales_with_beta() {
        let mut net = small_net((4, 3, 2), 0);
        scramble(&mut net, 0, 1);
        let at_prior = net.advance_prior();
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(1), 2, 4);
        let noise = NoiseSet::draw(&net, 0, 1, &mut Rng::seed_from(2)).unwrap();
        let (_, cache) = net
            .elbo_forward(&at_prior, 0, &x, &[0, 1], 5.0, 10, noise.clone())
            .unwrap();
        let g = net.backward_gradients(&at_prior, &cache, 5.0, 10).unwrap();
        assert_eq!(g.kl.max_abs(), 0.0);

        let other = perturbed_prior(&net, 0, 3);
        let g1 = net.backward_gradients(&other, &cache, 1.5, 10).unwrap().kl.to_flat();
        let g2 = net.backward_gradients(&other, &cache, 3.0, 10).unwrap().kl.to_flat();
        assert!(g1.iter().any(|&v| v != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = small_net((4, 3, 2), 0);
        let prior = net.advance_prior();
        let x = Tensor2::zeros(2, 4);
        let noise = NoiseSet::zeros(&net, 0, 1).unwrap();
        let (_, cache) = net.elbo_forward(&prior, 0, &x, &[0, 1], 1.0, 10, noise).unwrap();
        net.trunk_layer_mut(0).mu_b[0] += 1.0;
        assert!(matches!(
            net.backward_gradients(&prior, &cache, 1.0, 10),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn snapshot_is_a_deep_copy() {
        let mut net = small_net((4, 3, 2), 0);
        let snap = net.advance_prior();
        let frozen = snap.clone();
        let prior = PosteriorSnapshot::standard_normal(&net);
        let mut opt = NetOptimizer::new(&net, 0, 0.01).unwrap();
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(1), 4, 4);
        let mut rng = Rng::seed_from(2);
        for _ in 0..5 {
            net.train_step(&prior, &mut opt, &x, &[0, 1, 0, 1], 1.0, 100, 1, &mut rng)
                .unwrap();
        }
        assert_eq!(snap, frozen);
        assert!(net.kl_to_prior(&snap, 0).unwrap() > 0.0);
    }

    #[test]
    fn snapshot_round_trip_is_lossless() {
        let mut rng = Rng::seed_from(4);
        let mut net = VariationalNet::init_network(6, &[5, 4], 3, &mut rng).unwrap();
        net.add_head(0, &mut rng);
        net.add_head(3, &mut rng);
        scramble(&mut net, 3, 8);
        let snap = net.advance_prior();
        let back = PosteriorSnapshot::from_bytes(&snap.to_bytes()).unwrap();
        assert_eq!(back, snap);
        assert_eq!(net.kl_to_prior(&back, 0).unwrap(), 0.0);
        assert_eq!(net.kl_to_prior(&back, 3).unwrap(), 0.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage.snap");
        snap.write_to(&path).unwrap();
        assert_eq!(PosteriorSnapshot::read_from(&path).unwrap(), snap);
    }

    #[test]
    fn snapshot_truncation_reports_offset() {
        let net = small_net((4, 3, 2), 0);
        let bytes = net.advance_prior().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        match PosteriorSnapshot::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 0),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(PosteriorSnapshot::from_bytes(&bad).is_err());
        let mut huge = b"VCLSNAP1".to_vec();
        for v in [1u32, 0, u32::MAX, u32::MAX] {
            huge.extend(v.to_le_bytes());
        }
        assert!(matches!(
            PosteriorSnapshot::from_bytes(&huge),
            Err(Error::Format { offset: 24, .. })
        ));
        let mut trailing = bytes;
        trailing.push(0);
        assert!(PosteriorSnapshot::from_bytes(&trailing).is_err());
    }

    #[test]
    fn predictive_rows_sum_to_one() {
        let mut net = small_net((6, 5, 3), 0);
        scramble(&mut net, 0, 1);
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(2), 7, 6);
        let p = net.posterior_predict(0, &x, &mut Rng::seed_from(3), 4).unwrap();
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_variance_predictive_is_mean_network_softmax() {
        let mut net = small_net((6, 5, 3), 0);
        scramble(&mut net, 0, 1);
        net.set_zero_variance(true);
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(2), 4, 6);
        let p = net.posterior_predict(0, &x, &mut Rng::seed_from(3), 5).unwrap();
        let z = net.forward_with_noise(0, &x, NoiseSet::zeros(&net, 0, 1).unwrap()).unwrap();
        let want = crate::numerics::softmax_rows(&z.logits[0]);
        assert!(p.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn sampled_weight_mean_approaches_mu() {
        let mut net = small_net((2, 2, 2), 0);
        {
            let l = net.trunk_layer_mut(0);
            l.mu_w.set(0, 0, 0.7);
            l.logvar_w.set(0, 0, (0.3f64).ln());
        }
        let layer = &net.trunk()[0];
        let mut rng = Rng::seed_from(77);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let noise = NoiseSet::draw(&net, 0, 1, &mut rng).unwrap();
            let (w, _) = layer.sample(&noise.sample(0)[0], 1.0);
            sum += w.get(0, 0);
        }
        let mean = sum / n as f64;
        let se = (0.3f64).sqrt() / (n as f64).sqrt();
        assert!((mean - 0.7).abs() < 4.0 * se, "mean {mean}");
    }

    #[test]
    fn huge_beta_pins_trunk_to_snapshot() {
        // At the snapshot the KL gradient is exactly zero, and its curvature
        // is beta / (n_task * sigma_prior^2). A gradient step sized for that
        // curvature barely moves the trunk.
        let mut net = small_net((6, 5, 2), 0);
        scramble(&mut net, 0, 1);
        let snap = net.advance_prior();
        let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(2), 8, 6);
        let labels = [0, 1, 0, 1, 1, 0, 0, 1];
        let (beta, n_task) = (1e9, 100);
        let noise = NoiseSet::draw(&net, 0, 1, &mut Rng::seed_from(3)).unwrap();
        let (_, cache) = net.elbo_forward(&snap, 0, &x, &labels, beta, n_task, noise).unwrap();
        let g = net.backward_gradients(&snap, &cache, beta, n_task).unwrap();
        assert_eq!(g.kl.max_abs(), 0.0);
        let max_prior_precision = snap
            .trunk()
            .iter()
            .flat_map(|l| l.logvar_w.data().iter().chain(&l.logvar_b))
            .map(|lv| (-lv).exp())
            .fold(0.0, f64::max);
        let step = n_task as f64 / (beta * max_prior_precision);
        let total = g.total();
        for (l, gl) in net.trunk().iter().zip(&total.layers) {
            for (_, d) in l.mu_w.data().iter().zip(gl.mu_w.data()) {
                assert!((step * d).abs() < 1e-6);
            }
        }

        // Adam also stays pinned within a few learning rates over many steps.
        let mut opt = NetOptimizer::new(&net, 0, 1e-3).unwrap();
        let mut rng = Rng::seed_from(4);
        for _ in 0..50 {
            net.train_step(&snap, &mut opt, &x, &labels, beta, n_task, 1, &mut rng)
                .unwrap();
        }
        for (l, p) in net.trunk().iter().zip(snap.trunk()) {
            assert!(l.mu_w.max_abs_diff(&p.mu_w).unwrap() < 5e-3);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn kl_is_non_negative(seed in any::<u64>(), other in any::<u64>()) {
            let mut net = small_net((5, 4, 3), seed);
            scramble(&mut net, 0, seed ^ 1);
            let prior = perturbed_prior(&net, 0, other);
            prop_assert!(net.kl_to_prior(&prior, 0).unwrap() >= 0.0);
        }

        #[test]
        fn loss_monotone_in_beta(seed in any::<u64>(), b1 in 0.01f64..10.0, b2 in 0.01f64..10.0) {
            let net = small_net((4, 3, 2), seed);
            let prior = PosteriorSnapshot::standard_normal(&net);
            let x = crate::numerics::gaussian_sample(&mut Rng::seed_from(seed), 3, 4);
            let eval = |beta| net
                .beta_elbo_loss(&prior, 0, &x, &[0, 1, 0], beta, 50, &mut Rng::seed_from(7), 2)
                .unwrap();
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let (a, b) = (eval(lo), eval(hi));
            prop_assert!(a.kl > 0.0);
            prop_assert!(a.loss <= b.loss);
        }
    }
}
