//! Minimal trainable feedforward network.
//!
//! Dense layers with tanh (or relu) hidden activations and a linear output,
//! exact reverse-mode gradients, and an adaptive-moment optimizer. The
//! network represents a time-and-observation-conditioned velocity field:
//! the input is the concatenation `[x_t, y, t, sin(2*pi*t), cos(2*pi*t)]`
//! and the output lives in the latent space.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;

pub const TIME_FEATURES: usize = 3;

#[inline]
pub fn time_features(t: f64) -> [f64; 3] {
    let w = 2.0 * std::f64::consts::PI * t;
    [t, w.sin(), w.cos()]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn id(self) -> u32 {
        match self {
            Self::Tanh => 0,
            Self::Relu => 1,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::Tanh),
            1 => Ok(Self::Relu),
            other => Err(Error::Format(format!("unknown activation id {other}"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation value (tanh) or the
    /// pre-activation sign (relu).
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layer {
    /// Row-major `rows x cols`.
    weights: Vec<f64>,
    biases: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            weights: vec![0.0; rows * cols],
            biases: vec![0.0; rows],
            rows,
            cols,
        }
    }

    #[inline]
    fn apply_into(&self, input: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weights[i * self.cols..(i + 1) * self.cols];
            let mut acc = self.biases[i];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = acc;
        }
    }
}

/// Fully connected velocity-field network. The output dimension always
/// equals the latent dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseNet {
    latent_dim: usize,
    obs_dim: usize,
    widths: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

impl DenseNet {
    /// Fan-in scaled uniform init for hidden layers; the final layer starts
    /// at zero so an untrained net transports the latent identity.
    pub fn new(
        latent_dim: usize,
        obs_dim: usize,
        hidden: &[usize],
        activation: Activation,
        rng: &mut Stream,
    ) -> Result<Self> {
        if latent_dim == 0 {
            return Err(Error::InvalidArgument("latent dim must be >= 1".into()));
        }
        if hidden.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        let input = latent_dim + obs_dim + TIME_FEATURES;
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(input);
        widths.extend_from_slice(hidden);
        widths.push(latent_dim);

        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (cols, rows) = (widths[l], widths[l + 1]);
            let mut layer = Layer::zeros(rows, cols);
            let last = l == widths.len() - 2;
            if !last {
                let scale = 1.0 / (cols as f64).sqrt();
                for w in layer.weights.iter_mut() {
                    *w = rng.gen_range(-scale..scale);
                }
            }
            layers.push(layer);
        }
        Ok(Self {
            latent_dim,
            obs_dim,
            widths,
            activation,
            layers,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(&layer.weights);
            flat.extend_from_slice(&layer.biases);
        }
        flat
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimMismatch(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            let wlen = layer.weights.len();
            layer.weights.copy_from_slice(&flat[offset..offset + wlen]);
            offset += wlen;
            let blen = layer.biases.len();
            layer.biases.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        Ok(())
    }

    pub fn params_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.biases.iter()).all(|v| v.is_finite()))
    }

    /// Product of layer Frobenius norms: an upper estimate of the network
    /// Lipschitz constant when hidden activations are 1-Lipschitz.
    pub fn lipschitz_upper_estimate(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>().sqrt())
            .product()
    }

    fn assemble_input(&self, x_t: &[f64], y: &[f64], t: f64, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(x_t);
        buf.extend_from_slice(y);
        buf.extend_from_slice(&time_features(t));
    }

    /// Deterministic evaluation of the velocity field.
    pub fn forward_velocity(&self, x_t: &[f64], y: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut ws = NetWorkspace::default();
        let mut out = vec![0.0; self.latent_dim];
        self.forward_velocity_into(x_t, y, t, &mut out, &mut ws)?;
        Ok(out)
    }

    pub fn forward_velocity_into(
        &self,
        x_t: &[f64],
        y: &[f64],
        t: f64,
        out: &mut [f64],
        ws: &mut NetWorkspace,
    ) -> Result<()> {
        if x_t.len() != self.latent_dim || y.len() != self.obs_dim {
            return Err(Error::DimMismatch(format!(
                "velocity input dims ({}, {}) vs net ({}, {})",
                x_t.len(),
                y.len(),
                self.latent_dim,
                self.obs_dim
            )));
        }
        self.assemble_input(x_t, y, t, &mut ws.input);
        ws.ensure(self);
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            if l == last {
                let input: &[f64] = if l == 0 { &ws.input } else { &ws.acts[l - 1] };
                layer.apply_into(input, out);
            } else {
                let (head, tail) = ws.acts.split_at_mut(l);
                let input: &[f64] = if l == 0 { &ws.input } else { &head[l - 1] };
                let buf = &mut tail[0];
                layer.apply_into(input, buf);
                for a in buf.iter_mut() {
                    *a = self.activation.apply(*a);
                }
            }
        }
        Ok(())
    }
}

/// Reusable buffers for repeated forward evaluations.
#[derive(Default, Clone)]
pub struct NetWorkspace {
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
}

impl NetWorkspace {
    fn ensure(&mut self, net: &DenseNet) {
        if self.acts.len() != net.layers.len() - 1 {
            self.acts = net.widths[1..net.widths.len() - 1]
                .iter()
                .map(|&w| vec![0.0; w])
                .collect();
        }
    }
}

/// Gradient with the same shape as the network parameters, stored flat in
/// the checkpoint parameter order.
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub flat: Vec<f64>,
}

impl GradBuffer {
    pub fn zeros(net: &DenseNet) -> Self {
        Self {
            flat: vec![0.0; net.num_params()],
        }
    }

    fn add_assign(&mut self, other: &GradBuffer) {
        for (a, b) in self.flat.iter_mut().zip(&other.flat) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.flat.iter_mut().for_each(|v| *v *= s);
    }
}

/// One flow-matching regression example.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub x_t: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub target: Vec<f64>,
}

/// Mean over the batch of `||v_t(x_t, y) - target||^2` and its exact
/// reverse-mode parameter gradient.
///
/// The batch is split into fixed-size chunks reduced in order, so the
/// result does not depend on the worker count.
pub fn loss_and_grad(net: &DenseNet, batch: &[BatchItem]) -> Result<(f64, GradBuffer)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    const CHUNK: usize = 32;
    let partials: Vec<Result<(f64, GradBuffer)>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grad = GradBuffer::zeros(net);
            let mut loss = 0.0;
            let mut scratch = BackpropScratch::new(net);
            for item in chunk {
                loss += backprop_item(net, item, &mut grad, &mut scratch)?;
            }
            Ok((loss, grad))
        })
        .collect();

    let mut total = GradBuffer::zeros(net);
    let mut loss = 0.0;
    for partial in partials {
        let (l, g) = partial?;
        loss += l;
        total.add_assign(&g);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    Ok((loss * inv, total))
}

struct BackpropScratch {
    input: Vec<f64>,
    /// Pre-activations per layer.
    zs: Vec<Vec<f64>>,
    /// Post-activations per hidden layer plus the output.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl BackpropScratch {
    fn new(net: &DenseNet) -> Self {
        Self {
            input: Vec::with_capacity(net.widths[0]),
            zs: net.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            acts: net.widths[1..].iter().map(|&w| vec![0.0; w]).collect(),
            delta: Vec::new(),
            delta_next: Vec::new(),
        }
    }
}

fn backprop_item(
    net: &DenseNet,
    item: &BatchItem,
    grad: &mut GradBuffer,
    ws: &mut BackpropScratch,
) -> Result<f64> {
    if item.x_t.len() != net.latent_dim
        || item.y.len() != net.obs_dim
        || item.target.len() != net.latent_dim
    {
        return Err(Error::DimMismatch("batch item dims do not match net".into()));
    }
    net.assemble_input(&item.x_t, &item.y, item.t, &mut ws.input);

    // Forward pass, keeping pre- and post-activations.
    let last = net.layers.len() - 1;
    for (l, layer) in net.layers.iter().enumerate() {
        let (zs_head, zs_tail) = ws.zs.split_at_mut(l);
        let input: &[f64] = if l == 0 {
            &ws.input
        } else {
            &ws.acts[l - 1]
        };
        let _ = zs_head;
        layer.apply_into(input, &mut zs_tail[0]);
        let z = &ws.zs[l];
        let a = &mut ws.acts[l];
        if l == last {
            a.copy_from_slice(z);
        } else {
            for (ai, &zi) in a.iter_mut().zip(z) {
                *ai = net.activation.apply(zi);
            }
        }
    }

    // Squared-error loss and output delta.
    let out = &ws.acts[last];
    let mut loss = 0.0;
    ws.delta.clear();
    for (o, tgt) in out.iter().zip(&item.target) {
        let d = o - tgt;
        loss += d * d;
        ws.delta.push(2.0 * d);
    }

    // Backward pass. Parameter order per layer: weights then biases.
    let mut offsets = Vec::with_capacity(net.layers.len());
    let mut off = 0usize;
    for layer in &net.layers {
        offsets.push(off);
        off += layer.weights.len() + layer.biases.len();
    }

    for l in (0..net.layers.len()).rev() {
        let layer = &net.layers[l];
        let input: &[f64] = if l == 0 { &ws.input } else { &ws.acts[l - 1] };
        let base = offsets[l];
        let wgrad = &mut grad.flat[base..base + layer.weights.len()];
        for i in 0..layer.rows {
            let d = ws.delta[i];
            let row = &mut wgrad[i * layer.cols..(i + 1) * layer.cols];
            for (g, &x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        let bgrad = &mut grad.flat
            [base + layer.weights.len()..base + layer.weights.len() + layer.biases.len()];
        for (g, &d) in bgrad.iter_mut().zip(&ws.delta) {
            *g += d;
        }

        if l > 0 {
            ws.delta_next.clear();
            ws.delta_next.resize(layer.cols, 0.0);
            for i in 0..layer.rows {
                let d = ws.delta[i];
                let row = &layer.weights[i * layer.cols..(i + 1) * layer.cols];
                for (dn, &w) in ws.delta_next.iter_mut().zip(row) {
                    *dn += d * w;
                }
            }
            let zprev = &ws.zs[l - 1];
            let aprev = &ws.acts[l - 1];
            for ((dn, &z), &a) in ws.delta_next.iter_mut().zip(zprev).zip(aprev) {
                *dn *= net.activation.derivative(z, a);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_next);
        }
    }
    Ok(loss)
}

/// Adaptive-moment optimizer state (first/second moment accumulators with
/// bias correction).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: vec![0.0; net.num_params()],
            second_moment: vec![0.0; net.num_params()],
        }
    }
}

/// One optimizer update in place. Rejects non-finite gradients.
pub fn step(net: &mut DenseNet, state: &mut OptimizerState, grad: &GradBuffer) -> Result<()> {
    if grad.flat.len() != net.num_params() || state.first_moment.len() != net.num_params() {
        return Err(Error::DimMismatch("gradient/state shape does not match net".into()));
    }
    if grad.flat.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericAbort {
            step: state.step_count as usize,
            reason: "non-finite gradient".into(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    let mut params = net.params_flat();
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(&grad.flat)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *p -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
    }
    net.set_params_flat(&params)?;
    if !net.params_finite() {
        return Err(Error::NumericAbort {
            step: state.step_count as usize,
            reason: "non-finite parameters after update".into(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoints: header (magic, version, activation, dims, widths) followed by
// a little-endian f64 parameter block. Round-trips are bit-exact.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MXNN";
const VERSION: u32 = 1;

impl DenseNet {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.activation.id().to_le_bytes())?;
        w.write_all(&(self.latent_dim as u32).to_le_bytes())?;
        w.write_all(&(self.obs_dim as u32).to_le_bytes())?;
        w.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &width in &self.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        for value in self.params_flat() {
            w.write_all(&value.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let activation = Activation::from_id(read_u32(r)?)?;
        let latent_dim = read_u32(r)? as usize;
        let obs_dim = read_u32(r)? as usize;
        let n_widths = read_u32(r)? as usize;
        if n_widths < 2 {
            return Err(Error::Format("checkpoint needs at least two widths".into()));
        }
        let mut widths = Vec::with_capacity(n_widths);
        for _ in 0..n_widths {
            widths.push(read_u32(r)? as usize);
        }
        if widths[0] != latent_dim + obs_dim + TIME_FEATURES || widths[n_widths - 1] != latent_dim
        {
            return Err(Error::Format("checkpoint widths inconsistent with dims".into()));
        }
        let layers: Vec<Layer> = (0..n_widths - 1)
            .map(|l| Layer::zeros(widths[l + 1], widths[l]))
            .collect();
        let mut net = Self {
            latent_dim,
            obs_dim,
            widths,
            activation,
            layers,
        };
        let mut flat = vec![0.0; net.num_params()];
        let mut f64buf = [0u8; 8];
        for slot in flat.iter_mut() {
            r.read_exact(&mut f64buf)?;
            *slot = f64::from_le_bytes(f64buf);
        }
        net.set_params_flat(&flat)?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut file)
    }
}
