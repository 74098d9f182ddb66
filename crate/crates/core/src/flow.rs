//! Conditional flow matching.
//!
//! Training pairs live on the linear interpolation path `x_t = t*x +
//! (1-t)*z` with constant target velocity `x - z`; the observation `y`
//! rides along unchanged. A trained velocity field transports latent
//! normal draws to posterior samples by integrating the ODE `dx/dt =
//! v_t(x, y)` from `t = 0` to `1`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::model::{self, Theta};
use crate::nn::{self, Activation, BatchItem, DenseNet, NetWorkspace, OptimizerState};
use crate::prior::Prior;
use crate::rng::{self, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OdeScheme {
    Euler,
    Heun,
}

impl OdeScheme {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "euler" => Ok(Self::Euler),
            "heun" => Ok(Self::Heun),
            other => Err(Error::InvalidArgument(format!(
                "unknown ODE scheme '{other}' (expected euler or heun)"
            ))),
        }
    }

    fn id(self) -> u32 {
        match self {
            Self::Euler => 0,
            Self::Heun => 1,
        }
    }

    fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Self::Euler),
            1 => Ok(Self::Heun),
            other => Err(Error::Format(format!("unknown ODE scheme id {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub ode_steps: usize,
    pub scheme: OdeScheme,
    pub training_steps: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Peak learning rate; cosine-decays to `lr_floor_fraction` of itself
    /// over each training run.
    pub learning_rate: f64,
    pub lr_floor_fraction: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            ode_steps: 50,
            scheme: OdeScheme::Euler,
            training_steps: 6000,
            batch_size: 256,
            hidden: vec![128, 128, 128],
            learning_rate: 1e-3,
            lr_floor_fraction: 0.05,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ode_steps == 0 {
            return Err(Error::InvalidArgument("ode_steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Interpolation-path point and regression target for one `(x, z, t)`.
#[inline]
pub fn interpolate(x: &[f64], z: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
    let x_t = x
        .iter()
        .zip(z)
        .map(|(&xi, &zi)| t * xi + (1.0 - t) * zi)
        .collect();
    let target = x.iter().zip(z).map(|(&xi, &zi)| xi - zi).collect();
    (x_t, target)
}

/// Fresh simulated training batch: latent draws from the prior, matching
/// observations at `theta`, latent base samples, uniform times.
pub fn make_training_batch(
    prior: &Prior,
    forward: &ForwardModel,
    theta: Theta,
    batch_size: usize,
    rng: &mut Stream,
) -> Vec<BatchItem> {
    let m = prior.dim();
    (0..batch_size)
        .map(|_| {
            let x = prior.sample(rng);
            let y = model::sample_observation(theta, forward, &x, rng);
            let z = rng::standard_normal_vec(rng, m);
            let t: f64 = rng.gen();
            let (x_t, target) = interpolate(&x, &z, t);
            BatchItem {
                x_t,
                y: y.0,
                t,
                target,
            }
        })
        .collect()
}

/// Amortized posterior sampler: trained velocity field plus its transport
/// settings.
#[derive(Clone, Debug)]
pub struct FlowSampler {
    pub net: DenseNet,
    pub config: FlowConfig,
    /// Running-average training loss over the final 100 steps (0 when no
    /// training was run).
    pub final_loss: f64,
}

/// Train a velocity field from scratch.
pub fn train_flow(
    prior: &Prior,
    forward: &ForwardModel,
    theta: Theta,
    config: &FlowConfig,
    rng: &mut Stream,
) -> Result<FlowSampler> {
    config.validate()?;
    let net = DenseNet::new(
        prior.dim(),
        forward.output_dim(),
        &config.hidden,
        Activation::Tanh,
        rng,
    )?;
    train_flow_warm(net, prior, forward, theta, config, config.training_steps, rng)
}

/// Continue training an existing velocity field (warm start across EM
/// rounds) for `steps` optimizer steps.
pub fn train_flow_warm(
    mut net: DenseNet,
    prior: &Prior,
    forward: &ForwardModel,
    theta: Theta,
    config: &FlowConfig,
    steps: usize,
    rng: &mut Stream,
) -> Result<FlowSampler> {
    config.validate()?;
    if net.latent_dim() != prior.dim() || net.obs_dim() != forward.output_dim() {
        return Err(Error::DimMismatch("velocity net dims do not match the model".into()));
    }
    let mut opt = OptimizerState::new(&net, config.learning_rate);
    let mut recent = std::collections::VecDeque::with_capacity(100);
    let floor = config.lr_floor_fraction.clamp(0.0, 1.0);
    for step_idx in 0..steps {
        // Cosine decay to the floor over this run.
        let progress = step_idx as f64 / steps.max(1) as f64;
        let shape = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.learning_rate = config.learning_rate * (floor + (1.0 - floor) * shape);
        let batch = make_training_batch(prior, forward, theta, config.batch_size, rng);
        let (loss, grad) = nn::loss_and_grad(&net, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NumericAbort {
                step: step_idx,
                reason: "non-finite training loss".into(),
            });
        }
        nn::step(&mut net, &mut opt, &grad).map_err(|e| match e {
            Error::NumericAbort { reason, .. } => Error::NumericAbort {
                step: step_idx,
                reason,
            },
            other => other,
        })?;
        if recent.len() == 100 {
            recent.pop_front();
        }
        recent.push_back(loss);
    }
    let final_loss = if recent.is_empty() {
        0.0
    } else {
        recent.iter().sum::<f64>() / recent.len() as f64
    };
    log::debug!("flow training finished, running-average loss {final_loss:.6}");
    Ok(FlowSampler {
        net,
        config: config.clone(),
        final_loss,
    })
}

/// Mean squared velocity error on a batch without touching gradients.
pub fn eval_loss(net: &DenseNet, batch: &[BatchItem]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation batch".into()));
    }
    let mut ws = NetWorkspace::default();
    let mut out = vec![0.0; net.latent_dim()];
    let mut total = 0.0;
    for item in batch {
        net.forward_velocity_into(&item.x_t, &item.y, item.t, &mut out, &mut ws)?;
        total += out
            .iter()
            .zip(&item.target)
            .map(|(v, t)| (v - t) * (v - t))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Integrate `dx/dt = field(t, x)` from 0 to 1 in place. The field writes
/// its value into the output slice. Aborts on non-finite state with the
/// offending step index.
pub fn integrate_ode<F>(scheme: OdeScheme, steps: usize, state: &mut [f64], mut field: F) -> Result<()>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("ode steps must be >= 1".into()));
    }
    let h = 1.0 / steps as f64;
    let dim = state.len();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut mid = vec![0.0; dim];
    for step_idx in 0..steps {
        let t = step_idx as f64 * h;
        match scheme {
            OdeScheme::Euler => {
                field(t, state, &mut k1)?;
                for (s, &k) in state.iter_mut().zip(&k1) {
                    *s += h * k;
                }
            }
            OdeScheme::Heun => {
                field(t, state, &mut k1)?;
                for ((m, &s), &k) in mid.iter_mut().zip(state.iter()).zip(&k1) {
                    *m = s + h * k;
                }
                field(t + h, &mid, &mut k2)?;
                for ((s, &a), &b) in state.iter_mut().zip(&k1).zip(&k2) {
                    *s += 0.5 * h * (a + b);
                }
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericAbort {
                step: step_idx,
                reason: "non-finite ODE state".into(),
            });
        }
    }
    Ok(())
}

/// Transport `count` latent draws to posterior samples for observation
/// `y`. Latent draws come from the stream up front, so results are
/// identical for any worker count.
pub fn transport(
    sampler: &FlowSampler,
    y: &[f64],
    count: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    if count == 0 {
        return Err(Error::InvalidArgument("transport needs count >= 1".into()));
    }
    let m = sampler.net.latent_dim();
    let mut states: Vec<Vec<f64>> = (0..count)
        .map(|_| rng::standard_normal_vec(rng, m))
        .collect();

    let net = &sampler.net;
    let scheme = sampler.config.scheme;
    let steps = sampler.config.ode_steps;
    states
        .par_iter_mut()
        .map(|state| {
            let mut ws = NetWorkspace::default();
            integrate_ode(scheme, steps, state, |t, x, out| {
                net.forward_velocity_into(x, y, t, out, &mut ws)
            })
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(states)
}

// ---------------------------------------------------------------------------
// Sampler checkpoints: flow header + embedded network checkpoint.
// ---------------------------------------------------------------------------

const MAGIC: &[u8; 4] = b"MXFS";
const VERSION: u32 = 1;

impl FlowSampler {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.config.ode_steps as u32).to_le_bytes())?;
        w.write_all(&self.config.scheme.id().to_le_bytes())?;
        w.write_all(&(self.config.training_steps as u32).to_le_bytes())?;
        w.write_all(&(self.config.batch_size as u32).to_le_bytes())?;
        w.write_all(&(self.config.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.config.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&self.config.learning_rate.to_le_bytes())?;
        w.write_all(&self.config.lr_floor_fraction.to_le_bytes())?;
        w.write_all(&self.final_loss.to_le_bytes())?;
        self.net.write_to(w)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad sampler checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut b4)?;
            Ok(u32::from_le_bytes(b4))
        };
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported sampler version {version}")));
        }
        let ode_steps = read_u32(r)? as usize;
        let scheme = OdeScheme::from_id(read_u32(r)?)?;
        let training_steps = read_u32(r)? as usize;
        let batch_size = read_u32(r)? as usize;
        let n_hidden = read_u32(r)? as usize;
        let mut hidden = Vec::with_capacity(n_hidden);
        for _ in 0..n_hidden {
            hidden.push(read_u32(r)? as usize);
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let learning_rate = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let lr_floor_fraction = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let final_loss = f64::from_le_bytes(b8);
        let net = DenseNet::read_from(r)?;
        Ok(Self {
            net,
            config: FlowConfig {
                ode_steps,
                scheme,
                training_steps,
                batch_size,
                hidden,
                learning_rate,
                lr_floor_fraction,
            },
            final_loss,
        })
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
