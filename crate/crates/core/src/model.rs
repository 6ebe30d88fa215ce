//! The flow-map network `u(x, s, t) = sign(t − s) · h(x, s, t)` and its
//! one-step map `X(x, s, t) = x + (t − s) · u(x, s, t)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, ParamStore, Tape, TensorSpec};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, ResidualMlp};
use crate::optim::OptimizerState;
use crate::scalar::{Real, Scalar};

fn default_width() -> usize {
    128
}
fn default_depth() -> usize {
    4
}
fn default_embed() -> usize {
    16
}
fn default_activation() -> Activation {
    Activation::Silu
}
fn default_max_frequency() -> f64 {
    1e3
}
fn default_sign_input() -> bool {
    true
}

/// Architecture of a [`FlowMapModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub dim: usize,
    #[serde(default = "default_width")]
    pub hidden_width: usize,
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Sin/cos features per time input (half sines, half cosines).
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_max_frequency")]
    pub max_frequency: f64,
    /// Feed `sign(t − s)` to the network as an extra input so `h` can jump
    /// across `s = t`.
    #[serde(default = "default_sign_input")]
    pub sign_input: bool,
}

impl ModelSpec {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            hidden_width: default_width(),
            depth: default_depth(),
            time_embed_dim: default_embed(),
            activation: default_activation(),
            max_frequency: default_max_frequency(),
            sign_input: default_sign_input(),
        }
    }

    pub fn with_size(mut self, width: usize, depth: usize) -> Self {
        self.hidden_width = width;
        self.depth = depth;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("model spec: {m}")));
        if self.dim == 0 || self.hidden_width == 0 || self.depth == 0 {
            return bad("dim, hidden_width and depth must be positive");
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad("time_embed_dim must be a positive even number");
        }
        if !(self.max_frequency >= 1.0) {
            return bad("max_frequency must be at least 1");
        }
        Ok(())
    }
}

/// Fourier features of a scalar time: `[sin(f₀τ)…, cos(f₀τ)…]` with
/// geometrically spaced frequencies from 1 to `max_frequency`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding<T> {
    frequencies: Vec<T>,
}

impl<T: Real> TimeEmbedding<T> {
    pub fn new(features: usize, max_frequency: f64) -> Self {
        let n = features / 2;
        let frequencies = (0..n)
            .map(|k| {
                let frac = if n > 1 { k as f64 / (n - 1) as f64 } else { 0.0 };
                T::of(max_frequency.powf(frac))
            })
            .collect();
        Self { frequencies }
    }

    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    pub fn embed<S: Scalar<T>>(&self, tau: S, out: &mut Vec<S>) {
        for &f in &self.frequencies {
            out.push(tau.scale(f).sine());
        }
        for &f in &self.frequencies {
            out.push(tau.scale(f).cosine());
        }
    }

    /// Embeds a batch of times into a `rows × dim` matrix.
    pub fn embed_batch(&self, times: &[T]) -> Matrix<T> {
        let mut m = Matrix::zeros(times.len(), self.dim());
        let mut buf = Vec::with_capacity(self.dim());
        for (i, &tau) in times.iter().enumerate() {
            buf.clear();
            self.embed(tau, &mut buf);
            m.row_mut(i).copy_from_slice(&buf);
        }
        m
    }
}

/// `+1` when `t ≥ s`, `−1` otherwise (so `sign(0) = +1`).
#[inline]
pub fn time_sign<T: Real>(s: T, t: T) -> T {
    if t - s >= T::zero() {
        T::one()
    } else {
        -T::one()
    }
}

#[derive(Clone, Debug)]
pub struct FlowMapModel<T> {
    spec: ModelSpec,
    mlp: ResidualMlp,
    embedding: TimeEmbedding<T>,
    pub params: ParamStore<T>,
    pub ema: ParamStore<T>,
}

impl<T: Real> FlowMapModel<T> {
    fn architecture(spec: &ModelSpec) -> (ResidualMlp, TimeEmbedding<T>) {
        let embedding = TimeEmbedding::new(spec.time_embed_dim, spec.max_frequency);
        let mlp = ResidualMlp::new(
            spec.dim + 2 * embedding.dim() + usize::from(spec.sign_input),
            spec.hidden_width,
            spec.depth,
            spec.dim,
            spec.activation,
        );
        (mlp, embedding)
    }

    /// Random hidden layers, zero output head: the initial map is the identity.
    pub fn new<R: Rng + ?Sized>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (mlp, embedding) = Self::architecture(&spec);
        let params = mlp.init(rng, true);
        Ok(Self {
            ema: params.clone(),
            spec,
            mlp,
            embedding,
            params,
        })
    }

    pub fn from_params(spec: ModelSpec, params: ParamStore<T>, ema: ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let (mlp, embedding) = Self::architecture(&spec);
        let layout = mlp.layout();
        for (name, store) in [("params", &params), ("ema", &ema)] {
            if store.layout() != layout.as_slice() {
                return Err(Error::Checkpoint(format!("{name} layout does not match the architecture")));
            }
        }
        Ok(Self {
            spec,
            mlp,
            embedding,
            params,
            ema,
        })
    }

    /// Exactly `h(x, s, t) = scale · x`, built from the real network with
    /// identity activation.
    pub fn linear(dim: usize, scale: f64) -> Self {
        let spec = ModelSpec {
            dim,
            hidden_width: dim,
            depth: 1,
            time_embed_dim: default_embed(),
            activation: Activation::Linear,
            max_frequency: default_max_frequency(),
            sign_input: false,
        };
        let (mlp, embedding) = Self::architecture(&spec);
        let mut params = ParamStore::zeros(mlp.layout()).expect("layout");
        let inputs = mlp.inputs();
        {
            let (w, _) = mlp.layer_mut(params.values_mut(), 0);
            for i in 0..dim {
                w[i * inputs + i] = T::one();
            }
        }
        {
            let (w, _) = mlp.layer_mut(params.values_mut(), 1);
            for i in 0..dim {
                w[i * dim + i] = T::of(scale);
            }
        }
        Self {
            ema: params.clone(),
            spec,
            mlp,
            embedding,
            params,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn mlp(&self) -> &ResidualMlp {
        &self.mlp
    }

    pub fn embedding(&self) -> &TimeEmbedding<T> {
        &self.embedding
    }

    /// Evaluation view on the raw or EMA weights.
    pub fn view(&self, use_ema: bool) -> FlowMap<'_, T> {
        FlowMap {
            model: self,
            params: if use_ema { &self.ema } else { &self.params },
        }
    }

    pub fn view_with<'a>(&'a self, params: &'a ParamStore<T>) -> FlowMap<'a, T> {
        FlowMap { model: self, params }
    }

    /// `ema ← decay·ema + (1 − decay)·params`.
    pub fn ema_update(&mut self, decay: T) {
        assert!(decay >= T::zero() && decay <= T::one(), "EMA decay outside [0, 1]");
        let keep = T::one() - decay;
        for (e, &p) in self.ema.values_mut().iter_mut().zip(self.params.values()) {
            *e = decay * *e + keep * p;
        }
    }

    pub fn save(&self, path: &Path, step: u64, optimizer: Option<&OptimizerState<T>>) -> Result<()> {
        save_checkpoint(path, self, step, optimizer)
    }
}

/// A model bound to one parameter set.
#[derive(Clone, Copy)]
pub struct FlowMap<'a, T> {
    pub model: &'a FlowMapModel<T>,
    pub params: &'a ParamStore<T>,
}

impl<'a, T: Real> FlowMap<'a, T> {
    pub fn dim(&self) -> usize {
        self.model.spec.dim
    }

    /// The unsigned network output `h(x, s, t)`.
    pub fn h<S: Scalar<T>>(&self, x: &[S], s: S, t: S) -> Result<Vec<S>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                context: "flow map state",
                expected: d,
                got: x.len(),
            });
        }
        let mut z = Vec::with_capacity(self.model.mlp.inputs());
        z.extend_from_slice(x);
        self.model.embedding.embed(s, &mut z);
        self.model.embedding.embed(t, &mut z);
        if self.model.spec.sign_input {
            z.push(S::lift(time_sign(s.primal(), t.primal())));
        }
        self.model.mlp.forward(self.params.values(), &z)
    }

    /// Average velocity `u(x, s, t) = sign(t − s)·h(x, s, t)`.
    pub fn forward<S: Scalar<T>>(&self, x: &[S], s: S, t: S) -> Result<Vec<S>> {
        if !x.iter().all(Scalar::finite) || !s.finite() || !t.finite() {
            return Err(Error::InvalidArgument("non-finite flow map input".into()));
        }
        let h = self.h(x, s, t)?;
        if time_sign(s.primal(), t.primal()) > T::zero() {
            Ok(h)
        } else {
            Ok(h.into_iter().map(|v| -v).collect())
        }
    }

    /// `X(x, s, t) = x + (t − s)·u(x, s, t)`.
    pub fn step<S: Scalar<T>>(&self, x: &[S], s: S, t: S) -> Result<Vec<S>> {
        let u = self.forward(x, s, t)?;
        let dt = t - s;
        Ok(x.iter().zip(u).map(|(&xi, ui)| xi + dt * ui).collect())
    }

    /// Instantaneous velocity `v(x, τ) = u(x, τ, τ)`.
    pub fn velocity<S: Scalar<T>>(&self, x: &[S], tau: S) -> Result<Vec<S>> {
        self.forward(x, tau, tau)
    }

    /// Batched `u` on a tape; `x` is `rows × dim`, `s` and `t` per row.
    pub fn forward_tape(&self, tape: &mut Tape<'_, T>, x: NodeId, s: &[T], t: &[T]) -> Result<NodeId> {
        let es = tape.constant(self.model.embedding.embed_batch(s));
        let et = tape.constant(self.model.embedding.embed_batch(t));
        let signs: Vec<T> = s.iter().zip(t).map(|(&a, &b)| time_sign(a, b)).collect();
        let z = if self.model.spec.sign_input {
            let col = tape.constant(Matrix::from_vec(signs.len(), 1, signs.clone()));
            tape.concat(&[x, es, et, col])
        } else {
            tape.concat(&[x, es, et])
        };
        let h = self.model.mlp.forward_tape(tape, z)?;
        Ok(tape.row_scale(h, signs))
    }

    /// Batched `X(x, s, t)` on a tape.
    pub fn step_tape(&self, tape: &mut Tape<'_, T>, x: NodeId, s: &[T], t: &[T]) -> Result<(NodeId, NodeId)> {
        let u = self.forward_tape(tape, x, s, t)?;
        let dt = s.iter().zip(t).map(|(&a, &b)| b - a).collect();
        let moved = tape.row_scale(u, dt);
        Ok((tape.add(x, moved), u))
    }
}

const MAGIC: &[u8; 8] = b"FLOWMAP\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    dim: usize,
    hidden_width: usize,
    depth: usize,
    time_embed_dim: usize,
    activation: Activation,
    max_frequency: f64,
    sign_input: bool,
    layout: Vec<TensorSpec>,
    step: u64,
    optimizer_steps: Option<u64>,
}

/// A loaded checkpoint.
#[derive(Debug)]
pub struct Checkpoint<T> {
    pub model: FlowMapModel<T>,
    pub step: u64,
    pub optimizer: Option<OptimizerState<T>>,
}

fn write_blob<T: Real, W: Write>(w: &mut W, values: &[T]) -> Result<()> {
    for v in values {
        w.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

fn read_blob<T: Real, R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<T>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("{what}: expected {n} values: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect())
}

/// Header, then little-endian `f64` blobs: params, EMA, and optionally the
/// optimizer moments.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    model: &FlowMapModel<T>,
    step: u64,
    optimizer: Option<&OptimizerState<T>>,
) -> Result<()> {
    let spec = &model.spec;
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        dim: spec.dim,
        hidden_width: spec.hidden_width,
        depth: spec.depth,
        time_embed_dim: spec.time_embed_dim,
        activation: spec.activation,
        max_frequency: spec.max_frequency,
        sign_input: spec.sign_input,
        layout: model.params.layout().to_vec(),
        step,
        optimizer_steps: optimizer.map(|o| o.steps),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    write_blob(&mut w, model.params.values())?;
    write_blob(&mut w, model.ema.values())?;
    if let Some(o) = optimizer {
        write_blob(&mut w, &o.m)?;
        write_blob(&mut w, &o.v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    r.read_exact(&mut word)?;
    let mut json = vec![0u8; u32::from_le_bytes(word) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let spec = ModelSpec {
        dim: header.dim,
        hidden_width: header.hidden_width,
        depth: header.depth,
        time_embed_dim: header.time_embed_dim,
        activation: header.activation,
        max_frequency: header.max_frequency,
        sign_input: header.sign_input,
    };
    let n: usize = header.layout.iter().map(TensorSpec::numel).sum();
    let params = ParamStore::from_values(header.layout.clone(), read_blob(&mut r, n, "params")?)?;
    let ema = ParamStore::from_values(header.layout.clone(), read_blob(&mut r, n, "ema")?)?;
    let optimizer = match header.optimizer_steps {
        Some(steps) => Some(OptimizerState {
            m: read_blob(&mut r, n, "first moment")?,
            v: read_blob(&mut r, n, "second moment")?,
            steps,
        }),
        None => None,
    };
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        model: FlowMapModel::from_params(spec, params, ema)?,
        step: header.step,
        optimizer,
    })
}
