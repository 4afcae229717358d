//! Mean-field Gaussian posteriors over MLP weights.
//!
//! Every weight and bias carries an independent Gaussian with parameters
//! (mean, log variance). Networks are a shared ReLU trunk plus one or more
//! linear output heads; task-incremental benchmarks give each task its own
//! head while domain-incremental ones share a single head.
//!
//! The stochastic forward pass uses the local reparameterization trick:
//! instead of sampling weights, each pre-activation is sampled from its
//! induced Gaussian `N(x·mu + mu_b, x²·sigma² + sigma_b²)`, which keeps the
//! estimator variance low and the tape small.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::container::{self, Container, Entry};
use crate::grad::{GradError, NodeId, Tape, Tensor};
use crate::seeding::{self, tag};

/// Standard deviation for freshly initialized posterior means.
pub const INIT_MEAN_STD: f64 = 0.1;
/// Log variance for freshly initialized posteriors (sigma² = e^-6).
pub const INIT_LOGVAR: f64 = -6.0;

#[derive(Debug, Error)]
pub enum BayesError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("head index {head} out of range, network has {n_heads} heads")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("posterior does not match: {0}")]
    Mismatch(String),
    #[error("{0}")]
    BadArg(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

// ─── network shape ───

/// Architecture of a Bayesian MLP: ReLU trunk and linear heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    /// Classes per head.
    pub output_dim: usize,
    pub n_heads: usize,
}

impl NetworkSpec {
    pub fn single_head(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Self {
        NetworkSpec {
            input_dim,
            hidden,
            output_dim: classes,
            n_heads: 1,
        }
    }

    pub fn multi_head(
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        n_heads: usize,
    ) -> Self {
        NetworkSpec {
            input_dim,
            hidden,
            output_dim: classes,
            n_heads,
        }
    }

    pub fn validate(&self) -> Result<(), BayesError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.n_heads == 0 {
            return Err(BayesError::InvalidSpec(format!(
                "dimensions must be positive: input {}, output {}, heads {}",
                self.input_dim, self.output_dim, self.n_heads
            )));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(BayesError::InvalidSpec("hidden width of zero".into()));
        }
        Ok(())
    }

    /// (in, out) pairs for trunk layers, in order.
    fn trunk_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len());
        let mut prev = self.input_dim;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    fn head_in_dim(&self) -> usize {
        *self.hidden.last().unwrap_or(&self.input_dim)
    }

    /// Total trainable scalars (means and log variances).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (i, o) in self.trunk_dims() {
            n += 2 * (i * o + o);
        }
        n + self.n_heads * 2 * (self.head_in_dim() * self.output_dim + self.output_dim)
    }
}

// ─── variational parameters ───

/// One layer's posterior: Gaussians over the weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VarLayer {
    pub w_mean: Tensor,
    pub w_logvar: Tensor,
    pub b_mean: Tensor,
    pub b_logvar: Tensor,
}

impl VarLayer {
    fn numel(&self) -> usize {
        2 * (self.w_mean.len() + self.b_mean.len())
    }
}

/// Full posterior over a network: trainable state of a continual run.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams {
    pub spec: NetworkSpec,
    pub trunk: Vec<VarLayer>,
    pub heads: Vec<VarLayer>,
}

fn draw_tensor(rng: &mut ChaCha8Rng, shape: &[usize], normal: &Normal<f64>) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed together")
}

impl VariationalParams {
    /// Fresh posterior: means drawn N(0, 0.1²), log variances set to -6.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self, BayesError> {
        spec.validate()?;
        let mut rng = seeding::rng_for(&[seed, tag::INIT]);
        let normal = Normal::new(0.0, INIT_MEAN_STD).expect("valid std");
        let make = |rng: &mut ChaCha8Rng, i: usize, o: usize| VarLayer {
            w_mean: draw_tensor(rng, &[i, o], &normal),
            w_logvar: Tensor::full(&[i, o], INIT_LOGVAR),
            b_mean: draw_tensor(rng, &[o], &normal),
            b_logvar: Tensor::full(&[o], INIT_LOGVAR),
        };
        let trunk = spec
            .trunk_dims()
            .into_iter()
            .map(|(i, o)| make(&mut rng, i, o))
            .collect();
        let hin = spec.head_in_dim();
        let heads = (0..spec.n_heads)
            .map(|_| make(&mut rng, hin, spec.output_dim))
            .collect();
        Ok(VariationalParams {
            spec: spec.clone(),
            trunk,
            heads,
        })
    }

    fn layers(&self) -> impl Iterator<Item = &VarLayer> {
        self.trunk.iter().chain(self.heads.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut VarLayer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    /// Layer names in serialization and flattening order.
    fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.trunk.len()).map(|i| format!("trunk{i}")).collect();
        names.extend((0..self.heads.len()).map(|i| format!("head{i}")));
        names
    }

    pub fn n_flat(&self) -> usize {
        self.layers().map(VarLayer::numel).sum()
    }

    /// Flattens in a fixed order: trunk then heads; per layer w_mean,
    /// w_logvar, b_mean, b_logvar, each row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_flat());
        for l in self.layers() {
            out.extend_from_slice(l.w_mean.data());
            out.extend_from_slice(l.w_logvar.data());
            out.extend_from_slice(l.b_mean.data());
            out.extend_from_slice(l.b_logvar.data());
        }
        out
    }

    /// Inverse of [`to_flat`]; `flat` must have exactly `n_flat()` elements.
    pub fn copy_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_flat(), "flat vector length mismatch");
        let mut pos = 0;
        let take = |t: &mut Tensor, pos: &mut usize| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[*pos..*pos + n]);
            *pos += n;
        };
        for l in self.layers_mut() {
            take(&mut l.w_mean, &mut pos);
            take(&mut l.w_logvar, &mut pos);
            take(&mut l.b_mean, &mut pos);
            take(&mut l.b_logvar, &mut pos);
        }
    }

    /// Frozen copy of the posterior after finishing `task_index`.
    pub fn snapshot(&self, task_index: usize) -> PosteriorSnapshot {
        PosteriorSnapshot {
            task_index,
            inner: self.clone(),
        }
    }

    /// Puts every parameter tensor on the tape as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamNodes {
        self.register_with(tape, true)
    }

    /// Constant registration for inference; backward skips these nodes.
    pub fn register_constant(&self, tape: &mut Tape) -> ParamNodes {
        self.register_with(tape, false)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> ParamNodes {
        fn reg(tape: &mut Tape, l: &VarLayer, trainable: bool) -> LayerNodes {
            let mut put = |t: &Tensor| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            };
            LayerNodes {
                w_mean: put(&l.w_mean),
                w_logvar: put(&l.w_logvar),
                b_mean: put(&l.b_mean),
                b_logvar: put(&l.b_logvar),
            }
        }
        let trunk = self
            .trunk
            .iter()
            .map(|l| reg(tape, l, trainable))
            .collect();
        let heads = self
            .heads
            .iter()
            .map(|l| reg(tape, l, trainable))
            .collect();
        ParamNodes { trunk, heads }
    }

    /// Gradients of all parameters in `to_flat` order; parameters the root
    /// does not depend on contribute zeros.
    pub fn grads_flat(&self, tape: &Tape, nodes: &ParamNodes) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_flat());
        let pairs = self
            .trunk
            .iter()
            .zip(&nodes.trunk)
            .chain(self.heads.iter().zip(&nodes.heads));
        for (layer, ids) in pairs {
            for (t, id) in [
                (&layer.w_mean, ids.w_mean),
                (&layer.w_logvar, ids.w_logvar),
                (&layer.b_mean, ids.b_mean),
                (&layer.b_logvar, ids.b_logvar),
            ] {
                match tape.grad(id) {
                    Some(g) => out.extend_from_slice(g.data()),
                    None => out.extend(std::iter::repeat_n(0.0, t.len())),
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path, task_index: usize) -> Result<(), BayesError> {
        let mut f = BufWriter::new(File::create(path)?);
        let c = Container {
            kind: container::KIND_POSTERIOR,
            task: task_index as u32,
            extra: 0,
            entries: self.entries(),
        };
        container::write_container(&mut f, &c)?;
        Ok(())
    }

    fn entries(&self) -> Vec<Entry> {
        let names = self.layer_names();
        let mut entries = Vec::new();
        for (name, l) in names.iter().zip(self.layers()) {
            for (role, t) in [
                (ROLE_W_MEAN, &l.w_mean),
                (ROLE_W_LOGVAR, &l.w_logvar),
                (ROLE_B_MEAN, &l.b_mean),
                (ROLE_B_LOGVAR, &l.b_logvar),
            ] {
                entries.push(Entry {
                    name: name.clone(),
                    role,
                    tensor: t.clone(),
                });
            }
        }
        entries
    }
}

const ROLE_W_MEAN: u8 = 0;
const ROLE_W_LOGVAR: u8 = 1;
const ROLE_B_MEAN: u8 = 2;
const ROLE_B_LOGVAR: u8 = 3;

fn layers_from_entries(entries: &[Entry]) -> Result<(Vec<VarLayer>, Vec<VarLayer>), BayesError> {
    let mismatch = |m: &str| BayesError::Mismatch(m.to_string());
    if entries.len() % 4 != 0 || entries.is_empty() {
        return Err(mismatch("entry count is not a positive multiple of 4"));
    }
    let mut trunk = Vec::new();
    let mut heads = Vec::new();
    for chunk in entries.chunks(4) {
        let roles: Vec<u8> = chunk.iter().map(|e| e.role).collect();
        if roles != [ROLE_W_MEAN, ROLE_W_LOGVAR, ROLE_B_MEAN, ROLE_B_LOGVAR] {
            return Err(mismatch("unexpected entry roles"));
        }
        if chunk.iter().any(|e| e.name != chunk[0].name) {
            return Err(mismatch("layer entries are not grouped"));
        }
        let layer = VarLayer {
            w_mean: chunk[0].tensor.clone(),
            w_logvar: chunk[1].tensor.clone(),
            b_mean: chunk[2].tensor.clone(),
            b_logvar: chunk[3].tensor.clone(),
        };
        if layer.w_mean.shape() != layer.w_logvar.shape()
            || layer.b_mean.shape() != layer.b_logvar.shape()
            || layer.w_mean.rank() != 2
            || layer.b_mean.rank() != 1
        {
            return Err(mismatch("layer tensor shapes are inconsistent"));
        }
        if chunk[0].name.starts_with("trunk") {
            trunk.push(layer);
        } else if chunk[0].name.starts_with("head") {
            heads.push(layer);
        } else {
            return Err(mismatch("unknown layer name"));
        }
    }
    if heads.is_empty() {
        return Err(mismatch("no head layers"));
    }
    Ok((trunk, heads))
}

fn spec_from_layers(trunk: &[VarLayer], heads: &[VarLayer]) -> NetworkSpec {
    let input_dim = trunk
        .first()
        .map(|l| l.w_mean.shape()[0])
        .unwrap_or_else(|| heads[0].w_mean.shape()[0]);
    NetworkSpec {
        input_dim,
        hidden: trunk.iter().map(|l| l.w_mean.shape()[1]).collect(),
        output_dim: heads[0].w_mean.shape()[1],
        n_heads: heads.len(),
    }
}

// ─── frozen posteriors ───

/// Immutable copy of a posterior, used as the KL prior and elastic anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSnapshot {
    task_index: usize,
    inner: VariationalParams,
}

impl PosteriorSnapshot {
    pub fn task_index(&self) -> usize {
        self.task_index
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.inner.spec
    }

    pub fn trunk(&self) -> &[VarLayer] {
        &self.inner.trunk
    }

    pub fn heads(&self) -> &[VarLayer] {
        &self.inner.heads
    }

    /// View of the frozen parameters, e.g. for evaluating a stored posterior.
    pub fn as_params(&self) -> &VariationalParams {
        &self.inner
    }

    /// Mutable copy, detached from the snapshot.
    pub fn to_params(&self) -> VariationalParams {
        self.inner.clone()
    }

    pub fn save(&self, path: &Path) -> Result<(), BayesError> {
        self.inner.save(path, self.task_index)
    }

    pub fn load(path: &Path) -> Result<PosteriorSnapshot, BayesError> {
        let mut f = BufReader::new(File::open(path)?);
        let c = container::read_container(&mut f)?;
        if c.kind != container::KIND_POSTERIOR {
            return Err(BayesError::Mismatch(format!(
                "container kind {} is not a posterior",
                c.kind
            )));
        }
        let (trunk, heads) = layers_from_entries(&c.entries)?;
        let spec = spec_from_layers(&trunk, &heads);
        let inner = VariationalParams { spec, trunk, heads };
        Ok(PosteriorSnapshot {
            task_index: c.task as usize,
            inner,
        })
    }
}

// ─── tape wiring ───

/// Tape node ids for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub w_mean: NodeId,
    pub w_logvar: NodeId,
    pub b_mean: NodeId,
    pub b_logvar: NodeId,
}

/// Tape node ids for every parameter of a network.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub trunk: Vec<LayerNodes>,
    pub heads: Vec<LayerNodes>,
}

/// Variance nodes (exp of log variance), shared across MC samples so the
/// exponentials are computed once per tape rather than once per sample.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerVarNodes {
    w_var: NodeId,
    b_var: NodeId,
}

#[derive(Debug, Clone)]
pub(crate) struct VarNodes {
    trunk: Vec<LayerVarNodes>,
    heads: Vec<LayerVarNodes>,
}

impl ParamNodes {
    fn check_head(&self, head: usize) -> Result<(), BayesError> {
        if head >= self.heads.len() {
            return Err(BayesError::HeadOutOfRange {
                head,
                n_heads: self.heads.len(),
            });
        }
        Ok(())
    }

    pub(crate) fn var_nodes(&self, tape: &mut Tape) -> VarNodes {
        fn mk(tape: &mut Tape, l: &LayerNodes) -> LayerVarNodes {
            LayerVarNodes {
                w_var: tape.exp(l.w_logvar),
                b_var: tape.exp(l.b_logvar),
            }
        }
        let trunk = self.trunk.iter().map(|l| mk(tape, l)).collect();
        let heads = self.heads.iter().map(|l| mk(tape, l)).collect();
        VarNodes { trunk, heads }
    }
}

fn standard_normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data constructed together")
}

fn lrt_layer(
    tape: &mut Tape,
    h: NodeId,
    l: &LayerNodes,
    v: &LayerVarNodes,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, GradError> {
    let mw = tape.matmul(h, l.w_mean)?;
    let m = tape.add_row(mw, l.b_mean)?;
    let h2 = tape.square(h);
    let vw = tape.matmul(h2, v.w_var)?;
    let var = tape.add_row(vw, v.b_var)?;
    let sd = tape.sqrt(var)?;
    let shape = tape.value(m).shape().to_vec();
    let eps = tape.constant(standard_normal_tensor(rng, &shape));
    let noise = tape.mul(sd, eps)?;
    tape.add(m, noise)
}

pub(crate) fn forward_lrt_shared(
    tape: &mut Tape,
    nodes: &ParamNodes,
    vars: &VarNodes,
    x: NodeId,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, BayesError> {
    nodes.check_head(head)?;
    let mut h = x;
    for (l, v) in nodes.trunk.iter().zip(&vars.trunk) {
        let z = lrt_layer(tape, h, l, v, rng)?;
        h = tape.relu(z);
    }
    Ok(lrt_layer(
        tape,
        h,
        &nodes.heads[head],
        &vars.heads[head],
        rng,
    )?)
}

/// One stochastic forward pass under the local reparameterization trick.
/// Returns the logits node; `x` is a rank-2 node of inputs.
pub fn forward_lrt(
    tape: &mut Tape,
    nodes: &ParamNodes,
    x: NodeId,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, BayesError> {
    let vars = nodes.var_nodes(tape);
    forward_lrt_shared(tape, nodes, &vars, x, head, rng)
}

/// Deterministic forward pass through the posterior means.
pub fn forward_mean(
    tape: &mut Tape,
    nodes: &ParamNodes,
    x: NodeId,
    head: usize,
) -> Result<NodeId, BayesError> {
    nodes.check_head(head)?;
    let mut h = x;
    for l in &nodes.trunk {
        let mw = tape.matmul(h, l.w_mean)?;
        let z = tape.add_row(mw, l.b_mean)?;
        h = tape.relu(z);
    }
    let l = &nodes.heads[head];
    let mw = tape.matmul(h, l.w_mean)?;
    Ok(tape.add_row(mw, l.b_mean)?)
}

// ─── KL divergence ───

fn kl_piece(
    tape: &mut Tape,
    mean_q: NodeId,
    logvar_q: NodeId,
    mean_p: &Tensor,
    logvar_p: &Tensor,
) -> Result<NodeId, BayesError> {
    if tape.value(mean_q).shape() != mean_p.shape()
        || tape.value(logvar_q).shape() != logvar_p.shape()
    {
        return Err(BayesError::Mismatch(format!(
            "prior layer shape {:?} does not match posterior {:?}",
            mean_p.shape(),
            tape.value(mean_q).shape()
        )));
    }
    let d = mean_p.len() as f64;
    let c_mean = tape.constant(mean_p.clone());
    let c_logvar = tape.constant(logvar_p.clone());
    let c_inv_var = tape.constant(logvar_p.map(|v| (-v).exp()));

    // ratio: sum exp(rho_q - rho_p)
    let rho_diff = tape.sub(logvar_q, c_logvar)?;
    let ratio = tape.exp(rho_diff);
    let s_ratio = tape.sum(ratio);
    // quadratic: sum (mu_q - mu_p)² / sigma_p²
    let diff = tape.sub(mean_q, c_mean)?;
    let d2 = tape.square(diff);
    let quad = tape.mul(d2, c_inv_var)?;
    let s_quad = tape.sum(quad);
    // log ratio: sum (rho_p - rho_q)
    let rho_rev = tape.sub(c_logvar, logvar_q)?;
    let s_logs = tape.sum(rho_rev);

    let t = tape.add(s_ratio, s_quad)?;
    let t = tape.add(t, s_logs)?;
    let t = tape.add_scalar(t, -d);
    Ok(tape.scale(t, 0.5))
}

/// KL(q || prior) summed over every parameter of the network, including all
/// heads. With `q == prior` both the value and every gradient are exactly
/// zero, which is what keeps untouched heads bit-identical across tasks.
pub fn kl_divergence(
    tape: &mut Tape,
    nodes: &ParamNodes,
    prior: &PosteriorSnapshot,
) -> Result<NodeId, BayesError> {
    if nodes.trunk.len() != prior.trunk().len() || nodes.heads.len() != prior.heads().len() {
        return Err(BayesError::Mismatch(format!(
            "prior has {} trunk / {} head layers, posterior has {} / {}",
            prior.trunk().len(),
            prior.heads().len(),
            nodes.trunk.len(),
            nodes.heads.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    let pairs = nodes
        .trunk
        .iter()
        .zip(prior.trunk())
        .chain(nodes.heads.iter().zip(prior.heads()));
    for (ids, pl) in pairs {
        let w = kl_piece(tape, ids.w_mean, ids.w_logvar, &pl.w_mean, &pl.w_logvar)?;
        let b = kl_piece(tape, ids.b_mean, ids.b_logvar, &pl.b_mean, &pl.b_logvar)?;
        let piece = tape.add(w, b)?;
        total = Some(match total {
            Some(t) => tape.add(t, piece)?,
            None => piece,
        });
    }
    Ok(total.expect("at least one head layer"))
}

// ─── prediction ───

pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let z = logits.data();
    let mut out = vec![0.0; b * c];
    for i in 0..b {
        let row = &z[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for j in 0..c {
            let e = (row[j] - m).exp();
            out[i * c + j] = e;
            s += e;
        }
        let inv = 1.0 / s;
        for j in 0..c {
            out[i * c + j] *= inv;
        }
    }
    Tensor::new(vec![b, c], out).expect("shape/data constructed together")
}

/// Monte Carlo predictive distribution: mean softmax over `n_samples`
/// stochastic forward passes, each seeded from `(seed, sample index)`.
pub fn predict(
    params: &VariationalParams,
    x: &Tensor,
    head: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Tensor, BayesError> {
    if n_samples == 0 {
        return Err(BayesError::BadArg("n_samples must be at least 1".into()));
    }
    let (b, _) = x.dims2("predict")?;
    let c = params.spec.output_dim;
    let mut acc = vec![0.0; b * c];
    for s in 0..n_samples {
        let mut rng = seeding::rng_for(&[seed, tag::EVAL, s as u64]);
        let mut tape = Tape::new();
        let nodes = params.register_constant(&mut tape);
        let xid = tape.constant(x.clone());
        let logits = forward_lrt(&mut tape, &nodes, xid, head, &mut rng)?;
        let probs = softmax_rows(tape.value(logits));
        for (a, p) in acc.iter_mut().zip(probs.data()) {
            *a += p;
        }
    }
    let inv = 1.0 / n_samples as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(Tensor::new(vec![b, c], acc)?)
}

/// Deterministic predictive distribution at the posterior means.
pub fn predict_point(
    params: &VariationalParams,
    x: &Tensor,
    head: usize,
) -> Result<Tensor, BayesError> {
    let mut tape = Tape::new();
    let nodes = params.register_constant(&mut tape);
    let xid = tape.constant(x.clone());
    let logits = forward_mean(&mut tape, &nodes, xid, head)?;
    Ok(softmax_rows(tape.value(logits)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec::single_head(3, vec![4], 2)
    }

    #[test]
    fn init_is_deterministic_and_well_formed() {
        let spec = tiny_spec();
        let a = VariationalParams::init(&spec, 9).unwrap();
        let b = VariationalParams::init(&spec, 9).unwrap();
        let c = VariationalParams::init(&spec, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.n_flat(), spec.param_count());
        for l in a.trunk.iter().chain(&a.heads) {
            assert!(l.w_logvar.data().iter().all(|&v| v == INIT_LOGVAR));
            assert!(l.b_logvar.data().iter().all(|&v| v == INIT_LOGVAR));
        }
    }

    #[test]
    fn init_mean_magnitude_matches_half_normal_expectation() {
        // |N(0, 0.1²)| has expectation 0.1·sqrt(2/pi) ~ 0.0798; with ~10k
        // draws the sample mean should land within a few percent.
        let spec = NetworkSpec::single_head(100, vec![100], 2);
        let p = VariationalParams::init(&spec, 0).unwrap();
        let w = &p.trunk[0].w_mean;
        let mean_abs: f64 =
            w.data().iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64;
        let expect = INIT_MEAN_STD * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_abs - expect).abs() / expect < 0.05,
            "mean |w| = {mean_abs}, expected about {expect}"
        );
    }

    #[test]
    fn flat_round_trip() {
        let spec = NetworkSpec::multi_head(3, vec![4, 5], 2, 3);
        let p = VariationalParams::init(&spec, 1).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), spec.param_count());
        let mut q = VariationalParams::init(&spec, 2).unwrap();
        q.copy_from_flat(&flat);
        assert_eq!(p, q);
    }

    #[test]
    fn spec_validation_rejects_zero_dims() {
        assert!(NetworkSpec::single_head(0, vec![4], 2)
            .validate()
            .is_err());
        assert!(NetworkSpec::single_head(3, vec![0], 2)
            .validate()
            .is_err());
        assert!(NetworkSpec::multi_head(3, vec![4], 2, 0).validate().is_err());
    }

    #[test]
    fn forward_mean_matches_hand_computation() {
        let spec = NetworkSpec::single_head(2, vec![], 2);
        let mut p = VariationalParams::init(&spec, 0).unwrap();
        p.heads[0].w_mean = Tensor::matrix(2, 2, vec![1.0, -1.0, 2.0, 0.5]).unwrap();
        p.heads[0].b_mean = Tensor::vector(vec![0.25, -0.25]);
        let mut tape = Tape::new();
        let nodes = p.register_constant(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 2, vec![3.0, -1.0]).unwrap());
        let logits = forward_mean(&mut tape, &nodes, x, 0).unwrap();
        let v = tape.value(logits).data();
        // [3, -1] @ [[1,-1],[2,.5]] + [0.25,-0.25] = [1.25, -3.75]
        assert!((v[0] - 1.25).abs() < 1e-12);
        assert!((v[1] - (-3.75)).abs() < 1e-12);
    }

    #[test]
    fn forward_lrt_collapses_to_mean_at_tiny_variance() {
        let spec = NetworkSpec::single_head(3, vec![5], 2);
        let mut p = VariationalParams::init(&spec, 3).unwrap();
        for l in p.trunk.iter_mut().chain(p.heads.iter_mut()) {
            l.w_logvar = Tensor::full(l.w_logvar.shape(), -40.0);
            l.b_logvar = Tensor::full(l.b_logvar.shape(), -40.0);
        }
        let x = Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.0, 1.0, -0.5]).unwrap();

        let mut tape = Tape::new();
        let nodes = p.register_constant(&mut tape);
        let xid = tape.constant(x.clone());
        let mut rng = seeding::rng_for(&[0]);
        let noisy = forward_lrt(&mut tape, &nodes, xid, 0, &mut rng).unwrap();
        let exact = forward_mean(&mut tape, &nodes, xid, 0).unwrap();
        for (a, b) in tape
            .value(noisy)
            .data()
            .iter()
            .zip(tape.value(exact).data())
        {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_lrt_same_seed_is_bitwise_reproducible() {
        let spec = tiny_spec();
        let p = VariationalParams::init(&spec, 4).unwrap();
        let x = Tensor::matrix(3, 3, vec![0.1; 9]).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let nodes = p.register_constant(&mut tape);
            let xid = tape.constant(x.clone());
            let mut rng = seeding::rng_for(&[77]);
            let out = forward_lrt(&mut tape, &nodes, xid, 0, &mut rng).unwrap();
            tape.value(out)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lrt_moments_match_closed_form() {
        // Single linear unit, batch of one: the pre-activation is Gaussian
        // with mean x·mu_w + mu_b and variance x²·sigma_w² + sigma_b².
        let spec = NetworkSpec::single_head(2, vec![], 1);
        let mut p = VariationalParams::init(&spec, 0).unwrap();
        p.heads[0].w_mean = Tensor::matrix(2, 1, vec![0.3, -0.7]).unwrap();
        p.heads[0].w_logvar = Tensor::matrix(2, 1, vec![-1.0, -2.0]).unwrap();
        p.heads[0].b_mean = Tensor::vector(vec![0.1]);
        p.heads[0].b_logvar = Tensor::vector(vec![-1.5]);
        let x = Tensor::matrix(1, 2, vec![1.5, -2.0]).unwrap();

        let m_true = 1.5 * 0.3 + (-2.0) * (-0.7) + 0.1;
        let v_true = 1.5f64.powi(2) * (-1.0f64).exp()
            + (-2.0f64).powi(2) * (-2.0f64).exp()
            + (-1.5f64).exp();

        let n = 100_000;
        let mut rng = seeding::rng_for(&[5]);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let mut tape = Tape::new();
            let nodes = p.register_constant(&mut tape);
            let xid = tape.constant(x.clone());
            let z = forward_lrt(&mut tape, &nodes, xid, 0, &mut rng).unwrap();
            let v = tape.value(z).item();
            sum += v;
            sum_sq += v * v;
        }
        let nf = n as f64;
        let mean = sum / nf;
        let var = sum_sq / nf - mean * mean;
        let se_mean = (v_true / nf).sqrt();
        assert!(
            (mean - m_true).abs() < 3.0 * se_mean,
            "mean {mean} vs {m_true} (3se = {})",
            3.0 * se_mean
        );
        let se_var = v_true * (2.0 / (nf - 1.0)).sqrt();
        assert!(
            (var - v_true).abs() < 3.0 * se_var,
            "var {var} vs {v_true} (3se = {})",
            3.0 * se_var
        );
    }

    #[test]
    fn kl_of_posterior_against_its_own_snapshot_is_exactly_zero() {
        let spec = NetworkSpec::multi_head(3, vec![4], 2, 2);
        let p = VariationalParams::init(&spec, 6).unwrap();
        let prior = p.snapshot(0);
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let kl = kl_divergence(&mut tape, &nodes, &prior).unwrap();
        assert_eq!(tape.value(kl).item(), 0.0);
        tape.backward(kl).unwrap();
        let grads = p.grads_flat(&tape, &nodes);
        assert!(
            grads.iter().all(|&g| g == 0.0),
            "every KL gradient at q == prior must be exactly zero"
        );
    }

    #[test]
    fn kl_is_positive_when_any_single_parameter_moves() {
        let spec = tiny_spec();
        let base = VariationalParams::init(&spec, 8).unwrap();
        let prior = base.snapshot(0);
        let flat = base.to_flat();
        // Perturb a handful of scattered coordinates, one at a time.
        for idx in [0, 3, flat.len() / 2, flat.len() - 1] {
            let mut f = flat.clone();
            f[idx] += 0.05;
            let mut p = base.clone();
            p.copy_from_flat(&f);
            let mut tape = Tape::new();
            let nodes = p.register(&mut tape);
            let kl = kl_divergence(&mut tape, &nodes, &prior).unwrap();
            assert!(
                tape.value(kl).item() > 0.0,
                "KL must be positive after perturbing coordinate {idx}"
            );
        }
    }

    #[test]
    fn kl_single_parameter_analytic_value() {
        // One weight differing: q = N(1, 1), p = N(0, 1) gives KL = 1/2.
        let spec = NetworkSpec::single_head(1, vec![], 1);
        let mut p = VariationalParams::init(&spec, 0).unwrap();
        p.heads[0].w_mean = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        p.heads[0].w_logvar = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let prior = p.snapshot(0);
        p.heads[0].w_mean = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let kl = kl_divergence(&mut tape, &nodes, &prior).unwrap();
        assert!((tape.value(kl).item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let spec = NetworkSpec::single_head(2, vec![3], 2);
        let p = VariationalParams::init(&spec, 11).unwrap();
        let mut prior_params = VariationalParams::init(&spec, 12).unwrap();
        // Keep prior variances moderate so inverse variances are tame.
        for l in prior_params.trunk.iter_mut().chain(prior_params.heads.iter_mut()) {
            l.w_logvar = l.w_logvar.map(|v| v + 4.0);
            l.b_logvar = l.b_logvar.map(|v| v + 4.0);
        }
        let prior = prior_params.snapshot(0);

        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let kl = kl_divergence(&mut tape, &nodes, &prior).unwrap();
        tape.backward(kl).unwrap();
        let analytic = p.grads_flat(&tape, &nodes);

        let flat = p.to_flat();
        let mut f = |v: &[f64]| {
            let mut q = p.clone();
            q.copy_from_flat(v);
            let mut t = Tape::new();
            let n = q.register(&mut t);
            let k = kl_divergence(&mut t, &n, &prior).unwrap();
            t.value(k).item()
        };
        let numeric = gradcheck::central_diff(&mut f, &flat, 1e-5);
        let err = gradcheck::max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn unused_head_gets_no_gradient_from_forward() {
        let spec = NetworkSpec::multi_head(3, vec![4], 2, 3);
        let p = VariationalParams::init(&spec, 13).unwrap();
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let x = tape.constant(Tensor::matrix(2, 3, vec![0.2; 6]).unwrap());
        let mut rng = seeding::rng_for(&[1]);
        let logits = forward_lrt(&mut tape, &nodes, x, 1, &mut rng).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(nodes.heads[0].w_mean).is_none());
        assert!(tape.grad(nodes.heads[2].w_mean).is_none());
        assert!(tape.grad(nodes.heads[1].w_mean).is_some());
        assert!(tape.grad(nodes.trunk[0].w_mean).is_some());
    }

    #[test]
    fn head_index_out_of_range_is_an_error() {
        let spec = tiny_spec();
        let p = VariationalParams::init(&spec, 0).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        match predict(&p, &x, 5, 1, 0) {
            Err(BayesError::HeadOutOfRange { head: 5, n_heads: 1 }) => {}
            other => panic!("expected HeadOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn predict_rows_are_distributions() {
        let spec = NetworkSpec::single_head(4, vec![6], 3);
        let p = VariationalParams::init(&spec, 14).unwrap();
        let x = Tensor::matrix(
            5,
            4,
            (0..20).map(|i| (i as f64) / 7.0 - 1.0).collect(),
        )
        .unwrap();
        let probs = predict(&p, &x, 0, 7, 21).unwrap();
        assert_eq!(probs.shape(), &[5, 3]);
        for i in 0..5 {
            let row_sum: f64 = (0..3).map(|j| probs.get2(i, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-9, "row {i} sums to {row_sum}");
            assert!((0..3).all(|j| probs.get2(i, j) >= 0.0));
        }
    }

    #[test]
    fn predict_is_deterministic_for_fixed_seed() {
        let spec = tiny_spec();
        let p = VariationalParams::init(&spec, 15).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.4, -0.2, 1.0, 0.0, 0.3, -1.1]).unwrap();
        let a = predict(&p, &x, 0, 9, 33).unwrap();
        let b = predict(&p, &x, 0, 9, 33).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn predict_converges_with_more_samples() {
        // Two independent 5000-sample estimates of the same probability must
        // agree within a conservative Monte Carlo bound: per-sample softmax
        // outputs live in [0,1], so their variance is at most 1/4 and the
        // standard error of a difference of means is at most
        // sqrt(2 * 0.25 / n).
        let spec = NetworkSpec::single_head(3, vec![8], 2);
        let p = VariationalParams::init(&spec, 16).unwrap();
        let x = Tensor::matrix(1, 3, vec![0.9, -0.4, 0.2]).unwrap();
        let n = 5000;
        let a = predict(&p, &x, 0, n, 1).unwrap();
        let b = predict(&p, &x, 0, n, 2).unwrap();
        let bound = 2.0 * (2.0 * 0.25 / n as f64).sqrt();
        assert!(
            (a.get2(0, 0) - b.get2(0, 0)).abs() <= bound,
            "estimates {} and {} differ by more than {bound}",
            a.get2(0, 0),
            b.get2(0, 0)
        );
    }

    #[test]
    fn predict_point_matches_softmax_of_mean_logits() {
        let spec = tiny_spec();
        let p = VariationalParams::init(&spec, 17).unwrap();
        let x = Tensor::matrix(2, 3, vec![1.0, 0.5, -0.5, 0.2, 0.2, 0.2]).unwrap();
        let probs = predict_point(&p, &x, 0).unwrap();
        let mut tape = Tape::new();
        let nodes = p.register_constant(&mut tape);
        let xid = tape.constant(x.clone());
        let logits = forward_mean(&mut tape, &nodes, xid, 0).unwrap();
        let expect = softmax_rows(tape.value(logits));
        assert_eq!(probs, expect);
    }

    #[test]
    fn snapshot_save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("posterior.snap");
        let spec = NetworkSpec::multi_head(3, vec![4, 5], 2, 2);
        let p = VariationalParams::init(&spec, 18).unwrap();
        let snap = p.snapshot(4);
        snap.save(&path).unwrap();
        let back = PosteriorSnapshot::load(&path).unwrap();
        assert_eq!(back.task_index(), 4);
        assert_eq!(back.as_params(), snap.as_params());
        // Serialized bytes are stable across writes.
        let again = dir.path().join("posterior2.snap");
        snap.save(&again).unwrap();
        let b1 = std::fs::read(&path).unwrap();
        let b2 = std::fs::read(&again).unwrap();
        assert_eq!(b1, b2);
    }

    #[test]
    fn snapshot_load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.snap");
        std::fs::write(&path, b"definitely not a container").unwrap();
        assert!(PosteriorSnapshot::load(&path).is_err());
    }
}
