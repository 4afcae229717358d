//! Training objectives and Fisher information.
//!
//! The full objective for a task is
//!
//! ```text
//! L = E_q[-log p(y | x, theta)]            (Monte Carlo, local reparam.)
//!   + kl_scale * KL(q || previous posterior)
//!   + sum over anchors of lambda/2 * F_i * [(mu - mu_a)² + (s² - s²_a)²]
//! ```
//!
//! Dropping the elastic term recovers plain variational continual training;
//! dropping the KL term and evaluating at the means recovers the classic
//! elastic point estimate. All variants share this module so their losses
//! decompose identically.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bayes::{
    forward_lrt_shared, forward_mean, kl_divergence, BayesError, ParamNodes, PosteriorSnapshot,
    VariationalParams,
};
use crate::container::{self, Container, Entry};
use crate::grad::{GradError, NodeId, Tape, Tensor};
use crate::seeding;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("lambda must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Scalar components of one loss evaluation. `total` is always the exact sum
/// of the other three as computed on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
    pub ewc: f64,
}

/// One elastic anchor: a frozen posterior plus the Fisher diagonal estimated
/// at it. Keeping them in one struct makes "anchor without Fisher" (or the
/// reverse) unrepresentable.
#[derive(Debug, Clone, Copy)]
pub struct EwcTerm<'a> {
    pub anchor: &'a PosteriorSnapshot,
    pub fisher: &'a FisherDiag,
    pub lambda: f64,
}

// ─── loss graphs ───

/// Monte Carlo negative log likelihood: mean cross entropy over `n_samples`
/// stochastic forward passes, all sharing one tape so parameter variance
/// nodes are computed once.
pub fn nll_mc(
    tape: &mut Tape,
    nodes: &ParamNodes,
    x: NodeId,
    labels: &[usize],
    n_samples: usize,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if n_samples == 0 {
        return Err(ObjectiveError::Mismatch("n_samples must be at least 1".into()));
    }
    let vars = nodes.var_nodes(tape);
    let mut acc: Option<NodeId> = None;
    for _ in 0..n_samples {
        let logits = forward_lrt_shared(tape, nodes, &vars, x, head, rng)?;
        let ce = tape.softmax_cross_entropy(logits, labels)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, ce)?,
            None => ce,
        });
    }
    Ok(tape.scale(acc.expect("n_samples >= 1"), 1.0 / n_samples as f64))
}

fn penalty_piece(
    tape: &mut Tape,
    mean_q: NodeId,
    logvar_q: NodeId,
    anchor_mean: &Tensor,
    anchor_logvar: &Tensor,
    fisher: &Tensor,
) -> Result<NodeId, ObjectiveError> {
    if tape.value(mean_q).shape() != anchor_mean.shape()
        || fisher.shape() != anchor_mean.shape()
    {
        return Err(ObjectiveError::Mismatch(format!(
            "anchor/fisher shape {:?}/{:?} does not match parameter shape {:?}",
            anchor_mean.shape(),
            fisher.shape(),
            tape.value(mean_q).shape()
        )));
    }
    let c_mean = tape.constant(anchor_mean.clone());
    let c_var = tape.constant(anchor_logvar.map(f64::exp));
    let c_fisher = tape.constant(fisher.clone());

    let dm = tape.sub(mean_q, c_mean)?;
    let dm2 = tape.square(dm);
    let var_q = tape.exp(logvar_q);
    let dv = tape.sub(var_q, c_var)?;
    let dv2 = tape.square(dv);
    let quad = tape.add(dm2, dv2)?;
    let weighted = tape.mul(quad, c_fisher)?;
    Ok(tape.sum(weighted))
}

/// Elastic penalty node: `lambda/2 * sum_i F_i [(mu_i - mu_a_i)² +
/// (sigma²_i - sigma²_a_i)²]` over every parameter. With `q == anchor` both
/// the value and all gradients are exactly zero.
pub fn ewc_penalty_node(
    tape: &mut Tape,
    nodes: &ParamNodes,
    term: &EwcTerm,
) -> Result<NodeId, ObjectiveError> {
    if term.lambda < 0.0 {
        return Err(ObjectiveError::NegativeLambda(term.lambda));
    }
    let anchor = term.anchor;
    let fisher = term.fisher;
    if nodes.trunk.len() != anchor.trunk().len()
        || nodes.heads.len() != anchor.heads().len()
        || fisher.trunk.len() != anchor.trunk().len()
        || fisher.heads.len() != anchor.heads().len()
    {
        return Err(ObjectiveError::Mismatch(
            "anchor/fisher layer structure does not match the network".into(),
        ));
    }
    let mut acc: Option<NodeId> = None;
    let triples = nodes
        .trunk
        .iter()
        .zip(anchor.trunk())
        .zip(&fisher.trunk)
        .chain(nodes.heads.iter().zip(anchor.heads()).zip(&fisher.heads));
    for ((ids, al), fl) in triples {
        let w = penalty_piece(tape, ids.w_mean, ids.w_logvar, &al.w_mean, &al.w_logvar, &fl.w)?;
        let b = penalty_piece(tape, ids.b_mean, ids.b_logvar, &al.b_mean, &al.b_logvar, &fl.b)?;
        let piece = tape.add(w, b)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, piece)?,
            None => piece,
        });
    }
    Ok(tape.scale(acc.expect("at least one layer"), term.lambda / 2.0))
}

/// Variational loss with optional elastic terms, evaluated on one batch.
/// Returns the loss components and the gradient in `to_flat` order.
///
/// Anchors with `lambda == 0` are skipped outright, so a zero-lambda run
/// builds exactly the same graph as [`vcl_loss`] and matches it bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn evcl_loss(
    params: &VariationalParams,
    x: &Tensor,
    labels: &[usize],
    prior: &PosteriorSnapshot,
    ewc: &[EwcTerm],
    n_samples: usize,
    kl_scale: f64,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<f64>), ObjectiveError> {
    for t in ewc {
        if t.lambda < 0.0 {
            return Err(ObjectiveError::NegativeLambda(t.lambda));
        }
    }
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let xid = tape.constant(x.clone());
    let nll = nll_mc(&mut tape, &nodes, xid, labels, n_samples, head, rng)?;
    let kl_raw = kl_divergence(&mut tape, &nodes, prior)?;
    let kl = tape.scale(kl_raw, kl_scale);
    let mut total = tape.add(nll, kl)?;
    let mut ewc_total = 0.0;
    for term in ewc.iter().filter(|t| t.lambda > 0.0) {
        let pen = ewc_penalty_node(&mut tape, &nodes, term)?;
        ewc_total += tape.value(pen).item();
        total = tape.add(total, pen)?;
    }
    tape.backward(total)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        nll: tape.value(nll).item(),
        kl: tape.value(kl).item(),
        ewc: ewc_total,
    };
    let grads = params.grads_flat(&tape, &nodes);
    Ok((breakdown, grads))
}

/// Plain variational loss: MC NLL plus scaled KL against the prior.
#[allow(clippy::too_many_arguments)]
pub fn vcl_loss(
    params: &VariationalParams,
    x: &Tensor,
    labels: &[usize],
    prior: &PosteriorSnapshot,
    n_samples: usize,
    kl_scale: f64,
    head: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, Vec<f64>), ObjectiveError> {
    evcl_loss(params, x, labels, prior, &[], n_samples, kl_scale, head, rng)
}

/// Deterministic point loss at the posterior means: cross entropy plus any
/// elastic terms, no KL and no sampling. This is the objective for the
/// classic elastic baseline (with anchors) and naive finetuning (without).
pub fn point_loss(
    params: &VariationalParams,
    x: &Tensor,
    labels: &[usize],
    ewc: &[EwcTerm],
    head: usize,
) -> Result<(LossBreakdown, Vec<f64>), ObjectiveError> {
    if labels.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    for t in ewc {
        if t.lambda < 0.0 {
            return Err(ObjectiveError::NegativeLambda(t.lambda));
        }
    }
    let mut tape = Tape::new();
    let nodes = params.register(&mut tape);
    let xid = tape.constant(x.clone());
    let logits = forward_mean(&mut tape, &nodes, xid, head)?;
    let nll = tape.softmax_cross_entropy(logits, labels)?;
    let mut total = nll;
    let mut ewc_total = 0.0;
    for term in ewc.iter().filter(|t| t.lambda > 0.0) {
        let pen = ewc_penalty_node(&mut tape, &nodes, term)?;
        ewc_total += tape.value(pen).item();
        total = tape.add(total, pen)?;
    }
    tape.backward(total)?;
    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        nll: tape.value(nll).item(),
        kl: 0.0,
        ewc: ewc_total,
    };
    let grads = params.grads_flat(&tape, &nodes);
    Ok((breakdown, grads))
}

// ─── Fisher information ───

/// Diagonal Fisher for one layer, matching the shapes of its mean parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherLayer {
    pub w: Tensor,
    pub b: Tensor,
}

/// Empirical diagonal Fisher information, estimated at the posterior means.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherDiag {
    pub task_index: usize,
    /// Number of per-example gradient terms averaged into the estimate.
    pub sample_count: usize,
    pub trunk: Vec<FisherLayer>,
    pub heads: Vec<FisherLayer>,
}

impl FisherDiag {
    fn zeros_like(params: &VariationalParams) -> Self {
        let zl = |l: &crate::bayes::VarLayer| FisherLayer {
            w: Tensor::zeros(l.w_mean.shape()),
            b: Tensor::zeros(l.b_mean.shape()),
        };
        FisherDiag {
            task_index: 0,
            sample_count: 0,
            trunk: params.trunk.iter().map(zl).collect(),
            heads: params.heads.iter().map(zl).collect(),
        }
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut FisherLayer> {
        self.trunk.iter_mut().chain(self.heads.iter_mut())
    }

    fn layers(&self) -> impl Iterator<Item = &FisherLayer> {
        self.trunk.iter().chain(self.heads.iter())
    }

    pub fn save(&self, path: &Path) -> Result<(), ObjectiveError> {
        let mut names: Vec<String> = (0..self.trunk.len()).map(|i| format!("trunk{i}")).collect();
        names.extend((0..self.heads.len()).map(|i| format!("head{i}")));
        let mut entries = Vec::new();
        for (name, l) in names.iter().zip(self.layers()) {
            entries.push(Entry {
                name: name.clone(),
                role: 0,
                tensor: l.w.clone(),
            });
            entries.push(Entry {
                name: name.clone(),
                role: 2,
                tensor: l.b.clone(),
            });
        }
        let c = Container {
            kind: container::KIND_FISHER,
            task: self.task_index as u32,
            extra: self.sample_count as u64,
            entries,
        };
        let mut f = BufWriter::new(File::create(path)?);
        container::write_container(&mut f, &c)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FisherDiag, ObjectiveError> {
        let mut f = BufReader::new(File::open(path)?);
        let c = container::read_container(&mut f)?;
        if c.kind != container::KIND_FISHER {
            return Err(ObjectiveError::Mismatch(format!(
                "container kind {} is not a Fisher diagonal",
                c.kind
            )));
        }
        if c.entries.len() % 2 != 0 {
            return Err(ObjectiveError::Mismatch(
                "Fisher container must hold (w, b) entry pairs".into(),
            ));
        }
        let mut trunk = Vec::new();
        let mut heads = Vec::new();
        for pair in c.entries.chunks(2) {
            if pair[0].name != pair[1].name || pair[0].role != 0 || pair[1].role != 2 {
                return Err(ObjectiveError::Mismatch("malformed Fisher entries".into()));
            }
            let layer = FisherLayer {
                w: pair[0].tensor.clone(),
                b: pair[1].tensor.clone(),
            };
            if pair[0].name.starts_with("trunk") {
                trunk.push(layer);
            } else if pair[0].name.starts_with("head") {
                heads.push(layer);
            } else {
                return Err(ObjectiveError::Mismatch("unknown Fisher layer name".into()));
            }
        }
        Ok(FisherDiag {
            task_index: c.task as usize,
            sample_count: c.extra as usize,
            trunk,
            heads,
        })
    }
}

/// Empirical diagonal Fisher at the posterior means using true labels:
/// the average over examples of the squared per-example log-likelihood
/// gradient. Per-example means exactly that: each example is a separate
/// backward pass, squared before averaging; averaging gradients over a batch
/// first would cancel opposing examples and underestimate curvature.
///
/// Examples are visited in a seeded permutation. If `n_samples` exceeds the
/// dataset size the permutation cycles, and whole passes are folded in
/// multiplicatively, so `n = N` and `n = 2N` produce bitwise identical
/// estimates.
pub fn estimate_fisher_diag(
    params: &VariationalParams,
    inputs: &Tensor,
    labels: &[usize],
    head: usize,
    n_samples: usize,
    seed: u64,
) -> Result<FisherDiag, ObjectiveError> {
    let (n_data, dim) = inputs.dims2("estimate_fisher_diag")?;
    if n_data == 0 {
        return Err(ObjectiveError::EmptyDataset);
    }
    if labels.len() != n_data {
        return Err(ObjectiveError::Mismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            n_data
        )));
    }
    if n_samples == 0 {
        return Err(ObjectiveError::Mismatch("n_samples must be at least 1".into()));
    }

    let mut order: Vec<usize> = (0..n_data).collect();
    let mut rng = seeding::rng_for(&[seed, seeding::tag::FISHER]);
    shuffle(&mut order, &mut rng);

    let full_passes = n_samples / n_data;
    let remainder = n_samples % n_data;

    let mut acc = FisherDiag::zeros_like(params);
    let accumulate_range = |acc: &mut FisherDiag,
                                upto: usize|
     -> Result<(), ObjectiveError> {
        for &idx in &order[..upto] {
            let row = Tensor::matrix(1, dim, inputs.data()[idx * dim..(idx + 1) * dim].to_vec())?;
            let mut tape = Tape::new();
            let nodes = params.register(&mut tape);
            let xid = tape.constant(row);
            let logits = forward_mean(&mut tape, &nodes, xid, head)?;
            let nll = tape.softmax_cross_entropy(logits, &[labels[idx]])?;
            tape.backward(nll)?;
            let pairs = acc
                .trunk
                .iter_mut()
                .zip(&nodes.trunk)
                .chain(acc.heads.iter_mut().zip(&nodes.heads));
            for (fl, ids) in pairs {
                if let Some(g) = tape.grad(ids.w_mean) {
                    for (o, &gv) in fl.w.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * gv;
                    }
                }
                if let Some(g) = tape.grad(ids.b_mean) {
                    for (o, &gv) in fl.b.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * gv;
                    }
                }
            }
        }
        Ok(())
    };

    if full_passes > 0 {
        accumulate_range(&mut acc, n_data)?;
        let k = full_passes as f64;
        for l in acc.layers_mut() {
            for v in l.w.data_mut() {
                *v *= k;
            }
            for v in l.b.data_mut() {
                *v *= k;
            }
        }
        if remainder > 0 {
            accumulate_range(&mut acc, remainder)?;
        }
    } else {
        accumulate_range(&mut acc, remainder)?;
    }

    let inv = 1.0 / n_samples as f64;
    for l in acc.layers_mut() {
        for v in l.w.data_mut() {
            *v *= inv;
        }
        for v in l.b.data_mut() {
            *v *= inv;
        }
    }
    acc.sample_count = n_samples;
    Ok(acc)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::NetworkSpec;
    use crate::gradcheck;

    fn tiny() -> (NetworkSpec, VariationalParams) {
        let spec = NetworkSpec::single_head(3, vec![4], 2);
        let p = VariationalParams::init(&spec, 1).unwrap();
        (spec, p)
    }

    fn batch3() -> (Tensor, Vec<usize>) {
        let x = Tensor::matrix(
            3,
            3,
            vec![0.5, -0.2, 1.0, -1.0, 0.3, 0.0, 0.2, 0.2, -0.7],
        )
        .unwrap();
        (x, vec![0, 1, 0])
    }

    #[test]
    fn breakdown_components_sum_exactly_to_total() {
        let (_, p) = tiny();
        let mut prior_p = p.clone();
        for l in prior_p.trunk.iter_mut().chain(prior_p.heads.iter_mut()) {
            l.w_mean = l.w_mean.map(|v| v + 0.01);
        }
        let prior = prior_p.snapshot(0);
        let fisher =
            estimate_fisher_diag(&p, &batch3().0, &batch3().1, 0, 3, 0).unwrap();
        let anchor = prior.clone();
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: 100.0,
        };
        let (x, y) = batch3();
        let mut rng = seeding::rng_for(&[2]);
        let (b, _) =
            evcl_loss(&p, &x, &y, &prior, &[term], 3, 0.01, 0, &mut rng).unwrap();
        assert!(
            (b.total - (b.nll + b.kl + b.ewc)).abs() <= 1e-12,
            "components {} + {} + {} != total {}",
            b.nll,
            b.kl,
            b.ewc,
            b.total
        );
    }

    #[test]
    fn vcl_at_prior_has_exactly_zero_kl() {
        let (_, p) = tiny();
        let prior = p.snapshot(0);
        let (x, y) = batch3();
        let mut rng = seeding::rng_for(&[3]);
        let (b, _) = vcl_loss(&p, &x, &y, &prior, 2, 0.5, 0, &mut rng).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.total, b.nll);
        assert_eq!(b.ewc, 0.0);
    }

    #[test]
    fn zero_kl_scale_reduces_to_pure_nll() {
        let (_, p) = tiny();
        let other = VariationalParams::init(&p.spec, 99).unwrap();
        let prior = other.snapshot(0);
        let (x, y) = batch3();
        let mut rng = seeding::rng_for(&[4]);
        let (b, _) = vcl_loss(&p, &x, &y, &prior, 2, 0.0, 0, &mut rng).unwrap();
        assert_eq!(b.kl, 0.0);
        assert_eq!(b.total, b.nll);
    }

    #[test]
    fn evcl_with_zero_lambda_is_bitwise_vcl() {
        for seed in 0..5u64 {
            let spec = NetworkSpec::single_head(3, vec![5], 2);
            let p = VariationalParams::init(&spec, seed).unwrap();
            let prior = VariationalParams::init(&spec, seed + 100)
                .unwrap()
                .snapshot(0);
            let (x, y) = batch3();
            let fisher = estimate_fisher_diag(&p, &x, &y, 0, 3, seed).unwrap();
            let anchor = prior.clone();
            let term = EwcTerm {
                anchor: &anchor,
                fisher: &fisher,
                lambda: 0.0,
            };
            let mut rng_a = seeding::rng_for(&[seed, 7]);
            let mut rng_b = seeding::rng_for(&[seed, 7]);
            let (ba, ga) =
                evcl_loss(&p, &x, &y, &prior, &[term], 4, 0.1, 0, &mut rng_a).unwrap();
            let (bb, gb) = vcl_loss(&p, &x, &y, &prior, 4, 0.1, 0, &mut rng_b).unwrap();
            assert_eq!(ba.total.to_bits(), bb.total.to_bits());
            assert_eq!(ba.ewc, 0.0);
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&ga), bits(&gb));
        }
    }

    #[test]
    fn evcl_gradients_match_finite_differences() {
        let spec = NetworkSpec::single_head(2, vec![3], 2);
        let p = VariationalParams::init(&spec, 21).unwrap();
        let prior = VariationalParams::init(&spec, 22).unwrap().snapshot(0);
        let x = Tensor::matrix(2, 2, vec![0.4, -0.6, 1.1, 0.2]).unwrap();
        let y = vec![1, 0];
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 2, 5).unwrap();
        let anchor = VariationalParams::init(&spec, 23).unwrap().snapshot(0);
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: 25.0,
        };
        // Identical noise on every evaluation, so finite differences see a
        // deterministic function of the parameters.
        let loss_seed = 31u64;
        let (_, analytic) = evcl_loss(
            &p,
            &x,
            &y,
            &prior,
            &[term],
            3,
            0.2,
            0,
            &mut seeding::rng_for(&[loss_seed]),
        )
        .unwrap();
        let flat = p.to_flat();
        let mut f = |v: &[f64]| {
            let mut q = p.clone();
            q.copy_from_flat(v);
            let term = EwcTerm {
                anchor: &anchor,
                fisher: &fisher,
                lambda: 25.0,
            };
            let (b, _) = evcl_loss(
                &q,
                &x,
                &y,
                &prior,
                &[term],
                3,
                0.2,
                0,
                &mut seeding::rng_for(&[loss_seed]),
            )
            .unwrap();
            b.total
        };
        let numeric = gradcheck::central_diff(&mut f, &flat, 1e-5);
        let err = gradcheck::max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "max rel err {err}");
    }

    #[test]
    fn penalty_is_zero_at_the_anchor_and_grows_quadratically() {
        let (_, p) = tiny();
        let anchor = p.snapshot(0);
        let (x, y) = batch3();
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 3, 1).unwrap();

        let penalty_value = |q: &VariationalParams| {
            let mut tape = Tape::new();
            let nodes = q.register(&mut tape);
            let term = EwcTerm {
                anchor: &anchor,
                fisher: &fisher,
                lambda: 100.0,
            };
            let pen = ewc_penalty_node(&mut tape, &nodes, &term).unwrap();
            tape.value(pen).item()
        };
        assert_eq!(penalty_value(&p), 0.0);

        let mut near = p.clone();
        near.trunk[0].w_mean = near.trunk[0].w_mean.map(|v| v + 0.01);
        let mut far = p.clone();
        far.trunk[0].w_mean = far.trunk[0].w_mean.map(|v| v + 0.02);
        let (pn, pf) = (penalty_value(&near), penalty_value(&far));
        assert!(pn > 0.0);
        assert!(
            (pf / pn - 4.0).abs() < 1e-9,
            "doubling the mean offset should quadruple the penalty: {pf} vs {pn}"
        );
    }

    #[test]
    fn penalty_single_parameter_analytic_value() {
        // lambda/2 * F * (mu - mu_a)² = 100/2 * 2 * 0.01 = 1
        let spec = NetworkSpec::single_head(1, vec![], 1);
        let p = VariationalParams::init(&spec, 0).unwrap();
        let anchor = p.snapshot(0);
        let mut fisher = FisherDiag::zeros_like(&p);
        fisher.heads[0].w = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let mut q = p.clone();
        q.heads[0].w_mean = q.heads[0].w_mean.map(|v| v + 0.1);
        let mut tape = Tape::new();
        let nodes = q.register(&mut tape);
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: 100.0,
        };
        let pen = ewc_penalty_node(&mut tape, &nodes, &term).unwrap();
        assert!((tape.value(pen).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_fisher_coordinates_impose_no_constraint() {
        let (_, p) = tiny();
        let anchor = p.snapshot(0);
        let fisher = FisherDiag::zeros_like(&p);
        let mut q = p.clone();
        q.trunk[0].w_mean = q.trunk[0].w_mean.map(|v| v + 10.0);
        let mut tape = Tape::new();
        let nodes = q.register(&mut tape);
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: 100.0,
        };
        let pen = ewc_penalty_node(&mut tape, &nodes, &term).unwrap();
        assert_eq!(tape.value(pen).item(), 0.0);
        tape.backward(pen).unwrap();
        let grads = q.grads_flat(&tape, &nodes);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let (_, p) = tiny();
        let anchor = VariationalParams::init(&p.spec, 50).unwrap().snapshot(0);
        let (x, y) = batch3();
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 3, 2).unwrap();
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: 40.0,
        };
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let pen = ewc_penalty_node(&mut tape, &nodes, &term).unwrap();
        tape.backward(pen).unwrap();
        let analytic = p.grads_flat(&tape, &nodes);

        let flat = p.to_flat();
        let mut f = |v: &[f64]| {
            let mut q = p.clone();
            q.copy_from_flat(v);
            let mut t = Tape::new();
            let n = q.register(&mut t);
            let pen = ewc_penalty_node(&mut t, &n, &term).unwrap();
            t.value(pen).item()
        };
        let numeric = gradcheck::central_diff(&mut f, &flat, 1e-5);
        let err = gradcheck::max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "max rel err {err}");
    }

    #[test]
    fn negative_lambda_is_rejected() {
        let (_, p) = tiny();
        let anchor = p.snapshot(0);
        let fisher = FisherDiag::zeros_like(&p);
        let term = EwcTerm {
            anchor: &anchor,
            fisher: &fisher,
            lambda: -1.0,
        };
        let (x, y) = batch3();
        let err = evcl_loss(
            &p,
            &x,
            &y,
            &anchor,
            &[term],
            1,
            0.1,
            0,
            &mut seeding::rng_for(&[0]),
        )
        .unwrap_err();
        assert!(matches!(err, ObjectiveError::NegativeLambda(_)));
    }

    #[test]
    fn fisher_is_per_example_not_batch_averaged() {
        // Two symmetric examples whose gradients cancel exactly: a batch
        // average would give a zero Fisher, per-example squaring must not.
        let spec = NetworkSpec::single_head(1, vec![], 2);
        let mut p = VariationalParams::init(&spec, 0).unwrap();
        p.heads[0].w_mean = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        p.heads[0].b_mean = Tensor::vector(vec![0.0, 0.0]);
        let x = Tensor::matrix(2, 1, vec![1.0, -1.0]).unwrap();
        let y = vec![0, 0];
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 2, 0).unwrap();
        // At uniform predictions, d(-log p)/dw for x=1,y=0 is (p - 1)x = -0.5
        // and for x=-1,y=0 is +0.5; both square to 0.25.
        assert!((fisher.heads[0].w.data()[0] - 0.25).abs() < 1e-12);
        assert!(fisher.heads[0].w.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fisher_matches_analytic_logistic_gradients() {
        // Softmax-linear model: d log p / d b_c = 1{c == y} - p_c and
        // d log p / d W[j, c] = x_j (1{c == y} - p_c). Squaring and averaging
        // gives the empirical Fisher in closed form.
        let spec = NetworkSpec::single_head(2, vec![], 2);
        let p = VariationalParams::init(&spec, 33).unwrap();
        let x = Tensor::matrix(4, 2, vec![0.5, 1.0, -1.0, 0.2, 0.0, -0.7, 2.0, 0.4]).unwrap();
        let y = vec![0, 1, 1, 0];
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 4, 9).unwrap();

        let probs = crate::bayes::predict_point(&p, &x, 0).unwrap();
        let mut fw = vec![0.0; 4];
        let mut fb = vec![0.0; 2];
        for i in 0..4 {
            for c in 0..2 {
                let ind = if y[i] == c { 1.0 } else { 0.0 };
                let gb = ind - probs.get2(i, c);
                fb[c] += gb * gb;
                for j in 0..2 {
                    let gw = x.get2(i, j) * gb;
                    fw[j * 2 + c] += gw * gw;
                }
            }
        }
        for v in fw.iter_mut().chain(fb.iter_mut()) {
            *v /= 4.0;
        }
        for (a, e) in fisher.heads[0].w.data().iter().zip(&fw) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
        for (a, e) in fisher.heads[0].b.data().iter().zip(&fb) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn fisher_cycling_makes_doubling_exact() {
        let (_, p) = tiny();
        let (x, y) = batch3();
        let f1 = estimate_fisher_diag(&p, &x, &y, 0, 3, 17).unwrap();
        let f2 = estimate_fisher_diag(&p, &x, &y, 0, 6, 17).unwrap();
        assert_eq!(f1.sample_count, 3);
        assert_eq!(f2.sample_count, 6);
        for (a, b) in f1.layers().zip(f2.layers()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.w), bits(&b.w));
            assert_eq!(bits(&a.b), bits(&b.b));
        }
    }

    #[test]
    fn fisher_subset_is_seed_reproducible() {
        let (_, p) = tiny();
        let (x, y) = batch3();
        let a = estimate_fisher_diag(&p, &x, &y, 0, 2, 5).unwrap();
        let b = estimate_fisher_diag(&p, &x, &y, 0, 2, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fisher_is_nonnegative_and_positive_on_active_weights() {
        let spec = NetworkSpec::single_head(2, vec![], 2);
        let p = VariationalParams::init(&spec, 3).unwrap();
        let x = Tensor::matrix(4, 2, vec![1.0, -1.0, -1.0, 1.0, 0.5, 0.5, -0.5, -0.5]).unwrap();
        let y = vec![0, 1, 0, 1];
        let fisher = estimate_fisher_diag(&p, &x, &y, 0, 4, 0).unwrap();
        for l in fisher.layers() {
            assert!(l.w.data().iter().all(|&v| v >= 0.0));
            assert!(l.b.data().iter().all(|&v| v >= 0.0));
        }
        assert!(fisher.heads[0].w.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn fisher_rejects_degenerate_inputs() {
        let (_, p) = tiny();
        let empty = Tensor::zeros(&[0, 3]);
        assert!(matches!(
            estimate_fisher_diag(&p, &empty, &[], 0, 5, 0),
            Err(ObjectiveError::EmptyDataset)
        ));
        let (x, _) = batch3();
        assert!(matches!(
            estimate_fisher_diag(&p, &x, &[0], 0, 5, 0),
            Err(ObjectiveError::Mismatch(_))
        ));
        assert!(matches!(
            estimate_fisher_diag(&p, &x, &[0, 1, 0], 0, 0, 0),
            Err(ObjectiveError::Mismatch(_))
        ));
    }

    #[test]
    fn fisher_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("task2.fisher");
        let (_, p) = tiny();
        let (x, y) = batch3();
        let mut fisher = estimate_fisher_diag(&p, &x, &y, 0, 3, 8).unwrap();
        fisher.task_index = 2;
        fisher.save(&path).unwrap();
        let back = FisherDiag::load(&path).unwrap();
        assert_eq!(back, fisher);
        // A posterior snapshot is not a Fisher file.
        let snap_path = dir.path().join("p.snap");
        p.snapshot(0).save(&snap_path).unwrap();
        assert!(FisherDiag::load(&snap_path).is_err());
    }

    #[test]
    fn nll_mc_single_sample_equals_manual_forward() {
        let (_, p) = tiny();
        let (x, y) = batch3();
        let mut tape = Tape::new();
        let nodes = p.register(&mut tape);
        let xid = tape.constant(x.clone());
        let mut rng = seeding::rng_for(&[70]);
        let nll = nll_mc(&mut tape, &nodes, xid, &y, 1, 0, &mut rng).unwrap();

        let mut tape2 = Tape::new();
        let nodes2 = p.register(&mut tape2);
        let xid2 = tape2.constant(x.clone());
        let mut rng2 = seeding::rng_for(&[70]);
        let logits = crate::bayes::forward_lrt(&mut tape2, &nodes2, xid2, 0, &mut rng2).unwrap();
        let ce = tape2.softmax_cross_entropy(logits, &y).unwrap();
        assert_eq!(
            tape.value(nll).item().to_bits(),
            tape2.value(ce).item().to_bits()
        );
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (_, p) = tiny();
        let prior = p.snapshot(0);
        let x = Tensor::zeros(&[0, 3]);
        let err = vcl_loss(&p, &x, &[], &prior, 1, 0.1, 0, &mut seeding::rng_for(&[0]))
            .unwrap_err();
        assert!(matches!(err, ObjectiveError::EmptyBatch));
        assert!(matches!(
            point_loss(&p, &x, &[], &[], 0),
            Err(ObjectiveError::EmptyBatch)
        ));
    }
}
