//! Differentiable forward passes and the contrastive training loss.
//!
//! Each `*_forward` function appends a model's computation to a [`Tape`]
//! and returns the node holding the clean-target estimate `x0_hat` (a `1 x
//! d` row). The `*_eval` wrappers run the same graphs on a scratch tape for
//! inference. Training wires gradients through every input that should
//! learn: history gathers, the target's own embedding row, and the sampled
//! negatives.

use super::{
    spatiotemporal_deltas, step_embedding, GlobalModel, ModelError, PatchModel, RegionModel,
};
use crate::numerics::{Matrix, NodeId, Real, Rng, Tape};

/// Inverted dropout on the attention probability rows (training only).
pub struct Dropout<'a> {
    pub p: f64,
    pub rng: &'a mut Rng,
}

/// Node handles for a registered global model.
#[derive(Clone, Copy, Debug)]
pub struct GlobalGraph {
    pub category_emb: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
}

impl GlobalGraph {
    pub fn nodes(&self) -> Vec<(String, NodeId)> {
        vec![
            ("category_emb".into(), self.category_emb),
            ("w_q".into(), self.w_q),
            ("w_k".into(), self.w_k),
            ("w_v".into(), self.w_v),
        ]
    }
}

/// Node handles for a registered region model.
#[derive(Clone, Copy, Debug)]
pub struct RegionGraph {
    pub base: GlobalGraph,
    pub poi_emb: NodeId,
    pub unit_spatial: NodeId,
    pub unit_temporal: NodeId,
}

impl RegionGraph {
    /// The region-local parameter set (trainable in the standard mode).
    pub fn local_nodes(&self) -> Vec<(String, NodeId)> {
        vec![
            ("poi_emb".into(), self.poi_emb),
            ("unit_spatial".into(), self.unit_spatial),
            ("unit_temporal".into(), self.unit_temporal),
        ]
    }

    /// Every parameter, base ones under the `base.` prefix.
    pub fn all_nodes(&self) -> Vec<(String, NodeId)> {
        let mut out: Vec<(String, NodeId)> =
            self.base.nodes().into_iter().map(|(n, id)| (format!("base.{n}"), id)).collect();
        out.extend(self.local_nodes());
        out
    }
}

/// Node handles for a registered patch model.
#[derive(Clone, Copy, Debug)]
pub struct PatchGraph {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w3: NodeId,
    pub b3: NodeId,
    pub w4: NodeId,
    pub b4: NodeId,
}

impl PatchGraph {
    pub fn nodes(&self) -> Vec<(String, NodeId)> {
        vec![
            ("w1".into(), self.w1),
            ("b1".into(), self.b1),
            ("w2".into(), self.w2),
            ("b2".into(), self.b2),
            ("w3".into(), self.w3),
            ("b3".into(), self.b3),
            ("w4".into(), self.w4),
            ("b4".into(), self.b4),
        ]
    }
}

impl<F: Real> GlobalModel<F> {
    /// Put the model's tensors on a tape, as params if `trainable`.
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> GlobalGraph {
        let mut reg = |m: &Matrix<F>| if trainable { tape.param(m.clone()) } else { tape.leaf(m.clone()) };
        GlobalGraph {
            category_emb: reg(&self.category_emb),
            w_q: reg(&self.w_q),
            w_k: reg(&self.w_k),
            w_v: reg(&self.w_v),
        }
    }

    /// Inference pass on a scratch tape.
    pub fn forward_eval(
        &self,
        x_t: &Matrix<F>,
        history: &[usize],
        t: usize,
    ) -> Result<Matrix<F>, ModelError> {
        let mut tape = Tape::new();
        let graph = self.register(&mut tape, false);
        let x_t = tape.leaf(x_t.clone());
        let out = global_forward(&mut tape, &graph, self.lambda, x_t, history, t, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        match name {
            "category_emb" => Some(&mut self.category_emb),
            "w_q" => Some(&mut self.w_q),
            "w_k" => Some(&mut self.w_k),
            "w_v" => Some(&mut self.w_v),
            _ => None,
        }
    }
}

impl<F: Real> RegionModel<F> {
    /// Put the model's tensors on a tape. The two flags select which half
    /// is trainable: `(false, true)` is the standard edge stage (base
    /// frozen), `(true, true)` the from-scratch mode, `(false, false)`
    /// inference and the device stage.
    pub fn register(
        &self,
        tape: &mut Tape<F>,
        base_trainable: bool,
        local_trainable: bool,
    ) -> RegionGraph {
        let base = self.base.register(tape, base_trainable);
        let mut reg = |m: &Matrix<F>| {
            if local_trainable {
                tape.param(m.clone())
            } else {
                tape.leaf(m.clone())
            }
        };
        RegionGraph {
            base,
            poi_emb: reg(&self.poi_emb),
            unit_spatial: reg(&self.unit_spatial),
            unit_temporal: reg(&self.unit_temporal),
        }
    }

    /// Inference pass on a scratch tape.
    pub fn forward_eval(
        &self,
        x_t: &Matrix<F>,
        history: &[usize],
        timestamps: &[i64],
        t: usize,
    ) -> Result<Matrix<F>, ModelError> {
        let mut tape = Tape::new();
        let graph = self.register(&mut tape, false, false);
        let x_t = tape.leaf(x_t.clone());
        let out = region_forward(&mut tape, self, &graph, x_t, history, timestamps, t, None)?;
        Ok(tape.value(out).clone())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        if let Some(rest) = name.strip_prefix("base.") {
            return self.base.tensor_mut(rest);
        }
        match name {
            "poi_emb" => Some(&mut self.poi_emb),
            "unit_spatial" => Some(&mut self.unit_spatial),
            "unit_temporal" => Some(&mut self.unit_temporal),
            _ => None,
        }
    }
}

impl<F: Real> PatchModel<F> {
    pub fn register(&self, tape: &mut Tape<F>, trainable: bool) -> PatchGraph {
        let mut reg = |m: &Matrix<F>| if trainable { tape.param(m.clone()) } else { tape.leaf(m.clone()) };
        PatchGraph {
            w1: reg(&self.w1),
            b1: reg(&self.b1),
            w2: reg(&self.w2),
            b2: reg(&self.b2),
            w3: reg(&self.w3),
            b3: reg(&self.b3),
            w4: reg(&self.w4),
            b4: reg(&self.b4),
        }
    }

    pub fn forward_eval(&self, x: &Matrix<F>) -> Result<Matrix<F>, ModelError> {
        if x.rows() != 1 || x.cols() != self.dim() {
            return Err(ModelError::DimMismatch { expected: self.dim(), got: x.cols() });
        }
        let mut tape = Tape::new();
        let graph = self.register(&mut tape, false);
        let x = tape.leaf(x.clone());
        let out = patch_forward(&mut tape, &graph, x);
        Ok(tape.value(out).clone())
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<F>> {
        match name {
            "w1" => Some(&mut self.w1),
            "b1" => Some(&mut self.b1),
            "w2" => Some(&mut self.w2),
            "b2" => Some(&mut self.b2),
            "w3" => Some(&mut self.w3),
            "b3" => Some(&mut self.b3),
            "w4" => Some(&mut self.w4),
            "b4" => Some(&mut self.b4),
            _ => None,
        }
    }
}

/// Shared attention pooling: project `z` to queries/keys/values, bias the
/// score matrix if a spatiotemporal `delta` node is given, softmax per row
/// (optionally with dropout on the probabilities), and pool the value rows
/// by column sum into a single `1 x d` estimate.
pub fn attention_readout<F: Real>(
    tape: &mut Tape<F>,
    z: NodeId,
    w_q: NodeId,
    w_k: NodeId,
    w_v: NodeId,
    delta: Option<NodeId>,
    dim: usize,
    dropout: Option<Dropout<'_>>,
) -> NodeId {
    let q = tape.matmul(z, w_q);
    let k = tape.matmul(z, w_k);
    let v = tape.matmul(z, w_v);
    let kt = tape.transpose(k);
    let mut scores = tape.matmul(q, kt);
    if let Some(d) = delta {
        scores = tape.add(scores, d);
    }
    let scaled = tape.scale(scores, F::from_f64(1.0 / (dim as f64).sqrt()));
    let mut probs = tape.row_softmax(scaled);
    if let Some(d) = dropout {
        assert!((0.0..1.0).contains(&d.p), "dropout rate must be in [0, 1), got {}", d.p);
        if d.p > 0.0 {
            let (rows, cols) = tape.value(probs).shape();
            let keep_scale = F::from_f64(1.0 / (1.0 - d.p));
            let mut mask = Matrix::zeros(rows, cols);
            for m in mask.data_mut() {
                *m = if d.rng.uniform() < d.p { F::zero() } else { keep_scale };
            }
            probs = tape.mul_const(probs, mask);
        }
    }
    let pooled = tape.matmul(probs, v);
    tape.sum_rows(pooled)
}

fn check_x_t<F: Real>(tape: &Tape<F>, x_t: NodeId, dim: usize) -> Result<(), ModelError> {
    let (r, c) = tape.value(x_t).shape();
    if r != 1 || c != dim {
        return Err(ModelError::DimMismatch { expected: dim, got: c });
    }
    Ok(())
}

fn check_history(history: &[usize], vocab: usize) -> Result<(), ModelError> {
    if history.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    if history.len() > crate::data::MAX_SEQ_LEN {
        return Err(ModelError::HistoryTooLong {
            len: history.len(),
            max: crate::data::MAX_SEQ_LEN,
        });
    }
    if let Some(&bad) = history.iter().find(|&&i| i >= vocab) {
        return Err(ModelError::ItemOutOfRange { index: bad, vocab });
    }
    Ok(())
}

/// Global denoiser: attention over category embeddings with the diffusion
/// state injected into every position.
pub fn global_forward<F: Real>(
    tape: &mut Tape<F>,
    graph: &GlobalGraph,
    lambda: F,
    x_t: NodeId,
    history: &[usize],
    t: usize,
    dropout: Option<Dropout<'_>>,
) -> Result<NodeId, ModelError> {
    let vocab = tape.value(graph.category_emb).rows();
    let dim = tape.value(graph.category_emb).cols();
    check_history(history, vocab)?;
    check_x_t(tape, x_t, dim)?;

    let e_hist = tape.gather(graph.category_emb, history);
    let e_t = tape.leaf(step_embedding(t, dim));
    let state = tape.add(x_t, e_t);
    let inject = tape.scale(state, lambda);
    let z = tape.add_row_broadcast(e_hist, inject);
    Ok(attention_readout(tape, z, graph.w_q, graph.w_k, graph.w_v, None, dim, dropout))
}

/// Region denoiser: POI + category embeddings as the attention input, with
/// the pairwise distance/time-gap bias added to the attention scores.
#[allow(clippy::too_many_arguments)]
pub fn region_forward<F: Real>(
    tape: &mut Tape<F>,
    model: &RegionModel<F>,
    graph: &RegionGraph,
    x_t: NodeId,
    history: &[usize],
    timestamps: &[i64],
    t: usize,
    dropout: Option<Dropout<'_>>,
) -> Result<NodeId, ModelError> {
    let dim = model.dim();
    check_history(history, model.n_pois())?;
    check_x_t(tape, x_t, dim)?;
    if timestamps.len() != history.len() {
        return Err(ModelError::TimestampCount {
            history: history.len(),
            timestamps: timestamps.len(),
        });
    }

    let e_poi = tape.gather(graph.poi_emb, history);
    let cat_rows = model.category_rows(history);
    let e_cat = tape.gather(graph.base.category_emb, &cat_rows);
    let e_cat_scaled = tape.scale(e_cat, model.gamma);
    let mixed = tape.add(e_poi, e_cat_scaled);
    let e_t = tape.leaf(step_embedding(t, dim));
    let state = tape.add(x_t, e_t);
    let inject = tape.scale(state, model.base.lambda);
    let z = tape.add_row_broadcast(mixed, inject);

    let points = model.points(history, timestamps);
    let (ds, dt) = spatiotemporal_deltas(&points, model.clip_km, model.clip_hours);
    let s_sum = tape.sum_all(graph.unit_spatial);
    let t_sum = tape.sum_all(graph.unit_temporal);
    let delta = tape.scalar_combine(s_sum, t_sum, ds.cast::<F>(), dt.cast::<F>());

    Ok(attention_readout(
        tape,
        z,
        graph.base.w_q,
        graph.base.w_k,
        graph.base.w_v,
        Some(delta),
        dim,
        dropout,
    ))
}

/// On-device patch: a 3-hidden-layer tanh MLP refining the region
/// estimate.
pub fn patch_forward<F: Real>(tape: &mut Tape<F>, graph: &PatchGraph, x: NodeId) -> NodeId {
    let mut h = x;
    for (w, b) in [(graph.w1, graph.b1), (graph.w2, graph.b2), (graph.w3, graph.b3)] {
        let lin = tape.matmul(h, w);
        let shifted = tape.add_row_broadcast(lin, b);
        h = tape.tanh(shifted);
    }
    let lin = tape.matmul(h, graph.w4);
    tape.add_row_broadcast(lin, graph.b4)
}

/// Inference through the region model and an optional patch.
pub fn device_forward_eval<F: Real>(
    region: &RegionModel<F>,
    patch: Option<&PatchModel<F>>,
    x_t: &Matrix<F>,
    history: &[usize],
    timestamps: &[i64],
    t: usize,
) -> Result<Matrix<F>, ModelError> {
    let mut tape = Tape::new();
    let rg = region.register(&mut tape, false, false);
    let x_t = tape.leaf(x_t.clone());
    let mut out = region_forward(&mut tape, region, &rg, x_t, history, timestamps, t, None)?;
    if let Some(p) = patch {
        if p.dim() != region.dim() {
            return Err(ModelError::DimMismatch { expected: region.dim(), got: p.dim() });
        }
        let pg = p.register(&mut tape, false);
        out = patch_forward(&mut tape, &pg, out);
    }
    Ok(tape.value(out).clone())
}

/// Contrastive denoising loss:
/// `-log_sigmoid(pos_score) - mean(log_sigmoid(-neg_scores))`.
///
/// Drives the estimate's inner product with the true target up and with
/// each sampled negative down. Both sides saturate, so the loss is
/// bounded below by zero and perfect separation approaches zero — which
/// is what makes minimizing it by SGD stable. (The same expression with
/// un-negated negative scores looks plausible but is unbounded below:
/// its negative-side gradient never saturates, and descending it inflates
/// embedding norms instead of separating targets from negatives.)
pub fn ce_loss<F: Real>(
    tape: &mut Tape<F>,
    x0_hat: NodeId,
    x0: NodeId,
    negatives: NodeId,
) -> Result<NodeId, ModelError> {
    let (hr, hd) = tape.value(x0_hat).shape();
    let (xr, xd) = tape.value(x0).shape();
    let (n, nd) = tape.value(negatives).shape();
    if hr != 1 || xr != 1 || hd != xd {
        return Err(ModelError::DimMismatch { expected: hd, got: xd });
    }
    if nd != hd {
        return Err(ModelError::DimMismatch { expected: hd, got: nd });
    }
    if n == 0 {
        return Err(ModelError::NoNegatives);
    }

    let x0_t = tape.transpose(x0);
    let pos = tape.matmul(x0_hat, x0_t);
    let pos_ls = tape.log_sigmoid(pos);

    let hat_t = tape.transpose(x0_hat);
    let neg_scores = tape.matmul(negatives, hat_t);
    let neg_flipped = tape.scale(neg_scores, F::from_f64(-1.0));
    let neg_ls = tape.log_sigmoid(neg_flipped);
    let neg_sum = tape.sum_all(neg_ls);
    let neg_mean = tape.scale(neg_sum, F::from_f64(1.0 / n as f64));

    let total = tape.add(pos_ls, neg_mean);
    Ok(tape.scale(total, F::from_f64(-1.0)))
}

/// Evaluate the loss on plain matrices (validation, tests).
pub fn ce_loss_eval<F: Real>(
    x0_hat: &Matrix<F>,
    x0: &Matrix<F>,
    negatives: &Matrix<F>,
) -> Result<F, ModelError> {
    let mut tape = Tape::new();
    let a = tape.leaf(x0_hat.clone());
    let b = tape.leaf(x0.clone());
    let n = tape.leaf(negatives.clone());
    let loss = ce_loss(&mut tape, a, b, n)?;
    Ok(tape.value(loss).scalar())
}
