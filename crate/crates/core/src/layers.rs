//! Reusable blocks: embedding lookup, GRU cell, DIN local-activation
//! attention, target-aware two-way fusion and the MLP prediction head.
//!
//! Layers only hold [`ParamId`]s into a caller-owned [`ParamStore`]; every
//! forward call records onto a [`Graph`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{uniform, xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Embedding rows are initialised from `uniform(-EMBED_INIT, EMBED_INIT)`.
pub const EMBED_INIT: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}/w"), xavier_uniform(rng, inputs, outputs), true);
        let bias = store.add(format!("{name}/b"), Tensor::zeros(vec![1, outputs]), false);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    /// `x W + b` for `x` of shape `[m, inputs]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn num_scalars(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

/// Affine layers with ReLU between them and no activation after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes, so it has layers + 1 entries.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}/{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn num_scalars(&self) -> usize {
        self.layers.iter().map(Linear::num_scalars).sum()
    }
}

/// Item embedding matrix, stored as `[vocab, dim]` so that row `i` is the
/// embedding of item `i`.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        vocab: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let table = store.add(name, uniform(rng, vec![vocab, dim], -EMBED_INIT, EMBED_INIT), true);
        Self { table, vocab, dim }
    }

    /// `[ids.len(), dim]`; gradients flow only into the touched rows.
    pub fn lookup<T: Real>(&self, g: &mut Graph<T>, ids: &[u32]) -> Result<NodeId> {
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather(self.table, &ids)
    }

    pub fn row<'s, T: Real>(&self, store: &'s ParamStore<T>, id: u32) -> Result<&'s [T]> {
        let t = store.get(self.table);
        if id as usize >= self.vocab {
            return Err(Error::OutOfVocabulary {
                id: id as usize,
                vocab: self.vocab,
            });
        }
        Ok(t.row_slice(id as usize))
    }
}

/// Standard GRU cell:
///
/// ```text
/// z  = sigmoid(x Wz + h Uz + bz)
/// r  = sigmoid(x Wr + h Ur + br)
/// h~ = tanh(x Wh + (r * h) Uh + bh)
/// h' = (1 - z) * h + z * h~
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub const PARAM_NAMES: [&'static str; 9] =
        ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |s: &str, rows: usize| {
            store.add(format!("{name}/{s}"), xavier_uniform(rng, rows, hidden), true)
        };
        let (w_z, w_r, w_h) = (w("w_z", input), w("w_r", input), w("w_h", input));
        let (u_z, u_r, u_h) = (w("u_z", hidden), w("u_r", hidden), w("u_h", hidden));
        let mut b = |s: &str| store.add(format!("{name}/{s}"), Tensor::zeros(vec![1, hidden]), false);
        let (b_z, b_r, b_h) = (b("b_z"), b("b_r"), b("b_h"));
        Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
            input,
            hidden,
        }
    }

    /// Parameters in [`Self::PARAM_NAMES`] order.
    pub fn params(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }

    pub fn num_scalars(&self) -> usize {
        3 * (self.input * self.hidden + self.hidden * self.hidden + self.hidden)
    }

    fn gate<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        h: NodeId,
        w: ParamId,
        u: ParamId,
        b: ParamId,
    ) -> Result<NodeId> {
        let (w, u, b) = (g.param(w), g.param(u), g.param(b));
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add(s, b)
    }

    /// One step for `x: [1, input]`, `hidden: [1, hidden]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, x: NodeId, hidden: NodeId) -> Result<NodeId> {
        let z = self.gate(g, x, hidden, self.w_z, self.u_z, self.b_z)?;
        let z = g.sigmoid(z);
        let r = self.gate(g, x, hidden, self.w_r, self.u_r, self.b_r)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, hidden)?;
        let cand = self.gate(g, x, rh, self.w_h, self.u_h, self.b_h)?;
        let cand = g.tanh(cand);
        // (1 - z) * h + z * cand == h + z * (cand - h)
        let delta = g.sub(cand, hidden)?;
        let zd = g.mul(z, delta)?;
        g.add(hidden, zd)
    }

    /// Fold [`Self::step`] over the rows of `seq` starting from `init`.
    pub fn encode<T: Real>(&self, g: &mut Graph<T>, seq: NodeId, init: NodeId) -> Result<NodeId> {
        let rows = g.value(seq).rows();
        let mut h = init;
        for r in 0..rows {
            let x = g.select_row(seq, r)?;
            h = self.step(g, x, h)?;
        }
        Ok(h)
    }
}

/// DIN local-activation unit: scores each history row against the target
/// from `[e_j, t, e_j - t, e_j * t]` and returns the (unnormalised) weighted
/// sum of history rows.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub mlp: Mlp,
}

impl AttentionUnit {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::new(store, name, &[4 * dim, hidden, 1], rng),
        }
    }

    /// Per-row weights, shape `[l, 1]`.
    pub fn weights<T: Real>(&self, g: &mut Graph<T>, history: NodeId, target: NodeId) -> Result<NodeId> {
        let l = g.value(history).rows();
        if l == 0 {
            return Err(Error::EmptySequence("din_attention"));
        }
        let t = g.broadcast_rows(target, l)?;
        let diff = g.sub(history, t)?;
        let prod = g.mul(history, t)?;
        let features = g.concat_cols(&[history, t, diff, prod])?;
        self.mlp.forward(g, features)
    }

    /// `sum_j a_j e_j` as a `[1, d]` row.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, history: NodeId, target: NodeId) -> Result<NodeId> {
        let a = self.weights(g, history, target)?;
        let at = g.transpose(a);
        g.matmul(at, history)
    }

    pub fn num_scalars(&self) -> usize {
        self.mlp.num_scalars()
    }
}

/// Softmax-weighted blend of `r1` and `r2`, with logits from one shared MLP
/// applied to `r1 ++ target` and `r2 ++ target`.
pub fn target_aware_fusion<T: Real>(
    g: &mut Graph<T>,
    mlp: &Mlp,
    r1: NodeId,
    r2: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let weights = fusion_weights(g, mlp, r1, r2, target)?;
    let stacked = g.concat_rows(&[r1, r2])?;
    g.matmul(weights, stacked)
}

/// The `[1, 2]` softmax weights used by [`target_aware_fusion`].
pub fn fusion_weights<T: Real>(
    g: &mut Graph<T>,
    mlp: &Mlp,
    r1: NodeId,
    r2: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    if g.value(r1).shape() != g.value(r2).shape() {
        return Err(Error::ShapeMismatch {
            op: "target_aware_fusion",
            left: g.value(r1).shape().to_vec(),
            right: g.value(r2).shape().to_vec(),
        });
    }
    let x1 = g.concat_cols(&[r1, target])?;
    let x2 = g.concat_cols(&[r2, target])?;
    let l1 = mlp.forward(g, x1)?;
    let l2 = mlp.forward(g, x2)?;
    let logits = g.concat_cols(&[l1, l2])?;
    Ok(g.softmax(logits))
}

/// Three-layer (by default) MLP followed by a sigmoid.
#[derive(Clone, Debug)]
pub struct MlpHead {
    pub mlp: Mlp,
}

impl MlpHead {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self {
            mlp: Mlp::new(store, name, &widths, rng),
        }
    }

    pub fn logit<T: Real>(&self, g: &mut Graph<T>, features: NodeId) -> Result<NodeId> {
        self.mlp.forward(g, features)
    }

    /// Probability node `[1, 1]`.
    pub fn predict<T: Real>(&self, g: &mut Graph<T>, features: NodeId) -> Result<NodeId> {
        let z = self.logit(g, features)?;
        Ok(g.sigmoid(z))
    }

    pub fn num_layers(&self) -> usize {
        self.mlp.layers.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.mlp.num_scalars()
    }
}

/// `sigmoid(x W + b)` projected to a single scalar, shape `[1, 1]`.
#[derive(Clone, Debug)]
pub struct ScalarGate {
    pub linear: Linear,
}

impl ScalarGate {
    pub fn new<T: Real, R: Rng>(store: &mut ParamStore<T>, name: &str, inputs: usize, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, name, inputs, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        let z = self.linear.forward(g, x)?;
        Ok(g.sigmoid(z))
    }
}

/// Zero every weight and bias of a linear layer.
pub fn zero_linear<T: Real>(store: &mut ParamStore<T>, layer: &Linear) {
    for id in [layer.weight, layer.bias] {
        store.get_mut(id).data_mut().fill(T::zero());
    }
}
