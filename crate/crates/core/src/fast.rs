//! Device-side ("fast") component.
//!
//! Two GRUs encode the short clicked sequence and the exposed-but-unclicked
//! sequence; a target-aware softmax fuses them. In interactive mode the
//! cloud's interest vectors are blended by a scalar gate, projected into
//! the GRU state space and used as both GRUs' initial states, and `r_t` is
//! appended to the head input.
//!
//! Item embeddings on the device are a frozen [`EmbeddingSlice`] copied from
//! the cloud table; fast training never updates them.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{target_aware_fusion, EmbeddingTable, GruCell, Linear, Mlp, MlpHead, ScalarGate};
use crate::params::ParamStore;
use crate::slow::{slow_loss, InterestExport, Mode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct FastConfig {
    pub dim: usize,
    pub fusion_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl FastConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            fusion_hidden: 16,
            head_hidden: vec![64, 32],
        }
    }
}

/// Cloud embedding rows mirrored on a device.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSlice<T> {
    dim: usize,
    rows: BTreeMap<u32, Vec<T>>,
}

impl<T: Real> EmbeddingSlice<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contains(&self, id: u32) -> bool {
        self.rows.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.rows.keys().copied()
    }

    /// Copy rows that are not yet on the device.
    pub fn request(&mut self, store: &ParamStore<T>, table: &EmbeddingTable, ids: &[u32]) -> Result<()> {
        for &id in ids {
            if let std::collections::btree_map::Entry::Vacant(slot) = self.rows.entry(id) {
                slot.insert(table.row(store, id)?.to_vec());
            }
        }
        Ok(())
    }

    /// Re-copy every held row from the cloud table.
    pub fn resync(&mut self, store: &ParamStore<T>, table: &EmbeddingTable) -> Result<()> {
        for (&id, row) in self.rows.iter_mut() {
            row.copy_from_slice(table.row(store, id)?);
        }
        Ok(())
    }

    pub fn row(&self, id: u32) -> Result<&[T]> {
        self.rows.get(&id).map(Vec::as_slice).ok_or(Error::NotOnDevice(id))
    }

    pub fn matrix(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            data.extend_from_slice(self.row(id)?);
        }
        Tensor::matrix(ids.len(), self.dim, data)
    }
}

/// Negative memory uploaded from a device.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeMemoryExport<T> {
    pub user: u64,
    pub r_hat2: Vec<T>,
    /// Exposures folded in since the previous upload.
    pub count: usize,
}

/// Running `GRU_n` state over a device's exposures.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeMemory<T> {
    pub carry: Vec<T>,
    pub pending: Vec<u32>,
}

impl<T: Real> NegativeMemory<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            carry: vec![T::zero(); dim],
            pending: Vec::new(),
        }
    }

    pub fn accumulate(&mut self, exposures: &[u32]) {
        self.pending.extend_from_slice(exposures);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FastForward {
    pub prob: NodeId,
    /// `r_1` (independent) or `r_p` (interactive).
    pub clicked: NodeId,
    /// `r_2` (independent) or `r~_n` (interactive).
    pub exposed: NodeId,
    pub fused: NodeId,
    pub alpha: Option<NodeId>,
}

/// Context representations shared by every candidate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct FastEncoding {
    pub clicked: NodeId,
    pub exposed: NodeId,
    /// Downloaded `r_t`, interactive path only.
    pub r_t: Option<NodeId>,
    pub alpha: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct FastModel<T> {
    pub store: ParamStore<T>,
    pub config: FastConfig,
    pub mode: Mode,
    pub gru_p: GruCell,
    pub gru_n: GruCell,
    /// Shared by both rows of the target-aware fusion.
    pub fusion: Mlp,
    /// `alpha = sigmoid(W0 [r_n ++ r_t] + b0)`
    pub alpha: ScalarGate,
    pub init_p: Linear,
    pub init_n: Linear,
    pub head: MlpHead,
}

impl<T: Real> FastModel<T> {
    pub fn new(config: FastConfig, mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let gru_p = GruCell::new(&mut store, "gru_p", d, d, &mut rng);
        let gru_n = GruCell::new(&mut store, "gru_n", d, d, &mut rng);
        let fusion = Mlp::new(&mut store, "fusion", &[2 * d, config.fusion_hidden, 1], &mut rng);
        let alpha = ScalarGate::new(&mut store, "alpha", 2 * d, &mut rng);
        let init_p = Linear::new(&mut store, "init_p", d, d, &mut rng);
        let init_n = Linear::new(&mut store, "init_n", d, d, &mut rng);
        let head_in = match mode {
            Mode::Independent => 2 * d,
            Mode::Interactive => 3 * d,
        };
        let head = MlpHead::new(&mut store, "head", head_in, &config.head_hidden, &mut rng);
        Self {
            store,
            config,
            mode,
            gru_p,
            gru_n,
            fusion,
            alpha,
            init_p,
            init_n,
            head,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Candidate-independent part of a forward pass: both sequence encodings
    /// (and, on the interactive path, `r_t` and `alpha`).
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        prior: Option<&InterestExport<T>>,
    ) -> Result<FastEncoding> {
        if clicked.is_empty() {
            return Err(Error::EmptySequence("fast forward"));
        }
        let h_p = g.input(slice.matrix(clicked)?);
        let h_n = g.input(slice.matrix(exposed)?);
        let Some(prior) = prior else {
            let zero = g.row(vec![T::zero(); self.dim()]);
            let r1 = self.gru_p.encode(g, h_p, zero)?;
            let r2 = self.gru_n.encode(g, h_n, zero)?;
            return Ok(FastEncoding {
                clicked: r1,
                exposed: r2,
                r_t: None,
                alpha: None,
            });
        };
        let d = self.dim();
        if prior.r_n.len() != d || prior.r_t.len() != d {
            return Err(Error::ShapeMismatch {
                op: "interest prior",
                left: vec![prior.r_n.len(), prior.r_t.len()],
                right: vec![d, d],
            });
        }
        let r_n = g.row(prior.r_n.clone());
        let r_t = g.row(prior.r_t.clone());
        let both = g.concat_cols(&[r_n, r_t])?;
        let alpha = self.alpha.forward(g, both)?;
        let r_f = g.blend(alpha, r_n, r_t)?;
        let z_p = self.init_p.forward(g, r_f)?;
        let z_p = g.relu(z_p);
        let z_n = self.init_n.forward(g, r_f)?;
        let z_n = g.relu(z_n);
        let r_p = self.gru_p.encode(g, h_p, z_p)?;
        let r_n_tilde = self.gru_n.encode(g, h_n, z_n)?;
        Ok(FastEncoding {
            clicked: r_p,
            exposed: r_n_tilde,
            r_t: Some(r_t),
            alpha: Some(alpha),
        })
    }

    /// Fuse an encoding against one candidate and apply the head.
    pub fn score(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        enc: &FastEncoding,
        candidate: u32,
    ) -> Result<FastForward> {
        let e_i = g.input(Tensor::row(slice.row(candidate)?.to_vec()));
        let fused = target_aware_fusion(g, &self.fusion, enc.clicked, enc.exposed, e_i)?;
        let features = match enc.r_t {
            None => g.concat_cols(&[fused, e_i])?,
            Some(r_t) => g.concat_cols(&[fused, r_t, e_i])?,
        };
        let prob = self.head.predict(g, features)?;
        Ok(FastForward {
            prob,
            clicked: enc.clicked,
            exposed: enc.exposed,
            fused,
            alpha: enc.alpha,
        })
    }

    pub fn forward_independent(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        candidate: u32,
    ) -> Result<FastForward> {
        let enc = self.encode(g, slice, clicked, exposed, None)?;
        self.score(g, slice, &enc, candidate)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward_interactive(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        candidate: u32,
        prior: &InterestExport<T>,
    ) -> Result<FastForward> {
        let enc = self.encode(g, slice, clicked, exposed, Some(prior))?;
        self.score(g, slice, &enc, candidate)
    }

    /// Forward along this model's mode; interactive with no prior uses zeros.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        candidate: u32,
        prior: Option<&InterestExport<T>>,
    ) -> Result<FastForward> {
        let enc = self.encode_for(g, slice, clicked, exposed, prior)?;
        self.score(g, slice, &enc, candidate)
    }

    /// [`encode`](Self::encode) along this model's mode; interactive with no prior uses zeros.
    pub fn encode_for(
        &self,
        g: &mut Graph<T>,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        prior: Option<&InterestExport<T>>,
    ) -> Result<FastEncoding> {
        match self.mode {
            Mode::Independent => self.encode(g, slice, clicked, exposed, None),
            Mode::Interactive => match prior {
                Some(p) => self.encode(g, slice, clicked, exposed, Some(p)),
                None => {
                    let zeros = InterestExport::zeros(0, self.dim());
                    self.encode(g, slice, clicked, exposed, Some(&zeros))
                }
            },
        }
    }

    /// Scores for several candidates sharing one context; the sequence
    /// encodings are computed once.
    pub fn score_candidates(
        &self,
        slice: &EmbeddingSlice<T>,
        clicked: &[u32],
        exposed: &[u32],
        candidates: &[u32],
        prior: Option<&InterestExport<T>>,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode_for(&mut g, slice, clicked, exposed, prior)?;
        candidates
            .iter()
            .map(|&c| {
                let out = self.score(&mut g, slice, &enc, c)?;
                Ok(g.scalar(out.prob).as_f64())
            })
            .collect()
    }

    /// Fold exposures since the last upload into the carried `GRU_n` state.
    pub fn export_negative_memory(
        &self,
        slice: &EmbeddingSlice<T>,
        user: u64,
        memory: &mut NegativeMemory<T>,
    ) -> Result<NegativeMemoryExport<T>> {
        let mut g = Graph::new(&self.store);
        let seq = g.input(slice.matrix(&memory.pending)?);
        let init = g.row(memory.carry.clone());
        let out = self.gru_n.encode(&mut g, seq, init)?;
        let r_hat2 = g.value(out).data().to_vec();
        let count = memory.pending.len();
        memory.carry.clone_from(&r_hat2);
        memory.pending.clear();
        Ok(NegativeMemoryExport { user, r_hat2, count })
    }

    /// Overwrite `GRU_n` with tensors named as in [`GruCell::PARAM_NAMES`].
    pub fn load_gru_n(&mut self, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
        for (name, id) in GruCell::PARAM_NAMES.iter().zip(self.gru_n.params()) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::UnknownParameter((*name).to_string()))?;
            self.store.assign(id, &t.cast())?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }
}

/// The on-device model: weights plus the mirrored embedding rows.
#[derive(Clone, Debug)]
pub struct FastState<T> {
    pub model: FastModel<T>,
    pub slice: EmbeddingSlice<T>,
}

impl<T: Real> FastState<T> {
    pub fn num_scalars(&self) -> usize {
        self.model.num_scalars() + self.slice.len() * self.slice.dim()
    }
}

/// Same objective as the slow side.
pub fn fast_loss<T: Real>(prob: T, label: T) -> Result<T> {
    slow_loss(prob, label)
}
