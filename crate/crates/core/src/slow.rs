//! Cloud-side ("slow") component.
//!
//! Independent mode scores a candidate from DIN attention over the long
//! click history. Interactive mode additionally feeds the candidate through
//! `GRU_n` starting from the device's uploaded negative memory, gates the
//! result with a scalar, and appends it to the head input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{bce_value, Graph, NodeId};
use crate::layers::{AttentionUnit, EmbeddingTable, GruCell, MlpHead, ScalarGate};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

/// Which forward path a component uses; also fixes its head input width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Independent,
    Interactive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowConfig {
    pub vocab: usize,
    pub dim: usize,
    pub attention_hidden: usize,
    pub head_hidden: Vec<usize>,
}

impl SlowConfig {
    pub fn new(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            attention_hidden: 16,
            head_hidden: vec![64, 32],
        }
    }
}

/// Interest representations sent from the cloud to one device.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestExport<T> {
    pub user: u64,
    pub round: u32,
    pub r_n: Vec<T>,
    pub r_t: Vec<T>,
}

impl<T: Real> InterestExport<T> {
    pub fn zeros(user: u64, dim: usize) -> Self {
        Self {
            user,
            round: 0,
            r_n: vec![T::zero(); dim],
            r_t: vec![T::zero(); dim],
        }
    }

    pub fn cast<U: Real>(&self) -> InterestExport<U> {
        InterestExport {
            user: self.user,
            round: self.round,
            r_n: self.r_n.iter().map(|v| U::lit(v.as_f64())).collect(),
            r_t: self.r_t.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Nodes produced by one slow forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SlowForward {
    pub prob: NodeId,
    pub r_t: NodeId,
    /// Present on the interactive path only.
    pub r_n: Option<NodeId>,
    pub r_bar2: Option<NodeId>,
    pub gate: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct SlowModel<T> {
    pub store: ParamStore<T>,
    pub config: SlowConfig,
    pub mode: Mode,
    pub embedding: EmbeddingTable,
    pub attention: AttentionUnit,
    /// Trainer-of-record copy of `GRU_n`; synced down to devices.
    pub gru_n: GruCell,
    /// `sigmoid(W_S [r_bar2 ++ e_i] + b_S)`
    pub gate: ScalarGate,
    pub head: MlpHead,
}

impl<T: Real> SlowModel<T> {
    pub fn new(config: SlowConfig, mode: Mode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let embedding = EmbeddingTable::new(&mut store, "embedding", config.vocab, d, &mut rng);
        let attention = AttentionUnit::new(&mut store, "attention", d, config.attention_hidden, &mut rng);
        let gru_n = GruCell::new(&mut store, "gru_n", d, d, &mut rng);
        let gate = ScalarGate::new(&mut store, "gate", 2 * d, &mut rng);
        let head_in = match mode {
            Mode::Independent => 2 * d,
            Mode::Interactive => 3 * d,
        };
        let head = MlpHead::new(&mut store, "head", head_in, &config.head_hidden, &mut rng);
        Self {
            store,
            config,
            mode,
            embedding,
            attention,
            gru_n,
            gate,
            head,
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn num_scalars(&self) -> usize {
        self.store.num_scalars()
    }

    /// `r_t = DIN(H^S, e_i)` plus the item embedding node.
    fn interest(&self, g: &mut Graph<T>, history: &[u32], candidate: u32) -> Result<(NodeId, NodeId)> {
        if history.is_empty() {
            return Err(Error::EmptySequence("slow forward"));
        }
        let e_i = self.embedding.lookup(g, &[candidate])?;
        let h = self.embedding.lookup(g, history)?;
        let r_t = self.attention.forward(g, h, e_i)?;
        Ok((r_t, e_i))
    }

    fn head_from(&self, g: &mut Graph<T>, h: NodeId, candidate: u32, neg_memory: Option<&[T]>) -> Result<NodeId> {
        let e_i = self.embedding.lookup(g, &[candidate])?;
        let r_t = self.attention.forward(g, h, e_i)?;
        let features = match self.mode {
            Mode::Independent => g.concat_cols(&[r_t, e_i])?,
            Mode::Interactive => {
                let zeros = vec![T::zero(); self.dim()];
                let (r_n, _, _) = self.exposure_feature(g, e_i, neg_memory.unwrap_or(&zeros))?;
                g.concat_cols(&[r_n, r_t, e_i])?
            }
        };
        self.head.predict(g, features)
    }

    pub fn forward_independent(&self, g: &mut Graph<T>, history: &[u32], candidate: u32) -> Result<SlowForward> {
        let (r_t, e_i) = self.interest(g, history, candidate)?;
        let features = g.concat_cols(&[r_t, e_i])?;
        let prob = self.head.predict(g, features)?;
        Ok(SlowForward {
            prob,
            r_t,
            r_n: None,
            r_bar2: None,
            gate: None,
        })
    }

    /// Exposure feedback branch: `r_n = g * GRU_n(e_i | neg_memory)`.
    fn exposure_feature(&self, g: &mut Graph<T>, e_i: NodeId, neg_memory: &[T]) -> Result<(NodeId, NodeId, NodeId)> {
        if neg_memory.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "negative memory",
                left: vec![1, neg_memory.len()],
                right: vec![1, self.dim()],
            });
        }
        let memory = g.row(neg_memory.to_vec());
        let r_bar2 = self.gru_n.step(g, e_i, memory)?;
        let gate_in = g.concat_cols(&[r_bar2, e_i])?;
        let gate = self.gate.forward(g, gate_in)?;
        let r_n = g.scale_by(gate, r_bar2)?;
        Ok((r_n, r_bar2, gate))
    }

    pub fn forward_interactive(
        &self,
        g: &mut Graph<T>,
        history: &[u32],
        candidate: u32,
        neg_memory: &[T],
    ) -> Result<SlowForward> {
        let (r_t, e_i) = self.interest(g, history, candidate)?;
        let (r_n, r_bar2, gate) = self.exposure_feature(g, e_i, neg_memory)?;
        let features = g.concat_cols(&[r_n, r_t, e_i])?;
        let prob = self.head.predict(g, features)?;
        Ok(SlowForward {
            prob,
            r_t,
            r_n: Some(r_n),
            r_bar2: Some(r_bar2),
            gate: Some(gate),
        })
    }

    /// Forward along this model's mode; a missing memory is the zero vector.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        history: &[u32],
        candidate: u32,
        neg_memory: Option<&[T]>,
    ) -> Result<SlowForward> {
        match self.mode {
            Mode::Independent => self.forward_independent(g, history, candidate),
            Mode::Interactive => {
                let zeros;
                let memory = match neg_memory {
                    Some(m) => m,
                    None => {
                        zeros = vec![T::zero(); self.dim()];
                        &zeros
                    }
                };
                self.forward_interactive(g, history, candidate, memory)
            }
        }
    }

    pub fn predict(&self, history: &[u32], candidate: u32, neg_memory: Option<&[T]>) -> Result<T> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, history, candidate, neg_memory)?;
        Ok(g.scalar(out.prob))
    }

    pub fn score_candidates(
        &self,
        history: &[u32],
        candidates: &[u32],
        neg_memory: Option<&[T]>,
    ) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::EmptySequence("slow forward"));
        }
        // One graph: the history lookup is shared by all candidates.
        let mut g = Graph::new(&self.store);
        let h = self.embedding.lookup(&mut g, history)?;
        candidates
            .iter()
            .map(|&c| {
                let prob = self.head_from(&mut g, h, c, neg_memory)?;
                Ok(g.scalar(prob).as_f64())
            })
            .collect()
    }

    /// Interest representations for a device. Before any upload (`neg_memory`
    /// is `None`) `r_n` is the zero vector.
    pub fn export_interest(
        &self,
        user: u64,
        round: u32,
        history: &[u32],
        anchor: u32,
        neg_memory: Option<&[T]>,
    ) -> Result<InterestExport<T>> {
        let mut g = Graph::new(&self.store);
        let (r_t, e_i) = self.interest(&mut g, history, anchor)?;
        let r_t = g.value(r_t).data().to_vec();
        let r_n = match neg_memory {
            None => vec![T::zero(); self.dim()],
            Some(m) => {
                let (r_n, _, _) = self.exposure_feature(&mut g, e_i, m)?;
                g.value(r_n).data().to_vec()
            }
        };
        Ok(InterestExport { user, round, r_n, r_t })
    }

    /// `GRU_n` weights as named f32 tensors (`w_z`, ..., `b_h`).
    pub fn gru_n_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        GruCell::PARAM_NAMES
            .iter()
            .zip(self.gru_n.params())
            .map(|(n, id)| (n.to_string(), self.store.get(id).cast()))
            .collect()
    }
}

/// Binary cross-entropy on a predicted probability, clamped away from 0 and 1.
pub fn slow_loss<T: Real>(prob: T, label: T) -> Result<T> {
    if label != T::zero() && label != T::one() {
        return Err(Error::InvalidLabel(label.as_f64()));
    }
    Ok(bce_value(prob, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::zero_linear;

    fn model(mode: Mode) -> SlowModel<f64> {
        SlowModel::new(SlowConfig::new(20, 4), mode, 3)
    }

    #[test]
    fn zeroed_head_predicts_half() {
        for mode in [Mode::Independent, Mode::Interactive] {
            let mut m = model(mode);
            zero_linear(&mut m.store, m.head.mlp.last());
            let p = m.predict(&[1, 2, 3], 7, Some(&[0.3, -0.1, 0.2, 0.0])).unwrap();
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn empty_history_is_rejected() {
        let m = model(Mode::Independent);
        assert_eq!(m.predict(&[], 1, None), Err(Error::EmptySequence("slow forward")));
    }

    #[test]
    fn zeroed_gate_halves_gru_output() {
        let mut m = model(Mode::Interactive);
        zero_linear(&mut m.store, &m.gate.linear);
        let mut g = Graph::new(&m.store);
        let out = m
            .forward_interactive(&mut g, &[4, 5], 9, &[0.1, 0.2, -0.3, 0.4])
            .unwrap();
        assert_eq!(g.scalar(out.gate.unwrap()), 0.5);
        let r_bar2 = g.value(out.r_bar2.unwrap()).data().to_vec();
        let r_n = g.value(out.r_n.unwrap()).data();
        for (a, b) in r_n.iter().zip(&r_bar2) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn zero_memory_and_zero_gru_give_zero_exposure_feature() {
        let mut m = model(Mode::Interactive);
        for id in m.gru_n.params() {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&m.store);
        let out = m.forward_interactive(&mut g, &[4], 9, &[0.0; 4]).unwrap();
        assert_eq!(g.value(out.r_bar2.unwrap()).data(), &[0.0; 4]);
        assert_eq!(g.value(out.r_n.unwrap()).data(), &[0.0; 4]);
    }

    #[test]
    fn wrong_memory_width_is_rejected() {
        let m = model(Mode::Interactive);
        let mut g = Graph::new(&m.store);
        assert!(matches!(
            m.forward_interactive(&mut g, &[1], 2, &[0.0; 3]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn cold_start_export_has_zero_r_n() {
        let m = model(Mode::Interactive);
        let export = m.export_interest(11, 0, &[1, 2, 3], 3, None).unwrap();
        assert_eq!(export.r_n, vec![0.0; 4]);
        let mut g = Graph::new(&m.store);
        let out = m.forward_independent_interest_only(&mut g, &[1, 2, 3], 3);
        assert_eq!(export.r_t, g.value(out).data());
    }

    #[test]
    fn export_after_upload_matches_forward() {
        let m = model(Mode::Interactive);
        let memory = [0.2, -0.4, 0.1, 0.05];
        let export = m.export_interest(11, 1, &[1, 2], 6, Some(&memory)).unwrap();
        let mut g = Graph::new(&m.store);
        let out = m.forward_interactive(&mut g, &[1, 2], 6, &memory).unwrap();
        assert_eq!(export.r_n, g.value(out.r_n.unwrap()).data());
        assert_eq!(export.r_t, g.value(out.r_t).data());
    }

    #[test]
    fn loss_closed_forms() {
        assert!((slow_loss(0.5, 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((slow_loss(0.9, 0.0).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(slow_loss(1.0 - 1e-12, 1.0).unwrap() < 1e-6);
        assert!(slow_loss(0.5, 2.0).is_err());
    }

    impl SlowModel<f64> {
        fn forward_independent_interest_only(&self, g: &mut Graph<f64>, history: &[u32], c: u32) -> NodeId {
            self.interest(g, history, c).unwrap().0
        }
    }
}
