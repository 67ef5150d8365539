//! Analytic vs central finite-difference gradient comparison (64-bit only).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fast::{EmbeddingSlice, FastConfig, FastModel};
use crate::graph::{Graph, NodeId};
use crate::layers::{target_aware_fusion, AttentionUnit, EmbeddingTable, GruCell, Linear, Mlp, MlpHead, ScalarGate};
use crate::params::{uniform, ParamId, ParamStore};
use crate::slow::{InterestExport, Mode, SlowConfig, SlowModel};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, FLOOR)`
/// so entries with vanishing gradients are compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const MAX_PARAMS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Check every parameter entry in `store` against central differences of `loss`.
pub fn grad_check<F>(store: &mut ParamStore<f64>, loss: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>) -> Result<NodeId>,
{
    let total = store.num_scalars();
    if total >= MAX_PARAMS {
        return Err(Error::FragmentTooLarge(total));
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };

    let analytic = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        g.backward(l)?
    };

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let dense = analytic.dense(store, id);
        let mut worst = (0.0f64, 0usize);
        for i in 0..dense.numel() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(dense.data()[i], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport { params, tolerance })
}

/// Tolerance for single layers.
pub const LAYER_TOL: f64 = 1e-4;
/// Tolerance for the full interactive forward graphs.
pub const GRAPH_TOL: f64 = 1e-3;

/// One named fragment of [`standard_suite`].
#[derive(Clone, Debug)]
pub struct FragmentCheck {
    pub fragment: &'static str,
    pub report: GradCheckReport,
}

fn random_param(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, name: &str, rows: usize, cols: usize) -> ParamId {
    let t = uniform(rng, vec![rows, cols], -0.8, 0.8);
    store.add(name, t, true)
}

type LossFn = Box<dyn Fn(&mut Graph<f64>) -> Result<NodeId>>;
type BuildFn<'a> = &'a dyn Fn(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<LossFn>;

/// Every layer and both full interactive graphs at width `dim`.
pub fn standard_suite(dim: usize, seed: u64) -> Result<Vec<FragmentCheck>> {
    let d = dim;
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Each fragment builds its own store and returns its loss.
    let mut check = |fragment: &'static str,
                     tolerance: f64,
                     build: BuildFn<'_>,
                     rng: &mut ChaCha8Rng|
     -> Result<()> {
        let mut store = ParamStore::new();
        let loss = build(&mut store, rng)?;
        let report = grad_check(&mut store, loss, tolerance)?;
        out.push(FragmentCheck { fragment, report });
        Ok(())
    };

    check(
        "linear",
        LAYER_TOL,
        &|store, rng| {
            let layer = Linear::new(store, "linear", d, d, rng);
            let x = random_param(store, rng, "x", 3, d);
            let readout = uniform(rng, vec![3, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let xn = g.param(x);
                let y = layer.forward(g, xn)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;
    check(
        "embedding",
        LAYER_TOL,
        &|store, rng| {
            let table = EmbeddingTable::new(store, "embedding", 6, d, rng);
            let readout = uniform(rng, vec![4, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let e = table.lookup(g, &[1, 4, 1, 5])?;
                let w = g.input(readout.clone());
                let p = g.mul(e, w)?;
                let t = g.tanh(p);
                Ok(g.sum(t))
            }))
        },
        &mut rng,
    )?;
    check(
        "gru_step",
        LAYER_TOL,
        &|store, rng| {
            let cell = GruCell::new(store, "gru", d, d, rng);
            for id in cell.params() {
                let shape = store.get(id).shape().to_vec();
                store.get_mut(id).add_assign(&uniform(rng, shape, -0.3, 0.3));
            }
            let x = random_param(store, rng, "x", 1, d);
            let h = random_param(store, rng, "h", 1, d);
            let readout = uniform(rng, vec![1, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let xn = g.param(x);
                let hn = g.param(h);
                let y = cell.step(g, xn, hn)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;
    check(
        "gru_encode",
        LAYER_TOL,
        &|store, rng| {
            let cell = GruCell::new(store, "gru", d, d, rng);
            let seq = random_param(store, rng, "seq", 4, d);
            let init = random_param(store, rng, "init", 1, d);
            let readout = uniform(rng, vec![1, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let s = g.param(seq);
                let i = g.param(init);
                let y = cell.encode(g, s, i)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;
    check(
        "din_attention",
        LAYER_TOL,
        &|store, rng| {
            let unit = AttentionUnit::new(store, "attention", d, 16, rng);
            let history = random_param(store, rng, "history", 4, d);
            let target = random_param(store, rng, "target", 1, d);
            let readout = uniform(rng, vec![1, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let h = g.param(history);
                let t = g.param(target);
                let y = unit.forward(g, h, t)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;
    check(
        "target_aware_fusion",
        LAYER_TOL,
        &|store, rng| {
            let mlp = Mlp::new(store, "fusion", &[2 * d, 16, 1], rng);
            let r1 = random_param(store, rng, "r1", 1, d);
            let r2 = random_param(store, rng, "r2", 1, d);
            let target = random_param(store, rng, "target", 1, d);
            let readout = uniform(rng, vec![1, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let a = g.param(r1);
                let b = g.param(r2);
                let t = g.param(target);
                let y = target_aware_fusion(g, &mlp, a, b, t)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;
    check(
        "predict_head",
        LAYER_TOL,
        &|store, rng| {
            let head = MlpHead::new(store, "head", 3 * d, &[64, 32], rng);
            let x = random_param(store, rng, "features", 1, 3 * d);
            Ok(Box::new(move |g| {
                let xn = g.param(x);
                let p = head.predict(g, xn)?;
                g.bce(p, 1.0)
            }))
        },
        &mut rng,
    )?;
    check(
        "scalar_gate",
        LAYER_TOL,
        &|store, rng| {
            let gate = ScalarGate::new(store, "gate", 2 * d, rng);
            let x = random_param(store, rng, "x", 1, 2 * d);
            let v = random_param(store, rng, "v", 1, d);
            let readout = uniform(rng, vec![1, d], -1.0, 1.0);
            Ok(Box::new(move |g| {
                let xn = g.param(x);
                let s = gate.forward(g, xn)?;
                let vn = g.param(v);
                let y = g.scale_by(s, vn)?;
                let w = g.input(readout.clone());
                let p = g.mul(y, w)?;
                Ok(g.sum(p))
            }))
        },
        &mut rng,
    )?;

    // Full graphs: BCE on one positive and one negative candidate.
    let mut slow = SlowModel::<f64>::new(SlowConfig::new(12, d), Mode::Interactive, seed ^ 1);
    let memory: Vec<f64> = (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let mut store = std::mem::replace(&mut slow.store, ParamStore::new());
    let report = grad_check(
        &mut store,
        |g| {
            let pos = slow.forward_interactive(g, &[1, 3, 5, 7], 2, &memory)?;
            let neg = slow.forward_interactive(g, &[1, 3, 5, 7], 9, &memory)?;
            let a = g.bce(pos.prob, 1.0)?;
            let b = g.bce(neg.prob, 0.0)?;
            g.add(a, b)
        },
        GRAPH_TOL,
    )?;
    slow.store = store;
    out.push(FragmentCheck {
        fragment: "slow_interactive",
        report,
    });

    let mut fast = FastModel::<f64>::new(FastConfig::new(d), Mode::Interactive, seed ^ 2);
    let mut slice = EmbeddingSlice::new(d);
    slice.request(&slow.store, &slow.embedding, &(0..12).collect::<Vec<_>>())?;
    let prior = InterestExport {
        user: 0,
        round: 1,
        r_n: (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        r_t: (0..d).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    };
    let mut store = std::mem::replace(&mut fast.store, ParamStore::new());
    let report = grad_check(
        &mut store,
        |g| {
            let pos = fast.forward_interactive(g, &slice, &[1, 2, 3], &[4, 6], 5, &prior)?;
            let neg = fast.forward_interactive(g, &slice, &[1, 2, 3], &[4, 6], 10, &prior)?;
            let a = g.bce(pos.prob, 1.0)?;
            let b = g.bce(neg.prob, 0.0)?;
            g.add(a, b)
        },
        GRAPH_TOL,
    )?;
    fast.store = store;
    out.push(FragmentCheck {
        fragment: "fast_interactive",
        report,
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn smooth_function_passes() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(2, 2, vec![0.3, -0.2, 0.5, 0.1]).unwrap(), true);
        let report = grad_check(
            &mut store,
            |g| {
                let x = g.row(vec![1.0, -2.0]);
                let wn = g.param(w);
                let y = g.matmul(x, wn)?;
                let t = g.tanh(y);
                let s = g.softmax(t);
                let p = g.select_row(s, 0)?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        assert!(relative_error(1.0, 1.1) > 0.05);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }

    #[test]
    fn refuses_large_fragments() {
        let mut store = ParamStore::new();
        store.add("big", Tensor::<f64>::zeros(vec![100, 100]), true);
        let err = grad_check(&mut store, |g| Ok(g.input(Tensor::scalar(0.0))), 1e-4);
        assert!(matches!(err, Err(Error::FragmentTooLarge(10_000))));
    }

    #[test]
    fn standard_suite_passes_at_small_width() {
        let checks = standard_suite(4, 3).unwrap();
        assert_eq!(checks.len(), 10);
        for c in &checks {
            assert!(c.report.passed(), "{}: {:?}", c.fragment, c.report);
        }
    }
}
