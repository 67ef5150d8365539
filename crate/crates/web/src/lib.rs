//! Browser bindings: a tiny end-to-end run, ranking curves and the upload
//! schedule. Build with `wasm-pack build crates/web --target web`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use slowfast::config::{DatasetFormat, ExperimentConfig, Variant};
use slowfast::eval::{hr_at_k, ndcg_at_k, RankingResult};
use slowfast::exchange::{Decision, Scheduler};
use slowfast::lifecycle::{prepare, run_lifecycle};
use slowfast::results::{summarize, RunRecord};

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn demo_config(users: usize, threshold: u32, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        format: DatasetFormat::Synthetic,
        synthetic_users: users,
        synthetic_items: 60,
        synthetic_clusters: 3,
        synthetic_len: 25,
        dim: 16,
        batch_size: 32,
        lr: 2e-3,
        slow_epochs: 4,
        fast_epochs: 3,
        seeds: 1,
        seed,
        threshold,
        n_eval_neg: 30,
        ks: (1..=10).collect(),
        variants: Variant::ALL.to_vec(),
        ..ExperimentConfig::default()
    }
}

/// Train every variant on planted-cluster data and return, as JSON, the
/// HR@k curves per variant and component plus message counts.
#[wasm_bindgen]
pub fn run_demo(users: usize, threshold: u32, seed: u64) -> Result<String, JsValue> {
    demo_json(users, threshold, seed).map_err(js_err)
}

fn demo_json(users: usize, threshold: u32, seed: u64) -> Result<String, String> {
    let config = demo_config(users.clamp(80, 300), threshold.max(1), seed);
    config.validate().map_err(text)?;
    let prepared = prepare(&config).map_err(text)?;
    let outcomes = run_lifecycle(&config, &prepared, false).map_err(text)?;

    let messages: Vec<_> = outcomes
        .iter()
        .map(|o| {
            let kinds: serde_json::Map<String, serde_json::Value> = o
                .message_kinds()
                .into_iter()
                .map(|(k, n)| (format!("{k:?}"), json!(n)))
                .collect();
            json!({ "variant": o.variant.name(), "total": o.messages(), "kinds": kinds })
        })
        .collect();
    let records: Vec<RunRecord> = outcomes.into_iter().flat_map(|o| o.records).collect();
    let mut curves = serde_json::Map::new();
    for s in summarize(&records).iter().filter(|s| s.metric == "hr") {
        curves
            .entry(format!("{}/{}", s.variant, s.component))
            .or_insert_with(|| json!([]))
            .as_array_mut()
            .expect("array")
            .push(json!([s.k, s.mean]));
    }
    Ok(json!({
        "users": prepared.split.users.len(),
        "items": prepared.split.items.len(),
        "hr": curves,
        "messages": messages,
    })
    .to_string())
}

/// HR@k and NDCG@k for k = 1..=max_k from 1-based ranks, interleaved as
/// `[hr@1, ndcg@1, hr@2, ndcg@2, ...]`.
#[wasm_bindgen]
pub fn metric_curves(ranks: Vec<u32>, max_k: usize) -> Result<Vec<f64>, JsValue> {
    let results: Vec<RankingResult> = ranks
        .iter()
        .enumerate()
        .map(|(i, &rank)| RankingResult {
            user: i as u32,
            positive: 0,
            rank: rank.max(1) as usize,
            candidates: usize::MAX,
        })
        .collect();
    let mut out = Vec::with_capacity(2 * max_k);
    for k in 1..=max_k {
        out.push(hr_at_k(&results, k).map_err(js_err)?);
        out.push(ndcg_at_k(&results, k).map_err(js_err)?);
    }
    Ok(out)
}

/// One byte per exposure event for one device: 1 where it uploads.
#[wasm_bindgen]
pub fn scheduler_timeline(threshold: u32, events: u32) -> Result<Vec<u8>, JsValue> {
    let mut s = Scheduler::new(threshold).map_err(js_err)?;
    Ok((0..events)
        .map(|_| u8::from(s.tick(0) == Decision::UploadNow))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timeline_marks_every_threshold_th_event() {
        let t = scheduler_timeline(3, 7).unwrap();
        assert_eq!(t, vec![0, 0, 1, 0, 0, 1, 0]);
    }

    #[test]
    fn curves_are_monotone_in_k() {
        let c = metric_curves(vec![1, 3, 8, 20], 10).unwrap();
        assert_eq!(c[0], 0.25);
        assert!(c.chunks(2).zip(c.chunks(2).skip(1)).all(|(a, b)| b[0] >= a[0] && b[1] >= a[1]));
    }

    #[test]
    fn demo_runs_all_variants() {
        let out: serde_json::Value = serde_json::from_str(&demo_json(90, 5, 1).unwrap()).unwrap();
        assert_eq!(out["messages"].as_array().unwrap().len(), 3);
        assert_eq!(out["hr"]["s2f_full/fast"].as_array().unwrap().len(), 10);
    }
}
