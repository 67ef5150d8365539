//! Result rows and their CSV form.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

pub const HEADER: [&str; 8] = ["dataset", "variant", "component", "metric", "k", "value", "seed", "wall_seconds"];

#[derive(Debug, Error)]
pub enum ResultsError {
    #[error("no records to write")]
    Empty,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: bad `{column}` value `{value}`")]
    BadField { row: usize, column: &'static str, value: String },
    #[error("unexpected header {0:?}")]
    BadHeader(Vec<String>),
}

/// One metric value; MRR rows carry `k = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub dataset: String,
    pub variant: String,
    pub component: String,
    pub metric: String,
    pub k: usize,
    pub value: f64,
    pub seed: u64,
    pub wall_seconds: f64,
}

impl RunRecord {
    fn key(&self) -> (&str, &str, &str, &str, usize, u64) {
        (&self.dataset, &self.variant, &self.component, &self.metric, self.k, self.seed)
    }
}

/// Four decimals, ties rounded away from zero on the shortest decimal
/// representation (so `0.71655` prints as `0.7166`).
pub fn format4(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    let text = format!("{}", v.abs());
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int.bytes().chain(frac.bytes().chain(std::iter::repeat(b'0')).take(4)).collect();
    if frac.as_bytes().get(4).is_some_and(|&d| d >= b'5') {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 4;
    let body = format!(
        "{}.{}",
        std::str::from_utf8(&digits[..split]).unwrap(),
        std::str::from_utf8(&digits[split..]).unwrap()
    );
    if v < 0.0 && body.bytes().any(|b| b.is_ascii_digit() && b != b'0') {
        format!("-{body}")
    } else {
        body
    }
}

pub fn sort_records(records: &mut [RunRecord]) {
    records.sort_by(|a, b| a.key().cmp(&b.key()));
}

pub fn write_results<W: Write>(records: &[RunRecord], w: W) -> Result<(), ResultsError> {
    if records.is_empty() {
        return Err(ResultsError::Empty);
    }
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(HEADER)?;
    for r in &sorted {
        out.write_record([
            r.dataset.clone(),
            r.variant.clone(),
            r.component.clone(),
            r.metric.clone(),
            r.k.to_string(),
            format4(r.value),
            r.seed.to_string(),
            format4(r.wall_seconds),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_results_file(records: &[RunRecord], path: &std::path::Path) -> Result<(), ResultsError> {
    let f = std::fs::File::create(path)?;
    write_results(records, std::io::BufWriter::new(f))
}

pub fn read_results<R: Read>(r: R) -> Result<Vec<RunRecord>, ResultsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(ResultsError::BadHeader(header));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let field = |c: usize| row.get(c).unwrap_or("").to_string();
        let bad = |column: &'static str, value: String| ResultsError::BadField { row: i + 1, column, value };
        let k = field(4);
        let value = field(5);
        let seed = field(6);
        let wall = field(7);
        out.push(RunRecord {
            dataset: field(0),
            variant: field(1),
            component: field(2),
            metric: field(3),
            k: k.parse().map_err(|_| bad("k", k.clone()))?,
            value: value.parse().map_err(|_| bad("value", value.clone()))?,
            seed: seed.parse().map_err(|_| bad("seed", seed.clone()))?,
            wall_seconds: wall.parse().map_err(|_| bad("wall_seconds", wall.clone()))?,
        });
    }
    Ok(out)
}

/// Mean of one metric cell over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub dataset: String,
    pub variant: String,
    pub component: String,
    pub metric: String,
    pub k: usize,
    pub mean: f64,
    pub seeds: usize,
}

pub fn summarize(records: &[RunRecord]) -> Vec<Summary> {
    let mut cells: BTreeMap<(String, String, String, String, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells
            .entry((r.dataset.clone(), r.variant.clone(), r.component.clone(), r.metric.clone(), r.k))
            .or_default()
            .push(r.value);
    }
    cells
        .into_iter()
        .map(|((dataset, variant, component, metric, k), vals)| Summary {
            dataset,
            variant,
            component,
            metric,
            k,
            mean: vals.iter().sum::<f64>() / vals.len() as f64,
            seeds: vals.len(),
        })
        .collect()
}

/// `mean(variant) - mean(baseline)` for one component/metric/k cell, if both exist.
pub fn mean_delta(
    summaries: &[Summary],
    component: &str,
    metric: &str,
    k: usize,
    variant: &str,
    baseline: &str,
) -> Option<f64> {
    let find = |v: &str| {
        summaries
            .iter()
            .find(|s| s.component == component && s.metric == metric && s.k == k && s.variant == v)
            .map(|s| s.mean)
    };
    Some(find(variant)? - find(baseline)?)
}
