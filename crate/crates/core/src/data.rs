//! Dataset ingestion, the per-user three-phase temporal split, negative
//! sampling and exposure simulation.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Items in the fast-training phase and in the test phase.
pub const PHASE_LEN: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("user {user} needs {needed} negatives but only {available} items are left to sample")]
    Exhausted { user: u32, needed: usize, available: usize },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] crate::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InteractionKind {
    Click,
    Exposure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
    pub kind: InteractionKind,
}

/// Bijection between raw identifiers and dense indices assigned in order of
/// first appearance.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IdMap {
    to_dense: HashMap<String, u32>,
    to_raw: Vec<String>,
}

impl IdMap {
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&d) = self.to_dense.get(raw) {
            return d;
        }
        let d = self.to_raw.len() as u32;
        self.to_raw.push(raw.to_string());
        self.to_dense.insert(raw.to_string(), d);
        d
    }

    pub fn dense(&self, raw: &str) -> Option<u32> {
        self.to_dense.get(raw).copied()
    }

    pub fn raw(&self, dense: u32) -> Option<&str> {
        self.to_raw.get(dense as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.to_raw.is_empty()
    }

    /// Two columns: dense id, raw id.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (d, raw) in self.to_raw.iter().enumerate() {
            writeln!(w, "{d}\t{raw}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, DataError> {
        let mut map = IdMap::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let (d, raw) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
                line: i + 1,
                msg: "expected two tab-separated columns".into(),
            })?;
            let expected = map.len().to_string();
            if d != expected {
                return Err(DataError::Malformed {
                    line: i + 1,
                    msg: format!("dense id {d} out of order (expected {expected})"),
                });
            }
            map.intern(raw);
        }
        Ok(map)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub name: String,
    pub interactions: Vec<Interaction>,
    pub users: IdMap,
    pub items: IdMap,
}

impl Dataset {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }
}

fn malformed(line: usize, msg: impl Into<String>) -> DataError {
    DataError::Malformed {
        line,
        msg: msg.into(),
    }
}

/// MovieLens-1M `UserID::MovieID::Rating::Timestamp`; every rating is a click.
pub fn parse_ml1m<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut ds = Dataset {
        name: "ml-1m".into(),
        ..Dataset::default()
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split("::").collect();
        if fields.len() != 4 {
            return Err(malformed(i + 1, format!("expected 4 `::` fields, got {}", fields.len())));
        }
        for (f, what) in fields[..2].iter().zip(["user", "item"]) {
            if f.parse::<u64>().is_err() {
                return Err(malformed(i + 1, format!("bad {what} id `{f}`")));
            }
        }
        fields[2]
            .parse::<f64>()
            .map_err(|_| malformed(i + 1, format!("bad rating `{}`", fields[2])))?;
        let timestamp = fields[3]
            .parse::<i64>()
            .map_err(|_| malformed(i + 1, format!("bad timestamp `{}`", fields[3])))?;
        let user = ds.users.intern(fields[0]);
        let item = ds.items.intern(fields[1]);
        ds.interactions.push(Interaction {
            user,
            item,
            timestamp,
            kind: InteractionKind::Click,
        });
    }
    Ok(ds)
}

/// Generic `user \t item \t timestamp [\t kind]`; kind is `click`/`exposure`
/// (or `1`/`0`). Blank lines and `#` comments are skipped.
pub fn parse_tsv<R: BufRead>(reader: R, name: &str) -> Result<Dataset, DataError> {
    let mut ds = Dataset {
        name: name.into(),
        ..Dataset::default()
    };
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(3..=4).contains(&fields.len()) {
            return Err(malformed(i + 1, format!("expected 3 or 4 columns, got {}", fields.len())));
        }
        let timestamp = fields[2]
            .parse::<i64>()
            .map_err(|_| malformed(i + 1, format!("bad timestamp `{}`", fields[2])))?;
        let kind = match fields.get(3).copied() {
            None | Some("click") | Some("1") => InteractionKind::Click,
            Some("exposure") | Some("0") => InteractionKind::Exposure,
            Some(other) => return Err(malformed(i + 1, format!("bad kind `{other}`"))),
        };
        let user = ds.users.intern(fields[0]);
        let item = ds.items.intern(fields[1]);
        ds.interactions.push(Interaction {
            user,
            item,
            timestamp,
            kind,
        });
    }
    Ok(ds)
}

pub fn load_ml1m(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    parse_ml1m(std::io::BufReader::new(f))
}

pub fn load_tsv(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "tsv".into());
    parse_tsv(std::io::BufReader::new(f), &name)
}

/// One retained user's timestamp-ordered click sequence, partitioned into
/// slow-training, fast-training (5) and test (5) phases.
#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub user: u32,
    pub items: Vec<u32>,
    pub timestamps: Vec<i64>,
    /// Logged exposures `(timestamp, item)`, if the dataset has any.
    pub exposures: Vec<(i64, u32)>,
}

impl UserSplit {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn slow_range(&self) -> Range<usize> {
        0..self.len() - 2 * PHASE_LEN
    }

    pub fn fast_range(&self) -> Range<usize> {
        self.len() - 2 * PHASE_LEN..self.len() - PHASE_LEN
    }

    pub fn test_range(&self) -> Range<usize> {
        self.len() - PHASE_LEN..self.len()
    }

    pub fn slow(&self) -> &[u32] {
        &self.items[self.slow_range()]
    }

    pub fn fast(&self) -> &[u32] {
        &self.items[self.fast_range()]
    }

    pub fn test(&self) -> &[u32] {
        &self.items[self.test_range()]
    }

    /// Slow, fast and test timestamps are each no later than the next phase's.
    pub fn is_temporally_sound(&self) -> bool {
        let ts = &self.timestamps;
        let max = |r: Range<usize>| ts[r].iter().copied().max();
        let min = |r: Range<usize>| ts[r].iter().copied().min();
        max(self.slow_range()) <= min(self.fast_range())
            && max(self.fast_range()) <= min(self.test_range())
    }

    /// Logged exposures between fast click `j` and the following click.
    pub fn logged_exposures_after_fast(&self, j: usize) -> Vec<u32> {
        let idx = self.fast_range().start + j;
        let from = self.timestamps[idx];
        let to = self.timestamps[idx + 1];
        self.exposures
            .iter()
            .filter(|(t, _)| *t >= from && (*t < to || (from == to && *t == to)))
            .map(|&(_, i)| i)
            .collect()
    }
}

#[derive(Clone, Debug, Default)]
pub struct PhaseSplit {
    pub users: Vec<UserSplit>,
    /// Items surviving the frequency filter, ascending; the negative pool.
    pub items: Vec<u32>,
    /// Size of the dense item id space (embedding rows).
    pub vocab: usize,
    pub dropped_users: usize,
    pub dropped_items: usize,
}

impl PhaseSplit {
    /// Keep only the first `n` users (by dense id).
    pub fn truncate_users(&mut self, n: usize) {
        self.users.truncate(n);
    }
}

/// Filter items and users to at least `min_len` clicks (alternating until
/// stable), then split each user's timestamp-sorted sequence.
pub fn phase_split(ds: &Dataset, min_len: usize) -> PhaseSplit {
    let min_len = min_len.max(2 * PHASE_LEN + 1);
    let mut per_user: Vec<Vec<(i64, usize, u32)>> = vec![Vec::new(); ds.num_users()];
    let mut exposures: Vec<Vec<(i64, u32)>> = vec![Vec::new(); ds.num_users()];
    for (idx, it) in ds.interactions.iter().enumerate() {
        match it.kind {
            InteractionKind::Click => per_user[it.user as usize].push((it.timestamp, idx, it.item)),
            InteractionKind::Exposure => exposures[it.user as usize].push((it.timestamp, it.item)),
        }
    }
    for seq in &mut per_user {
        seq.sort_by_key(|&(t, idx, _)| (t, idx));
    }

    let mut item_alive = vec![true; ds.num_items()];
    let mut user_alive: Vec<bool> = per_user.iter().map(|s| !s.is_empty()).collect();
    loop {
        let mut counts = vec![0usize; ds.num_items()];
        for (u, seq) in per_user.iter().enumerate() {
            if user_alive[u] {
                for &(_, _, i) in seq {
                    if item_alive[i as usize] {
                        counts[i as usize] += 1;
                    }
                }
            }
        }
        let mut changed = false;
        for (i, alive) in item_alive.iter_mut().enumerate() {
            if *alive && counts[i] < min_len {
                *alive = false;
                changed = true;
            }
        }
        for (u, seq) in per_user.iter().enumerate() {
            if user_alive[u] {
                let n = seq.iter().filter(|&&(_, _, i)| item_alive[i as usize]).count();
                if n < min_len {
                    user_alive[u] = false;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let mut users = Vec::new();
    for (u, seq) in per_user.into_iter().enumerate() {
        if !user_alive[u] {
            continue;
        }
        let kept: Vec<_> = seq.into_iter().filter(|&(_, _, i)| item_alive[i as usize]).collect();
        let mut exp = std::mem::take(&mut exposures[u]);
        exp.sort();
        users.push(UserSplit {
            user: u as u32,
            items: kept.iter().map(|&(_, _, i)| i).collect(),
            timestamps: kept.iter().map(|&(t, _, _)| t).collect(),
            exposures: exp,
        });
    }
    let items: Vec<u32> = (0..ds.num_items() as u32)
        .filter(|&i| item_alive[i as usize])
        .collect();
    let with_clicks = user_alive.len();
    PhaseSplit {
        dropped_users: with_clicks - users.len(),
        dropped_items: ds.num_items() - items.len(),
        users,
        items,
        vocab: ds.num_items(),
    }
}

/// Sampled negatives for one user, aligned with the phases of its sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct UserNegatives {
    /// One list per slow-phase position.
    pub slow: Vec<Vec<u32>>,
    /// One list per fast-phase position.
    pub fast: Vec<Vec<u32>>,
    /// One list per test position (the ranking candidates besides the positive).
    pub eval: Vec<Vec<u32>>,
}

/// Seeded sampler of items a user never interacted with.
pub struct NegativeSampler<'a> {
    universe: &'a [u32],
    seen: HashSet<u32>,
    user: u32,
    rng: ChaCha8Rng,
}

impl<'a> NegativeSampler<'a> {
    pub fn new(universe: &'a [u32], history: &[u32], user: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(user as u64);
        Self {
            universe,
            seen: history.iter().copied().collect(),
            user,
            rng,
        }
    }

    pub fn available(&self) -> usize {
        self.universe.iter().filter(|i| !self.seen.contains(i)).count()
    }

    /// `n` distinct items outside the user's history and `exclude`.
    pub fn sample(&mut self, n: usize, exclude: &[u32]) -> Result<Vec<u32>, DataError> {
        let blocked = |i: &u32, out: &[u32]| self.seen.contains(i) || exclude.contains(i) || out.contains(i);
        let free = self
            .universe
            .iter()
            .filter(|i| !self.seen.contains(i) && !exclude.contains(i))
            .count();
        if free < n {
            return Err(DataError::Exhausted {
                user: self.user,
                needed: n,
                available: free,
            });
        }
        let mut out = Vec::with_capacity(n);
        // Rejection sampling; fall back to a shuffled scan when the pool is tight.
        let mut attempts = 0;
        while out.len() < n && attempts < 64 * (n + 1) {
            let cand = self.universe[self.rng.gen_range(0..self.universe.len())];
            attempts += 1;
            if !blocked(&cand, &out) {
                out.push(cand);
            }
        }
        if out.len() < n {
            let mut rest: Vec<u32> = self
                .universe
                .iter()
                .copied()
                .filter(|i| !blocked(i, &out))
                .collect();
            rest.shuffle(&mut self.rng);
            out.extend(rest.into_iter().take(n - out.len()));
        }
        Ok(out)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Draw training and evaluation negatives for every retained user.
pub fn sample_negatives(
    split: &PhaseSplit,
    n_train_neg: usize,
    n_eval_neg: usize,
    seed: u64,
) -> Result<Vec<UserNegatives>, DataError> {
    split
        .users
        .iter()
        .map(|u| {
            let mut s = NegativeSampler::new(&split.items, &u.items, u.user, seed);
            let mut draw = |range: Range<usize>, n: usize| {
                range
                    .map(|_| s.sample(n, &[]))
                    .collect::<Result<Vec<_>, _>>()
            };
            Ok(UserNegatives {
                slow: draw(u.slow_range(), n_train_neg)?,
                fast: draw(u.fast_range(), n_train_neg)?,
                eval: draw(u.test_range(), n_eval_neg)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExposureParams {
    pub pool_size: usize,
    pub expose_k: usize,
}

impl Default for ExposureParams {
    fn default() -> Self {
        Self {
            pool_size: 20,
            expose_k: 4,
        }
    }
}

/// Stand-in for impression logs: sample a pool of non-interacted items,
/// score it with the current device model and expose the top `expose_k`
/// (never the user's next true click).
pub fn simulate_exposures<F>(
    params: ExposureParams,
    sampler: &mut NegativeSampler<'_>,
    user: u32,
    timestamp: i64,
    next_click: Option<u32>,
    mut score: F,
) -> Result<Vec<Interaction>, DataError>
where
    F: FnMut(&[u32]) -> crate::Result<Vec<f64>>,
{
    if params.expose_k == 0 || params.pool_size == 0 {
        return Ok(Vec::new());
    }
    let exclude: Vec<u32> = next_click.into_iter().collect();
    let free = sampler
        .universe
        .iter()
        .filter(|i| !sampler.seen.contains(i) && !exclude.contains(i))
        .count();
    let pool = sampler.sample(params.pool_size.min(free), &exclude)?;
    let scores = score(&pool)?;
    let mut ranked: Vec<(f64, u32)> = scores.into_iter().zip(pool).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(ranked
        .into_iter()
        .take(params.expose_k)
        .map(|(_, item)| Interaction {
            user,
            item,
            timestamp,
            kind: InteractionKind::Exposure,
        })
        .collect())
}

/// Planted-cluster data: `items` split into `clusters` contiguous groups,
/// user `u` belongs to cluster `u % clusters` and clicks a random walk over
/// its cluster's items (`seq_len` clicks, each cluster item at most once per pass).
pub fn synthetic_clusters(users: usize, items: usize, clusters: usize, seq_len: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset {
        name: "synthetic".into(),
        ..Dataset::default()
    };
    let per = items / clusters;
    // Intern items up front so dense ids equal raw ids.
    for i in 0..items {
        ds.items.intern(&i.to_string());
    }
    for u in 0..users {
        let user = ds.users.intern(&u.to_string());
        let c = u % clusters;
        let members: Vec<u32> = (c * per..(c + 1) * per).map(|i| i as u32).collect();
        let mut seq = Vec::with_capacity(seq_len);
        while seq.len() < seq_len {
            let mut pass = members.clone();
            pass.shuffle(&mut rng);
            seq.extend(pass);
        }
        seq.truncate(seq_len);
        for (t, item) in seq.into_iter().enumerate() {
            ds.interactions.push(Interaction {
                user,
                item,
                timestamp: 1_000_000 + (u * 1000 + t) as i64,
                kind: InteractionKind::Click,
            });
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;

    fn user_with(n: usize) -> UserSplit {
        UserSplit {
            user: 0,
            items: (0..n as u32).collect(),
            timestamps: (0..n as i64).collect(),
            exposures: vec![],
        }
    }

    #[test]
    fn parses_ml1m_line() {
        let ds = parse_ml1m(&b"1::1193::5::978300760\n1::661::3::978302109\n"[..]).unwrap();
        assert_eq!(ds.interactions.len(), 2);
        let first = ds.interactions[0];
        assert_eq!(first.user, ds.users.dense("1").unwrap());
        assert_eq!(first.item, ds.items.dense("1193").unwrap());
        assert_eq!(first.timestamp, 978300760);
        assert_eq!(first.kind, InteractionKind::Click);
        assert_eq!(ds.num_items(), 2);
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        let ds = parse_ml1m(&b""[..]).unwrap();
        assert!(ds.interactions.is_empty());
    }

    #[test]
    fn malformed_line_reports_number() {
        let err = parse_ml1m(&b"1::2::3::4\n1::2::3\n"[..]).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }), "{err}");
        let err = parse_ml1m(&b"1::x::3::4\n"[..]).unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 1, .. }));
    }

    #[test]
    fn tsv_kinds() {
        let ds = parse_tsv(&b"# u i t k\na\tx\t5\nb\ty\t6\texposure\n"[..], "t").unwrap();
        assert_eq!(ds.interactions[0].kind, InteractionKind::Click);
        assert_eq!(ds.interactions[1].kind, InteractionKind::Exposure);
        assert!(parse_tsv(&b"a\tb\t1\tmaybe\n"[..], "t").is_err());
    }

    #[test]
    fn id_map_round_trips_through_tsv() {
        let mut m = IdMap::default();
        for raw in ["10", "3", "10", "alpha"] {
            m.intern(raw);
        }
        let mut buf = Vec::new();
        m.write_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "0\t10\n1\t3\n2\talpha\n");
        assert_eq!(IdMap::read_tsv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn twenty_clicks_split_ten_five_five() {
        let u = user_with(20);
        assert_eq!(u.slow().len(), 10);
        assert_eq!(u.fast(), &[10, 11, 12, 13, 14]);
        assert_eq!(u.test(), &[15, 16, 17, 18, 19]);
        assert!(u.is_temporally_sound());
    }

    #[test]
    fn short_users_are_dropped() {
        // 25 users with 20 clicks over 20 shared items, one user with 19.
        let mut lines = String::new();
        for u in 0..25 {
            for i in 0..20 {
                lines.push_str(&format!("{u}::{i}::1::{}\n", 100 + i));
            }
        }
        for i in 0..19 {
            lines.push_str(&format!("99::{i}::1::{}\n", 100 + i));
        }
        let ds = parse_ml1m(lines.as_bytes()).unwrap();
        let split = phase_split(&ds, 20);
        assert_eq!(split.users.len(), 25);
        assert_eq!(split.dropped_users, 1);
        assert!(split.users.iter().all(|u| u.len() == 20));
    }

    #[test]
    fn filtering_iterates_until_stable() {
        // Item 20 is rare; dropping it pushes user 0 below the floor, which
        // in turn drops item 21 (only user 0 and 19 others click it).
        let mut lines = String::new();
        for i in 0..20 {
            lines.push_str(&format!("0::{i}::1::{i}\n"));
        }
        lines.push_str("0::20::1::30\n");
        for u in 1..=30 {
            for i in 0..20 {
                lines.push_str(&format!("{u}::{i}::1::{i}\n"));
            }
        }
        let ds = parse_ml1m(lines.as_bytes()).unwrap();
        let split = phase_split(&ds, 20);
        assert_eq!(split.users.len(), 31);
        assert_eq!(split.dropped_items, 1);
        assert!(split.users.iter().all(|u| !u.items.contains(&ds.items.dense("20").unwrap())));
    }

    #[test]
    fn ties_keep_file_order() {
        let mut lines = String::new();
        for u in 0..21 {
            for i in 0..21 {
                // identical timestamps everywhere
                lines.push_str(&format!("{u}::{i}::1::5\n"));
            }
        }
        let ds = parse_ml1m(lines.as_bytes()).unwrap();
        let split = phase_split(&ds, 20);
        assert_eq!(split.users[0].items, (0..21).collect::<Vec<u32>>());
    }

    #[test]
    fn negatives_avoid_history_and_are_deterministic() {
        let ds = synthetic_clusters(40, 100, 4, 25, 1);
        let split = phase_split(&ds, 20);
        let a = sample_negatives(&split, 1, 50, 9).unwrap();
        let b = sample_negatives(&split, 1, 50, 9).unwrap();
        assert_eq!(a, b);
        for (u, negs) in split.users.iter().zip(&a) {
            for list in negs.eval.iter() {
                assert_eq!(list.len(), 50);
                let distinct: HashSet<_> = list.iter().collect();
                assert_eq!(distinct.len(), 50);
                assert!(list.iter().all(|i| !u.items.contains(i)));
            }
            assert_eq!(negs.slow.len(), u.slow().len());
            assert_eq!(negs.fast.len(), PHASE_LEN);
        }
    }

    #[test]
    fn exhausted_user_is_rejected() {
        let universe = [1, 2, 3];
        let mut s = NegativeSampler::new(&universe, &[1, 2], 0, 0);
        assert_eq!(s.sample(1, &[]).unwrap(), vec![3]);
        assert!(matches!(
            s.sample(2, &[]),
            Err(DataError::Exhausted { user: 0, needed: 2, available: 1 })
        ));
    }

    #[test]
    fn no_exposures_when_k_is_zero() {
        let universe: Vec<u32> = (0..50).collect();
        let mut s = NegativeSampler::new(&universe, &[0, 1], 3, 0);
        let params = ExposureParams {
            pool_size: 20,
            expose_k: 0,
        };
        let out = simulate_exposures(params, &mut s, 3, 0, Some(5), |_| unreachable!()).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn exposures_are_top_scored_pool_items() {
        let universe: Vec<u32> = (0..50).collect();
        let mut s = NegativeSampler::new(&universe, &[0, 1, 2], 3, 4);
        let out = simulate_exposures(ExposureParams::default(), &mut s, 3, 77, Some(49), |pool| {
            Ok(pool.iter().map(|&i| i as f64).collect())
        })
        .unwrap();
        assert_eq!(out.len(), 4);
        let items: Vec<u32> = out.iter().map(|e| e.item).collect();
        assert!(items.windows(2).all(|w| w[0] > w[1]));
        assert!(items.iter().all(|i| *i > 2 && *i != 49));
        assert!(out.iter().all(|e| e.kind == InteractionKind::Exposure && e.timestamp == 77));
    }

    #[test]
    fn logged_exposures_attach_to_fast_events() {
        let mut u = user_with(20);
        u.exposures = vec![(9, 100), (10, 101), (10, 102), (12, 103), (15, 104)];
        assert_eq!(u.logged_exposures_after_fast(0), vec![101, 102]);
        assert_eq!(u.logged_exposures_after_fast(2), vec![103]);
        assert_eq!(u.logged_exposures_after_fast(4), Vec::<u32>::new());
    }
}
