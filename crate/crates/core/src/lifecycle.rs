//! The collaborative lifecycle: slow training, downloads to devices, the
//! fast-phase event stream with scheduled uploads and slow refreshes, fast
//! training, and evaluation of both components.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, DatasetFormat, ExperimentConfig, ExposureSource, Variant};
use crate::data::{
    load_ml1m, load_tsv, phase_split, Dataset, sample_negatives, simulate_exposures, synthetic_clusters, DataError,
    NegativeSampler, PhaseSplit, UserNegatives, UserSplit, PHASE_LEN,
};
use crate::error::Error;
use crate::eval::{fast_test_context, hr_at_k, mrr, ndcg_at_k, rank_candidates, slow_test_context, EvalError, RankingResult};
use crate::exchange::{gru_sync_message, Decision, ExchangeError, Link, MessageKind, RoundGuard, Scheduler};
use crate::fast::{EmbeddingSlice, FastConfig, FastModel, NegativeMemory, NegativeMemoryExport};
use crate::optim::AdamConfig;
use crate::results::RunRecord;
use crate::slow::{InterestExport, Mode, SlowConfig, SlowModel};
use crate::train::{
    slow_examples, DeviceView, FastExample, FastTrainer, FitReport, Memories, SlowData, SlowExample, SlowTrainer,
    TrainConfig,
};

/// Precision used for experiment runs.
pub type Float = f32;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] Error),
    #[error(transparent)]
    Exchange(#[from] ExchangeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub struct Prepared {
    pub dataset: String,
    pub split: PhaseSplit,
}

pub fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, RunError> {
    Ok(match config.format {
        DatasetFormat::Ml1m => load_ml1m(config.dataset.as_ref())?,
        DatasetFormat::Tsv => load_tsv(config.dataset.as_ref())?,
        DatasetFormat::Synthetic => synthetic_clusters(
            config.synthetic_users,
            config.synthetic_items,
            config.synthetic_clusters,
            config.synthetic_len,
            config.seed,
        ),
    })
}

/// Load the configured dataset and split it.
pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, RunError> {
    let ds = load_dataset(config)?;
    let mut split = phase_split(&ds, config.min_len);
    if config.max_users > 0 {
        split.truncate_users(config.max_users);
    }
    Ok(Prepared {
        dataset: ds.name,
        split,
    })
}

/// Independent sub-seed for one consumer of randomness.
fn derive(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const TAG_NEGATIVES: u64 = 1;
const TAG_SLOW_INIT: u64 = 2;
const TAG_SLOW_ORDER: u64 = 3;
const TAG_FAST_INIT: u64 = 4;
const TAG_FAST_ORDER: u64 = 5;
const TAG_EXPOSURE: u64 = 6;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub variant: Variant,
    pub seed: u64,
    pub records: Vec<RunRecord>,
    /// Encoded device-to-cloud frames, in send order.
    pub uplink: Vec<Vec<u8>>,
    pub downlink: Vec<Vec<u8>>,
    pub uploads: BTreeMap<u32, usize>,
    pub slow_fit: FitReport,
    pub fast_losses: Vec<f64>,
}

impl RunOutcome {
    pub fn messages(&self) -> usize {
        self.uplink.len() + self.downlink.len()
    }

    pub fn message_kinds(&self) -> BTreeMap<MessageKind, usize> {
        let mut all = crate::exchange::count_kinds(&self.uplink);
        for (k, n) in crate::exchange::count_kinds(&self.downlink) {
            *all.entry(k).or_default() += n;
        }
        all.into_iter().collect()
    }
}

fn slow_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        batch_size: config.batch_size,
        adam: AdamConfig {
            lr: config.lr,
            l2: config.l2,
            ..AdamConfig::default()
        },
        epochs: config.slow_epochs,
        patience: config.patience,
    }
}

fn fast_train_config(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        epochs: config.fast_epochs,
        ..slow_train_config(config)
    }
}

#[derive(Clone)]
struct Pretrained {
    model: SlowModel<Float>,
    trainer: SlowTrainer<Float>,
    report: FitReport,
}

fn pretrain(config: &ExperimentConfig, vocab: usize, mode: Mode, data: &SlowData, seed: u64) -> Result<Pretrained, RunError> {
    let slow_config = SlowConfig {
        head_hidden: config.head_hidden(),
        ..SlowConfig::new(vocab, config.dim)
    };
    let mut model = SlowModel::new(slow_config, mode, derive(seed, TAG_SLOW_INIT));
    let mut trainer = SlowTrainer::new(&model, slow_train_config(config), derive(seed, TAG_SLOW_ORDER));
    // Before any upload the interactive path sees a zero negative memory.
    let report = trainer.fit(&mut model, data, &Memories::new())?;
    log::info!(
        "slow {:?} seed {seed}: best epoch {} of {}",
        mode,
        report.best_epoch,
        report.valid_loss.len()
    );
    Ok(Pretrained { model, trainer, report })
}

/// Run every configured variant for every seed.
pub fn run_lifecycle(config: &ExperimentConfig, prepared: &Prepared, timing: bool) -> Result<Vec<RunOutcome>, RunError> {
    config.validate()?;
    let mut out = Vec::new();
    for seed in config.seed_list() {
        let negatives = sample_negatives(
            &prepared.split,
            config.n_train_neg,
            config.n_eval_neg,
            derive(seed, TAG_NEGATIVES),
        )?;
        let data = slow_examples(&prepared.split, &negatives, config.max_history, config.slow_positions);
        // f2s and s2f_full start from the same interactive slow model.
        let mut independent: Option<Pretrained> = None;
        let mut interactive: Option<Pretrained> = None;
        for &variant in &config.variants {
            // No clock on wasm32; only read it when asked.
            let start = timing.then(Instant::now);
            let (slot, mode) = if variant.uploads() {
                (&mut interactive, Mode::Interactive)
            } else {
                (&mut independent, Mode::Independent)
            };
            if slot.is_none() {
                *slot = Some(pretrain(config, prepared.split.vocab, mode, &data, seed)?);
            }
            let pre = slot.clone().expect("pretrained above");
            let mut outcome = run_variant(config, prepared, &negatives, &data, pre, variant, seed)?;
            if let Some(start) = start {
                let secs = start.elapsed().as_secs_f64();
                outcome.records.iter_mut().for_each(|r| r.wall_seconds = secs);
            }
            out.push(outcome);
        }
    }
    Ok(out)
}

struct Cloud {
    model: SlowModel<Float>,
    trainer: SlowTrainer<Float>,
    memories: Memories<Float>,
    guard: RoundGuard,
    rounds: BTreeMap<u32, u32>,
    by_user: BTreeMap<u32, Vec<SlowExample>>,
    max_history: usize,
}

impl Cloud {
    fn context(&self, u: &UserSplit) -> Vec<u32> {
        slow_test_context(u.slow(), self.max_history)
    }

    /// Consume one negative-memory upload: store it and run a refresh epoch
    /// over that user's slow-phase examples.
    fn receive_upload(&mut self, frame: Result<crate::exchange::ExchangeMessage, ExchangeError>) -> Result<u32, RunError> {
        let msg = frame?;
        self.guard.accept(msg.user, msg.round)?;
        let upload = NegativeMemoryExport::<Float>::from_message(&msg)?;
        let user = upload.user as u32;
        self.memories.insert(user, upload.r_hat2);
        if let Some(examples) = self.by_user.get(&user) {
            self.trainer.epoch(&mut self.model, examples, &self.memories)?;
        }
        Ok(user)
    }

    /// Send `r_n`/`r_t` and the current `GRU_n` to one device.
    fn send_down(&mut self, link: &mut Link, u: &UserSplit) -> Result<(), RunError> {
        let round = self.rounds.entry(u.user).or_insert(0);
        *round += 1;
        let round = *round;
        let history = self.context(u);
        let anchor = *u.slow().last().expect("slow phase is non-empty");
        let memory = self.memories.get(&u.user).map(Vec::as_slice);
        let interest = self.model.export_interest(u.user as u64, round, &history, anchor, memory)?;
        link.send(&interest.to_message())?;
        link.send(&gru_sync_message(u.user as u64, round, self.model.gru_n_tensors()))?;
        Ok(())
    }
}

#[derive(Default)]
struct Devices {
    slices: BTreeMap<u32, EmbeddingSlice<Float>>,
    priors: BTreeMap<u32, InterestExport<Float>>,
    memories: BTreeMap<u32, NegativeMemory<Float>>,
    /// Exposures recorded after each fast-phase click.
    exposures: BTreeMap<u32, Vec<Vec<u32>>>,
    interest_guard: RoundGuard,
    sync_guard: RoundGuard,
}

impl Devices {
    fn deliver(&mut self, link: &mut Link, fast: &mut FastModel<Float>, cloud: &Cloud) -> Result<(), RunError> {
        while let Some(frame) = link.recv() {
            let msg = frame?;
            let user = msg.user as u32;
            match msg.kind {
                MessageKind::InterestDown => {
                    self.interest_guard.accept(msg.user, msg.round)?;
                    self.priors.insert(user, InterestExport::from_message(&msg)?);
                    if let Some(slice) = self.slices.get_mut(&user) {
                        slice.resync(&cloud.model.store, &cloud.model.embedding)?;
                    }
                }
                MessageKind::GruNSync => {
                    self.sync_guard.accept(msg.user, msg.round)?;
                    msg.validate()?;
                    fast.load_gru_n(&msg.payload)?;
                }
                MessageKind::NegativeMemoryUp => {
                    return Err(ExchangeError::SchemaViolation("upload on the downlink".into()).into());
                }
            }
        }
        Ok(())
    }

    fn request(&mut self, cloud: &Cloud, user: u32, ids: &[u32]) -> Result<(), RunError> {
        let slice = self.slices.get_mut(&user).ok_or(Error::UnknownUser(user))?;
        slice.request(&cloud.model.store, &cloud.model.embedding, ids)?;
        Ok(())
    }

    fn view(&self) -> DeviceView<'_, Float> {
        DeviceView {
            slices: &self.slices,
            priors: &self.priors,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn run_variant(
    config: &ExperimentConfig,
    prepared: &Prepared,
    negatives: &[UserNegatives],
    data: &SlowData,
    pre: Pretrained,
    variant: Variant,
    seed: u64,
) -> Result<RunOutcome, RunError> {
    let split = &prepared.split;
    let d = config.dim;
    let mut by_user: BTreeMap<u32, Vec<SlowExample>> = BTreeMap::new();
    for ex in &data.train {
        by_user.entry(ex.user).or_default().push(ex.clone());
    }
    let mut cloud = Cloud {
        model: pre.model,
        trainer: pre.trainer,
        memories: Memories::new(),
        guard: RoundGuard::default(),
        rounds: BTreeMap::new(),
        by_user,
        max_history: config.max_history,
    };
    let fast_mode = if variant.downloads() {
        Mode::Interactive
    } else {
        Mode::Independent
    };
    let fast_config = FastConfig {
        head_hidden: config.head_hidden(),
        ..FastConfig::new(d)
    };
    let mut fast = FastModel::<Float>::new(fast_config, fast_mode, derive(seed, TAG_FAST_INIT));
    let mut devices = Devices::default();
    let mut up = Link::default();
    let mut down = Link::default();
    let mut scheduler = Scheduler::new(config.threshold)?;
    let mut uploads: BTreeMap<u32, usize> = BTreeMap::new();

    for (u, negs) in split.users.iter().zip(negatives) {
        devices.slices.insert(u.user, EmbeddingSlice::new(d));
        devices.memories.insert(u.user, NegativeMemory::new(d));
        let mut needed: Vec<u32> = u.fast().iter().chain(u.test()).copied().collect();
        needed.extend(negs.fast.iter().flatten());
        needed.extend(negs.eval.iter().flatten());
        devices.request(&cloud, u.user, &needed)?;
    }

    if variant.downloads() {
        for u in &split.users {
            cloud.send_down(&mut down, u)?;
        }
        devices.deliver(&mut down, &mut fast, &cloud)?;
    }

    // Fast-phase event stream, one device at a time.
    for u in &split.users {
        let mut sampler = NegativeSampler::new(&split.items, &u.items, u.user, derive(seed, TAG_EXPOSURE));
        let fast_items = u.fast();
        let fast_ts = &u.timestamps[u.fast_range()];
        let mut events: Vec<Vec<u32>> = Vec::with_capacity(PHASE_LEN);
        for j in 0..PHASE_LEN {
            let next = if j + 1 < PHASE_LEN { fast_items[j + 1] } else { u.test()[0] };
            let shown: Vec<u32> = match config.exposure_source {
                ExposureSource::Simulated => {
                    let clicked = &fast_items[..=j];
                    let seen: Vec<u32> = events.concat();
                    let slice = devices.slices.get_mut(&u.user).ok_or(Error::UnknownUser(u.user))?;
                    let prior = devices.priors.get(&u.user);
                    let exposures = simulate_exposures(config.exposure(), &mut sampler, u.user, fast_ts[j], Some(next), |pool| {
                        slice.request(&cloud.model.store, &cloud.model.embedding, pool)?;
                        fast.score_candidates(slice, clicked, &seen, pool, prior)
                    })?;
                    exposures.into_iter().map(|e| e.item).collect()
                }
                ExposureSource::Column => {
                    let shown = u.logged_exposures_after_fast(j);
                    devices.request(&cloud, u.user, &shown)?;
                    shown
                }
            };
            let memory = devices.memories.get_mut(&u.user).ok_or(Error::UnknownUser(u.user))?;
            memory.accumulate(&shown);
            events.push(shown);

            if variant.uploads() && scheduler.tick(u.user as u64) == Decision::UploadNow {
                let slice = &devices.slices[&u.user];
                let export = fast.export_negative_memory(slice, u.user as u64, memory)?;
                let round = scheduler.next_round(u.user as u64);
                up.send(&export.to_message(round))?;
                *uploads.entry(u.user).or_default() += 1;
                while let Some(frame) = up.recv() {
                    let user = cloud.receive_upload(frame)?;
                    if variant.downloads() {
                        let owner = split.users.iter().find(|s| s.user == user).expect("known user");
                        cloud.send_down(&mut down, owner)?;
                        devices.deliver(&mut down, &mut fast, &cloud)?;
                    }
                }
            }
        }
        devices.exposures.insert(u.user, events);
    }

    // Fast training: predict click j from the clicks and exposures before it.
    let mut examples = Vec::new();
    for (u, negs) in split.users.iter().zip(negatives) {
        let events = &devices.exposures[&u.user];
        for j in 1..PHASE_LEN {
            examples.push(FastExample {
                user: u.user,
                clicked: u.fast()[..j].to_vec(),
                exposed: events[..j].concat(),
                positive: u.fast()[j],
                negatives: negs.fast[j].clone(),
            });
        }
    }
    let mut trainer = FastTrainer::new(&fast, fast_train_config(config), derive(seed, TAG_FAST_ORDER));
    let fast_losses = trainer.fit(&mut fast, &examples, &devices.view())?;

    // Evaluation with both models frozen.
    let mut slow_results: Vec<RankingResult> = Vec::new();
    let mut fast_results: Vec<RankingResult> = Vec::new();
    for (u, negs) in split.users.iter().zip(negatives) {
        let history = cloud.context(u);
        let memory = cloud.memories.get(&u.user).map(Vec::as_slice);
        let exposed: Vec<u32> = devices.exposures[&u.user].concat();
        let slice = &devices.slices[&u.user];
        let prior = devices.priors.get(&u.user);
        for (j, (&positive, eval_negs)) in u.test().iter().zip(&negs.eval).enumerate() {
            slow_results.push(rank_candidates(u.user, positive, eval_negs, |c| {
                cloud.model.score_candidates(&history, c, memory)
            })?);
            let clicked = fast_test_context(u.fast(), u.test(), j);
            fast_results.push(rank_candidates(u.user, positive, eval_negs, |c| {
                fast.score_candidates(slice, &clicked, &exposed, c, prior)
            })?);
        }
    }

    let mut records = Vec::new();
    for (component, results) in [("slow", &slow_results), ("fast", &fast_results)] {
        let mut push = |metric: &str, k: usize, value: f64| {
            records.push(RunRecord {
                dataset: prepared.dataset.clone(),
                variant: variant.name().into(),
                component: component.into(),
                metric: metric.into(),
                k,
                value,
                seed,
                wall_seconds: 0.0,
            })
        };
        for &k in &config.ks {
            push("hr", k, hr_at_k(results, k)?);
            push("ndcg", k, ndcg_at_k(results, k)?);
        }
        push("mrr", 0, mrr(results)?);
    }

    Ok(RunOutcome {
        variant,
        seed,
        records,
        uplink: up.log().to_vec(),
        downlink: down.log().to_vec(),
        uploads,
        slow_fit: pre.report,
        fast_losses,
    })
}
