//! Training, evaluation, and the three standard experiments.
//!
//! A sample is a (chip, description) pair with a yes/no label. Pair lists
//! are built once per run: every chip contributes one positive pair and
//! `neg_per_pos` negatives whose descriptions are drawn without replacement
//! from the allowed classes. Training then reshuffles the fixed list each
//! epoch. Pair sampling, epoch shuffles, and model initialization all derive
//! from one config seed, so a run is reproducible bit for bit.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::chipgen::{chip_tensor_values, ChipError, LoadedDataset, Split};
use crate::model::{build_model, Decision, ModelError, VtmConfig, VtmModel};
use crate::seeding;
use crate::tensor::{sgd_step, Tape, Tensor, TensorError};
use crate::text::{all_classes, encode_bow, ClassDescription, TextError, VehicleType};

/// Seed stream indices. Epoch shuffles use the epoch number directly, so the
/// side streams sit at the top of the index space where no epoch count can
/// reach them.
const MODEL_SEED_INDEX: u64 = u64::MAX;
const EVAL_SEED_INDEX: u64 = u64::MAX - 1;
const TRAIN_PAIR_SEED_INDEX: u64 = u64::MAX - 2;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Chip(#[from] ChipError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("no pairs to train on")]
    NoTrainPairs,
    #[error("no pairs to evaluate")]
    NoEvalPairs,
    #[error("evaluation pairs contain no positives, so tpr is undefined")]
    NoPositivePairs,
    #[error("evaluation pairs contain no negatives, so tnr is undefined")]
    NoNegativePairs,
    #[error("chip class {0} is not in the allowed class list")]
    ChipClassNotInUniverse(ClassDescription),
    #[error("cannot draw {requested} distinct negative descriptions from {available} other classes")]
    NegPool { requested: usize, available: usize },
    #[error("dataset chips are {chips}px but the model expects {model}px")]
    SizeMismatch { chips: usize, model: usize },
    #[error("batch size must be positive")]
    BadBatchSize,
    #[error("epoch count must be positive")]
    BadEpochs,
    #[error("neg_per_pos must be positive")]
    BadNegPerPos,
    #[error("scatter plots need 2-d embeddings, got {0} dims")]
    EmbeddingNot2d(usize),
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub neg_per_pos: usize,
    pub seed: u64,
    pub model: VtmConfig,
}

impl TrainConfig {
    /// The stock recipe: 30 epochs of SGD at 0.01 on balanced pairs, with
    /// the narrow trunk. The model draws its weights from a side stream of
    /// the same seed.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            neg_per_pos: 1,
            seed,
            model: VtmConfig::tiny(seeding::derive(seed, MODEL_SEED_INDEX)),
        }
    }

    fn validate(&self) -> Result<(), ExperimentError> {
        if self.epochs == 0 {
            return Err(ExperimentError::BadEpochs);
        }
        if self.batch_size == 0 {
            return Err(ExperimentError::BadBatchSize);
        }
        if self.neg_per_pos == 0 {
            return Err(ExperimentError::BadNegPerPos);
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::with_seed(0)
    }
}

/// Yes/no confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Metrics {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Metrics {
    pub fn record(&mut self, label: bool, said_yes: bool) {
        match (label, said_yes) {
            (true, true) => self.tp += 1,
            (true, false) => self.fn_ += 1,
            (false, true) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn merge(&mut self, other: Metrics) {
        self.tp += other.tp;
        self.tn += other.tn;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Yes-recall: matching pairs answered yes.
    pub fn tpr(&self) -> f64 {
        self.tp as f64 / (self.tp + self.fn_) as f64
    }

    /// No-recall: mismatched pairs answered no.
    pub fn tnr(&self) -> f64 {
        self.tn as f64 / (self.tn + self.fp) as f64
    }
}

/// One labeled query against one chip (indexed into a [`LoadedDataset`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub chip: usize,
    pub query: ClassDescription,
    pub label: bool,
}

/// Distinct classes among the chosen chips, in canonical class order.
pub fn class_universe(dataset: &LoadedDataset, indices: &[usize]) -> Vec<ClassDescription> {
    let mut classes: Vec<ClassDescription> =
        indices.iter().map(|&i| dataset.chips[i].record.class).collect();
    classes.sort();
    classes.dedup();
    classes
}

/// Builds the labeled pair list for a set of chips: per chip, one positive
/// and `neg_per_pos` distinct negatives drawn from `classes` minus the true
/// class, then one shuffle. Every chip's class must itself be in `classes`.
/// With `neg_per_pos == classes.len() - 1` the negatives are exhaustive and
/// the seed only affects order.
pub fn make_pairs(
    dataset: &LoadedDataset,
    indices: &[usize],
    classes: &[ClassDescription],
    neg_per_pos: usize,
    seed: u64,
) -> Result<Vec<PairSample>, ExperimentError> {
    if neg_per_pos == 0 {
        return Err(ExperimentError::BadNegPerPos);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(indices.len() * (1 + neg_per_pos));
    let mut pool = Vec::with_capacity(classes.len());
    for &chip in indices {
        let truth = dataset.chips[chip].record.class;
        if !classes.contains(&truth) {
            return Err(ExperimentError::ChipClassNotInUniverse(truth));
        }
        pairs.push(PairSample {
            chip,
            query: truth,
            label: true,
        });
        pool.clear();
        pool.extend(classes.iter().copied().filter(|&c| c != truth));
        if neg_per_pos > pool.len() {
            return Err(ExperimentError::NegPool {
                requested: neg_per_pos,
                available: pool.len(),
            });
        }
        // Partial Fisher-Yates: the first neg_per_pos slots end up holding a
        // uniform draw without replacement.
        for k in 0..neg_per_pos {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
            pairs.push(PairSample {
                chip,
                query: pool[k],
                label: false,
            });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

/// The pair list the train split is fitted on: `neg_per_pos` negatives per
/// chip, drawn from the classes present in the split, seeded from the config.
pub fn training_pairs(
    dataset: &LoadedDataset,
    config: &TrainConfig,
) -> Result<Vec<PairSample>, ExperimentError> {
    let train_idx = dataset.indices_in(Split::Train);
    let universe = class_universe(dataset, &train_idx);
    make_pairs(
        dataset,
        &train_idx,
        &universe,
        config.neg_per_pos,
        seeding::derive(config.seed, TRAIN_PAIR_SEED_INDEX),
    )
}

/// Exhaustive evaluation pairs: every chip is probed with every class in
/// `universe`, so only the order depends on the seed.
pub fn exhaustive_pairs(
    dataset: &LoadedDataset,
    indices: &[usize],
    universe: &[ClassDescription],
    seed: u64,
) -> Result<Vec<PairSample>, ExperimentError> {
    make_pairs(
        dataset,
        indices,
        universe,
        universe.len().saturating_sub(1),
        seeding::derive(seed, EVAL_SEED_INDEX),
    )
}

/// Planar pixel values for each chip mentioned by the pairs, keyed by
/// dataset index.
fn cache_chip_values(dataset: &LoadedDataset, pairs: &[PairSample]) -> HashMap<usize, Vec<f64>> {
    let mut values = HashMap::new();
    for pair in pairs {
        values.entry(pair.chip).or_insert_with(|| {
            let chip = &dataset.chips[pair.chip];
            chip_tensor_values(&chip.pixels, chip.size)
        });
    }
    values
}

fn batch_tensors(
    pairs: &[&PairSample],
    values: &HashMap<usize, Vec<f64>>,
    model: &VtmModel,
) -> Result<(Tensor, Tensor, Vec<bool>), ExperimentError> {
    let size = model.config().input_size;
    let vocab = model.vocab();
    let batch = pairs.len();
    let mut chip_data = Vec::with_capacity(batch * 3 * size * size);
    let mut bow_data = Vec::with_capacity(batch * vocab.len());
    let mut labels = Vec::with_capacity(batch);
    for pair in pairs {
        chip_data.extend_from_slice(&values[&pair.chip]);
        bow_data.extend(encode_bow(&pair.query, vocab)?);
        labels.push(pair.label);
    }
    let chips = Tensor::from_values(&[batch, 3, size, size], chip_data)?;
    let bows = Tensor::from_values(&[batch, vocab.len()], bow_data)?;
    Ok((chips, bows, labels))
}

/// Minibatch SGD over the fixed pair list, reshuffled every epoch from the
/// config seed. Returns the mean training loss per epoch. (Epoch losses are
/// accumulated in shuffle order, so a frozen model's curve is flat only to
/// float-summation precision, not bit-exactly.)
pub fn train(
    model: &mut VtmModel,
    dataset: &LoadedDataset,
    pairs: &[PairSample],
    config: &TrainConfig,
) -> Result<Vec<f64>, ExperimentError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(ExperimentError::NoTrainPairs);
    }
    let chip_size = dataset.chip_size()?;
    if chip_size != config.model.input_size {
        return Err(ExperimentError::SizeMismatch {
            chips: chip_size,
            model: config.model.input_size,
        });
    }
    let values = cache_chip_values(dataset, pairs);

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut batch: Vec<&PairSample> = Vec::with_capacity(config.batch_size);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::derive(config.seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &pairs[i]));
            let (chips_t, bows_t, labels) = batch_tensors(&batch, &values, model)?;
            let mut tape = Tape::new();
            let loss = model.pair_loss(&mut tape, &chips_t, &bows_t, &labels)?;
            let loss_value = tape.value_data(loss)?[0];
            if !loss_value.is_finite() {
                return Err(ExperimentError::Diverged { epoch });
            }
            let grads = tape.backward(loss)?;
            let mut params = model.parameters_mut();
            sgd_step(&mut params, &grads, config.learning_rate)?;
            loss_sum += loss_value * chunk.len() as f64;
        }
        curve.push(loss_sum / pairs.len() as f64);
    }
    Ok(curve)
}

/// Per-class and overall confusion counts for one evaluation pass. Classes
/// key on the chip's true class, in canonical order.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub per_class: Vec<(ClassDescription, Metrics)>,
    pub overall: Metrics,
}

/// Scores the model on prebuilt pairs. The pair list must contain at least
/// one positive and one negative, or tpr/tnr would be undefined.
pub fn evaluate(
    model: &mut VtmModel,
    dataset: &LoadedDataset,
    pairs: &[PairSample],
) -> Result<EvalReport, ExperimentError> {
    if pairs.is_empty() {
        return Err(ExperimentError::NoEvalPairs);
    }
    if pairs.iter().all(|p| !p.label) {
        return Err(ExperimentError::NoPositivePairs);
    }
    if pairs.iter().all(|p| p.label) {
        return Err(ExperimentError::NoNegativePairs);
    }
    let size = model.config().input_size;
    let mut by_class: HashMap<ClassDescription, Metrics> = HashMap::new();
    let mut overall = Metrics::default();
    let mut tensors: HashMap<usize, Tensor> = HashMap::new();
    for pair in pairs {
        let chip = &dataset.chips[pair.chip];
        let tensor = match tensors.entry(pair.chip) {
            std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
            std::collections::hash_map::Entry::Vacant(e) => e.insert(Tensor::from_values(
                &[3, size, size],
                chip_tensor_values(&chip.pixels, chip.size),
            )?),
        };
        let (decision, _) = model.predict(tensor, &pair.query)?;
        let said_yes = decision == Decision::Yes;
        by_class
            .entry(chip.record.class)
            .or_default()
            .record(pair.label, said_yes);
        overall.record(pair.label, said_yes);
    }

    let per_class = all_classes()
        .into_iter()
        .filter_map(|c| by_class.get(&c).map(|m| (c, *m)))
        .collect();
    Ok(EvalReport { per_class, overall })
}

/// Outcome of training and scoring on the ordinary train/test split.
pub struct SeenClassOutcome {
    pub model: VtmModel,
    pub curve: Vec<f64>,
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Trains on balanced pairs from the train split of all classes, then scores
/// both splits exhaustively: each evaluation chip is queried with every
/// class in the dataset, so every wrong description is probed.
pub fn run_seen_class(
    dataset: &LoadedDataset,
    config: &TrainConfig,
) -> Result<SeenClassOutcome, ExperimentError> {
    let train_idx = dataset.indices_in(Split::Train);
    let test_idx = dataset.indices_in(Split::Test);
    let universe = class_universe(dataset, &train_idx);
    let train_pairs = training_pairs(dataset, config)?;
    let mut model = build_model(config.model.clone())?;
    let curve = train(&mut model, dataset, &train_pairs, config)?;

    let train_report = evaluate(
        &mut model,
        dataset,
        &exhaustive_pairs(dataset, &train_idx, &universe, config.seed)?,
    )?;
    let test_report = evaluate(
        &mut model,
        dataset,
        &exhaustive_pairs(dataset, &test_idx, &universe, config.seed)?,
    )?;
    Ok(SeenClassOutcome {
        model,
        curve,
        train: train_report,
        test: test_report,
    })
}

/// One leave-one-class-out run.
#[derive(Debug, Clone)]
pub struct OpenSetRow {
    pub held_out: ClassDescription,
    /// Test chips of the thirteen seen classes, queried exhaustively within
    /// those classes.
    pub seen: Metrics,
    /// Test chips of the held-out class: the positive query is the held-out
    /// description the model never trained on; negatives come from the seen
    /// classes, `neg_per_pos` per chip.
    pub held_out_metrics: Metrics,
}

/// All fourteen leave-one-class-out runs plus the yes-rate cross table:
/// `cross[i][j]` is how often run i's model (which never saw class i) says
/// yes when its held-out test chips are queried with class j's description.
pub struct OpenSetOutcome {
    pub rows: Vec<OpenSetRow>,
    pub cross: Vec<Vec<f64>>,
}

pub fn run_open_set(
    dataset: &LoadedDataset,
    config: &TrainConfig,
) -> Result<OpenSetOutcome, ExperimentError> {
    let classes = all_classes();
    let results: Result<Vec<(OpenSetRow, Vec<f64>)>, ExperimentError> = classes
        .par_iter()
        .enumerate()
        .map(|(k, &held_out)| {
            // Training sees neither chips of the held-out class nor its
            // description: the pair universe is the seen classes only.
            let train_idx: Vec<usize> = dataset
                .indices_in(Split::Train)
                .into_iter()
                .filter(|&i| dataset.chips[i].record.class != held_out)
                .collect();
            let seen_universe = class_universe(dataset, &train_idx);
            let train_pairs = make_pairs(
                dataset,
                &train_idx,
                &seen_universe,
                config.neg_per_pos,
                seeding::derive(config.seed, TRAIN_PAIR_SEED_INDEX),
            )?;
            let mut model = build_model(config.model.clone())?;
            train(&mut model, dataset, &train_pairs, config)?;

            let eval_seed = seeding::derive(config.seed, EVAL_SEED_INDEX);
            let seen_idx: Vec<usize> = dataset
                .indices_in(Split::Test)
                .into_iter()
                .filter(|&i| dataset.chips[i].record.class != held_out)
                .collect();
            let seen = evaluate(
                &mut model,
                dataset,
                &exhaustive_pairs(dataset, &seen_idx, &seen_universe, config.seed)?,
            )?
            .overall;

            let held_idx: Vec<usize> = dataset
                .indices_in(Split::Test)
                .into_iter()
                .filter(|&i| dataset.chips[i].record.class == held_out)
                .collect();
            if held_idx.is_empty() {
                return Err(ExperimentError::NoEvalPairs);
            }
            // Full universe: the positive query is the held-out description
            // itself, negatives land on the seen classes.
            let held = evaluate(
                &mut model,
                dataset,
                &make_pairs(
                    dataset,
                    &held_idx,
                    &classes,
                    config.neg_per_pos,
                    seeding::derive(eval_seed, k as u64),
                )?,
            )?
            .overall;

            let size = model.config().input_size;
            let mut yes_rates = vec![0.0f64; classes.len()];
            for &i in &held_idx {
                let chip = &dataset.chips[i];
                let tensor = Tensor::from_values(
                    &[3, size, size],
                    chip_tensor_values(&chip.pixels, chip.size),
                )?;
                for (j, query) in classes.iter().enumerate() {
                    let (decision, _) = model.predict(&tensor, query)?;
                    if decision == Decision::Yes {
                        yes_rates[j] += 1.0;
                    }
                }
            }
            for rate in &mut yes_rates {
                *rate /= held_idx.len() as f64;
            }
            Ok((
                OpenSetRow {
                    held_out,
                    seen,
                    held_out_metrics: held,
                },
                yes_rates,
            ))
        })
        .collect();
    let results = results?;
    let mut rows = Vec::with_capacity(results.len());
    let mut cross = Vec::with_capacity(results.len());
    for (row, rates) in results {
        rows.push(row);
        cross.push(rates);
    }
    Ok(OpenSetOutcome { rows, cross })
}

/// Outcome of the text-embedding experiment: the trained model plus one
/// embedding vector per class.
pub struct EmbeddingOutcome {
    pub model: VtmModel,
    pub curve: Vec<f64>,
    pub points: Vec<(ClassDescription, Vec<f64>)>,
}

/// Trains exactly as the seen-class experiment does, then reads out the
/// text-branch embedding of all fourteen descriptions. Configure a two-wide
/// final text layer to get plottable coordinates.
pub fn run_embedding(
    dataset: &LoadedDataset,
    config: &TrainConfig,
) -> Result<EmbeddingOutcome, ExperimentError> {
    let train_idx = dataset.indices_in(Split::Train);
    let universe = class_universe(dataset, &train_idx);
    let train_pairs = make_pairs(
        dataset,
        &train_idx,
        &universe,
        config.neg_per_pos,
        seeding::derive(config.seed, TRAIN_PAIR_SEED_INDEX),
    )?;
    let mut model = build_model(config.model.clone())?;
    let curve = train(&mut model, dataset, &train_pairs, config)?;
    let mut points = Vec::with_capacity(14);
    for class in all_classes() {
        let emb = model.text_embedding(&class)?;
        points.push((class, emb));
    }
    Ok(EmbeddingOutcome {
        model,
        curve,
        points,
    })
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

/// Parses a `key = value` config file. `#` starts a comment; blank lines are
/// skipped; keys may appear at most once and unknown keys are errors. The
/// line order never matters: `preset` (tiny or full) is applied first, then
/// the model overrides
/// (`input_size`, `visual_dim`, `fusion_dim`, `text_dims`), then the
/// training fields (`epochs`, `batch_size`, `learning_rate`, `neg_per_pos`,
/// `seed`). The model's init seed always derives from the run seed.
pub fn parse_train_config(text: &str) -> Result<TrainConfig, ExperimentError> {
    let mut seen: HashMap<String, (usize, String)> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| ExperimentError::Config {
            line: lineno + 1,
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err("expected `key = value`".into()))?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        const KEYS: [&str; 10] = [
            "epochs",
            "batch_size",
            "learning_rate",
            "neg_per_pos",
            "seed",
            "preset",
            "input_size",
            "visual_dim",
            "fusion_dim",
            "text_dims",
        ];
        if !KEYS.contains(&key.as_str()) {
            return Err(err(format!("unknown key `{key}`")));
        }
        if seen.contains_key(&key) {
            return Err(err(format!("duplicate key `{key}`")));
        }
        seen.insert(key, (lineno + 1, value));
    }

    fn take<T: std::str::FromStr>(
        seen: &HashMap<String, (usize, String)>,
        key: &str,
        what: &str,
    ) -> Result<Option<T>, ExperimentError> {
        match seen.get(key) {
            None => Ok(None),
            Some((line, value)) => value.parse::<T>().map(Some).map_err(|_| {
                ExperimentError::Config {
                    line: *line,
                    message: format!("`{key}` needs {what}, got `{value}`"),
                }
            }),
        }
    }

    let mut config = TrainConfig::default();
    if let Some((line, preset)) = seen.get("preset") {
        config.model = match preset.as_str() {
            "tiny" => VtmConfig::tiny(0),
            "full" => VtmConfig::full(0),
            other => {
                return Err(ExperimentError::Config {
                    line: *line,
                    message: format!("`preset` must be tiny or full, got `{other}`"),
                })
            }
        };
    }
    if let Some(v) = take::<usize>(&seen, "input_size", "a positive integer")? {
        config.model.input_size = v;
    }
    if let Some(v) = take::<usize>(&seen, "visual_dim", "a positive integer")? {
        config.model.visual_dim = v;
    }
    if let Some(v) = take::<usize>(&seen, "fusion_dim", "a positive integer")? {
        config.model.fusion_dim = v;
    }
    if let Some((line, value)) = seen.get("text_dims") {
        let dims: Result<Vec<usize>, _> =
            value.split(',').map(|p| p.trim().parse::<usize>()).collect();
        config.model.text_dims = dims.map_err(|_| ExperimentError::Config {
            line: *line,
            message: format!("`text_dims` needs comma-separated positive integers, got `{value}`"),
        })?;
    }
    if let Some(v) = take::<usize>(&seen, "epochs", "a positive integer")? {
        config.epochs = v;
    }
    if let Some(v) = take::<usize>(&seen, "batch_size", "a positive integer")? {
        config.batch_size = v;
    }
    if let Some(v) = take::<f64>(&seen, "learning_rate", "a number")? {
        config.learning_rate = v;
    }
    if let Some(v) = take::<usize>(&seen, "neg_per_pos", "a positive integer")? {
        config.neg_per_pos = v;
    }
    if let Some(v) = take::<u64>(&seen, "seed", "an unsigned integer")? {
        config.seed = v;
    }
    config.model.seed = seeding::derive(config.seed, MODEL_SEED_INDEX);
    config.model.validate()?;
    config.validate()?;
    Ok(config)
}

pub fn read_train_config(path: &Path) -> Result<TrainConfig, ExperimentError> {
    let text = std::fs::read_to_string(path)?;
    parse_train_config(&text)
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

fn preset_name(model: &VtmConfig) -> &'static str {
    let mut probe = VtmConfig::full(model.seed);
    probe.input_size = model.input_size;
    probe.visual_dim = model.visual_dim;
    probe.fusion_dim = model.fusion_dim;
    probe.text_dims = model.text_dims.clone();
    if probe.block_depths == model.block_depths {
        return "full";
    }
    probe.block_depths = VtmConfig::tiny(0).block_depths;
    if probe.block_depths == model.block_depths {
        return "tiny";
    }
    "custom"
}

fn text_dims_string(model: &VtmConfig) -> String {
    model
        .text_dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// The config in file syntax: feeding this back through
/// [`parse_train_config`] reproduces the config, as long as the model uses a
/// preset trunk.
pub fn config_file_text(config: &TrainConfig) -> String {
    format!(
        "epochs = {}\nbatch_size = {}\nlearning_rate = {}\nneg_per_pos = {}\n\
         seed = {}\npreset = {}\ninput_size = {}\nvisual_dim = {}\n\
         fusion_dim = {}\ntext_dims = {}\n",
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.neg_per_pos,
        config.seed,
        preset_name(&config.model),
        config.model.input_size,
        config.model.visual_dim,
        config.model.fusion_dim,
        text_dims_string(&config.model),
    )
}

/// Leading `# key = value` comment lines that make a report self-describing.
fn config_echo(config: &TrainConfig) -> String {
    config_file_text(config)
        .lines()
        .map(|l| format!("# {l}\n"))
        .collect()
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

/// Loss-per-epoch curve.
pub fn write_curve_csv(
    path: &Path,
    config: &TrainConfig,
    curve: &[f64],
) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(config_echo(config).as_bytes())?;
    writeln!(w, "epoch,loss")?;
    for (epoch, loss) in curve.iter().enumerate() {
        writeln!(w, "{epoch},{}", f6(*loss))?;
    }
    Ok(w.flush()?)
}

fn eval_row(w: &mut impl IoWrite, name: &str, m: &Metrics) -> std::io::Result<()> {
    writeln!(
        w,
        "{name},{},{},{},{},{},{},{},{}",
        m.total(),
        m.tp,
        m.tn,
        m.fp,
        m.fn_,
        f6(m.accuracy()),
        f6(m.tpr()),
        f6(m.tnr()),
    )
}

/// Per-class rows plus an `overall` row.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "class,pairs,tp,tn,fp,fn,accuracy,tpr,tnr")?;
    for (class, metrics) in &report.per_class {
        eval_row(&mut w, &class.to_string(), metrics)?;
    }
    eval_row(&mut w, "overall", &report.overall)?;
    Ok(w.flush()?)
}

/// One row per held-out class.
pub fn write_open_set_csv(
    path: &Path,
    config: &TrainConfig,
    outcome: &OpenSetOutcome,
) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(config_echo(config).as_bytes())?;
    writeln!(
        w,
        "held_out,seen_accuracy,seen_tpr,seen_tnr,held_out_accuracy,held_out_tpr,held_out_tnr"
    )?;
    for row in &outcome.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.held_out,
            f6(row.seen.accuracy()),
            f6(row.seen.tpr()),
            f6(row.seen.tnr()),
            f6(row.held_out_metrics.accuracy()),
            f6(row.held_out_metrics.tpr()),
            f6(row.held_out_metrics.tnr()),
        )?;
    }
    Ok(w.flush()?)
}

/// The 14x14 yes-rate table: chips of the row's held-out class queried with
/// every column description, under the model that never saw the row class.
pub fn write_cross_csv(path: &Path, outcome: &OpenSetOutcome) -> Result<(), ExperimentError> {
    let classes = all_classes();
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
    writeln!(w, "chip_class,{}", header.join(","))?;
    for (row, rates) in outcome.rows.iter().zip(&outcome.cross) {
        let cells: Vec<String> = rates.iter().map(|&r| f6(r)).collect();
        writeln!(w, "{},{}", row.held_out, cells.join(","))?;
    }
    Ok(w.flush()?)
}

/// One row per class with its embedding coordinates.
pub fn write_embedding_csv(
    path: &Path,
    config: &TrainConfig,
    points: &[(ClassDescription, Vec<f64>)],
) -> Result<(), ExperimentError> {
    let dims = points.first().map_or(0, |(_, v)| v.len());
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(config_echo(config).as_bytes())?;
    let header: Vec<String> = (0..dims).map(|d| format!("dim{d}")).collect();
    writeln!(w, "class,{}", header.join(","))?;
    for (class, emb) in points {
        let cells: Vec<String> = emb.iter().map(|&x| f6(x)).collect();
        writeln!(w, "{},{}", class, cells.join(","))?;
    }
    Ok(w.flush()?)
}

fn palette_hex(class: &ClassDescription) -> String {
    let [r, g, b] = crate::chipgen::palette(class.color);
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Scatter plot of 2-d embeddings: circles are cars, squares are trucks,
/// fills follow the paint palette. Purely textual and deterministic.
pub fn write_embedding_svg(
    path: &Path,
    points: &[(ClassDescription, Vec<f64>)],
) -> Result<(), ExperimentError> {
    for (_, emb) in points {
        if emb.len() != 2 {
            return Err(ExperimentError::EmbeddingNot2d(emb.len()));
        }
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, e) in points {
        xmin = xmin.min(e[0]);
        xmax = xmax.max(e[0]);
        ymin = ymin.min(e[1]);
        ymax = ymax.max(e[1]);
    }
    // Guard degenerate extents so scaling stays finite.
    if !(xmax - xmin).is_normal() {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if !(ymax - ymin).is_normal() {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const SIDE: f64 = 440.0;
    const MARGIN: f64 = 40.0;
    let sx = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (SIDE - 2.0 * MARGIN);
    // SVG y grows downward; flip so larger embedding y plots higher.
    let sy = |y: f64| SIDE - MARGIN - (y - ymin) / (ymax - ymin) * (SIDE - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIDE}\" height=\"{SIDE}\" \
         viewBox=\"0 0 {SIDE} {SIDE}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{SIDE}\" height=\"{SIDE}\" fill=\"#f8f8f4\"/>\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"{m}\" y=\"{m}\" width=\"{s}\" height=\"{s}\" fill=\"none\" \
         stroke=\"#999999\" stroke-width=\"1\"/>\n",
        m = MARGIN,
        s = SIDE - 2.0 * MARGIN
    ));
    for (class, e) in points {
        let (x, y) = (sx(e[0]), sy(e[1]));
        let fill = palette_hex(class);
        match class.vehicle_type {
            VehicleType::Car => svg.push_str(&format!(
                "  <circle cx=\"{}\" cy=\"{}\" r=\"7\" fill=\"{fill}\" stroke=\"#222222\" \
                 stroke-width=\"1.5\"><title>{class}</title></circle>\n",
                f6(x),
                f6(y)
            )),
            VehicleType::Truck => svg.push_str(&format!(
                "  <rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{fill}\" \
                 stroke=\"#222222\" stroke-width=\"1.5\"><title>{class}</title></rect>\n",
                f6(x - 6.0),
                f6(y - 6.0)
            )),
        }
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"9\" font-family=\"sans-serif\" \
             fill=\"#333333\">{class}</text>\n",
            f6(x + 9.0),
            f6(y + 3.0)
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}
