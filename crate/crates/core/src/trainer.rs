//! The grow-then-prune training loop.
//!
//! Each epoch trains on shuffled mini-batches with momentum SGD while the
//! saliency ledger accumulates. Afterwards the network may grow (every
//! `1/f_growth` epochs while the first layer stays within `tau_capa`) and,
//! once growth has stopped for good, may be pruned (every `1/f_pruning`
//! epochs while training accuracy exceeds `tau_accu`).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{model_costs, Architecture};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::graph::DynamicNetwork;
use crate::nn::softmax_cross_entropy;
use crate::plasticity::{
    grow_network, prune_network, selection_count, GrowthEvent, PlasticityConfig, PruneEvent, SaliencyLedger,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Growth events per epoch; its reciprocal must be a whole number.
    pub f_growth: f64,
    /// Pruning events per epoch; its reciprocal must be a whole number.
    pub f_pruning: f64,
    /// Largest first-layer width growth may produce.
    pub tau_capa: usize,
    /// Training accuracy that must be exceeded before a pruning event.
    pub tau_accu: f64,
    pub baseline_widths: Vec<usize>,
    /// Upper bound on pruning events; `None` prunes at every qualifying epoch.
    pub max_prune_iterations: Option<usize>,
    /// Seed of the mini-batch shuffling stream.
    pub seed: u64,
    pub plasticity: PlasticityConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            f_growth: 1.0 / 3.0,
            f_pruning: 1.0,
            tau_capa: 20,
            tau_accu: 0.98,
            baseline_widths: vec![20, 50, 500, 10],
            max_prune_iterations: None,
            seed: 0,
            plasticity: PlasticityConfig::default(),
        }
    }
}

fn reciprocal_interval(name: &str, f: f64) -> Result<usize> {
    if !(f > 0.0 && f <= 1.0) {
        return Err(Error::Config(format!("{name} = {f} must be in (0, 1]")));
    }
    let inv = 1.0 / f;
    let rounded = inv.round();
    if (inv - rounded).abs() > 1e-3 * rounded {
        return Err(Error::Config(format!(
            "1/{name} = {inv} is not a whole number of epochs"
        )));
    }
    Ok(rounded as usize)
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 = {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum = {} must be in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay = {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.tau_accu > 0.0 && self.tau_accu < 1.0) {
            return Err(Error::Config(format!("tau_accu = {} must be in (0, 1)", self.tau_accu)));
        }
        self.growth_interval()?;
        self.prune_interval()?;
        self.plasticity.validate()
    }

    pub fn growth_interval(&self) -> Result<usize> {
        reciprocal_interval("f_growth", self.f_growth)
    }

    pub fn prune_interval(&self) -> Result<usize> {
        reciprocal_interval("f_pruning", self.f_pruning)
    }
}

/// `lr0 / 10^floor((epoch - 1) / ceil(0.3 * E))`, epochs counted from 1.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let step = (3 * config.epochs).div_ceil(10).max(1);
    let drops = (epoch.max(1) - 1) / step;
    config.lr0 / 10f64.powi(drops as i32)
}

/// True when the first layer can take one more growth step without
/// exceeding `tau_capa`.
pub fn growth_capacity_ok(net: &DynamicNetwork, config: &TrainConfig) -> bool {
    let Some(o1) = net.param_layers().first().and_then(|&l| net.layer(l)?.units()) else {
        return false;
    };
    o1 + selection_count(o1, config.plasticity.beta).max(1) <= config.tau_capa
}

pub fn growth_trigger(epoch: usize, net: &DynamicNetwork, config: &TrainConfig) -> bool {
    let interval = config.growth_interval().unwrap_or(usize::MAX);
    epoch.is_multiple_of(interval) && growth_capacity_ok(net, config)
}

pub fn prune_trigger(epoch: usize, last_train_accuracy: f64, growth_ended: bool, config: &TrainConfig) -> bool {
    let interval = config.prune_interval().unwrap_or(usize::MAX);
    epoch.is_multiple_of(interval) && growth_ended && last_train_accuracy > config.tau_accu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EpochEvent {
    #[default]
    None,
    Grow,
    Prune,
}

impl EpochEvent {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpochEvent::None => "none",
            EpochEvent::Grow => "grow",
            EpochEvent::Prune => "prune",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Running accuracy over the epoch's mini-batches.
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    /// Effective parameters after the epoch's plasticity event.
    pub active_params: usize,
    /// FLOPs of the physical structure after the epoch's plasticity event.
    pub flops: u64,
    pub event: EpochEvent,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// The 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse::<u128>().map_err(|_| bad())?);
        Ok(rng)
    }
}

/// Loop bookkeeping that must survive a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub growth_ended: bool,
    pub prune_iterations: usize,
    pub metrics: Vec<EpochMetrics>,
    pub growth_events: Vec<GrowthEvent>,
    pub prune_events: Vec<PruneEvent>,
}

/// Owns everything that evolves during a run.
#[derive(Debug, Clone)]
pub struct Trainer {
    net: DynamicNetwork,
    ledger: SaliencyLedger,
    config: TrainConfig,
    state: TrainState,
    shuffle_rng: ChaCha8Rng,
    plasticity_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(net: DynamicNetwork, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let violations = net.validate();
        if let Some(v) = violations.first() {
            return Err(Error::Structural(format!("invalid network: {v}")));
        }
        Ok(Self {
            ledger: SaliencyLedger::new(&net),
            shuffle_rng: ChaCha8Rng::seed_from_u64(config.seed),
            plasticity_rng: ChaCha8Rng::seed_from_u64(config.plasticity.rng_seed),
            net,
            config,
            state: TrainState::default(),
        })
    }

    /// Reassembles a trainer from checkpointed parts.
    pub fn from_parts(
        net: DynamicNetwork,
        ledger: SaliencyLedger,
        config: TrainConfig,
        state: TrainState,
        shuffle_rng: ChaCha8Rng,
        plasticity_rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if ledger.revision() != net.revision() {
            return Err(Error::StaleLedger("ledger does not belong to the network".into()));
        }
        Ok(Self {
            net,
            ledger,
            config,
            state,
            shuffle_rng,
            plasticity_rng,
        })
    }

    pub fn net(&self) -> &DynamicNetwork {
        &self.net
    }

    pub fn ledger(&self) -> &SaliencyLedger {
        &self.ledger
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn shuffle_rng(&self) -> &ChaCha8Rng {
        &self.shuffle_rng
    }

    pub fn plasticity_rng(&self) -> &ChaCha8Rng {
        &self.plasticity_rng
    }

    pub fn metrics(&self) -> &[EpochMetrics] {
        &self.state.metrics
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    pub fn into_parts(self) -> (DynamicNetwork, TrainState) {
        (self.net, self.state)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::InvalidInput("dataset is empty".into()));
        }
        if data.sample_shape() != self.net.input_shape() {
            return Err(Error::dim(format!(
                "dataset samples are {:?}, network expects {:?}",
                data.sample_shape(),
                self.net.input_shape()
            )));
        }
        if data.class_count > self.net.class_count() {
            return Err(Error::dim(format!(
                "dataset has {} classes, network outputs {}",
                data.class_count,
                self.net.class_count()
            )));
        }
        Ok(())
    }

    /// Trains one epoch, then applies at most one plasticity event.
    pub fn train_epoch(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        self.check_data(train)?;
        if let Some(t) = test {
            self.check_data(t)?;
        }
        let epoch = self.state.epoch + 1;
        if epoch > self.config.epochs {
            return Err(Error::Precondition(format!(
                "all {} epochs are already done",
                self.config.epochs
            )));
        }
        let lr = lr_at(epoch, &self.config) as f32;
        let (momentum, wd) = (self.config.momentum as f32, self.config.weight_decay as f32);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let (x, y) = train.batch(chunk);
            let trace = self.net.forward_trace(&x)?;
            let (loss, d_logits) = softmax_cross_entropy(trace.logits(), &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss,
                });
            }
            correct += count_correct(trace.logits(), &y);
            loss_sum += loss as f64 * chunk.len() as f64;
            let grads = self.net.backward(&trace, d_logits)?;
            self.ledger.accumulate(&self.net, &grads)?;
            self.net.sgd_step(&grads, lr, momentum, wd)?;
        }
        let train_accuracy = correct as f64 / train.len() as f64;

        let mut event = EpochEvent::None;
        if !self.state.growth_ended && epoch.is_multiple_of(self.config.growth_interval()?) {
            if growth_capacity_ok(&self.net, &self.config) {
                let events = grow_network(
                    &mut self.net,
                    &mut self.ledger,
                    &self.config.plasticity,
                    &mut self.plasticity_rng,
                )?;
                self.state
                    .growth_events
                    .extend(events.into_iter().map(|e| GrowthEvent { epoch, ..e }));
                event = EpochEvent::Grow;
            } else {
                self.state.growth_ended = true;
            }
        }
        let budget_left = self
            .config
            .max_prune_iterations
            .is_none_or(|m| self.state.prune_iterations < m);
        if budget_left && prune_trigger(epoch, train_accuracy, self.state.growth_ended, &self.config) {
            let events = prune_network(&mut self.net, &mut self.ledger, &self.config.plasticity)?;
            self.state
                .prune_events
                .extend(events.into_iter().map(|e| PruneEvent { epoch, ..e }));
            self.state.prune_iterations += 1;
            event = EpochEvent::Prune;
        }

        let test_accuracy = test.map(|t| evaluate(&self.net, t)).transpose()?;
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy,
            test_accuracy,
            active_params: self.net.describe().effective_params,
            flops: model_costs(&Architecture::of(&self.net), false)?.flops,
            event,
        };
        self.state.epoch = epoch;
        self.state.metrics.push(metrics.clone());
        Ok(metrics)
    }

    /// Trains through epoch `until` (capped at the configured total),
    /// reporting each finished epoch to `on_epoch`.
    pub fn run_until<F>(&mut self, train: &Dataset, test: Option<&Dataset>, until: usize, mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochMetrics),
    {
        while self.state.epoch < until.min(self.config.epochs) {
            let m = self.train_epoch(train, test)?;
            on_epoch(self, &m);
        }
        Ok(())
    }

    pub fn run(&mut self, train: &Dataset, test: Option<&Dataset>) -> Result<()> {
        self.run_until(train, test, self.config.epochs, |_, _| {})
    }
}

/// Runs the full schedule and returns the final network and per-epoch metrics.
pub fn train(
    net: DynamicNetwork,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    config: TrainConfig,
) -> Result<(DynamicNetwork, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(net, config)?;
    trainer.run(train_data, test_data)?;
    let (net, state) = trainer.into_parts();
    Ok((net, state.metrics))
}

/// Index of the largest logit in each row; ties go to the lower class.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    predictions(logits).iter().zip(labels).filter(|(p, l)| p == l).count()
}

/// Fraction of samples whose arg-max logit equals the label.
pub fn evaluate(net: &DynamicNetwork, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(500) {
        let (x, y) = data.batch(chunk);
        correct += count_correct(&net.forward(&x)?, &y);
    }
    Ok(correct as f64 / data.len() as f64)
}
