//! Joint training: per-batch feature registration, source classification on
//! the registered features, histogram matching against the target batch, and
//! phased pseudo-label refinement.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::DomainDataset;
use crate::histmatch::{coral_value, histogram_loss, median_bandwidth, mmd_value, HistogramConfig};
use crate::network::{cross_entropy, init_params, Mode, NetworkOptimizer, NetworkParams};
use crate::numerics::{Matrix, Logits};
use crate::pseudolabel::{
    compute_class_centers, select_pseudo_labels, target_loss, PseudoLabelSet, RefinementSchedule,
};
use crate::registration::{register_features, RegistrationConfig, RegistrationInit};

/// Rows drawn from each domain for the per-epoch MMD / CORAL readout.
const READOUT_ROWS: usize = 256;

/// Which network activations feed the histogram matching loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistogramFeatures {
    /// Final `C`-wide outputs.
    #[default]
    Logits,
    /// The 256-wide output of the second hidden block.
    Embedding,
}

impl HistogramFeatures {
    pub fn name(self) -> &'static str {
        match self {
            HistogramFeatures::Logits => "logits",
            HistogramFeatures::Embedding => "embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "logits" => Some(HistogramFeatures::Logits),
            "embedding" => Some(HistogramFeatures::Embedding),
            _ => None,
        }
    }
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Target weight in the registration loss.
    pub alpha: f64,
    /// Weight of the histogram matching loss.
    pub beta: f64,
    /// Number of refinement rounds.
    pub refinement_rounds: usize,
    /// One confidence threshold per round, strictly decreasing.
    pub thresholds: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub seed: u64,
    pub registration_steps: usize,
    pub registration_lr: f64,
    pub registration_tolerance: f64,
    pub registration_init: RegistrationInit,
    pub enable_registration: bool,
    pub enable_histogram: bool,
    pub enable_pseudo: bool,
    pub histogram_features: HistogramFeatures,
    /// Fill the `seconds` metrics column. Off by default so metrics files
    /// are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let reg = RegistrationConfig::default();
        Self {
            alpha: 0.6,
            beta: 0.01,
            refinement_rounds: 3,
            thresholds: vec![0.9, 0.6, 0.3],
            epochs: 210,
            batch_size: 64,
            learning_rate: 0.001,
            bins: 10,
            seed: 0,
            registration_steps: reg.inner_steps,
            registration_lr: reg.inner_lr,
            registration_tolerance: reg.tolerance,
            registration_init: reg.init,
            enable_registration: true,
            enable_histogram: true,
            enable_pseudo: true,
            histogram_features: HistogramFeatures::Logits,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            alpha: self.alpha,
            inner_steps: self.registration_steps,
            inner_lr: self.registration_lr,
            tolerance: self.registration_tolerance,
            init: self.registration_init,
        }
    }

    pub fn histogram(&self) -> HistogramConfig {
        HistogramConfig::with_bins(self.bins)
    }

    pub fn schedule(&self) -> Result<RefinementSchedule> {
        if self.thresholds.len() != self.refinement_rounds {
            return Err(Error::config(format!(
                "{} refinement rounds but {} thresholds",
                self.refinement_rounds,
                self.thresholds.len()
            )));
        }
        RefinementSchedule::new(self.thresholds.clone())
    }

    /// Returns a copy with the three loss toggles set.
    pub fn with_toggles(&self, registration: bool, histogram: bool, pseudo: bool) -> Self {
        Self {
            enable_registration: registration,
            enable_histogram: histogram,
            enable_pseudo: pseudo,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.registration().validate()?;
        self.histogram().validate()?;
        self.schedule()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        Ok(())
    }

    /// Refinement round active during `epoch`: rounds split the epochs into
    /// equal consecutive phases, the last absorbing any remainder.
    pub fn round_of_epoch(&self, epoch: usize) -> usize {
        if self.epochs == 0 {
            return 0;
        }
        let per_round = (self.epochs / self.refinement_rounds).max(1);
        (epoch / per_round).min(self.refinement_rounds - 1)
    }
}

/// Metrics of one epoch. Optional losses are absent when their term is
/// disabled or had nothing to act on.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean final registration loss over the epoch's batches.
    pub registration_loss: Option<f64>,
    /// Mean source classification loss over the epoch's batches.
    pub source_loss: f64,
    pub histogram_loss: Option<f64>,
    pub target_loss: Option<f64>,
    /// Size of the pseudo-labeled set in use.
    pub pseudo_labels: usize,
    pub target_accuracy: Option<f64>,
    pub mmd: f64,
    pub coral: f64,
    pub seconds: f64,
}

/// Pseudo-label selection statistics for one refinement round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub epoch: usize,
    pub threshold: f64,
    pub selected: usize,
    /// Against target labels, when the target set carries them.
    pub precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluated labels.
    pub per_class: Vec<Option<f64>>,
}

/// Accuracy of eval-mode argmax predictions (lowest index on ties).
pub fn evaluate(params: &NetworkParams, dataset: &DomainDataset) -> Result<Evaluation> {
    let labels = dataset.require_labels()?;
    let logits = params.predict(&dataset.features)?;
    Ok(accuracy_of(&logits, labels, params.classes()))
}

fn accuracy_of(logits: &Logits, labels: &[usize], classes: usize) -> Evaluation {
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (r, &y) in labels.iter().enumerate() {
        if y < classes {
            totals[y] += 1;
            if logits.row_argmax(r) == y {
                hits[y] += 1;
            }
        }
    }
    let correct: usize = hits.iter().sum();
    Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
            .collect(),
    }
}

/// Fixed-size batches drawn from a shuffled index order; when the order runs
/// out it is reshuffled and restarted, dropping the incomplete tail.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl BatchStream {
    fn new(n: usize, batch: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: 0,
            batch,
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle(rng);
        }
        let start = self.pos;
        self.pos += self.batch;
        &self.order[start..self.pos]
    }
}

struct Problem<'a> {
    source_labels: &'a [usize],
    target_labels: Option<&'a [usize]>,
    classes: usize,
}

fn check_inputs<'a>(cfg: &TrainConfig, source: &'a DomainDataset, target: &'a DomainDataset) -> Result<Problem<'a>> {
    cfg.validate()?;
    let source_labels = source
        .labels
        .as_deref()
        .ok_or_else(|| Error::config("source dataset must be labeled"))?;
    if source.dim() != target.dim() {
        return Err(Error::config(format!(
            "source has {} features, target has {}",
            source.dim(),
            target.dim()
        )));
    }
    let classes = source.label_count().unwrap_or(0);
    if classes < 2 {
        return Err(Error::config("source must contain at least 2 classes"));
    }
    let mut seen = vec![false; classes];
    source_labels.iter().for_each(|&y| seen[y] = true);
    if let Some(c) = seen.iter().position(|s| !s) {
        return Err(Error::config(format!("class {c} has no source samples")));
    }
    let target_labels = target.labels.as_deref();
    if let Some(y) = target_labels.and_then(|l| l.iter().find(|&&y| y >= classes)) {
        return Err(Error::config(format!(
            "target label {y} is outside the {classes} source classes"
        )));
    }
    let smallest = source.len().min(target.len());
    if cfg.batch_size > smallest {
        return Err(Error::config(format!(
            "batch size {} exceeds the smaller domain ({smallest} samples)",
            cfg.batch_size
        )));
    }
    Ok(Problem {
        source_labels,
        target_labels,
        classes,
    })
}

/// Evenly spaced rows, at most `limit` of them.
fn readout_rows(m: &Matrix, limit: usize) -> Matrix {
    if m.rows() <= limit {
        return m.clone();
    }
    let idx: Vec<usize> = (0..limit).map(|k| k * m.rows() / limit).collect();
    m.select_rows(&idx)
}

/// Runs the full training schedule. Deterministic in `cfg.seed`.
pub fn train(cfg: &TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<(NetworkParams, TrainHistory)> {
    let problem = check_inputs(cfg, source, target)?;
    let mut params = init_params(source.dim(), problem.classes, cfg.seed)?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((params, history));
    }

    let reg_cfg = cfg.registration();
    let hist_cfg = cfg.histogram();
    let schedule = cfg.schedule()?;
    let use_histogram = cfg.enable_histogram && cfg.beta != 0.0;
    let mut optimizer = NetworkOptimizer::new(&params, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));

    let n_b = cfg.batch_size;
    let mut source_stream = BatchStream::new(source.len(), n_b);
    let mut target_stream = BatchStream::new(target.len(), n_b);
    let batches_per_epoch = source.len().max(target.len()) / n_b;

    let mut selection = PseudoLabelSet::default();
    let mut pseudo_stream: Option<BatchStream> = None;
    let mut current_round = None;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let round = cfg.round_of_epoch(epoch);
        if cfg.enable_pseudo && current_round != Some(round) {
            current_round = Some(round);
            let threshold = schedule.threshold(round);
            let source_logits = params.predict(&source.features)?;
            let centers = compute_class_centers(&source_logits, problem.source_labels, problem.classes)?;
            let target_logits = params.predict(&target.features)?;
            selection = select_pseudo_labels(&target_logits, &centers, threshold)?;
            pseudo_stream = (!selection.is_empty()).then(|| BatchStream::new(selection.len(), n_b.min(selection.len())));
            history.rounds.push(RoundRecord {
                round,
                epoch,
                threshold,
                selected: selection.len(),
                precision: problem.target_labels.and_then(|t| selection.precision(t)),
            });
        }

        source_stream.reshuffle(&mut rng);
        target_stream.reshuffle(&mut rng);
        if let Some(s) = pseudo_stream.as_mut() {
            s.reshuffle(&mut rng);
        }

        let mut sum_reg = 0.0;
        let mut sum_src = 0.0;
        let mut sum_hist = 0.0;
        let mut sum_tgt = 0.0;
        let mut tgt_batches = 0usize;

        for _ in 0..batches_per_epoch {
            let s_idx = source_stream.next_batch(&mut rng).to_vec();
            let t_idx = target_stream.next_batch(&mut rng).to_vec();
            let xs = source.features.select_rows(&s_idx);
            let ys: Vec<usize> = s_idx.iter().map(|&i| problem.source_labels[i]).collect();
            let xt = target.features.select_rows(&t_idx);

            // registered features stand in for the source batch
            let input = if cfg.enable_registration {
                let reg = register_features(&xs, &xt, &reg_cfg)?;
                sum_reg += reg.final_loss;
                reg.registered
            } else {
                xs
            };

            let (logits_s, cache_s) = params.forward(&input, Mode::Train)?;
            let (loss_s, mut dlogits_s) = cross_entropy(&logits_s, &ys)?;
            sum_src += loss_s;

            let mut grads = if use_histogram {
                let (logits_t, cache_t) = params.forward(&xt, Mode::Train)?;
                let (grads_s, grads_t, loss_h) = match cfg.histogram_features {
                    HistogramFeatures::Logits => {
                        let h = histogram_loss(&logits_s, &logits_t, &hist_cfg)?;
                        dlogits_s.add_scaled_in_place(&h.grad_registered, cfg.beta);
                        let gs = params.backward(&cache_s, &dlogits_s)?;
                        let gt = params.backward(&cache_t, &h.grad_target.scale(cfg.beta))?;
                        (gs, gt, h.loss)
                    }
                    HistogramFeatures::Embedding => {
                        let h = histogram_loss(cache_s.embedding(), cache_t.embedding(), &hist_cfg)?;
                        let gs = params.backward_with_embedding(
                            &cache_s,
                            &dlogits_s,
                            Some(&h.grad_registered.scale(cfg.beta)),
                        )?;
                        let zero = Matrix::zeros(logits_t.rows(), logits_t.cols());
                        let gt = params.backward_with_embedding(
                            &cache_t,
                            &zero,
                            Some(&h.grad_target.scale(cfg.beta)),
                        )?;
                        (gs, gt, h.loss)
                    }
                };
                sum_hist += loss_h;
                let mut g = grads_s;
                g.accumulate(&grads_t, 1.0);
                g
            } else {
                params.backward(&cache_s, &dlogits_s)?
            };

            if cfg.enable_pseudo {
                if let Some(stream) = pseudo_stream.as_mut() {
                    let positions = stream.next_batch(&mut rng).to_vec();
                    let batch = selection.subset(&positions);
                    if let Some(t) = target_loss(&mut params, &batch, &target.features, n_b)? {
                        sum_tgt += t.loss;
                        tgt_batches += 1;
                        grads.accumulate(&t.grads, 1.0);
                    }
                }
            }

            optimizer.step(&mut params, &grads)?;
        }

        let nb = batches_per_epoch.max(1) as f64;
        let a = params.predict(&readout_rows(&source.features, READOUT_ROWS))?;
        let target_logits = params.predict(&target.features)?;
        let b = readout_rows(&target_logits, READOUT_ROWS);
        let mmd = mmd_value(&a, &b, median_bandwidth(&a, &b))?;
        let coral = coral_value(&a, &b)?;
        let target_accuracy = problem
            .target_labels
            .map(|l| accuracy_of(&target_logits, l, problem.classes).accuracy);

        history.epochs.push(EpochRecord {
            epoch,
            registration_loss: cfg.enable_registration.then_some(sum_reg / nb),
            source_loss: sum_src / nb,
            histogram_loss: use_histogram.then_some(sum_hist / nb),
            target_loss: (tgt_batches > 0).then(|| sum_tgt / tgt_batches as f64),
            pseudo_labels: if cfg.enable_pseudo { selection.len() } else { 0 },
            target_accuracy,
            mmd,
            coral,
            seconds: if cfg.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
    }
    Ok((params, history))
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub registration: bool,
    pub histogram: bool,
    pub pseudo: bool,
    pub accuracy: f64,
}

/// Variant names and their `(registration, histogram, pseudo)` toggles,
/// from the plain source classifier up to the full model.
pub const ABLATION_VARIANTS: [(&str, bool, bool, bool); 8] = [
    ("DFR-H/T/R", false, false, false),
    ("DFR-R/T", false, true, false),
    ("DFR-H/R", false, false, true),
    ("DFR-H/T", true, false, false),
    ("DFR-R", false, true, true),
    ("DFR-T", true, true, false),
    ("DFR-H", true, false, true),
    ("DFR", true, true, true),
];

/// Trains every ablation variant with the same seed and reports target
/// accuracy. Variants run in parallel; each run is deterministic, so the
/// table is too.
pub fn ablation_suite(cfg: &TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<Vec<AblationRow>> {
    check_inputs(cfg, source, target)?;
    target.require_labels()?;
    ABLATION_VARIANTS
        .par_iter()
        .map(|&(variant, registration, histogram, pseudo)| {
            let run_cfg = cfg.with_toggles(registration, histogram, pseudo);
            let (params, _) = train(&run_cfg, source, target)?;
            Ok(AblationRow {
                variant,
                registration,
                histogram,
                pseudo,
                accuracy: evaluate(&params, target)?.accuracy,
            })
        })
        .collect()
}
