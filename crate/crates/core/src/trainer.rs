//! Training pipelines and the optimizer.

use std::collections::HashMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bandit::{final_selection, select_superarm, BanditError, BanditState, InitPlan, InitStrategy};
use crate::channel::{random_mask, validate_fraction, ChannelMask, MaskError, Selection};
use crate::data::{BatchIterator, Dataset, DatasetKind};
use crate::nn::checkpoint::Precision;
use crate::nn::{ArchDescriptor, Mode, Model, ModelError, ParamRole};
use crate::saliency::{normalize_saliencies, raw_saliencies, SaliencyError, SaliencyReport};
use crate::surgeon::{cost_report, extract_compact, CostReport, FlopConvention, SurgeonError};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss {loss} at {stage} step {step} (epoch {epoch}, lr {lr})")]
    Diverged {
        stage: Stage,
        epoch: usize,
        step: u64,
        loss: f64,
        lr: f64,
    },
    #[error("training set is empty")]
    EmptyData,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Bandit(#[from] BanditError),
    #[error(transparent)]
    Saliency(#[from] SaliencyError),
    #[error(transparent)]
    Surgeon(#[from] SurgeonError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    Cucb,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    TwoStage,
    SingleStage,
    /// Plain training of the full network, no gating.
    Baseline,
}

macro_rules! str_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl std::str::FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($s => Ok(Self::$v),)+
                    other => Err(format!(
                        "unknown value {other:?} (expected {})",
                        [$($s),+].join("|")
                    )),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $(Self::$v => $s,)+ })
            }
        }
    };
}

str_enum!(SelectionRule { Cucb => "cucb", Random => "random" });
str_enum!(Pipeline { TwoStage => "two-stage", SingleStage => "single-stage", Baseline => "baseline" });

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Search,
    Finetune,
    Frozen,
    Baseline,
}

str_enum!(Stage {
    Init => "init",
    Search => "search",
    Finetune => "finetune",
    Frozen => "frozen",
    Baseline => "baseline",
});

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    pub arch: String,
    pub p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fine-tuning epochs of the compact model; `None` repeats `epochs`.
    pub finetune_epochs: Option<usize>,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub selection: SelectionRule,
    pub pipeline: Pipeline,
    pub freeze_epoch: usize,
    pub init_strategy: InitStrategy,
    /// Storage precision of checkpoints; arithmetic is always f64.
    pub precision: Precision,
    pub min_per_layer: usize,
    /// Examples per class taken from the start of each split; `None` keeps all.
    pub train_per_class: Option<usize>,
    pub test_per_class: Option<usize>,
    /// `None` augments 32×32 inputs only.
    pub augment: Option<bool>,
    pub flop_convention: FlopConvention,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            arch: "desk".into(),
            p: 0.4,
            batch_size: 64,
            epochs: 20,
            finetune_epochs: None,
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            selection: SelectionRule::Cucb,
            pipeline: Pipeline::TwoStage,
            freeze_epoch: 40,
            init_strategy: InitStrategy::PerChannel,
            precision: Precision::F32,
            min_per_layer: 1,
            train_per_class: None,
            test_per_class: None,
            augment: None,
            flop_convention: FlopConvention::MacsOnly,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.p > 0.0 && self.p <= 1.0) {
            return bad(format!("p must be in (0, 1], got {}", self.p));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 must be finite and non-negative, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.pipeline == Pipeline::SingleStage && self.freeze_epoch >= self.epochs {
            return bad(format!(
                "freeze_epoch ({}) must be below epochs ({}) for single-stage",
                self.freeze_epoch, self.epochs
            ));
        }
        if self.min_per_layer == 0 {
            return bad("min_per_layer must be at least 1".into());
        }
        Ok(())
    }

    pub fn finetune_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs)
    }

    pub fn descriptor(&self, train: &Dataset) -> Result<ArchDescriptor, TrainError> {
        ArchDescriptor::by_name(&self.arch, train.shape(), train.num_classes())
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// `lr0 / 10` from half the epochs, `lr0 / 100` from three quarters.
pub fn lr_at(lr0: f64, epoch: usize, epochs: usize) -> f64 {
    let drops = (2 * epoch >= epochs) as i32 + (4 * epoch >= 3 * epochs) as i32;
    lr0 / 10f64.powi(drops)
}

/// SGD with Nesterov momentum and L2 weight decay, no dampening. Only elements
/// of the thin network under the step's mask are touched, velocity included.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<ParamRole, Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, role: ParamRole) -> Option<&[f64]> {
        self.velocity.get(&role).map(Vec::as_slice)
    }

    /// `g ← g + λw; v ← μv + g; w ← w − lr·(g + μv)`.
    pub fn update(&mut self, role: ParamRole, w: &mut [f64], grad: &[f64], keep: Option<&[bool]>, lr: f64) {
        let v = self.velocity.entry(role).or_insert_with(|| vec![0.0; w.len()]);
        let (mu, wd) = (self.momentum, self.weight_decay);
        for i in 0..w.len() {
            if keep.is_some_and(|k| !k[i]) {
                continue;
            }
            let g = grad[i] + wd * w[i];
            v[i] = mu * v[i] + g;
            w[i] -= lr * (g + mu * v[i]);
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &[(ParamRole, Tensor)], mask: &ChannelMask, lr: f64) {
        for (role, g) in grads {
            let keep = model.thin_elements(*role, mask);
            let w = model.param_mut(*role).data_mut();
            self.update(*role, w, g.data(), keep.as_deref(), lr);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub correct: usize,
    pub report: SaliencyReport,
}

/// One gated forward/backward pass and optimizer update. Saliencies are read
/// from the taps before the weights move.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    mask: &ChannelMask,
    lr: f64,
    step: u64,
) -> Result<StepOutcome, TrainError> {
    let mut pass = model.forward_pass(x, &mask.gates(), Mode::Train, true)?;
    let loss_var = pass
        .graph
        .softmax_cross_entropy(pass.logits, labels)
        .map_err(ModelError::from)?;
    let loss = pass.graph.value(loss_var).item();
    if !loss.is_finite() {
        return Err(TrainError::Diverged {
            stage: Stage::Search,
            epoch: 0,
            step,
            loss,
            lr,
        });
    }
    let correct = count_correct(pass.graph.value(pass.logits), labels);
    pass.graph.backward(loss_var).map_err(ModelError::from)?;
    let report = normalize_saliencies(step, &raw_saliencies(&pass, mask)?);
    let grads: Vec<(ParamRole, Tensor)> = pass
        .params
        .iter()
        .map(|&(role, v)| {
            let g = pass.graph.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(pass.graph.value(v).shape()));
            (role, g)
        })
        .collect();
    model.apply_bn_stats(&pass.bn_stats, mask);
    opt.step(model, &grads, mask, lr);
    Ok(StepOutcome { loss, correct, report })
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

/// Eval-mode accuracy of the gated model; never mutates it.
pub fn evaluate(model: &Model, mask: &ChannelMask, ds: &Dataset, chunk: usize) -> Result<f64, TrainError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for c in idx.chunks(chunk.max(1)) {
        let (x, y) = ds.batch::<ChaCha8Rng>(c, None);
        correct += count_correct(&model.predict(&x, mask)?, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub stage: Stage,
    pub epoch: usize,
    pub t: u64,
    pub loss: f64,
    pub lr: f64,
    pub active: f64,
    pub repairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub layer: usize,
    pub index: usize,
    pub pulls: u64,
    pub mu_hat: f64,
    pub mu_bar: Option<f64>,
    pub selected: bool,
}

/// A named model snapshot taken at a phase boundary.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub name: &'static str,
    pub model: Model,
    pub mask: Option<ChannelMask>,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub steps: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub selection: Vec<SelectionRow>,
    pub bandit: Option<BanditState>,
    pub final_mask: ChannelMask,
    pub final_accuracy: f64,
    /// Model whose accuracy is `final_accuracy`: the compact model for two-stage
    /// runs, the masked full model for single-stage runs.
    pub final_model: Model,
    pub compact: Model,
    pub snapshots: Vec<Snapshot>,
    pub baseline_cost: CostReport,
    pub compact_cost: CostReport,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn param_ratio(&self) -> f64 {
        self.compact_cost.params() as f64 / self.baseline_cost.params() as f64
    }

    pub fn mac_ratio(&self) -> f64 {
        self.compact_cost.macs() as f64 / self.baseline_cost.macs() as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "accuracy {:.4}  params {} ({:.1}% of baseline)  macs {} ({:.1}% of baseline)",
            self.final_accuracy,
            self.compact_cost.params(),
            100.0 * self.param_ratio(),
            self.compact_cost.macs(),
            100.0 * self.mac_ratio()
        )
    }
}

/// Normalized train and test splits.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub train: Dataset,
    pub test: Dataset,
}

impl TrainData {
    /// Loads both splits below `root`, applies the per-class subsets and
    /// normalizes with training statistics.
    pub fn load(cfg: &TrainConfig, root: &std::path::Path) -> Result<Self, crate::data::DataError> {
        use crate::data::{load_split, normalize, Split};
        let mut train = load_split(cfg.dataset, root, Split::Train)?;
        let mut test = load_split(cfg.dataset, root, Split::Test)?;
        if let Some(n) = cfg.train_per_class {
            train = train.balanced_subset(n)?;
        }
        if let Some(n) = cfg.test_per_class {
            test = test.balanced_subset(n)?;
        }
        let (train, test) = normalize(train, test)?;
        Ok(Self { train, test })
    }
}

const EVAL_CHUNK: usize = 500;

struct Runner<'a> {
    cfg: &'a TrainConfig,
    data: &'a TrainData,
    augment: bool,
    aug_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    batches: BatchIterator,
    steps: Vec<StepRow>,
    epochs: Vec<EpochRow>,
    snapshots: Vec<Snapshot>,
    progress: &'a mut dyn FnMut(&str),
}

/// Running totals over one epoch.
#[derive(Default)]
struct EpochAcc {
    loss: f64,
    correct: usize,
    seen: usize,
    batches: usize,
}

impl EpochAcc {
    fn add(&mut self, out: &StepOutcome, n: usize) {
        self.loss += out.loss;
        self.correct += out.correct;
        self.seen += n;
        self.batches += 1;
    }
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a TrainConfig, data: &'a TrainData, progress: &'a mut dyn FnMut(&str)) -> Self {
        let augment = cfg.augment.unwrap_or(data.train.shape()[1..] == [32, 32]);
        Self {
            cfg,
            data,
            augment,
            aug_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xA11)),
            mask_rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x3A5C)),
            batches: BatchIterator::new(data.train.len(), cfg.batch_size, cfg.seed),
            steps: Vec::new(),
            epochs: Vec::new(),
            snapshots: Vec::new(),
            progress,
        }
    }

    fn batch(&mut self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        if self.augment {
            self.data.train.batch(idx, Some(&mut self.aug_rng))
        } else {
            self.data.train.batch::<ChaCha8Rng>(idx, None)
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        stage: Stage,
        epoch: usize,
        t: u64,
        model: &mut Model,
        opt: &mut Sgd,
        idx: &[usize],
        sel: &Selection,
        lr: f64,
    ) -> Result<StepOutcome, TrainError> {
        let (x, y) = self.batch(idx);
        let out = train_step(model, opt, &x, &y, &sel.mask, lr, t).map_err(|e| match e {
            TrainError::Diverged { step, loss, lr, .. } => TrainError::Diverged {
                stage,
                epoch,
                step,
                loss,
                lr,
            },
            other => other,
        })?;
        self.steps.push(StepRow {
            stage,
            epoch,
            t,
            loss: out.loss,
            lr,
            active: sel.mask.active_fraction(),
            repairs: sel.repairs.len(),
        });
        Ok(out)
    }

    fn end_epoch(
        &mut self,
        stage: Stage,
        epoch: usize,
        acc: &EpochAcc,
        model: &Model,
        eval_mask: &ChannelMask,
    ) -> Result<(), TrainError> {
        let test_acc = evaluate(model, eval_mask, &self.data.test, EVAL_CHUNK)?;
        let row = EpochRow {
            stage,
            epoch,
            train_loss: acc.loss / acc.batches.max(1) as f64,
            train_acc: acc.correct as f64 / acc.seen.max(1) as f64,
            test_acc,
        };
        (self.progress)(&format!(
            "{stage} epoch {epoch}: loss {:.4} train_acc {:.4} test_acc {:.4}",
            row.train_loss, row.train_acc, row.test_acc
        ));
        self.epochs.push(row);
        Ok(())
    }

    /// Per-epoch batch order; `offset` separates the streams of different phases.
    fn epoch_batches(&self, offset: usize, epoch: usize) -> Vec<Vec<usize>> {
        self.batches.epoch(offset + epoch)
    }

    /// Runs the exploration masks of `strategy` as real training steps until
    /// every channel has been observed, looping the data as needed.
    fn init_exploration(
        &mut self,
        model: &mut Model,
        opt: &mut Sgd,
        state: &mut BanditState,
        target: usize,
    ) -> Result<(), TrainError> {
        let registry = model.registry().clone();
        let mut plan = InitPlan::new(&registry, self.cfg.init_strategy, target, self.cfg.min_per_layer);
        let lr = self.cfg.lr0;
        let mut queue: Vec<Vec<usize>> = Vec::new();
        let mut pass = 0;
        let mut t = 0u64;
        let mut rng = self.mask_rng.clone();
        while let Some(sel) = plan.next_mask(&mut rng)? {
            if queue.is_empty() {
                // a dedicated stream far from the training epochs
                queue = self.epoch_batches(1_000_000, pass);
                queue.reverse();
                pass += 1;
            }
            let idx = queue.pop().unwrap();
            t += 1;
            let out = self.step(Stage::Init, 0, t, model, opt, &idx, &sel, lr)?;
            state.update(&registry, &sel.mask, &out.report)?;
        }
        self.mask_rng = rng;
        state.set_t(registry.len() as u64);
        Ok(())
    }

    /// Dynamic selection for `epochs` epochs starting at `first_epoch`.
    /// Returns the last executed mask.
    #[allow(clippy::too_many_arguments)]
    fn search(
        &mut self,
        model: &mut Model,
        opt: &mut Sgd,
        state: &mut BanditState,
        range: std::ops::Range<usize>,
        schedule_epochs: usize,
        target_p: f64,
    ) -> Result<ChannelMask, TrainError> {
        let registry = model.registry().clone();
        let mut last = model.all_active();
        for epoch in range {
            let lr = lr_at(self.cfg.lr0, epoch, schedule_epochs);
            let mut acc = EpochAcc::default();
            for idx in self.epoch_batches(0, epoch) {
                state.advance();
                let sel = match self.cfg.selection {
                    SelectionRule::Cucb => select_superarm(state, &registry, target_p, self.cfg.min_per_layer)?,
                    SelectionRule::Random => {
                        random_mask(&registry, target_p, self.cfg.min_per_layer, &mut self.mask_rng)?
                    }
                };
                let out = self.step(Stage::Search, epoch, state.t(), model, opt, &idx, &sel, lr)?;
                if self.cfg.selection == SelectionRule::Cucb {
                    state.update(&registry, &sel.mask, &out.report)?;
                }
                acc.add(&out, idx.len());
                last = sel.mask;
            }
            let eval_mask = match self.cfg.selection {
                SelectionRule::Cucb => final_selection(state, &registry, target_p, self.cfg.min_per_layer)?.mask,
                SelectionRule::Random => last.clone(),
            };
            self.end_epoch(Stage::Search, epoch, &acc, model, &eval_mask)?;
        }
        Ok(last)
    }

    /// Fixed-mask training over `range` with an lr schedule of `schedule_epochs`.
    #[allow(clippy::too_many_arguments)]
    fn fixed(
        &mut self,
        stage: Stage,
        model: &mut Model,
        opt: &mut Sgd,
        mask: &ChannelMask,
        range: std::ops::Range<usize>,
        schedule_epochs: usize,
        stream_offset: usize,
        t: &mut u64,
    ) -> Result<(), TrainError> {
        let sel = Selection {
            mask: mask.clone(),
            repairs: Vec::new(),
        };
        for epoch in range {
            let lr = lr_at(self.cfg.lr0, epoch, schedule_epochs);
            let mut acc = EpochAcc::default();
            for idx in self.epoch_batches(stream_offset, epoch) {
                *t += 1;
                let out = self.step(stage, epoch, *t, model, opt, &idx, &sel, lr)?;
                acc.add(&out, idx.len());
            }
            self.end_epoch(stage, epoch, &acc, model, mask)?;
        }
        Ok(())
    }

    fn choose_final(&mut self, model: &Model, state: &BanditState) -> Result<Selection, TrainError> {
        let registry = model.registry();
        Ok(match self.cfg.selection {
            SelectionRule::Cucb => final_selection(state, registry, self.cfg.p, self.cfg.min_per_layer)?,
            SelectionRule::Random => random_mask(registry, self.cfg.p, self.cfg.min_per_layer, &mut self.mask_rng)?,
        })
    }
}

fn selection_rows(state: &BanditState, model: &Model, selected: &ChannelMask) -> Vec<SelectionRow> {
    let registry = model.registry();
    registry
        .iter()
        .enumerate()
        .map(|(i, id)| SelectionRow {
            layer: id.layer,
            index: id.index,
            pulls: state.counts()[i],
            mu_hat: state.means()[i],
            mu_bar: state.adjusted(i).ok(),
            selected: selected.bits()[i],
        })
        .collect()
}

/// Dispatches on `cfg.pipeline`. `progress` receives one line per epoch.
pub fn run(cfg: &TrainConfig, data: &TrainData, progress: &mut dyn FnMut(&str)) -> Result<RunRecord, TrainError> {
    match cfg.pipeline {
        Pipeline::TwoStage => run_two_stage(cfg, data, progress),
        Pipeline::SingleStage => run_single_stage(cfg, data, progress),
        Pipeline::Baseline => run_baseline(cfg, data, progress),
    }
}

fn prepare(cfg: &TrainConfig, data: &TrainData) -> Result<(Model, CostReport), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let desc = cfg.descriptor(&data.train)?;
    let model = Model::build(&desc, cfg.seed)?;
    validate_fraction(model.registry(), cfg.p, cfg.min_per_layer)?;
    let cost = cost_report(&desc, cfg.flop_convention)?;
    Ok((model, cost))
}

/// Search with dynamic selection, then fine-tune the extracted compact model
/// with a fresh optimizer and schedule.
pub fn run_two_stage(cfg: &TrainConfig, data: &TrainData, progress: &mut dyn FnMut(&str)) -> Result<RunRecord, TrainError> {
    let start = Instant::now();
    let (mut model, baseline_cost) = prepare(cfg, data)?;
    let mut r = Runner::new(cfg, data, progress);
    let n = model.registry().len();
    let mut state = BanditState::new(n);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);

    if cfg.p < 1.0 {
        let target = validate_fraction(model.registry(), cfg.p, cfg.min_per_layer)?;
        if cfg.selection == SelectionRule::Cucb {
            r.init_exploration(&mut model, &mut opt, &mut state, target)?;
        } else {
            state.set_t(n as u64);
        }
        r.search(&mut model, &mut opt, &mut state, 0..cfg.epochs, cfg.epochs, cfg.p)?;
    } else {
        state.set_t(n as u64);
        let mut t = state.t();
        let full = model.all_active();
        r.fixed(Stage::Search, &mut model, &mut opt, &full, 0..cfg.epochs, cfg.epochs, 0, &mut t)?;
        state.set_t(t);
    }
    let chosen = r.choose_final(&model, &state)?;
    r.snapshots.push(Snapshot {
        name: "search",
        model: model.clone(),
        mask: Some(chosen.mask.clone()),
    });

    let (mut compact, _) = extract_compact(&model, &chosen.mask)?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let ft = cfg.finetune_epochs();
    let full = compact.all_active();
    let mut t = state.t();
    r.fixed(Stage::Finetune, &mut compact, &mut opt, &full, 0..ft, ft, cfg.epochs, &mut t)?;
    r.snapshots.push(Snapshot {
        name: "compact",
        model: compact.clone(),
        mask: None,
    });

    let final_accuracy = r.epochs.last().map_or(0.0, |e| e.test_acc);
    let compact_cost = cost_report(compact.descriptor(), cfg.flop_convention)?;
    Ok(RunRecord {
        config: cfg.clone(),
        selection: selection_rows(&state, &model, &chosen.mask),
        bandit: Some(state),
        final_mask: chosen.mask,
        final_accuracy,
        final_model: compact.clone(),
        compact,
        steps: r.steps,
        epochs: r.epochs,
        snapshots: r.snapshots,
        baseline_cost,
        compact_cost,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Dynamic selection until `freeze_epoch`, then the same model keeps training
/// under the frozen final mask on the original schedule.
pub fn run_single_stage(cfg: &TrainConfig, data: &TrainData, progress: &mut dyn FnMut(&str)) -> Result<RunRecord, TrainError> {
    let start = Instant::now();
    let (mut model, baseline_cost) = prepare(cfg, data)?;
    let mut r = Runner::new(cfg, data, progress);
    let n = model.registry().len();
    let mut state = BanditState::new(n);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);

    if cfg.p < 1.0 {
        let target = validate_fraction(model.registry(), cfg.p, cfg.min_per_layer)?;
        if cfg.selection == SelectionRule::Cucb {
            r.init_exploration(&mut model, &mut opt, &mut state, target)?;
        } else {
            state.set_t(n as u64);
        }
        r.search(&mut model, &mut opt, &mut state, 0..cfg.freeze_epoch, cfg.epochs, cfg.p)?;
    } else {
        state.set_t(n as u64);
    }
    let chosen = r.choose_final(&model, &state)?;
    r.snapshots.push(Snapshot {
        name: "search",
        model: model.clone(),
        mask: Some(chosen.mask.clone()),
    });
    let mut t = state.t();
    r.fixed(
        Stage::Frozen,
        &mut model,
        &mut opt,
        &chosen.mask,
        cfg.freeze_epoch.min(cfg.epochs)..cfg.epochs,
        cfg.epochs,
        0,
        &mut t,
    )?;
    let (compact, _) = extract_compact(&model, &chosen.mask)?;
    r.snapshots.push(Snapshot {
        name: "compact",
        model: compact.clone(),
        mask: None,
    });
    let final_accuracy = r.epochs.last().map_or(0.0, |e| e.test_acc);
    let compact_cost = cost_report(compact.descriptor(), cfg.flop_convention)?;
    Ok(RunRecord {
        config: cfg.clone(),
        selection: selection_rows(&state, &model, &chosen.mask),
        bandit: Some(state),
        final_mask: chosen.mask,
        final_accuracy,
        final_model: model,
        compact,
        steps: r.steps,
        epochs: r.epochs,
        snapshots: r.snapshots,
        baseline_cost,
        compact_cost,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Two-stage pipeline with uniform random masks during search and a fresh
/// random mask for extraction.
pub fn run_random_baseline(
    cfg: &TrainConfig,
    data: &TrainData,
    progress: &mut dyn FnMut(&str),
) -> Result<RunRecord, TrainError> {
    let cfg = TrainConfig {
        selection: SelectionRule::Random,
        pipeline: Pipeline::TwoStage,
        ..cfg.clone()
    };
    run_two_stage(&cfg, data, progress)
}

/// Plain full-network training for `epochs` epochs.
pub fn run_baseline(cfg: &TrainConfig, data: &TrainData, progress: &mut dyn FnMut(&str)) -> Result<RunRecord, TrainError> {
    let start = Instant::now();
    let cfg = TrainConfig {
        p: 1.0,
        pipeline: Pipeline::Baseline,
        ..cfg.clone()
    };
    let (mut model, baseline_cost) = prepare(&cfg, data)?;
    let mut r = Runner::new(&cfg, data, progress);
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let full = model.all_active();
    let mut t = 0;
    r.fixed(Stage::Baseline, &mut model, &mut opt, &full, 0..cfg.epochs, cfg.epochs, 0, &mut t)?;
    r.snapshots.push(Snapshot {
        name: "baseline",
        model: model.clone(),
        mask: None,
    });
    let final_accuracy = r.epochs.last().map_or(0.0, |e| e.test_acc);
    Ok(RunRecord {
        selection: Vec::new(),
        bandit: None,
        final_mask: full,
        final_accuracy,
        final_model: model.clone(),
        compact: model,
        steps: r.steps,
        epochs: r.epochs,
        snapshots: r.snapshots,
        compact_cost: baseline_cost.clone(),
        baseline_cost,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::nn::tiny_descriptor;
    use rand::Rng;

    #[test]
    fn schedule_has_two_drops() {
        let lrs: Vec<f64> = (0..8).map(|e| lr_at(0.1, e, 8)).collect();
        assert_eq!(lrs, vec![0.1, 0.1, 0.1, 0.1, 0.01, 0.01, 0.001, 0.001]);
        assert_eq!(lr_at(0.1, 79, 160), 0.1);
        assert_eq!(lr_at(0.1, 80, 160), 0.01);
        assert_eq!(lr_at(0.1, 120, 160), 0.1 / 100.0);
        assert_eq!(lr_at(0.1, 0, 1), 0.1);
    }

    #[test]
    fn nesterov_matches_closed_form_on_quadratic() {
        // f(w) = ½ a w², gradient a·w
        let (a, lr, mu) = (3.0, 0.05, 0.9);
        let mut opt = Sgd::new(mu, 0.0);
        let mut w = vec![2.0];
        let (mut wr, mut vr) = (2.0f64, 0.0f64);
        for _ in 0..50 {
            let g = vec![a * w[0]];
            opt.update(ParamRole::HeadBias, &mut w, &g, None, lr);
            let gr = a * wr;
            vr = mu * vr + gr;
            wr -= lr * (gr + mu * vr);
            assert!((w[0] - wr).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut opt = Sgd::new(0.9, 0.1);
        let mut w = vec![1.0, 1.0];
        opt.update(ParamRole::HeadBias, &mut w, &[0.0, 0.0], Some(&[true, false]), 1.0);
        // g = 0.1, v = 0.1, w -= 0.1 + 0.09
        assert!((w[0] - 0.81).abs() < 1e-15);
        assert_eq!(w[1], 1.0);
        assert_eq!(opt.velocity(ParamRole::HeadBias).unwrap()[1], 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig { p: 0.0, ..Default::default() },
            TrainConfig { p: 1.5, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig {
                pipeline: Pipeline::SingleStage,
                freeze_epoch: 20,
                ..Default::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(TrainError::Config(_))), "{cfg:?}");
        }
    }

    fn toy_data(n: usize, seed: u64) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut make = |n: usize, split| {
            let mut pixels = Vec::with_capacity(n * 64);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let y = i % 3;
                for p in 0..64 {
                    // class-dependent bright band plus noise
                    let base = if p / 8 == y * 3 { 200 } else { 30 };
                    pixels.push((base + rng.random_range(0..40)) as u8);
                }
                labels.push(y);
            }
            Dataset::from_raw([1, 8, 8], pixels, labels, 3, split).unwrap()
        };
        let train = make(n, Split::Train);
        let test = make(n / 2, Split::Test);
        let (train, test) = crate::data::normalize(train, test).unwrap();
        TrainData { train, test }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: "tiny".into(),
            p: 0.5,
            batch_size: 16,
            epochs: 2,
            lr0: 0.05,
            seed: 3,
            init_strategy: InitStrategy::Cover,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let data = toy_data(32, 1);
        let mut m = Model::build(&tiny_descriptor([1, 8, 8], 3), 1).unwrap();
        let before = m.clone();
        let mut opt = Sgd::new(0.9, 1e-4);
        let mask = m.all_active();
        let (x, y) = data.train.batch::<ChaCha8Rng>(&(0..16).collect::<Vec<_>>(), None);
        let a = train_step(&mut m, &mut opt, &x, &y, &mask, 0.0, 1).unwrap();
        let b = train_step(&mut m, &mut opt, &x, &y, &mask, 0.0, 2).unwrap();
        assert_eq!(a.loss, b.loss);
        for role in m.param_roles() {
            assert_eq!(m.param(role), before.param(role));
        }
    }

    #[test]
    fn masked_parameters_are_frozen() {
        let data = toy_data(32, 2);
        let mut m = Model::build(&tiny_descriptor([1, 8, 8], 3), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = random_mask(m.registry(), 0.4, 1, &mut rng).unwrap().mask;
        let before = m.clone();
        let mut opt = Sgd::new(0.9, 1e-4);
        let (x, y) = data.train.batch::<ChaCha8Rng>(&(0..16).collect::<Vec<_>>(), None);
        train_step(&mut m, &mut opt, &x, &y, &mask, 0.1, 1).unwrap();
        let mut moved = 0;
        for role in m.param_roles() {
            let keep = m.thin_elements(role, &mask);
            for (i, (a, b)) in m.param(role).data().iter().zip(before.param(role).data()).enumerate() {
                if keep.as_ref().is_some_and(|k| !k[i]) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{} [{i}]", role.name());
                } else if a != b {
                    moved += 1;
                }
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn all_active_matches_plain_sgd() {
        // same step by hand: full forward/backward, then the closed-form update
        let data = toy_data(32, 4);
        let mut m = Model::build(&tiny_descriptor([1, 8, 8], 3), 7).unwrap();
        let reference = m.clone();
        let (x, y) = data.train.batch::<ChaCha8Rng>(&(0..16).collect::<Vec<_>>(), None);
        let mut opt = Sgd::new(0.9, 1e-4);
        let mask = m.all_active();
        train_step(&mut m, &mut opt, &x, &y, &mask, 0.1, 1).unwrap();

        let ones: Vec<Vec<f64>> = reference.registry().widths().iter().map(|&w| vec![1.0; w]).collect();
        let mut pass = reference.forward_pass(&x, &ones, Mode::Train, true).unwrap();
        let loss = pass.graph.softmax_cross_entropy(pass.logits, &y).unwrap();
        pass.graph.backward(loss).unwrap();
        for role in reference.param_roles() {
            let w = reference.param(role).data();
            let g = pass.param_grad(role).unwrap().data();
            for i in 0..w.len() {
                let gi = g[i] + 1e-4 * w[i];
                let expect = w[i] - 0.1 * (gi + 0.9 * gi);
                assert_eq!(m.param(role).data()[i], expect, "{}", role.name());
            }
        }
    }

    #[test]
    fn two_stage_accounting_and_determinism() {
        let data = toy_data(48, 5);
        let cfg = tiny_cfg();
        let a = run_two_stage(&cfg, &data, &mut |_| {}).unwrap();
        let state = a.bandit.as_ref().unwrap();
        let search_steps = a.steps.iter().filter(|s| s.stage == Stage::Search).count() as u64;
        assert_eq!(state.t(), 24 + search_steps);
        assert!(state.counts().iter().all(|&c| c >= 1));
        assert!(a.steps.windows(2).all(|w| w[0].t < w[1].t));
        assert_eq!(a.final_mask.popcount(), 12);
        assert_eq!(a.compact.registry().len(), 12);
        assert!(a.param_ratio() < 1.0);
        assert_eq!(a.epochs.iter().filter(|e| e.stage == Stage::Finetune).count(), 2);
        let b = run_two_stage(&cfg, &data, &mut |_| {}).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.selection, b.selection);
        assert_eq!(a.compact, b.compact);
    }

    #[test]
    fn full_fraction_is_baseline_then_identity() {
        let data = toy_data(32, 6);
        let cfg = TrainConfig { p: 1.0, ..tiny_cfg() };
        let two = run_two_stage(&cfg, &data, &mut |_| {}).unwrap();
        let base = run_baseline(&cfg, &data, &mut |_| {}).unwrap();
        assert!(two.final_mask.is_all_active());
        let search: Vec<f64> = two.steps.iter().filter(|s| s.stage == Stage::Search).map(|s| s.loss).collect();
        let plain: Vec<f64> = base.steps.iter().map(|s| s.loss).collect();
        assert_eq!(search, plain);
        assert_eq!(two.snapshots[0].model, base.final_model);
        assert_eq!(two.compact_cost, two.baseline_cost);
    }

    #[test]
    fn single_stage_keeps_schedule_and_freezes() {
        let data = toy_data(32, 7);
        let cfg = TrainConfig {
            pipeline: Pipeline::SingleStage,
            epochs: 3,
            freeze_epoch: 1,
            ..tiny_cfg()
        };
        let rec = run_single_stage(&cfg, &data, &mut |_| {}).unwrap();
        let frozen: Vec<&StepRow> = rec.steps.iter().filter(|s| s.stage == Stage::Frozen).collect();
        assert_eq!(rec.epochs.len(), 3);
        assert!(frozen.iter().all(|s| s.epoch >= 1 && s.repairs == 0));
        assert_eq!(frozen.last().unwrap().lr, lr_at(cfg.lr0, 2, 3));

        let zero = TrainConfig { freeze_epoch: 0, ..cfg };
        let rec = run_single_stage(&zero, &data, &mut |_| {}).unwrap();
        assert!(rec.steps.iter().all(|s| matches!(s.stage, Stage::Init | Stage::Frozen)));
    }

    #[test]
    fn random_selection_is_reproducible() {
        let data = toy_data(32, 8);
        let a = run_random_baseline(&tiny_cfg(), &data, &mut |_| {}).unwrap();
        let b = run_random_baseline(&tiny_cfg(), &data, &mut |_| {}).unwrap();
        assert_eq!(a.final_mask, b.final_mask);
        assert_eq!(a.steps, b.steps);
        assert!(a.steps.iter().all(|s| s.stage != Stage::Init));
    }

    #[test]
    fn evaluation_does_not_mutate() {
        let data = toy_data(32, 9);
        let m = Model::build(&tiny_descriptor([1, 8, 8], 3), 1).unwrap();
        let before = m.clone();
        let acc = evaluate(&m, &m.all_active(), &data.test, 7).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(m, before);
    }
}
