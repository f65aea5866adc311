//! Classifier training: mini-batch AdamW with a plateau scheduler and
//! early stopping, scene-level splits, and the mismatched-prompt
//! leakage probe.

use std::io::Write as _;
use std::path::Path;

use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{
    argmax, bind, forward_logits, init_params, predict, ArchConfig, Checkpoint,
    ClassifierContext, ClassifierParams,
};
use crate::dataset::Dataset;
use crate::error::CoreError;
use crate::optim::{adamw_step, reduce_on_plateau, OptimState};
use crate::synth::derive_seed;
use crate::tape::{Real as _, Tape};

/// Train/val/test split fractions, applied at the scene level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: u32,
    /// Global L2 gradient-norm clip applied to each averaged batch
    /// gradient; `None` disables clipping. Keeps hot learning rates
    /// from being destabilized by rare gradient spikes.
    pub clip_norm: Option<f64>,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            lr: 5e-5,
            weight_decay: 0.05,
            plateau_factor: 0.5,
            plateau_patience: 5,
            clip_norm: Some(1.0),
            max_epochs: 200,
            early_stop_patience: 10,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        let s = &self.split;
        if s.train <= 0.0 || s.val <= 0.0 || s.test <= 0.0 {
            return Err(CoreError::Config(
                "split fractions must all be positive".into(),
            ));
        }
        if (s.train + s.val + s.test - 1.0).abs() > 1e-9 {
            return Err(CoreError::Config("split fractions must sum to 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(CoreError::Config(
                "batch size and max_epochs must be positive".into(),
            ));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(CoreError::Config("patience values must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor == 0.0 {
            return Err(CoreError::Config("plateau factor must be in (0,1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return Err(CoreError::Config(
                    "gradient clip norm must be positive and finite".into(),
                ));
            }
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Record indices of the three scene-disjoint splits.
#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Groups records by scene seed and deals whole scenes into splits, so
/// both inversions (and all timesteps) of one scene share a split.
pub fn scene_splits(
    dataset: &Dataset,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Splits, CoreError> {
    let mut scene_order: Vec<u64> = Vec::new();
    for r in &dataset.records {
        if !scene_order.contains(&r.scene_seed) {
            scene_order.push(r.scene_seed);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[41]));
    scene_order.shuffle(&mut rng);

    let n = scene_order.len();
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = (fractions.val * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let mut splits = Splits::default();
    let assign = |s: u64| -> usize {
        let pos = scene_order.iter().position(|&x| x == s).unwrap();
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    for (i, r) in dataset.records.iter().enumerate() {
        match assign(r.scene_seed) {
            0 => splits.train.push(i),
            1 => splits.val.push(i),
            _ => splits.test.push(i),
        }
    }
    if splits.train.is_empty() || splits.val.is_empty() || splits.test.is_empty() {
        return Err(CoreError::Config(format!(
            "empty split: {} scenes dealt as {}/{}/{} records",
            n,
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        )));
    }
    Ok(splits)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    /// Best-validation parameters (what callers should deploy).
    pub checkpoint: Checkpoint,
    /// Parameters as of the last completed epoch.
    pub final_params: ClassifierParams<f32>,
    pub history: Vec<EpochStats>,
    pub best_val_loss: f64,
    pub splits: Splits,
}

const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy and argmax accuracy of `params` over the listed
/// records. Loss is computed against `label` only; `prompt_relation`
/// never enters.
pub fn mean_loss_and_accuracy(
    ctx: &ClassifierContext<f32>,
    params: &ClassifierParams<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, f64), CoreError> {
    if indices.is_empty() {
        return Err(CoreError::Config("empty evaluation index set".into()));
    }
    let mut loss = 0.0;
    let mut hits = 0usize;
    for &i in indices {
        let r = &dataset.records[i];
        let p = predict(ctx, params, &r.subject, &r.object, r.t)?;
        let cls = r.label as usize;
        loss += -(p[cls].max(PROB_FLOOR)).ln();
        if argmax(&p) == cls {
            hits += 1;
        }
    }
    Ok((loss / indices.len() as f64, hits as f64 / indices.len() as f64))
}

/// Cross-entropy loss and parameter gradients for one record.
fn record_grads(
    ctx: &ClassifierContext<f32>,
    params: &ClassifierParams<f32>,
    dataset: &Dataset,
    index: usize,
) -> Result<(f64, Vec<ArrayD<f32>>), CoreError> {
    let r = &dataset.records[index];
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params);
    let s = tape.leaf2(r.subject.clone());
    let o = tape.leaf2(r.object.clone());
    let logits = forward_logits(&mut tape, ctx, &bound, s, o, r.t)?;
    let loss = tape.cross_entropy(logits, r.label as usize)?;
    let loss_val = tape.scalar_value(loss).to_f64();
    let (grads, _) = tape.backward_wrt(loss, &bound.vars())?;
    Ok((loss_val, grads))
}

/// Trains a fresh classifier on `dataset`, returning the
/// best-validation checkpoint and the per-epoch history.
///
/// Deterministic under `cfg.seed`: init, split, and shuffle order are
/// all derived from it.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    arch: &ArchConfig,
) -> Result<TrainOutput, CoreError> {
    cfg.validate()?;
    if dataset.shape != arch.stack {
        return Err(CoreError::Config(format!(
            "dataset stack shape {:?} does not match arch {:?}",
            dataset.shape, arch.stack
        )));
    }
    let ctx = ClassifierContext::<f32>::new(*arch)?;
    let splits = scene_splits(dataset, cfg.split, cfg.seed)?;

    let mut params = init_params::<f32>(arch, derive_seed(cfg.seed, &[42]))?;
    let named: Vec<ArrayD<f32>> = params.named().iter().map(|(_, a)| (*a).clone()).collect();
    let refs: Vec<&ArrayD<f32>> = named.iter().collect();
    // lr=0 is a legal "do nothing" configuration for train even though
    // the scheduler state itself demands a positive rate.
    let mut state = OptimState::new(&refs, cfg.lr.max(f64::MIN_POSITIVE))?;
    if cfg.lr == 0.0 {
        state.lr = 0.0;
    }
    drop(named);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut best_val_loss = f64::INFINITY;
    let mut best_params = params.clone();
    let mut epochs_since_best = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let lr_used = state.lr;
        let mut order = splits.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[43, epoch as u64]));
        order.shuffle(&mut rng);

        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<ArrayD<f32>>> = None;
            for &i in chunk {
                let (loss, grads) = record_grads(&ctx, &params, dataset, i)?;
                train_loss += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (dst, src) in a.iter_mut().zip(&grads) {
                            *dst += src;
                        }
                    }
                }
            }
            let mut grads = acc.expect("non-empty chunk");
            let inv = 1.0 / chunk.len() as f32;
            for g in &mut grads {
                g.mapv_inplace(|v| v * inv);
            }
            if let Some(clip) = cfg.clip_norm {
                let sq: f64 = grads
                    .iter()
                    .map(|g| g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
                    .sum();
                let norm = sq.sqrt();
                if norm > clip {
                    let scale = (clip / norm) as f32;
                    for g in &mut grads {
                        g.mapv_inplace(|v| v * scale);
                    }
                }
            }
            let mut tensors = params.tensors_mut();
            adamw_step(&mut tensors, &grads, &mut state, lr_used, cfg.weight_decay)?;
        }
        train_loss /= splits.train.len() as f64;

        let (val_loss, val_acc) = mean_loss_and_accuracy(&ctx, &params, dataset, &splits.val)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr: lr_used,
        });

        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best_params = params.clone();
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
        }
        reduce_on_plateau(&mut state, val_loss, cfg.plateau_factor, cfg.plateau_patience);
        if epochs_since_best >= cfg.early_stop_patience {
            break;
        }
    }

    Ok(TrainOutput {
        checkpoint: Checkpoint {
            arch: *arch,
            params: best_params,
        },
        final_params: params,
        history,
        best_val_loss,
        splits,
    })
}

/// Writes the per-epoch history as CSV.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<(), CoreError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,train_loss,val_loss,val_acc,lr")?;
    for h in history {
        writeln!(
            f,
            "{},{},{},{},{}",
            h.epoch, h.train_loss, h.val_loss, h.val_acc, h.lr
        )?;
    }
    Ok(())
}

/// Argmax accuracy plus the 5×5 confusion table (rows = true label,
/// columns = prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub confusion: [[usize; 5]; 5],
    pub total: usize,
}

pub fn evaluate_classifier(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    indices: Option<&[usize]>,
) -> Result<EvalOutcome, CoreError> {
    if dataset.shape != ckpt.arch.stack {
        return Err(CoreError::Config(
            "dataset stack shape does not match checkpoint arch".into(),
        ));
    }
    let ctx = ClassifierContext::<f32>::new(ckpt.arch)?;
    let all: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(s) => s,
        None => {
            all = (0..dataset.records.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(CoreError::Config("nothing to evaluate".into()));
    }
    let mut confusion = [[0usize; 5]; 5];
    for &i in idx {
        let r = &dataset.records[i];
        let p = predict(&ctx, &ckpt.params, &r.subject, &r.object, r.t)?;
        confusion[r.label as usize][argmax(&p)] += 1;
    }
    let trace: usize = (0..5).map(|c| confusion[c][c]).sum();
    Ok(EvalOutcome {
        accuracy: trace as f64 / idx.len() as f64,
        confusion,
        total: idx.len(),
    })
}

/// Outcome of the mismatched-prompt probe: does the model follow the
/// watermark of the (wrong) prompt relation, or the geometry?
#[derive(Debug, Clone, PartialEq)]
pub struct LeakageReport {
    /// Fraction of probe records predicted as the prompt relation.
    pub frac_prompt: f64,
    /// Fraction predicted as the geometric label.
    pub frac_label: f64,
    /// Everything else; the three fractions sum to 1.
    pub frac_other: f64,
    pub confusion: [[usize; 5]; 5],
    pub total: usize,
}

pub fn leakage_probe(ckpt: &Checkpoint, probe: &Dataset) -> Result<LeakageReport, CoreError> {
    if probe.shape != ckpt.arch.stack {
        return Err(CoreError::Config(
            "probe stack shape does not match checkpoint arch".into(),
        ));
    }
    if probe.records.is_empty() {
        return Err(CoreError::Config("empty probe dataset".into()));
    }
    for r in &probe.records {
        if r.prompt_relation == r.label {
            return Err(CoreError::Contract(
                "leakage probe requires prompt_relation != label on every record",
            ));
        }
    }
    let ctx = ClassifierContext::<f32>::new(ckpt.arch)?;
    let mut confusion = [[0usize; 5]; 5];
    let (mut n_prompt, mut n_label) = (0usize, 0usize);
    for r in &probe.records {
        let p = predict(&ctx, &ckpt.params, &r.subject, &r.object, r.t)?;
        let pred = argmax(&p);
        confusion[r.label as usize][pred] += 1;
        if pred == r.prompt_relation as usize {
            n_prompt += 1;
        } else if pred == r.label as usize {
            n_label += 1;
        }
    }
    let total = probe.records.len();
    let (fp, fl) = (n_prompt as f64 / total as f64, n_label as f64 / total as f64);
    Ok(LeakageReport {
        frac_prompt: fp,
        frac_label: fl,
        frac_other: 1.0 - fp - fl,
        confusion,
        total,
    })
}
