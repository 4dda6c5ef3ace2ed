//! Optimization loop: per-epoch eye-level image selection, seeded shuffling
//! and augmentation, per-sample graphs whose gradients merge in a fixed
//! order, adaptive-moment updates, validation tracking and resumable
//! checkpoints. Every random draw derives from (seed, epoch, index), so runs
//! are bit-reproducible regardless of thread count.

pub mod optim;
pub mod state;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    augment, nested_delta_n, preprocess, AugmentParams, EyeGroup, Image, ManifestEntry,
    PreprocessConfig,
};
use crate::error::{Error, Result};
use crate::losses::{
    auxiliary_loss, occlusion_loss, primary_loss, sparsity_loss, total_loss, LossWeights,
};
use crate::metrics::{roc_auc, select_cutoffs, ScoredSet};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;
use crate::seed::{derive, stream};
use crate::tensor::Tensor;

pub use optim::{aligned_grads, Adam, AdamConfig};
pub use state::TrainState;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub seed: u64,
    pub val_fraction: f64,
    /// Save the rolling state file every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    /// Kept for the record; runs are deterministic either way because all
    /// randomness is derived from (seed, epoch, index) and gradient
    /// reduction order is fixed.
    pub deterministic: bool,
    pub augment: Option<AugmentParams>,
    pub cosine_decay: bool,
    pub threads: usize,
    pub preprocess: PreprocessConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            epochs: 10,
            batch: 16,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            val_fraction: 0.2,
            checkpoint_every: 0,
            deterministic: true,
            augment: Some(AugmentParams::default()),
            cosine_decay: false,
            threads: 1,
        preprocess: PreprocessConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!(
                "validation fraction must be in [0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.threads == 0 {
            return Err(Error::Config("thread count must be at least 1".into()));
        }
        if self.preprocess.target != self.model.input.0
            || self.preprocess.target != self.model.input.1
        {
            return Err(Error::Config(format!(
                "preprocess target {} does not match model input {:?}",
                self.preprocess.target, self.model.input
            )));
        }
        Ok(())
    }

    /// Settings echoed into state files; a resume with different values is
    /// refused because it could not reproduce the same trajectory.
    pub(crate) fn echo_entries(&self) -> Vec<(String, String)> {
        vec![
            ("train_seed".into(), self.seed.to_string()),
            ("lr".into(), format!("{}", self.adam.lr)),
            ("batch".into(), self.batch.to_string()),
            ("alpha".into(), format!("{}", self.weights.alpha)),
            ("beta".into(), format!("{}", self.weights.beta)),
            ("gamma".into(), format!("{}", self.weights.gamma)),
        ]
    }

    pub(crate) fn check_echo(
        &self,
        archive: &crate::model::checkpoint::Archive,
        path: &Path,
    ) -> Result<()> {
        for (key, want) in self.echo_entries() {
            match archive.lookup(&key) {
                Some(got) if got == want => {}
                Some(got) => {
                    return Err(Error::Config(format!(
                        "{}: state was trained with {key}={got}, current config has {key}={want}",
                        path.display()
                    )))
                }
                None => {
                    return Err(Error::Format(format!(
                        "{}: state file lacks field {key}",
                        path.display()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Preprocess every manifest image once up front; training, selection and
/// evaluation all read from this immutable cache.
pub fn build_cache(entries: &[ManifestEntry], cfg: &PreprocessConfig) -> Result<Vec<Image>> {
    entries
        .iter()
        .map(|e| preprocess(&Image::load(&e.path)?, cfg))
        .collect()
}

/// Deterministic eye-level split: shuffles eye order by seed and carves off
/// the validation fraction (at least one eye when the fraction is nonzero).
pub fn split_by_eye(
    groups: &[EyeGroup],
    fraction: f64,
    seed: u64,
) -> (Vec<EyeGroup>, Vec<EyeGroup>) {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[stream::SPLIT]));
    order.shuffle(&mut rng);
    let mut val_count = (fraction * groups.len() as f64).round() as usize;
    if fraction > 0.0 {
        val_count = val_count.clamp(1, groups.len().saturating_sub(1));
    }
    let (val_idx, train_idx) = order.split_at(val_count);
    let pick = |idx: &[usize]| {
        let mut sorted: Vec<usize> = idx.to_vec();
        sorted.sort_unstable();
        sorted.iter().map(|&i| groups[i].clone()).collect::<Vec<_>>()
    };
    (pick(train_idx), pick(val_idx))
}

/// Pick the eye's image with the largest summed label probability under the
/// current model; ties keep the earliest manifest entry.
pub fn select_eye_image<S: Scalar>(
    params: &ModelParams<S>,
    members: &[usize],
    cache: &[Image],
) -> Result<usize> {
    if members.len() == 1 {
        return Ok(members[0]);
    }
    let mut best = members[0];
    let mut best_sum = f64::NEG_INFINITY;
    for &i in members {
        let maps = params.forward_segment(&cache[i].to_tensor())?;
        let (probs, _, _) = params.forward_classify(&maps)?;
        let sum: f64 = probs.data().iter().map(|&v| v.to_f64()).sum();
        if sum > best_sum {
            best_sum = sum;
            best = i;
        }
    }
    Ok(best)
}

/// Per-eye label probabilities: the max over the eye's images per label.
pub fn eval_eye_level<S: Scalar>(
    params: &ModelParams<S>,
    groups: &[EyeGroup],
    cache: &[Image],
) -> Result<Vec<Vec<f64>>> {
    let labels = params.config().labels;
    let mut out = Vec::with_capacity(groups.len());
    for group in groups {
        let mut eye = vec![f64::NEG_INFINITY; labels];
        for &i in &group.members {
            let maps = params.forward_segment(&cache[i].to_tensor())?;
            let (probs, _, _) = params.forward_classify(&maps)?;
            for (n, &p) in probs.data().iter().enumerate() {
                eye[n] = eye[n].max(p.to_f64());
            }
        }
        out.push(eye);
    }
    Ok(out)
}

/// Per-label ROC areas of eye-level predictions against eye grades, and
/// their mean over the labels where both classes occur.
pub fn mean_label_auc(
    eye_probs: &[Vec<f64>],
    groups: &[EyeGroup],
    labels: usize,
) -> (Vec<f64>, f64) {
    let mut per_label = Vec::with_capacity(labels);
    for n in 0..labels {
        let scores: Vec<f64> = eye_probs.iter().map(|p| p[n]).collect();
        let truth: Vec<bool> = groups.iter().map(|g| g.grade > n).collect();
        let auc = ScoredSet::new(scores, truth)
            .and_then(|s| roc_auc(&s))
            .map(|(_, a)| a)
            .unwrap_or(f64::NAN);
        per_label.push(auc);
    }
    let defined: Vec<f64> = per_label.iter().copied().filter(|a| a.is_finite()).collect();
    let mean = if defined.is_empty() {
        f64::NAN
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (per_label, mean)
}

/// Loss means for one epoch plus the per-step rows behind them, in log
/// order: primary, auxiliary, occlusion, sparsity, total.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub losses: [f64; 5],
    pub steps: Vec<[f64; 5]>,
}

struct SampleOutcome<S: Scalar> {
    values: [f64; 5],
    grads: Vec<Vec<S>>,
}

fn process_sample<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &TrainConfig,
    entry_index: usize,
    grade: usize,
    epoch: usize,
    cache: &[Image],
) -> Result<SampleOutcome<S>> {
    let img = match &cfg.augment {
        Some(augment_params) => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive(
                cfg.seed,
                &[stream::AUGMENT, epoch as u64, entry_index as u64],
            ));
            augment(&cache[entry_index], augment_params, &mut rng)
        }
        None => cache[entry_index].clone(),
    };
    let out = params.forward_full(&img.to_tensor())?;
    let labels = params.config().labels;
    let target = Tensor::leaf(
        &[labels],
        nested_delta_n(grade, labels).iter().map(|&v| S::from_f64(v)).collect(),
    )?;
    let breakdown = total_loss(
        primary_loss(&out.probs, &target)?,
        auxiliary_loss(&out.aux, &target)?,
        occlusion_loss(&out.occluded_aux),
        sparsity_loss(&out.maps)?,
        &cfg.weights,
    )?;
    let values = breakdown.values();
    let grads = breakdown.total.backward()?;
    Ok(SampleOutcome { values, grads: aligned_grads(params, &grads) })
}

/// One pass over the training eyes: select an image per eye with the current
/// model, shuffle, and update per batch. Gradients are averaged in slot
/// order, so thread count never changes the result.
pub fn train_epoch<S: Scalar>(
    state: &mut TrainState<S>,
    cfg: &TrainConfig,
    entries: &[ManifestEntry],
    train_groups: &[EyeGroup],
    cache: &[Image],
) -> Result<EpochStats> {
    let epoch = state.epoch;
    let mut selected = Vec::with_capacity(train_groups.len());
    for group in train_groups {
        let idx = select_eye_image(&state.params, &group.members, cache)?;
        selected.push((idx, group.grade));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, &[stream::SHUFFLE, epoch as u64]));
    selected.shuffle(&mut rng);
    let lr_scale = if cfg.cosine_decay {
        0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
    } else {
        1.0
    };
    let mut steps = Vec::new();
    let mut sums = [0.0; 5];
    let params_and_adam = (&mut state.params, &mut state.adam);
    let (params, adam) = params_and_adam;
    for (step, batch) in selected.chunks(cfg.batch).enumerate() {
        let outcomes = run_batch(&*params, cfg, batch, epoch, cache)?;
        let mut merged: Vec<Vec<S>> =
            params.leaves().iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect();
        let mut batch_values = [0.0; 5];
        for (slot, outcome) in outcomes.iter().enumerate() {
            if outcome.values.iter().any(|v| !v.is_finite()) {
                let (entry_index, _) = batch[slot];
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch} step {step} on {} \
                     (primary={} auxiliary={} occlusion={} sparsity={} total={})",
                    entries[entry_index].path.display(),
                    outcome.values[0],
                    outcome.values[1],
                    outcome.values[2],
                    outcome.values[3],
                    outcome.values[4],
                )));
            }
            for (acc, g) in merged.iter_mut().zip(&outcome.grads) {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a = *a + v;
                }
            }
            for (s, v) in batch_values.iter_mut().zip(&outcome.values) {
                *s += v;
            }
        }
        let inv = S::from_f64(1.0 / batch.len() as f64);
        for plane in &mut merged {
            for v in plane {
                *v = *v * inv;
            }
        }
        for v in &mut batch_values {
            *v /= batch.len() as f64;
        }
        adam.step(params, &merged, &cfg.adam, lr_scale)?;
        for (s, v) in sums.iter_mut().zip(&batch_values) {
            *s += v;
        }
        steps.push(batch_values);
    }
    let mut losses = [0.0; 5];
    if !steps.is_empty() {
        for (l, s) in losses.iter_mut().zip(&sums) {
            *l = s / steps.len() as f64;
        }
    }
    state.epoch += 1;
    Ok(EpochStats { losses, steps })
}

/// Evaluate a batch's samples, optionally across threads; results come back
/// in slot order either way.
fn run_batch<S: Scalar>(
    params: &ModelParams<S>,
    cfg: &TrainConfig,
    batch: &[(usize, usize)],
    epoch: usize,
    cache: &[Image],
) -> Result<Vec<SampleOutcome<S>>> {
    let threads = cfg.threads.min(batch.len()).max(1);
    if threads == 1 {
        return batch
            .iter()
            .map(|&(idx, grade)| process_sample(params, cfg, idx, grade, epoch, cache))
            .collect();
    }
    let mut slots: Vec<Option<Result<SampleOutcome<S>>>> = Vec::new();
    slots.resize_with(batch.len(), || None);
    let slot_refs: Vec<_> = slots.iter_mut().collect();
    std::thread::scope(|scope| {
        let mut remaining = slot_refs;
        let mut worker = 0usize;
        let mut handles = Vec::new();
        // deal slots round-robin: worker t gets batch positions t, t+T, ...
        let mut per_worker: Vec<Vec<(usize, &mut Option<Result<SampleOutcome<S>>>)>> =
            (0..threads).map(|_| Vec::new()).collect();
        let mut position = 0usize;
        while let Some(slot) = remaining.pop() {
            // remaining.pop() walks from the back; recover the true index
            let index = batch.len() - 1 - position;
            per_worker[worker].push((index, slot));
            worker = (worker + 1) % threads;
            position += 1;
        }
        for chunk in per_worker {
            handles.push(scope.spawn(move || {
                for (index, slot) in chunk {
                    let (idx, grade) = batch[index];
                    *slot = Some(process_sample(params, cfg, idx, grade, epoch, cache));
                }
            }));
        }
        for h in handles {
            h.join().expect("batch worker panicked");
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_auc: f64,
    pub per_label: Vec<f64>,
    pub losses: [f64; 5],
}

#[derive(Debug)]
pub struct FitOutput<S: Scalar> {
    pub state: TrainState<S>,
    pub history: Vec<EpochRow>,
}

/// Full training run (or continuation): epochs of `train_epoch`, eye-level
/// validation after each, best-snapshot tracking, and — when `out_dir` is
/// given — history/step CSVs plus state and best-parameter archives. Decision
/// cutoffs are fitted on the validation eyes at the end and stored with the
/// best parameters.
pub fn fit<S: Scalar>(
    cfg: &TrainConfig,
    entries: &[ManifestEntry],
    train_groups: &[EyeGroup],
    val_groups: &[EyeGroup],
    out_dir: Option<&Path>,
    resume: Option<TrainState<S>>,
) -> Result<FitOutput<S>> {
    cfg.validate()?;
    if train_groups.is_empty() || val_groups.is_empty() {
        return Err(Error::Config(format!(
            "empty split: {} training eyes, {} validation eyes",
            train_groups.len(),
            val_groups.len()
        )));
    }
    let cache = build_cache(entries, &cfg.preprocess)?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(ModelParams::init(&cfg.model)?),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut history = Vec::new();
    let first_epoch = state.epoch;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let stats = train_epoch(&mut state, cfg, entries, train_groups, &cache)?;
        let eye_probs = eval_eye_level(&state.params, val_groups, &cache)?;
        let (per_label, mean_auc) = mean_label_auc(&eye_probs, val_groups, cfg.model.labels);
        if mean_auc.is_finite() && mean_auc > state.best_auc {
            state.best = state.params.clone();
            state.best_auc = mean_auc;
            state.best_epoch = epoch;
        }
        let row = EpochRow { epoch, mean_auc, per_label, losses: stats.losses };
        if let Some(dir) = out_dir {
            append_history(dir, &row, epoch == first_epoch && epoch == 0)?;
            append_steps(dir, epoch, &stats.steps, epoch == first_epoch && epoch == 0)?;
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
                state.save(&dir.join("state.xpln"), cfg)?;
            }
        }
        history.push(row);
    }
    // decision cutoffs from the best snapshot on the validation eyes
    let eye_probs = eval_eye_level(&state.best, val_groups, &cache)?;
    let grades: Vec<usize> = val_groups.iter().map(|g| g.grade).collect();
    state.best.cutoffs = select_cutoffs(&eye_probs, &grades).ok();
    if let Some(dir) = out_dir {
        state.save(&dir.join("state.xpln"), cfg)?;
        state.best.save(&dir.join("best.xpln"))?;
    }
    Ok(FitOutput { state, history })
}

fn append_history(dir: &Path, row: &EpochRow, fresh: bool) -> Result<()> {
    let path = dir.join("history.csv");
    let mut text = String::new();
    if fresh || !path.exists() {
        text.push_str("epoch,mean_val_auc");
        for n in 0..row.per_label.len() {
            text.push_str(&format!(",auc_{}", n + 1));
        }
        text.push_str(",primary,auxiliary,occlusion,sparsity,total\n");
    }
    text.push_str(&format!("{},{}", row.epoch, row.mean_auc));
    for a in &row.per_label {
        text.push_str(&format!(",{a}"));
    }
    for l in &row.losses {
        text.push_str(&format!(",{l}"));
    }
    text.push('\n');
    append_file(&path, &text, fresh)
}

fn append_steps(dir: &Path, epoch: usize, steps: &[[f64; 5]], fresh: bool) -> Result<()> {
    let path = dir.join("steps.csv");
    let mut text = String::new();
    if fresh || !path.exists() {
        text.push_str("epoch,step,primary,auxiliary,occlusion,sparsity,total\n");
    }
    for (i, s) in steps.iter().enumerate() {
        text.push_str(&format!("{epoch},{i},{},{},{},{},{}\n", s[0], s[1], s[2], s[3], s[4]));
    }
    append_file(&path, &text, fresh)
}

fn append_file(path: &Path, text: &str, truncate: bool) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(!truncate)
        .write(true)
        .truncate(truncate)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
