//! Training loop, learning-rate schedule, video-level fold construction,
//! evaluation, and fold-ensemble voting.
//!
//! Training is single-stage by construction: one optimizer, one loss, one
//! pass over the plan per epoch — no module is frozen or trained
//! separately. Everything is deterministic for a fixed seed: parameter
//! init, batch shuffling, and augmentation each draw from their own
//! seeded stream.

use crate::checkpoint::Checkpoint;
use crate::dataset::{augment, load_raster, FrameRecord, SamplePlan};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objective::{binarize, f1_scores, loss_on_tape, F1Report, DEFAULT_THRESHOLD};
use crate::optim::sgd_step;
use crate::tape::Tape;
use crate::tensor::{seeded_rng, Real, Tensor};
use crate::NUM_AU;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Stepped SGD schedule: the rate drops by `decay_factor` at each epoch
/// listed in `decay_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    /// Optional early stop once validation macro F1 reaches this value.
    pub target_macro_f1: Option<f64>,
    /// Validate every this many epochs (the last epoch always validates).
    pub eval_every: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            epochs: 15,
            base_lr: 0.001,
            decay_epochs: vec![4, 6, 8],
            decay_factor: 0.1,
            batch_size: 256,
            max_steps: None,
            target_macro_f1: None,
            eval_every: 1,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be > 0".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.decay_factor) {
            return Err(Error::Config("decay_factor must be in (0,1)".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect at `epoch`: base rate times one decay factor
/// per listed decay epoch that has been reached.
pub fn lr_at(epoch: usize, sched: &TrainSchedule) -> Result<f64> {
    if epoch >= sched.epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside schedule of {} epochs",
            sched.epochs
        )));
    }
    let drops = sched.decay_epochs.iter().filter(|&&e| epoch >= e).count();
    Ok(sched.base_lr * sched.decay_factor.powi(drops as i32))
}

/// Per-epoch history line. F1 fields are absent on epochs where
/// validation was skipped (`eval_every > 1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub bce: f64,
    pub circle: f64,
    pub total: f64,
    pub macro_f1: Option<f64>,
    pub per_au_f1: Option<[f64; NUM_AU]>,
    pub steps: usize,
}

/// Training input: records, the resampled plan over them, a validation
/// set, and where to find rasters.
pub struct TrainData<'a> {
    pub train_records: &'a [FrameRecord],
    pub plan: &'a SamplePlan,
    pub val_records: &'a [FrameRecord],
    pub data_dir: &'a Path,
}

pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Checkpoint of the best-validation-macro-F1 parameters.
    pub best: Checkpoint,
    pub best_macro_f1: f64,
    pub steps_run: usize,
}

fn load_image<T: Real>(data_dir: &Path, record: &FrameRecord) -> Result<Tensor<T>> {
    let raster = load_raster(&data_dir.join(&record.path))?;
    Ok(raster.cast::<T>())
}

/// Run the schedule. Deterministic for (model seed, schedule, data):
/// shuffling uses stream 1 of the model seed, augmentation stream 2.
pub fn train<T: Real>(
    model: &mut Model<T>,
    sched: &TrainSchedule,
    data: &TrainData,
) -> Result<TrainOutcome> {
    sched.validate()?;
    if data.plan.selected.is_empty() {
        return Err(Error::Config("sample plan is empty".into()));
    }
    if let (true, Some(path)) = (
        model.cfg.load_pretrained_backbone,
        model.cfg.pretrained_backbone_path.clone(),
    ) {
        Checkpoint::load(Path::new(&path))?.load_backbone_into(model)?;
    }

    let mut shuffle_rng = seeded_rng(model.cfg.seed, 1);
    let mut augment_rng = seeded_rng(model.cfg.seed, 2);
    let use_circle = model.cfg.use_circle_loss;

    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut steps_run = 0usize;
    let mut indices: Vec<usize> = data.plan.selected.clone();

    let mut capped = false;
    'epochs: for epoch in 0..sched.epochs {
        if capped {
            break;
        }
        let lr = lr_at(epoch, sched)?;
        indices.shuffle(&mut shuffle_rng);

        let mut epoch_bce = 0.0;
        let mut epoch_circle = 0.0;
        let mut epoch_total = 0.0;
        let mut epoch_samples = 0usize;
        let mut epoch_steps = 0usize;

        for batch in indices.chunks(sched.batch_size) {
            if let Some(cap) = sched.max_steps {
                if steps_run >= cap {
                    capped = true;
                    break;
                }
            }
            let scale = T::of_f64(1.0 / batch.len() as f64);
            for &idx in batch {
                let record = &data.train_records[idx];
                let image = load_image::<T>(data.data_dir, record)?;
                let image = augment(&image, &mut augment_rng);
                let mut tape = Tape::new();
                let pass = model.forward(&mut tape, &image)?;
                let loss =
                    loss_on_tape(&mut tape, pass.probs, pass.logits, &record.labels, use_circle)?;
                let total_value = tape.value(loss.total).item().as_f64();
                if !total_value.is_finite() {
                    return Err(Error::NonFinite {
                        op: format!("loss at epoch {epoch}, step {steps_run}"),
                    });
                }
                epoch_bce += tape.value(loss.bce).item().as_f64();
                epoch_circle += tape.value(loss.circle).item().as_f64();
                epoch_total += total_value;
                epoch_samples += 1;
                tape.backward(loss.total)?;
                tape.accumulate_param_grads(&mut model.store, scale);
            }
            sgd_step(&mut model.store, lr).map_err(|e| match e {
                Error::NonFiniteGrad { param } => Error::NonFiniteGrad {
                    param: format!("{param} (epoch {epoch}, step {steps_run})"),
                },
                other => other,
            })?;
            steps_run += 1;
            epoch_steps += 1;
        }

        let do_eval =
            (epoch + 1) % sched.eval_every == 0 || epoch + 1 == sched.epochs || capped;
        let report = if do_eval {
            Some(evaluate(model, data.val_records, data.data_dir, DEFAULT_THRESHOLD)?)
        } else {
            None
        };
        let denom = epoch_samples.max(1) as f64;
        history.push(EpochStats {
            epoch,
            lr,
            bce: epoch_bce / denom,
            circle: epoch_circle / denom,
            total: epoch_total / denom,
            macro_f1: report.as_ref().map(|r| r.macro_f1),
            per_au_f1: report.as_ref().map(|r| r.per_au),
            steps: epoch_steps,
        });

        if let Some(report) = report {
            let is_better = best
                .as_ref()
                .map(|(f1, _)| report.macro_f1 > *f1)
                .unwrap_or(true);
            if is_better {
                best = Some((report.macro_f1, Checkpoint::from_model(model, epoch as u32)));
            }
            if let Some(target) = sched.target_macro_f1 {
                if report.macro_f1 >= target {
                    break 'epochs;
                }
            }
        }
    }

    let (best_macro_f1, best) = best.expect("final epoch always validates");
    Ok(TrainOutcome {
        history,
        best,
        best_macro_f1,
        steps_run,
    })
}

/// Evaluate a model over records: forward each frame (no augmentation),
/// binarize at `threshold`, and score.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    records: &[FrameRecord],
    data_dir: &Path,
    threshold: f64,
) -> Result<F1Report> {
    if records.is_empty() {
        return Err(Error::EmptyEval);
    }
    let mut preds = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for record in records {
        let image = load_image::<T>(data_dir, record)?;
        let (probs, _) = model.predict(&image)?;
        preds.push(binarize(&probs, threshold));
        labels.push(record.labels);
    }
    f1_scores(&preds, &labels)
}

/// One row of a prediction run.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub video_id: String,
    pub frame_index: u64,
    pub probs: [f64; NUM_AU],
    pub binary: [bool; NUM_AU],
    pub fusion_weights: Option<[f64; NUM_AU]>,
}

/// Predict every record in manifest order.
pub fn predict_records<T: Real>(
    model: &Model<T>,
    records: &[FrameRecord],
    data_dir: &Path,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let image = load_image::<T>(data_dir, record)?;
        let (probs, weights) = model.predict(&image)?;
        let binary = binarize(&probs, threshold);
        let mut probs_arr = [0.0f64; NUM_AU];
        for (dst, src) in probs_arr.iter_mut().zip(&probs) {
            *dst = src.as_f64();
        }
        let weights_arr = weights.map(|w| {
            let mut arr = [0.0f64; NUM_AU];
            for (dst, src) in arr.iter_mut().zip(&w) {
                *dst = src.as_f64();
            }
            arr
        });
        out.push(Prediction {
            video_id: record.video_id.clone(),
            frame_index: record.frame_index,
            probs: probs_arr,
            binary,
            fusion_weights: weights_arr,
        });
    }
    Ok(out)
}

/// Serialize predictions: `video_id,frame_index,p1..p12,b1..b12` with the
/// fusion weights appended when requested and present.
pub fn format_predictions(preds: &[Prediction], emit_weights: bool) -> String {
    let mut out = String::new();
    for p in preds {
        out.push_str(&p.video_id);
        out.push(',');
        out.push_str(&p.frame_index.to_string());
        for v in &p.probs {
            out.push_str(&format!(",{v:.6}"));
        }
        for &b in &p.binary {
            out.push_str(if b { ",1" } else { ",0" });
        }
        if emit_weights {
            if let Some(w) = &p.fusion_weights {
                for v in w {
                    out.push_str(&format!(",{v:.6}"));
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Number of models in a voting ensemble (official split + 4 folds).
pub const ENSEMBLE_SIZE: usize = 5;

/// Majority vote: binarize each model at 0.5, output 1 where at least
/// three of the five models agree.
pub fn ensemble_vote(probs: &[Vec<[f64; NUM_AU]>]) -> Result<Vec<[bool; NUM_AU]>> {
    if probs.len() != ENSEMBLE_SIZE {
        return Err(Error::Config(format!(
            "ensemble voting needs exactly {ENSEMBLE_SIZE} models, got {}",
            probs.len()
        )));
    }
    let n = probs[0].len();
    if probs.iter().any(|p| p.len() != n) {
        return Err(Error::ShapeMismatch {
            op: "ensemble_vote",
            lhs: vec![n],
            rhs: probs.iter().map(|p| p.len()).collect(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for sample in 0..n {
        let mut votes = [0usize; NUM_AU];
        for model in probs {
            let b = binarize(&model[sample], DEFAULT_THRESHOLD);
            for (v, &bit) in votes.iter_mut().zip(&b) {
                *v += bit as usize;
            }
        }
        let mut decided = [false; NUM_AU];
        for i in 0..NUM_AU {
            decided[i] = votes[i] * 2 > ENSEMBLE_SIZE;
        }
        out.push(decided);
    }
    Ok(out)
}

/// A train/validation partition by video id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub name: String,
    pub train_videos: Vec<String>,
    pub val_videos: Vec<String>,
}

impl FoldSplit {
    pub fn partition<'a>(
        &self,
        records: &'a [FrameRecord],
    ) -> (Vec<&'a FrameRecord>, Vec<&'a FrameRecord>) {
        let val: std::collections::HashSet<&str> =
            self.val_videos.iter().map(|s| s.as_str()).collect();
        let mut train_set = Vec::new();
        let mut val_set = Vec::new();
        for r in records {
            if val.contains(r.video_id.as_str()) {
                val_set.push(r);
            } else {
                train_set.push(r);
            }
        }
        (train_set, val_set)
    }
}

/// Build the official split plus `n_folds` cross-validation splits
/// (5 total with the default 4), partitioning whole videos. Videos are
/// shuffled once by seed; the official split holds out the first quarter,
/// fold i holds out the i-th contiguous chunk.
pub fn make_folds(records: &[FrameRecord], n_folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    let mut videos: Vec<String> = Vec::new();
    for r in records {
        if !videos.contains(&r.video_id) {
            videos.push(r.video_id.clone());
        }
    }
    if videos.len() < n_folds.max(2) {
        return Err(Error::Config(format!(
            "need at least {} videos for {n_folds} folds, got {}",
            n_folds.max(2),
            videos.len()
        )));
    }
    let mut rng = seeded_rng(seed, 3);
    videos.shuffle(&mut rng);

    let mut splits = Vec::with_capacity(n_folds + 1);
    let hold = (videos.len() / 4).max(1);
    let (official_val, official_train) = videos.split_at(hold);
    splits.push(FoldSplit {
        name: "official".into(),
        train_videos: official_train.to_vec(),
        val_videos: official_val.to_vec(),
    });

    let base = videos.len() / n_folds;
    let extra = videos.len() % n_folds;
    let mut start = 0usize;
    for fold in 0..n_folds {
        let size = base + usize::from(fold < extra);
        let val: Vec<String> = videos[start..start + size].to_vec();
        let train: Vec<String> = videos
            .iter()
            .filter(|v| !val.contains(v))
            .cloned()
            .collect();
        splits.push(FoldSplit {
            name: format!("fold-{}", fold + 1),
            train_videos: train,
            val_videos: val,
        });
        start += size;
    }
    Ok(splits)
}

/// Serialize history as one JSON object per line.
pub fn format_history(history: &[EpochStats]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).expect("history serializes"))
        .chain(std::iter::once(String::new()))
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::LabelVector;

    #[test]
    fn lr_schedule_matches_stated_steps() {
        let sched = TrainSchedule::default();
        assert_eq!(lr_at(0, &sched).unwrap(), 0.001);
        assert_eq!(lr_at(3, &sched).unwrap(), 0.001);
        assert!((lr_at(4, &sched).unwrap() - 1e-4).abs() < 1e-12);
        assert!((lr_at(5, &sched).unwrap() - 1e-4).abs() < 1e-12);
        assert!((lr_at(6, &sched).unwrap() - 1e-5).abs() < 1e-12);
        assert!((lr_at(8, &sched).unwrap() - 1e-6).abs() < 1e-15);
        assert!((lr_at(14, &sched).unwrap() - 1e-6).abs() < 1e-15);
    }

    #[test]
    fn lr_is_non_increasing_over_epochs() {
        let sched = TrainSchedule::default();
        let mut prev = f64::INFINITY;
        for e in 0..sched.epochs {
            let lr = lr_at(e, &sched).unwrap();
            assert!(lr <= prev && lr > 0.0);
            prev = lr;
        }
    }

    #[test]
    fn lr_out_of_range_is_error() {
        assert!(lr_at(15, &TrainSchedule::default()).is_err());
    }

    fn fake_records(videos: usize, frames: u64) -> Vec<FrameRecord> {
        let mut out = Vec::new();
        for v in 0..videos {
            for f in 0..frames {
                out.push(FrameRecord {
                    path: format!("v{v}/f{f}.aut1"),
                    video_id: format!("v{v}"),
                    frame_index: f,
                    labels: LabelVector::new([0; 12]).unwrap(),
                });
            }
        }
        out
    }

    #[test]
    fn folds_partition_videos_without_overlap() {
        let records = fake_records(8, 5);
        let splits = make_folds(&records, 4, 11).unwrap();
        assert_eq!(splits.len(), 5);
        assert_eq!(splits[0].name, "official");
        for s in &splits {
            assert!(!s.val_videos.is_empty());
            for v in &s.val_videos {
                assert!(!s.train_videos.contains(v), "{} leaks {v}", s.name);
            }
            assert_eq!(s.val_videos.len() + s.train_videos.len(), 8);
        }
        // 8 videos over 4 folds: every fold holds out exactly 2
        for s in &splits[1..] {
            assert_eq!(s.val_videos.len(), 2);
        }
        // folds tile all videos
        let mut held: Vec<&String> = splits[1..]
            .iter()
            .flat_map(|s| s.val_videos.iter())
            .collect();
        held.sort();
        held.dedup();
        assert_eq!(held.len(), 8);
    }

    #[test]
    fn folds_are_seed_deterministic() {
        let records = fake_records(9, 3);
        assert_eq!(
            make_folds(&records, 4, 5).unwrap(),
            make_folds(&records, 4, 5).unwrap()
        );
        assert_ne!(
            make_folds(&records, 4, 5).unwrap(),
            make_folds(&records, 4, 6).unwrap()
        );
    }

    #[test]
    fn too_few_videos_is_error() {
        let records = fake_records(3, 2);
        assert!(make_folds(&records, 4, 0).is_err());
    }

    #[test]
    fn vote_majority_hand_cases() {
        // votes (1,1,1,0,0) -> 1; (1,1,0,0,0) -> 0
        let col = |bits: [f64; 5]| -> Vec<Vec<[f64; 12]>> {
            (0..5)
                .map(|m| vec![[bits[m]; 12]])
                .collect()
        };
        let three = ensemble_vote(&col([0.9, 0.8, 0.7, 0.2, 0.1])).unwrap();
        assert!(three[0].iter().all(|&b| b));
        let two = ensemble_vote(&col([0.9, 0.8, 0.2, 0.2, 0.1])).unwrap();
        assert!(two[0].iter().all(|&b| !b));
    }

    #[test]
    fn vote_unanimous_and_total() {
        for &p in &[0.1, 0.9] {
            let models: Vec<Vec<[f64; 12]>> = (0..5).map(|_| vec![[p; 12]]).collect();
            let out = ensemble_vote(&models).unwrap();
            assert_eq!(out[0][0], p >= 0.5);
        }
    }

    #[test]
    fn vote_matches_brute_force_over_all_patterns() {
        // all 2^5 vote patterns, one per sample
        let mut models: Vec<Vec<[f64; 12]>> = vec![Vec::new(); 5];
        for pattern in 0u32..32 {
            for (m, model) in models.iter_mut().enumerate() {
                let bit = (pattern >> m) & 1;
                model.push([if bit == 1 { 0.99 } else { 0.01 }; 12]);
            }
        }
        let out = ensemble_vote(&models).unwrap();
        for pattern in 0u32..32 {
            let expect = pattern.count_ones() >= 3;
            assert_eq!(out[pattern as usize][0], expect, "pattern {pattern:05b}");
        }
    }

    #[test]
    fn vote_rejects_wrong_model_count_and_ragged_lengths() {
        let models: Vec<Vec<[f64; 12]>> = (0..4).map(|_| vec![[0.5; 12]]).collect();
        assert!(ensemble_vote(&models).is_err());
        let mut ragged: Vec<Vec<[f64; 12]>> = (0..5).map(|_| vec![[0.5; 12]]).collect();
        ragged[3].push([0.5; 12]);
        assert!(ensemble_vote(&ragged).is_err());
    }

    #[test]
    fn prediction_format_layout() {
        let preds = vec![Prediction {
            video_id: "vid7".into(),
            frame_index: 42,
            probs: [0.25; 12],
            binary: [false; 12],
            fusion_weights: Some([0.5; 12]),
        }];
        let plain = format_predictions(&preds, false);
        let fields: Vec<&str> = plain.trim().split(',').collect();
        assert_eq!(fields.len(), 2 + 12 + 12);
        assert_eq!(fields[0], "vid7");
        assert_eq!(fields[1], "42");
        let with_weights = format_predictions(&preds, true);
        assert_eq!(with_weights.trim().split(',').count(), 2 + 12 + 12 + 12);
    }
}
