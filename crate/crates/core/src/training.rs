//! Optimization loop: Adam, the schedule-sampling ramp, per-epoch learning
//! rate halving, length-based curriculum ordering, and staged multi-stream
//! training.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};
use crate::metrics::{CerReport, UtteranceScore};
use crate::model::{
    decode_utterance, forward_teacher_forced, save_checkpoint, tokens_from_symbols, BoundModel,
    DecodeOptions, ForwardOptions, ModelConfig, ModelParams,
};
use crate::tensor::Tensor;

/// One staged-training phase: how many epochs, and which parameter groups
/// move. `None` trains everything.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub epochs: usize,
    pub prefixes: Option<Vec<String>>,
}

/// Expands a stage group name to parameter-name prefixes. Unknown names pass
/// through as raw prefixes.
pub fn expand_group(name: &str) -> Vec<String> {
    match name {
        "listener" | "audio" => vec!["audio_enc".into()],
        "watcher" | "video" => vec!["video_enc".into()],
        "speller" | "decoder" => vec![
            "decoder".into(),
            "embedding".into(),
            "output".into(),
            "audio_att".into(),
            "video_att".into(),
            "scorer".into(),
        ],
        other => vec![other.to_string()],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    /// Pure teacher forcing through this epoch.
    pub teacher_forced_epochs: usize,
    /// Epoch at which the linear ramp reaches `ss_final`; constant after.
    pub ss_ramp_end: usize,
    pub ss_final: f64,
    pub initial_lr: f64,
    /// First epoch of per-epoch halving.
    pub halve_from: usize,
    pub curriculum: bool,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub stages: Vec<Stage>,
}

impl TrainSchedule {
    /// The published 15-epoch recipe: teacher forcing through epoch 4,
    /// sampling rate ramping to 0.4 by epoch 8, lr 2e-4 halved from epoch 11.
    pub fn paper() -> Self {
        TrainSchedule {
            epochs: 15,
            teacher_forced_epochs: 4,
            ss_ramp_end: 8,
            ss_final: 0.4,
            initial_lr: 2e-4,
            halve_from: 11,
            curriculum: true,
            batch_size: 8,
            clip_norm: 5.0,
            label_smoothing: 0.1,
            stages: Vec::new(),
        }
    }

    /// Desk-scale schedule: anchors scale proportionally with the epoch
    /// count; learning rate sized for the small model.
    pub fn desk(epochs: usize) -> Self {
        let anchor = |paper: usize| {
            ((paper * epochs) as f64 / 15.0).round().max(1.0) as usize
        };
        let tf = anchor(4);
        let ramp_end = anchor(8).max(tf + 1);
        let halve_from = anchor(11).max(ramp_end + 1);
        TrainSchedule {
            epochs,
            teacher_forced_epochs: tf,
            ss_ramp_end: ramp_end,
            ss_final: 0.4,
            initial_lr: 2e-3,
            halve_from,
            curriculum: true,
            batch_size: 8,
            clip_norm: 5.0,
            label_smoothing: 0.1,
            stages: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ss_final) {
            return Err(Error::Config(format!(
                "ss_final {} outside [0, 1]",
                self.ss_final
            )));
        }
        if self.ss_ramp_end <= self.teacher_forced_epochs {
            return Err(Error::Config(
                "ss_ramp_end must exceed teacher_forced_epochs".into(),
            ));
        }
        if self.halve_from > self.epochs + 1 {
            return Err(Error::Config(format!(
                "halve_from {} beyond the last epoch {}",
                self.halve_from, self.epochs
            )));
        }
        if !self.stages.is_empty() {
            let total: usize = self.stages.iter().map(|s| s.epochs).sum();
            if total != self.epochs {
                return Err(Error::Config(format!(
                    "stage epochs sum to {total}, schedule has {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    /// Schedule-sampling rate for a 1-based epoch: zero through the
    /// teacher-forced epochs, then a linear ramp to `ss_final` at
    /// `ss_ramp_end`, constant after.
    pub fn ss_rate_at(&self, epoch: usize) -> f64 {
        if epoch <= self.teacher_forced_epochs {
            0.0
        } else if epoch >= self.ss_ramp_end {
            self.ss_final
        } else {
            let span = (self.ss_ramp_end - self.teacher_forced_epochs) as f64;
            self.ss_final * (epoch - self.teacher_forced_epochs) as f64 / span
        }
    }

    /// Learning rate for a 1-based epoch: constant, then halved once per
    /// epoch starting at `halve_from`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.halve_from {
            self.initial_lr
        } else {
            self.initial_lr * 0.5f64.powi((epoch - self.halve_from + 1) as i32)
        }
    }

    /// `(stage index, prefixes)` for a 1-based epoch.
    fn stage_at(&self, epoch: usize) -> (usize, Option<&[String]>) {
        if self.stages.is_empty() {
            return (0, None);
        }
        let mut start = 1;
        for (i, st) in self.stages.iter().enumerate() {
            if epoch < start + st.epochs {
                return (i, st.prefixes.as_deref());
            }
            start += st.epochs;
        }
        let last = self.stages.len() - 1;
        (last, self.stages[last].prefixes.as_deref())
    }
}

/// Adam with bias correction; moment buffers keyed by parameter name and
/// created lazily, so stage-frozen parameters keep untouched state.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

fn prefix_match(prefixes: &[String], name: &str) -> bool {
    prefixes
        .iter()
        .any(|p| name == p || (name.starts_with(p.as_str()) && name[p.len()..].starts_with('.')))
}

impl Adam {
    /// One update over the active subset. Every active parameter must have a
    /// gradient entry.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        active: Option<&[String]>,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut missing: Option<String> = None;
        params.visit_mut(&mut |name, tensor| {
            if missing.is_some() {
                return;
            }
            if let Some(prefixes) = active {
                if !prefix_match(prefixes, &name) {
                    return;
                }
            }
            let Some(grad) = grads.get(&name) else {
                missing = Some(name);
                return;
            };
            let n = tensor.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            let data = tensor.data_mut();
            for i in 0..n {
                let gi = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        });
        match missing {
            Some(name) => Err(Error::Contract(format!(
                "adam: no gradient for active parameter {name}"
            ))),
            None => Ok(()),
        }
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .map(|t| t.data().iter().map(|&v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub ss_rate: f64,
    pub train_loss: f64,
    pub dev_cer: f64,
}

pub struct TrainResult {
    /// Parameters of the best-dev-CER epoch.
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_dev_cer: f64,
    pub metrics: Vec<EpochMetrics>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Batch index plan for one epoch. Curriculum epochs run shortest-first;
/// later epochs shuffle within same-length buckets and then shuffle batch
/// order, so batches stay length-homogeneous.
fn batch_plan(
    lengths: &[usize],
    batch_size: usize,
    curriculum_epoch: bool,
    rng: &mut ChaCha12Rng,
) -> Vec<Vec<usize>> {
    if curriculum_epoch {
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.sort_by_key(|&i| (lengths[i], i));
        return order.chunks(batch_size).map(|c| c.to_vec()).collect();
    }
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lengths.iter().enumerate() {
        buckets.entry(l).or_default().push(i);
    }
    let mut batches = Vec::new();
    for bucket in buckets.values_mut() {
        bucket.shuffle(rng);
        for chunk in bucket.chunks(batch_size) {
            batches.push(chunk.to_vec());
        }
    }
    batches.shuffle(rng);
    batches
}

fn param_norm_report(params: &mut ModelParams) -> String {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    params.visit_mut(&mut |name, t| {
        let group = name.split('.').next().unwrap_or("").to_string();
        *groups.entry(group).or_insert(0.0) += t.data().iter().map(|&v| v * v).sum::<f64>();
    });
    groups
        .into_iter()
        .map(|(g, sq)| format!("{g}: {:.4}", sq.sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Greedy-decodes a split and returns its CER (used for per-epoch dev
/// scoring). Utterances decode in parallel; aggregation is in index order.
pub fn split_cer(
    cfg: &ModelConfig,
    params: &ModelParams,
    corpus: &Corpus,
    split: Split,
    max_len: usize,
) -> Result<f64> {
    let scores: Result<Vec<UtteranceScore>> = corpus
        .split(split)
        .par_iter()
        .map(|utt| {
            let result = decode_utterance(
                cfg,
                params,
                utt,
                &DecodeOptions {
                    beam_width: 1,
                    temperature: 1.0,
                    max_len,
                },
            )?;
            Ok(UtteranceScore::new(
                utt.id.clone(),
                &tokens_from_symbols(&utt.symbols),
                result.hypothesis_tokens(),
            ))
        })
        .collect();
    Ok(CerReport::from_scores(scores?).cer)
}

/// Runs the full recipe over the corpus and returns the best-dev checkpoint.
/// With `outdir` set, also writes per-epoch checkpoints, `best.ckpt`, and an
/// append-only `log.jsonl`.
pub fn train(
    cfg: &ModelConfig,
    sched: &TrainSchedule,
    corpus: &Corpus,
    seed: u64,
    outdir: Option<&Path>,
) -> Result<TrainResult> {
    cfg.validate()?;
    sched.validate()?;
    let mut params = ModelParams::init(cfg, mix(seed, 0x1217))?;
    let mut adam = Adam::default();
    let train_utts = corpus.split(Split::Train);
    if train_utts.is_empty() {
        return Err(Error::EmptySequence("train split"));
    }
    let lengths: Vec<usize> = train_utts.iter().map(|u| u.symbols.len()).collect();
    let max_decode_len = 2 * corpus.spec.len_max;

    if let Some(dir) = outdir {
        std::fs::create_dir_all(dir)?;
    }
    let mut log = match outdir {
        Some(dir) => Some(File::create(dir.join("log.jsonl"))?),
        None => None,
    };

    let mut metrics = Vec::with_capacity(sched.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;

    for epoch in 1..=sched.epochs {
        let (stage_idx, stage_prefixes) = sched.stage_at(epoch);
        let lr = sched.lr_at(epoch);
        let ss_rate = sched.ss_rate_at(epoch);
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(mix(seed, 0xBA7C4 + epoch as u64));
        let mut ss_rng = ChaCha12Rng::seed_from_u64(mix(seed, 0x55AA + epoch as u64));
        let curriculum_epoch = sched.curriculum && epoch == 1;
        let plan = batch_plan(&lengths, sched.batch_size, curriculum_epoch, &mut shuffle_rng);

        let opts = ForwardOptions {
            ss_rate,
            label_smoothing: sched.label_smoothing,
            audio_valid: None,
            video_valid: None,
        };
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (batch_idx, batch) in plan.iter().enumerate() {
            let mut g = Graph::new();
            let mut model = match stage_prefixes {
                None => BoundModel::new(&mut g, cfg, &params, true)?,
                Some(p) => BoundModel::new_filtered(&mut g, cfg, &params, p.to_vec())?,
            };
            let mut batch_loss = None;
            for &i in batch {
                let (loss, _) =
                    forward_teacher_forced(&mut g, &mut model, &train_utts[i], &opts, &mut ss_rng)?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => g.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("non-empty batch");
            let mean = g.scale(total, 1.0 / batch.len() as f64);
            let loss_value = g.value(mean).data()[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    report: param_norm_report(&mut params),
                });
            }
            loss_sum += loss_value * batch.len() as f64;
            loss_count += batch.len();
            g.backward(mean)?;
            let mut grads = model.gradients(&g);
            clip_global_norm(&mut grads, sched.clip_norm);
            adam.step(&mut params, &grads, lr, stage_prefixes)?;
        }

        let train_loss = loss_sum / loss_count as f64;
        let dev_cer = split_cer(cfg, &params, corpus, Split::Dev, max_decode_len)?;
        let em = EpochMetrics {
            epoch,
            stage: stage_idx,
            lr,
            ss_rate,
            train_loss,
            dev_cer,
        };
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&em)?)?;
        }
        if let Some(dir) = outdir {
            save_checkpoint(&dir.join(format!("epoch_{epoch:03}.ckpt")), cfg, &params)?;
        }
        metrics.push(em);
        if best.as_ref().map_or(true, |(b, _, _)| dev_cer < *b) {
            best = Some((dev_cer, epoch, params.clone()));
        }
    }

    let (best_dev_cer, best_epoch, best_params) = best.expect("at least one epoch");
    if let Some(dir) = outdir {
        save_checkpoint(&dir.join("best.ckpt"), cfg, &best_params)?;
    }
    Ok(TrainResult {
        params: best_params,
        best_epoch,
        best_dev_cer,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rnn::EncoderConfig;
    use rand::Rng;

    #[test]
    fn ss_rate_follows_published_anchors() {
        let s = TrainSchedule::paper();
        assert_eq!(s.ss_rate_at(1), 0.0);
        assert_eq!(s.ss_rate_at(4), 0.0);
        assert!((s.ss_rate_at(6) - 0.2).abs() < 1e-15);
        assert!((s.ss_rate_at(8) - 0.4).abs() < 1e-15);
        assert!((s.ss_rate_at(12) - 0.4).abs() < 1e-15);
        // Ramp interior values.
        assert!((s.ss_rate_at(5) - 0.1).abs() < 1e-15);
        assert!((s.ss_rate_at(7) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lr_halves_from_epoch_eleven() {
        let s = TrainSchedule::paper();
        assert_eq!(s.lr_at(1), 2e-4);
        assert_eq!(s.lr_at(10), 2e-4);
        assert!((s.lr_at(11) - 1e-4).abs() < 1e-18);
        assert!((s.lr_at(12) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(13) - 2.5e-5).abs() < 1e-18);
    }

    #[test]
    fn desk_schedule_scales_anchors() {
        let s = TrainSchedule::desk(15);
        assert_eq!(s.teacher_forced_epochs, 4);
        assert_eq!(s.ss_ramp_end, 8);
        assert_eq!(s.halve_from, 11);
        let s6 = TrainSchedule::desk(6);
        assert_eq!(s6.teacher_forced_epochs, 2);
        assert_eq!(s6.ss_ramp_end, 3);
        assert_eq!(s6.halve_from, 4);
        s6.validate().unwrap();
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let cfg = ModelConfig {
            data_symbols: 4,
            embed_dim: 3,
            audio_dim: 2,
            video_dim: 2,
            audio_encoder: Some(EncoderConfig {
                hidden: 2,
                subsample: vec![true],
            }),
            video_encoder: None,
            decoder_hidden: 4,
            attention_hidden: 3,
            scorer_hidden: 2,
            strategy: crate::model::FusionStrategy::AudioOnly,
        };
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let before = params.to_map();
        let grads: BTreeMap<String, Tensor> = before
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        let mut adam = Adam::default();
        adam.step(&mut params, &grads, 0.01, None).unwrap();
        assert_eq!(params.to_map(), before);
        // Moments exist but are all zero.
        for buf in adam.m.values().chain(adam.v.values()) {
            assert!(buf.iter().all(|&v| v == 0.0));
        }
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        // Single scalar parameter, constant gradient: bias correction makes
        // the first update magnitude lr / (1 + eps-term).
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::scalar(1.0));
        // Drive Adam through a minimal ModelParams stand-in: reuse the map
        // API directly by building a scalar-only fake via visit_mut is not
        // possible, so exercise the arithmetic directly.
        let mut adam = Adam::default();
        let g = 0.37;
        let lr = 0.001;
        adam.step += 1;
        let bc1 = 1.0 - adam.beta1.powi(1);
        let bc2 = 1.0 - adam.beta2.powi(1);
        let m1 = (1.0 - adam.beta1) * g / bc1;
        let v1 = (1.0 - adam.beta2) * g * g / bc2;
        let update = lr * m1 / (v1.sqrt() + adam.epsilon);
        assert!((update.abs() - lr).abs() < 1e-9, "update {update}");
    }

    #[test]
    fn adam_missing_active_gradient_is_contract_error() {
        let cfg = ModelConfig {
            data_symbols: 4,
            embed_dim: 3,
            audio_dim: 2,
            video_dim: 2,
            audio_encoder: Some(EncoderConfig {
                hidden: 2,
                subsample: vec![true],
            }),
            video_encoder: None,
            decoder_hidden: 4,
            attention_hidden: 3,
            scorer_hidden: 2,
            strategy: crate::model::FusionStrategy::AudioOnly,
        };
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let grads = BTreeMap::new();
        let mut adam = Adam::default();
        let r = adam.step(&mut params, &grads, 0.01, Some(&["decoder".to_string()]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::vector(vec![3.0, 4.0]));
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads["a"].data(), &[3.0, 4.0]);
        let _ = clip_global_norm(&mut grads, 1.0);
        let clipped: f64 = grads["a"].data().iter().map(|v| v * v).sum::<f64>();
        assert!((clipped.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_plan_curriculum_sorts_by_length() {
        let lengths = vec![5, 2, 7, 2, 4];
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let plan = batch_plan(&lengths, 2, true, &mut rng);
        let flat: Vec<usize> = plan.into_iter().flatten().collect();
        assert_eq!(flat, vec![1, 3, 4, 0, 2]);
    }

    #[test]
    fn batch_plan_buckets_are_length_homogeneous() {
        let lengths = vec![3, 4, 3, 4, 3, 4, 3, 5];
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let plan = batch_plan(&lengths, 2, false, &mut rng);
        let mut seen: Vec<usize> = Vec::new();
        for batch in &plan {
            let l = lengths[batch[0]];
            assert!(batch.iter().all(|&i| lengths[i] == l));
            seen.extend(batch);
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn ramp_midpoint_is_half_of_final() {
        let mut s = TrainSchedule::paper();
        s.teacher_forced_epochs = 4;
        s.ss_ramp_end = 8;
        // Midpoint of the (4, 8] ramp is epoch 6.
        assert!((s.ss_rate_at(6) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn stage_lookup_walks_epochs() {
        let mut s = TrainSchedule::paper();
        s.stages = vec![
            Stage {
                epochs: 3,
                prefixes: Some(vec!["video_enc".into()]),
            },
            Stage {
                epochs: 12,
                prefixes: None,
            },
        ];
        s.validate().unwrap();
        assert_eq!(s.stage_at(1).0, 0);
        assert_eq!(s.stage_at(3).0, 0);
        assert_eq!(s.stage_at(4).0, 1);
        assert_eq!(s.stage_at(15).0, 1);
    }

    #[test]
    fn adam_is_deterministic_across_identical_runs() {
        let cfg = ModelConfig {
            data_symbols: 4,
            embed_dim: 3,
            audio_dim: 2,
            video_dim: 2,
            audio_encoder: Some(EncoderConfig {
                hidden: 2,
                subsample: vec![true],
            }),
            video_encoder: None,
            decoder_hidden: 4,
            attention_hidden: 3,
            scorer_hidden: 2,
            strategy: crate::model::FusionStrategy::AudioOnly,
        };
        let run = || {
            let mut params = ModelParams::init(&cfg, 3).unwrap();
            let mut adam = Adam::default();
            let mut rng = ChaCha12Rng::seed_from_u64(5);
            for _ in 0..100 {
                let grads: BTreeMap<String, Tensor> = params
                    .to_map()
                    .iter()
                    .map(|(k, t)| {
                        let d: Vec<f64> =
                            (0..t.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
                        (k.clone(), Tensor::new(t.shape().to_vec(), d).unwrap())
                    })
                    .collect();
                adam.step(&mut params, &grads, 1e-3, None).unwrap();
            }
            params.to_map()
        };
        let a = run();
        let b = run();
        for (k, t) in &a {
            let u = &b[k];
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{k}");
            }
        }
    }
}
