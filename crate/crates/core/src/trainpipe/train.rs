//! Joint discriminative + captioning training loop.

use std::fmt::Write as _;
use std::path::Path;

use numkit::{adamw_step, checkpoint, AdamWConfig, LrSchedule, OptimizerState, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{lm_loss, MixedSequence};
use crate::error::{Error, Result};
use crate::nn::{pull_grads, Module};
use crate::prompt::{images_only, instruction_sequence, response_ids, CAPTION_INSTRUCTION, DIFFERENCE_INSTRUCTION};
use crate::scene::{caption, render, SceneSpec};
use crate::tokenizer::Vocab;
use crate::trainpipe::dataset::{sub_seed, TrainPair};
use crate::vpg::FeatureGrid;
use crate::vpgc::{argmax, vpgc_forward, Backbone, Completion};

/// Which weights a run updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Generator and decoder, with no completion module.
    Backbone,
    /// Only the completion module; the backbone stays frozen.
    Completion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub warmup_steps: u64,
    pub batch_disc: usize,
    pub batch_cap: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            warmup_steps: 100,
            batch_disc: 3,
            batch_cap: 8,
            optimizer: AdamWConfig {
                lr_peak: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            warmup_steps: self.warmup_steps.min(self.steps),
            total_steps: self.steps,
            lr_peak: self.optimizer.lr_peak,
        }
    }
}

/// A tokenised instance with its image features.
#[derive(Clone, Debug)]
pub struct Example {
    pub instruction: MixedSequence,
    /// Target tokens, ending with `<eos>`.
    pub response: Vec<usize>,
    pub grids: Vec<FeatureGrid>,
}

pub fn difference_example(vocab: &Vocab, backbone: &Backbone, pair: &TrainPair) -> Result<Example> {
    Ok(Example {
        instruction: instruction_sequence(vocab, &images_only(2), DIFFERENCE_INSTRUCTION),
        response: response_ids(vocab, &pair.difference_sentence),
        grids: vec![
            backbone.encode(&render(&pair.before).0)?,
            backbone.encode(&render(&pair.after).0)?,
        ],
    })
}

pub fn caption_example(vocab: &Vocab, backbone: &Backbone, scene: &SceneSpec) -> Result<Example> {
    Ok(Example {
        instruction: instruction_sequence(vocab, &images_only(1), CAPTION_INSTRUCTION),
        response: response_ids(vocab, &caption(scene)),
        grids: vec![backbone.encode(&render(scene).0)?],
    })
}

/// Teacher-forced forward; returns the logits and, per logits row, the
/// target and whether it is supervised.
pub fn teacher_forced(
    tape: &mut Tape,
    backbone: &Backbone,
    completion: &Completion,
    ex: &Example,
) -> Result<(Var, Vec<usize>, Vec<bool>)> {
    let (&_, feed) = ex
        .response
        .split_last()
        .ok_or_else(|| Error::Sequence("empty response".into()))?;
    let out = vpgc_forward(tape, backbone, completion, &ex.instruction, feed, &ex.grids)?;
    let n = tape.shape(out.logits)[0];
    let first = out.guidance_row;
    let mut targets = vec![0; n];
    let mut mask = vec![false; n];
    for (i, &t) in ex.response.iter().enumerate() {
        targets[first + i] = t;
        mask[first + i] = true;
    }
    Ok((out.logits, targets, mask))
}

pub fn example_loss(tape: &mut Tape, backbone: &Backbone, completion: &Completion, ex: &Example) -> Result<Var> {
    let (logits, targets, mask) = teacher_forced(tape, backbone, completion, ex)?;
    lm_loss(tape, logits, &targets, &mask)
}

/// Share of response tokens (the closing `<eos>` excluded) whose
/// teacher-forced argmax is the target.
pub fn token_accuracy(backbone: &Backbone, completion: &Completion, examples: &[Example]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for ex in examples {
        let mut tape = Tape::new();
        let (logits, targets, mask) = teacher_forced(&mut tape, backbone, completion, ex)?;
        let v = tape.shape(logits)[1];
        let values = tape.value(logits);
        let words = ex.response.len() - 1;
        let first = mask.iter().position(|&m| m).unwrap_or(0);
        for (i, &t) in targets.iter().enumerate().skip(first).take(words) {
            total += 1;
            hit += usize::from(argmax(&values[i * v..(i + 1) * v]) == t);
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no tokens to score".into()));
    }
    Ok(hit as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss_disc: f64,
    pub loss_cap: f64,
}

pub const TRACE_HEADER: &str = "step,lr,loss_disc,loss_cap";

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = format!("{TRACE_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:e},{:.17e},{:.17e}", r.step, r.lr, r.loss_disc, r.loss_cap);
    }
    s
}

/// Moving average of the summed loss over `window` steps ending at `step`.
pub fn moving_average(rows: &[TraceRow], step: u64, window: u64) -> Option<f64> {
    let sel: Vec<f64> = rows
        .iter()
        .filter(|r| r.step <= step && r.step + window > step)
        .map(|r| r.loss_disc + r.loss_cap)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

/// Optimizer and progress; the weights live in the backbone and the
/// completion module.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub phase: Phase,
    pub config: TrainConfig,
    pub opt: OptimizerState,
    /// Steps completed so far.
    pub step: u64,
    pub trace: Vec<TraceRow>,
}

fn trainable<'a>(phase: Phase, backbone: &'a mut Backbone, completion: &'a mut Completion) -> Vec<(String, &'a mut Tensor)> {
    match phase {
        Phase::Backbone => backbone.trainable_parts_mut(),
        Phase::Completion => completion.params_mut(),
    }
}

impl Trainer {
    /// Sets the `requires_grad` flags for `phase` and zeroes the optimizer.
    pub fn new(phase: Phase, config: TrainConfig, backbone: &mut Backbone, completion: &mut Completion) -> Result<Self> {
        backbone.set_trainable(false);
        match phase {
            Phase::Backbone => {
                if completion.variant() != crate::vpgc::Variant::Off {
                    return Err(Error::Config("backbone training runs without a completion module".into()));
                }
                for (_, t) in backbone.trainable_parts_mut() {
                    t.set_requires_grad(true);
                }
            }
            Phase::Completion => completion.set_trainable(true),
        }
        let params = trainable(phase, backbone, completion);
        let refs: Vec<&Tensor> = params.iter().map(|(_, t)| &**t).collect();
        let opt = OptimizerState::new(&refs, config.optimizer);
        Ok(Self {
            phase,
            config,
            opt,
            step: 0,
            trace: Vec::new(),
        })
    }

    pub fn trainable_count(&self, backbone: &mut Backbone, completion: &mut Completion) -> usize {
        trainable(self.phase, backbone, completion).iter().map(|(_, t)| t.numel()).sum()
    }

    /// Batch indices for step `step`, drawn from their own stream so a
    /// resumed run sees the same batches.
    pub fn batch(&self, step: u64, n_disc: usize, n_cap: usize) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, 7, step));
        let disc = (0..self.config.batch_disc.min(if n_disc == 0 { 0 } else { usize::MAX }))
            .map(|_| rng.random_range(0..n_disc))
            .collect();
        let cap = (0..self.config.batch_cap.min(if n_cap == 0 { 0 } else { usize::MAX }))
            .map(|_| rng.random_range(0..n_cap))
            .collect();
        (disc, cap)
    }

    /// Runs steps until `until` (capped at the configured total).
    pub fn run(
        &mut self,
        backbone: &mut Backbone,
        completion: &mut Completion,
        disc: &[Example],
        cap: &[Example],
        until: u64,
    ) -> Result<()> {
        let until = until.min(self.config.steps);
        let schedule = self.config.schedule();
        while self.step < until {
            let step = self.step + 1;
            let (di, ci) = self.batch(step, disc.len(), cap.len());
            if di.is_empty() && ci.is_empty() {
                return Err(Error::Config("both batches are empty".into()));
            }
            let mut tape = Tape::new();
            let loss_disc = batch_loss(&mut tape, backbone, completion, disc, &di)?;
            let loss_cap = batch_loss(&mut tape, backbone, completion, cap, &ci)?;
            let ld = loss_disc.map_or(0.0, |v| tape.scalar(v));
            let lc = loss_cap.map_or(0.0, |v| tape.scalar(v));
            if !ld.is_finite() || !lc.is_finite() {
                log::error!(
                    "step {step}: loss_disc={ld} loss_cap={lc}; lr={}; last row {:?}",
                    schedule.lr_at(step),
                    self.trace.last()
                );
                return Err(Error::NonFiniteLoss {
                    step,
                    loss_disc: ld,
                    loss_cap: lc,
                });
            }
            let total = match (loss_disc, loss_cap) {
                (Some(a), Some(b)) => tape.add(a, b)?,
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!("checked above"),
            };
            let lr = schedule.lr_at(step);
            let mut params = trainable(self.phase, backbone, completion);
            // The off variant has nothing to update; its trace is the
            // frozen model's loss.
            if !params.is_empty() {
                let grads = tape.backward(total)?;
                let mut refs: Vec<&mut Tensor> = params.iter_mut().map(|(_, t)| &mut **t).collect();
                pull_grads(&tape, &grads, &mut refs)?;
                adamw_step(&mut refs, &mut self.opt, lr)?;
                for t in refs.iter_mut() {
                    t.zero_grad();
                }
            }
            self.step = step;
            self.trace.push(TraceRow {
                step,
                lr,
                loss_disc: ld,
                loss_cap: lc,
            });
            if step % 100 == 0 {
                log::info!("step {step}: lr={lr:.3e} disc={ld:.4} cap={lc:.4}");
            }
        }
        Ok(())
    }

    /// Trainable weights and optimizer moments in one file.
    pub fn save(&self, path: &Path, backbone: &mut Backbone, completion: &mut Completion, extra: serde_json::Value) -> Result<()> {
        let params = trainable(self.phase, backbone, completion);
        let m: Vec<Tensor> = self.opt.m.iter().map(|v| vector(v)).collect::<Result<_>>()?;
        let v: Vec<Tensor> = self.opt.v.iter().map(|v| vector(v)).collect::<Result<_>>()?;
        let mut named: Vec<(String, &Tensor)> = params.iter().map(|(n, t)| (n.clone(), &**t)).collect();
        named.extend(m.iter().enumerate().map(|(i, t)| (format!("opt.m.{i}"), t)));
        named.extend(v.iter().enumerate().map(|(i, t)| (format!("opt.v.{i}"), t)));
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        let header = serde_json::json!({
            "phase": self.phase,
            "step": self.step,
            "opt_t": self.opt.t,
            "train": self.config,
            "extra": extra,
        });
        checkpoint::save(path, &header, &refs)?;
        Ok(())
    }

    /// Restores a run saved by [`Trainer::save`]. The loss trace is not
    /// part of the checkpoint.
    pub fn resume(
        path: &Path,
        config: TrainConfig,
        backbone: &mut Backbone,
        completion: &mut Completion,
    ) -> Result<Self> {
        let ck = checkpoint::load(path)?;
        let phase: Phase = serde_json::from_value(ck.config["phase"].clone())?;
        let mut tr = Self::new(phase, config, backbone, completion)?;
        tr.step = ck.config["step"]
            .as_u64()
            .ok_or_else(|| Error::Invalid("checkpoint lacks a step".into()))?;
        tr.opt.t = ck.config["opt_t"]
            .as_u64()
            .ok_or_else(|| Error::Invalid("checkpoint lacks optimizer time".into()))?;
        let mut params = trainable(phase, backbone, completion);
        restore(&ck, &mut params)?;
        for (i, (m, v)) in tr.opt.m.iter_mut().zip(tr.opt.v.iter_mut()).enumerate() {
            copy_exact(&ck, &format!("opt.m.{i}"), m)?;
            copy_exact(&ck, &format!("opt.v.{i}"), v)?;
        }
        Ok(tr)
    }
}

fn vector(v: &[f64]) -> Result<Tensor> {
    Ok(Tensor::new(vec![v.len()], v.to_vec())?)
}

fn copy_exact(ck: &checkpoint::Checkpoint, name: &str, dst: &mut [f64]) -> Result<()> {
    let t = ck
        .get(name)
        .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
    if t.numel() != dst.len() {
        return Err(Error::Invalid(format!("{name}: {} values, expected {}", t.numel(), dst.len())));
    }
    dst.copy_from_slice(t.data());
    Ok(())
}

/// Copies tensors by name, leaving `requires_grad` flags alone.
pub fn restore(ck: &checkpoint::Checkpoint, params: &mut [(String, &mut Tensor)]) -> Result<()> {
    for (name, t) in params.iter_mut() {
        let src = ck
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name}")))?;
        if src.shape() != t.shape() {
            return Err(Error::Invalid(format!(
                "{name}: shape {:?}, expected {:?}",
                src.shape(),
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

pub fn save_module(path: &Path, config: &serde_json::Value, params: &[(String, &Tensor)]) -> Result<()> {
    let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    checkpoint::save(path, config, &refs)?;
    Ok(())
}

fn batch_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    completion: &Completion,
    examples: &[Example],
    idx: &[usize],
) -> Result<Option<Var>> {
    let mut acc: Option<Var> = None;
    for &i in idx {
        let l = example_loss(tape, backbone, completion, &examples[i])?;
        acc = Some(match acc {
            Some(a) => tape.add(a, l)?,
            None => l,
        });
    }
    Ok(acc.map(|a| tape.scale(a, 1.0 / idx.len() as f64)))
}
