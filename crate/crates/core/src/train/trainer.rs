//! Optimization loop over the curriculum stage plan.
//!
//! Each step encodes every query and positive target on its own tape, then
//! evaluates the batch-level terms (both InfoNCE losses and the balance loss)
//! on a detached tape over the gathered embeddings and routing distributions.
//! The gradients of those leaves seed the per-sequence backward sweeps, and
//! per-sequence parameter gradients are summed in batch order. The result is
//! independent of how many threads encoded the batch.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ablation::{apply_ablation, AblationFlags, Wiring};
use super::losses::{info_nce_var, total_loss, LossComponents, LossWeights};
use super::optim::AdamW;
use crate::adapter::{balance_loss_var, AdapterConfig};
use crate::autodiff::{Tape, Var};
use crate::backbone::ModelConfig;
use crate::data::{make_stage_plan, rewrite_for_stage, CurriculumExample, SerializedSequence, StagePlan};
use crate::error::{Error, Result};
use crate::eval::retrieval::evaluate_retrieval;
use crate::model::Model;
use crate::params::ParamStore;
use crate::rollout::{encode_serialized, EmbedMode, Encoded};
use crate::seeds::{self, Stream};
use crate::tensor::Real;
use crate::vocab::Vocab;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Root seed for initialization, shuffling, dropout and data.
    pub seed: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Total epochs across all stages; may be fractional.
    pub epochs: f64,
    /// Curriculum transition stages `S` (the plan has `S + 1` stages).
    pub stages: usize,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Trailing dataset examples held out for validation.
    pub validation_count: usize,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
    /// Emit a checkpoint event every this many steps; 0 disables.
    pub checkpoint_every: usize,
    /// Drop in-batch negatives whose target payload equals the positive's.
    pub mask_duplicate_targets: bool,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 64,
            learning_rate: 5e-5,
            epochs: 5.0,
            stages: 4,
            weight_decay: 0.01,
            grad_clip: 1.0,
            validation_count: 200,
            max_steps: None,
            checkpoint_every: 0,
            mask_duplicate_targets: true,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive batches need batch_size >= 2".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.epochs > 0.0) || !self.epochs.is_finite() {
            return Err(Error::Config("learning_rate and epochs must be positive".into()));
        }
        if self.stages == 0 {
            return Err(Error::Config("at least one curriculum stage is required".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub epoch: f64,
    pub components: LossComponents,
    pub total: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Mean routing distribution over the batch's routed steps.
    pub routing_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub stage: usize,
    pub epoch: f64,
    pub latent_steps: usize,
    pub hit_at_1: f64,
    pub per_modality: BTreeMap<String, f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore<f32>,
    pub optimizer: AdamW,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub history: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainState {
    pub fn last_validation(&self) -> Option<&ValidationRecord> {
        self.validation.last()
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Validation(&'a ValidationRecord),
    /// Every step of `stage` has been taken.
    StageComplete { stage: usize },
    /// Periodic mid-stage checkpoint opportunity.
    Periodic { stage: usize },
    Diverged { message: &'a str },
}

/// Observer callback; errors abort the run.
pub type Observer<'o> = dyn FnMut(&TrainEvent<'_>, &TrainState) -> Result<()> + 'o;

/// Step boundaries of each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub plan: Vec<StagePlan>,
    pub steps_per_epoch: usize,
    /// Exclusive end step of each stage.
    pub stage_ends: Vec<usize>,
}

impl Schedule {
    pub fn total_steps(&self) -> usize {
        *self.stage_ends.last().unwrap_or(&0)
    }

    pub fn stage_at(&self, step: usize) -> Option<usize> {
        self.stage_ends.iter().position(|&end| step < end)
    }
}

/// Builds the model structure and a fresh initialization from the init stream.
pub fn build_model(
    model: &ModelConfig,
    adapter: &AdapterConfig,
    wiring: &Wiring,
    seed: u64,
) -> Result<(Model, ParamStore<f32>)> {
    model.validate()?;
    let vocab = Vocab::standard();
    if model.vocab_size != vocab.len() {
        return Err(Error::Config(format!("vocab_size {} but the vocabulary has {}", model.vocab_size, vocab.len())));
    }
    let mut store = ParamStore::new();
    let mut rng = seeds::rng(seed, Stream::Init, &[]);
    let m = Model::build(&mut store, model, adapter, &wiring.adapter, vocab.special(), &mut rng)?;
    Ok((m, store))
}

struct SideResult<'p, T: Real> {
    tape: Tape<'p, T>,
    enc: Encoded,
}

/// Loss values and summed parameter gradients of one batch.
pub struct BatchResult<T = f32> {
    pub components: LossComponents,
    pub total: f64,
    pub grads: Vec<T>,
    pub routing_mean: Vec<f64>,
}

pub struct Trainer {
    pub vocab: Vocab,
    pub model: Model,
    pub model_config: ModelConfig,
    pub adapter_config: AdapterConfig,
    pub loss: LossWeights,
    pub config: TrainConfig,
    pub wiring: Wiring,
    pub plan: Vec<StagePlan>,
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        adapter_config: AdapterConfig,
        loss: LossWeights,
        config: TrainConfig,
    ) -> Result<(Self, TrainState)> {
        config.validate()?;
        loss.validate()?;
        let wiring = apply_ablation(&config.ablation, &adapter_config, config.stages)?;
        let (model, store) = build_model(&model_config, &adapter_config, &wiring, config.seed)?;
        let plan = make_stage_plan(wiring.stages, config.epochs, model.latent_steps())?;
        let optimizer = AdamW::new(store.scalar_count(), config.weight_decay, config.grad_clip);
        let state = TrainState { store, optimizer, step: 0, history: Vec::new(), validation: Vec::new() };
        let trainer = Self { vocab: Vocab::standard(), model, model_config, adapter_config, loss, config, wiring, plan };
        Ok((trainer, state))
    }

    /// Splits a dataset into training and trailing validation examples.
    pub fn split<'a>(&self, data: &'a [CurriculumExample]) -> Result<(&'a [CurriculumExample], &'a [CurriculumExample])> {
        let v = self.config.validation_count;
        if data.len() <= v {
            return Err(Error::Config(format!("{} examples cannot hold out {v} for validation", data.len())));
        }
        Ok(data.split_at(data.len() - v))
    }

    pub fn schedule(&self, train_count: usize) -> Schedule {
        let steps_per_epoch = train_count.div_ceil(self.config.batch_size).max(1);
        let mut cumulative = 0.0;
        let stage_ends = self
            .plan
            .iter()
            .map(|p| {
                cumulative += p.epochs;
                (cumulative * steps_per_epoch as f64).round() as usize
            })
            .collect();
        Schedule { plan: self.plan.clone(), steps_per_epoch, stage_ends }
    }

    /// Dataset indices of the batch at `step`: consecutive slices of a stream
    /// of per-epoch permutations.
    pub fn batch_indices(&self, step: usize, train_count: usize) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let epoch = pos / train_count;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut perm: Vec<usize> = (0..train_count).collect();
                    let mut rng = seeds::rng(self.config.seed, Stream::Shuffle, &[epoch as u64]);
                    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("permutation").1[pos % train_count]
            })
            .collect()
    }

    fn encode_side<'p, T: Real>(&self, store: &'p ParamStore<T>, seq: &SerializedSequence, path: [u64; 3]) -> Result<SideResult<'p, T>> {
        let mut tape = Tape::new(store);
        let mut rng = seeds::rng(self.config.seed, Stream::Dropout, &path);
        let dropout = (self.adapter_config.dropout_rate > 0.0).then_some(&mut rng);
        let enc = encode_serialized(&mut tape, &self.model, seq, EmbedMode::Train, dropout)?;
        Ok(SideResult { tape, enc })
    }

    /// Loss and gradients of one batch of examples at `plan`'s serialization.
    /// Generic over precision so that the objective can be checked in f64.
    pub fn batch_gradients<T: Real>(
        &self,
        store: &ParamStore<T>,
        batch: &[&CurriculumExample],
        plan: &StagePlan,
        step: usize,
    ) -> Result<BatchResult<T>> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let placement = self.model_config.anchor_placement;
        let pairs = batch
            .iter()
            .map(|ex| rewrite_for_stage(ex, plan, &self.vocab, placement))
            .collect::<Result<Vec<_>>>()?;
        let sides: Vec<SideResult<T>> = (0..2 * n)
            .into_par_iter()
            .map(|j| {
                let seq = if j % 2 == 0 { &pairs[j / 2].query } else { &pairs[j / 2].target };
                self.encode_side(store, seq, [step as u64, (j / 2) as u64, (j % 2) as u64])
            })
            .collect::<Result<_>>()?;

        let d = self.model_config.hidden_dim;
        let row = |s: &SideResult<T>, v: Var| -> Vec<f64> { s.tape.value(v).iter().map(|x| x.as_f64()).collect() };
        let anchor = |s: &SideResult<T>| s.enc.embeddings.e_anc.expect("training mode yields anchor embeddings");
        let gather = |parity: usize, f: &dyn Fn(&SideResult<T>) -> Var| -> Vec<f64> {
            sides.iter().skip(parity).step_by(2).flat_map(|s| row(s, f(s))).collect()
        };
        let mut bt = Tape::<f64>::detached();
        let qg = bt.leaf(n, d, gather(0, &|s| s.enc.embeddings.e_gen));
        let tg = bt.leaf(n, d, gather(1, &|s| s.enc.embeddings.e_gen));
        let qa = bt.leaf(n, d, gather(0, &anchor));
        let ta = bt.leaf(n, d, gather(1, &anchor));
        let same: Option<Vec<Vec<bool>>> = self.config.mask_duplicate_targets.then(|| {
            let keys: Vec<&[String]> = batch.iter().map(|e| e.target_tokens()).collect();
            keys.iter().map(|a| keys.iter().map(|b| a == b).collect()).collect()
        });
        let tau = self.loss.temperature;
        let nce_gen = info_nce_var(&mut bt, qg, tg, tau, same.as_deref())?;
        let nce_anc = info_nce_var(&mut bt, qa, ta, tau, same.as_deref())?;
        let mut pi_leaves: Vec<Vec<Var>> = Vec::with_capacity(2 * n);
        for s in &sides {
            pi_leaves.push(
                s.enc.trace.routing_vars.iter().map(|v| {
                    let (r, c) = s.tape.shape(*v);
                    bt.leaf(r, c, row(s, *v))
                }).collect(),
            );
        }
        let all_pis: Vec<Var> = pi_leaves.iter().flatten().copied().collect();
        let balance = if all_pis.is_empty() { None } else { Some(balance_loss_var(&mut bt, &all_pis)?) };
        let routing_mean = if all_pis.is_empty() {
            Vec::new()
        } else {
            let m = bt.shape(all_pis[0]).1;
            let mut mean = vec![0.0; m];
            for v in &all_pis {
                mean.iter_mut().zip(bt.value(*v)).for_each(|(a, b)| *a += b / all_pis.len() as f64);
            }
            mean
        };

        let g_term = bt.scale(nce_gen, self.loss.lambda_gen);
        let a_term = bt.scale(nce_anc, self.loss.lambda_anc);
        let mut objective = bt.add(g_term, a_term);
        if let Some(b) = balance {
            let b_term = bt.scale(b, self.loss.lambda_bal);
            objective = bt.add(objective, b_term);
        }
        let grads = bt.backward_scalar(objective);

        let ce_count: usize = sides.iter().map(|s| s.enc.ce_count).sum();
        let ce_total: f64 = sides.iter().filter_map(|s| s.enc.ce_sum.map(|v| s.tape.scalar(v).as_f64())).sum();
        let components = LossComponents {
            ce: if ce_count == 0 { 0.0 } else { ce_total / ce_count as f64 },
            nce_gen: bt.scalar(nce_gen),
            nce_anc: bt.scalar(nce_anc),
            balance: balance.map_or(0.0, |b| bt.scalar(b)),
        };
        let total = total_loss(&components, &self.loss)?;

        let leaf_rows = |leaf: Var, r: usize| -> Vec<T> {
            grads.wrt(leaf).map_or(vec![T::zero(); d], |g| g[r * d..(r + 1) * d].iter().map(|x| T::of(*x)).collect())
        };
        let per_side: Vec<Vec<T>> = sides
            .par_iter()
            .enumerate()
            .map(|(j, s)| {
                let (i, is_target) = (j / 2, j % 2 == 1);
                let mut seeds_ = vec![
                    (s.enc.embeddings.e_gen, leaf_rows(if is_target { tg } else { qg }, i)),
                    (anchor(s), leaf_rows(if is_target { ta } else { qa }, i)),
                ];
                if let Some(ce) = s.enc.ce_sum {
                    seeds_.push((ce, vec![T::of(1.0 / ce_count as f64)]));
                }
                for (v, leaf) in s.enc.trace.routing_vars.iter().zip(&pi_leaves[j]) {
                    let g = grads.wrt(*leaf).map_or_else(|| vec![T::zero(); bt.value(*leaf).len()], |g| g.iter().map(|x| T::of(*x)).collect());
                    seeds_.push((*v, g));
                }
                s.tape.backward(&seeds_).flat_param_grads(store)
            })
            .collect();
        let mut summed = vec![T::zero(); store.scalar_count()];
        for g in &per_side {
            summed.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b);
        }
        Ok(BatchResult { components, total, grads: summed, routing_mean })
    }

    /// Runs (or resumes) the schedule from `state.step`. `train` and `val`
    /// must be the same sets on resume.
    pub fn run(
        &self,
        state: &mut TrainState,
        train: &[CurriculumExample],
        val: &[CurriculumExample],
        observer: &mut Observer<'_>,
    ) -> Result<Schedule> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let schedule = self.schedule(train.len());
        let end = self.config.max_steps.map_or(schedule.total_steps(), |m| m.min(schedule.total_steps()));
        let lr = self.config.learning_rate;
        while state.step < end {
            let step = state.step;
            let stage = schedule.stage_at(step).expect("step within schedule");
            let plan = &schedule.plan[stage];
            let batch: Vec<&CurriculumExample> = self.batch_indices(step, train.len()).into_iter().map(|i| &train[i]).collect();
            let result = self.batch_gradients(&state.store, &batch, plan, step);
            let result = match result {
                Ok(r) if r.total.is_finite() && r.grads.iter().all(|g| g.is_finite()) => r,
                Ok(r) => return self.diverge(state, observer, format!("non-finite loss {} at step {step}", r.total)),
                Err(Error::NonFinite(m)) => return self.diverge(state, observer, format!("{m} at step {step}")),
                Err(e) => return Err(e),
            };
            let grad_norm = match state.optimizer.update(&mut state.store, &result.grads, lr) {
                Ok(g) => g,
                Err(Error::NonFinite(m)) => return self.diverge(state, observer, format!("{m} at step {step}")),
                Err(e) => return Err(e),
            };
            state.step += 1;
            let record = StepRecord {
                step,
                stage,
                epoch: state.step as f64 / schedule.steps_per_epoch as f64,
                components: result.components,
                total: result.total,
                lr,
                grad_norm,
                routing_mean: result.routing_mean,
            };
            state.history.push(record.clone());
            observer(&TrainEvent::Step(&record), state)?;
            let stage_done = state.step == schedule.stage_ends[stage];
            let epoch_done = state.step.is_multiple_of(schedule.steps_per_epoch);
            if (stage_done || epoch_done || state.step == end) && !val.is_empty() {
                let record = self.validate(state, val, stage, plan.latent_budget, &schedule)?;
                state.validation.push(record.clone());
                observer(&TrainEvent::Validation(&record), state)?;
            }
            if stage_done {
                observer(&TrainEvent::StageComplete { stage }, state)?;
            } else if self.config.checkpoint_every > 0 && state.step.is_multiple_of(self.config.checkpoint_every) {
                observer(&TrainEvent::Periodic { stage }, state)?;
            }
        }
        Ok(schedule)
    }

    fn validate(
        &self,
        state: &TrainState,
        val: &[CurriculumExample],
        stage: usize,
        latent_steps: usize,
        schedule: &Schedule,
    ) -> Result<ValidationRecord> {
        let steps = self.model.effective_budget(latent_steps);
        let (report, _, _) = evaluate_retrieval(&self.model, &state.store, val, steps, &self.vocab)?;
        Ok(ValidationRecord {
            step: state.step,
            stage,
            epoch: state.step as f64 / schedule.steps_per_epoch as f64,
            latent_steps: steps,
            hit_at_1: report.hit_at_1,
            per_modality: report.per_modality,
        })
    }

    fn diverge(&self, state: &TrainState, observer: &mut Observer<'_>, message: String) -> Result<Schedule> {
        observer(&TrainEvent::Diverged { message: &message }, state)?;
        Err(Error::NonFinite(format!("training diverged: {message}")))
    }
}
