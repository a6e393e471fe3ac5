//! Training loops and evaluation.
//!
//! `Amu` training keeps a memory pool of person features: each iteration
//! reads the neighbouring clips from the pool (scaled by their staleness
//! penalty), encodes only the sampled clip, and writes the fresh person
//! features back tagged with the iteration's loss. `Joint` training encodes
//! every clip of the window live on the same tape and uses no pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Scope, Tape, Var};
use crate::block::{normalized_attention, BlockKind, FeatureSet, TapeFeatures};
use crate::error::{Error, Result};
use crate::memory::{assemble_memory, fit_rows_on_tape, LossLevel, MemoryKey, MemoryPool};
use crate::metrics::{mean_average_precision, MapReport};
use crate::model::{encode_clip, encode_persons, head_forward, BoundModel, Model};
use crate::optim::Sgd;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::world::{ClipSample, Video};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Amu,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub momentum: f64,
    pub iters: u64,
    /// Clips per iteration.
    pub batch: usize,
    /// Memory window radius L: clips `t−L ..= t+L`.
    pub window: usize,
    /// Largest window joint training accepts.
    #[serde(default = "default_joint_max_window")]
    pub joint_max_window: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_joint_max_window() -> usize {
    4
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.mode == TrainMode::Joint && self.window > self.joint_max_window {
            return Err(Error::Config(format!(
                "joint training with window {} exceeds the resource guard of {}",
                self.window, self.joint_max_window
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: u64,
    pub loss: f64,
    /// Loss level the memory was read with; `None` stands for infinity.
    pub err: Option<f64>,
}

/// Progress needed to resume a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iterations completed.
    pub iteration: u64,
    pub err: LossLevel<f64>,
}

/// Per-iteration resource counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCost {
    pub encoder_passes: u64,
    pub encoder_macs: u64,
    pub total_macs: u64,
    pub encoder_peak_floats: u64,
    pub total_peak_floats: u64,
}

pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub pool: MemoryPool<T>,
    pub optimizer: Sgd<T>,
    pub state: TrainState,
    pub log: Vec<LogRow>,
    pub last_cost: StepCost,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: TrainConfig, model: Model<T>) -> Result<Self> {
        config.validate()?;
        let pool = MemoryPool::new(model.config.capacity, model.dim(), config.window);
        let state = TrainState {
            iteration: 0,
            err: LossLevel::Infinite,
        };
        Self::resume(config, model, pool, Sgd::new(T::zero(), T::zero()), state)
    }

    /// Continues from saved parameters, velocity, pool and state.
    pub fn resume(config: TrainConfig, model: Model<T>, pool: MemoryPool<T>, mut optimizer: Sgd<T>, state: TrainState) -> Result<Self> {
        config.validate()?;
        if pool.capacity() != model.config.capacity || pool.dim() != model.dim() || pool.window() != config.window {
            return Err(Error::Config(format!(
                "pool (K={}, d={}, L={}) does not match the run (K={}, d={}, L={})",
                pool.capacity(),
                pool.dim(),
                pool.window(),
                model.config.capacity,
                model.dim(),
                config.window
            )));
        }
        optimizer.lr = T::lit(config.lr);
        optimizer.momentum = T::lit(config.momentum);
        Ok(Self {
            config,
            model,
            pool,
            optimizer,
            state,
            log: Vec::new(),
            last_cost: StepCost::default(),
        })
    }

    /// Runs until `config.iters` iterations have completed in total.
    pub fn train(&mut self, videos: &[Video<T>]) -> Result<()> {
        while self.state.iteration < self.config.iters {
            self.step(videos)?;
        }
        Ok(())
    }

    /// The clips drawn at a 1-based iteration; independent of earlier draws.
    pub fn sample(&self, videos: &[Video<T>], iteration: u64) -> Result<Vec<(usize, usize)>> {
        let clips: Vec<(usize, usize)> = videos
            .iter()
            .enumerate()
            .flat_map(|(v, video)| (0..video.clips.len()).map(move |c| (v, c)))
            .collect();
        if clips.is_empty() {
            return Err(Error::EmptySplit);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iteration);
        Ok((0..self.config.batch).map(|_| clips[rng.gen_range(0..clips.len())]).collect())
    }

    /// One optimisation step over a sampled batch.
    pub fn step(&mut self, videos: &[Video<T>]) -> Result<LogRow> {
        let picks = self.sample(videos, self.state.iteration + 1)?;
        self.step_on(videos, &picks)
    }

    /// One optimisation step over the given `(video index, clip index)` pairs.
    pub fn step_on(&mut self, videos: &[Video<T>], picks: &[(usize, usize)]) -> Result<LogRow> {
        if picks.is_empty() {
            return Err(Error::EmptySplit);
        }
        let iteration = self.state.iteration + 1;
        let err_read = self.state.err.map(T::lit);

        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let mut losses = Vec::with_capacity(picks.len());
        let mut writes = Vec::new();
        let mut passes = 0;
        for &(v, c) in picks {
            let video = &videos[v];
            let clip = &video.clips[c];
            let (loss, persons) = match self.config.mode {
                TrainMode::Amu => {
                    let window = self.pool.read_window(key(clip), video.len(), err_read)?;
                    passes += 1;
                    clip_loss_amu(&tape, &bound, clip, &window, self.config.window, self.model.config.capacity)?
                }
                TrainMode::Joint => {
                    let (loss, persons, n) =
                        clip_loss_joint(&tape, &bound, video, c, self.config.window, self.model.config.capacity)?;
                    passes += n;
                    (loss, persons)
                }
            };
            losses.push(loss);
            writes.push((key(clip), persons));
        }
        let total = losses[1..].iter().try_fold(losses[0], |acc, &l| tape.add(acc, l))?;
        let loss = tape.scale(total, T::one() / T::lit(losses.len() as f64));
        let loss_value = tape.value_ref(loss).item();

        let grads = tape.backward(loss)?;
        let vars = bound.vars();
        for ((_, p), v) in self.model.named_params_mut().into_iter().zip(&vars) {
            grads.accumulate_into(*v, p)?;
        }
        self.optimizer.step(self.model.named_params_mut())?;

        let stats = tape.stats();
        self.last_cost = StepCost {
            encoder_passes: passes,
            encoder_macs: stats.macs.get(Scope::Encoder),
            total_macs: stats.macs.total(),
            encoder_peak_floats: stats.peak_live.get(Scope::Encoder),
            total_peak_floats: stats.peak_live_total,
        };

        // The tag must stay positive even if the loss underflows to zero.
        let tag = loss_value.max(T::min_positive_value());
        if self.config.mode == TrainMode::Amu {
            for (k, persons) in writes {
                self.pool.write(k, &persons.to_feature_set(&tape), tag, iteration)?;
            }
        }
        let row = LogRow {
            iteration,
            loss: loss_value.to_f64_lossy(),
            err: self.state.err.finite(),
        };
        self.state = TrainState {
            iteration,
            err: LossLevel::Finite(tag.to_f64_lossy()),
        };
        self.log.push(row);
        Ok(row)
    }
}

fn key<T>(clip: &ClipSample<T>) -> MemoryKey {
    MemoryKey::new(clip.video, clip.clip)
}

/// Mean BCE of one clip given an already read memory window; also returns
/// the live person features for the write-back.
pub fn clip_loss_amu<T: Scalar>(
    tape: &Tape<T>,
    bound: &BoundModel,
    clip: &ClipSample<T>,
    window: &[FeatureSet<T>],
    radius: usize,
    capacity: usize,
) -> Result<(Var, TapeFeatures)> {
    let (p, o) = encode_clip(tape, bound, &clip.persons, &clip.objects)?;
    let memory = assemble_memory(tape, window, &p, radius, capacity)?;
    let (logits, _) = head_forward(tape, bound, &p, &o, &memory)?;
    Ok((tape.bce_with_logits(logits, &clip.labels)?, p))
}

/// Mean BCE of clip `c` with every window clip encoded live. Returns the
/// number of encoder passes as well.
pub fn clip_loss_joint<T: Scalar>(
    tape: &Tape<T>,
    bound: &BoundModel,
    video: &Video<T>,
    c: usize,
    radius: usize,
    capacity: usize,
) -> Result<(Var, TapeFeatures, u64)> {
    let clip = &video.clips[c];
    let (p, o) = encode_clip(tape, bound, &clip.persons, &clip.objects)?;
    let d = tape.shape(p.var)[1];
    let mut passes = 1;
    let mut vars = Vec::with_capacity(2 * radius + 1);
    let mut mask = Vec::with_capacity((2 * radius + 1) * capacity);
    for t in c as i64 - radius as i64..=c as i64 + radius as i64 {
        let part = if t == c as i64 {
            fit_rows_on_tape(tape, &p, capacity, d)?
        } else if t < 0 || t >= video.clips.len() as i64 {
            tape.with_scope(Scope::Memory, || FeatureSet::padding(capacity, d).record(tape))
        } else {
            let other = &video.clips[t as usize];
            let (q, _) = encode_clip(tape, bound, &other.persons, &other.objects)?;
            passes += 1;
            fit_rows_on_tape(tape, &q, capacity, d)?
        };
        vars.push(part.var);
        mask.extend(part.mask);
    }
    let memory = if vars.len() == 1 {
        TapeFeatures { var: vars[0], mask }
    } else {
        TapeFeatures {
            var: tape.concat_rows(&vars)?,
            mask,
        }
    };
    let (logits, _) = head_forward(tape, bound, &p, &o, &memory)?;
    Ok((tape.bce_with_logits(logits, &clip.labels)?, p, passes))
}

/// A pool holding the current model's person features for every clip of
/// `videos`, all tagged 1.
pub fn inference_pool<T: Scalar>(model: &Model<T>, videos: &[Video<T>], window: usize) -> Result<MemoryPool<T>> {
    let pool = MemoryPool::new(model.config.capacity, model.dim(), window);
    for clip in videos.iter().flat_map(|v| &v.clips) {
        pool.write(key(clip), &encode_persons(model, &clip.persons)?, T::one(), 0)?;
    }
    Ok(pool)
}

/// One block's attention during inference, renormalised over valid keys.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAttention<T> {
    pub index: usize,
    pub kind: BlockKind,
    /// `[n_queries, n_keys]`; padded rows and columns are zero.
    pub weights: Tensor<T>,
    pub query_mask: Vec<bool>,
    pub key_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipInference<T> {
    /// Sigmoid scores `[n_persons, C]`.
    pub scores: Tensor<T>,
    /// Blocks in execution order.
    pub attention: Vec<BlockAttention<T>>,
}

/// Scores and attention maps for one clip, with unweighted memory reads.
pub fn infer_clip<T: Scalar>(model: &Model<T>, pool: &MemoryPool<T>, video: &Video<T>, clip: &ClipSample<T>) -> Result<ClipInference<T>> {
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let window = pool.read_window_unweighted(key(clip), video.len());
    let (p, o) = encode_clip(&tape, &bound, &clip.persons, &clip.objects)?;
    let memory = assemble_memory(&tape, &window, &p, pool.window(), pool.capacity())?;
    let (logits, out) = head_forward(&tape, &bound, &p, &o, &memory)?;
    let attention = out
        .trace
        .into_iter()
        .map(|b| BlockAttention {
            index: b.index,
            kind: b.kind,
            weights: normalized_attention(&tape.value(b.attention), &b.query_mask, &b.key_mask),
            query_mask: b.query_mask,
            key_mask: b.key_mask,
        })
        .collect();
    Ok(ClipInference {
        scores: tape.value(logits).map(sigmoid),
        attention,
    })
}

/// Per-class AP and mAP over every person of every clip in `videos`.
pub fn evaluate_map<T: Scalar>(model: &Model<T>, videos: &[Video<T>], window: usize) -> Result<MapReport> {
    if videos.iter().all(|v| v.clips.iter().all(|c| c.persons.rows() == 0)) {
        return Err(Error::EmptySplit);
    }
    let pool = inference_pool(model, videos, window)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for video in videos {
        for clip in &video.clips {
            let s = infer_clip(model, &pool, video, clip)?.scores;
            for i in 0..s.rows() {
                scores.push(s.row(i).iter().map(|x| x.to_f64_lossy()).collect());
                labels.push(clip.labels.row(i).iter().map(|&y| y == T::one()).collect());
            }
        }
    }
    Ok(mean_average_precision(&scores, &labels))
}
