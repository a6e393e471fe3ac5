//! Resource counts of one training iteration as the memory window grows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::train::{TrainConfig, TrainMode, Trainer};
use crate::world::{generate_dataset, WorldConfig};

const BENCH_ITERATIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub mode: TrainMode,
    pub window: usize,
    pub encoder_passes: u64,
    /// Multiply-adds per iteration inside the encoder.
    pub encoder_macs: u64,
    pub total_macs: u64,
    /// Peak simultaneously live floats attributed to the encoder.
    pub encoder_peak_floats: u64,
    pub total_peak_floats: u64,
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort_unstable();
    xs[xs.len() / 2]
}

/// Runs five single-clip iterations on the middle clip of successive videos
/// and reports the median of each counter.
pub fn count_resources(mode: TrainMode, window: usize, world: &WorldConfig, model: &ModelConfig, seed: u64) -> Result<ResourceReport> {
    let data = generate_dataset::<f64>(world)?;
    if data.videos.is_empty() {
        return Err(Error::EmptySplit);
    }
    let config = TrainConfig {
        mode,
        lr: 0.01,
        momentum: 0.0,
        iters: BENCH_ITERATIONS as u64,
        batch: 1,
        window,
        joint_max_window: window,
        seed,
    };
    let mut trainer = Trainer::new(config, Model::<f64>::new(model.clone(), seed)?)?;
    let center = (world.clips_per_video - 1) / 2;
    let mut costs = Vec::with_capacity(BENCH_ITERATIONS);
    for i in 0..BENCH_ITERATIONS {
        trainer.step_on(&data.videos, &[(i % data.videos.len(), center)])?;
        costs.push(trainer.last_cost);
    }
    let col = |f: fn(&crate::train::StepCost) -> u64| median(costs.iter().map(f).collect());
    Ok(ResourceReport {
        mode,
        window,
        encoder_passes: col(|c| c.encoder_passes),
        encoder_macs: col(|c| c.encoder_macs),
        total_macs: col(|c| c.total_macs),
        encoder_peak_floats: col(|c| c.encoder_peak_floats),
        total_peak_floats: col(|c| c.total_peak_floats),
    })
}

/// A reduced world for the benchmark: one clip window's worth of video.
pub fn bench_world(max_window: usize, seed: u64) -> WorldConfig {
    WorldConfig {
        clips_per_video: 2 * max_window + 1,
        videos: BENCH_ITERATIONS,
        eval_videos: 0,
        ..WorldConfig::tiny(seed)
    }
}
