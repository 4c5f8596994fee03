use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{batch_tensor, PipelineError};
use crate::data::Image;
use crate::model::UNet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub parameter_count: usize,
    pub input_size: usize,
    pub runs: usize,
    pub mean_ms: f64,
    pub sd_ms: f64,
}

/// Single-image evaluation-mode forward latency after `warmup` untimed runs.
pub fn benchmark(net: &mut UNet<f32>, runs: usize, warmup: usize) -> Result<BenchReport, PipelineError> {
    if runs == 0 {
        return Err(PipelineError::Config("benchmark needs at least one run".into()));
    }
    let size = net.config().input_size;
    let data = (0..size * size).map(|i| ((i * 7919) % 1000) as f32 / 1000.0 - 0.5).collect();
    let x = batch_tensor(&[Image::from_vec(size, size, data)]);
    for _ in 0..warmup {
        net.forward_eval(&x)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let clock = Instant::now();
        std::hint::black_box(net.forward_eval(&x)?);
        times.push(clock.elapsed().as_secs_f64() * 1000.0);
    }
    let mean = times.iter().sum::<f64>() / runs as f64;
    let sd = if runs > 1 { (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt() } else { 0.0 };
    Ok(BenchReport { parameter_count: net.summarize().parameter_count, input_size: size, runs, mean_ms: mean, sd_ms: sd })
}
