//! Training, evaluation, benchmarking and reporting.

mod bench;
mod evaluate;
mod overlay;
mod report;
mod train;

pub use bench::{benchmark, BenchReport};
pub use evaluate::{
    evaluate, evaluate_predictions, median_of_labels, percentile, rank_by_rmse, rmse, EvalReport, MeasurementStats, RankEntry,
    SamplePrediction,
};
pub use overlay::{render_overlay, write_overlays};
pub use report::{render_report, ComparisonTable, ReportRow, REFERENCE_ROW_NAME, TOTAL_MPE_DEFINITION};
pub use train::{
    lr_at, mean_endpoint_error, overfit, train, EpochRecord, OverfitOutcome, TrainConfig, TrainOutcome, BEST_CHECKPOINT,
    HISTORY_FILE, LAST_CHECKPOINT,
};

use crate::data::{mean_normalize, upscale_landmarks, DataError, Image, Sample, IMAGE_SIZE};
use crate::geometry::LandmarkSet;
use crate::heatmap::{decode_to_landmarks, HeatmapError, HeatmapKind, HeatmapStack};
use crate::loss::{LossBreakdown, LossError};
use crate::model::{ModelError, UNet};
use crate::nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch} ({breakdown:?}); last good checkpoint: {last_checkpoint}")]
    NonFiniteLoss { epoch: usize, batch: usize, breakdown: LossBreakdown, last_checkpoint: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl PipelineError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.display().to_string(), source }
    }
}

/// Integer factor between the stored image size and a model's input size.
pub fn resolution_factor(input_size: usize) -> Result<usize, PipelineError> {
    if input_size == 0 || IMAGE_SIZE % input_size != 0 {
        return Err(PipelineError::Config(format!("model input size {input_size} must divide {IMAGE_SIZE}")));
    }
    Ok(IMAGE_SIZE / input_size)
}

/// Downsample and mean-normalize one image for the network.
pub fn preprocess(image: &Image, factor: usize) -> Image {
    mean_normalize(&image.downsample(factor))
}

pub(crate) fn batch_tensor(images: &[Image]) -> Tensor<f32> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec([images.len(), 1, h, w], data)
}

pub(crate) fn raw_stack(out: &Tensor<f32>, item: usize) -> HeatmapStack {
    let [_, _, h, w] = out.shape();
    let data = out.item(item).iter().map(|&v| v as f64).collect();
    HeatmapStack::from_vec(HeatmapKind::PredictedRaw, h, w, data).expect("network output has six channels")
}

/// Produces landmarks on the full-resolution raster for a sample.
pub trait Predictor {
    fn name(&self) -> String;
    fn predict(&mut self, sample: &Sample) -> Result<LandmarkSet, PipelineError>;
    fn parameter_count(&self) -> Option<usize> {
        None
    }
}

/// Runs a network in evaluation mode.
pub struct ModelPredictor {
    pub net: UNet<f32>,
    factor: usize,
    name: String,
}

impl ModelPredictor {
    pub fn new(net: UNet<f32>, name: impl Into<String>) -> Result<Self, PipelineError> {
        let factor = resolution_factor(net.config().input_size)?;
        Ok(Self { net, factor, name: name.into() })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    /// Landmarks for a raw (not yet normalized) full-size image.
    pub fn predict_image(&mut self, image: &Image) -> Result<LandmarkSet, PipelineError> {
        let x = batch_tensor(&[preprocess(image, self.factor)]);
        let out = self.net.forward_eval(&x)?;
        let lm = decode_to_landmarks(&raw_stack(&out, 0))?;
        Ok(upscale_landmarks(&lm, self.factor))
    }
}

impl Predictor for ModelPredictor {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn predict(&mut self, sample: &Sample) -> Result<LandmarkSet, PipelineError> {
        self.predict_image(&sample.image)
    }

    fn parameter_count(&self) -> Option<usize> {
        Some(self.net.parameter_count())
    }
}

/// Returns the sample's own labels; used to check the evaluation harness.
pub struct LabelOracle;

impl Predictor for LabelOracle {
    fn name(&self) -> String {
        "labels".to_string()
    }

    fn predict(&mut self, sample: &Sample) -> Result<LandmarkSet, PipelineError> {
        Ok(sample.landmarks)
    }
}
