//! Oriented Gaussian label heatmaps and center-of-mass decoding.
//!
//! Labels are anisotropic Gaussians whose long axis is perpendicular to the
//! owning measurement, normalized to unit mass. Predictions are raw network
//! scores turned into probability maps by a per-channel spatial softmax and
//! decoded by taking the expectation of the normalized pixel-center grid.

use serde::{Deserialize, Serialize};

use crate::geometry::{
    denormalize_coords, normalize_axis, LandmarkSet, MeasurementSet, NormPoint, PixelPoint,
    NUM_LANDMARKS, NUM_MEASUREMENTS,
};

/// Smallest raster side accepted by the label renderer.
pub const MIN_LABEL_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HeatmapError {
    #[error("gaussian center ({x:.3}, {y:.3}) lies outside the {width}x{height} raster")]
    CenterOutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("raster {width}x{height} is smaller than the {MIN_LABEL_SIZE}-pixel minimum")]
    RasterTooSmall { width: usize, height: usize },
    #[error("invalid gaussian spec: {0}")]
    InvalidSpec(String),
    #[error("heatmap shape mismatch: {expected:?} vs {actual:?}")]
    ShapeMismatch { expected: (usize, usize, usize), actual: (usize, usize, usize) },
    #[error("channel {channel} contains a non-finite value")]
    NonFinite { channel: usize },
}

/// What a [`HeatmapStack`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapKind {
    Label,
    PredictedRaw,
    PredictedNormalized,
}

/// Six per-landmark maps stored channel-major (`c * h * w + row * w + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    kind: HeatmapKind,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl HeatmapStack {
    pub fn zeros(kind: HeatmapKind, height: usize, width: usize) -> Self {
        Self { kind, height, width, data: vec![0.0; NUM_LANDMARKS * height * width] }
    }

    pub fn from_vec(kind: HeatmapKind, height: usize, width: usize, data: Vec<f64>) -> Result<Self, HeatmapError> {
        let expected = NUM_LANDMARKS * height * width;
        if data.len() != expected || height == 0 || width == 0 {
            return Err(HeatmapError::ShapeMismatch {
                expected: (NUM_LANDMARKS, height, width),
                actual: (data.len() / (height * width).max(1), height, width),
            });
        }
        Ok(Self { kind, height, width, data })
    }

    pub fn kind(&self) -> HeatmapKind {
        self.kind
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (NUM_LANDMARKS, self.height, self.width)
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[c * self.plane() + row * self.width + col]
    }

    pub(crate) fn check_same_shape(&self, other: &HeatmapStack) -> Result<(), HeatmapError> {
        if self.shape() != other.shape() {
            return Err(HeatmapError::ShapeMismatch { expected: self.shape(), actual: other.shape() });
        }
        Ok(())
    }
}

/// Label heatmap parameters. `sigma_long` is a standard deviation in pixels;
/// `variance_ratio` is long-axis variance over short-axis variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatmapConfig {
    pub sigma_long: f64,
    pub variance_ratio: f64,
}

impl Default for HeatmapConfig {
    fn default() -> Self {
        Self { sigma_long: 14.0, variance_ratio: 20.0 }
    }
}

impl HeatmapConfig {
    pub fn sigma_short(&self) -> f64 {
        self.sigma_long / self.variance_ratio.sqrt()
    }

    /// Same Gaussian on a raster rescaled by `factor` (e.g. 0.5 for 256 -> 128).
    pub fn scaled(&self, factor: f64) -> Self {
        Self { sigma_long: self.sigma_long * factor, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianSpec {
    pub center: PixelPoint,
    pub sigma_long: f64,
    pub variance_ratio: f64,
    pub long_axis_direction: [f64; 2],
}

impl GaussianSpec {
    fn validate(&self) -> Result<(), HeatmapError> {
        if !(self.sigma_long > 0.0 && self.sigma_long.is_finite()) {
            return Err(HeatmapError::InvalidSpec(format!("sigma_long must be positive, got {}", self.sigma_long)));
        }
        if !(self.variance_ratio >= 1.0 && self.variance_ratio.is_finite()) {
            return Err(HeatmapError::InvalidSpec(format!("variance_ratio must be >= 1, got {}", self.variance_ratio)));
        }
        let [dx, dy] = self.long_axis_direction;
        if ((dx * dx + dy * dy).sqrt() - 1.0).abs() > 1e-6 {
            return Err(HeatmapError::InvalidSpec("long_axis_direction must have unit norm".into()));
        }
        if !self.center.is_finite() {
            return Err(HeatmapError::InvalidSpec("center must be finite".into()));
        }
        Ok(())
    }
}

/// Renders one unit-mass anisotropic Gaussian channel of `height` x `width`.
pub fn render_label_heatmap(spec: &GaussianSpec, height: usize, width: usize) -> Result<Vec<f64>, HeatmapError> {
    spec.validate()?;
    if height < MIN_LABEL_SIZE || width < MIN_LABEL_SIZE {
        return Err(HeatmapError::RasterTooSmall { width, height });
    }
    let PixelPoint { x: cx, y: cy } = spec.center;
    if cx < 0.0 || cy < 0.0 || cx > (width - 1) as f64 || cy > (height - 1) as f64 {
        return Err(HeatmapError::CenterOutOfBounds { x: cx, y: cy, width, height });
    }
    let [ux, uy] = spec.long_axis_direction;
    let (vx, vy) = (-uy, ux);
    let inv_long = 1.0 / (spec.sigma_long * spec.sigma_long);
    let inv_short = spec.variance_ratio * inv_long;

    let mut map = vec![0.0; height * width];
    let mut total = 0.0;
    for (row, line) in map.chunks_exact_mut(width).enumerate() {
        let dy = row as f64 - cy;
        for (col, v) in line.iter_mut().enumerate() {
            let dx = col as f64 - cx;
            let a = dx * ux + dy * uy;
            let b = dx * vx + dy * vy;
            *v = (-0.5 * (a * a * inv_long + b * b * inv_short)).exp();
            total += *v;
        }
    }
    map.iter_mut().for_each(|v| *v /= total);
    Ok(map)
}

/// Per-measurement flags raised while encoding labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EncodeFlags {
    /// Measurements whose endpoints coincide; their channels fell back to an isotropic Gaussian.
    pub isotropic_fallback: [bool; NUM_MEASUREMENTS],
}

/// Builds the six-channel label stack for one image.
pub fn encode_labels(
    lm: &LandmarkSet,
    ms: &MeasurementSet,
    height: usize,
    width: usize,
    cfg: &HeatmapConfig,
) -> Result<(HeatmapStack, EncodeFlags), HeatmapError> {
    let mut stack = HeatmapStack::zeros(HeatmapKind::Label, height, width);
    let mut flags = EncodeFlags::default();
    for (k, center) in lm.points.iter().enumerate() {
        let mv = ms.get(crate::geometry::Measurement::ALL[k / 2]);
        let spec = if mv.degenerate {
            flags.isotropic_fallback[k / 2] = true;
            GaussianSpec {
                center: *center,
                // isotropic with the same area as the oriented Gaussian
                sigma_long: (cfg.sigma_long * cfg.sigma_short()).sqrt(),
                variance_ratio: 1.0,
                long_axis_direction: [1.0, 0.0],
            }
        } else {
            let [dx, dy] = mv.direction;
            GaussianSpec {
                center: *center,
                sigma_long: cfg.sigma_long,
                variance_ratio: cfg.variance_ratio,
                long_axis_direction: [-dy, dx],
            }
        };
        let map = render_label_heatmap(&spec, height, width)?;
        stack.channel_mut(k).copy_from_slice(&map);
    }
    Ok((stack, flags))
}

/// Numerically stable softmax over one channel, written into `out`.
pub fn softmax_channel(raw: &[f64], out: &mut [f64]) {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &r) in out.iter_mut().zip(raw) {
        *o = (r - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Per-channel spatial softmax of a raw prediction stack.
pub fn normalize_to_probability(raw: &HeatmapStack) -> Result<HeatmapStack, HeatmapError> {
    let mut out = HeatmapStack::zeros(HeatmapKind::PredictedNormalized, raw.height, raw.width);
    for c in 0..NUM_LANDMARKS {
        let channel = raw.channel(c);
        if channel.iter().any(|v| !v.is_finite()) {
            return Err(HeatmapError::NonFinite { channel: c });
        }
        softmax_channel(channel, out.channel_mut(c));
    }
    Ok(out)
}

/// Vector-Jacobian product of the per-channel softmax: given probabilities
/// `prob` and upstream gradient `grad_prob`, returns the gradient with
/// respect to the raw scores.
pub fn softmax_backward(prob: &HeatmapStack, grad_prob: &[f64]) -> Vec<f64> {
    let n = prob.plane();
    let mut grad_raw = vec![0.0; prob.data.len()];
    for c in 0..NUM_LANDMARKS {
        let p = prob.channel(c);
        let g = &grad_prob[c * n..(c + 1) * n];
        let inner: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
        for ((o, &p), &g) in grad_raw[c * n..(c + 1) * n].iter_mut().zip(p).zip(g) {
            *o = p * (g - inner);
        }
    }
    grad_raw
}

fn grid(size: usize) -> Vec<f64> {
    (0..size).map(|i| normalize_axis(i as f64, size)).collect()
}

/// Expected normalized pixel-center coordinate under each channel.
pub fn soft_center_of_mass(stack: &HeatmapStack) -> [NormPoint; NUM_LANDMARKS] {
    let gx = grid(stack.width);
    let gy = grid(stack.height);
    let mut out = [NormPoint::default(); NUM_LANDMARKS];
    for (c, point) in out.iter_mut().enumerate() {
        let (mut ex, mut ey) = (0.0, 0.0);
        for (row, line) in stack.channel(c).chunks_exact(stack.width).enumerate() {
            let mass: f64 = line.iter().sum();
            ey += mass * gy[row];
            ex += line.iter().zip(&gx).map(|(p, g)| p * g).sum::<f64>();
        }
        *point = NormPoint::new(ex, ey);
    }
    out
}

/// Gradient of a scalar with respect to the map values, given its gradient
/// with respect to each decoded normalized coordinate.
pub fn soft_center_of_mass_backward(height: usize, width: usize, grad_points: &[NormPoint; NUM_LANDMARKS]) -> Vec<f64> {
    let gx = grid(width);
    let gy = grid(height);
    let n = height * width;
    let mut grad = vec![0.0; NUM_LANDMARKS * n];
    for (c, g) in grad_points.iter().enumerate() {
        for (row, line) in grad[c * n..(c + 1) * n].chunks_exact_mut(width).enumerate() {
            let y_term = g.y * gy[row];
            for (v, x) in line.iter_mut().zip(&gx) {
                *v = g.x * x + y_term;
            }
        }
    }
    grad
}

/// Decodes a stack to pixel landmarks. Raw stacks are softmax-normalized first.
pub fn decode_to_landmarks(stack: &HeatmapStack) -> Result<LandmarkSet, HeatmapError> {
    let points = match stack.kind {
        HeatmapKind::PredictedRaw => soft_center_of_mass(&normalize_to_probability(stack)?),
        _ => soft_center_of_mass(stack),
    };
    Ok(LandmarkSet::new(points.map(|p| denormalize_coords(p, stack.width, stack.height))))
}

/// First and second central moments of a non-negative map, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mass: f64,
    pub mean: PixelPoint,
    pub cov_xx: f64,
    pub cov_xy: f64,
    pub cov_yy: f64,
}

impl Moments {
    pub fn of(map: &[f64], height: usize, width: usize) -> Self {
        let mut mass = 0.0;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (row, line) in map.chunks_exact(width).take(height).enumerate() {
            for (col, &v) in line.iter().enumerate() {
                mass += v;
                sx += v * col as f64;
                sy += v * row as f64;
            }
        }
        let (mx, my) = (sx / mass, sy / mass);
        let (mut xx, mut xy, mut yy) = (0.0, 0.0, 0.0);
        for (row, line) in map.chunks_exact(width).take(height).enumerate() {
            let dy = row as f64 - my;
            for (col, &v) in line.iter().enumerate() {
                let dx = col as f64 - mx;
                xx += v * dx * dx;
                xy += v * dx * dy;
                yy += v * dy * dy;
            }
        }
        Self { mass, mean: PixelPoint::new(mx, my), cov_xx: xx / mass, cov_xy: xy / mass, cov_yy: yy / mass }
    }

    /// `(major eigenvalue, minor eigenvalue, unit major eigenvector)`.
    pub fn principal_axes(&self) -> (f64, f64, [f64; 2]) {
        let tr = self.cov_xx + self.cov_yy;
        let diff = self.cov_xx - self.cov_yy;
        let disc = (0.25 * diff * diff + self.cov_xy * self.cov_xy).sqrt();
        let major = 0.5 * tr + disc;
        let minor = 0.5 * tr - disc;
        let theta = 0.5 * (2.0 * self.cov_xy).atan2(diff);
        (major, minor, [theta.cos(), theta.sin()])
    }
}
