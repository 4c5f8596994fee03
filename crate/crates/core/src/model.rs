//! CoordConv-fronted U-Net producing six raw heatmap channels.
//!
//! `depth` counts resolution levels, the deepest acting as the bottleneck:
//! depth 4 with 64 base filters gives encoder widths 64/128/256/512 and three
//! 2x down-samplings. Each level is `conv3x3-BN-ReLU, spatial dropout,
//! conv3x3-BN-ReLU`; decoder levels up-sample, concatenate the matching
//! encoder output and apply the same block. A 1x1 convolution projects to
//! the six landmark channels. Outputs are raw scores; probability
//! normalization happens in [`crate::heatmap`].

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_axis, NUM_LANDMARKS};
use crate::nn::{
    concat_channels, split_channels, upsample_nearest2x, upsample_nearest2x_backward, AvgPool2x2, BatchNorm2d, Conv2d,
    ConvTranspose2x2, MaxPool2x2, Param, Relu, Scalar, SpatialDropout, Tensor, Visit,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {actual:?} does not match the model (expected [N, 1, {size}, {size}])")]
    InputShape { actual: [usize; 4], size: usize },
    #[error("non-finite activations after {layer}")]
    NonFinite { layer: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("checkpoint {path} has format version {found}, this build reads version {expected}")]
    CheckpointVersion { path: String, found: u32, expected: u32 },
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    #[default]
    MaxPool,
    AvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsample {
    /// 2x2 stride-2 transposed convolution.
    #[default]
    Transposed,
    /// Nearest-neighbour 2x followed by a 3x3 convolution.
    NearestConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_filters: usize,
    pub dropout_rate: f64,
    pub input_size: usize,
    pub out_channels: usize,
    pub use_coordconv: bool,
    pub downsample: Downsample,
    pub upsample: Upsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            base_filters: 64,
            dropout_rate: 0.1,
            input_size: 256,
            out_channels: NUM_LANDMARKS,
            use_coordconv: true,
            downsample: Downsample::MaxPool,
            upsample: Upsample::Transposed,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.depth < 1 {
            return err("depth must be at least 1".into());
        }
        if self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return err(format!("input_size {} is not divisible by 2^depth = {}", self.input_size, 1usize << self.depth));
        }
        if !self.base_filters.is_power_of_two() {
            return err(format!("base_filters {} is not a power of two", self.base_filters));
        }
        if self.out_channels != NUM_LANDMARKS {
            return err(format!("out_channels must be {NUM_LANDMARKS}, got {}", self.out_channels));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        if self.use_coordconv {
            3
        } else {
            1
        }
    }

    /// Filters at each resolution level, shallow to deep.
    pub fn level_filters(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_filters << l).collect()
    }
}

/// Appends the normalized x (column) and y (row) grids to a single-channel batch.
pub fn append_coord_channels<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = image.shape();
    assert_eq!(c, 1, "coordinate channels are appended to single-channel images");
    let hw = h * w;
    let mut out = Tensor::zeros([n, 3, h, w]);
    for i in 0..n {
        let dst = out.item_mut(i);
        dst[..hw].copy_from_slice(image.item(i));
        for r in 0..h {
            let yv = T::lit(normalize_axis(r as f64, h));
            for col in 0..w {
                dst[hw + r * w + col] = T::lit(normalize_axis(col as f64, w));
                dst[2 * hw + r * w + col] = yv;
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
struct ConvBlock<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    relu1: Relu<T>,
    drop: SpatialDropout,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    relu2: Relu<T>,
}

impl<T: Scalar> ConvBlock<T> {
    fn new(cin: usize, cout: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(cin, cout, 3, rng),
            bn1: BatchNorm2d::new(cout),
            relu1: Relu::default(),
            drop: SpatialDropout::new(dropout),
            conv2: Conv2d::new(cout, cout, 3, rng),
            bn2: BatchNorm2d::new(cout),
            relu2: Relu::default(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool, keep: bool, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let h = self.conv1.forward(x, keep);
        let h = self.bn1.forward(&h, train, keep);
        let h = self.relu1.forward(h, keep);
        let h = self.drop.forward(h, train, rng);
        let h = self.conv2.forward(&h, keep);
        let h = self.bn2.forward(&h, train, keep);
        self.relu2.forward(h, keep)
    }

    fn backward(&mut self, dy: Tensor<T>) -> Tensor<T> {
        let g = self.relu2.backward(dy);
        let g = self.bn2.backward(&g);
        let g = self.conv2.backward(&g);
        let g = self.drop.backward(g);
        let g = self.relu1.backward(g);
        let g = self.bn1.backward(&g);
        self.conv1.backward(&g)
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn Visit<T>) {
        self.conv1.visit(&format!("{prefix}.conv1"), v);
        self.bn1.visit(&format!("{prefix}.bn1"), v);
        self.conv2.visit(&format!("{prefix}.conv2"), v);
        self.bn2.visit(&format!("{prefix}.bn2"), v);
    }

    fn parameter_count(&self) -> usize {
        self.conv1.parameter_count() + self.bn1.parameter_count() + self.conv2.parameter_count() + self.bn2.parameter_count()
    }
}

#[derive(Debug, Clone)]
enum Down {
    Max(MaxPool2x2),
    Avg(AvgPool2x2),
}

impl Down {
    fn forward<T: Scalar>(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        match self {
            Down::Max(p) => p.forward(x, keep),
            Down::Avg(p) => p.forward(x, keep),
        }
    }

    fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self {
            Down::Max(p) => p.backward(dy),
            Down::Avg(p) => p.backward(dy),
        }
    }
}

#[derive(Debug, Clone)]
enum Up<T> {
    Transposed(ConvTranspose2x2<T>),
    NearestConv(Conv2d<T>),
}

impl<T: Scalar> Up<T> {
    fn new(kind: Upsample, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        match kind {
            Upsample::Transposed => Up::Transposed(ConvTranspose2x2::new(cin, cout, rng)),
            Upsample::NearestConv => Up::NearestConv(Conv2d::new(cin, cout, 3, rng)),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, keep: bool) -> Tensor<T> {
        match self {
            Up::Transposed(t) => t.forward(x, keep),
            Up::NearestConv(c) => c.forward(&upsample_nearest2x(x), keep),
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        match self {
            Up::Transposed(t) => t.backward(dy),
            Up::NearestConv(c) => upsample_nearest2x_backward(&c.backward(dy)),
        }
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn Visit<T>) {
        match self {
            Up::Transposed(t) => t.visit(prefix, v),
            Up::NearestConv(c) => c.visit(prefix, v),
        }
    }

    fn parameter_count(&self) -> usize {
        match self {
            Up::Transposed(t) => t.parameter_count(),
            Up::NearestConv(c) => c.parameter_count(),
        }
    }

    fn kernel(&self) -> usize {
        match self {
            Up::Transposed(_) => 2,
            Up::NearestConv(_) => 3,
        }
    }
}

/// The landmark network. `T` is `f32` for training and `f64` in gradient checks.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    cfg: ModelConfig,
    encoders: Vec<ConvBlock<T>>,
    downs: Vec<Down>,
    ups: Vec<Up<T>>,
    decoders: Vec<ConvBlock<T>>,
    head: Conv2d<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> UNet<T> {
    /// Builds a freshly initialized network; `seed` drives weight init and dropout masks.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = cfg.level_filters();
        let mut encoders = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels();
        for &w in &widths {
            encoders.push(ConvBlock::new(cin, w, cfg.dropout_rate, &mut rng));
            cin = w;
        }
        let downs = (1..cfg.depth)
            .map(|_| match cfg.downsample {
                Downsample::MaxPool => Down::Max(MaxPool2x2::default()),
                Downsample::AvgPool => Down::Avg(AvgPool2x2::default()),
            })
            .collect();
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        for l in 0..cfg.depth - 1 {
            ups.push(Up::new(cfg.upsample, widths[l + 1], widths[l], &mut rng));
            decoders.push(ConvBlock::new(2 * widths[l], widths[l], cfg.dropout_rate, &mut rng));
        }
        let head = Conv2d::new(widths[0], cfg.out_channels, 1, &mut rng);
        Ok(Self { cfg, encoders, downs, ups, decoders, head, rng })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        let [_, c, h, w] = x.shape();
        if c != 1 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(ModelError::InputShape { actual: x.shape(), size: self.cfg.input_size });
        }
        Ok(())
    }

    fn run(&mut self, image: &Tensor<T>, train: bool, keep: bool) -> Result<Tensor<T>, ModelError> {
        self.check_input(image)?;
        let finite = |t: &Tensor<T>, layer: &dyn Fn() -> String| {
            if t.all_finite() {
                Ok(())
            } else {
                Err(ModelError::NonFinite { layer: layer() })
            }
        };
        let x = if self.cfg.use_coordconv { append_coord_channels(image) } else { image.clone() };
        let last = self.cfg.depth - 1;
        let mut skips = Vec::with_capacity(last);
        let mut h = x;
        for l in 0..last {
            let e = self.encoders[l].forward(&h, train, keep, &mut self.rng);
            finite(&e, &|| format!("encoder level {l}"))?;
            h = self.downs[l].forward(&e, keep);
            skips.push(e);
        }
        h = self.encoders[last].forward(&h, train, keep, &mut self.rng);
        finite(&h, &|| format!("encoder level {last} (bottleneck)"))?;
        for l in (0..last).rev() {
            let u = self.ups[l].forward(&h, keep);
            let cat = concat_channels(&skips[l], &u);
            h = self.decoders[l].forward(&cat, train, keep, &mut self.rng);
            finite(&h, &|| format!("decoder level {l}"))?;
        }
        let out = self.head.forward(&h, keep);
        finite(&out, &|| "output projection".to_string())?;
        Ok(out)
    }

    /// Training-mode forward: batch statistics, dropout, activations cached for [`UNet::backward`].
    pub fn forward_train(&mut self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.run(image, true, true)
    }

    /// Evaluation-mode forward: running statistics, no dropout, nothing cached.
    pub fn forward_eval(&mut self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.run(image, false, false)
    }

    /// Evaluation-mode forward that keeps activations so gradients can be taken.
    pub fn forward_eval_cached(&mut self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.run(image, false, true)
    }

    /// Back-propagates `grad_out` (same shape as the output) and accumulates
    /// parameter gradients. Returns the gradient with respect to the image.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Tensor<T> {
        let last = self.cfg.depth - 1;
        let mut g = self.head.backward(grad_out);
        let mut skip_grads = vec![None; last];
        for l in 0..last {
            let dcat = self.decoders[l].backward(g);
            let skip_ch = self.cfg.base_filters << l;
            let (ds, du) = split_channels(&dcat, skip_ch);
            skip_grads[l] = Some(ds);
            g = self.ups[l].backward(&du);
        }
        g = self.encoders[last].backward(g);
        for l in (0..last).rev() {
            g = self.downs[l].backward(&g);
            g.add_assign(skip_grads[l].as_ref().expect("skip gradient"));
            g = self.encoders[l].backward(g);
        }
        if self.cfg.use_coordconv {
            split_channels(&g, 1).0
        } else {
            g
        }
    }

    /// Visits parameters and buffers in a fixed order.
    pub fn visit(&mut self, v: &mut dyn Visit<T>) {
        for (l, e) in self.encoders.iter_mut().enumerate() {
            e.visit(&format!("enc{l}"), v);
        }
        for (l, (u, d)) in self.ups.iter_mut().zip(self.decoders.iter_mut()).enumerate() {
            u.visit(&format!("up{l}"), v);
            d.visit(&format!("dec{l}"), v);
        }
        self.head.visit("head", v);
    }

    pub fn zero_grad(&mut self) {
        struct Zero;
        impl<T: Scalar> Visit<T> for Zero {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                p.zero_grad();
            }
            fn buffer(&mut self, _: &str, _: &mut Vec<T>) {}
        }
        self.visit(&mut Zero);
    }

    pub fn parameter_count(&self) -> usize {
        self.encoders.iter().map(ConvBlock::parameter_count).sum::<usize>()
            + self.ups.iter().map(Up::parameter_count).sum::<usize>()
            + self.decoders.iter().map(ConvBlock::parameter_count).sum::<usize>()
            + self.head.parameter_count()
    }

    /// Static description of every layer at the configured input size.
    pub fn summarize(&self) -> ModelSummary {
        let cfg = &self.cfg;
        let mut layers = Vec::new();
        let mut size = cfg.input_size;
        let mut push = |name: String, kind: &str, cin: usize, cout: usize, kernel: usize, size: usize, params: usize| {
            layers.push(LayerRow { name, kind: kind.to_string(), in_channels: cin, out_channels: cout, kernel, output: [cout, size, size], params });
        };
        let block = |push: &mut dyn FnMut(String, &str, usize, usize, usize, usize, usize), prefix: &str, b: &ConvBlock<T>, size| {
            push(format!("{prefix}.conv1"), "conv3x3", b.conv1.in_channels, b.conv1.out_channels, 3, size, b.conv1.parameter_count());
            push(format!("{prefix}.bn1"), "batchnorm", b.conv1.out_channels, b.conv1.out_channels, 0, size, b.bn1.parameter_count());
            push(format!("{prefix}.conv2"), "conv3x3", b.conv2.in_channels, b.conv2.out_channels, 3, size, b.conv2.parameter_count());
            push(format!("{prefix}.bn2"), "batchnorm", b.conv2.out_channels, b.conv2.out_channels, 0, size, b.bn2.parameter_count());
        };
        for (l, e) in self.encoders.iter().enumerate() {
            block(&mut push, &format!("enc{l}"), e, size);
            if l + 1 < cfg.depth {
                size /= 2;
                let c = e.conv2.out_channels;
                let kind = match cfg.downsample {
                    Downsample::MaxPool => "maxpool2x2",
                    Downsample::AvgPool => "avgpool2x2",
                };
                push(format!("down{l}"), kind, c, c, 2, size, 0);
            }
        }
        for l in (0..cfg.depth - 1).rev() {
            size *= 2;
            let u = &self.ups[l];
            let (cin, cout) = (cfg.base_filters << (l + 1), cfg.base_filters << l);
            let kind = match cfg.upsample {
                Upsample::Transposed => "convtranspose2x2",
                Upsample::NearestConv => "nearest2x+conv3x3",
            };
            push(format!("up{l}"), kind, cin, cout, u.kernel(), size, u.parameter_count());
            block(&mut push, &format!("dec{l}"), &self.decoders[l], size);
        }
        push("head".into(), "conv1x1", self.head.in_channels, self.head.out_channels, 1, size, self.head.parameter_count());
        ModelSummary { parameter_count: self.parameter_count(), encoder_filters: cfg.level_filters(), layers }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub kind: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `[channels, height, width]` of the layer output for one image.
    pub output: [usize; 3],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub parameter_count: usize,
    pub encoder_filters: Vec<usize>,
    pub layers: Vec<LayerRow>,
}

impl std::fmt::Display for ModelSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<12} {:<18} {:>6} {:>6} {:>16} {:>10}", "layer", "kind", "in", "out", "output", "params")?;
        for l in &self.layers {
            let out = format!("{}x{}x{}", l.output[0], l.output[1], l.output[2]);
            writeln!(f, "{:<12} {:<18} {:>6} {:>6} {:>16} {:>10}", l.name, l.kind, l.in_channels, l.out_channels, out, l.params)?;
        }
        write!(f, "trainable parameters: {} ({:.1e})", self.parameter_count, self.parameter_count as f64)
    }
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
// Layout (little endian):
//   8 bytes  magic "ECHOCAL\0"
//   u32      format version
//   u64      header length in bytes
//   header   UTF-8 JSON: CheckpointHeader
//   payload  f32 values of every tensor, concatenated in header order
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECHOCAL\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// SHA-256 of the serialized training configuration that produced the weights.
    pub train_config_hash: String,
    pub epoch: Option<usize>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

struct Collect {
    entries: Vec<TensorEntry>,
    payload: Vec<f32>,
}

impl Visit<f32> for Collect {
    fn param(&mut self, name: &str, p: &mut Param<f32>) {
        self.entries.push(TensorEntry { name: name.into(), buffer: false, shape: p.shape.clone(), len: p.len() });
        self.payload.extend_from_slice(&p.value);
    }
    fn buffer(&mut self, name: &str, b: &mut Vec<f32>) {
        self.entries.push(TensorEntry { name: name.into(), buffer: true, shape: vec![b.len()], len: b.len() });
        self.payload.extend_from_slice(b);
    }
}

struct Restore<'a> {
    entries: std::slice::Iter<'a, TensorEntry>,
    payload: &'a [f32],
    offset: usize,
    error: Option<String>,
}

impl Restore<'_> {
    fn next(&mut self, name: &str, len: usize) -> Option<&[f32]> {
        if self.error.is_some() {
            return None;
        }
        match self.entries.next() {
            Some(e) if e.name == name && e.len == len && self.offset + len <= self.payload.len() => {
                let s = &self.payload[self.offset..self.offset + len];
                self.offset += len;
                Some(s)
            }
            Some(e) => {
                self.error = Some(format!("tensor {} (len {}) does not match model tensor {name} (len {len})", e.name, e.len));
                None
            }
            None => {
                self.error = Some(format!("missing tensor {name}"));
                None
            }
        }
    }
}

impl Visit<f32> for Restore<'_> {
    fn param(&mut self, name: &str, p: &mut Param<f32>) {
        if let Some(s) = self.next(name, p.len()) {
            p.value.copy_from_slice(s);
        }
    }
    fn buffer(&mut self, name: &str, b: &mut Vec<f32>) {
        if let Some(s) = self.next(name, b.len()) {
            b.copy_from_slice(s);
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &mut UNet<f32>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let mut collect = Collect { entries: Vec::new(), payload: Vec::new() };
    model.visit(&mut collect);
    let header = CheckpointHeader { meta: meta.clone(), tensors: collect.entries };
    let header = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint { path: path.display().to_string(), message: e.to_string() })?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
        f.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        f.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&header).map_err(io)?;
        for v in &collect.payload {
            f.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        f.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(UNet<f32>, CheckpointMeta), ModelError> {
    let io = |source| ModelError::Io { path: path.display().to_string(), source };
    let display = path.display().to_string();
    let bad = |message: String| ModelError::Checkpoint { path: display.clone(), message };
    let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| bad("file too short".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not an echocal checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointVersion { path: display, found: version, expected: CHECKPOINT_VERSION });
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len).map_err(io)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    f.read_exact(&mut header).map_err(|_| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header).map_err(|e| bad(format!("invalid header: {e}")))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(io)?;
    let total: usize = header.tensors.iter().map(|t| t.len).sum();
    if bytes.len() != total * 4 {
        return Err(bad(format!("payload holds {} bytes, header declares {}", bytes.len(), total * 4)));
    }
    let payload: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let mut model = UNet::<f32>::new(header.meta.model.clone(), 0)?;
    let mut restore = Restore { entries: header.tensors.iter(), payload: &payload, offset: 0, error: None };
    model.visit(&mut restore);
    if let Some(message) = restore.error {
        return Err(bad(message));
    }
    if restore.offset != payload.len() {
        return Err(bad("checkpoint holds tensors the model does not use".into()));
    }
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(depth: usize, base: usize, size: usize) -> ModelConfig {
        ModelConfig { depth, base_filters: base, input_size: size, dropout_rate: 0.0, ..Default::default() }
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Tensor<f64> {
        Tensor::from_vec([n, 1, size, size], (0..n * size * size).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig { input_size: 100, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { depth: 0, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { base_filters: 48, ..Default::default() }.validate().is_err());
        assert!(ModelConfig { out_channels: 4, ..Default::default() }.validate().is_err());
        assert!(matches!(UNet::<f32>::new(ModelConfig { input_size: 24, ..Default::default() }, 0), Err(ModelError::Config(_))));
    }

    #[test]
    fn coord_channels() {
        let img = Tensor::<f64>::zeros([1, 1, 4, 256]);
        let x = append_coord_channels(&img);
        assert_eq!(x.shape(), [1, 3, 4, 256]);
        let hw = 4 * 256;
        let xc = &x.item(0)[hw..2 * hw];
        assert!((xc[0] - (1.0 / 256.0 - 1.0)).abs() < 1e-15);
        assert!((xc[0] + 0.99609375).abs() < 1e-12);
        for r in 0..4 {
            assert_eq!(xc[r * 256..(r + 1) * 256], xc[..256]);
        }
        assert!(xc[..256].windows(2).all(|w| w[1] > w[0]));
        let yc = &x.item(0)[2 * hw..];
        for r in 0..4 {
            assert!(yc[r * 256..(r + 1) * 256].iter().all(|&v| v == yc[r * 256]));
        }
        assert!(yc.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn minimal_depth_shape_and_hand_count() {
        let mut net = UNet::<f64>::new(tiny(1, 2, 32), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = net.forward_eval(&random_image(&mut rng, 1, 32)).unwrap();
        assert_eq!(y.shape(), [1, 6, 32, 32]);
        // conv(3->2, 3x3) + bn(2) + conv(2->2, 3x3) + bn(2) + conv(2->6, 1x1)
        let expected = (9 * 3 * 2 + 2) + 4 + (9 * 2 * 2 + 2) + 4 + (2 * 6 + 6);
        assert_eq!(net.parameter_count(), expected);
        assert_eq!(net.summarize().parameter_count, expected);
    }

    #[test]
    fn two_level_hand_count() {
        let net = UNet::<f32>::new(tiny(2, 2, 32), 1).unwrap();
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let expected = conv(3, 3, 2) + 4 + conv(3, 2, 2) + 4 // enc0
            + conv(3, 2, 4) + 8 + conv(3, 4, 4) + 8 // enc1
            + (4 * 2 * 4 + 2) // up0
            + conv(3, 4, 2) + 4 + conv(3, 2, 2) + 4 // dec0
            + conv(1, 2, 6);
        assert_eq!(net.parameter_count(), expected);
        let rows: usize = net.summarize().layers.iter().map(|l| l.params).sum();
        assert_eq!(rows, expected);
    }

    #[test]
    fn width_doubling_scales_parameters_by_four() {
        let a = UNet::<f32>::new(tiny(3, 8, 32), 0).unwrap().parameter_count() as f64;
        let b = UNet::<f32>::new(tiny(3, 16, 32), 0).unwrap().parameter_count() as f64;
        let r = b / a;
        assert!((3.5..=4.5).contains(&r), "ratio {r}");
    }

    #[test]
    fn default_summary() {
        let net = UNet::<f32>::new(ModelConfig::default(), 0).unwrap();
        let s = net.summarize();
        assert_eq!(s.encoder_filters, vec![64, 128, 256, 512]);
        assert!((4_000_000..=11_000_000).contains(&s.parameter_count), "{}", s.parameter_count);
        assert_eq!(s.layers.last().unwrap().output, [6, 256, 256]);
        assert!(s.to_string().contains("trainable parameters"));
    }

    #[test]
    fn eval_is_deterministic_and_batch_independent() {
        let mut net = UNet::<f32>::new(ModelConfig { depth: 3, base_filters: 4, input_size: 32, ..Default::default() }, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one: Vec<f32> = (0..32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let two = Tensor::from_vec([2, 1, 32, 32], [one.clone(), one.clone()].concat());
        let y = net.forward_eval(&two).unwrap();
        assert_eq!(y.item(0), y.item(1));
        let y2 = net.forward_eval(&two).unwrap();
        assert!(y.data().iter().zip(y2.data()).all(|(a, b)| (a - b).abs() <= 1e-6));
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut net = UNet::<f32>::new(tiny(1, 2, 32), 1).unwrap();
        assert!(matches!(net.forward_eval(&Tensor::zeros([1, 1, 16, 16])), Err(ModelError::InputShape { .. })));
    }

    #[test]
    fn non_finite_input_is_reported_with_layer() {
        let mut net = UNet::<f32>::new(tiny(2, 2, 32), 1).unwrap();
        let mut x = Tensor::<f32>::zeros([1, 1, 32, 32]);
        x.data_mut()[40] = f32::NAN;
        match net.forward_eval(&x) {
            Err(ModelError::NonFinite { layer }) => assert!(layer.contains("encoder level 0")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    /// Finite differences through the whole network at f64 (train-mode batch norm, no dropout).
    #[test]
    fn network_gradient_matches_finite_differences() {
        for (down, up) in [(Downsample::MaxPool, Upsample::Transposed), (Downsample::AvgPool, Upsample::NearestConv)] {
            let cfg = ModelConfig { depth: 2, base_filters: 2, input_size: 8, dropout_rate: 0.0, downsample: down, upsample: up, ..Default::default() };
            let mut net = UNet::<f64>::new(cfg, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(10);
            let x = random_image(&mut rng, 2, 8);
            let probe: Vec<f64> = (0..2 * 6 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let objective = |net: &mut UNet<f64>| -> f64 {
                let y = net.clone().forward_train(&x).unwrap();
                y.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
            };
            net.zero_grad();
            net.forward_train(&x).unwrap();
            net.backward(&Tensor::from_vec([2, 6, 8, 8], probe.clone()));

            struct Grab(Vec<(String, Vec<f64>, Vec<f64>)>);
            impl Visit<f64> for Grab {
                fn param(&mut self, name: &str, p: &mut Param<f64>) {
                    self.0.push((name.into(), p.value.clone(), p.grad.clone()));
                }
                fn buffer(&mut self, _: &str, _: &mut Vec<f64>) {}
            }
            let mut grab = Grab(Vec::new());
            net.visit(&mut grab);

            struct Set(String, usize, f64);
            impl Visit<f64> for Set {
                fn param(&mut self, name: &str, p: &mut Param<f64>) {
                    if name == self.0 {
                        p.value[self.1] += self.2;
                    }
                }
                fn buffer(&mut self, _: &str, _: &mut Vec<f64>) {}
            }
            let eps = 1e-6;
            let (mut num, mut den) = (0.0, 0.0);
            for (name, value, grad) in &grab.0 {
                for i in (0..value.len()).step_by(3) {
                    let mut plus = net.clone();
                    plus.visit(&mut Set(name.clone(), i, eps));
                    let mut minus = net.clone();
                    minus.visit(&mut Set(name.clone(), i, -eps));
                    let fd = (objective(&mut plus) - objective(&mut minus)) / (2.0 * eps);
                    num += (fd - grad[i]).powi(2);
                    den += fd * fd;
                }
            }
            let rel = (num / den).sqrt();
            assert!(rel < 1e-5, "{down:?}/{up:?}: relative error {rel}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig { depth: 2, base_filters: 4, input_size: 32, ..Default::default() };
        let mut net = UNet::<f32>::new(cfg.clone(), 4).unwrap();
        let meta = CheckpointMeta { model: cfg, train_config_hash: "abc".into(), epoch: Some(3), val_loss: Some(0.5) };
        save_checkpoint(&path, &mut net, &meta).unwrap();
        let (mut loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        let x = Tensor::<f32>::from_vec([1, 1, 32, 32], (0..1024).map(|i| (i as f32 / 100.0).sin()).collect());
        assert_eq!(net.forward_eval(&x).unwrap(), loaded.forward_eval(&x).unwrap());

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::CheckpointVersion { found: 7, .. })));
        std::fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(ModelError::Checkpoint { .. })));
    }
}
