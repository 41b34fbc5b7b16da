//! DeepCough: four conv blocks (2x2 valid convolution, ReLU, 2x2 max-pool,
//! dropout), global average pooling and a softmax dense layer.
//!
//! Activations are channel-last `(height, width, channels)` with height
//! along the tensor's bands and width along its frames. Parameters live in
//! one flat vector; per block the kernel is stored `[kh][kw][cin][cout]`
//! followed by the `cout` biases, then the dense `[in][classes]` weights and
//! the class biases.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{auc, balanced_accuracy, macro_auc, Learner, Scorer};
use crate::sonograph::CoughTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// (bands, frames, channels)
    pub input_shape: (usize, usize, usize),
    pub block_channels: Vec<usize>,
    pub kernel: usize,
    pub pool: usize,
    pub dropout_rate: f64,
    pub n_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: (33, 100, 3),
            block_channels: vec![16, 32, 64, 128],
            kernel: 2,
            pool: 2,
            dropout_rate: 0.2,
            n_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn with_channels(channels: usize) -> Self {
        let mut c = Self::default();
        c.input_shape.2 = channels;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.len() != 4 {
            return Err(Error::Config("block_channels must list four blocks".into()));
        }
        if self.block_channels.contains(&0) || self.kernel == 0 || self.pool == 0 {
            return Err(Error::Config("block channels, kernel and pool must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.input_shape.2 == 0 {
            return Err(Error::Config("input must have at least one channel".into()));
        }
        let (mut h, mut w) = (self.input_shape.0, self.input_shape.1);
        for _ in &self.block_channels {
            if h < self.kernel || w < self.kernel {
                return Err(Error::Config(format!("input {:?} too small for four blocks", self.input_shape)));
            }
            h = (h - self.kernel + 1) / self.pool;
            w = (w - self.kernel + 1) / self.pool;
            if h == 0 || w == 0 {
                return Err(Error::Config(format!("input {:?} too small for four blocks", self.input_shape)));
            }
        }
        Ok(())
    }

    /// Output shape of every layer, in order: conv and pool of each block,
    /// global average pooling, dense.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let (mut h, mut w) = (self.input_shape.0, self.input_shape.1);
        for (i, &c) in self.block_channels.iter().enumerate() {
            h = h + 1 - self.kernel;
            w = w + 1 - self.kernel;
            out.push((format!("conv{}", i + 1), vec![h, w, c]));
            h /= self.pool;
            w /= self.pool;
            out.push((format!("pool{}", i + 1), vec![h, w, c]));
        }
        out.push(("global_average".into(), vec![*self.block_channels.last().unwrap()]));
        out.push(("dense".into(), vec![self.n_classes]));
        out
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut conv = Vec::new();
        let mut cin = self.input_shape.2;
        for &cout in &self.block_channels {
            let w = offset;
            offset += self.kernel * self.kernel * cin * cout;
            conv.push(ConvLayout { w, b: offset, cin, cout });
            offset += cout;
            cin = cout;
        }
        let dw = offset;
        offset += cin * self.n_classes;
        let dense = DenseLayout { w: dw, b: offset, inputs: cin, outputs: self.n_classes };
        offset += self.n_classes;
        Layout { conv, dense, total: offset }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvLayout {
    w: usize,
    b: usize,
    cin: usize,
    cout: usize,
}

#[derive(Debug, Clone, Copy)]
struct DenseLayout {
    w: usize,
    b: usize,
    inputs: usize,
    outputs: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvLayout>,
    dense: DenseLayout,
    total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub params: Vec<f64>,
}

/// Everything the backward pass needs from one forward pass.
struct Trace {
    /// im2col patches of each block input.
    patches: Vec<Vec<f64>>,
    /// (height, width) of each block input.
    dims: Vec<(usize, usize)>,
    /// Post-ReLU conv output of each block.
    relu: Vec<Vec<f64>>,
    /// Flat index into `relu` of each pooled maximum.
    argmax: Vec<Vec<usize>>,
    /// Dropout multipliers, when training.
    masks: Vec<Option<Vec<f64>>>,
    /// Spatial size of the last block output.
    last_area: usize,
    gap: Vec<f64>,
    probs: Vec<f64>,
    shapes: Vec<Vec<usize>>,
}

impl ModelWeights {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let n = config.layout().total;
        Ok(Self { config, params: vec![0.0; n] })
    }

    /// He-uniform kernels, zero biases. Weights are drawn as `f32` so they
    /// survive a save/load round trip unchanged.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let layout = m.config.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k2 = m.config.kernel * m.config.kernel;
        for c in &layout.conv {
            let limit = (6.0 / (k2 * c.cin) as f64).sqrt() as f32;
            for p in &mut m.params[c.w..c.b] {
                *p = rng.random_range(-limit..limit) as f64;
            }
        }
        let d = layout.dense;
        let limit = (6.0 / d.inputs as f64).sqrt() as f32;
        for p in &mut m.params[d.w..d.b] {
            *p = rng.random_range(-limit..limit) as f64;
        }
        Ok(m)
    }

    /// Parameters per layer: the four blocks, then dense.
    pub fn count_parameters(&self) -> Vec<usize> {
        let layout = self.config.layout();
        let mut out: Vec<usize> = layout.conv.iter().map(|c| c.b + c.cout - c.w).collect();
        out.push(layout.dense.b + layout.dense.outputs - layout.dense.w);
        out
    }

    /// Round every parameter to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    fn check_input(&self, t: &CoughTensor) -> Result<()> {
        if t.shape() != self.config.input_shape {
            return Err(Error::Model(format!(
                "tensor shape {:?} does not match model input {:?}",
                t.shape(),
                self.config.input_shape
            )));
        }
        Ok(())
    }

    /// Class probabilities. With `training` set, dropout draws from `rng`.
    pub fn forward(&self, tensor: &CoughTensor, training: bool, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        self.check_input(tensor)?;
        let x = to_f64(tensor);
        Ok(self.trace(&x, if training { Some(rng) } else { None }).probs)
    }

    /// Inference without dropout.
    pub fn predict(&self, tensor: &CoughTensor) -> Result<Vec<f64>> {
        self.check_input(tensor)?;
        Ok(self.predict_raw(&to_f64(tensor)))
    }

    fn predict_raw(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x, None).probs
    }

    /// Output shape of every layer as actually produced by a forward pass.
    pub fn traced_shapes(&self, tensor: &CoughTensor) -> Result<Vec<Vec<usize>>> {
        self.check_input(tensor)?;
        Ok(self.trace(&to_f64(tensor), None).shapes)
    }

    fn trace(&self, x: &[f64], mut rng: Option<&mut ChaCha8Rng>) -> Trace {
        let cfg = &self.config;
        let layout = cfg.layout();
        let k = cfg.kernel;
        let pool = cfg.pool;
        let (mut h, mut w) = (cfg.input_shape.0, cfg.input_shape.1);
        let mut cur = x.to_vec();
        let mut tr = Trace {
            patches: Vec::new(),
            dims: Vec::new(),
            relu: Vec::new(),
            argmax: Vec::new(),
            masks: Vec::new(),
            last_area: 0,
            gap: Vec::new(),
            probs: Vec::new(),
            shapes: Vec::new(),
        };
        for c in &layout.conv {
            let (oh, ow) = (h + 1 - k, w + 1 - k);
            let shape = ConvShape { w, cin: c.cin, oh, ow, cout: c.cout, k };
            let patches = im2col(&cur, shape);
            let mut z = conv_forward(&patches, shape, &self.params[c.w..c.b], &self.params[c.b..c.b + c.cout]);
            z.iter_mut().for_each(|v| *v = v.max(0.0));
            tr.shapes.push(vec![oh, ow, c.cout]);
            let (ph, pw) = (oh / pool, ow / pool);
            let (mut pooled, idx) = max_pool(&z, ow, c.cout, ph, pw, pool);
            tr.shapes.push(vec![ph, pw, c.cout]);
            let mask = match rng.as_deref_mut() {
                Some(r) if cfg.dropout_rate > 0.0 => {
                    let keep = 1.0 - cfg.dropout_rate;
                    let cut = (keep * u32::MAX as f64) as u32;
                    let m: Vec<f64> = (0..pooled.len())
                        .map(|_| if r.next_u32() < cut { 1.0 / keep } else { 0.0 })
                        .collect();
                    pooled.iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
                    Some(m)
                }
                _ => None,
            };
            cur = pooled;
            tr.patches.push(patches);
            tr.dims.push((h, w));
            tr.relu.push(z);
            tr.argmax.push(idx);
            tr.masks.push(mask);
            h = ph;
            w = pw;
        }
        let channels = layout.dense.inputs;
        let area = h * w;
        let mut gap = vec![0.0; channels];
        for px in cur.chunks_exact(channels) {
            gap.iter_mut().zip(px).for_each(|(g, v)| *g += v);
        }
        gap.iter_mut().for_each(|g| *g /= area as f64);
        tr.shapes.push(vec![channels]);
        let d = layout.dense;
        let mut logits = self.params[d.b..d.b + d.outputs].to_vec();
        for (i, g) in gap.iter().enumerate() {
            let row = &self.params[d.w + i * d.outputs..d.w + (i + 1) * d.outputs];
            logits.iter_mut().zip(row).for_each(|(l, wv)| *l += g * wv);
        }
        tr.shapes.push(vec![d.outputs]);
        tr.probs = softmax(&logits);
        tr.gap = gap;
        tr.last_area = area;
        tr
    }

    /// Cross-entropy loss and its gradient for one sample.
    fn loss_and_grad(&self, x: &[f64], label: usize, rng: Option<&mut ChaCha8Rng>, grad: &mut [f64]) -> f64 {
        let tr = self.trace(x, rng);
        let layout = self.config.layout();
        let k = self.config.kernel;
        let loss = -tr.probs[label].max(f64::MIN_POSITIVE).ln();

        let d = layout.dense;
        let mut dlogits = tr.probs.clone();
        dlogits[label] -= 1.0;
        let mut dgap = vec![0.0; d.inputs];
        for i in 0..d.inputs {
            let row = &self.params[d.w + i * d.outputs..d.w + (i + 1) * d.outputs];
            let grow = &mut grad[d.w + i * d.outputs..d.w + (i + 1) * d.outputs];
            for o in 0..d.outputs {
                grow[o] += tr.gap[i] * dlogits[o];
                dgap[i] += row[o] * dlogits[o];
            }
        }
        grad[d.b..d.b + d.outputs].iter_mut().zip(&dlogits).for_each(|(g, v)| *g += v);

        let inv_area = 1.0 / tr.last_area as f64;
        let mut dout: Vec<f64> = (0..tr.last_area)
            .flat_map(|_| dgap.iter().map(|g| g * inv_area))
            .collect();
        for (bi, c) in layout.conv.iter().enumerate().rev() {
            if let Some(m) = &tr.masks[bi] {
                dout.iter_mut().zip(m).for_each(|(g, s)| *g *= s);
            }
            let (h, w) = tr.dims[bi];
            let (oh, ow) = (h + 1 - k, w + 1 - k);
            let relu = &tr.relu[bi];
            let mut dz = vec![0.0; oh * ow * c.cout];
            for (g, &i) in dout.iter().zip(&tr.argmax[bi]) {
                if relu[i] > 0.0 {
                    dz[i] += g;
                }
            }
            let shape = ConvShape { w, cin: c.cin, oh, ow, cout: c.cout, k };
            let (gw, rest) = grad[c.w..].split_at_mut(c.b - c.w);
            let gb = &mut rest[..c.cout];
            conv_weight_grad(&tr.patches[bi], shape, &dz, gw, gb);
            if bi > 0 {
                dout = conv_input_grad(shape, h, &self.params[c.w..c.b], &dz);
            }
        }
        loss
    }

    /// Loss and gradient of cross-entropy for `label`, dropout disabled.
    pub fn gradient(&self, tensor: &CoughTensor, label: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(tensor)?;
        self.check_label(label)?;
        let mut g = vec![0.0; self.params.len()];
        let loss = self.loss_and_grad(&to_f64(tensor), label, None, &mut g);
        Ok((loss, g))
    }

    /// Cross-entropy loss for `label`, dropout disabled.
    pub fn loss(&self, tensor: &CoughTensor, label: usize) -> Result<f64> {
        self.check_input(tensor)?;
        self.check_label(label)?;
        Ok(-self.predict_raw(&to_f64(tensor))[label].ln())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.config.n_classes {
            return Err(Error::Label(format!("class {label} outside 0..{}", self.config.n_classes)));
        }
        Ok(())
    }

    /// Compare the analytic gradient with central differences (step 1e-4)
    /// on `n_params` randomly chosen parameters and return the largest
    /// relative error `|a - n| / max(|a|, |n|, 1e-6)`. Parameters whose
    /// perturbation flips a ReLU or a pooling choice are redrawn, since the
    /// loss is not differentiable there.
    pub fn gradient_check(&self, tensor: &CoughTensor, label: usize, n_params: usize, seed: u64) -> Result<f64> {
        let (_, analytic) = self.gradient(tensor, label)?;
        let x = to_f64(tensor);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = 1e-4;
        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut attempts = 0;
        let base_pattern = self.pattern(&x);
        while checked < n_params && attempts < n_params * 20 {
            attempts += 1;
            let i = rng.random_range(0..self.params.len());
            let orig = self.params[i];
            probe.params[i] = orig + h;
            let plus_pattern = probe.pattern(&x);
            let lp = -probe.predict_raw(&x)[label].ln();
            probe.params[i] = orig - h;
            let minus_pattern = probe.pattern(&x);
            let lm = -probe.predict_raw(&x)[label].ln();
            probe.params[i] = orig;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
        if checked < n_params {
            return Err(Error::Model(format!(
                "only {checked} of {n_params} parameters were away from activation kinks"
            )));
        }
        Ok(worst)
    }

    /// ReLU on/off states and pooling choices of a forward pass.
    fn pattern(&self, x: &[f64]) -> (Vec<bool>, Vec<usize>) {
        let tr = self.trace(x, None);
        (
            tr.relu.iter().flatten().map(|v| *v > 0.0).collect(),
            tr.argmax.into_iter().flatten().collect(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.config).expect("config serialises");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.len());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in &self.params {
            out.extend_from_slice(&(*p as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(Error::Model("not a DeepCough weights file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != WEIGHTS_VERSION {
            return Err(Error::Model(format!("unsupported weights version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = bytes
            .get(12..12 + hlen)
            .ok_or_else(|| Error::Model("weights header truncated".into()))?;
        let config: ModelConfig =
            serde_json::from_slice(header).map_err(|e| Error::Model(format!("bad weights header: {e}")))?;
        config.validate()?;
        let n = config.layout().total;
        let body = &bytes[12 + hlen..];
        if body.len() != 4 * n {
            return Err(Error::Model(format!(
                "weights body has {} bytes, config needs {}",
                body.len(),
                4 * n
            )));
        }
        let params = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self { config, params })
    }
}

const WEIGHTS_MAGIC: &[u8; 4] = b"DCWT";
const WEIGHTS_VERSION: u32 = 1;

fn to_f64(t: &CoughTensor) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Geometry of one valid, stride-1 convolution over a channel-last input
/// of width `w`.
#[derive(Debug, Clone, Copy)]
struct ConvShape {
    w: usize,
    cin: usize,
    oh: usize,
    ow: usize,
    cout: usize,
    k: usize,
}

impl ConvShape {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// One row per output position holding its `k x k x cin` receptive field,
/// ordered like the kernel.
fn im2col(x: &[f64], s: ConvShape) -> Vec<f64> {
    let kk = s.patch_len();
    let run = s.k * s.cin;
    let mut out = vec![0.0; s.positions() * kk];
    for i in 0..s.oh {
        for j in 0..s.ow {
            let dst = &mut out[(i * s.ow + j) * kk..(i * s.ow + j + 1) * kk];
            for di in 0..s.k {
                let src = ((i + di) * s.w + j) * s.cin;
                dst[di * run..(di + 1) * run].copy_from_slice(&x[src..src + run]);
            }
        }
    }
    out
}

/// `c = op(a) * op(b) + beta * c` on row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`. A transposed operand is stored with its
/// rows and columns swapped.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length check above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn conv_forward(patches: &[f64], s: ConvShape, kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = bias.iter().copied().cycle().take(s.positions() * s.cout).collect();
    gemm(s.positions(), s.patch_len(), s.cout, patches, false, kernel, false, 1.0, &mut out);
    out
}

/// Accumulate kernel and bias gradients for output gradient `dz`.
fn conv_weight_grad(patches: &[f64], s: ConvShape, dz: &[f64], gw: &mut [f64], gb: &mut [f64]) {
    gemm(s.patch_len(), s.positions(), s.cout, patches, true, dz, false, 1.0, gw);
    for row in dz.chunks_exact(s.cout) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
}

/// Gradient with respect to the block input (height `h`).
fn conv_input_grad(s: ConvShape, h: usize, kernel: &[f64], dz: &[f64]) -> Vec<f64> {
    let kk = s.patch_len();
    let mut dpatch = vec![0.0; s.positions() * kk];
    gemm(s.positions(), s.cout, kk, dz, false, kernel, true, 0.0, &mut dpatch);
    let run = s.k * s.cin;
    let mut dx = vec![0.0; h * s.w * s.cin];
    for i in 0..s.oh {
        for j in 0..s.ow {
            let src = &dpatch[(i * s.ow + j) * kk..(i * s.ow + j + 1) * kk];
            for di in 0..s.k {
                let dst = ((i + di) * s.w + j) * s.cin;
                dx[dst..dst + run]
                    .iter_mut()
                    .zip(&src[di * run..(di + 1) * run])
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
    dx
}

/// Non-overlapping max pooling with floor semantics. Returns the pooled
/// values and the flat input index of each maximum.
fn max_pool(z: &[f64], ow: usize, c: usize, ph: usize, pw: usize, pool: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out = vec![0.0; ph * pw * c];
    let mut idx = vec![0; ph * pw * c];
    for i in 0..ph {
        for j in 0..pw {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut at = 0;
                for u in 0..pool {
                    for v in 0..pool {
                        let p = ((i * pool + u) * ow + j * pool + v) * c + ch;
                        if z[p] > best {
                            best = z[p];
                            at = p;
                        }
                    }
                }
                let o = (i * pw + j) * c + ch;
                out[o] = best;
                idx[o] = at;
            }
        }
    }
    (out, idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
    pub val_balanced_accuracy: f64,
    /// AUC + balanced accuracy; balanced accuracy counts twice when AUC is
    /// undefined on a single-class validation split.
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Labelled sample for [`train`].
pub type Sample = (CoughTensor, usize);

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.adam_beta1.powi(self.t);
        let c2 = 1.0 - cfg.adam_beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.adam_beta1 * *m + (1.0 - cfg.adam_beta1) * g;
            *v = cfg.adam_beta2 * *v + (1.0 - cfg.adam_beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_epsilon);
        }
    }
}

/// Selection metric of `model` on `idx`: (AUC, balanced accuracy, sum).
fn validation_metric(model: &ModelWeights, xs: &[Vec<f64>], labels: &[usize], idx: &[usize]) -> (Option<f64>, f64, f64) {
    let n = model.config.n_classes;
    let probs: Vec<Vec<f64>> = idx.iter().map(|&i| model.predict_raw(&xs[i])).collect();
    let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let preds: Vec<usize> = probs
        .iter()
        .map(|p| {
            if n == 2 {
                (p[1] >= 0.5) as usize
            } else {
                (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b]).then(b.cmp(&a))).unwrap()
            }
        })
        .collect();
    let ba = balanced_accuracy(&preds, &truth, n);
    let a = if n == 2 {
        let scored: Vec<(f64, bool)> = probs.iter().zip(&truth).map(|(p, &t)| (p[1], t == 1)).collect();
        auc(&scored).ok()
    } else {
        macro_auc(&probs, &truth, n).ok()
    };
    (a, ba, a.unwrap_or(ba) + ba)
}

/// Mini-batch ADAM on cross-entropy. After every epoch the model is scored
/// on `val` (AUC + balanced accuracy); the best epoch's weights are kept
/// and training stops after `early_stop_patience` epochs without
/// improvement. An empty `val` selects on the training split instead.
pub fn train(
    data: &[Sample],
    train_idx: &[usize],
    val_idx: &[usize],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ModelWeights, TrainingLog)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::Training("training split is empty".into()));
    }
    let labels: Vec<usize> = data.iter().map(|(_, l)| *l).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= model_cfg.n_classes) {
        return Err(Error::Label(format!("class {bad} outside 0..{}", model_cfg.n_classes)));
    }
    let first = labels[train_idx[0]];
    if train_idx.iter().all(|&i| labels[i] == first) {
        return Err(Error::Training("training split holds a single class".into()));
    }
    for (t, _) in data {
        if t.shape() != model_cfg.input_shape {
            return Err(Error::Model(format!(
                "tensor shape {:?} does not match model input {:?}",
                t.shape(),
                model_cfg.input_shape
            )));
        }
    }
    let xs: Vec<Vec<f64>> = data.iter().map(|(t, _)| to_f64(t)).collect();
    let select_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let mut model = ModelWeights::init(model_cfg.clone(), cfg.rng_seed)?;
    let mut adam = Adam { m: vec![0.0; model.params.len()], v: vec![0.0; model.params.len()], t: 0 };
    let mut best = model.clone();
    let mut best_metric = f64::NEG_INFINITY;
    let mut log = TrainingLog { epochs: Vec::new(), best_epoch: 0 };
    let mut grad = vec![0.0; model.params.len()];
    let mut order = train_idx.to_vec();

    for epoch in 0..cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, epoch as u64, u64::MAX));
        shuffle(&mut order, &mut rng);
        let mut total_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, epoch as u64, i as u64));
                total_loss += model.loss_and_grad(&xs[i], labels[i], Some(&mut drng), &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(&mut model.params, &grad, cfg);
        }
        let (val_auc, val_ba, metric) = validation_metric(&model, &xs, &labels, select_idx);
        log.epochs.push(EpochLog {
            epoch,
            loss: total_loss / order.len() as f64,
            val_auc,
            val_balanced_accuracy: val_ba,
            metric,
        });
        if metric > best_metric {
            best_metric = metric;
            best = model.clone();
            log.best_epoch = epoch;
        } else if epoch - log.best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    best.round_to_f32();
    Ok((best, log))
}

impl Scorer<CoughTensor> for ModelWeights {
    fn score(&self, sample: &CoughTensor) -> Result<Vec<f64>> {
        self.predict(sample)
    }
}

/// Trains DeepCough inside [`crate::eval::run_cv`]; the fold seed replaces
/// `train.rng_seed`.
#[derive(Debug, Clone, Default)]
pub struct DeepCoughLearner {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Learner<CoughTensor> for DeepCoughLearner {
    type Model = ModelWeights;

    fn fit(
        &self,
        samples: &[CoughTensor],
        labels: &[usize],
        train_idx: &[usize],
        val_idx: &[usize],
        seed: u64,
    ) -> Result<ModelWeights> {
        let data: Vec<Sample> = samples.iter().cloned().zip(labels.iter().copied()).collect();
        let cfg = TrainConfig { rng_seed: seed, ..self.train.clone() };
        Ok(train(&data, train_idx, val_idx, &self.model, &cfg)?.0)
    }
}

/// Seed for one (epoch, sample) pair, independent of iteration order.
fn derive_seed(seed: u64, epoch: u64, sample: u64) -> u64 {
    let mut z = seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ sample.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn shuffle(v: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(seed: u64, channels: usize) -> CoughTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = CoughTensor::zeros(33, 100, channels);
        t.data.iter_mut().for_each(|v| *v = rng.random::<f32>());
        t
    }

    #[test]
    fn parameter_counts() {
        let m = ModelWeights::zeros(ModelConfig::default()).unwrap();
        assert_eq!(m.count_parameters(), vec![208, 2080, 8256, 32896, 258]);
        assert_eq!(m.params.len(), 43698);
        let m1 = ModelWeights::zeros(ModelConfig::with_channels(1)).unwrap();
        assert_eq!(m1.count_parameters()[0], 80);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = ModelWeights::zeros(ModelConfig::default()).unwrap();
        let p = m.predict(&random_tensor(1, 3)).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_prediction_gradient() {
        let m = ModelWeights::zeros(ModelConfig::default()).unwrap();
        let (loss, g) = m.gradient(&random_tensor(2, 3), 1).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let b = m.config.layout().dense.b;
        assert!((g[b] - 0.5).abs() < 1e-12);
        assert!((g[b + 1] - (0.5 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_model_error() {
        let m = ModelWeights::zeros(ModelConfig::default()).unwrap();
        assert!(matches!(m.predict(&random_tensor(1, 1)), Err(Error::Model(_))));
    }

    #[test]
    fn dropout_only_when_training() {
        let m = ModelWeights::init(ModelConfig::default(), 3).unwrap();
        let t = random_tensor(4, 3);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let a = m.forward(&t, false, &mut r1).unwrap();
        let b = m.forward(&t, false, &mut r2).unwrap();
        assert_eq!(a, b);
        let c = m.forward(&t, true, &mut r1).unwrap();
        let d = m.forward(&t, true, &mut r2).unwrap();
        assert_ne!(c, d);
        assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_round_trip() {
        let m = ModelWeights::init(ModelConfig::default(), 5).unwrap();
        let bytes = m.to_bytes();
        let back = ModelWeights::from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(ModelWeights::from_bytes(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(ModelWeights::from_bytes(&bad).is_err());
    }

    #[test]
    fn small_inputs_rejected() {
        let cfg = ModelConfig { input_shape: (10, 100, 3), ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
