//! Multi-task Q-network with hand-rolled differentiation.
//!
//! The network is a shared convolutional trunk followed by two branches: a
//! Q head emitting one value per action and an optional classification head
//! emitting two logits. Parameters live in one flat `f64` vector; layers
//! address slices of it by offset, which keeps snapshots, SGD updates and
//! finite-difference checks trivial. Everything is f64 so analytic gradients
//! can be validated against central differences at 1e-5 steps.
//!
//! Batch gradients are accumulated per sample (optionally in parallel) and
//! reduced in index order, so results are bit-identical across execution
//! modes.

use crate::parallel::{map_range, ExecMode};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input length {got} does not match architecture ({want})")]
    InputShape { got: usize, want: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// One convolution stage: `out_channels` filters of size `kernel x kernel`
/// applied with `stride` (valid padding), followed by a ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Branch head: extra conv stages, then fully-connected layers (ReLU between
/// them), then a linear output layer of `outputs` units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub convs: Vec<ConvSpec>,
    pub fc: Vec<usize>,
    pub outputs: usize,
}

/// Full architecture description; serialized into checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub shared_convs: Vec<ConvSpec>,
    pub q_branch: BranchSpec,
    pub cls_branch: Option<BranchSpec>,
}

impl ArchSpec {
    /// Desk-scale profile: 64x64 grayscale input, three conv stages
    /// (two shared, one per branch) and two fully-connected layers per
    /// branch.
    pub fn desk(input_size: usize, multi_task: bool) -> Self {
        let branch = |outputs: usize| BranchSpec {
            convs: vec![ConvSpec {
                out_channels: 16,
                kernel: 3,
                stride: 1,
            }],
            fc: vec![64],
            outputs,
        };
        ArchSpec {
            input_channels: 1,
            input_size,
            shared_convs: vec![
                ConvSpec {
                    out_channels: 8,
                    kernel: 8,
                    stride: 4,
                },
                ConvSpec {
                    out_channels: 16,
                    kernel: 4,
                    stride: 2,
                },
            ],
            q_branch: branch(9),
            cls_branch: multi_task.then(|| branch(2)),
        }
    }

    /// Paper-scale profile: 224x224 input, three shared conv stages and two
    /// more per branch plus two fully-connected layers each.
    pub fn full(multi_task: bool) -> Self {
        let branch = |outputs: usize| BranchSpec {
            convs: vec![
                ConvSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                },
            ],
            fc: vec![512],
            outputs,
        };
        ArchSpec {
            input_channels: 1,
            input_size: 224,
            shared_convs: vec![
                ConvSpec {
                    out_channels: 32,
                    kernel: 8,
                    stride: 4,
                },
                ConvSpec {
                    out_channels: 64,
                    kernel: 4,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 64,
                    kernel: 3,
                    stride: 1,
                },
            ],
            q_branch: branch(9),
            cls_branch: multi_task.then(|| branch(2)),
        }
    }

    /// Conv-free profile over flat feature vectors (tabular-equivalent when
    /// `fc` is empty): used for small MDPs that bypass images.
    pub fn vector(n_features: usize, fc: Vec<usize>, n_actions: usize) -> Self {
        ArchSpec {
            input_channels: 1,
            input_size: 0,
            shared_convs: vec![],
            q_branch: BranchSpec {
                convs: vec![],
                fc,
                outputs: n_actions,
            },
            cls_branch: None,
        }
        .with_flat_input(n_features)
    }

    fn with_flat_input(mut self, n: usize) -> Self {
        // Flat inputs are modeled as 1-channel "images" of 1 x n.
        self.input_channels = n;
        self.input_size = 1;
        self
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_size * self.input_size
    }

    pub fn n_actions(&self) -> usize {
        self.q_branch.outputs
    }

    pub fn is_multi_task(&self) -> bool {
        self.cls_branch.is_some()
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv {
        in_c: usize,
        in_h: usize,
        in_w: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        out_h: usize,
        out_w: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu {
        len: usize,
    },
    Dense {
        in_len: usize,
        out_len: usize,
        w_off: usize,
        b_off: usize,
    },
}

impl Layer {
    fn out_len(&self) -> usize {
        match self {
            Layer::Conv {
                out_c, out_h, out_w, ..
            } => out_c * out_h * out_w,
            Layer::Relu { len } => *len,
            Layer::Dense { out_len, .. } => *out_len,
        }
    }
}

struct LayerBuilder {
    layers: Vec<Layer>,
    offset: usize,
    c: usize,
    h: usize,
    w: usize,
    init_spans: Vec<(usize, usize, usize)>, // (w_off, w_len, fan_in), biases zero-init
}

impl LayerBuilder {
    fn new(c: usize, h: usize, w: usize, offset: usize) -> Self {
        Self {
            layers: Vec::new(),
            offset,
            c,
            h,
            w,
            init_spans: Vec::new(),
        }
    }

    fn conv(&mut self, s: &ConvSpec) -> Result<(), NetError> {
        if s.kernel > self.h || s.kernel > self.w || s.stride == 0 {
            return Err(NetError::InvalidArch(format!(
                "conv {}x{} stride {} does not fit {}x{} input",
                s.kernel, s.kernel, s.stride, self.h, self.w
            )));
        }
        let out_h = (self.h - s.kernel) / s.stride + 1;
        let out_w = (self.w - s.kernel) / s.stride + 1;
        let w_len = s.out_channels * self.c * s.kernel * s.kernel;
        let w_off = self.offset;
        let b_off = w_off + w_len;
        self.init_spans
            .push((w_off, w_len, self.c * s.kernel * s.kernel));
        self.layers.push(Layer::Conv {
            in_c: self.c,
            in_h: self.h,
            in_w: self.w,
            out_c: s.out_channels,
            k: s.kernel,
            stride: s.stride,
            out_h,
            out_w,
            w_off,
            b_off,
        });
        self.layers.push(Layer::Relu {
            len: s.out_channels * out_h * out_w,
        });
        self.offset = b_off + s.out_channels;
        self.c = s.out_channels;
        self.h = out_h;
        self.w = out_w;
        Ok(())
    }

    fn dense(&mut self, out_len: usize, relu: bool) {
        let in_len = self.c * self.h * self.w;
        let w_off = self.offset;
        let b_off = w_off + in_len * out_len;
        self.init_spans.push((w_off, in_len * out_len, in_len));
        self.layers.push(Layer::Dense {
            in_len,
            out_len,
            w_off,
            b_off,
        });
        if relu {
            self.layers.push(Layer::Relu { len: out_len });
        }
        self.offset = b_off + out_len;
        self.c = out_len;
        self.h = 1;
        self.w = 1;
    }
}

/// Function approximator: flat parameter vector plus the layer plan derived
/// from an [`ArchSpec`].
#[derive(Debug, Clone)]
pub struct QNetwork {
    pub arch: ArchSpec,
    pub params: Vec<f64>,
    shared: Vec<Layer>,
    q_layers: Vec<Layer>,
    cls_layers: Vec<Layer>,
    init_spans: Vec<(usize, usize, usize)>,
}

/// Forward outputs: Q-values per action and, in multi-task mode, the two
/// class logits.
#[derive(Debug, Clone)]
pub struct NetOutput {
    pub q: Vec<f64>,
    pub cls_logits: Option<Vec<f64>>,
}

impl QNetwork {
    /// Builds the network with all parameters zero.
    pub fn zeros(arch: ArchSpec) -> Result<Self, NetError> {
        let mut shared_b = LayerBuilder::new(arch.input_channels, arch.input_size, arch.input_size, 0);
        for c in &arch.shared_convs {
            shared_b.conv(c)?;
        }
        let (c, h, w) = (shared_b.c, shared_b.h, shared_b.w);
        let mut offset = shared_b.offset;
        let mut init_spans = shared_b.init_spans.clone();

        let mut build_branch = |spec: &BranchSpec, offset: &mut usize| -> Result<Vec<Layer>, NetError> {
            let mut b = LayerBuilder::new(c, h, w, *offset);
            for cs in &spec.convs {
                b.conv(cs)?;
            }
            for &n in &spec.fc {
                b.dense(n, true);
            }
            b.dense(spec.outputs, false);
            *offset = b.offset;
            init_spans.extend(b.init_spans.iter().copied());
            Ok(b.layers)
        };

        let q_layers = build_branch(&arch.q_branch, &mut offset)?;
        let cls_layers = match &arch.cls_branch {
            Some(spec) => build_branch(spec, &mut offset)?,
            None => Vec::new(),
        };
        Ok(Self {
            params: vec![0.0; offset],
            arch,
            shared: shared_b.layers,
            q_layers,
            cls_layers,
            init_spans,
        })
    }

    /// He-style uniform initialization of the weights (biases stay zero).
    pub fn init<R: Rng>(arch: ArchSpec, rng: &mut R) -> Result<Self, NetError> {
        let mut net = Self::zeros(arch)?;
        for &(off, len, fan_in) in &net.init_spans {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut net.params[off..off + len] {
                *p = rng.gen_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NetError> {
        if input.len() != self.arch.input_len() {
            return Err(NetError::InputShape {
                got: input.len(),
                want: self.arch.input_len(),
            });
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<NetOutput, NetError> {
        self.check_input(input)?;
        let trunk = run_forward(&self.shared, &self.params, input.to_vec(), None);
        let q = run_forward(&self.q_layers, &self.params, trunk.clone(), None);
        let cls_logits = if self.cls_layers.is_empty() {
            None
        } else {
            Some(run_forward(&self.cls_layers, &self.params, trunk, None))
        };
        Ok(NetOutput { q, cls_logits })
    }

    /// Q-values only (skips the classification branch).
    pub fn q_values(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(input)?;
        let trunk = run_forward(&self.shared, &self.params, input.to_vec(), None);
        Ok(run_forward(&self.q_layers, &self.params, trunk, None))
    }

    /// Softmax class probabilities; errors when the branch is absent.
    pub fn class_probs(&self, input: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(input)?;
        if self.cls_layers.is_empty() {
            return Err(NetError::InvalidArch(
                "network has no classification branch".into(),
            ));
        }
        let trunk = run_forward(&self.shared, &self.params, input.to_vec(), None);
        let logits = run_forward(&self.cls_layers, &self.params, trunk, None);
        Ok(softmax(&logits))
    }

    fn branch_backward(
        &self,
        input: &[f64],
        branch: Branch,
        grad_out: Vec<f64>,
        grads: &mut [f64],
    ) {
        let layers = match branch {
            Branch::Q => &self.q_layers,
            Branch::Cls => &self.cls_layers,
        };
        let mut trunk_cache = Vec::new();
        let trunk = run_forward(&self.shared, &self.params, input.to_vec(), Some(&mut trunk_cache));
        let mut branch_cache = Vec::new();
        let _ = run_forward(layers, &self.params, trunk, Some(&mut branch_cache));
        let g_trunk = run_backward(layers, &self.params, &branch_cache, grad_out, grads);
        run_backward(&self.shared, &self.params, &trunk_cache, g_trunk, grads);
    }
}

enum Branch {
    Q,
    Cls,
}

/// Runs `layers` forward; when `cache` is given, stores each layer's input
/// for the backward pass.
fn run_forward(
    layers: &[Layer],
    params: &[f64],
    mut x: Vec<f64>,
    mut cache: Option<&mut Vec<Vec<f64>>>,
) -> Vec<f64> {
    for layer in layers {
        if let Some(c) = cache.as_deref_mut() {
            c.push(x.clone());
        }
        x = layer_forward(layer, params, &x);
    }
    x
}

fn layer_forward(layer: &Layer, params: &[f64], x: &[f64]) -> Vec<f64> {
    match layer {
        Layer::Relu { len } => {
            debug_assert_eq!(x.len(), *len);
            x.iter().map(|&v| v.max(0.0)).collect()
        }
        Layer::Dense {
            in_len,
            out_len,
            w_off,
            b_off,
        } => {
            let mut out = params[*b_off..*b_off + *out_len].to_vec();
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &params[*w_off + o * *in_len..*w_off + (o + 1) * *in_len];
                let mut acc = 0.0;
                for (w, v) in row.iter().zip(x) {
                    acc += w * v;
                }
                *out_v += acc;
            }
            out
        }
        Layer::Conv {
            in_c,
            in_h,
            in_w,
            out_c,
            k,
            stride,
            out_h,
            out_w,
            w_off,
            b_off,
        } => {
            let mut out = vec![0.0; out_c * out_h * out_w];
            for oc in 0..*out_c {
                let bias = params[*b_off + oc];
                for oy in 0..*out_h {
                    for ox in 0..*out_w {
                        let mut acc = bias;
                        for ic in 0..*in_c {
                            let w_base = *w_off + ((oc * in_c + ic) * k) * k;
                            let in_base = ic * in_h * in_w;
                            for ky in 0..*k {
                                let iy = oy * stride + ky;
                                let in_row = in_base + iy * in_w + ox * stride;
                                let w_row = w_base + ky * k;
                                for kx in 0..*k {
                                    acc += params[w_row + kx] * x[in_row + kx];
                                }
                            }
                        }
                        out[(oc * out_h + oy) * out_w + ox] = acc;
                    }
                }
            }
            out
        }
    }
}

/// Backpropagates `grad_out` through `layers`, accumulating parameter
/// gradients into `grads` and returning the gradient w.r.t. the input.
fn run_backward(
    layers: &[Layer],
    params: &[f64],
    cache: &[Vec<f64>],
    mut grad_out: Vec<f64>,
    grads: &mut [f64],
) -> Vec<f64> {
    for (layer, x) in layers.iter().zip(cache).rev() {
        grad_out = match layer {
            Layer::Relu { .. } => grad_out
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Dense {
                in_len,
                out_len,
                w_off,
                b_off,
            } => {
                let mut g_in = vec![0.0; *in_len];
                for o in 0..*out_len {
                    let g = grad_out[o];
                    grads[*b_off + o] += g;
                    let row = *w_off + o * *in_len;
                    for i in 0..*in_len {
                        grads[row + i] += g * x[i];
                        g_in[i] += g * params[row + i];
                    }
                }
                g_in
            }
            Layer::Conv {
                in_c,
                in_h,
                in_w,
                out_c,
                k,
                stride,
                out_h,
                out_w,
                w_off,
                b_off,
            } => {
                let mut g_in = vec![0.0; in_c * in_h * in_w];
                for oc in 0..*out_c {
                    for oy in 0..*out_h {
                        for ox in 0..*out_w {
                            let g = grad_out[(oc * out_h + oy) * out_w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            grads[*b_off + oc] += g;
                            for ic in 0..*in_c {
                                let w_base = *w_off + ((oc * in_c + ic) * k) * k;
                                let in_base = ic * in_h * in_w;
                                for ky in 0..*k {
                                    let iy = oy * stride + ky;
                                    let in_row = in_base + iy * in_w + ox * stride;
                                    let w_row = w_base + ky * k;
                                    for kx in 0..*k {
                                        grads[w_row + kx] += g * x[in_row + kx];
                                        g_in[in_row + kx] += g * params[w_row + kx];
                                    }
                                }
                            }
                        }
                    }
                }
                g_in
            }
        };
    }
    grad_out
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// One Q-learning regression sample: state features, the action taken, and
/// the (constant) bootstrap target for that action.
#[derive(Debug, Clone)]
pub struct DrlSample {
    pub state: Vec<f64>,
    pub action: usize,
    pub target: f64,
}

/// One classification sample: crop features and the binary label.
#[derive(Debug, Clone)]
pub struct ClsSample {
    pub input: Vec<f64>,
    pub label: usize,
}

/// Mean-squared Bellman error over the batch and its parameter gradient.
/// Gradient flows only through the online network's selected-action outputs;
/// targets enter as constants.
pub fn drl_loss_and_grad(
    net: &QNetwork,
    batch: &[DrlSample],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>), NetError> {
    for s in batch {
        net.check_input(&s.state)?;
    }
    let inv_b = 1.0 / batch.len() as f64;
    let per_sample = map_range(batch.len(), mode, |i| {
        let s = &batch[i];
        let q = net
            .q_values(&s.state)
            .expect("shape checked above");
        let resid = q[s.action] - s.target;
        let mut grad_out = vec![0.0; q.len()];
        grad_out[s.action] = 2.0 * resid * inv_b;
        let mut grads = vec![0.0; net.param_count()];
        net.branch_backward(&s.state, Branch::Q, grad_out, &mut grads);
        (resid * resid * inv_b, grads)
    });
    Ok(reduce_grads(per_sample, net.param_count()))
}

/// Mean cross-entropy over the batch and its parameter gradient.
pub fn cls_loss_and_grad(
    net: &QNetwork,
    batch: &[ClsSample],
    mode: ExecMode,
) -> Result<(f64, Vec<f64>), NetError> {
    if net.cls_layers.is_empty() {
        return Err(NetError::InvalidArch(
            "network has no classification branch".into(),
        ));
    }
    for s in batch {
        net.check_input(&s.input)?;
    }
    let inv_b = 1.0 / batch.len() as f64;
    let per_sample = map_range(batch.len(), mode, |i| {
        let s = &batch[i];
        let trunk = run_forward(&net.shared, &net.params, s.input.clone(), None);
        let logits = run_forward(&net.cls_layers, &net.params, trunk, None);
        let probs = softmax(&logits);
        let loss = -(probs[s.label].max(1e-300)).ln() * inv_b;
        // d(CE o softmax)/dlogits = probs - onehot.
        let mut grad_out = probs;
        grad_out[s.label] -= 1.0;
        for g in &mut grad_out {
            *g *= inv_b;
        }
        let mut grads = vec![0.0; net.param_count()];
        net.branch_backward(&s.input, Branch::Cls, grad_out, &mut grads);
        (loss, grads)
    });
    Ok(reduce_grads(per_sample, net.param_count()))
}

fn reduce_grads(per_sample: Vec<(f64, Vec<f64>)>, n_params: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grads = vec![0.0; n_params];
    for (l, g) in per_sample {
        loss += l;
        for (acc, v) in grads.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    (loss, grads)
}

/// Plain SGD step with optional momentum.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) {
    if momentum > 0.0 {
        for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
            *v = momentum * *v - lr * g;
            *p += *v;
        }
    } else {
        for (p, g) in params.iter_mut().zip(grads) {
            *p -= lr * g;
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OMNIDRL\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes the versioned model checkpoint: architecture spec, flat parameter
/// vector and the training step counter.
pub fn save_checkpoint(path: &Path, net: &QNetwork, step: u64) -> Result<(), NetError> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
    let io = |e: std::io::Error| NetError::Checkpoint(e.to_string());
    f.write_all(CHECKPOINT_MAGIC).map_err(io)?;
    f.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
    let arch =
        serde_json::to_vec(&net.arch).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    f.write_u32::<LittleEndian>(arch.len() as u32).map_err(io)?;
    f.write_all(&arch).map_err(io)?;
    f.write_u64::<LittleEndian>(step).map_err(io)?;
    f.write_u64::<LittleEndian>(net.params.len() as u64)
        .map_err(io)?;
    for &p in &net.params {
        f.write_f64::<LittleEndian>(p).map_err(io)?;
    }
    Ok(())
}

/// Loads a model checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(QNetwork, u64), NetError> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
    let io = |e: std::io::Error| NetError::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint("bad magic bytes".into()));
    }
    let version = f.read_u32::<LittleEndian>().map_err(io)?;
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let arch_len = f.read_u32::<LittleEndian>().map_err(io)? as usize;
    let mut arch_buf = vec![0u8; arch_len];
    f.read_exact(&mut arch_buf).map_err(io)?;
    let arch: ArchSpec =
        serde_json::from_slice(&arch_buf).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    let step = f.read_u64::<LittleEndian>().map_err(io)?;
    let n = f.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut net = QNetwork::zeros(arch)?;
    if net.params.len() != n {
        return Err(NetError::Checkpoint(format!(
            "parameter count mismatch: file has {n}, architecture wants {}",
            net.params.len()
        )));
    }
    for p in &mut net.params {
        *p = f.read_f64::<LittleEndian>().map_err(io)?;
    }
    Ok((net, step))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_channels: 1,
            input_size: 6,
            shared_convs: vec![ConvSpec {
                out_channels: 2,
                kernel: 3,
                stride: 1,
            }],
            q_branch: BranchSpec {
                convs: vec![],
                fc: vec![7],
                outputs: 9,
            },
            cls_branch: Some(BranchSpec {
                convs: vec![ConvSpec {
                    out_channels: 2,
                    kernel: 2,
                    stride: 2,
                }],
                fc: vec![5],
                outputs: 2,
            }),
        }
    }

    fn rand_input<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_net_outputs_zero_q() {
        let net = QNetwork::zeros(tiny_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = net.forward(&rand_input(36, &mut rng)).unwrap();
        assert!(out.q.iter().all(|&v| v == 0.0));
        assert_eq!(out.q.len(), 9);
        let probs = softmax(&out.cls_logits.unwrap());
        assert!((probs[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        for _ in 0..1000 {
            let x = rand_input(36, &mut rng);
            let a = net.forward(&x).unwrap();
            let b = net.forward(&x).unwrap();
            assert_eq!(a.q, b.q);
            assert!(a.q.iter().all(|v| v.is_finite()));
            assert!(a.cls_logits.unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn input_shape_is_checked() {
        let net = QNetwork::zeros(tiny_arch()).unwrap();
        assert!(matches!(
            net.forward(&[0.0; 35]),
            Err(NetError::InputShape { got: 35, want: 36 })
        ));
    }

    #[test]
    fn softmax_normalizes_and_is_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..2).map(|_| rng.gen_range(-700.0..700.0)).collect();
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    /// Central-difference oracle for any scalar loss of the parameters.
    fn numeric_grad(
        net: &QNetwork,
        loss_fn: &dyn Fn(&QNetwork) -> f64,
        idx: usize,
        h: f64,
    ) -> f64 {
        let mut plus = net.clone();
        plus.params[idx] += h;
        let mut minus = net.clone();
        minus.params[idx] -= h;
        (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h)
    }

    fn check_grads(net: &QNetwork, analytic: &[f64], loss_fn: &dyn Fn(&QNetwork) -> f64) {
        let h = 1e-5;
        let mut worst = 0.0_f64;
        for idx in 0..net.param_count() {
            let num = numeric_grad(net, loss_fn, idx, h);
            let ana = analytic[idx];
            let scale = ana.abs().max(num.abs());
            if scale < 1e-8 {
                assert!((ana - num).abs() < 1e-8, "param {idx}: {ana} vs {num}");
            } else {
                let rel = (ana - num).abs() / scale;
                worst = worst.max(rel);
                assert!(rel < 1e-4, "param {idx}: rel err {rel} ({ana} vs {num})");
            }
        }
        assert!(worst > 0.0, "degenerate check: all gradients negligible");
    }

    #[test]
    fn drl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let batch: Vec<DrlSample> = (0..3)
            .map(|i| DrlSample {
                state: rand_input(36, &mut rng),
                action: (i * 3) % 9,
                target: rng.gen_range(-2.0..2.0),
            })
            .collect();
        let (_, grads) = drl_loss_and_grad(&net, &batch, ExecMode::Sequential).unwrap();
        let batch_c = batch.clone();
        check_grads(&net, &grads, &move |n: &QNetwork| {
            drl_loss_and_grad(n, &batch_c, ExecMode::Sequential).unwrap().0
        });
    }

    #[test]
    fn cls_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let batch: Vec<ClsSample> = (0..4)
            .map(|i| ClsSample {
                input: rand_input(36, &mut rng),
                label: i % 2,
            })
            .collect();
        let (_, grads) = cls_loss_and_grad(&net, &batch, ExecMode::Sequential).unwrap();
        let batch_c = batch.clone();
        check_grads(&net, &grads, &move |n: &QNetwork| {
            cls_loss_and_grad(n, &batch_c, ExecMode::Sequential).unwrap().0
        });
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let state = rand_input(36, &mut rng);
        let q = net.q_values(&state).unwrap();
        let batch = vec![DrlSample {
            state,
            action: 4,
            target: q[4],
        }];
        let (loss, grads) = drl_loss_and_grad(&net, &batch, ExecMode::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn doubling_residuals_quadruples_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let mk_batch = |scale: f64| -> Vec<DrlSample> {
            let mut r = ChaCha8Rng::seed_from_u64(8);
            (0..4)
                .map(|i| {
                    let state = rand_input(36, &mut r);
                    let q = net.q_values(&state).unwrap();
                    let offset = r.gen_range(0.2..1.0) * scale;
                    DrlSample {
                        state,
                        action: i % 9,
                        target: q[i % 9] + offset,
                    }
                })
                .collect()
        };
        let (l1, _) = drl_loss_and_grad(&net, &mk_batch(1.0), ExecMode::Sequential).unwrap();
        let (l2, _) = drl_loss_and_grad(&net, &mk_batch(2.0), ExecMode::Sequential).unwrap();
        assert!((l2 / l1 - 4.0).abs() < 1e-9, "ratio {}", l2 / l1);
    }

    #[test]
    fn cls_zero_net_loss_is_ln2() {
        let net = QNetwork::zeros(tiny_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch = vec![ClsSample {
            input: rand_input(36, &mut rng),
            label: 1,
        }];
        let (loss, _) = cls_loss_and_grad(&net, &batch, ExecMode::Sequential).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn parallel_and_sequential_grads_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let batch: Vec<DrlSample> = (0..8)
            .map(|i| DrlSample {
                state: rand_input(36, &mut rng),
                action: i % 9,
                target: rng.gen_range(-1.0..1.0),
            })
            .collect();
        let (l_seq, g_seq) = drl_loss_and_grad(&net, &batch, ExecMode::Sequential).unwrap();
        let (l_def, g_def) = drl_loss_and_grad(&net, &batch, ExecMode::default()).unwrap();
        assert_eq!(l_seq, l_def);
        assert_eq!(g_seq, g_def);
    }

    #[test]
    fn vector_arch_is_tabular_with_identity_features() {
        // One linear layer over one-hot features stores Q(s, a) = W[a, s].
        let arch = ArchSpec::vector(3, vec![], 2);
        let mut net = QNetwork::zeros(arch).unwrap();
        // Weight layout: row per output.
        net.params[0] = 1.0; // Q(s0, a0)
        net.params[5] = -2.0; // Q(s2, a1)
        let q0 = net.q_values(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(q0, vec![1.0, 0.0]);
        let q2 = net.q_values(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(q2, vec![0.0, -2.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net = QNetwork::init(tiny_arch(), &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &net, 12345).unwrap();
        let (back, step) = load_checkpoint(&path).unwrap();
        assert_eq!(step, 12345);
        assert_eq!(back.arch, net.arch);
        assert_eq!(back.params, net.params);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
