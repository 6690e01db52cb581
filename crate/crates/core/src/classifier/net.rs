//! Convolutional frame classifier with writer-adaptation biases.
//!
//! Tensors are flat `[batch][channel][row][col]` buffers of f64.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::sub_rng;

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    /// Average-pooling factor applied to the raw patch before the first block.
    pub input_pool: usize,
    /// Output channels of each 3x3 convolutional block.
    pub conv_channels: Vec<usize>,
    /// Width of the fully connected hidden layer.
    pub dense: usize,
    /// Writer code dimension G.
    pub code_dim: usize,
    /// Number P of leading convolutional blocks with an adaptation matrix.
    pub adapted_blocks: usize,
    /// Standard deviation of the random adaptation-matrix initialization.
    pub adapt_init_std: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            input_pool: 2,
            conv_channels: vec![16, 32],
            dense: 128,
            code_dim: 200,
            adapted_blocks: 2,
            adapt_init_std: 0.05,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

/// Which statistics batch normalization uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current minibatch (base training).
    Batch,
    /// Frozen running statistics (inference and writer adaptation).
    Running,
}

/// How per-frame cross-entropies are combined into the minibatch loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Input spatial size; the output before pooling has the same size.
    pub height: usize,
    pub width: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// `K x G` adaptation matrix, row-major.
    pub adapt: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Network `conv blocks -> dense + ReLU -> dense -> softmax` over tied states.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveClassifier {
    pub config: ClassifierConfig,
    /// Raw patch geometry expected by [`AdaptiveClassifier::prepare`].
    pub patch_height: usize,
    pub patch_width: usize,
    pub blocks: Vec<ConvBlock>,
    pub hidden: Dense,
    pub output: Dense,
}

/// Parameter gradients, shaped like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same order as [`AdaptiveClassifier::base_params`].
    pub base: Vec<Vec<f64>>,
    /// One entry per adapted block.
    pub adapt: Vec<Vec<f64>>,
    pub code: Vec<f64>,
}

struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    activ: Vec<f64>,
    argmax: Vec<usize>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

/// Intermediate values of a forward pass kept for back-propagation.
pub struct ForwardCache {
    batch: usize,
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    /// `batch x outputs` log-posteriors.
    pub log_probs: Vec<f64>,
}

fn normal_vec(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

impl AdaptiveClassifier {
    /// Randomly initialized network for `patch_height x patch_width` patches.
    pub fn new(
        config: ClassifierConfig,
        patch_height: usize,
        patch_width: usize,
        num_outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.input_pool == 0 || config.conv_channels.is_empty() || num_outputs == 0 {
            return Err(Error::Config("classifier needs a pool factor, conv blocks and outputs".into()));
        }
        if config.adapted_blocks > config.conv_channels.len() {
            return Err(Error::Config(format!(
                "{} adapted blocks but only {} convolutional blocks",
                config.adapted_blocks,
                config.conv_channels.len()
            )));
        }
        if config.adapted_blocks > 0 && config.code_dim == 0 {
            return Err(Error::Config("adapted blocks need a positive code dimension".into()));
        }
        let mut rng = sub_rng(seed, "classifier-init", 0);
        let (mut h, mut w) = (patch_height / config.input_pool, patch_width / config.input_pool);
        let mut in_c = 1;
        let mut blocks = Vec::new();
        for (p, &k) in config.conv_channels.iter().enumerate() {
            if h < 2 || w < 2 {
                return Err(Error::Config(format!(
                    "block {p} input is {h}x{w}; too small for 2x2 pooling"
                )));
            }
            let fan_in = (in_c * KERNEL * KERNEL) as f64;
            blocks.push(ConvBlock {
                in_channels: in_c,
                out_channels: k,
                height: h,
                width: w,
                weight: normal_vec(&mut rng, k * in_c * KERNEL * KERNEL, (2.0 / fan_in).sqrt()),
                bias: vec![0.0; k],
                gamma: vec![1.0; k],
                beta: vec![0.0; k],
                running_mean: vec![0.0; k],
                running_var: vec![1.0; k],
                adapt: (p < config.adapted_blocks)
                    .then(|| normal_vec(&mut rng, k * config.code_dim, config.adapt_init_std)),
            });
            in_c = k;
            h /= 2;
            w /= 2;
        }
        let flat = in_c * h * w;
        let hidden = Dense {
            inputs: flat,
            outputs: config.dense,
            weight: normal_vec(&mut rng, flat * config.dense, (2.0 / flat as f64).sqrt()),
            bias: vec![0.0; config.dense],
        };
        let output = Dense {
            inputs: config.dense,
            outputs: num_outputs,
            weight: normal_vec(&mut rng, config.dense * num_outputs, 0.01),
            bias: vec![0.0; num_outputs],
        };
        Ok(Self {
            config,
            patch_height,
            patch_width,
            blocks,
            hidden,
            output,
        })
    }

    pub fn num_outputs(&self) -> usize {
        self.output.outputs
    }

    pub fn code_dim(&self) -> usize {
        self.config.code_dim
    }

    pub fn num_adapted(&self) -> usize {
        self.blocks.iter().filter(|b| b.adapt.is_some()).count()
    }

    /// Size of one prepared input.
    pub fn input_len(&self) -> usize {
        self.blocks[0].height * self.blocks[0].width
    }

    /// Average-pools a raw patch into the network input.
    pub fn prepare(&self, patch: &[f32], out: &mut Vec<f64>) {
        let f = self.config.input_pool;
        let (h, w) = (self.blocks[0].height, self.blocks[0].width);
        let scale = 1.0 / (f * f) as f64;
        for r in 0..h {
            for c in 0..w {
                let mut s = 0.0;
                for dr in 0..f {
                    let row = (r * f + dr) * self.patch_width;
                    for dc in 0..f {
                        s += patch[row + c * f + dc] as f64;
                    }
                }
                out.push(s * scale);
            }
        }
    }

    /// Base (writer-independent) parameters in a fixed order.
    pub fn base_params(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.weight, &b.bias, &b.gamma, &b.beta]);
        }
        v.extend([&self.hidden.weight, &self.hidden.bias, &self.output.weight, &self.output.bias]);
        v
    }

    pub fn base_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for b in self.blocks.iter_mut() {
            v.extend([&mut b.weight, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        v.extend([
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.output.weight,
            &mut self.output.bias,
        ]);
        v
    }

    pub fn adapt_params(&self) -> Vec<&Vec<f64>> {
        self.blocks.iter().filter_map(|b| b.adapt.as_ref()).collect()
    }

    pub fn adapt_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.blocks.iter_mut().filter_map(|b| b.adapt.as_mut()).collect()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            base: self.base_params().iter().map(|p| vec![0.0; p.len()]).collect(),
            adapt: self.adapt_params().iter().map(|p| vec![0.0; p.len()]).collect(),
            code: vec![0.0; self.config.code_dim],
        }
    }

    fn check_code(&self, code: Option<&[f64]>) -> Result<()> {
        if let Some(v) = code {
            if v.len() != self.config.code_dim {
                return Err(Error::Dimension(format!(
                    "writer code has {} values, model expects {}",
                    v.len(),
                    self.config.code_dim
                )));
            }
        }
        Ok(())
    }

    /// Per-channel bias `Q = A V` of a block, if it is adapted and a code is given.
    pub fn code_bias(&self, block: usize, code: Option<&[f64]>) -> Option<Vec<f64>> {
        let b = &self.blocks[block];
        let (a, v) = (b.adapt.as_ref()?, code?);
        let g = v.len();
        Some(
            (0..b.out_channels)
                .map(|k| a[k * g..(k + 1) * g].iter().zip(v).map(|(x, y)| x * y).sum())
                .collect(),
        )
    }

    /// Forward pass over `batch` prepared inputs laid out back to back.
    ///
    /// A missing code on an adapted model means the zero code.
    pub fn forward(&self, inputs: &[f64], batch: usize, code: Option<&[f64]>, mode: BnMode) -> Result<ForwardCache> {
        self.check_code(code)?;
        if inputs.len() != batch * self.input_len() {
            return Err(Error::Dimension(format!(
                "{} input values for a batch of {batch} x {}",
                inputs.len(),
                self.input_len()
            )));
        }
        let mut x = inputs.to_vec();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (p, blk) in self.blocks.iter().enumerate() {
            let (h, w, k) = (blk.height, blk.width, blk.out_channels);
            let hw = h * w;
            let mut z = conv_forward(blk, &x, batch);
            if let Some(q) = self.code_bias(p, code) {
                for b in 0..batch {
                    for (c, qc) in q.iter().enumerate() {
                        z[(b * k + c) * hw..(b * k + c + 1) * hw].iter_mut().for_each(|v| *v += qc);
                    }
                }
            }
            let (mean, var) = match mode {
                BnMode::Batch => channel_moments(&z, batch, k, hw),
                BnMode::Running => (blk.running_mean.clone(), blk.running_var.clone()),
            };
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.config.bn_eps).sqrt()).collect();
            let mut xhat = z;
            let mut activ = vec![0.0; xhat.len()];
            for b in 0..batch {
                for c in 0..k {
                    let o = (b * k + c) * hw;
                    for i in o..o + hw {
                        xhat[i] = (xhat[i] - mean[c]) * inv_std[c];
                        activ[i] = (blk.gamma[c] * xhat[i] + blk.beta[c]).max(0.0);
                    }
                }
            }
            let (pooled, argmax) = max_pool(&activ, batch * k, h, w);
            caches.push(BlockCache {
                input: std::mem::replace(&mut x, pooled),
                xhat,
                inv_std,
                activ,
                argmax,
                batch_mean: mean,
                batch_var: var,
            });
        }
        let flat = x;
        let hidden_pre = dense_forward(&self.hidden, &flat, batch);
        let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
        let logits = dense_forward(&self.output, &hidden, batch);
        let n = self.output.outputs;
        let mut log_probs = logits;
        for row in log_probs.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
            row.iter_mut().for_each(|v| *v -= z);
        }
        Ok(ForwardCache {
            batch,
            blocks: caches,
            flat,
            hidden_pre,
            hidden,
            log_probs,
        })
    }

    /// Batch statistics of a batch-mode forward pass, per block.
    pub fn batch_moments(cache: &ForwardCache) -> Vec<(Vec<f64>, Vec<f64>)> {
        cache
            .blocks
            .iter()
            .map(|b| (b.batch_mean.clone(), b.batch_var.clone()))
            .collect()
    }

    /// Cross-entropy of `labels` and its gradients.
    pub fn loss_and_gradients(
        &self,
        inputs: &[f64],
        labels: &[u32],
        code: Option<&[f64]>,
        mode: BnMode,
        reduction: Reduction,
    ) -> Result<(f64, Gradients, ForwardCache)> {
        let batch = labels.len();
        let n = self.output.outputs;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n) {
            return Err(Error::Dimension(format!("label {bad} but the classifier has {n} outputs")));
        }
        let cache = self.forward(inputs, batch, code, mode)?;
        let scale = match reduction {
            Reduction::Mean => 1.0 / batch.max(1) as f64,
            Reduction::Sum => 1.0,
        };
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; batch * n];
        for (b, &l) in labels.iter().enumerate() {
            let row = &cache.log_probs[b * n..(b + 1) * n];
            loss -= row[l as usize];
            for (j, lp) in row.iter().enumerate() {
                dlogits[b * n + j] = scale * (lp.exp() - f64::from(j == l as usize));
            }
        }
        let grads = self.backward(&cache, &dlogits, code, mode);
        Ok((loss * scale, grads, cache))
    }

    fn backward(&self, cache: &ForwardCache, dlogits: &[f64], code: Option<&[f64]>, mode: BnMode) -> Gradients {
        let batch = cache.batch;
        let mut g = self.zero_gradients();
        let nb = self.blocks.len();
        let hid = 4 * nb;
        let (dw2, db2, dh) = dense_backward(&self.output, &cache.hidden, dlogits, batch);
        g.base[hid + 2] = dw2;
        g.base[hid + 3] = db2;
        let dh_pre: Vec<f64> = dh
            .iter()
            .zip(&cache.hidden_pre)
            .map(|(d, p)| if *p > 0.0 { *d } else { 0.0 })
            .collect();
        let (dw1, db1, mut dx) = dense_backward(&self.hidden, &cache.flat, &dh_pre, batch);
        g.base[hid] = dw1;
        g.base[hid + 1] = db1;

        let mut adapt_index = self.num_adapted();
        for p in (0..nb).rev() {
            let blk = &self.blocks[p];
            let c = &cache.blocks[p];
            let (k, hw) = (blk.out_channels, blk.height * blk.width);
            // un-pool and ReLU
            let mut dy = vec![0.0; c.activ.len()];
            for (i, &src) in c.argmax.iter().enumerate() {
                if c.activ[src] > 0.0 {
                    dy[src] += dx[i];
                }
            }
            let mut dgamma = vec![0.0; k];
            let mut dbeta = vec![0.0; k];
            for b in 0..batch {
                for ch in 0..k {
                    let o = (b * k + ch) * hw;
                    for i in o..o + hw {
                        dgamma[ch] += dy[i] * c.xhat[i];
                        dbeta[ch] += dy[i];
                    }
                }
            }
            // through the normalization
            let mut du = dy;
            let count = (batch * hw) as f64;
            for ch in 0..k {
                let gm = blk.gamma[ch] * c.inv_std[ch];
                match mode {
                    BnMode::Running => {
                        for b in 0..batch {
                            let o = (b * k + ch) * hw;
                            du[o..o + hw].iter_mut().for_each(|v| *v *= gm);
                        }
                    }
                    BnMode::Batch => {
                        // du = gamma * inv_std / N * (N dy - sum dy - xhat sum(dy xhat))
                        let (s1, s2) = (dbeta[ch], dgamma[ch]);
                        for b in 0..batch {
                            let o = (b * k + ch) * hw;
                            for i in o..o + hw {
                                du[i] = gm * (du[i] - s1 / count - c.xhat[i] * s2 / count);
                            }
                        }
                    }
                }
            }
            let mut dq = vec![0.0; k];
            for b in 0..batch {
                for ch in 0..k {
                    let o = (b * k + ch) * hw;
                    dq[ch] += du[o..o + hw].iter().sum::<f64>();
                }
            }
            let (dw, dx_prev) = conv_backward(blk, &c.input, &du, batch, p > 0);
            g.base[4 * p] = dw;
            g.base[4 * p + 1] = dq.clone();
            g.base[4 * p + 2] = dgamma;
            g.base[4 * p + 3] = dbeta;
            if let Some(a) = &blk.adapt {
                adapt_index -= 1;
                if let Some(v) = code {
                    let gdim = v.len();
                    let da = &mut g.adapt[adapt_index];
                    for ch in 0..k {
                        for j in 0..gdim {
                            da[ch * gdim + j] = dq[ch] * v[j];
                            g.code[j] += a[ch * gdim + j] * dq[ch];
                        }
                    }
                }
            }
            dx = dx_prev;
        }
        g
    }

    /// Log-posteriors of prepared inputs in running-statistics mode.
    pub fn log_posteriors(&self, inputs: &[f64], batch: usize, code: Option<&[f64]>) -> Result<Vec<f64>> {
        Ok(self.forward(inputs, batch, code, BnMode::Running)?.log_probs)
    }
}

fn channel_moments(z: &[f64], batch: usize, k: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0; k];
    let mut var = vec![0.0; k];
    for b in 0..batch {
        for c in 0..k {
            mean[c] += z[(b * k + c) * hw..(b * k + c + 1) * hw].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for b in 0..batch {
        for c in 0..k {
            var[c] += z[(b * k + c) * hw..(b * k + c + 1) * hw]
                .iter()
                .map(|v| (v - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// 3x3 convolution, stride 1, zero padding 1, plus bias.
fn conv_forward(blk: &ConvBlock, x: &[f64], batch: usize) -> Vec<f64> {
    let (ci, co, h, w) = (blk.in_channels, blk.out_channels, blk.height, blk.width);
    let hw = h * w;
    let mut out = vec![0.0; batch * co * hw];
    for b in 0..batch {
        for k in 0..co {
            let dst = &mut out[(b * co + k) * hw..(b * co + k + 1) * hw];
            dst.iter_mut().for_each(|v| *v = blk.bias[k]);
            for c in 0..ci {
                let src = &x[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                let wk = &blk.weight[(k * ci + c) * 9..(k * ci + c + 1) * 9];
                for (m, wrow) in wk.chunks_exact(3).enumerate() {
                    for (n, &wv) in wrow.iter().enumerate() {
                        // output (r, q) reads input (r + m - 1, q + n - 1)
                        let r0 = 1usize.saturating_sub(m);
                        let r1 = (h + 1).saturating_sub(m).min(h);
                        let q0 = 1usize.saturating_sub(n);
                        let q1 = (w + 1).saturating_sub(n).min(w);
                        for r in r0..r1 {
                            let ir = r + m - 1;
                            let drow = &mut dst[r * w + q0..r * w + q1];
                            let srow = &src[ir * w + q0 + n - 1..ir * w + q1 + n - 1];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Weight gradient and (optionally) input gradient of [`conv_forward`].
fn conv_backward(blk: &ConvBlock, x: &[f64], dz: &[f64], batch: usize, need_dx: bool) -> (Vec<f64>, Vec<f64>) {
    let (ci, co, h, w) = (blk.in_channels, blk.out_channels, blk.height, blk.width);
    let hw = h * w;
    let mut dw = vec![0.0; blk.weight.len()];
    let mut dx = if need_dx { vec![0.0; batch * ci * hw] } else { Vec::new() };
    for b in 0..batch {
        for k in 0..co {
            let g = &dz[(b * co + k) * hw..(b * co + k + 1) * hw];
            for c in 0..ci {
                let src = &x[(b * ci + c) * hw..(b * ci + c + 1) * hw];
                let base = (k * ci + c) * 9;
                for m in 0..3 {
                    let r0 = 1usize.saturating_sub(m);
                    let r1 = (h + 1).saturating_sub(m).min(h);
                    for n in 0..3 {
                        let q0 = 1usize.saturating_sub(n);
                        let q1 = (w + 1).saturating_sub(n).min(w);
                        let mut acc = 0.0;
                        let wv = blk.weight[base + m * 3 + n];
                        for r in r0..r1 {
                            let ir = r + m - 1;
                            let grow = &g[r * w + q0..r * w + q1];
                            let srow = &src[ir * w + q0 + n - 1..ir * w + q1 + n - 1];
                            acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                            if need_dx {
                                let o = (b * ci + c) * hw + ir * w + q0 + n - 1;
                                for (d, gv) in dx[o..o + (q1 - q0)].iter_mut().zip(grow) {
                                    *d += wv * gv;
                                }
                            }
                        }
                        dw[base + m * 3 + n] += acc;
                    }
                }
            }
        }
    }
    (dw, dx)
}

/// 2x2 max pooling, stride 2 (trailing odd row/column dropped).
fn max_pool(x: &[f64], maps: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(maps * ph * pw);
    let mut arg = Vec::with_capacity(maps * ph * pw);
    for m in 0..maps {
        let o = m * h * w;
        for r in 0..ph {
            for c in 0..pw {
                let mut best = o + 2 * r * w + 2 * c;
                for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                    let i = o + (2 * r + dr) * w + 2 * c + dc;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

fn dense_forward(layer: &Dense, x: &[f64], batch: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * layer.outputs);
    for b in 0..batch {
        let xi = &x[b * layer.inputs..(b + 1) * layer.inputs];
        for o in 0..layer.outputs {
            let wr = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
            out.push(layer.bias[o] + wr.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    out
}

fn dense_backward(layer: &Dense, x: &[f64], dy: &[f64], batch: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ni, no) = (layer.inputs, layer.outputs);
    let mut dw = vec![0.0; ni * no];
    let mut db = vec![0.0; no];
    let mut dx = vec![0.0; batch * ni];
    for b in 0..batch {
        let xi = &x[b * ni..(b + 1) * ni];
        let dxi = &mut dx[b * ni..(b + 1) * ni];
        for o in 0..no {
            let g = dy[b * no + o];
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let wr = &layer.weight[o * ni..(o + 1) * ni];
            let dwr = &mut dw[o * ni..(o + 1) * ni];
            for i in 0..ni {
                dwr[i] += g * xi[i];
                dxi[i] += g * wr[i];
            }
        }
    }
    (dw, db, dx)
}
