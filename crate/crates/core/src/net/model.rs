//! The multi-task network: three shared residual blocks with Max-Feature-Map
//! activations, reshape/average pooling, and two task heads (spoofing
//! detection, speaker classification).
//!
//! The trunk is shape-generic: channel counts and head widths are fixed by
//! the configuration while spatial dimensions follow the input, so the same
//! parameter set serves 864x400 and 80x400 features.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::layers::*;
use super::tensor::Tensor;
use crate::blob::quantize_f32;
use crate::feat::UnifiedFeature;

/// How head logits are produced at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Unit-normalized output columns, bias forced to zero (cosine logits).
    ASoftmax,
    /// Plain affine logits.
    Plain,
}

#[derive(Debug, Clone)]
pub struct NetConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    /// Post-MFM channel count of each residual block.
    pub block_channels: Vec<usize>,
    /// Hidden widths of the spoofing-detection head (output is always 2).
    pub sd_hidden: Vec<usize>,
    /// Hidden widths of the speaker head; the last is the embedding size.
    pub asv_hidden: Vec<usize>,
    pub n_speakers: usize,
    pub dropout: f64,
    pub lrelu_slope: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
    pub classifier: ClassifierKind,
}

pub const SD_CLASSES: usize = 2;

impl NetConfig {
    /// Full-size configuration for 864x400 constant-Q input.
    ///
    /// Float fields are held on the f32 grid so checkpointed configs reload
    /// to identical values.
    pub fn paper(n_speakers: usize) -> Self {
        NetConfig {
            input_rows: 864,
            input_cols: 400,
            block_channels: vec![16, 32, 64],
            sd_hidden: vec![512, 128, 64],
            asv_hidden: vec![512, 128],
            n_speakers,
            dropout: 0.7f32 as f64,
            lrelu_slope: 0.01f32 as f64,
            bn_momentum: 0.99f32 as f64,
            bn_epsilon: 1e-5f32 as f64,
            classifier: ClassifierKind::ASoftmax,
        }
    }

    /// Same trunk and heads on a different input geometry (e.g. 80x400).
    pub fn with_input(n_speakers: usize, rows: usize, cols: usize) -> Self {
        NetConfig {
            input_rows: rows,
            input_cols: cols,
            ..Self::paper(n_speakers)
        }
    }

    /// Spatial and channel dims after the residual trunk.
    pub fn trunk_dims(&self) -> (usize, usize, usize) {
        let mut h = self.input_rows;
        let mut w = self.input_cols;
        for _ in &self.block_channels {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
        }
        (h, w, *self.block_channels.last().expect("at least one block"))
    }

    /// Width of the averaged trunk output (time x channels).
    pub fn pooled_dim(&self) -> usize {
        let (_, w, c) = self.trunk_dims();
        w * c
    }

    pub fn embedding_dim(&self) -> usize {
        *self.asv_hidden.last().expect("asv head needs a hidden layer")
    }

    fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            1
        } else {
            self.block_channels[i - 1]
        }
    }

    pub(crate) fn entry_spec(&self, i: usize) -> ConvSpec {
        ConvSpec {
            kh: 3,
            kw: 3,
            stride: 2,
            in_ch: self.block_in_channels(i),
            out_ch: 2 * self.block_channels[i],
        }
    }

    pub(crate) fn nin_spec(&self, i: usize) -> ConvSpec {
        ConvSpec {
            kh: 1,
            kw: 1,
            stride: 1,
            in_ch: self.block_channels[i],
            out_ch: 2 * self.block_channels[i],
        }
    }

    pub(crate) fn inner_conv_spec(&self, i: usize) -> ConvSpec {
        ConvSpec {
            kh: 3,
            kw: 3,
            stride: 1,
            in_ch: self.block_channels[i],
            out_ch: 2 * self.block_channels[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcParams {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub entry: ConvParams,
    pub bn1: BnParams,
    pub nin1: ConvParams,
    pub bn2: BnParams,
    pub conv2: ConvParams,
    pub bn3: BnParams,
    pub nin2: ConvParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub hidden: Vec<FcParams>,
    pub output: FcParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub blocks: Vec<BlockParams>,
    pub sd: HeadParams,
    pub asv: HeadParams,
}

/// Role of a parameter array; decides trainability and L2 regularization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamClass {
    Weight,
    Bias,
    BnScale,
    BnShift,
    BnRunningMean,
    BnRunningVar,
}

impl ParamClass {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamClass::BnRunningMean | ParamClass::BnRunningVar)
    }

    /// Only weight matrices enter the L2 term of the joint objective.
    pub fn regularized(self) -> bool {
        matches!(self, ParamClass::Weight)
    }
}

impl NetParams {
    /// Every parameter array in canonical order with its name and class.
    pub fn entries(&self) -> Vec<(String, ParamClass, &Vec<f64>)> {
        let mut v: Vec<(String, ParamClass, &Vec<f64>)> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            let n = i + 1;
            v.push((format!("block{n}.conv1.weight"), ParamClass::Weight, &b.entry.weight));
            v.push((format!("block{n}.conv1.bias"), ParamClass::Bias, &b.entry.bias));
            push_bn(&mut v, format!("block{n}.bn1"), &b.bn1);
            v.push((format!("block{n}.nin1.weight"), ParamClass::Weight, &b.nin1.weight));
            v.push((format!("block{n}.nin1.bias"), ParamClass::Bias, &b.nin1.bias));
            push_bn(&mut v, format!("block{n}.bn2"), &b.bn2);
            v.push((format!("block{n}.conv2.weight"), ParamClass::Weight, &b.conv2.weight));
            v.push((format!("block{n}.conv2.bias"), ParamClass::Bias, &b.conv2.bias));
            push_bn(&mut v, format!("block{n}.bn3"), &b.bn3);
            v.push((format!("block{n}.nin2.weight"), ParamClass::Weight, &b.nin2.weight));
            v.push((format!("block{n}.nin2.bias"), ParamClass::Bias, &b.nin2.bias));
        }
        for (head, name) in [(&self.sd, "sd"), (&self.asv, "asv")] {
            for (j, fc) in head.hidden.iter().enumerate() {
                v.push((format!("{name}.fc{}.weight", j + 1), ParamClass::Weight, &fc.weight));
                v.push((format!("{name}.fc{}.bias", j + 1), ParamClass::Bias, &fc.bias));
            }
            v.push((format!("{name}.output.weight"), ParamClass::Weight, &head.output.weight));
            v.push((format!("{name}.output.bias"), ParamClass::Bias, &head.output.bias));
        }
        v
    }

    /// Mutable variant of [`entries`](Self::entries); same order.
    pub fn entries_mut(&mut self) -> Vec<(String, ParamClass, &mut Vec<f64>)> {
        let mut v: Vec<(String, ParamClass, &mut Vec<f64>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let n = i + 1;
            v.push((format!("block{n}.conv1.weight"), ParamClass::Weight, &mut b.entry.weight));
            v.push((format!("block{n}.conv1.bias"), ParamClass::Bias, &mut b.entry.bias));
            push_bn_mut(&mut v, format!("block{n}.bn1"), &mut b.bn1);
            v.push((format!("block{n}.nin1.weight"), ParamClass::Weight, &mut b.nin1.weight));
            v.push((format!("block{n}.nin1.bias"), ParamClass::Bias, &mut b.nin1.bias));
            push_bn_mut(&mut v, format!("block{n}.bn2"), &mut b.bn2);
            v.push((format!("block{n}.conv2.weight"), ParamClass::Weight, &mut b.conv2.weight));
            v.push((format!("block{n}.conv2.bias"), ParamClass::Bias, &mut b.conv2.bias));
            push_bn_mut(&mut v, format!("block{n}.bn3"), &mut b.bn3);
            v.push((format!("block{n}.nin2.weight"), ParamClass::Weight, &mut b.nin2.weight));
            v.push((format!("block{n}.nin2.bias"), ParamClass::Bias, &mut b.nin2.bias));
        }
        for (head, name) in [(&mut self.sd, "sd"), (&mut self.asv, "asv")] {
            for (j, fc) in head.hidden.iter_mut().enumerate() {
                v.push((format!("{name}.fc{}.weight", j + 1), ParamClass::Weight, &mut fc.weight));
                v.push((format!("{name}.fc{}.bias", j + 1), ParamClass::Bias, &mut fc.bias));
            }
            v.push((format!("{name}.output.weight"), ParamClass::Weight, &mut head.output.weight));
            v.push((format!("{name}.output.bias"), ParamClass::Bias, &mut head.output.bias));
        }
        v
    }

    pub fn zeros_like(&self) -> NetParams {
        let mut z = self.clone();
        for (_, _, arr) in z.entries_mut() {
            arr.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Sum of squared weight-matrix entries (the regularized set).
    pub fn weight_squared_norm(&self) -> f64 {
        self.entries()
            .iter()
            .filter(|(_, class, _)| class.regularized())
            .map(|(_, _, arr)| arr.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }
}

fn push_bn<'a>(v: &mut Vec<(String, ParamClass, &'a Vec<f64>)>, name: String, bn: &'a BnParams) {
    v.push((format!("{name}.scale"), ParamClass::BnScale, &bn.scale));
    v.push((format!("{name}.shift"), ParamClass::BnShift, &bn.shift));
    v.push((format!("{name}.running_mean"), ParamClass::BnRunningMean, &bn.running_mean));
    v.push((format!("{name}.running_var"), ParamClass::BnRunningVar, &bn.running_var));
}

fn push_bn_mut<'a>(
    v: &mut Vec<(String, ParamClass, &'a mut Vec<f64>)>,
    name: String,
    bn: &'a mut BnParams,
) {
    v.push((format!("{name}.scale"), ParamClass::BnScale, &mut bn.scale));
    v.push((format!("{name}.shift"), ParamClass::BnShift, &mut bn.shift));
    v.push((format!("{name}.running_mean"), ParamClass::BnRunningMean, &mut bn.running_mean));
    v.push((format!("{name}.running_var"), ParamClass::BnRunningVar, &mut bn.running_var));
}

#[derive(Debug, Clone)]
pub struct MtlNetwork {
    pub config: NetConfig,
    pub params: NetParams,
}

/// Deferred batch-norm running-statistics update produced by a train-mode
/// forward; applied by the training loop after the step.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub block: usize,
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct BlockTrace {
    input: Tensor,
    entry_sw: Vec<u8>,
    bn: [BnCache; 3],
    lrelu: [Vec<u8>; 3],
    act1: Tensor,
    act2: Tensor,
    act3: Tensor,
    nin1_sw: Vec<u8>,
    conv2_sw: Vec<u8>,
    nin2_sw: Vec<u8>,
}

pub struct HeadTrace {
    fc_inputs: Vec<Tensor>,
    lrelu_masks: Vec<Vec<u8>>,
    dropout: Vec<DropoutCache>,
}

/// Activation caches from a train-mode forward, consumed by
/// [`MtlNetwork::backward`].
pub struct ForwardTrace {
    blocks: Vec<BlockTrace>,
    trunk_rows: usize,
    sd: HeadTrace,
    asv: HeadTrace,
    pub bn_updates: Vec<BnUpdate>,
}

pub enum ForwardMode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha20Rng },
}

pub struct ForwardOutput {
    pub sd_logits: Tensor,
    pub asv_logits: Tensor,
    /// Pre-dropout activation of the last speaker-head hidden layer.
    pub embeddings: Tensor,
    /// Input to the SD output layer (post-dropout in train mode).
    pub sd_features: Tensor,
    /// Input to the speaker output layer (post-dropout in train mode).
    pub asv_features: Tensor,
    pub trace: Option<ForwardTrace>,
}

/// Per-head upstream gradients produced by the loss: with respect to the
/// output-layer input features, plus the output layer's own parameter
/// gradients (the loss owns the output-layer math).
pub struct HeadUpstream {
    pub d_features: Tensor,
    pub d_output_weight: Vec<f64>,
    pub d_output_bias: Vec<f64>,
}

impl HeadUpstream {
    pub fn zeros(n: usize, feat_dim: usize, out_dim: usize) -> Self {
        HeadUpstream {
            d_features: Tensor::zeros(&[n, feat_dim]),
            d_output_weight: vec![0.0; feat_dim * out_dim],
            d_output_bias: vec![0.0; out_dim],
        }
    }
}

impl MtlNetwork {
    /// He-normal initialization: weights ~ Normal(0, sqrt(2/fan_in)), biases
    /// zero, batch-norm identity. Deterministic per seed; every value lands
    /// on the f32 grid so checkpoints round-trip bit-exactly.
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let draw = |len: usize, fan_in: usize, rng: &mut ChaCha20Rng| -> Vec<f64> {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let mut w: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
            quantize_f32(&mut w);
            w
        };
        let bn_ident = |c: usize| BnParams {
            scale: vec![1.0; c],
            shift: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        };

        let mut blocks = Vec::new();
        for i in 0..config.block_channels.len() {
            let c = config.block_channels[i];
            let entry = config.entry_spec(i);
            let nin = config.nin_spec(i);
            let inner = config.inner_conv_spec(i);
            blocks.push(BlockParams {
                entry: ConvParams {
                    weight: draw(entry.weight_len(), entry.kh * entry.kw * entry.in_ch, &mut rng),
                    bias: vec![0.0; entry.out_ch],
                },
                bn1: bn_ident(c),
                nin1: ConvParams {
                    weight: draw(nin.weight_len(), nin.in_ch, &mut rng),
                    bias: vec![0.0; nin.out_ch],
                },
                bn2: bn_ident(c),
                conv2: ConvParams {
                    weight: draw(inner.weight_len(), inner.kh * inner.kw * inner.in_ch, &mut rng),
                    bias: vec![0.0; inner.out_ch],
                },
                bn3: bn_ident(c),
                nin2: ConvParams {
                    weight: draw(nin.weight_len(), nin.in_ch, &mut rng),
                    bias: vec![0.0; nin.out_ch],
                },
            });
        }

        let make_head = |hidden: &[usize], out_dim: usize, rng: &mut ChaCha20Rng| {
            let mut fcs = Vec::new();
            let mut in_dim = config.pooled_dim();
            for &h in hidden {
                fcs.push(FcParams {
                    weight: draw(in_dim * h, in_dim, rng),
                    bias: vec![0.0; h],
                });
                in_dim = h;
            }
            let output = FcParams {
                weight: draw(in_dim * out_dim, in_dim, rng),
                bias: vec![0.0; out_dim],
            };
            HeadParams { hidden: fcs, output }
        };

        let sd = make_head(&config.sd_hidden, SD_CLASSES, &mut rng);
        let asv = make_head(&config.asv_hidden, config.n_speakers, &mut rng);

        MtlNetwork {
            config,
            params: NetParams { blocks, sd, asv },
        }
    }

    /// Stack unified features into a [n, rows, cols, 1] batch tensor.
    pub fn features_to_batch(feats: &[&UnifiedFeature]) -> Tensor {
        assert!(!feats.is_empty());
        let rows = feats[0].rows();
        let cols = feats[0].cols();
        let mut t = Tensor::zeros(&[feats.len(), rows, cols, 1]);
        for (i, f) in feats.iter().enumerate() {
            assert_eq!(f.rows(), rows);
            assert_eq!(f.cols(), cols);
            t.sample_mut(i).copy_from_slice(&f.matrix.data);
        }
        t
    }

    pub fn forward_batch(&self, input: &Tensor, mode: ForwardMode) -> ForwardOutput {
        assert_eq!(input.shape.len(), 4, "expected [n, h, w, 1] input");
        assert_eq!(
            (input.shape[1], input.shape[2]),
            (self.config.input_rows, self.config.input_cols),
            "input shape does not match the configured geometry"
        );
        let n = input.n();
        let cfg = &self.config;
        let train = matches!(mode, ForwardMode::Train { .. });
        let mut rng_opt = match mode {
            ForwardMode::Eval => None,
            ForwardMode::Train { rng } => Some(rng),
        };

        let mut block_traces = Vec::new();
        let mut bn_updates = Vec::new();
        let mut x = input.clone();
        for (i, bp) in self.params.blocks.iter().enumerate() {
            let (out, trace) = self.block_forward(i, bp, &x, train, &mut bn_updates);
            if let Some(t) = trace {
                block_traces.push(t);
            }
            x = out;
        }

        // reshape (merge time x channels per frequency row) + average
        let (th, tw, tc) = cfg.trunk_dims();
        debug_assert_eq!(x.shape, vec![n, th, tw, tc]);
        let pool_dim = tw * tc;
        let mut pooled = Tensor::zeros(&[n, pool_dim]);
        for s in 0..n {
            let sample = x.sample(s);
            let prow = pooled.sample_mut(s);
            for h in 0..th {
                let row = &sample[h * pool_dim..(h + 1) * pool_dim];
                for (p, &v) in prow.iter_mut().zip(row) {
                    *p += v;
                }
            }
            for p in prow.iter_mut() {
                *p /= th as f64;
            }
        }

        let (sd_features, _sd_emb, sd_trace) =
            self.head_forward(&self.params.sd, &pooled, train, &mut rng_opt);
        let (asv_features, asv_emb, asv_trace) =
            self.head_forward(&self.params.asv, &pooled, train, &mut rng_opt);

        let sd_logits = self.output_logits(&self.params.sd.output, &sd_features, SD_CLASSES);
        let asv_logits =
            self.output_logits(&self.params.asv.output, &asv_features, cfg.n_speakers);

        let trace = if train {
            Some(ForwardTrace {
                blocks: block_traces,
                trunk_rows: th,
                sd: sd_trace,
                asv: asv_trace,
                bn_updates,
            })
        } else {
            None
        };

        ForwardOutput {
            sd_logits,
            asv_logits,
            embeddings: asv_emb,
            sd_features,
            asv_features,
            trace,
        }
    }

    /// Single-feature convenience wrapper.
    pub fn forward(&self, feat: &UnifiedFeature, mode: ForwardMode) -> ForwardOutput {
        let batch = Self::features_to_batch(&[feat]);
        self.forward_batch(&batch, mode)
    }

    fn block_forward(
        &self,
        idx: usize,
        bp: &BlockParams,
        x: &Tensor,
        train: bool,
        bn_updates: &mut Vec<BnUpdate>,
    ) -> (Tensor, Option<BlockTrace>) {
        let cfg = &self.config;
        let entry_spec = cfg.entry_spec(idx);
        let nin_spec = cfg.nin_spec(idx);
        let inner_spec = cfg.inner_conv_spec(idx);

        let entry_pre = conv2d_forward(x, &bp.entry.weight, &bp.entry.bias, &entry_spec);
        let (e, entry_sw) = mfm_forward(&entry_pre);
        drop(entry_pre);

        let run_bn = |slot: usize, bn: &BnParams, input: &Tensor, updates: &mut Vec<BnUpdate>| {
            if train {
                let (out, cache, new_mean, new_var) = batchnorm_forward_train(
                    input,
                    &bn.scale,
                    &bn.shift,
                    &bn.running_mean,
                    &bn.running_var,
                    cfg.bn_momentum,
                    cfg.bn_epsilon,
                );
                updates.push(BnUpdate {
                    block: idx,
                    slot,
                    mean: new_mean,
                    var: new_var,
                });
                (out, Some(cache))
            } else {
                let out = batchnorm_forward_eval(
                    input,
                    &bn.scale,
                    &bn.shift,
                    &bn.running_mean,
                    &bn.running_var,
                    cfg.bn_epsilon,
                );
                (out, None)
            }
        };

        let (b1, bn1c) = run_bn(0, &bp.bn1, &e, bn_updates);
        let (a1, m1mask) = leaky_relu_forward(&b1, cfg.lrelu_slope);
        drop(b1);
        let n1 = conv2d_forward(&a1, &bp.nin1.weight, &bp.nin1.bias, &nin_spec);
        let (m1, nin1_sw) = mfm_forward(&n1);
        drop(n1);

        let (b2, bn2c) = run_bn(1, &bp.bn2, &m1, bn_updates);
        let (a2, m2mask) = leaky_relu_forward(&b2, cfg.lrelu_slope);
        drop(b2);
        let c2 = conv2d_forward(&a2, &bp.conv2.weight, &bp.conv2.bias, &inner_spec);
        let (m2, conv2_sw) = mfm_forward(&c2);
        drop(c2);

        let (b3, bn3c) = run_bn(2, &bp.bn3, &m2, bn_updates);
        let (a3, m3mask) = leaky_relu_forward(&b3, cfg.lrelu_slope);
        drop(b3);
        let n2 = conv2d_forward(&a3, &bp.nin2.weight, &bp.nin2.bias, &nin_spec);
        let (m3, nin2_sw) = mfm_forward(&n2);
        drop(n2);

        let mut out = e.clone();
        for (o, &v) in out.data.iter_mut().zip(&m3.data) {
            *o += v;
        }

        let trace = if train {
            Some(BlockTrace {
                input: x.clone(),
                entry_sw,
                bn: [bn1c.unwrap(), bn2c.unwrap(), bn3c.unwrap()],
                lrelu: [m1mask, m2mask, m3mask],
                act1: a1,
                act2: a2,
                act3: a3,
                nin1_sw,
                conv2_sw,
                nin2_sw,
            })
        } else {
            None
        };
        (out, trace)
    }

    fn head_forward(
        &self,
        head: &HeadParams,
        pooled: &Tensor,
        train: bool,
        rng: &mut Option<&mut ChaCha20Rng>,
    ) -> (Tensor, Tensor, HeadTrace) {
        let cfg = &self.config;
        let mut trace = HeadTrace {
            fc_inputs: Vec::new(),
            lrelu_masks: Vec::new(),
            dropout: Vec::new(),
        };
        let mut x = pooled.clone();
        let mut pre_dropout = Tensor::zeros(&[0]);
        for fc in &head.hidden {
            let out_dim = fc.bias.len();
            if train {
                trace.fc_inputs.push(x.clone());
            }
            let z = fc_forward(&x, &fc.weight, &fc.bias, out_dim);
            let (a, mask) = leaky_relu_forward(&z, cfg.lrelu_slope);
            pre_dropout = a.clone();
            if train {
                trace.lrelu_masks.push(mask);
                let rng = rng.as_mut().expect("train mode provides an RNG");
                let (d, cache) = dropout_forward(&a, cfg.dropout, rng);
                trace.dropout.push(cache);
                x = d;
            } else {
                x = a;
            }
        }
        (x, pre_dropout, trace)
    }

    fn output_logits(&self, output: &FcParams, features: &Tensor, out_dim: usize) -> Tensor {
        match self.config.classifier {
            ClassifierKind::Plain => fc_forward(features, &output.weight, &output.bias, out_dim),
            ClassifierKind::ASoftmax => {
                let normalized = normalize_columns(&output.weight, out_dim);
                let zero_bias = vec![0.0; out_dim];
                fc_forward(features, &normalized, &zero_bias, out_dim)
            }
        }
    }

    /// Gradient pass over the traced forward. Output-layer gradients come in
    /// from the loss; everything behind the output layers is computed here.
    /// Batch-norm running statistics are never part of the gradient.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        sd_up: &HeadUpstream,
        asv_up: &HeadUpstream,
    ) -> NetParams {
        let cfg = &self.config;
        let mut grads = self.params.zeros_like();

        grads.sd.output.weight.copy_from_slice(&sd_up.d_output_weight);
        grads.sd.output.bias.copy_from_slice(&sd_up.d_output_bias);
        grads.asv.output.weight.copy_from_slice(&asv_up.d_output_weight);
        grads.asv.output.bias.copy_from_slice(&asv_up.d_output_bias);

        let d_pooled_sd =
            head_backward(&self.params.sd, &trace.sd, &sd_up.d_features, cfg, &mut grads.sd);
        let d_pooled_asv =
            head_backward(&self.params.asv, &trace.asv, &asv_up.d_features, cfg, &mut grads.asv);

        let mut d_pooled = d_pooled_sd;
        for (a, &b) in d_pooled.data.iter_mut().zip(&d_pooled_asv.data) {
            *a += b;
        }

        // un-pool: every frequency row receives d_pooled / rows
        let n = d_pooled.n();
        let th = trace.trunk_rows;
        let pool_dim = d_pooled.sample_len();
        let mut d_trunk = Tensor::zeros(&[n, th, pool_dim / cfg.trunk_dims().2, cfg.trunk_dims().2]);
        for s in 0..n {
            let drow = d_pooled.sample(s);
            let dst = d_trunk.sample_mut(s);
            for h in 0..th {
                for (d, &v) in dst[h * pool_dim..(h + 1) * pool_dim].iter_mut().zip(drow) {
                    *d = v / th as f64;
                }
            }
        }

        let mut d_out = d_trunk;
        for i in (0..self.params.blocks.len()).rev() {
            d_out = self.block_backward(i, &self.params.blocks[i], &trace.blocks[i], d_out, &mut grads.blocks[i]);
        }

        grads
    }

    fn block_backward(
        &self,
        idx: usize,
        bp: &BlockParams,
        tr: &BlockTrace,
        d_out: Tensor,
        g: &mut BlockParams,
    ) -> Tensor {
        let cfg = &self.config;
        let nin_spec = cfg.nin_spec(idx);
        let inner_spec = cfg.inner_conv_spec(idx);
        let entry_spec = cfg.entry_spec(idx);
        let two_c = 2 * cfg.block_channels[idx];

        // inner path, reverse order
        let d_n2 = mfm_backward(&d_out, &tr.nin2_sw, two_c);
        let nin2_g = conv2d_backward(&tr.act3, &d_n2, &bp.nin2.weight, &nin_spec);
        g.nin2.weight.copy_from_slice(&nin2_g.dw);
        g.nin2.bias.copy_from_slice(&nin2_g.db);
        let d_b3 = leaky_relu_backward(&nin2_g.dx, &tr.lrelu[2], cfg.lrelu_slope);
        let bn3_g = batchnorm_backward(&d_b3, &tr.bn[2], &bp.bn3.scale);
        g.bn3.scale.copy_from_slice(&bn3_g.dscale);
        g.bn3.shift.copy_from_slice(&bn3_g.dshift);

        let d_c2 = mfm_backward(&bn3_g.dx, &tr.conv2_sw, two_c);
        let conv2_g = conv2d_backward(&tr.act2, &d_c2, &bp.conv2.weight, &inner_spec);
        g.conv2.weight.copy_from_slice(&conv2_g.dw);
        g.conv2.bias.copy_from_slice(&conv2_g.db);
        let d_b2 = leaky_relu_backward(&conv2_g.dx, &tr.lrelu[1], cfg.lrelu_slope);
        let bn2_g = batchnorm_backward(&d_b2, &tr.bn[1], &bp.bn2.scale);
        g.bn2.scale.copy_from_slice(&bn2_g.dscale);
        g.bn2.shift.copy_from_slice(&bn2_g.dshift);

        let d_n1 = mfm_backward(&bn2_g.dx, &tr.nin1_sw, two_c);
        let nin1_g = conv2d_backward(&tr.act1, &d_n1, &bp.nin1.weight, &nin_spec);
        g.nin1.weight.copy_from_slice(&nin1_g.dw);
        g.nin1.bias.copy_from_slice(&nin1_g.db);
        let d_b1 = leaky_relu_backward(&nin1_g.dx, &tr.lrelu[0], cfg.lrelu_slope);
        let bn1_g = batchnorm_backward(&d_b1, &tr.bn[0], &bp.bn1.scale);
        g.bn1.scale.copy_from_slice(&bn1_g.dscale);
        g.bn1.shift.copy_from_slice(&bn1_g.dshift);

        // entry MFM sees the residual gradient plus the inner-path gradient
        let mut d_e = d_out;
        for (a, &b) in d_e.data.iter_mut().zip(&bn1_g.dx.data) {
            *a += b;
        }
        let d_entry_pre = mfm_backward(&d_e, &tr.entry_sw, two_c);
        let entry_g = conv2d_backward(&tr.input, &d_entry_pre, &bp.entry.weight, &entry_spec);
        g.entry.weight.copy_from_slice(&entry_g.dw);
        g.entry.bias.copy_from_slice(&entry_g.db);
        entry_g.dx
    }

    /// Apply deferred running-statistics updates (values kept on the f32
    /// grid like every other parameter).
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let bn = match u.slot {
                0 => &mut self.params.blocks[u.block].bn1,
                1 => &mut self.params.blocks[u.block].bn2,
                _ => &mut self.params.blocks[u.block].bn3,
            };
            bn.running_mean.copy_from_slice(&u.mean);
            bn.running_var.copy_from_slice(&u.var);
            quantize_f32(&mut bn.running_mean);
            quantize_f32(&mut bn.running_var);
        }
    }
}

fn head_backward(
    head: &HeadParams,
    trace: &HeadTrace,
    d_features: &Tensor,
    cfg: &NetConfig,
    g: &mut HeadParams,
) -> Tensor {
    let mut d = d_features.clone();
    for j in (0..head.hidden.len()).rev() {
        let d_after_drop = dropout_backward(&d, &trace.dropout[j]);
        let d_pre_act = leaky_relu_backward(&d_after_drop, &trace.lrelu_masks[j], cfg.lrelu_slope);
        let fc_g = fc_backward(&trace.fc_inputs[j], &d_pre_act, &head.hidden[j].weight);
        g.hidden[j].weight.copy_from_slice(&fc_g.dw);
        g.hidden[j].bias.copy_from_slice(&fc_g.db);
        d = fc_g.dx;
    }
    d
}

/// Normalize the columns of a [in x out] weight matrix to unit Euclidean
/// norm. Zero columns are left untouched.
pub fn normalize_columns(weight: &[f64], out_dim: usize) -> Vec<f64> {
    let mut norms = vec![0.0; out_dim];
    for row in weight.chunks(out_dim) {
        for (n, &v) in norms.iter_mut().zip(row) {
            *n += v * v;
        }
    }
    for n in norms.iter_mut() {
        *n = n.sqrt();
        if *n == 0.0 {
            *n = 1.0;
        }
    }
    let mut out = vec![0.0; weight.len()];
    for (orow, wrow) in out.chunks_mut(out_dim).zip(weight.chunks(out_dim)) {
        for j in 0..out_dim {
            orow[j] = wrow[j] / norms[j];
        }
    }
    out
}

/// Per-layer parameter counts. Batch-norm layers count scale, shift, and
/// both running statistics (4 per channel).
#[derive(Debug, Clone)]
pub struct LayerCount {
    pub name: String,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ParamCountReport {
    pub layers: Vec<LayerCount>,
    pub block_totals: Vec<usize>,
    pub total: usize,
}

impl ParamCountReport {
    pub fn layer(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.count)
    }
}

/// Display rule matching the published tables: millions round to the nearest
/// 0.1M, thousands truncate, small counts print exactly.
pub fn printed_count(count: usize) -> String {
    if count >= 1_000_000 {
        format!("{:.1}M", (count as f64 / 100_000.0).round() / 10.0)
    } else if count >= 1_000 {
        format!("{}K", count / 1_000)
    } else {
        format!("{count}")
    }
}

pub fn param_count(net: &MtlNetwork) -> ParamCountReport {
    let mut layers = Vec::new();
    let mut block_totals = Vec::new();
    for (i, b) in net.params.blocks.iter().enumerate() {
        let n = i + 1;
        let mut block = 0usize;
        let mut add = |layers: &mut Vec<LayerCount>, name: String, count: usize| {
            layers.push(LayerCount { name, count });
            block += count;
        };
        add(&mut layers, format!("block{n}.conv1"), b.entry.weight.len() + b.entry.bias.len());
        add(&mut layers, format!("block{n}.bn1"), 4 * b.bn1.scale.len());
        add(&mut layers, format!("block{n}.nin1"), b.nin1.weight.len() + b.nin1.bias.len());
        add(&mut layers, format!("block{n}.bn2"), 4 * b.bn2.scale.len());
        add(&mut layers, format!("block{n}.conv2"), b.conv2.weight.len() + b.conv2.bias.len());
        add(&mut layers, format!("block{n}.bn3"), 4 * b.bn3.scale.len());
        add(&mut layers, format!("block{n}.nin2"), b.nin2.weight.len() + b.nin2.bias.len());
        block_totals.push(block);
    }
    for (head, name) in [(&net.params.sd, "sd"), (&net.params.asv, "asv")] {
        for (j, fc) in head.hidden.iter().enumerate() {
            layers.push(LayerCount {
                name: format!("{name}.fc{}", j + 1),
                count: fc.weight.len() + fc.bias.len(),
            });
        }
        layers.push(LayerCount {
            name: format!("{name}.output"),
            count: head.output.weight.len() + head.output.bias.len(),
        });
    }
    let total = layers.iter().map(|l| l.count).sum();
    ParamCountReport {
        layers,
        block_totals,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feat::{FeatureKind, Tfr, UnifiedFeature};

    fn feature(rows: usize, cols: usize, scale: f64) -> UnifiedFeature {
        let mut m = Tfr::new(rows, cols);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = ((i * 2654435761) % 10_007) as f64 / 10_007.0 * scale - scale / 2.0;
        }
        UnifiedFeature {
            matrix: m,
            kind: FeatureKind::Cqt,
        }
    }

    /// Closed-form parameter count for the full architecture.
    fn closed_form_total(n_speakers: usize) -> usize {
        let conv = |kh: usize, cin: usize, cout: usize| kh * kh * cin * cout + cout;
        let bn = |c: usize| 4 * c;
        let fc = |i: usize, o: usize| i * o + o;
        let block = |cin: usize, c: usize| {
            conv(3, cin, 2 * c) + conv(1, c, 2 * c) * 2 + conv(3, c, 2 * c) + 3 * bn(c)
        };
        let trunk = block(1, 16) + block(16, 32) + block(32, 64);
        let sd = fc(3200, 512) + fc(512, 128) + fc(128, 64) + fc(64, 2);
        let asv = fc(3200, 512) + fc(512, 128) + fc(128, n_speakers);
        trunk + sd + asv
    }

    #[test]
    fn paper_param_counts_match_tables() {
        let net = MtlNetwork::init(NetConfig::paper(78), 1);
        let report = param_count(&net);
        // residual block totals
        assert_eq!(report.block_totals, vec![6_240, 32_384, 128_256]);
        assert_eq!(report.layer("block1.conv1"), Some(320));
        assert_eq!(report.layer("block1.nin1"), Some(544));
        assert_eq!(report.layer("block1.conv2"), Some(4_640));
        assert_eq!(report.layer("block1.nin2"), Some(544));
        assert_eq!(report.layer("block1.bn1"), Some(64));
        // head layers
        assert_eq!(report.layer("sd.fc1"), Some(1_638_912));
        assert_eq!(report.layer("sd.fc2"), Some(65_664));
        assert_eq!(report.layer("sd.fc3"), Some(8_256));
        assert_eq!(report.layer("sd.output"), Some(130));
        assert_eq!(report.layer("asv.fc1"), Some(1_638_912));
        assert_eq!(report.layer("asv.output"), Some(10_062));
        // printed forms as published
        assert_eq!(printed_count(6_240), "6K");
        assert_eq!(printed_count(32_384), "32K");
        assert_eq!(printed_count(128_256), "128K");
        assert_eq!(printed_count(1_638_912), "1.6M");
        assert_eq!(printed_count(65_664), "65K");
        assert_eq!(printed_count(8_256), "8K");
        assert_eq!(printed_count(130), "130");
        assert_eq!(printed_count(10_062), "10K");
        assert_eq!(printed_count(report.total), "3.6M");
        // grand total within 1% of 3.6M
        let total = report.total as f64;
        assert!((total - 3_600_000.0).abs() / 3_600_000.0 < 0.01, "total {total}");
        assert_eq!(report.total, closed_form_total(78));
    }

    #[test]
    fn param_count_closed_form_arbitrary_speakers() {
        for &n in &[2usize, 10, 78, 200] {
            let net = MtlNetwork::init(NetConfig::paper(n), 3);
            assert_eq!(param_count(&net).total, closed_form_total(n), "n_speakers {n}");
        }
    }

    #[test]
    fn paper_shape_ladder() {
        let cfg = NetConfig::paper(78);
        assert_eq!(cfg.trunk_dims(), (108, 50, 64));
        assert_eq!(cfg.pooled_dim(), 3200);
        assert_eq!(cfg.embedding_dim(), 128);
        // per-block spatial ladder
        let mut h: usize = 864;
        let mut w: usize = 400;
        let expect = [(432, 200, 16), (216, 100, 32), (108, 50, 64)];
        for (i, &(eh, ew, ec)) in expect.iter().enumerate() {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            assert_eq!((h, w, cfg.block_channels[i]), (eh, ew, ec));
        }

        let net = MtlNetwork::init(cfg, 5);
        let f = feature(864, 400, 2.0);
        let out = net.forward(&f, ForwardMode::Eval);
        assert_eq!(out.sd_logits.shape, vec![1, 2]);
        assert_eq!(out.asv_logits.shape, vec![1, 78]);
        assert_eq!(out.embeddings.shape, vec![1, 128]);
        assert!(out.sd_logits.is_finite());
        assert!(out.asv_logits.is_finite());
        assert!(out.embeddings.is_finite());
    }

    #[test]
    fn reduced_geometry_ladder() {
        let cfg = NetConfig::with_input(10, 80, 400);
        assert_eq!(cfg.trunk_dims(), (10, 50, 64));
        assert_eq!(cfg.pooled_dim(), 3200);
        let net = MtlNetwork::init(cfg, 5);
        let f = UnifiedFeature {
            matrix: feature(80, 400, 2.0).matrix,
            kind: FeatureKind::Llfb,
        };
        let out = net.forward(&f, ForwardMode::Eval);
        assert_eq!(out.asv_logits.shape, vec![1, 10]);
        assert_eq!(out.embeddings.shape, vec![1, 128]);
    }

    #[test]
    fn init_deterministic_and_he_scaled() {
        let a = MtlNetwork::init(NetConfig::paper(78), 42);
        let b = MtlNetwork::init(NetConfig::paper(78), 42);
        assert_eq!(a.params, b.params);
        let c = MtlNetwork::init(NetConfig::paper(78), 43);
        assert_ne!(a.params, c.params);

        // biases exactly zero; BN identity
        for (name, class, arr) in a.params.entries() {
            match class {
                ParamClass::Bias | ParamClass::BnShift | ParamClass::BnRunningMean => {
                    assert!(arr.iter().all(|&v| v == 0.0), "{name} nonzero");
                }
                ParamClass::BnScale | ParamClass::BnRunningVar => {
                    assert!(arr.iter().all(|&v| v == 1.0), "{name} not one");
                }
                ParamClass::Weight => {}
            }
        }

        // sample variance of a large layer within 10% of 2/fan_in
        let w = &a.params.sd.hidden[0].weight; // 3200 x 512
        let var: f64 = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        let expect = 2.0 / 3200.0;
        assert!((var - expect).abs() / expect < 0.10, "var {var} vs {expect}");
    }

    #[test]
    fn eval_forward_deterministic() {
        let net = MtlNetwork::init(NetConfig::with_input(4, 32, 32), 9);
        let f = feature(32, 32, 1.0);
        let a = net.forward(&f, ForwardMode::Eval);
        let b = net.forward(&f, ForwardMode::Eval);
        assert_eq!(a.sd_logits.data, b.sd_logits.data);
        assert_eq!(a.asv_logits.data, b.asv_logits.data);
        assert_eq!(a.embeddings.data, b.embeddings.data);
        assert!(a.trace.is_none());
    }

    #[test]
    fn train_forward_seeded_replay() {
        use rand::SeedableRng;
        let net = MtlNetwork::init(NetConfig::with_input(4, 32, 32), 9);
        let f = feature(32, 32, 1.0);
        let mut r1 = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let mut r2 = rand_chacha::ChaCha20Rng::seed_from_u64(77);
        let a = net.forward(&f, ForwardMode::Train { rng: &mut r1 });
        let b = net.forward(&f, ForwardMode::Train { rng: &mut r2 });
        assert_eq!(a.sd_features.data, b.sd_features.data);
        assert!(a.trace.is_some());
    }

    #[test]
    fn zero_input_zero_params_give_zero_block_output() {
        // zero conv weights/biases and BN shift keep the residual path at
        // zero: max(0, 0) stays 0 through every MFM
        let cfg = NetConfig {
            input_rows: 16,
            input_cols: 16,
            block_channels: vec![2],
            sd_hidden: vec![4],
            asv_hidden: vec![4],
            n_speakers: 2,
            ..NetConfig::paper(2)
        };
        let mut net = MtlNetwork::init(cfg, 1);
        net.params.blocks[0].entry.weight.iter_mut().for_each(|v| *v = 0.0);
        net.params.blocks[0].entry.bias.iter_mut().for_each(|v| *v = 0.0);
        net.params.blocks[0].nin1.weight.iter_mut().for_each(|v| *v = 0.0);
        net.params.blocks[0].conv2.weight.iter_mut().for_each(|v| *v = 0.0);
        net.params.blocks[0].nin2.weight.iter_mut().for_each(|v| *v = 0.0);
        let f = UnifiedFeature {
            matrix: Tfr::new(16, 16),
            kind: FeatureKind::Cqt,
        };
        let out = net.forward(&f, ForwardMode::Eval);
        // embeddings are LReLU(0 . W + 0) = 0
        assert!(out.embeddings.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mfm_sites_and_layer_inventory() {
        // 6 conv + 6 NIN + 12 MFM + 5 FC layers in the full network
        let cfg = NetConfig::paper(78);
        let convs = cfg.block_channels.len() * 2; // entry + inner per block
        let nins = cfg.block_channels.len() * 2;
        let mfms = cfg.block_channels.len() * 4;
        let fcs = cfg.sd_hidden.len() + cfg.asv_hidden.len();
        assert_eq!(convs, 6);
        assert_eq!(nins, 6);
        assert_eq!(mfms, 12);
        assert_eq!(fcs, 5);
    }
}
