use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::io::ImageTensor;

use super::layers::{maxpool2, maxpool2_backward, relu_backward, relu_inplace, Conv3x3, Dense};
use super::{NetConfig, CONF_WIDTH};

#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub convs: Vec<Conv3x3>,
    /// Flattened feature map -> n1 embedding ("FC7").
    pub fc: Dense,
}

impl StreamParams {
    fn zeros(config: &NetConfig) -> Self {
        let mut convs = Vec::with_capacity(config.conv_channels.len());
        let mut in_ch = 3;
        for &out_ch in &config.conv_channels {
            convs.push(Conv3x3::zeros(in_ch, out_ch));
            in_ch = out_ch;
        }
        StreamParams {
            convs,
            fc: Dense::zeros(config.flat_width(), config.n1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub img: StreamParams,
    pub pb: StreamParams,
    pub conf: Dense,
    pub head_img: Dense,
    pub head_pb: Dense,
    pub head_fused: Dense,
}

impl NetParams {
    pub fn zeros(config: &NetConfig) -> Self {
        NetParams {
            config: config.clone(),
            img: StreamParams::zeros(config),
            pb: StreamParams::zeros(config),
            conf: Dense::zeros(CONF_WIDTH, CONF_WIDTH),
            head_img: Dense::zeros(config.n1, config.n3),
            head_pb: Dense::zeros(config.n1, config.n3),
            head_fused: Dense::zeros(config.concat_width(), config.n3),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NetParams::zeros(&self.config)
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (prefix, s) in [("img", &self.img), ("pb", &self.pb)] {
            for (i, c) in s.convs.iter().enumerate() {
                out.push((format!("{prefix}.conv{i}.weight"), &c.weight));
                out.push((format!("{prefix}.conv{i}.bias"), &c.bias));
            }
            out.push((format!("{prefix}.fc.weight"), &s.fc.weight));
            out.push((format!("{prefix}.fc.bias"), &s.fc.bias));
        }
        for (name, d) in [
            ("conf", &self.conf),
            ("head_img", &self.head_img),
            ("head_pb", &self.head_pb),
            ("head_fused", &self.head_fused),
        ] {
            out.push((format!("{name}.weight"), &d.weight));
            out.push((format!("{name}.bias"), &d.bias));
        }
        out
    }

    /// Mutable view in the same order as [`NetParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        for s in [&mut self.img, &mut self.pb] {
            for c in &mut s.convs {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            out.push(&mut s.fc.weight);
            out.push(&mut s.fc.bias);
        }
        for d in [
            &mut self.conf,
            &mut self.head_img,
            &mut self.head_pb,
            &mut self.head_fused,
        ] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

fn he_fill(rng: &mut ChaCha8Rng, weights: &mut [f64], fan_in: usize) {
    let normal = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).expect("valid std");
    for w in weights {
        *w = normal.sample(rng);
    }
}

/// He-initialized weights and zero biases. Both image streams start from the
/// same draw; every tensor is drawn regardless of which streams are enabled,
/// so ablations of one seed share their initial weights.
pub fn init_params(config: &NetConfig, seed: u64) -> Result<NetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetParams::zeros(config);
    for c in &mut p.img.convs {
        let fan_in = c.in_ch * 9;
        he_fill(&mut rng, &mut c.weight, fan_in);
    }
    let fan_in = p.img.fc.n_in;
    he_fill(&mut rng, &mut p.img.fc.weight, fan_in);
    p.pb = p.img.clone();
    for d in [&mut p.conf, &mut p.head_img, &mut p.head_pb, &mut p.head_fused] {
        let fan_in = d.n_in;
        he_fill(&mut rng, &mut d.weight, fan_in);
    }
    Ok(p)
}

/// One network input triple. Image streams take `3 x H x W` channel-major
/// buffers; a disabled stream's buffer may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NetInput {
    pub img: Vec<f64>,
    pub pb: Vec<f64>,
    pub conf: [f64; CONF_WIDTH],
}

/// Resizes to the configured input size and converts to a centered
/// channel-major buffer (`value - 0.5`).
pub fn image_to_input(img: &ImageTensor, config: &NetConfig) -> Vec<f64> {
    let resized = img.resize(config.input_h, config.input_w);
    let (h, w) = (config.input_h, config.input_w);
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in resized.data().chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = px[c] as f64 - 0.5;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StreamCache {
    conv_inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    args: Vec<Vec<u32>>,
    flat: Vec<f64>,
    fc_pre: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub emb_img: Vec<f64>,
    pub emb_pb: Vec<f64>,
    pub emb_conf: Vec<f64>,
    /// `emb_img | emb_pb | emb_conf`; disabled slots are zero.
    pub concat: Vec<f64>,
    /// Present when the image stream and auxiliary losses are enabled.
    pub logits_img: Option<Vec<f64>>,
    pub logits_pb: Option<Vec<f64>>,
    pub logits_fused: Vec<f64>,
    img_cache: Option<StreamCache>,
    pb_cache: Option<StreamCache>,
    conf_input: [f64; CONF_WIDTH],
    conf_pre: Option<Vec<f64>>,
}

fn stream_forward(s: &StreamParams, config: &NetConfig, x: &[f64]) -> (Vec<f64>, StreamCache) {
    let (mut h, mut w) = (config.input_h, config.input_w);
    let mut cur = x.to_vec();
    let mut cache = StreamCache {
        conv_inputs: Vec::with_capacity(s.convs.len()),
        pre: Vec::with_capacity(s.convs.len()),
        args: Vec::with_capacity(s.convs.len()),
        flat: Vec::new(),
        fc_pre: Vec::new(),
    };
    for conv in &s.convs {
        let pre = conv.forward(&cur, h, w);
        let mut act = pre.clone();
        relu_inplace(&mut act);
        let (pooled, arg) = maxpool2(&act, conv.out_ch, h, w);
        cache.conv_inputs.push(std::mem::replace(&mut cur, pooled));
        cache.pre.push(pre);
        cache.args.push(arg);
        h /= 2;
        w /= 2;
    }
    let fc_pre = s.fc.forward(&cur);
    let mut emb = fc_pre.clone();
    relu_inplace(&mut emb);
    cache.flat = cur;
    cache.fc_pre = fc_pre;
    (emb, cache)
}

fn stream_backward(
    s: &StreamParams,
    config: &NetConfig,
    cache: &StreamCache,
    d_emb: &[f64],
    grad: &mut StreamParams,
) {
    let mut d = d_emb.to_vec();
    relu_backward(&cache.fc_pre, &mut d);
    let mut d_cur = s
        .fc
        .backward(&cache.flat, &d, &mut grad.fc, true)
        .expect("input grad requested");
    let n = s.convs.len();
    for b in (0..n).rev() {
        let (h, w) = (config.input_h >> b, config.input_w >> b);
        let conv = &s.convs[b];
        let mut d_act = maxpool2_backward(&d_cur, &cache.args[b], conv.out_ch * h * w);
        relu_backward(&cache.pre[b], &mut d_act);
        match conv.backward(&cache.conv_inputs[b], h, w, &d_act, &mut grad.convs[b], b > 0) {
            Some(dx) => d_cur = dx,
            None => break,
        }
    }
}

pub fn forward(params: &NetParams, input: &NetInput) -> Result<ForwardOutput> {
    let cfg = &params.config;
    let img_len = 3 * cfg.input_h * cfg.input_w;
    for (on, buf, name) in [(cfg.streams.img, &input.img, "image"), (cfg.streams.pb, &input.pb, "PoseBox")] {
        if on && buf.len() != img_len {
            return Err(Error::Shape(format!(
                "{name} input has {} values, expected {img_len} (3x{}x{})",
                buf.len(),
                cfg.input_h,
                cfg.input_w
            )));
        }
    }
    let n1 = cfg.n1;
    let (emb_img, img_cache) = if cfg.streams.img {
        let (e, c) = stream_forward(&params.img, cfg, &input.img);
        (e, Some(c))
    } else {
        (vec![0.0; n1], None)
    };
    let (emb_pb, pb_cache) = if cfg.streams.pb {
        let (e, c) = stream_forward(&params.pb, cfg, &input.pb);
        (e, Some(c))
    } else {
        (vec![0.0; n1], None)
    };
    let (emb_conf, conf_pre) = if cfg.streams.conf {
        let pre = params.conf.forward(&input.conf);
        let mut e = pre.clone();
        relu_inplace(&mut e);
        (e, Some(pre))
    } else {
        (vec![0.0; CONF_WIDTH], None)
    };
    let mut concat = Vec::with_capacity(cfg.concat_width());
    concat.extend_from_slice(&emb_img);
    concat.extend_from_slice(&emb_pb);
    concat.extend_from_slice(&emb_conf);
    let logits_fused = params.head_fused.forward(&concat);
    let logits_img = (cfg.aux_losses && cfg.streams.img).then(|| params.head_img.forward(&emb_img));
    let logits_pb = (cfg.aux_losses && cfg.streams.pb).then(|| params.head_pb.forward(&emb_pb));
    Ok(ForwardOutput {
        emb_img,
        emb_pb,
        emb_conf,
        concat,
        logits_img,
        logits_pb,
        logits_fused,
        img_cache,
        pb_cache,
        conf_input: input.conf,
        conf_pre,
    })
}

/// Per-head softmax cross-entropy in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub ce_img: f64,
    pub ce_pb: f64,
    pub ce_fused: f64,
    pub total: f64,
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let s: f64 = p.iter().sum();
    for v in &mut p {
        *v /= s;
    }
    p
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Sum of the fused loss and, when enabled, the auxiliary stream losses.
/// Terms that are switched off are reported as zero.
pub fn total_loss(out: &ForwardOutput, label: usize, config: &NetConfig) -> Result<LossReport> {
    if label >= config.n3 {
        return Err(Error::Argument(format!("label {label} out of range for {} classes", config.n3)));
    }
    let ce_fused = cross_entropy(&out.logits_fused, label);
    let ce_img = out.logits_img.as_deref().map_or(0.0, |l| cross_entropy(l, label));
    let ce_pb = out.logits_pb.as_deref().map_or(0.0, |l| cross_entropy(l, label));
    Ok(LossReport {
        ce_img,
        ce_pb,
        ce_fused,
        total: ce_fused + ce_img + ce_pb,
    })
}

fn softmax_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// Accumulates exact gradients of the total loss into `grads`.
pub fn backward_into(params: &NetParams, out: &ForwardOutput, label: usize, grads: &mut NetParams) {
    let cfg = &params.config;
    let n1 = cfg.n1;
    let d_fused = softmax_grad(&out.logits_fused, label);
    let d_concat = params
        .head_fused
        .backward(&out.concat, &d_fused, &mut grads.head_fused, true)
        .expect("input grad requested");

    if let Some(cache) = &out.img_cache {
        let mut d_emb = d_concat[..n1].to_vec();
        if let Some(logits) = &out.logits_img {
            let d = softmax_grad(logits, label);
            let de = params
                .head_img
                .backward(&out.emb_img, &d, &mut grads.head_img, true)
                .expect("input grad requested");
            for (a, b) in d_emb.iter_mut().zip(de) {
                *a += b;
            }
        }
        stream_backward(&params.img, cfg, cache, &d_emb, &mut grads.img);
    }
    if let Some(cache) = &out.pb_cache {
        let mut d_emb = d_concat[n1..2 * n1].to_vec();
        if let Some(logits) = &out.logits_pb {
            let d = softmax_grad(logits, label);
            let de = params
                .head_pb
                .backward(&out.emb_pb, &d, &mut grads.head_pb, true)
                .expect("input grad requested");
            for (a, b) in d_emb.iter_mut().zip(de) {
                *a += b;
            }
        }
        stream_backward(&params.pb, cfg, cache, &d_emb, &mut grads.pb);
    }
    if let Some(pre) = &out.conf_pre {
        let mut d = d_concat[2 * n1..].to_vec();
        relu_backward(pre, &mut d);
        params.conf.backward(&out.conf_input, &d, &mut grads.conf, false);
    }
}

pub fn backward(params: &NetParams, out: &ForwardOutput, label: usize) -> NetParams {
    let mut grads = params.zeros_like();
    backward_into(params, out, label, &mut grads);
    grads
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieLayer {
    /// Concatenated stream embeddings (enabled streams only).
    Concat,
    /// Fused classifier output, before softmax.
    Fused,
}

impl std::str::FromStr for PieLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(PieLayer::Concat),
            "fused" => Ok(PieLayer::Fused),
            other => Err(Error::Argument(format!("unknown PIE layer {other:?}"))),
        }
    }
}

pub fn relu_embedding(raw: &[f64]) -> Vec<f64> {
    let mut v = raw.to_vec();
    relu_inplace(&mut v);
    v
}

/// Extracts the ReLU'd embedding of one input.
pub fn extract_pie(params: &NetParams, input: &NetInput, layer: PieLayer) -> Result<Vec<f64>> {
    let out = forward(params, input)?;
    let cfg = &params.config;
    let raw = match layer {
        PieLayer::Fused => out.logits_fused,
        PieLayer::Concat => {
            let mut v = Vec::with_capacity(cfg.embedding_width());
            if cfg.streams.img {
                v.extend_from_slice(&out.emb_img);
            }
            if cfg.streams.pb {
                v.extend_from_slice(&out.emb_pb);
            }
            if cfg.streams.conf {
                v.extend_from_slice(&out.emb_conf);
            }
            v
        }
    };
    Ok(relu_embedding(&raw))
}
