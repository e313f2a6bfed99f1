//! Two-stream encoder/decoder segmentation network for change detection.
//!
//! The architecture is a compact U-shaped network that consumes a pre-event
//! and a post-event patch and emits per-pixel class logits. With
//! [`Fusion::TwoStream`] each epoch's imagery passes through its own
//! encoder and the bottleneck fuses the two; with [`Fusion::Stacked`] the
//! patches are concatenated into a six-band input for a single encoder.
//!
//! Each encoder level applies two 3x3 conv+ReLU layers and then 2x2 max
//! pooling; channel width doubles per level. The decoder mirrors this with
//! nearest-neighbor upsampling, skip concatenation from the encoder(s), one
//! 3x3 conv+ReLU per level, and a final 1x1 conv producing the logits.
//! All shapes are `same`-padded, so inputs whose sides are divisible by
//! `2^depth` produce logits of identical spatial size.
//!
//! Everything — initialization, forward, backward — is deterministic for a
//! given seed and configuration, bit-identically so across thread counts.

mod io;
mod ops;
mod tensor;

pub use io::{load_weights, read_weights_config, save_weights};
pub use ops::{
    argmax_classes, concat_channels, conv2d, conv2d_backward, maxpool2, maxpool2_backward,
    relu, relu_backward, softmax_cross_entropy, split_channels, upsample2, upsample2_backward,
    Conv2dGrads,
};
pub use tensor::Tensor;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from model construction, execution, and weight files.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("{op}: {dimension} mismatch: {detail}")]
    Shape {
        op: &'static str,
        dimension: &'static str,
        detail: String,
    },
    #[error("maxpool2 requires even spatial dims, got {h}x{w}")]
    OddPool { h: usize, w: usize },
    #[error("input {h}x{w} is not divisible by 2^depth = {factor}; pad inputs to a multiple")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("target class {value} at pixel {index} is out of range for {num_classes} classes")]
    TargetOutOfRange {
        value: u8,
        index: usize,
        num_classes: usize,
    },
    #[error("backward requires a preceding forward with train_mode = true")]
    NoTrace,
    #[error("weight file {path}: {message}")]
    WeightFormat { path: String, message: String },
    #[error("weight file {path} does not match the requested architecture: {detail}")]
    ConfigMismatch { path: String, detail: String },
    #[error("i/o error for {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How the pre- and post-event streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Separate encoders per epoch, fused at the bottleneck.
    TwoStream,
    /// One encoder over the channel-stacked pair.
    Stacked,
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Bands per input image (3 for RGB).
    pub in_bands_per_stream: usize,
    /// Output classes (3: background, intact, damaged).
    pub num_classes: usize,
    /// Number of encoder levels (and pooling steps).
    pub depth: usize,
    /// Channels at the first level; doubles per level.
    pub base_channels: usize,
    pub fusion: Fusion,
    /// Seed for parameter initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_bands_per_stream: 3,
            num_classes: 3,
            depth: 3,
            base_channels: 16,
            fusion: Fusion::TwoStream,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<(), NetError> {
        if self.depth < 1 {
            return Err(NetError::InvalidConfig("depth must be >= 1".into()));
        }
        if self.base_channels < 1 {
            return Err(NetError::InvalidConfig("base_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::InvalidConfig("num_classes must be >= 2".into()));
        }
        if self.in_bands_per_stream < 1 {
            return Err(NetError::InvalidConfig(
                "in_bands_per_stream must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Channel width at encoder level `l` (the bottleneck is level `depth`).
    fn ch(&self, l: usize) -> usize {
        self.base_channels << l
    }
}

/// One named conv layer's parameters.
#[derive(Debug, Clone)]
pub(crate) struct Layer {
    pub(crate) name: String,
    pub(crate) w: Tensor,
    pub(crate) b: Tensor,
}

/// The planned shape of one layer, used for initialization and for
/// validating weight files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct LayerShape {
    pub(crate) name: String,
    pub(crate) weight_shape: [usize; 4],
    pub(crate) bias_len: usize,
}

/// The canonical layer list for a config: encoder stream(s) shallow-to-deep,
/// bottleneck, decoder deep-to-shallow, head. Weight files store parameters
/// in exactly this order.
pub(crate) fn shape_plan(config: &ModelConfig) -> Vec<LayerShape> {
    let mut plan = Vec::new();
    let (streams, stream_in): (&[&str], usize) = match config.fusion {
        Fusion::TwoStream => (&["enc_a", "enc_b"], config.in_bands_per_stream),
        Fusion::Stacked => (&["enc"], 2 * config.in_bands_per_stream),
    };
    for stream in streams {
        let mut prev = stream_in;
        for l in 0..config.depth {
            plan.push(LayerShape {
                name: format!("{stream}.l{l}.conv0"),
                weight_shape: [config.ch(l), prev, 3, 3],
                bias_len: config.ch(l),
            });
            plan.push(LayerShape {
                name: format!("{stream}.l{l}.conv1"),
                weight_shape: [config.ch(l), config.ch(l), 3, 3],
                bias_len: config.ch(l),
            });
            prev = config.ch(l);
        }
    }
    let bn_in = config.ch(config.depth - 1) * streams.len();
    plan.push(LayerShape {
        name: "bottleneck.conv0".to_string(),
        weight_shape: [config.ch(config.depth), bn_in, 3, 3],
        bias_len: config.ch(config.depth),
    });
    plan.push(LayerShape {
        name: "bottleneck.conv1".to_string(),
        weight_shape: [config.ch(config.depth), config.ch(config.depth), 3, 3],
        bias_len: config.ch(config.depth),
    });
    for l in (0..config.depth).rev() {
        let dec_in = config.ch(l + 1) + streams.len() * config.ch(l);
        plan.push(LayerShape {
            name: format!("dec.l{l}.conv"),
            weight_shape: [config.ch(l), dec_in, 3, 3],
            bias_len: config.ch(l),
        });
    }
    plan.push(LayerShape {
        name: "head".to_string(),
        weight_shape: [config.num_classes, config.ch(0), 1, 1],
        bias_len: config.num_classes,
    });
    plan
}

/// Per-layer parameter gradients, keyed by layer name.
#[derive(Debug)]
pub struct Gradients {
    pub by_layer: BTreeMap<String, LayerGrads>,
}

#[derive(Debug)]
pub struct LayerGrads {
    pub dw: Tensor,
    pub db: Tensor,
}

struct EncLevelTrace {
    input: Tensor,
    mid: Tensor,
    out: Tensor,
    argmax: Vec<u32>,
}

struct DecLevelTrace {
    concat_in: Tensor,
    out: Tensor,
}

struct Trace {
    /// Per stream, per level (index 0 = shallowest).
    enc: Vec<Vec<EncLevelTrace>>,
    bn_in: Tensor,
    bn_mid: Tensor,
    bn_out: Tensor,
    /// In processing order: index 0 is the deepest decoder level.
    dec: Vec<DecLevelTrace>,
}

/// The segmentation network: configuration plus parameters, with an
/// optional retained forward trace for backpropagation.
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    index: BTreeMap<String, usize>,
    trace: Option<Trace>,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        // The forward trace is scratch state, not part of the model.
        Model {
            config: self.config.clone(),
            layers: self.layers.clone(),
            index: self.index.clone(),
            trace: None,
        }
    }
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("param_count", &self.param_count())
            .finish()
    }
}

/// Builds a model with He-uniform initialized weights (zero biases) drawn
/// deterministically from `config.seed`. With two-stream fusion the two
/// encoders draw from one sequential stream and therefore start with
/// different values.
pub fn build_model(config: &ModelConfig) -> Result<Model, NetError> {
    config.validate()?;
    let plan = shape_plan(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers: Vec<Layer> = plan
        .into_iter()
        .map(|ls| {
            let fan_in = ls.weight_shape[1] * ls.weight_shape[2] * ls.weight_shape[3];
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            let n: usize = ls.weight_shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
            Layer {
                w: Tensor::from_vec(&ls.weight_shape, data),
                b: Tensor::zeros(&[ls.bias_len]),
                name: ls.name,
            }
        })
        .collect();
    Ok(Model::assemble(config.clone(), layers))
}

impl Model {
    pub(crate) fn assemble(config: ModelConfig, layers: Vec<Layer>) -> Model {
        let index = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        Model {
            config,
            layers,
            index,
            trace: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Total parameter count (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Layer names in canonical (weight file) order.
    pub fn layer_names(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.name.as_str()).collect()
    }

    pub(crate) fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// One layer's parameters (weights, bias) by canonical name.
    pub fn layer_params(&self, name: &str) -> Option<(&Tensor, &Tensor)> {
        self.index
            .get(name)
            .map(|&i| (&self.layers[i].w, &self.layers[i].b))
    }

    /// Mutable access to one layer's parameters (weights, bias), for
    /// optimizers and external gradient verification.
    pub fn layer_params_mut(&mut self, name: &str) -> Option<(&mut Tensor, &mut Tensor)> {
        self.index.get(name).copied().map(move |i| {
            let l = &mut self.layers[i];
            (&mut l.w, &mut l.b)
        })
    }

    fn layer(&self, name: &str) -> &Layer {
        &self.layers[self.index[name]]
    }

    fn conv(&self, name: &str, x: &Tensor) -> Result<Tensor, NetError> {
        let l = self.layer(name);
        ops::conv2d(x, &l.w, &l.b)
    }

    fn validate_inputs(&self, pre: &Tensor, post: &Tensor) -> Result<(), NetError> {
        for (what, t) in [("pre", pre), ("post", post)] {
            match *t.shape() {
                [_, c, _, _] => {
                    if c != self.config.in_bands_per_stream {
                        return Err(NetError::Shape {
                            op: "forward",
                            dimension: "bands",
                            detail: format!(
                                "{what} patch has {c} bands, model expects {}",
                                self.config.in_bands_per_stream
                            ),
                        });
                    }
                }
                ref s => {
                    return Err(NetError::Shape {
                        op: "forward",
                        dimension: "rank",
                        detail: format!("{what} patch must be [n, c, h, w], got {s:?}"),
                    })
                }
            }
        }
        if pre.shape() != post.shape() {
            return Err(NetError::Shape {
                op: "forward",
                dimension: "shape",
                detail: format!(
                    "pre {:?} and post {:?} must match",
                    pre.shape(),
                    post.shape()
                ),
            });
        }
        let (h, w) = (pre.dim(2), pre.dim(3));
        let factor = 1usize << self.config.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(NetError::NotDivisible { h, w, factor });
        }
        Ok(())
    }

    /// Runs the network. With `train_mode` the intermediate activations are
    /// retained for a following [`Model::backward`] call.
    pub fn forward(
        &mut self,
        pre: &Tensor,
        post: &Tensor,
        train_mode: bool,
    ) -> Result<Tensor, NetError> {
        let (logits, trace) = self.run_forward(pre, post)?;
        self.trace = train_mode.then_some(trace);
        Ok(logits)
    }

    /// Inference-only forward that leaves the model untouched, usable from
    /// multiple threads at once.
    pub fn predict(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor, NetError> {
        Ok(self.run_forward(pre, post)?.0)
    }

    fn run_forward(&self, pre: &Tensor, post: &Tensor) -> Result<(Tensor, Trace), NetError> {
        self.validate_inputs(pre, post)?;
        let depth = self.config.depth;

        let stream_inputs: Vec<Tensor> = match self.config.fusion {
            Fusion::TwoStream => vec![pre.clone(), post.clone()],
            Fusion::Stacked => vec![ops::concat_channels(pre, post)?],
        };
        let streams = self.stream_names();

        let mut enc_traces: Vec<Vec<EncLevelTrace>> = Vec::with_capacity(streams.len());
        let mut pooled_outs: Vec<Tensor> = Vec::with_capacity(streams.len());
        for (s, input) in streams.iter().zip(stream_inputs) {
            let mut levels = Vec::with_capacity(depth);
            let mut x = input;
            for l in 0..depth {
                let mid = ops::relu(&self.conv(&format!("{s}.l{l}.conv0"), &x)?);
                let out = ops::relu(&self.conv(&format!("{s}.l{l}.conv1"), &mid)?);
                let (pooled, argmax) = ops::maxpool2(&out)?;
                levels.push(EncLevelTrace {
                    input: x,
                    mid,
                    out,
                    argmax,
                });
                x = pooled;
            }
            enc_traces.push(levels);
            pooled_outs.push(x);
        }

        let bn_in = match self.config.fusion {
            Fusion::TwoStream => ops::concat_channels(&pooled_outs[0], &pooled_outs[1])?,
            Fusion::Stacked => pooled_outs.pop().expect("one stream"),
        };
        let bn_mid = ops::relu(&self.conv("bottleneck.conv0", &bn_in)?);
        let bn_out = ops::relu(&self.conv("bottleneck.conv1", &bn_mid)?);

        let mut dec_traces: Vec<DecLevelTrace> = Vec::with_capacity(depth);
        let mut x = bn_out.clone();
        for l in (0..depth).rev() {
            let up = ops::upsample2(&x);
            let mut cat = ops::concat_channels(&up, &enc_traces[0][l].out)?;
            if enc_traces.len() == 2 {
                cat = ops::concat_channels(&cat, &enc_traces[1][l].out)?;
            }
            let out = ops::relu(&self.conv(&format!("dec.l{l}.conv"), &cat)?);
            x = out.clone();
            dec_traces.push(DecLevelTrace {
                concat_in: cat,
                out,
            });
        }

        let logits = self.conv("head", &x)?;
        let trace = Trace {
            enc: enc_traces,
            bn_in,
            bn_mid,
            bn_out,
            dec: dec_traces,
        };
        Ok((logits, trace))
    }

    fn stream_names(&self) -> Vec<&'static str> {
        match self.config.fusion {
            Fusion::TwoStream => vec!["enc_a", "enc_b"],
            Fusion::Stacked => vec!["enc"],
        }
    }

    /// Backpropagates `dlogits` (the loss gradient at the logits) through
    /// the trace retained by the last `forward(.., train_mode = true)` call
    /// and returns parameter gradients for every layer. The trace is
    /// consumed.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<Gradients, NetError> {
        let trace = self.trace.take().ok_or(NetError::NoTrace)?;
        let depth = self.config.depth;
        let streams = self.stream_names();
        let mut grads: BTreeMap<String, LayerGrads> = BTreeMap::new();

        let conv_back = |grads: &mut BTreeMap<String, LayerGrads>,
                             name: &str,
                             input: &Tensor,
                             dout: &Tensor|
         -> Tensor {
            let l = self.layer(name);
            let g = ops::conv2d_backward(input, &l.w, dout);
            grads.insert(
                name.to_string(),
                LayerGrads {
                    dw: g.dweights,
                    db: g.dbias,
                },
            );
            g.dinput
        };

        // Head (1x1 conv, no activation).
        let head_in = &trace.dec.last().expect("depth >= 1").out;
        let mut d = conv_back(&mut grads, "head", head_in, dlogits);

        // Decoder, shallow to deep; collect skip gradients per stream/level.
        let mut skip_grads: Vec<Vec<Option<Tensor>>> =
            vec![(0..depth).map(|_| None).collect(); streams.len()];
        for l in 0..depth {
            // Decoder traces are stored deepest-first: level l sits at
            // index depth-1-l.
            let dt = &trace.dec[depth - 1 - l];
            let d_act = ops::relu_backward(&dt.out, &d);
            let d_cat = conv_back(&mut grads, &format!("dec.l{l}.conv"), &dt.concat_in, &d_act);
            let up_channels = self.config.ch(l + 1);
            let (d_up, d_skips) = ops::split_channels(&d_cat, up_channels);
            if streams.len() == 2 {
                let (d_a, d_b) = ops::split_channels(&d_skips, self.config.ch(l));
                skip_grads[0][l] = Some(d_a);
                skip_grads[1][l] = Some(d_b);
            } else {
                skip_grads[0][l] = Some(d_skips);
            }
            d = ops::upsample2_backward(&d_up);
        }

        // Bottleneck.
        let d_act = ops::relu_backward(&trace.bn_out, &d);
        let d_mid = conv_back(&mut grads, "bottleneck.conv1", &trace.bn_mid, &d_act);
        let d_act = ops::relu_backward(&trace.bn_mid, &d_mid);
        let d_bn_in = conv_back(&mut grads, "bottleneck.conv0", &trace.bn_in, &d_act);

        let pooled_grads: Vec<Tensor> = match self.config.fusion {
            Fusion::TwoStream => {
                let half = self.config.ch(depth - 1);
                let (a, b) = ops::split_channels(&d_bn_in, half);
                vec![a, b]
            }
            Fusion::Stacked => vec![d_bn_in],
        };

        // Encoder streams, deep to shallow.
        for (s, stream) in streams.iter().enumerate() {
            let mut d_pooled = pooled_grads[s].clone();
            for l in (0..depth).rev() {
                let lt = &trace.enc[s][l];
                let mut d_out = ops::maxpool2_backward(&lt.argmax, lt.out.shape(), &d_pooled);
                if let Some(ds) = &skip_grads[s][l] {
                    for (a, &b) in d_out.data_mut().iter_mut().zip(ds.data()) {
                        *a += b;
                    }
                }
                let d_act = ops::relu_backward(&lt.out, &d_out);
                let d_mid = conv_back(&mut grads, &format!("{stream}.l{l}.conv1"), &lt.mid, &d_act);
                let d_act = ops::relu_backward(&lt.mid, &d_mid);
                d_pooled = conv_back(&mut grads, &format!("{stream}.l{l}.conv0"), &lt.input, &d_act);
            }
        }

        debug_assert_eq!(grads.len(), self.layers.len());
        Ok(Gradients { by_layer: grads })
    }
}



#[cfg(test)]
mod gradcheck_tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Plain-f64 activations for the reference forward below. Finite
    /// differences of the f32 production forward cannot resolve the tiny
    /// first-layer gradients (activation rounding swamps them), so the loss
    /// being differentiated is recomputed here in f64 from the same weights.
    #[derive(Clone)]
    struct A64 {
        shape: [usize; 4],
        data: Vec<f64>,
    }

    fn conv64(x: &A64, w: &Tensor, b: &Tensor) -> A64 {
        let [n, ci, h, wid] = x.shape;
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let pad = (k / 2) as i64;
        let mut out = vec![0.0f64; n * co * h * wid];
        let mut idx = 0;
        for ni in 0..n {
            for o in 0..co {
                for y in 0..h as i64 {
                    for xx in 0..wid as i64 {
                        let mut acc = b.data()[o] as f64;
                        for c in 0..ci {
                            for ky in 0..k as i64 {
                                for kx in 0..k as i64 {
                                    let (sy, sx) = (y + ky - pad, xx + kx - pad);
                                    if sy >= 0 && sy < h as i64 && sx >= 0 && sx < wid as i64 {
                                        let xi = ((ni * ci + c) * h + sy as usize) * wid
                                            + sx as usize;
                                        let wi = ((o * ci + c) * k + ky as usize) * k
                                            + kx as usize;
                                        acc += x.data[xi] * w.data()[wi] as f64;
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
        A64 { shape: [n, co, h, wid], data: out }
    }

    fn relu64(x: &A64) -> A64 {
        A64 {
            shape: x.shape,
            data: x.data.iter().map(|&v| v.max(0.0)).collect(),
        }
    }

    fn pool64(x: &A64) -> A64 {
        let [n, c, h, w] = x.shape;
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x.data[(p * h + 2 * y + dy) * w + 2 * xx + dx];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        A64 { shape: [n, c, ho, wo], data: out }
    }

    fn up64(x: &A64) -> A64 {
        let [n, c, h, w] = x.shape;
        let mut out = Vec::with_capacity(n * c * h * w * 4);
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(x.data[(p * h + y / 2) * w + xx / 2]);
                }
            }
        }
        A64 { shape: [n, c, 2 * h, 2 * w], data: out }
    }

    fn cat64(a: &A64, b: &A64) -> A64 {
        let [n, ca, h, w] = a.shape;
        let cb = b.shape[1];
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for ni in 0..n {
            out.extend_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        A64 { shape: [n, ca + cb, h, w], data: out }
    }

    fn ce64(logits: &A64, targets: &[u8], class_weights: &[f32]) -> f64 {
        let [n, k, h, w] = logits.shape;
        let plane = h * w;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for ni in 0..n {
            for p in 0..plane {
                let at = |c: usize| logits.data[(ni * k + c) * plane + p];
                let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (at(c) - m).exp()).sum();
                let t = targets[ni * plane + p] as usize;
                let wt = class_weights[t] as f64;
                num += wt * (z.ln() - (at(t) - m));
                den += wt;
            }
        }
        num / den
    }

    fn ref_forward(model: &Model, pre: &A64, post: &A64) -> A64 {
        let depth = model.config().depth;
        let lp = |name: String| model.layer_params(&name).unwrap();
        let mut skips: Vec<Vec<A64>> = Vec::new();
        let mut pooled: Vec<A64> = Vec::new();
        for (s, input) in [("enc_a", pre), ("enc_b", post)] {
            let mut x = input.clone();
            let mut levels = Vec::new();
            for l in 0..depth {
                let (w0, b0) = lp(format!("{s}.l{l}.conv0"));
                let mid = relu64(&conv64(&x, w0, b0));
                let (w1, b1) = lp(format!("{s}.l{l}.conv1"));
                let out = relu64(&conv64(&mid, w1, b1));
                x = pool64(&out);
                levels.push(out);
            }
            skips.push(levels);
            pooled.push(x);
        }
        let (w0, b0) = lp("bottleneck.conv0".into());
        let (w1, b1) = lp("bottleneck.conv1".into());
        let mut x = relu64(&conv64(
            &relu64(&conv64(&cat64(&pooled[0], &pooled[1]), w0, b0)),
            w1,
            b1,
        ));
        for l in (0..depth).rev() {
            let cat = cat64(&cat64(&up64(&x), &skips[0][l]), &skips[1][l]);
            let (w, b) = lp(format!("dec.l{l}.conv"));
            x = relu64(&conv64(&cat, w, b));
        }
        let (w, b) = lp("head".into());
        conv64(&x, w, b)
    }

    fn to_a64(t: &Tensor) -> A64 {
        A64 {
            shape: [t.dim(0), t.dim(1), t.dim(2), t.dim(3)],
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    #[test]
    fn forward_matches_f64_reference() {
        let config = ModelConfig {
            depth: 2,
            base_channels: 2,
            seed: 42,
            ..ModelConfig::default()
        };
        let model = build_model(&config).unwrap();
        let pre = rand_tensor(&[2, 3, 8, 8], 100);
        let post = rand_tensor(&[2, 3, 8, 8], 101);
        let logits = model.predict(&pre, &post).unwrap();
        let want = ref_forward(&model, &to_a64(&pre), &to_a64(&post));
        assert_eq!(logits.len(), want.data.len());
        for (i, (&g, &e)) in logits.data().iter().zip(&want.data).enumerate() {
            assert!((g as f64 - e).abs() < 1e-4, "logit[{i}]: {g} vs {e}");
        }
    }

    /// End-to-end check of every parameter gradient against central finite
    /// differences of the f64 reference loss. Small network, but it walks
    /// both encoder streams, pooling, the bottleneck, skip concatenation,
    /// upsampling and the head — every backward code path at once.
    #[test]
    fn model_gradients_match_finite_differences() {
        let config = ModelConfig {
            depth: 2,
            base_channels: 2,
            seed: 42,
            ..ModelConfig::default()
        };
        let mut model = build_model(&config).unwrap();
        let pre = rand_tensor(&[2, 3, 8, 8], 100);
        let post = rand_tensor(&[2, 3, 8, 8], 101);
        let (pre64, post64) = (to_a64(&pre), to_a64(&post));
        let targets: Vec<u8> = (0..2 * 64).map(|i| ((i * 5) % 3) as u8).collect();
        let weights = [1.0f32, 2.0, 0.5];

        let logits = model.forward(&pre, &post, true).unwrap();
        let (_, dlogits) = ops::softmax_cross_entropy(&logits, &targets, &weights).unwrap();
        let grads = model.backward(&dlogits).unwrap();

        // The f64 reference loss has essentially no rounding floor, so eps
        // can be small; that keeps perturbations from stepping across ReLU
        // kinks, where one-sided analytic gradients and straddling central
        // differences legitimately disagree.
        let eps = 1e-4f32;
        let names: Vec<String> = model.layer_names().iter().map(|s| s.to_string()).collect();
        let (mut checked, mut max_rel) = (0usize, 0.0f64);
        for name in &names {
            let lg = &grads.by_layer[name];
            for (field, analytic) in [("w", lg.dw.clone()), ("b", lg.db.clone())] {
                for i in 0..analytic.len() {
                    let mut probe = |delta: f32| -> f64 {
                        let (w, b) = model.layer_params_mut(name).unwrap();
                        let v = if field == "w" { w } else { b };
                        let orig = v.data()[i];
                        v.data_mut()[i] = orig + delta;
                        let loss = ce64(
                            &ref_forward(&model, &pre64, &post64),
                            &targets,
                            &weights,
                        );
                        let (w, b) = model.layer_params_mut(name).unwrap();
                        let v = if field == "w" { w } else { b };
                        v.data_mut()[i] = orig;
                        loss
                    };
                    let fd = (probe(eps) - probe(-eps)) / (2.0 * eps as f64);
                    let a = analytic.data()[i] as f64;
                    let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                    assert!(
                        rel < 1e-2,
                        "{name} {field}[{i}]: analytic {a:.6e} vs fd {fd:.6e} (rel {rel:.3e})"
                    );
                    max_rel = max_rel.max(rel);
                    checked += 1;
                }
            }
        }
        assert_eq!(checked, model.param_count());
        assert!(max_rel < 1e-2, "worst relative error {max_rel:.3e}");
    }

    /// Cyclically shifting both inputs by a multiple of 2^depth keeps the
    /// pooling grid aligned, so interior logits must shift along with the
    /// input, bit for bit. Only pixels whose full receptive field stays
    /// clear of the zero-padded borders (in both the original and shifted
    /// frames) are comparable; the band below is the honest receptive-field
    /// radius of the architecture, summed conv by conv at each scale.
    #[test]
    fn logits_shift_with_a_pool_aligned_cyclic_translation() {
        let config = ModelConfig {
            depth: 2,
            base_channels: 2,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = build_model(&config).unwrap();

        let n = 64usize;
        let shift = 4usize; // 2^depth
        let pre = rand_tensor(&[1, 3, n, n], 21);
        let post = rand_tensor(&[1, 3, n, n], 22);
        let roll = |t: &Tensor| -> Tensor {
            let mut out = vec![0.0f32; t.len()];
            let d = t.data();
            for c in 0..3 {
                for y in 0..n {
                    for x in 0..n {
                        let (sy, sx) = ((y + n - shift) % n, (x + n - shift) % n);
                        out[(c * n + y) * n + x] = d[(c * n + sy) * n + sx];
                    }
                }
            }
            Tensor::from_vec(&[1, 3, n, n], out)
        };

        let base = model.predict(&pre, &post).unwrap();
        let moved = model.predict(&roll(&pre), &roll(&post)).unwrap();

        // Receptive-field radius in input pixels: two 3x3 convs per encoder
        // level (+scale each), pooling (+scale/... bounded by scale), two
        // bottleneck convs at scale 4, one decoder conv per level.
        // 2*1 + 1 + 2*2 + 2 + 2*4 + 2*2 + 1*1 = 22; round up for safety.
        let band = 24usize;
        assert!(n > 2 * (band + shift), "no interior left to compare");
        let mut compared = 0usize;
        for class in 0..3 {
            for y in band + shift..n - band {
                for x in band + shift..n - band {
                    let a = base.data()[(class * n + y - shift) * n + x - shift];
                    let b = moved.data()[(class * n + y) * n + x];
                    assert!(
                        a == b,
                        "class {class} at ({y},{x}): {a} vs {b} after shift"
                    );
                    compared += 1;
                }
            }
        }
        assert!(compared > 3 * 100, "interior too small: {compared}");
    }
}
