//! The fusion network: backbone, ML-decoder head and multi-view encoder.

mod checkpoint;
mod config;
mod init;
mod layers;
mod posenc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_bytes, save_checkpoint, checkpoint_bytes, Dtype};
pub use config::ModelConfig;
pub use init::{init_params, ParamGroup};
pub use layers::ForwardMode;
pub use posenc::positional_encoding_2d;

use layers::{attention, feed_forward, layer_norm, linear, maybe_drop_path};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, StreamKey, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewLabel {
    Frontal,
    Lateral,
    Unknown,
}

impl std::str::FromStr for ViewLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frontal" => Ok(Self::Frontal),
            "lateral" => Ok(Self::Lateral),
            "unknown" => Ok(Self::Unknown),
            other => Err(Error::Usage(format!("unknown view label {other:?}"))),
        }
    }
}

/// One view: pixels `[H0, W0, C0]` and its acquisition label.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub pixels: Tensor,
    pub view: ViewLabel,
}

impl ViewImage {
    pub fn new(pixels: Tensor, view: ViewLabel) -> Self {
        Self { pixels, view }
    }

    pub fn flipped(&self) -> Result<Self> {
        Ok(Self {
            pixels: self.pixels.flip_horizontal()?,
            view: self.view,
        })
    }
}

/// Backbone outputs of one study, each `[H, W, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapSet {
    maps: Vec<Tensor>,
}

impl FeatureMapSet {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Contract("a feature map set needs at least one view".into()))?;
        if first.rank() != 3 {
            return Err(Error::Contract(format!(
                "feature maps must be [H, W, D], got {:?}",
                first.shape()
            )));
        }
        if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
            return Err(Error::Contract(format!(
                "feature maps disagree in shape: {:?} vs {:?}",
                first.shape(),
                m.shape()
            )));
        }
        Ok(Self { maps })
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Flattened fusion input of `N·H·W` tokens.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub real_views: usize,
    /// `slot_order[k]` is the input view placed in slot `k`.
    pub slot_order: Vec<usize>,
}

/// Forward functions bound to one configuration.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    /// Positional grid flattened to `[H·W, D]`.
    pos: Tensor,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pos = positional_encoding_2d(cfg.feat_h, cfg.feat_w, cfg.dim, cfg.pos_temperature)?
            .reshaped(&[cfg.feat_h * cfg.feat_w, cfg.dim])?;
        Ok(Self { cfg, pos })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn init_params(&self, seed: u64, groups: &[ParamGroup]) -> Result<ParamStore> {
        init_params(&self.cfg, seed, groups)
    }

    /// Feature map `[H, W, D]` of one image.
    pub fn backbone(&self, tape: &Tape, store: &ParamStore, image: &Tensor, mode: &ForwardMode) -> Result<Var> {
        let c = &self.cfg;
        let expect = [c.image_h, c.image_w, c.image_c];
        if image.shape() != expect {
            return Err(Error::Config(format!(
                "image extents {:?} do not match configured {:?}",
                image.shape(),
                expect
            )));
        }
        let (mut h, mut w) = (c.image_h, c.image_w);
        let mut x = tape.constant(image.clone());
        let stages = c.stage_widths.len();
        for (i, (&width, &stride)) in c.stage_widths.iter().zip(&c.stage_strides).enumerate() {
            let p = format!("backbone.stage{i}");
            let patches = tape.im2col(x, 3, stride, 1)?;
            let y = linear(tape, store, &format!("{p}.down"), patches)?;
            let y = tape.gelu(layer_norm(tape, store, &format!("{p}.norm"), y)?)?;
            let n = layer_norm(tape, store, &format!("{p}.block.norm"), y)?;
            let branch = feed_forward(tape, store, &format!("{p}.block"), n, mode)?;
            let branch = maybe_drop_path(tape, branch, mode.layer_drop(i, stages), mode.key.child(&p))?;
            let y = tape.add(y, branch)?;
            h = (h - 1) / stride + 1;
            w = (w - 1) / stride + 1;
            x = tape.reshape(y, &[h, w, width])?;
        }
        let last = *c.stage_widths.last().expect("validated");
        let flat = tape.reshape(x, &[h * w, last])?;
        let out = linear(tape, store, "backbone.proj", flat)?;
        tape.reshape(out, &[h, w, c.dim])
    }

    /// Gradient-free backbone evaluation.
    pub fn features(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let v = self.backbone(&tape, store, image, &ForwardMode::eval())?;
        Ok(tape.value(v))
    }

    /// ML-decoder: class queries attend to `tokens: [T, D]`, giving `[C]` logits.
    pub fn decoder(&self, tape: &Tape, store: &ParamStore, tokens: Var, mode: &ForwardMode) -> Result<Var> {
        let q0 = tape.param(store, "head.query")?;
        let kv = layer_norm(tape, store, "head.norm_kv", tokens)?;
        let qn = layer_norm(tape, store, "head.norm_q", q0)?;
        let a = tape.add(q0, attention(tape, store, "head.attn", qn, kv, self.cfg.decoder_heads)?)?;
        let n = layer_norm(tape, store, "head.ffn_norm", a)?;
        let b = tape.add(a, feed_forward(tape, store, "head.ffn", n, mode)?)?;
        let w = tape.param(store, "head.proj.w")?;
        let bias = tape.param(store, "head.proj.b")?;
        tape.add(tape.sum(tape.mul(b, w)?, Some(1))?, bias)
    }

    /// Stage-1 path: backbone, positional encoding, decoder.
    pub fn single_view_logits(&self, tape: &Tape, store: &ParamStore, image: &Tensor, mode: &ForwardMode) -> Result<Var> {
        let f = self.backbone(tape, store, image, mode)?;
        let tokens = tape.reshape(f, &[self.cfg.tokens_per_view(), self.cfg.dim])?;
        let tokens = tape.add(tokens, tape.constant(self.pos.clone()))?;
        self.decoder(tape, store, tokens, mode)
    }

    /// Place real views (optionally shuffled) and pad tokens into `N` slots.
    pub fn assemble_sequence(
        &self,
        tape: &Tape,
        store: &ParamStore,
        features: &[Var],
        shuffle: Option<StreamKey>,
    ) -> Result<TokenSequence> {
        let c = &self.cfg;
        let n0 = features.len();
        if n0 == 0 {
            return Err(Error::Contract("assemble_sequence needs at least one view".into()));
        }
        if n0 > c.max_views {
            return Err(Error::Contract(format!(
                "{n0} views reached assemble_sequence but N = {}; subsample first",
                c.max_views
            )));
        }
        let hw = c.tokens_per_view();
        let mut order: Vec<usize> = (0..n0).collect();
        if let Some(key) = shuffle {
            order.shuffle(&mut key.rng());
        }
        let mut slots = Vec::with_capacity(c.max_views);
        for &i in &order {
            let shape = tape.shape(features[i]);
            if shape != [c.feat_h, c.feat_w, c.dim] {
                return Err(Error::Contract(format!(
                    "feature map {i} has shape {shape:?}, expected [{}, {}, {}]",
                    c.feat_h, c.feat_w, c.dim
                )));
            }
            slots.push(tape.reshape(features[i], &[1, hw, c.dim])?);
        }
        if n0 < c.max_views {
            let pad = tape.reshape(tape.param(store, "fusion.pad")?, &[1, 1, c.dim])?;
            let pad = tape.add(tape.constant(Tensor::zeros(&[c.max_views - n0, hw, c.dim])), pad)?;
            slots.push(pad);
        }
        let mut x = tape.concat(&slots, 0)?;
        x = tape.add(x, tape.constant(self.pos.clone()))?;
        if c.use_segment {
            let seg = tape.reshape(tape.param(store, "fusion.segment")?, &[c.max_views, 1, c.dim])?;
            x = tape.add(x, seg)?;
        }
        Ok(TokenSequence {
            tokens: tape.reshape(x, &[c.max_views * hw, c.dim])?,
            real_views: n0,
            slot_order: order,
        })
    }

    /// Pre-norm transformer encoder over `[T, D]` tokens.
    pub fn encoder(&self, tape: &Tape, store: &ParamStore, tokens: Var, mode: &ForwardMode) -> Result<Var> {
        let layers = self.cfg.encoder_layers;
        let mut x = tokens;
        for l in 0..layers {
            let p = format!("fusion.layer{l}");
            let drop = mode.layer_drop(l, layers);
            let n = layer_norm(tape, store, &format!("{p}.norm1"), x)?;
            let a = attention(tape, store, &format!("{p}.attn"), n, n, self.cfg.heads)?;
            x = tape.add(x, maybe_drop_path(tape, a, drop, mode.key.child(&format!("{p}.attn")))?)?;
            let n = layer_norm(tape, store, &format!("{p}.norm2"), x)?;
            let f = feed_forward(tape, store, &format!("{p}.ffn"), n, mode)?;
            x = tape.add(x, maybe_drop_path(tape, f, drop, mode.key.child(&format!("{p}.ffn")))?)?;
        }
        Ok(x)
    }

    /// Fusion logits from feature maps already on the tape.
    pub fn fusion_logits_vars(&self, tape: &Tape, store: &ParamStore, features: &[Var], mode: &ForwardMode) -> Result<Var> {
        let shuffle = (mode.training && mode.shuffle).then(|| mode.key.child("shuffle"));
        let seq = self.assemble_sequence(tape, store, features, shuffle)?;
        let enc = self.encoder(tape, store, seq.tokens, mode)?;
        self.decoder(tape, store, enc, mode)
    }

    /// Fusion logits from precomputed (frozen) feature maps.
    pub fn fusion_logits(&self, tape: &Tape, store: &ParamStore, features: &FeatureMapSet, mode: &ForwardMode) -> Result<Var> {
        let vars: Vec<Var> = features.maps().iter().map(|m| tape.constant(m.clone())).collect();
        self.fusion_logits_vars(tape, store, &vars, mode)
    }

    /// Fusion logits with the backbone evaluated on the tape. Backbone
    /// parameters marked non-trainable receive no gradient.
    pub fn fusion_logits_images(&self, tape: &Tape, store: &ParamStore, images: &[Tensor], mode: &ForwardMode) -> Result<Var> {
        let eval = ForwardMode { training: false, ..*mode };
        let vars = images
            .iter()
            .map(|im| self.backbone(tape, store, im, &eval))
            .collect::<Result<Vec<_>>>()?;
        self.fusion_logits_vars(tape, store, &vars, mode)
    }

    /// Global-average-pooled feature `[D]` of one image.
    pub fn gap_vector(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        gap(&self.features(store, image)?)
    }

    /// Single-view baseline head: GAP then affine.
    pub fn gap_logits(&self, tape: &Tape, store: &ParamStore, image: &Tensor, mode: &ForwardMode) -> Result<Var> {
        let f = self.backbone(tape, store, image, mode)?;
        let flat = tape.reshape(f, &[self.cfg.tokens_per_view(), self.cfg.dim])?;
        let pooled = tape.reshape(tape.mean(flat, Some(0))?, &[1, self.cfg.dim])?;
        let out = linear(tape, store, "gap_head", pooled)?;
        tape.reshape(out, &[self.cfg.classes])
    }

    /// Concat baseline head over per-view GAP vectors placed in `N` slots.
    pub fn concat_logits(&self, tape: &Tape, store: &ParamStore, gap_vectors: &[Tensor]) -> Result<Var> {
        let c = &self.cfg;
        if gap_vectors.is_empty() || gap_vectors.len() > c.max_views {
            return Err(Error::Contract(format!(
                "concat head takes 1..={} views, got {}",
                c.max_views,
                gap_vectors.len()
            )));
        }
        let mut flat = Vec::with_capacity(c.max_views * c.dim);
        for v in gap_vectors {
            if v.shape() != [c.dim] {
                return Err(Error::Contract(format!("GAP vector shape {:?}, expected [{}]", v.shape(), c.dim)));
            }
            flat.extend_from_slice(v.data());
        }
        flat.resize(c.max_views * c.dim, 0.0);
        let x = tape.constant(Tensor::new(&[1, c.max_views * c.dim], flat)?);
        let out = linear(tape, store, "concat_head", x)?;
        tape.reshape(out, &[c.classes])
    }

    /// Sigmoid probabilities of the single-view path, optionally flip-averaged.
    pub fn predict_single(&self, store: &ParamStore, image: &Tensor, tta: bool) -> Result<Vec<f64>> {
        let run = |im: &Tensor| -> Result<Vec<f64>> {
            let tape = Tape::no_grad();
            let v = self.single_view_logits(&tape, store, im, &ForwardMode::eval())?;
            Ok(sigmoid_vec(&tape.value(v)))
        };
        let p = run(image)?;
        if !tta {
            return Ok(p);
        }
        Ok(mean2(&p, &run(&image.flip_horizontal()?)?))
    }

    /// Sigmoid probabilities of the fusion path from precomputed features.
    pub fn predict_fusion(&self, store: &ParamStore, features: &FeatureMapSet) -> Result<Vec<f64>> {
        let tape = Tape::no_grad();
        let v = self.fusion_logits(&tape, store, features, &ForwardMode::eval())?;
        Ok(sigmoid_vec(&tape.value(v)))
    }

    /// Mean of fusion probabilities over the original and the horizontally
    /// flipped version of every view.
    pub fn tta_predict(&self, store: &ParamStore, views: &[ViewImage]) -> Result<Vec<f64>> {
        let (orig, flip) = self.study_features(store, views)?;
        Ok(mean2(&self.predict_fusion(store, &orig)?, &self.predict_fusion(store, &flip)?))
    }

    /// Backbone features for each view and its mirror image.
    pub fn study_features(&self, store: &ParamStore, views: &[ViewImage]) -> Result<(FeatureMapSet, FeatureMapSet)> {
        let mut orig = Vec::with_capacity(views.len());
        let mut flip = Vec::with_capacity(views.len());
        for v in views {
            orig.push(self.features(store, &v.pixels)?);
            flip.push(self.features(store, &v.pixels.flip_horizontal()?)?);
        }
        Ok((FeatureMapSet::new(orig)?, FeatureMapSet::new(flip)?))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid_vec(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&x| sigmoid(x)).collect()
}

fn mean2(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Mean over the spatial axes of an `[H, W, D]` map.
pub fn gap(map: &Tensor) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(Error::Contract(format!("GAP expects [H, W, D], got {:?}", map.shape())));
    }
    let d = map.shape()[2];
    let n = map.numel() / d;
    let mut out = vec![0.0; d];
    for row in map.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= n as f64;
    }
    Tensor::new(&[d], out)
}
