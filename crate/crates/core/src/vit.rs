//! Convolution-free segmenter: patch embedding, pre-norm transformer encoder,
//! per-token linear decoder.
//!
//! The three stages are exposed separately because token mixing happens
//! between patch embedding and the encoder, and feature dropout between the
//! encoder and the decoder. Positional embeddings are added at the start of
//! [`SegmenterModel::encode`], so exchanged tokens pick up the positional
//! embedding of the slot they land in.
//!
//! Everything works on batches: `B` images become `B·n` token rows, and
//! attention runs within each image's block of `n` rows.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Pixel value mapped to zero by [`SegmenterModel::patchify`].
pub const INPUT_CENTER: f64 = 0.5;
/// Scale applied after centering in [`SegmenterModel::patchify`].
pub const INPUT_SCALE: f64 = 4.0;

/// How per-token decoder outputs become per-pixel logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderHead {
    /// One `C`-vector per token, copied over the token's whole patch.
    Nearest,
    /// `patch_size² · C` outputs per token, one `C`-vector per pixel of the patch.
    Pixel,
}

impl DecoderHead {
    pub fn as_str(self) -> &'static str {
        match self {
            DecoderHead::Nearest => "nearest",
            DecoderHead::Pixel => "pixel",
        }
    }
}

impl std::str::FromStr for DecoderHead {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(DecoderHead::Nearest),
            "pixel" => Ok(DecoderHead::Pixel),
            other => Err(format!("expected `nearest` or `pixel`, got {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
    pub decoder: DecoderHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 4,
            decoder: DecoderHead::Pixel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "patch_size",
                format!("{} does not divide image_size {}", self.patch_size, self.image_size),
            ));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(
                "num_heads",
                format!("{} does not divide embed_dim {}", self.num_heads, self.embed_dim),
            ));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio", "must be positive"));
        }
        if !(2..=255).contains(&self.num_classes) {
            return Err(Error::config("num_classes", "must be in [2, 255]"));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    /// Decoder outputs per token, in units of `num_classes`.
    pub fn head_repeat(&self) -> usize {
        match self.decoder {
            DecoderHead::Nearest => 1,
            DecoderHead::Pixel => self.patch_size * self.patch_size,
        }
    }

    /// `key=value` pairs in a fixed order; the inverse of [`ModelConfig::set`].
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("mlp_ratio", format!("{:?}", self.mlp_ratio)),
            ("num_classes", self.num_classes.to_string()),
            ("decoder", self.decoder.as_str().to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse()
                .map_err(|e| Error::config(key, format!("cannot parse {value:?}: {e}")))
        }
        match key {
            "image_size" => self.image_size = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "num_layers" => self.num_layers = parse(key, value)?,
            "num_heads" => self.num_heads = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "num_classes" => self.num_classes = parse(key, value)?,
            "decoder" => self.decoder = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

// Parameter layout: three embedding tensors, `PER_BLOCK` per encoder block,
// then the decoder's four.
const PATCH_W: usize = 0;
const PATCH_B: usize = 1;
const POS: usize = 2;
const BLOCKS_START: usize = 3;
const PER_BLOCK: usize = 12;
const BLOCK_PARAMS: [&str; PER_BLOCK] = [
    "norm1.gamma",
    "norm1.beta",
    "attn.qkv.weight",
    "attn.qkv.bias",
    "attn.proj.weight",
    "attn.proj.bias",
    "norm2.gamma",
    "norm2.beta",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];
const DECODER_PARAMS: [&str; 4] = [
    "decoder.norm.gamma",
    "decoder.norm.beta",
    "decoder.weight",
    "decoder.bias",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SegmenterModel {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Model parameters registered on a tape, in layout order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created by the caller, one per parameter in layout order.
    pub fn from_vars(model: &SegmenterModel, vars: Vec<Var>) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(Error::Contract(format!(
                "model has {} parameters, got {} vars",
                model.params.len(),
                vars.len()
            )));
        }
        Ok(Self { vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn block(&self, layer: usize, slot: usize) -> Var {
        self.vars[BLOCKS_START + layer * PER_BLOCK + slot]
    }

    fn decoder(&self, slot: usize) -> Var {
        self.vars[self.vars.len() - DECODER_PARAMS.len() + slot]
    }
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let out = cfg.head_repeat() * cfg.num_classes;
    let mut shapes = vec![
        ("patch_embed.weight".to_string(), vec![cfg.patch_dim(), d]),
        ("patch_embed.bias".to_string(), vec![d]),
        ("pos_embed".to_string(), vec![cfg.n_tokens(), d]),
    ];
    for layer in 0..cfg.num_layers {
        let block_shapes = [
            vec![d],
            vec![d],
            vec![d, 3 * d],
            vec![3 * d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, h],
            vec![h],
            vec![h, d],
            vec![d],
        ];
        for (name, shape) in BLOCK_PARAMS.iter().zip(block_shapes) {
            shapes.push((format!("blocks.{layer}.{name}"), shape));
        }
    }
    let decoder_shapes = [vec![d], vec![d], vec![d, out], vec![out]];
    for (name, shape) in DECODER_PARAMS.iter().zip(decoder_shapes) {
        shapes.push((name.to_string(), shape));
    }
    shapes
}

impl SegmenterModel {
    /// Xavier-uniform linear weights, small normal positional embeddings,
    /// unit LayerNorm scales, zero biases.
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        let mut names = Vec::with_capacity(shapes.len());
        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = if name.ends_with("gamma") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with("weight") {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound))
            } else if name == "pos_embed" {
                // Irwin-Hall approximation of N(0, 0.02²) keeps the draw count fixed.
                Tensor::from_fn(&shape, |_| {
                    let s: f64 = (0..12).map(|_| rng.gen::<f64>()).sum();
                    (s - 6.0) * 0.02
                })
            } else {
                Tensor::zeros(&shape)
            };
            names.push(name);
            params.push(t);
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.clone(), requires_grad))
                .collect(),
        }
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: image.shape().to_vec(),
                rhs: vec![s, s, 3],
            });
        }
        Ok(())
    }

    /// Flattens each image into `n_tokens` rows of `patch²·3` values, each
    /// mapped to `(v − INPUT_CENTER) · INPUT_SCALE`.
    ///
    /// Patches are in row-major grid order; within a patch values run over
    /// (row, column, channel).
    pub fn patchify(&self, images: &[&Tensor]) -> Result<Tensor> {
        let p = self.config.patch_size;
        let side = self.config.image_size;
        let g = self.config.grid_side();
        let pd = self.config.patch_dim();
        let mut out = Vec::with_capacity(images.len() * self.config.n_tokens() * pd);
        for image in images {
            self.check_image(image)?;
            let px = image.data();
            for py in 0..g {
                for pxi in 0..g {
                    for dy in 0..p {
                        let start = ((py * p + dy) * side + pxi * p) * 3;
                        out.extend(px[start..start + p * 3].iter().map(|v| (v - INPUT_CENTER) * INPUT_SCALE));
                    }
                }
            }
        }
        Tensor::new(vec![images.len() * self.config.n_tokens(), pd], out)
    }

    /// Linear projection of every patch: `(B·n) × embed_dim` tokens, no
    /// positional embedding yet.
    pub fn patch_embed(&self, tape: &mut Tape, bound: &Bound, images: &[&Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Contract("patch_embed needs at least one image".into()));
        }
        let patches = tape.constant(self.patchify(images)?);
        let x = tape.matmul(patches, bound.vars[PATCH_W])?;
        tape.add_tiled(x, bound.vars[PATCH_B])
    }

    fn check_tokens(&self, tape: &Tape, tokens: Var, op: &'static str) -> Result<()> {
        let shape = tape.shape(tokens);
        let n = self.config.n_tokens();
        let ok = matches!(shape, [rows, d] if rows % n == 0 && *d == self.config.embed_dim);
        if !ok {
            return Err(Error::Shape {
                op,
                lhs: shape.to_vec(),
                rhs: vec![n, self.config.embed_dim],
            });
        }
        Ok(())
    }

    /// Adds positional embeddings and runs the transformer blocks.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Result<Var> {
        Ok(self.encode_probed(tape, bound, tokens)?.0)
    }

    /// [`SegmenterModel::encode`], also returning each layer's attention node
    /// so its probabilities can be read back with [`Tape::attention_probs`].
    pub fn encode_probed(&self, tape: &mut Tape, bound: &Bound, tokens: Var) -> Result<(Var, Vec<Var>)> {
        self.check_tokens(tape, tokens, "encode")?;
        let n = self.config.n_tokens();
        let mut x = tape.add_tiled(tokens, bound.vars[POS])?;
        let mut probes = Vec::with_capacity(self.config.num_layers);
        for layer in 0..self.config.num_layers {
            let p = |slot| bound.block(layer, slot);
            let h = tape.layer_norm(x, p(0), p(1), LAYER_NORM_EPS)?;
            let qkv = tape.matmul(h, p(2))?;
            let qkv = tape.add_tiled(qkv, p(3))?;
            let attn = tape.attention(qkv, self.config.num_heads, n)?;
            probes.push(attn);
            let a = tape.matmul(attn, p(4))?;
            let a = tape.add_tiled(a, p(5))?;
            x = tape.add(x, a)?;

            let h = tape.layer_norm(x, p(6), p(7), LAYER_NORM_EPS)?;
            let h = tape.matmul(h, p(8))?;
            let h = tape.add_tiled(h, p(9))?;
            let h = tape.gelu(h)?;
            let h = tape.matmul(h, p(10))?;
            let h = tape.add_tiled(h, p(11))?;
            x = tape.add(x, h)?;
        }
        Ok((x, probes))
    }

    /// Per-token logits `(B·n·k) × C` where `k` is [`ModelConfig::head_repeat`].
    pub fn decode_tokens(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        self.check_tokens(tape, features, "decode")?;
        let h = tape.layer_norm(features, bound.decoder(0), bound.decoder(1), LAYER_NORM_EPS)?;
        let h = tape.matmul(h, bound.decoder(2))?;
        let h = tape.add_tiled(h, bound.decoder(3))?;
        let rows = tape.shape(h)[0] * self.config.head_repeat();
        tape.reshape(h, &[rows, self.config.num_classes])
    }

    /// Per-pixel logits `(B·H·W) × C`, row-major over (image, y, x).
    pub fn decode(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let tokens = self.decode_tokens(tape, bound, features)?;
        let batch = tape.shape(features)[0] / self.config.n_tokens();
        let index = self.pixel_index(batch);
        tape.gather_rows(tokens, &index)
    }

    /// For each output pixel, the decoder row it reads from.
    pub fn pixel_index(&self, batch: usize) -> Vec<usize> {
        let side = self.config.image_size;
        let p = self.config.patch_size;
        let g = self.config.grid_side();
        let n = self.config.n_tokens();
        let k = self.config.head_repeat();
        let mut index = Vec::with_capacity(batch * side * side);
        for b in 0..batch {
            for y in 0..side {
                for x in 0..side {
                    let token = b * n + (y / p) * g + x / p;
                    let sub = if k == 1 { 0 } else { (y % p) * p + x % p };
                    index.push(token * k + sub);
                }
            }
        }
        index
    }

    /// `decode(dropout(encode(patch_embed(images))))`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: &[&Tensor],
        dropout_rate: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let tokens = self.patch_embed(tape, bound, images)?;
        let features = self.encode(tape, bound, tokens)?;
        let features = feature_dropout(tape, features, dropout_rate, rng)?;
        self.decode(tape, bound, features)
    }

    /// Gradient-free per-pixel logits for a batch, `(B·H·W) × C`.
    pub fn logits(&self, images: &[&Tensor]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let tokens = self.patch_embed(&mut tape, &bound, images)?;
        let features = self.encode(&mut tape, &bound, tokens)?;
        let logits = self.decode(&mut tape, &bound, features)?;
        Ok(tape.value(logits).clone())
    }

    /// Argmax class map per image; ties go to the lowest class index.
    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<LabelMap>> {
        let logits = self.logits(images)?;
        let side = self.config.image_size;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks_exact(side * side * c)
            .map(|img| LabelMap {
                height: side,
                width: side,
                data: img.chunks_exact(c).map(|row| argmax(row) as u8).collect(),
            })
            .collect())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.config.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        for (name, t) in self.names.iter().zip(&self.params) {
            let _ = writeln!(out, "param {name}");
            out.push_str(&t.dump());
        }
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Contract(format!("checkpoint: {msg}"));
        let mut config = ModelConfig::default();
        let mut lines = text.lines().peekable();
        while let Some(line) = lines.next_if(|l| !l.starts_with("param ")) {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            if !config.set(k.trim(), v.trim())? {
                return Err(bad(format!("unknown config key {k:?}")));
            }
        }
        config.validate()?;
        let expected = param_shapes(&config);
        let mut names = Vec::with_capacity(expected.len());
        let mut params = Vec::with_capacity(expected.len());
        for (name, shape) in expected {
            let header = lines
                .next()
                .ok_or_else(|| bad(format!("missing parameter {name}")))?;
            if header.strip_prefix("param ") != Some(name.as_str()) {
                return Err(bad(format!("expected `param {name}`, got {header:?}")));
            }
            let shape_line = lines.next().unwrap_or_default();
            let values = lines.next().unwrap_or_default();
            let t = Tensor::parse_dump(&format!("{shape_line}\n{values}"))?;
            if t.shape() != shape.as_slice() {
                return Err(bad(format!("{name} has shape {:?}, expected {shape:?}", t.shape())));
            }
            names.push(name);
            params.push(t);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content after last parameter".into()));
        }
        Ok(Self {
            config,
            names,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Inverted dropout: zero with probability `rate`, scale survivors by
/// `1 / (1 - rate)`. Returns `x` itself when `rate == 0`.
pub fn feature_dropout(tape: &mut Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout_rate", format!("must be in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(tape.shape(x), |_| if rng.gen::<f64>() < rate { 0.0 } else { keep });
    let mask = tape.constant(mask);
    tape.mul(x, mask)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            embed_dim: 16,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            num_classes: 3,
            decoder: DecoderHead::Nearest,
        }
    }

    fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(&[size, size, 3], |_| rng.gen())
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let cfg = ModelConfig {
            patch_size: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "patch_size"));
        let cfg = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { key, .. }) if key == "num_heads"));
    }

    #[test]
    fn default_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SegmenterModel::new(ModelConfig::default(), &mut rng).unwrap();
        let image = random_image(32, &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let tokens = model.patch_embed(&mut tape, &bound, &[&image]).unwrap();
        assert_eq!(tape.shape(tokens), &[16, 64]);
        let features = model.encode(&mut tape, &bound, tokens).unwrap();
        assert_eq!(tape.shape(features), &[16, 64]);
        let logits = model.decode(&mut tape, &bound, features).unwrap();
        assert_eq!(tape.shape(logits), &[32 * 32, 4]);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let a = SegmenterModel::new(small(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = SegmenterModel::new(small(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.num_parameters(), b.num_parameters());
        assert_ne!(a.params(), b.params());
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let model = SegmenterModel::new(small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = Tensor::zeros(&[8, 8, 3]);
        assert!(matches!(
            model.patch_embed(&mut tape, &bound, &[&image]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn mid_gray_image_embeds_to_bias() {
        let model = SegmenterModel::new(small(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let image = Tensor::full(&[16, 16, 3], INPUT_CENTER);
        let tokens = model.patch_embed(&mut tape, &bound, &[&image]).unwrap();
        let bias = model.param("patch_embed.bias").unwrap();
        for row in tape.value(tokens).data().chunks_exact(bias.numel()) {
            assert_eq!(row, bias.data());
        }
    }

    #[test]
    fn zeroed_blocks_reduce_encode_to_positional_addition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = SegmenterModel::new(small(), &mut rng).unwrap();
        for layer in 0..2 {
            for name in ["attn.proj.weight", "attn.proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
                let p = model.param_mut(&format!("blocks.{layer}.{name}")).unwrap();
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let image = random_image(16, &mut rng);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let tokens = model.patch_embed(&mut tape, &bound, &[&image]).unwrap();
        let features = model.encode(&mut tape, &bound, tokens).unwrap();
        let pos = model.param("pos_embed").unwrap();
        let expected: Vec<f64> = tape
            .value(tokens)
            .data()
            .iter()
            .zip(pos.data())
            .map(|(t, p)| t + p)
            .collect();
        assert_eq!(tape.value(features).data(), expected.as_slice());
    }

    #[test]
    fn nearest_decoder_shares_logits_within_a_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = SegmenterModel::new(small(), &mut rng).unwrap();
        let image = random_image(16, &mut rng);
        let logits = model.logits(&[&image]).unwrap();
        let c = 3;
        for y in 0..16 {
            for x in 0..16 {
                let anchor = ((y / 4 * 4) * 16 + x / 4 * 4) * c;
                let here = (y * 16 + x) * c;
                assert_eq!(logits.data()[here..here + c], logits.data()[anchor..anchor + c]);
            }
        }
    }

    #[test]
    fn zero_decoder_weight_yields_bias_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = SegmenterModel::new(small(), &mut rng).unwrap();
        model.param_mut("decoder.weight").unwrap().data_mut().fill(0.0);
        model
            .param_mut("decoder.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.5, -1.0, 2.0]);
        let image = random_image(16, &mut rng);
        let logits = model.logits(&[&image]).unwrap();
        for row in logits.data().chunks_exact(3) {
            assert_eq!(row, &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn pixel_head_gives_each_pixel_its_own_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ModelConfig {
            decoder: DecoderHead::Pixel,
            ..small()
        };
        let model = SegmenterModel::new(cfg, &mut rng).unwrap();
        assert_eq!(model.param("decoder.weight").unwrap().shape(), &[16, 16 * 3]);
        let image = random_image(16, &mut rng);
        let logits = model.logits(&[&image]).unwrap();
        assert_eq!(logits.shape(), &[256, 3]);
        assert_ne!(logits.row(0), logits.row(1));
    }

    #[test]
    fn batched_forward_matches_single_image_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = SegmenterModel::new(small(), &mut rng).unwrap();
        let a = random_image(16, &mut rng);
        let b = random_image(16, &mut rng);
        let both = model.logits(&[&a, &b]).unwrap();
        let only_b = model.logits(&[&b]).unwrap();
        assert!(both.data()[256 * 3..]
            .iter()
            .zip(only_b.data())
            .all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn dropout_rate_zero_is_identity_and_rate_one_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 4], |i| i as f64));
        assert_eq!(feature_dropout(&mut tape, x, 0.0, &mut rng).unwrap(), x);
        assert!(matches!(
            feature_dropout(&mut tape, x, 1.0, &mut rng),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[8, 8], 1.0));
            let y = feature_dropout(&mut tape, x, 0.3, &mut rng).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trips() {
        let model = SegmenterModel::new(small(), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let text = model.to_checkpoint_string();
        assert!(text.starts_with("image_size=16\n"));
        assert_eq!(SegmenterModel::from_checkpoint_str(&text).unwrap(), model);
        let broken = text.replacen("param pos_embed", "param bogus", 1);
        assert!(SegmenterModel::from_checkpoint_str(&broken).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.25; 4]), 0);
    }
}
