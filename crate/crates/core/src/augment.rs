//! Image-level and token-level augmentation.
//!
//! Weak augmentation is geometric (flip + resized crop) and is applied to the
//! label too. Strong augmentation is photometric only: the student sees
//! `strong(weak(x))` and is scored pixel-by-pixel against pseudo-labels
//! computed on `weak(x)`, so the strong step must not move pixels.
//!
//! Token mixing swaps a masked subset of rows between two token matrices
//! right after patch embedding and swaps the unlabeled stream back after the
//! encoder. CutMix and ClassMix are the pixel-level baselines.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary per-token mask; `true` marks a token that is exchanged.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    bits: Vec<bool>,
}

impl TokenMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    pub fn zeros(n: usize) -> Self {
        Self { bits: vec![false; n] }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of exchanged tokens.
    pub fn swap_ratio(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.bits.len() as f64
        }
    }

    /// Per-image masks stacked in batch order.
    pub fn concat(masks: &[TokenMask]) -> Self {
        Self {
            bits: masks.iter().flat_map(|m| m.bits.iter().copied()).collect(),
        }
    }

    /// `0`/`1` characters, one per token.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

impl FromStr for TokenMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Contract(format!("token mask character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config("swap_ratio", format!("must be in [0, 1], got {ratio}")));
    }
    Ok(())
}

/// Exactly `round(swap_ratio · n)` ones at uniformly chosen positions.
pub fn gen_token_mask(n_tokens: usize, swap_ratio: f64, rng: &mut ChaCha8Rng) -> Result<TokenMask> {
    check_ratio(swap_ratio)?;
    let k = (swap_ratio * n_tokens as f64).round() as usize;
    let mut bits = vec![false; n_tokens];
    for i in sample(rng, n_tokens, k) {
        bits[i] = true;
    }
    Ok(TokenMask { bits })
}

/// Block-structured mask: `round(swap_ratio · n_blocks)` whole
/// `block_size × block_size` token blocks chosen uniformly.
pub fn tokenmix_star_mask(
    tokens_per_side: usize,
    block_size: usize,
    swap_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TokenMask> {
    check_ratio(swap_ratio)?;
    if block_size == 0 || !tokens_per_side.is_multiple_of(block_size) {
        return Err(Error::config(
            "star_block_size",
            format!("{block_size} does not divide {tokens_per_side} tokens per side"),
        ));
    }
    let blocks_per_side = tokens_per_side / block_size;
    let n_blocks = blocks_per_side * blocks_per_side;
    let k = (swap_ratio * n_blocks as f64).round() as usize;
    let mut bits = vec![false; tokens_per_side * tokens_per_side];
    for b in sample(rng, n_blocks, k) {
        let (by, bx) = (b / blocks_per_side, b % blocks_per_side);
        for dy in 0..block_size {
            for dx in 0..block_size {
                bits[(by * block_size + dy) * tokens_per_side + bx * block_size + dx] = true;
            }
        }
    }
    Ok(TokenMask { bits })
}

fn check_mask(op: &'static str, a: &Tensor, b: &Tensor, mask: &TokenMask) -> Result<()> {
    if a.shape() != b.shape() || mask.len() != a.rows() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![b.rows(), mask.len()],
        });
    }
    Ok(())
}

fn select_rows(keep: &Tensor, take: &Tensor, mask: &TokenMask) -> Tensor {
    let d = keep.cols();
    let mut out = keep.clone();
    for (r, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(take.row(r));
    }
    out
}

/// Simultaneous exchange of masked rows, both outputs computed from the
/// pre-exchange inputs.
pub fn token_exchange(g_u: &Tensor, g_l: &Tensor, mask: &TokenMask) -> Result<(Tensor, Tensor)> {
    check_mask("token_exchange", g_u, g_l, mask)?;
    Ok((select_rows(g_u, g_l, mask), select_rows(g_l, g_u, mask)))
}

/// Restores the masked rows of the unlabeled stream from the labeled stream.
pub fn token_swap_back(f_u: &Tensor, f_l: &Tensor, mask: &TokenMask) -> Result<Tensor> {
    check_mask("token_swap_back", f_u, f_l, mask)?;
    Ok(select_rows(f_u, f_l, mask))
}

/// [`token_exchange`] recorded on a tape.
pub fn token_exchange_var(tape: &mut Tape, g_u: Var, g_l: Var, mask: &TokenMask) -> Result<(Var, Var)> {
    let u = tape.mix_rows(g_u, g_l, mask.bits())?;
    let l = tape.mix_rows(g_l, g_u, mask.bits())?;
    Ok((u, l))
}

/// [`token_swap_back`] recorded on a tape.
pub fn token_swap_back_var(tape: &mut Tape, f_u: Var, f_l: Var, mask: &TokenMask) -> Result<Var> {
    tape.mix_rows(f_u, f_l, mask.bits())
}

fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [h, w, 3] => Ok((*h, *w)),
        s => Err(Error::Shape {
            op: "augment",
            lhs: s.to_vec(),
            rhs: vec![0, 0, 3],
        }),
    }
}

/// Geometry of one weak augmentation: a square crop, resized back to the
/// full frame, optionally mirrored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakParams {
    pub flip: bool,
    pub crop: usize,
    pub x0: usize,
    pub y0: usize,
}

pub const CROP_SCALE: (f64, f64) = (0.8, 1.0);

impl WeakParams {
    pub fn identity(size: usize) -> Self {
        Self {
            flip: false,
            crop: size,
            x0: 0,
            y0: 0,
        }
    }

    /// Flip with probability 0.5, crop side `scale · size` with scale
    /// uniform in [`CROP_SCALE`], crop position uniform.
    pub fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let flip = rng.gen_bool(0.5);
        let scale = rng.gen_range(CROP_SCALE.0..=CROP_SCALE.1);
        let crop = ((scale * size as f64).round() as usize).clamp(1, size);
        let x0 = rng.gen_range(0..=size - crop);
        let y0 = rng.gen_range(0..=size - crop);
        Self { flip, crop, x0, y0 }
    }

    fn source_x(&self, x: usize, size: usize) -> usize {
        if self.flip {
            size - 1 - x
        } else {
            x
        }
    }

    /// Bilinear resample of the crop.
    pub fn apply_image(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(image)?;
        if h != w || self.crop > h || self.x0 + self.crop > w || self.y0 + self.crop > h {
            return Err(Error::Shape {
                op: "weak_augment",
                lhs: image.shape().to_vec(),
                rhs: vec![self.crop, self.x0, self.y0],
            });
        }
        let size = h;
        let ratio = self.crop as f64 / size as f64;
        let coord = |d: usize| {
            let u = ((d as f64 + 0.5) * ratio - 0.5).clamp(0.0, (self.crop - 1) as f64);
            let i0 = u.floor() as usize;
            let i1 = (i0 + 1).min(self.crop - 1);
            (i0, i1, u - i0 as f64)
        };
        let src = image.data();
        let mut out = vec![0.0; src.len()];
        for y in 0..size {
            let (y0, y1, fy) = coord(y);
            for x in 0..size {
                let (x0, x1, fx) = coord(self.source_x(x, size));
                for c in 0..3 {
                    let at = |yy: usize, xx: usize| src[((self.y0 + yy) * size + self.x0 + xx) * 3 + c];
                    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                    let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                    out[(y * size + x) * 3 + c] = (1.0 - fy) * top + fy * bottom;
                }
            }
        }
        Tensor::new(image.shape().to_vec(), out)
    }

    /// Nearest-neighbor resample of the crop.
    pub fn apply_label(&self, label: &LabelMap) -> Result<LabelMap> {
        let size = label.height;
        if label.width != size || self.x0 + self.crop > size || self.y0 + self.crop > size {
            return Err(Error::Shape {
                op: "weak_augment",
                lhs: vec![label.height, label.width],
                rhs: vec![self.crop, self.x0, self.y0],
            });
        }
        let ratio = self.crop as f64 / size as f64;
        let nearest = |d: usize| (((d as f64 + 0.5) * ratio).floor() as usize).min(self.crop - 1);
        let mut data = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let sx = nearest(self.source_x(x, size));
                data.push(label.get(self.y0 + nearest(y), self.x0 + sx));
            }
        }
        Ok(LabelMap {
            height: size,
            width: size,
            data,
        })
    }
}

/// Random horizontal flip and random resized crop; the label, when given,
/// follows the same geometry.
pub fn weak_augment(
    image: &Tensor,
    label: Option<&LabelMap>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<LabelMap>)> {
    let (h, _) = check_image(image)?;
    let params = WeakParams::sample(rng, h);
    let label = label.map(|l| params.apply_label(l)).transpose()?;
    Ok((params.apply_image(image)?, label))
}

/// Which photometric operations a strong augmentation may draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrongConfig {
    pub color: bool,
    pub shuffle: bool,
    pub blur: bool,
    pub grayscale: bool,
}

impl StrongConfig {
    pub const ALL: Self = Self {
        color: true,
        shuffle: true,
        blur: true,
        grayscale: true,
    };
    pub const NONE: Self = Self {
        color: false,
        shuffle: false,
        blur: false,
        grayscale: false,
    };
}

impl Default for StrongConfig {
    fn default() -> Self {
        Self::ALL
    }
}

pub const JITTER_RANGE: (f64, f64) = (0.5, 1.5);
pub const P_SHUFFLE: f64 = 0.2;
pub const P_BLUR: f64 = 0.5;
pub const P_GRAYSCALE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrongParams {
    pub brightness: f64,
    pub contrast: f64,
    pub channel_order: Option<[usize; 3]>,
    pub grayscale: bool,
    pub blur: bool,
}

impl StrongParams {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        channel_order: None,
        grayscale: false,
        blur: false,
    };

    pub fn sample(rng: &mut ChaCha8Rng, cfg: StrongConfig) -> Self {
        let mut p = Self::IDENTITY;
        if cfg.color {
            p.brightness = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
            p.contrast = rng.gen_range(JITTER_RANGE.0..=JITTER_RANGE.1);
        }
        if cfg.shuffle && rng.gen_bool(P_SHUFFLE) {
            let mut order = [0, 1, 2];
            order.shuffle(rng);
            p.channel_order = Some(order);
        }
        if cfg.grayscale {
            p.grayscale = rng.gen_bool(P_GRAYSCALE);
        }
        if cfg.blur {
            p.blur = rng.gen_bool(P_BLUR);
        }
        p
    }

    /// Brightness, contrast, channel shuffle, grayscale, 3×3 box blur, clamp
    /// to `[0, 1]`. Every step is per-pixel or a symmetric local average, so
    /// pixel positions are unchanged.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w) = check_image(image)?;
        if *self == Self::IDENTITY {
            return Ok(image.clone());
        }
        let mut px: Vec<f64> = image.data().iter().map(|v| v * self.brightness).collect();
        if self.contrast != 1.0 {
            let mean = px.iter().sum::<f64>() / px.len() as f64;
            px.iter_mut().for_each(|v| *v = (*v - mean) * self.contrast + mean);
        }
        if let Some(order) = self.channel_order {
            for rgb in px.chunks_exact_mut(3) {
                let src = [rgb[0], rgb[1], rgb[2]];
                for c in 0..3 {
                    rgb[c] = src[order[c]];
                }
            }
        }
        if self.grayscale {
            for rgb in px.chunks_exact_mut(3) {
                let y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
                rgb.fill(y);
            }
        }
        if self.blur {
            px = box_blur3(&px, h, w);
        }
        px.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Tensor::new(image.shape().to_vec(), px)
    }
}

fn box_blur3(px: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; px.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut sum = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        sum += px[(yy * w + xx) * 3 + c];
                        n += 1.0;
                    }
                }
                out[(y * w + x) * 3 + c] = sum / n;
            }
        }
    }
    out
}

pub fn strong_augment(image: &Tensor, cfg: StrongConfig, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    StrongParams::sample(rng, cfg).apply(image)
}

/// Per-pixel source selection shared by CutMix and ClassMix; `true` means
/// the pixel comes from the second image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub from_b: Vec<bool>,
}

impl PixelMask {
    pub fn count(&self) -> usize {
        self.from_b.iter().filter(|&&b| b).count()
    }

    pub fn mix_image(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() || a.shape() != [self.height, self.width, 3] {
            return Err(Error::Shape {
                op: "pixel_mix",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = a.clone();
        for (p, _) in self.from_b.iter().enumerate().filter(|(_, &f)| f) {
            out.data_mut()[p * 3..p * 3 + 3].copy_from_slice(&b.data()[p * 3..p * 3 + 3]);
        }
        Ok(out)
    }

    pub fn mix_values<T: Copy>(&self, a: &[T], b: &[T]) -> Result<Vec<T>> {
        if a.len() != self.from_b.len() || b.len() != a.len() {
            return Err(Error::Shape {
                op: "pixel_mix",
                lhs: vec![a.len()],
                rhs: vec![b.len()],
            });
        }
        Ok(self
            .from_b
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&f, (&x, &y))| if f { y } else { x })
            .collect())
    }

    pub fn mix_label(&self, a: &LabelMap, b: &LabelMap) -> Result<LabelMap> {
        Ok(LabelMap {
            height: self.height,
            width: self.width,
            data: self.mix_values(&a.data, &b.data)?,
        })
    }
}

pub const CUTMIX_AREA: (f64, f64) = (0.2, 0.5);

/// Axis-aligned box pasted from the second image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl CutBox {
    /// A box covering `area_ratio` of the frame (up to rounding), aspect
    /// ratio close to square, placed uniformly.
    pub fn with_ratio(area_ratio: f64, size: usize, rng: &mut ChaCha8Rng) -> Self {
        let total = (size * size) as f64;
        let w = ((area_ratio.sqrt() * size as f64).round() as usize).min(size);
        let h = if w == 0 {
            0
        } else {
            ((area_ratio * total / w as f64).round() as usize).min(size)
        };
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        Self { x0, y0, w, h }
    }

    pub fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let ratio = rng.gen_range(CUTMIX_AREA.0..=CUTMIX_AREA.1);
        Self::with_ratio(ratio, size, rng)
    }

    pub fn mask(&self, height: usize, width: usize) -> PixelMask {
        let from_b = (0..height * width)
            .map(|p| {
                let (y, x) = (p / width, p % width);
                x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
            })
            .collect();
        PixelMask { height, width, from_b }
    }
}

pub fn cutmix(
    image_a: &Tensor,
    label_a: &LabelMap,
    image_b: &Tensor,
    label_b: &LabelMap,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LabelMap)> {
    let (h, w) = check_image(image_a)?;
    let mask = CutBox::sample(rng, h.min(w)).mask(h, w);
    Ok((mask.mix_image(image_a, image_b)?, mask.mix_label(label_a, label_b)?))
}

/// `ceil(k / 2)` of the `k` classes present in `pseudo_b`, chosen uniformly.
pub fn classmix_classes(pseudo_b: &LabelMap, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let hist = pseudo_b.histogram(0);
    let present: Vec<u8> = (0..hist.len()).filter(|&c| hist[c] > 0).map(|c| c as u8).collect();
    let k = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = sample(rng, present.len(), k).into_iter().map(|i| present[i]).collect();
    chosen.sort_unstable();
    chosen
}

pub fn classmix_mask(pseudo_b: &LabelMap, classes: &[u8]) -> PixelMask {
    PixelMask {
        height: pseudo_b.height,
        width: pseudo_b.width,
        from_b: pseudo_b.data.iter().map(|c| classes.contains(c)).collect(),
    }
}

pub fn classmix(
    image_a: &Tensor,
    label_a: &LabelMap,
    image_b: &Tensor,
    pseudo_b: &LabelMap,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, LabelMap)> {
    let classes = classmix_classes(pseudo_b, rng);
    let mask = classmix_mask(pseudo_b, &classes);
    Ok((mask.mix_image(image_a, image_b)?, mask.mix_label(label_a, pseudo_b)?))
}

/// The mixing augmentation a branch applies when its mixing flag is on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mixing {
    None,
    TokenMix,
    TokenMixStar,
    CutMix,
    ClassMix,
}

impl Mixing {
    pub const ALL: [Mixing; 5] = [
        Mixing::None,
        Mixing::CutMix,
        Mixing::ClassMix,
        Mixing::TokenMixStar,
        Mixing::TokenMix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mixing::None => "none",
            Mixing::TokenMix => "tokenmix",
            Mixing::TokenMixStar => "tokenmix_star",
            Mixing::CutMix => "cutmix",
            Mixing::ClassMix => "classmix",
        }
    }
}

impl FromStr for Mixing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Mixing::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("expected one of none, cutmix, classmix, tokenmix_star, tokenmix; got {s:?}"))
    }
}
