//! Synthetic segmentation scenes: colored circles, rectangles and triangles
//! over a textured background, with a label map derived from geometry alone.
//!
//! Class colors are jittered per shape and the whole image carries a noise
//! texture, so a per-pixel color lookup does not solve the task outright.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer class map, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes.max(self.max_class() as usize + 1)];
        for &c in &self.data {
            h[c as usize] += 1;
        }
        h
    }

    pub fn max_class(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().map(|&c| c as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub image: Tensor,
    pub label: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledScene {
    pub id: usize,
    pub image: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ShapeKind {
    Circle { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { v: [(f64, f64); 3] },
}

impl ShapeKind {
    /// Whether the pixel centered at `(x + 0.5, y + 0.5)` is covered.
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            ShapeKind::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            ShapeKind::Triangle { v } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| {
                    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                };
                let d = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                let has_neg = d.iter().any(|&e| e < 0.0);
                let has_pos = d.iter().any(|&e| e > 0.0);
                !(has_neg && has_pos)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub class: u8,
    pub color: [f64; 3],
}

/// Everything needed to render a scene except the noise texture.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub background: [f64; 3],
    pub texture_amplitude: f64,
    /// Drawn in order; later shapes occlude earlier ones.
    pub shapes: Vec<ShapeSpec>,
}

const TEXTURE_AMPLITUDE: f64 = 0.06;
const COLOR_JITTER: f64 = 0.15;

/// Characteristic color of a foreground class: evenly spaced hues.
pub fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    let k = (class as usize).saturating_sub(1) as f64;
    let hue = k / (num_classes.saturating_sub(1)).max(1) as f64;
    hsv_to_rgb(hue, 0.75, 0.85)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Draws one to three jittered foreground shapes on a random muted background.
pub fn sample_scene_spec(rng: &mut ChaCha8Rng, size: usize, num_classes: usize) -> SceneSpec {
    let s = size as f64;
    let gray: f64 = rng.gen_range(0.25..0.65);
    let background = [0, 1, 2].map(|_| (gray + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0));
    let n_shapes = rng.gen_range(1..=3);
    let shapes = (0..n_shapes)
        .map(|_| {
            let class = rng.gen_range(1..num_classes) as u8;
            let base = class_color(class, num_classes);
            let color = base.map(|c| (c + rng.gen_range(-COLOR_JITTER..COLOR_JITTER)).clamp(0.0, 1.0));
            let kind = match rng.gen_range(0..3) {
                0 => ShapeKind::Circle {
                    cx: rng.gen_range(0.2 * s..0.8 * s),
                    cy: rng.gen_range(0.2 * s..0.8 * s),
                    r: rng.gen_range(0.12 * s..0.3 * s),
                },
                1 => {
                    let w = rng.gen_range(0.2 * s..0.5 * s);
                    let h = rng.gen_range(0.2 * s..0.5 * s);
                    let x0 = rng.gen_range(0.0..s - w);
                    let y0 = rng.gen_range(0.0..s - h);
                    ShapeKind::Rect {
                        x0,
                        y0,
                        x1: x0 + w,
                        y1: y0 + h,
                    }
                }
                _ => {
                    let cx = rng.gen_range(0.25 * s..0.75 * s);
                    let cy = rng.gen_range(0.25 * s..0.75 * s);
                    let r = rng.gen_range(0.18 * s..0.35 * s);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let v = [0.0, 1.0, 2.0].map(|k: f64| {
                        let a = phase + k * std::f64::consts::TAU / 3.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    });
                    ShapeKind::Triangle { v }
                }
            };
            ShapeSpec { kind, class, color }
        })
        .collect();
    SceneSpec {
        background,
        texture_amplitude: TEXTURE_AMPLITUDE,
        shapes,
    }
}

/// Rasterizes a spec. The label depends only on shape geometry and order.
pub fn render(spec: &SceneSpec, size: usize, rng: &mut ChaCha8Rng) -> LabeledImage {
    let mut image = Tensor::zeros(&[size, size, 3]);
    let mut label = LabelMap::filled(size, size, 0);
    let px = image.data_mut();
    for y in 0..size {
        for x in 0..size {
            let mut color = spec.background;
            for shape in &spec.shapes {
                if shape.kind.covers(x, y) {
                    color = shape.color;
                    label.data[y * size + x] = shape.class;
                }
            }
            for c in 0..3 {
                let noise = if spec.texture_amplitude > 0.0 {
                    rng.gen_range(-spec.texture_amplitude..spec.texture_amplitude)
                } else {
                    0.0
                };
                px[(y * size + x) * 3 + c] = (color[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    LabeledImage { image, label }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: Tensor,
    pub label: LabelMap,
}

pub fn gen_scene(rng: &mut ChaCha8Rng, size: usize, num_classes: usize) -> Result<LabeledImage> {
    if size < 16 {
        return Err(Error::config("image_size", "scenes need at least 16 pixels per side"));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::config("num_classes", "must be in [2, 255]"));
    }
    let spec = sample_scene_spec(rng, size, num_classes);
    Ok(render(&spec, size, rng))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            n_labeled: 4,
            n_unlabeled: 128,
            n_val: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<UnlabeledScene>,
    pub val: Vec<Scene>,
}

/// Generator stream for scene `id`; each scene is reproducible on its own.
pub fn scene_rng(seed: u64, id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id as u64);
    rng
}

/// Scene ids `0..n_labeled` are labeled, the next `n_unlabeled` unlabeled,
/// the rest validation.
pub fn make_splits(spec: &SplitSpec, size: usize, num_classes: usize) -> Result<Splits> {
    for (key, n) in [
        ("n_labeled", spec.n_labeled),
        ("n_unlabeled", spec.n_unlabeled),
        ("n_val", spec.n_val),
    ] {
        if n == 0 {
            return Err(Error::config(key, "must be positive"));
        }
    }
    let scene = |id: usize| -> Result<Scene> {
        let LabeledImage { image, label } = gen_scene(&mut scene_rng(spec.seed, id), size, num_classes)?;
        Ok(Scene { id, image, label })
    };
    let u0 = spec.n_labeled;
    let v0 = u0 + spec.n_unlabeled;
    Ok(Splits {
        labeled: (0..u0).map(scene).collect::<Result<_>>()?,
        unlabeled: (u0..v0)
            .map(|id| scene(id).map(|s| UnlabeledScene { id, image: s.image }))
            .collect::<Result<_>>()?,
        val: (v0..v0 + spec.n_val).map(scene).collect::<Result<_>>()?,
    })
}

fn record_bytes(image: &Tensor, label: Option<&LabelMap>, num_classes: usize) -> Vec<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = Vec::with_capacity(12 + image.numel() * 8 + h * w);
    for v in [h as u32, w as u32, num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(label) = label {
        out.extend_from_slice(&label.data);
    }
    out
}

fn parse_record(bytes: &[u8], path: &Path) -> Result<(Tensor, Option<LabelMap>, usize)> {
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 12 {
        return Err(bad("record shorter than its header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    let n_img = h * w * 3 * 8;
    let body = &bytes[12..];
    let label = match body.len() {
        len if len == n_img => None,
        len if len == n_img + h * w => Some(LabelMap {
            height: h,
            width: w,
            data: body[n_img..].to_vec(),
        }),
        _ => return Err(bad("record length does not match its header")),
    };
    let data = body[..n_img]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if label.as_ref().is_some_and(|l| l.max_class() as usize >= c) {
        return Err(bad("label value out of class range"));
    }
    Ok((Tensor::new(vec![h, w, 3], data)?, label, c))
}

/// Writes one binary record per scene plus `manifest.txt` listing split
/// membership and the generating seed.
pub fn write_archive(dir: &Path, splits: &Splits, spec: &SplitSpec, num_classes: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!(
        "seed={}\nn_labeled={}\nn_unlabeled={}\nn_val={}\nnum_classes={num_classes}\n",
        spec.seed, spec.n_labeled, spec.n_unlabeled, spec.n_val
    );
    let mut write = |split: &str, id: usize, bytes: Vec<u8>| -> Result<()> {
        let name = format!("scene_{id:05}.bin");
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{split} {id} {name}\n"));
        Ok(())
    };
    for s in &splits.labeled {
        write("labeled", s.id, record_bytes(&s.image, Some(&s.label), num_classes))?;
    }
    for s in &splits.unlabeled {
        write("unlabeled", s.id, record_bytes(&s.image, None, num_classes))?;
    }
    for s in &splits.val {
        write("val", s.id, record_bytes(&s.image, Some(&s.label), num_classes))?;
    }
    let path = dir.join("manifest.txt");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&path, e))
}

pub fn read_archive(dir: &Path) -> Result<(Splits, SplitSpec)> {
    let manifest_path = dir.join("manifest.txt");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut spec = SplitSpec::default();
    let mut splits = Splits {
        labeled: vec![],
        unlabeled: vec![],
        val: vec![],
    };
    for (lineno, line) in text.lines().enumerate() {
        let bad = |msg: String| Error::Parse {
            path: manifest_path.clone(),
            line: lineno + 1,
            msg,
        };
        if let Some((k, v)) = line.split_once('=') {
            let n: u64 = v.parse().map_err(|_| bad(format!("bad number {v:?}")))?;
            match k {
                "seed" => spec.seed = n,
                "n_labeled" => spec.n_labeled = n as usize,
                "n_unlabeled" => spec.n_unlabeled = n as usize,
                "n_val" => spec.n_val = n as usize,
                "num_classes" => {}
                _ => return Err(bad(format!("unknown manifest key {k:?}"))),
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [split, id, file] = parts[..] else {
            return Err(bad(format!("expected `<split> <id> <file>`, got {line:?}")));
        };
        let id: usize = id.parse().map_err(|_| bad(format!("bad scene id {id:?}")))?;
        let path = dir.join(file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (image, label, _) = parse_record(&bytes, &path)?;
        match (split, label) {
            ("unlabeled", _) => splits.unlabeled.push(UnlabeledScene { id, image }),
            ("labeled", Some(label)) => splits.labeled.push(Scene { id, image, label }),
            ("val", Some(label)) => splits.val.push(Scene { id, image, label }),
            (s, _) => return Err(bad(format!("bad split {s:?} or missing label"))),
        }
    }
    Ok((splits, spec))
}
