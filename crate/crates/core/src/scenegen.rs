//! Layered-sprite scenes with exact flow and occlusion ground truth.
//!
//! Every layer is a textured shape moving by an integer translation. Frame 1
//! is frame 0 with each layer shifted, composited in strict z-order, so flow
//! and occlusion labels are exact with no resampling.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{decode_container, encode_container, FormatError};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"TSA1";

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("degenerate scene config: no sprites and no background motion")]
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    SmoothNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub sprite_size_min: usize,
    pub sprite_size_max: usize,
    /// Per-sprite translation range, pixels, per axis.
    pub max_translation: i32,
    pub background_max_translation: i32,
    /// Snap sprite geometry and translations to the 8-pixel cell grid.
    pub cell_aligned: bool,
    pub texture: TextureKind,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            sprites_min: 1,
            sprites_max: 3,
            sprite_size_min: 16,
            sprite_size_max: 32,
            max_translation: 12,
            background_max_translation: 8,
            cell_aligned: true,
            texture: TextureKind::SmoothNoise,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: String| Err(SceneError::InvalidConfig(m));
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!(
                "size {}x{} must be nonzero multiples of 8",
                self.height, self.width
            ));
        }
        let limit = (self.height.min(self.width) / 2) as i32;
        if self.max_translation.abs() >= limit || self.background_max_translation.abs() >= limit {
            return bad(format!("translations must stay below {} pixels", limit));
        }
        if self.max_translation < 0 || self.background_max_translation < 0 {
            return bad("translation ranges must be nonnegative".into());
        }
        if self.sprites_min > self.sprites_max {
            return bad("sprites_min exceeds sprites_max".into());
        }
        if self.sprites_max > 0 && (self.sprite_size_min == 0 || self.sprite_size_min > self.sprite_size_max) {
            return bad("sprite size range is empty".into());
        }
        if self.sprites_max > 250 {
            return bad("at most 250 sprites".into());
        }
        if self.cell_aligned && self.max_translation < 8 && self.sprites_max > 0 {
            return bad("cell-aligned sprites need max_translation >= 8".into());
        }
        if self.sprites_max == 0 && self.background_max_translation == 0 {
            return Err(SceneError::Degenerate);
        }
        Ok(())
    }
}

/// Procedural value-noise texture defined on the whole plane.
#[derive(Clone, Debug, PartialEq)]
pub struct Texture {
    pub seed: u64,
    /// Lattice spacing of the coarse octave, pixels.
    pub spacing: f64,
    pub base: [f64; 3],
    pub amplitude: [f64; 3],
}

impl Texture {
    pub fn flat(value: f64) -> Self {
        Self {
            seed: 0,
            spacing: 8.0,
            base: [value; 3],
            amplitude: [0.0; 3],
        }
    }

    fn random(rng: &mut impl Rng) -> Self {
        Self {
            seed: rng.gen(),
            spacing: rng.gen_range(8.0..16.0),
            base: [
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
                rng.gen_range(0.25..0.75),
            ],
            amplitude: [
                rng.gen_range(0.15..0.3),
                rng.gen_range(0.15..0.3),
                rng.gen_range(0.15..0.3),
            ],
        }
    }

    /// Color of channel `c` at layer-local pixel `(x, y)`, in `[0, 1]`.
    pub fn sample(&self, c: usize, x: i32, y: i32) -> f32 {
        let (fx, fy) = (x as f64, y as f64);
        let coarse = value_noise(self.seed, c as u64, fx / self.spacing, fy / self.spacing);
        let fine = value_noise(
            self.seed ^ 0x9e37_79b9,
            c as u64,
            2.0 * fx / self.spacing,
            2.0 * fy / self.spacing,
        );
        let v = self.base[c] + self.amplitude[c] * (coarse + 0.5 * fine);
        v.clamp(0.0, 1.0) as f32
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, c: u64, ix: i64, iy: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(c.wrapping_add(splitmix(ix as u64 ^ splitmix(iy as u64)))));
    (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
}

fn value_noise(seed: u64, c: u64, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor(), y.floor());
    let (tx, ty) = (x - x0, y - y0);
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (sx, sy) = (smooth(tx), smooth(ty));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let v00 = lattice(seed, c, ix, iy);
    let v10 = lattice(seed, c, ix + 1, iy);
    let v01 = lattice(seed, c, ix, iy + 1);
    let v11 = lattice(seed, c, ix + 1, iy + 1);
    let top = v00 + (v10 - v00) * sx;
    let bottom = v01 + (v11 - v01) * sx;
    top + (bottom - top) * sy
}

/// Support of a layer in frame-0 pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub enum Shape {
    Full,
    Rect { x0: i32, y0: i32, w: i32, h: i32 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    pub fn covers(&self, x: i32, y: i32) -> bool {
        match *self {
            Shape::Full => true,
            Shape::Rect { x0, y0, w, h } => x >= x0 && x < x0 + w && y >= y0 && y < y0 + h,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub shape: Shape,
    /// Integer motion `(dx, dy)` from frame 0 to frame 1, pixels.
    pub translation: (i32, i32),
    pub texture: Texture,
}

impl Layer {
    /// Whether the layer covers `(x, y)` in frame `0` or `1`.
    fn covers_in(&self, frame: i32, x: i32, y: i32) -> bool {
        self.shape
            .covers(x - frame * self.translation.0, y - frame * self.translation.1)
    }
}

/// Top layer index at `(x, y)` in the given frame; layers later in the slice
/// are nearer.
fn top_layer(layers: &[Layer], frame: i32, x: i32, y: i32) -> Option<usize> {
    layers.iter().rposition(|l| l.covers_in(frame, x, y))
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionGt {
    pub occ_gt: Vec<u8>,
    pub occ_in: Vec<u8>,
    pub occ_out: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    pub frame0: Tensor<f32>,
    pub frame1: Tensor<f32>,
    /// Frame 0 → frame 1 flow, `[2, H, W]`, pixels.
    pub flow_gt: Tensor<f32>,
    /// Frame 1 → frame 0 flow, `[2, H, W]`, pixels.
    pub flow_bwd_gt: Tensor<f32>,
    pub occ_gt: Vec<u8>,
    pub occ_in: Vec<u8>,
    pub occ_out: Vec<u8>,
    /// Top layer index per frame-0 pixel.
    pub zorder: Vec<u8>,
}

/// Exact occlusion labels. A frame-0 pixel is occluded when its destination
/// leaves the image (`occ_out`) or is covered by a nearer layer (`occ_in`).
pub fn compute_occlusion_gt(layers: &[Layer], height: usize, width: usize) -> OcclusionGt {
    let n = height * width;
    let mut out = OcclusionGt {
        occ_gt: vec![0; n],
        occ_in: vec![0; n],
        occ_out: vec![0; n],
    };
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            let i = y as usize * width + x as usize;
            let Some(own) = top_layer(layers, 0, x, y) else {
                continue;
            };
            let (dx, dy) = layers[own].translation;
            let (tx, ty) = (x + dx, y + dy);
            if tx < 0 || ty < 0 || tx >= width as i32 || ty >= height as i32 {
                out.occ_out[i] = 1;
                out.occ_gt[i] = 1;
            } else if top_layer(layers, 1, tx, ty) != Some(own) {
                out.occ_in[i] = 1;
                out.occ_gt[i] = 1;
            }
        }
    }
    out
}

/// Renders both frames and all ground truth for explicit layers. The first
/// layer should cover the plane (a background).
pub fn render_scene(layers: &[Layer], height: usize, width: usize) -> SceneSample {
    let n = height * width;
    let mut frames = [vec![0f32; 3 * n], vec![0f32; 3 * n]];
    let mut flow = vec![0f32; 2 * n];
    let mut flow_bwd = vec![0f32; 2 * n];
    let mut zorder = vec![0u8; n];
    for (f, frame) in frames.iter_mut().enumerate() {
        for y in 0..height as i32 {
            for x in 0..width as i32 {
                let i = y as usize * width + x as usize;
                let Some(top) = top_layer(layers, f as i32, x, y) else {
                    continue;
                };
                let l = &layers[top];
                let (lx, ly) = (x - f as i32 * l.translation.0, y - f as i32 * l.translation.1);
                for c in 0..3 {
                    frame[c * n + i] = l.texture.sample(c, lx, ly);
                }
                if f == 0 {
                    flow[i] = l.translation.0 as f32;
                    flow[n + i] = l.translation.1 as f32;
                    zorder[i] = top as u8;
                } else {
                    flow_bwd[i] = -l.translation.0 as f32;
                    flow_bwd[n + i] = -l.translation.1 as f32;
                }
            }
        }
    }
    let occ = compute_occlusion_gt(layers, height, width);
    let [f0, f1] = frames;
    SceneSample {
        height,
        width,
        frame0: Tensor::new(vec![3, height, width], f0).unwrap(),
        frame1: Tensor::new(vec![3, height, width], f1).unwrap(),
        flow_gt: Tensor::new(vec![2, height, width], flow).unwrap(),
        flow_bwd_gt: Tensor::new(vec![2, height, width], flow_bwd).unwrap(),
        occ_gt: occ.occ_gt,
        occ_in: occ.occ_in,
        occ_out: occ.occ_out,
        zorder,
    }
}

/// Samples a layer stack: a background plus sprites with pairwise distinct
/// motions.
pub fn sample_layers(cfg: &SceneConfig, seed: u64) -> Result<Vec<Layer>, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let snap = |v: i32| {
        if cfg.cell_aligned {
            (v as f64 / 8.0).round() as i32 * 8
        } else {
            v
        }
    };
    // Aligned mode draws whole-cell shifts that stay inside the range.
    let shift = |rng: &mut ChaCha8Rng, t: i32| {
        if cfg.cell_aligned {
            rng.gen_range(-(t / 8)..=t / 8) * 8
        } else {
            rng.gen_range(-t..=t)
        }
    };
    let bg = cfg.background_max_translation;
    let mut layers = vec![Layer {
        shape: Shape::Full,
        translation: (shift(&mut rng, bg), shift(&mut rng, bg)),
        texture: Texture::random(&mut rng),
    }];
    let count = rng.gen_range(cfg.sprites_min..=cfg.sprites_max);
    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let t = cfg.max_translation;
    for _ in 0..count {
        let mut sw = rng.gen_range(cfg.sprite_size_min..=cfg.sprite_size_max) as i32;
        let mut sh = rng.gen_range(cfg.sprite_size_min..=cfg.sprite_size_max) as i32;
        let mut x0 = rng.gen_range(-sw / 4..=(w - 3 * sw / 4).max(-sw / 4));
        let mut y0 = rng.gen_range(-sh / 4..=(h - 3 * sh / 4).max(-sh / 4));
        let ellipse = !cfg.cell_aligned && rng.gen_bool(0.5);
        if cfg.cell_aligned {
            sw = snap(sw).max(8);
            sh = snap(sh).max(8);
            x0 = snap(x0);
            y0 = snap(y0);
        }
        let mut translation = (0, 0);
        for _ in 0..64 {
            translation = (shift(&mut rng, t), shift(&mut rng, t));
            if layers.iter().all(|l| l.translation != translation) {
                break;
            }
        }
        let shape = if ellipse {
            Shape::Ellipse {
                cx: x0 as f64 + sw as f64 / 2.0,
                cy: y0 as f64 + sh as f64 / 2.0,
                rx: sw as f64 / 2.0,
                ry: sh as f64 / 2.0,
            }
        } else {
            Shape::Rect { x0, y0, w: sw, h: sh }
        };
        layers.push(Layer {
            shape,
            translation,
            texture: Texture::random(&mut rng),
        });
    }
    Ok(layers)
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneSample, SceneError> {
    let layers = sample_layers(cfg, seed)?;
    Ok(render_scene(&layers, cfg.height, cfg.width))
}

/// `count` scenes seeded `cfg.seed, cfg.seed + 1, ...`.
pub fn generate_dataset(cfg: &SceneConfig, count: usize) -> Result<Vec<SceneSample>, SceneError> {
    (0..count as u64)
        .map(|i| generate_scene(cfg, cfg.seed.wrapping_add(i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub fields: Vec<FieldSpec>,
}

const FIELDS: [(&str, usize, &str); 8] = [
    ("frame0", 3, "f32"),
    ("frame1", 3, "f32"),
    ("flow_gt", 2, "f32"),
    ("flow_bwd_gt", 2, "f32"),
    ("occ_gt", 0, "u8"),
    ("occ_in", 0, "u8"),
    ("occ_out", 0, "u8"),
    ("zorder", 0, "u8"),
];

fn field_specs(h: usize, w: usize) -> Vec<FieldSpec> {
    FIELDS
        .iter()
        .map(|&(name, c, dtype)| FieldSpec {
            name: name.into(),
            shape: if c > 0 { vec![c, h, w] } else { vec![h, w] },
            dtype: dtype.into(),
        })
        .collect()
}

fn dtype_size(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "u8" => Some(1),
        _ => None,
    }
}

pub fn encode_dataset(samples: &[SceneSample]) -> Result<Vec<u8>, FormatError> {
    let (h, w) = samples.first().map(|s| (s.height, s.width)).unwrap_or((0, 0));
    let mut payload = Vec::new();
    for s in samples {
        if (s.height, s.width) != (h, w) {
            return Err(FormatError::Shape("samples must share one image size".into()));
        }
        for t in [&s.frame0, &s.frame1, &s.flow_gt, &s.flow_bwd_gt] {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        for m in [&s.occ_gt, &s.occ_in, &s.occ_out, &s.zorder] {
            payload.extend_from_slice(m);
        }
    }
    let header = DatasetHeader {
        version: 1,
        count: samples.len(),
        height: h,
        width: w,
        fields: field_specs(h, w),
    };
    encode_container(DATASET_MAGIC, &header, &payload)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SceneSample>, FormatError> {
    let (header, payload): (DatasetHeader, _) = decode_container(DATASET_MAGIC, bytes)?;
    let (h, w) = (header.height, header.width);
    if header.fields.len() != FIELDS.len() {
        return Err(FormatError::MalformedHeader(format!(
            "expected {} fields",
            FIELDS.len()
        )));
    }
    let expected = field_specs(h, w);
    let mut per_sample = 0;
    for (got, want) in header.fields.iter().zip(&expected) {
        if got.name != want.name || got.dtype != want.dtype {
            return Err(FormatError::MalformedHeader(format!(
                "unexpected field {}:{}",
                got.name, got.dtype
            )));
        }
        if got.shape != want.shape {
            return Err(FormatError::Shape(format!(
                "field {} declared {:?}, image size implies {:?}",
                got.name, got.shape, want.shape
            )));
        }
        per_sample += got.shape.iter().product::<usize>() * dtype_size(&got.dtype).unwrap();
    }
    if per_sample * header.count != payload.len() {
        return Err(FormatError::Shape(format!(
            "{} samples of {} bytes do not fill a {}-byte payload",
            header.count,
            per_sample,
            payload.len()
        )));
    }
    let mut samples = Vec::with_capacity(header.count);
    let mut pos = 0;
    let mut take = |n: usize| {
        let s = &payload[pos..pos + n];
        pos += n;
        s
    };
    for _ in 0..header.count {
        let mut tensors = Vec::with_capacity(4);
        for &(_, c, _) in &FIELDS[..4] {
            let raw = take(c * h * w * 4);
            let data = raw
                .chunks(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor::new(vec![c, h, w], data).unwrap());
        }
        let mut masks = Vec::with_capacity(4);
        for _ in 0..4 {
            masks.push(take(h * w).to_vec());
        }
        let mut t = tensors.into_iter();
        let mut m = masks.into_iter();
        samples.push(SceneSample {
            height: h,
            width: w,
            frame0: t.next().unwrap(),
            frame1: t.next().unwrap(),
            flow_gt: t.next().unwrap(),
            flow_bwd_gt: t.next().unwrap(),
            occ_gt: m.next().unwrap(),
            occ_in: m.next().unwrap(),
            occ_out: m.next().unwrap(),
            zorder: m.next().unwrap(),
        });
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[SceneSample], path: &Path) -> Result<(), FormatError> {
    fs::write(path, encode_dataset(samples)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneSample>, FormatError> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn background(t: (i32, i32)) -> Layer {
        Layer {
            shape: Shape::Full,
            translation: t,
            texture: Texture::random(&mut ChaCha8Rng::seed_from_u64(1)),
        }
    }

    #[test]
    fn static_single_layer_has_zero_flow_and_occlusion() {
        let s = render_scene(&[background((0, 0))], 16, 16);
        assert!(s.flow_gt.data().iter().all(|&v| v == 0.0));
        assert!(s.occ_gt.iter().all(|&v| v == 0));
        assert_eq!(s.frame0, s.frame1);
    }

    #[test]
    fn background_shift_right_is_pure_out_of_frame() {
        let s = render_scene(&[background((8, 0))], 32, 32);
        for y in 0..32 {
            for x in 0..32 {
                let i = y * 32 + x;
                assert_eq!(s.occ_out[i], (x >= 24) as u8, "({x},{y})");
                assert_eq!(s.occ_in[i], 0);
            }
        }
    }

    #[test]
    fn sprite_leaving_frame_is_all_out_of_frame() {
        let layers = vec![
            background((0, 0)),
            Layer {
                shape: Shape::Rect {
                    x0: 20,
                    y0: 4,
                    w: 8,
                    h: 8,
                },
                translation: (12, 0),
                texture: Texture::flat(0.9),
            },
        ];
        let s = render_scene(&layers, 32, 32);
        for y in 4..12 {
            for x in 20..28 {
                assert_eq!(s.occ_out[y * 32 + x], 1);
            }
        }
    }

    #[test]
    fn degenerate_and_invalid_configs_rejected() {
        let cfg = SceneConfig {
            sprites_min: 0,
            sprites_max: 0,
            background_max_translation: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SceneError::Degenerate)));
        let cfg = SceneConfig {
            height: 60,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SceneError::InvalidConfig(_))));
        let cfg = SceneConfig {
            max_translation: 32,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(SceneError::InvalidConfig(_))));
    }

    #[test]
    fn cell_aligned_layers_snap_to_grid() {
        let cfg = SceneConfig {
            cell_aligned: true,
            ..Default::default()
        };
        for seed in 0..20 {
            for l in sample_layers(&cfg, seed).unwrap() {
                assert_eq!(l.translation.0 % 8, 0);
                assert_eq!(l.translation.1 % 8, 0);
                assert!(l.translation.0.abs() <= cfg.max_translation && l.translation.1.abs() <= cfg.max_translation);
                if let Shape::Rect { x0, y0, w, h } = l.shape {
                    assert!([x0, y0, w, h].iter().all(|v| v % 8 == 0));
                }
            }
        }
    }
}
