use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{grid_to_image_coords, BBox, GridPos};
use crate::pyramid::{FeaturePyramid, PyramidSpec};
use crate::tensor::Tensor;

const BOX_STREAM: u64 = 0;
const FEATURE_STREAM: u64 = 1;

/// Channels carrying the center bump and the soft interior indicator.
const BUMP_CHANNELS: std::ops::Range<usize> = 0..4;
const INDICATOR_CHANNELS: std::ops::Range<usize> = 4..8;
const BUMP_GAINS: [f64; 4] = [1.0, 0.8, 1.2, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleClass {
    Small,
    Medium,
    Large,
}

impl ScaleClass {
    pub const ALL: [ScaleClass; 3] = [ScaleClass::Small, ScaleClass::Medium, ScaleClass::Large];

    /// Range of the geometric-mean side length in pixels.
    pub fn side_range(self) -> (f64, f64) {
        match self {
            ScaleClass::Small => (8.0, 24.0),
            ScaleClass::Medium => (24.0, 64.0),
            ScaleClass::Large => (64.0, 160.0),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleClass::Small => "small",
            ScaleClass::Medium => "medium",
            ScaleClass::Large => "large",
        }
    }
}

impl fmt::Display for ScaleClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScaleClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(ScaleClass::Small),
            "medium" => Ok(ScaleClass::Medium),
            "large" => Ok(ScaleClass::Large),
            other => Err(Error::Config(format!("unknown scale class {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub objects_per_scene: usize,
    /// Relative weights for small, medium and large objects.
    pub scale_mix: [f64; 3],
    pub aspect_range: (f64, f64),
    /// Lower bound on either box side; at the finest stride it guarantees a
    /// grid point inside every box.
    pub min_side: f64,
    pub noise_std: f64,
    pub background_amplitude: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects_per_scene: 5,
            scale_mix: [1.0, 1.0, 1.0],
            aspect_range: (0.6, 1.6),
            min_side: 8.0,
            noise_std: 0.2,
            background_amplitude: 0.25,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_mix.iter().any(|w| !(*w >= 0.0)) || self.scale_mix.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("bad scale mix {:?}", self.scale_mix)));
        }
        let (lo, hi) = self.aspect_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad aspect range ({lo}, {hi})")));
        }
        if !(self.min_side > 0.0) {
            return Err(Error::Config(format!("bad minimum side {}", self.min_side)));
        }
        if !(self.noise_std >= 0.0) || !(self.background_amplitude >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBox {
    pub bbox: BBox,
    pub scale: ScaleClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub image_size: usize,
    pub boxes: Vec<SceneBox>,
    pub pyramid: FeaturePyramid,
}

/// One line of a scene corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub seed: u64,
    pub image_size: usize,
    pub boxes: Vec<BoxRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub scale: ScaleClass,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn sample_boxes(seed: u64, image_size: usize, cfg: &SceneConfig) -> Result<Vec<SceneBox>> {
    let mut rng = rng_for(seed, BOX_STREAM);
    let classes = WeightedIndex::new(cfg.scale_mix)
        .map_err(|e| Error::Config(format!("scale mix: {e}")))?;
    let size = image_size as f64;
    let (alo, ahi) = cfg.aspect_range;
    let mut boxes = Vec::with_capacity(cfg.objects_per_scene);
    for _ in 0..cfg.objects_per_scene {
        let scale = ScaleClass::ALL[classes.sample(&mut rng)];
        let (lo, hi) = scale.side_range();
        let side = rng.random_range(lo..hi);
        let aspect = if alo < ahi { rng.random_range(alo..ahi) } else { alo };
        let w = (side * aspect.sqrt()).max(cfg.min_side).min(size);
        let h = (side / aspect.sqrt()).max(cfg.min_side).min(size);
        let cx = w / 2.0 + rng.random::<f64>() * (size - w);
        let cy = h / 2.0 + rng.random::<f64>() * (size - h);
        boxes.push(SceneBox {
            bbox: BBox::new(cx, cy, w, h)?,
            scale,
        });
    }
    Ok(boxes)
}

/// Sinusoidal plane wave `amp * sin(kx x + ky y + phase)`.
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

fn synthesize_features(
    seed: u64,
    spec: &PyramidSpec,
    boxes: &[SceneBox],
    cfg: &SceneConfig,
) -> Result<FeaturePyramid> {
    let mut rng = rng_for(seed, FEATURE_STREAM);
    let c = spec.channels;
    let waves: Vec<Vec<Wave>> = (0..c)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let wavelength = rng.random_range(40.0..160.0);
                    let angle = rng.random_range(0.0..TAU);
                    Wave {
                        kx: TAU / wavelength * angle.cos(),
                        ky: TAU / wavelength * angle.sin(),
                        phase: rng.random_range(0.0..TAU),
                        amp: cfg.background_amplitude * rng.random_range(0.5..1.0),
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise: {e}")))?;

    let mut levels = Vec::with_capacity(spec.levels());
    for (level, (&(h, w), &stride)) in spec.shapes().iter().zip(&spec.strides).enumerate() {
        let mut t = Tensor::zeros([c, h, w]);
        let data = t.data_mut();
        for i in 0..h {
            for j in 0..w {
                let (x, y) = grid_to_image_coords(GridPos::new(level, i, j), stride);
                let mut bump = 0.0f64;
                let mut inside = 0.0f64;
                for b in boxes {
                    let dx = (x - b.bbox.cx) / (b.bbox.w / 2.0);
                    let dy = (y - b.bbox.cy) / (b.bbox.h / 2.0);
                    bump = bump.max((-1.5 * (dx * dx + dy * dy)).exp());
                    let margin = 1.0 - dx.abs().max(dy.abs());
                    inside = inside.max(1.0 / (1.0 + (-8.0 * margin).exp()));
                }
                for (k, channel_waves) in waves.iter().enumerate() {
                    let mut v: f64 = channel_waves
                        .iter()
                        .map(|wv| wv.amp * (wv.kx * x + wv.ky * y + wv.phase).sin())
                        .sum();
                    if cfg.noise_std > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    if BUMP_CHANNELS.contains(&k) {
                        v += BUMP_GAINS[k - BUMP_CHANNELS.start] * bump;
                    } else if INDICATOR_CHANNELS.contains(&k) {
                        v += inside;
                    }
                    data[(k * h + i) * w + j] = v;
                }
            }
        }
        levels.push(t);
    }
    FeaturePyramid::new(levels, spec.strides.clone())
}

/// Deterministic scene for `seed`: boxes from one random stream, features
/// from another.
pub fn generate_scene(seed: u64, spec: &PyramidSpec, cfg: &SceneConfig) -> Result<SyntheticScene> {
    spec.validate()?;
    cfg.validate()?;
    let boxes = sample_boxes(seed, spec.image_size, cfg)?;
    let pyramid = synthesize_features(seed, spec, &boxes, cfg)?;
    Ok(SyntheticScene {
        seed,
        image_size: spec.image_size,
        boxes,
        pyramid,
    })
}

/// `count` scenes with seeds `base_seed, base_seed + 1, ...`.
pub fn generate_corpus(
    base_seed: u64,
    count: usize,
    spec: &PyramidSpec,
    cfg: &SceneConfig,
) -> Result<Vec<SyntheticScene>> {
    (0..count as u64)
        .map(|k| generate_scene(base_seed.wrapping_add(k), spec, cfg))
        .collect()
}

impl SyntheticScene {
    pub fn bboxes(&self) -> Vec<BBox> {
        self.boxes.iter().map(|b| b.bbox).collect()
    }

    pub fn record(&self) -> SceneRecord {
        SceneRecord {
            seed: self.seed,
            image_size: self.image_size,
            boxes: self
                .boxes
                .iter()
                .map(|b| BoxRecord {
                    cx: b.bbox.cx,
                    cy: b.bbox.cy,
                    w: b.bbox.w,
                    h: b.bbox.h,
                    scale: b.scale,
                })
                .collect(),
        }
    }

    /// Rebuilds features for the boxes stored in `record`.
    pub fn from_record(record: &SceneRecord, spec: &PyramidSpec, cfg: &SceneConfig) -> Result<Self> {
        if record.image_size != spec.image_size {
            return Err(Error::Config(format!(
                "scene {} has image size {}, pyramid expects {}",
                record.seed, record.image_size, spec.image_size
            )));
        }
        spec.validate()?;
        cfg.validate()?;
        let size = spec.image_size as f64;
        let boxes = record
            .boxes
            .iter()
            .map(|b| {
                let bbox = BBox::new(b.cx, b.cy, b.w, b.h)?;
                let [x1, y1, x2, y2] = bbox.corners();
                if x1 < 0.0 || y1 < 0.0 || x2 > size || y2 > size {
                    return Err(Error::Contract(format!(
                        "box {bbox:?} outside {size}x{size} image"
                    )));
                }
                Ok(SceneBox { bbox, scale: b.scale })
            })
            .collect::<Result<Vec<_>>>()?;
        let pyramid = synthesize_features(record.seed, spec, &boxes, cfg)?;
        Ok(Self {
            seed: record.seed,
            image_size: spec.image_size,
            boxes,
            pyramid,
        })
    }
}

/// One JSON object per line.
pub fn write_corpus_jsonl(scenes: &[SyntheticScene]) -> Result<String> {
    let mut out = String::new();
    for s in scenes {
        out.push_str(&serde_json::to_string(&s.record())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_corpus_jsonl(text: &str) -> Result<Vec<SceneRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> PyramidSpec {
        PyramidSpec {
            image_size: 64,
            strides: vec![8, 16],
            channels: 8,
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = PyramidSpec::default();
        let cfg = SceneConfig::default();
        let a = generate_scene(7, &spec, &cfg).unwrap();
        let b = generate_scene(7, &spec, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(8, &spec, &cfg).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn boxes_inside_image() {
        let spec = PyramidSpec::default();
        let cfg = SceneConfig {
            objects_per_scene: 20,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let scene = generate_scene(seed, &spec, &cfg).unwrap();
            for b in &scene.boxes {
                let [x1, y1, x2, y2] = b.bbox.corners();
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 256.0 && y2 <= 256.0);
                let side = (b.bbox.w * b.bbox.h).sqrt();
                let (lo, hi) = b.scale.side_range();
                assert!(side >= lo - 1e-9 && side <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn zero_boxes_gives_pure_noise() {
        let spec = small_spec();
        let cfg = SceneConfig {
            objects_per_scene: 0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(3, &spec, &cfg).unwrap();
        assert!(scene.boxes.is_empty());
        let quiet = SceneConfig {
            noise_std: 0.0,
            background_amplitude: 0.0,
            ..cfg
        };
        let silent = generate_scene(3, &spec, &quiet).unwrap();
        assert!(silent.pyramid.levels.iter().all(|l| l.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scale_mix_proportions() {
        let spec = small_spec();
        let cfg = SceneConfig::default();
        let mut counts = [0usize; 3];
        for seed in 0..100 {
            for b in generate_scene(seed, &PyramidSpec { image_size: 256, ..spec.clone() }, &cfg)
                .unwrap()
                .boxes
            {
                counts[b.scale as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        for c in counts {
            let frac = c as f64 / total as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.1, "{counts:?}");
        }
    }

    #[test]
    fn signature_inside_boxes() {
        let spec = PyramidSpec::default();
        let cfg = SceneConfig {
            objects_per_scene: 1,
            scale_mix: [0.0, 0.0, 1.0],
            noise_std: 0.05,
            background_amplitude: 0.0,
            ..SceneConfig::default()
        };
        let scene = generate_scene(11, &spec, &cfg).unwrap();
        let b = scene.boxes[0].bbox;
        let level = &scene.pyramid.levels[0];
        let i = ((b.cx - 4.0) / 8.0).round() as usize;
        let j = ((b.cy - 4.0) / 8.0).round() as usize;
        // bump channel near the center clearly above far background
        let center = level.at3(0, i, j);
        let far_i = if i > 16 { 0 } else { 31 };
        let far_j = if j > 16 { 0 } else { 31 };
        if !b.contains(4.0 + 8.0 * far_i as f64, 4.0 + 8.0 * far_j as f64) {
            assert!(center > level.at3(0, far_i, far_j) + 0.3);
        }
    }

    #[test]
    fn record_roundtrip_rebuilds_scene() {
        let spec = PyramidSpec::default();
        let cfg = SceneConfig::default();
        let scenes = generate_corpus(42, 3, &spec, &cfg).unwrap();
        let text = write_corpus_jsonl(&scenes).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first["boxes"][0]["scale"].is_string());
        for (rec, scene) in read_corpus_jsonl(&text).unwrap().iter().zip(&scenes) {
            assert_eq!(&SyntheticScene::from_record(rec, &spec, &cfg).unwrap(), scene);
        }
        let bad = r#"{"seed":1,"image_size":256,"boxes":[],"extra":0}"#;
        assert!(read_corpus_jsonl(bad).is_err());
    }
}
