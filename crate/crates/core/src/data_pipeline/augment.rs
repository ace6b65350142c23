use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{LynxError, Result};
use crate::media::Frame;

use super::manifest::{PairRecord, PairType};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Expression,
    Relight,
    Background,
}

/// Condition-image transform. Implementations must keep the frame size.
pub trait Augmenter: Send + Sync {
    fn kind(&self) -> AugmentKind;
    fn name(&self) -> String;
    fn apply(&self, frame: &Frame, rng: &mut dyn RngCore) -> Result<Frame>;
}

/// `v ↦ v^gamma` per channel. `gamma = 1` returns the input unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaRelight {
    pub gamma: f64,
}

impl Augmenter for GammaRelight {
    fn kind(&self) -> AugmentKind {
        AugmentKind::Relight
    }

    fn name(&self) -> String {
        format!("gamma{}", self.gamma)
    }

    fn apply(&self, frame: &Frame, _rng: &mut dyn RngCore) -> Result<Frame> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(LynxError::invalid(format!("gamma {} must be positive", self.gamma)));
        }
        let mut out = frame.clone();
        if self.gamma != 1.0 {
            out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0).powf(self.gamma));
        }
        Ok(out)
    }
}

/// Smooth radial displacement around a random point in the central region.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalWarp {
    /// Peak displacement as a fraction of the short side.
    pub strength: f64,
    /// Gaussian radius as a fraction of the short side.
    pub radius: f64,
}

impl Default for LocalWarp {
    fn default() -> Self {
        Self {
            strength: 0.05,
            radius: 0.15,
        }
    }
}

impl Augmenter for LocalWarp {
    fn kind(&self) -> AugmentKind {
        AugmentKind::Expression
    }

    fn name(&self) -> String {
        "local_warp".into()
    }

    fn apply(&self, frame: &Frame, rng: &mut dyn RngCore) -> Result<Frame> {
        let side = frame.width.min(frame.height) as f64;
        let cx = frame.width as f64 * rng.random_range(0.35..0.65);
        let cy = frame.height as f64 * rng.random_range(0.45..0.75);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (dx, dy) = (angle.cos() * self.strength * side, angle.sin() * self.strength * side);
        let r2 = (self.radius * side).powi(2).max(1e-9);
        let mut out = frame.clone();
        for y in 0..frame.height {
            for x in 0..frame.width {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = (-d2 / (2.0 * r2)).exp();
                out.set_pixel(x, y, frame.sample(x as f64 - g * dx, y as f64 - g * dy));
            }
        }
        Ok(out)
    }
}

/// Keeps a central ellipse and fills everything else with one colour.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatBackground {
    pub color: Option<[f64; 3]>,
    /// Ellipse half-axes as fractions of width and height.
    pub keep: (f64, f64),
}

impl Default for FlatBackground {
    fn default() -> Self {
        Self {
            color: None,
            keep: (0.35, 0.45),
        }
    }
}

impl Augmenter for FlatBackground {
    fn kind(&self) -> AugmentKind {
        AugmentKind::Background
    }

    fn name(&self) -> String {
        "flat_background".into()
    }

    fn apply(&self, frame: &Frame, rng: &mut dyn RngCore) -> Result<Frame> {
        let color = self
            .color
            .unwrap_or_else(|| [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()]);
        let (cx, cy) = (frame.width as f64 / 2.0, frame.height as f64 / 2.0);
        let (ax, ay) = (self.keep.0 * frame.width as f64, self.keep.1 * frame.height as f64);
        let mut out = frame.clone();
        for y in 0..frame.height {
            for x in 0..frame.width {
                let e = ((x as f64 + 0.5 - cx) / ax).powi(2) + ((y as f64 + 0.5 - cy) / ay).powi(2);
                if e > 1.0 {
                    out.set_pixel(x, y, color);
                }
            }
        }
        Ok(out)
    }
}

/// Augments a single-scene record's condition image into `out_root`. The
/// returned record is `augmented_single_scene` and carries `augmentation`,
/// `source` and `no_op` extras; a no-op writes a byte copy of the source.
pub fn apply_augmenter(record: &PairRecord, aug: &dyn Augmenter, rng: &mut dyn RngCore, out_root: &Path) -> Result<PairRecord> {
    if record.pair_type != PairType::SingleScene {
        return Err(LynxError::invalid(format!(
            "only single_scene records can be augmented, got {}",
            record.pair_type
        )));
    }
    let src = &record.condition_image;
    let frame = Frame::load_png(src)?;
    let out = aug.apply(&frame, rng)?;
    if (out.width, out.height) != (frame.width, frame.height) {
        return Err(LynxError::dims(format!(
            "augmenter {} changed {}×{} to {}×{}",
            aug.name(),
            frame.width,
            frame.height,
            out.width,
            out.height
        )));
    }
    let no_op = out.to_rgb8() == frame.to_rgb8();
    std::fs::create_dir_all(out_root)?;
    let dest = out_root.join(output_name(src, &aug.name()));
    if no_op {
        std::fs::copy(src, &dest)?;
    } else {
        out.save_png(&dest)?;
    }
    let mut rec = record.clone();
    rec.pair_type = PairType::AugmentedSingleScene;
    rec.condition_image = dest;
    rec.resemblance = None;
    rec.extra.insert("augmentation".into(), Value::String(aug.name()));
    rec.extra.insert("source".into(), Value::String(src.display().to_string()));
    rec.extra.insert("no_op".into(), Value::Bool(no_op));
    Ok(rec)
}

fn output_name(src: &Path, aug: &str) -> PathBuf {
    let stem = src.file_stem().and_then(|s| s.to_str()).unwrap_or("frame");
    let digest = hex::encode(Sha256::digest(src.to_string_lossy().as_bytes()));
    PathBuf::from(format!("{stem}_{aug}_{}.png", &digest[..8]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub record: PairRecord,
    pub message: String,
}

/// Augments every single-scene record; other types are skipped. Record `i`
/// draws from its own ChaCha8 stream `i` under `seed`.
pub fn augment_all(
    records: &[PairRecord],
    aug: &dyn Augmenter,
    seed: u64,
    out_root: &Path,
) -> (Vec<PairRecord>, Vec<Reject>) {
    let mut done = Vec::new();
    let mut rejects = Vec::new();
    for (i, r) in records.iter().enumerate().filter(|(_, r)| r.pair_type == PairType::SingleScene) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        match apply_augmenter(r, aug, &mut rng, out_root) {
            Ok(a) => done.push(a),
            Err(e) => rejects.push(Reject {
                record: r.clone(),
                message: e.to_string(),
            }),
        }
    }
    (done, rejects)
}
