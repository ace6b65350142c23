//! Procedural portraits: one parametric face per subject seed, with slight
//! head motion across frames.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::face::FaceEmbedder;
use crate::media::{save_frames, Frame};

use super::manifest::{write_manifest, write_sidecar, PairRecord, PairType};

#[derive(Clone, Debug, PartialEq)]
pub struct Portrait {
    pub background: [f64; 3],
    pub skin: [f64; 3],
    pub hair: [f64; 3],
    pub eyes: [f64; 3],
    pub face_radii: (f64, f64),
    pub eye_gap: f64,
    pub mouth_width: f64,
    pub hair_line: f64,
    pub phase: f64,
}

fn colour(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)]
}

impl Portrait {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        Self {
            background: colour(&mut rng, 0.0, 1.0),
            skin: colour(&mut rng, 0.35, 0.95),
            hair: colour(&mut rng, 0.0, 0.6),
            eyes: colour(&mut rng, 0.0, 0.5),
            face_radii: (rng.random_range(0.2..0.3), rng.random_range(0.27..0.37)),
            eye_gap: rng.random_range(0.08..0.16),
            mouth_width: rng.random_range(0.05..0.14),
            hair_line: rng.random_range(0.1..0.6),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Frame `t` at `width × height`; the face drifts by a few percent.
    pub fn render(&self, width: usize, height: usize, t: usize) -> Frame {
        let (w, h) = (width as f64, height as f64);
        let a = self.phase + 0.6 * t as f64;
        let (cx, cy) = (0.5 + 0.02 * a.sin(), 0.52 + 0.015 * a.cos());
        let (rx, ry) = self.face_radii;
        let mut f = Frame::filled(width, height, self.background);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f64 + 0.5) / w - cx;
                let v = (y as f64 + 0.5) / h - cy;
                let e = (u / rx).powi(2) + (v / ry).powi(2);
                if e > 1.0 {
                    continue;
                }
                let mut c = self.skin;
                if v < -ry * (1.0 - self.hair_line * 0.6) {
                    c = self.hair;
                }
                let eye_v = v + 0.06;
                for side in [-1.0, 1.0] {
                    if (u - side * self.eye_gap).powi(2) + eye_v.powi(2) < 0.035f64.powi(2) {
                        c = self.eyes;
                    }
                }
                if (v - 0.13).abs() < 0.02 && u.abs() < self.mouth_width {
                    c = [self.skin[0] * 0.6, self.skin[1] * 0.3, self.skin[2] * 0.3];
                }
                f.set_pixel(x, y, c);
            }
        }
        f.quantized()
    }

    pub fn clip(&self, width: usize, height: usize, frames: usize) -> Vec<Frame> {
        (0..frames).map(|t| self.render(width, height, t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub subjects: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 4,
            frames: 4,
            width: 64,
            height: 64,
            seed: 0,
        }
    }
}

/// Writes per-subject clips, condition images and embedding sidecars under
/// `root`, plus `root/manifest.jsonl` with one single-scene and one
/// multi-scene pair per subject. The multi-scene condition shows the same
/// subject over a different background.
pub fn synth_dataset(root: &Path, spec: &SynthSpec, embedder: &dyn FaceEmbedder) -> Result<(PathBuf, Vec<PairRecord>)> {
    std::fs::create_dir_all(root)?;
    let mut records = Vec::new();
    for s in 0..spec.subjects {
        let dir = root.join(format!("subject_{s:03}"));
        let portrait = Portrait::from_seed(spec.seed.wrapping_mul(1000).wrapping_add(s as u64));
        let clip = portrait.clip(spec.width, spec.height, spec.frames);
        let target = dir.join("clip");
        save_frames(&target, &clip)?;
        let cond = dir.join("condition.png");
        clip[0].save_png(&cond)?;
        let mut other = portrait.clone();
        let b = portrait.background;
        other.background = [0.6 * b[0] + 0.4 * b[1], 0.6 * b[1] + 0.4 * b[2], 0.6 * b[2] + 0.4 * b[0]];
        let cond_other = dir.join("condition_scene2.png");
        other.render(spec.width, spec.height, 2).save_png(&cond_other)?;
        let sidecar = match embedder.embed(&clip[0])? {
            Some(e) => {
                let p = dir.join("face.emb");
                write_sidecar(&p, e.as_slice())?;
                Some(p)
            }
            None => None,
        };
        let caption = format!("a person number {s} talking to the camera");
        for (pt, c) in [(PairType::SingleScene, &cond), (PairType::MultiScene, &cond_other)] {
            let mut r = PairRecord::new(pt, c.clone(), target.clone(), caption.clone());
            r.id_embedding = sidecar.clone();
            records.push(r);
        }
    }
    let manifest = root.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok((manifest, records))
}
