//! Toy latent autoencoder: `pool×pool` average pooling followed by a fixed
//! random `3 → channels` map. The decoder applies the map's left inverse and
//! nearest-neighbour upsampling, so `decode(encode(x))` recovers the pooled
//! colours exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::LatentVideo;
use crate::error::{LynxError, Result};
use crate::media::Frame;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    pub pool: usize,
    pub channels: usize,
    /// `3 × channels`.
    pub map: Matrix,
    /// `channels × 3`, with `map · pinv = I₃`.
    pub pinv: Matrix,
}

impl LatentCodec {
    pub fn new(pool: usize, channels: usize, seed: u64) -> Result<Self> {
        if pool == 0 || channels < 3 {
            return Err(LynxError::invalid("codec needs pool ≥ 1 and at least 3 channels"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map = Matrix::randn(3, channels, 1.0, &mut rng);
        let gram = map.matmul(&map.transpose())?;
        let inv = invert3(&gram).ok_or_else(|| LynxError::invalid("singular codec map"))?;
        let pinv = map.transpose().matmul(&inv)?;
        Ok(Self {
            pool,
            channels,
            map,
            pinv,
        })
    }

    /// Default desk codec: 8× pooling into 4 channels.
    pub fn desk() -> Self {
        Self::new(8, 4, 0x5eed).expect("valid codec")
    }

    pub fn encode(&self, frames: &[Frame]) -> Result<LatentVideo> {
        let first = frames.first().ok_or_else(|| LynxError::invalid("no frames to encode"))?;
        let (w, h) = (first.width, first.height);
        if w % self.pool != 0 || h % self.pool != 0 {
            return Err(LynxError::dims(format!(
                "frame {w}×{h} is not divisible by the pooling factor {}",
                self.pool
            )));
        }
        let (lw, lh) = (w / self.pool, h / self.pool);
        let mut data = Vec::with_capacity(frames.len() * lh * lw * self.channels);
        let area = (self.pool * self.pool) as f64;
        for f in frames {
            if (f.width, f.height) != (w, h) {
                return Err(LynxError::dims("frames of one clip must share a size"));
            }
            for by in 0..lh {
                for bx in 0..lw {
                    let mut rgb = [0.0; 3];
                    for y in by * self.pool..(by + 1) * self.pool {
                        for x in bx * self.pool..(bx + 1) * self.pool {
                            let p = f.pixel(x, y);
                            for k in 0..3 {
                                rgb[k] += p[k];
                            }
                        }
                    }
                    for c in 0..self.channels {
                        let v: f64 = (0..3).map(|k| (2.0 * rgb[k] / area - 1.0) * self.map.get(k, c)).sum();
                        data.push(v);
                    }
                }
            }
        }
        LatentVideo::new(frames.len(), lh, lw, self.channels, data)
    }

    pub fn decode(&self, latent: &LatentVideo) -> Result<Vec<Frame>> {
        if latent.channels != self.channels {
            return Err(LynxError::dims(format!(
                "latent has {} channels, codec {}",
                latent.channels, self.channels
            )));
        }
        let (w, h) = (latent.w * self.pool, latent.h * self.pool);
        let mut out = Vec::with_capacity(latent.t);
        for t in 0..latent.t {
            let mut f = Frame::filled(w, h, [0.0; 3]);
            for by in 0..latent.h {
                for bx in 0..latent.w {
                    let mut rgb = [0.0; 3];
                    for (k, slot) in rgb.iter_mut().enumerate() {
                        let v: f64 = (0..self.channels).map(|c| latent.at(t, by, bx, c) * self.pinv.get(c, k)).sum();
                        *slot = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                    }
                    for y in by * self.pool..(by + 1) * self.pool {
                        for x in bx * self.pool..(bx + 1) * self.pool {
                            f.set_pixel(x, y, rgb);
                        }
                    }
                }
            }
            out.push(f);
        }
        Ok(out)
    }
}

fn invert3(m: &Matrix) -> Option<Matrix> {
    let a = |r, c| m.get(r, c);
    let det = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    if det.abs() < 1e-12 {
        return None;
    }
    let mut inv = Matrix::zeros(3, 3);
    for r in 0..3 {
        for c in 0..3 {
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            inv.set(r, c, (a(r1, c1) * a(r2, c2) - a(r1, c2) * a(r2, c1)) / det);
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn left_inverse_holds() {
        let c = LatentCodec::desk();
        let eye = c.map.matmul(&c.pinv).unwrap();
        assert!(eye.max_abs_diff(&Matrix::identity(3)) < 1e-12);
    }

    #[test]
    fn pooled_colours_survive_round_trip() {
        let c = LatentCodec::new(2, 4, 1).unwrap();
        let mut f = Frame::filled(4, 4, [0.1, 0.5, 0.9]);
        f.set_pixel(3, 3, [0.3, 0.3, 0.3]);
        let lat = c.encode(std::slice::from_ref(&f)).unwrap();
        assert_eq!((lat.t, lat.h, lat.w, lat.channels), (1, 2, 2, 4));
        let back = c.decode(&lat).unwrap();
        let p = back[0].pixel(0, 0);
        assert!((p[0] - 0.1).abs() < 1e-12 && (p[2] - 0.9).abs() < 1e-12);
        let q = back[0].pixel(3, 3);
        assert!((q[0] - (0.1 * 3.0 + 0.3) / 4.0).abs() < 1e-12);
        assert!(c.encode(&[Frame::filled(3, 4, [0.0; 3])]).is_err());
    }
}
