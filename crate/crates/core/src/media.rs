//! RGB frames in `[0, 1]`, PNG images and directories of numbered PNG frames.

use std::path::{Path, PathBuf};

use crate::error::{LynxError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub data: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(LynxError::dims(format!(
                "{} values for a {width}×{height} RGB frame",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mut out = [0.0; 3];
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        for k in 0..3 {
            out[k] = (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy) + (c[k] * (1.0 - fx) + d[k] * fx) * fy;
        }
        out
    }

    /// Bilinear resize with pixel centres aligned; same size is a copy.
    pub fn resize(&self, width: usize, height: usize) -> Frame {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut out = Frame::filled(width, height, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let p = self.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5);
                out.set_pixel(x, y, p);
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| LynxError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        Frame::new(w as usize, h as usize, data)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        image::save_buffer(
            path,
            &self.to_rgb8(),
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| LynxError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Quantizes to 8 bits, as a PNG round trip would.
    pub fn quantized(&self) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            data: self.to_rgb8().into_iter().map(|v| v as f64 / 255.0).collect(),
        }
    }
}

/// Sorted PNG files of a frame directory.
pub fn frame_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// A PNG file is one frame; a directory holds numbered PNG frames.
pub fn load_media(path: &Path) -> Result<Vec<Frame>> {
    if path.is_dir() {
        let paths = frame_paths(path)?;
        if paths.is_empty() {
            return Err(LynxError::Image {
                path: path.to_path_buf(),
                message: "directory holds no PNG frames".into(),
            });
        }
        paths.iter().map(|p| Frame::load_png(p)).collect()
    } else {
        Ok(vec![Frame::load_png(path)?])
    }
}

/// First frame of an image or frame directory.
pub fn load_first_frame(path: &Path) -> Result<Frame> {
    if path.is_dir() {
        let paths = frame_paths(path)?;
        let first = paths.first().ok_or_else(|| LynxError::Image {
            path: path.to_path_buf(),
            message: "directory holds no PNG frames".into(),
        })?;
        Frame::load_png(first)
    } else {
        Frame::load_png(path)
    }
}

/// Writes `frame_0000.png`, `frame_0001.png`, ... into `dir`.
pub fn save_frames(dir: &Path, frames: &[Frame]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = dir.join(format!("frame_{i:04}.png"));
            f.save_png(&p)?;
            Ok(p)
        })
        .collect()
}
