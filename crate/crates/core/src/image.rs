//! Planar float images.

use std::path::Path;

use osr_autodiff::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ColorSpace {
    Rgb,
    Luma,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            Self::Rgb => 3,
            Self::Luma => 1,
        }
    }
}

/// `H×W×C` image with values nominally in `[0, 1]`, stored channel-planar (`C` planes of
/// `H·W` row-major pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    space: ColorSpace,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, space: ColorSpace, data: Vec<f32>) -> Result<Self> {
        let want = height * width * space.channels();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "{height}x{width} {space:?} image needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            space,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, space: ColorSpace, value: f32) -> Self {
        Self {
            height,
            width,
            space,
            data: vec![value; height * width * space.channels()],
        }
    }

    /// `f(channel, y, x)` for every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        space: ColorSpace,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * space.channels());
        for c in 0..space.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            space,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if (self.height, self.width, self.space) != (other.height, other.width, other.space) {
            return Err(Error::Shape(format!(
                "{}x{} {:?} vs {}x{} {:?}",
                self.height, self.width, self.space, other.height, other.width, other.space
            )));
        }
        Ok(())
    }

    /// Bicubic upsampling (Keys kernel, `a = -0.5`, half-pixel centres, replicated edges).
    pub fn upsample_bicubic(&self, factor: usize) -> Self {
        let (h, w) = (self.height * factor, self.width * factor);
        let taps = |dst: usize, len: usize| -> [(usize, f32); 4] {
            let src = (dst as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let frac = src - base;
            let mut out = [(0usize, 0f32); 4];
            for (k, slot) in out.iter_mut().enumerate() {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, len as f64 - 1.0) as usize;
                *slot = (idx, cubic(offset - frac) as f32);
            }
            out
        };
        let ytaps: Vec<_> = (0..h).map(|y| taps(y, self.height)).collect();
        let xtaps: Vec<_> = (0..w).map(|x| taps(x, self.width)).collect();
        let mut data = Vec::with_capacity(h * w * self.channels());
        for c in 0..self.channels() {
            let plane = self.plane(c);
            // horizontal pass, then vertical
            let mut rows = vec![0f32; self.height * w];
            for y in 0..self.height {
                for (x, tx) in xtaps.iter().enumerate() {
                    rows[y * w + x] = tx.iter().map(|&(i, k)| k * plane[y * self.width + i]).sum();
                }
            }
            for ty in &ytaps {
                for x in 0..w {
                    data.push(ty.iter().map(|&(i, k)| k * rows[i * w + x]).sum());
                }
            }
        }
        Self {
            height: h,
            width: w,
            space: self.space,
            data,
        }
    }

    /// Mean over non-overlapping `factor×factor` blocks.
    pub fn box_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Config(format!(
                "downscale {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let inv = 1.0 / (factor * factor) as f64;
        Ok(Self::from_fn(h, w, self.space, |c, y, x| {
            let mut acc = 0f64;
            for dy in 0..factor {
                for dx in 0..factor {
                    acc += self.get(c, y * factor + dy, x * factor + dx) as f64;
                }
            }
            (acc * inv) as f32
        }))
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels(), self.height, self.width], |i| {
            T::from_f64(self.data[i] as f64)
        })
    }

    /// Packs equally-shaped images into an `N×C×H×W` tensor.
    pub fn stack<T: Scalar>(images: &[&ImagePlane]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            first.same_shape(img)?;
            data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        Tensor::from_vec(
            &[images.len(), first.channels(), first.height, first.width],
            data,
        )
        .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Splits an `N×C×H×W` tensor back into images.
    pub fn unstack<T: Scalar>(t: &Tensor<T>, space: ColorSpace) -> Result<Vec<ImagePlane>> {
        let s = t.shape();
        if s.len() != 4 || s[1] != space.channels() {
            return Err(Error::Shape(format!("cannot unstack {s:?} as {space:?}")));
        }
        let per = s[1] * s[2] * s[3];
        Ok(t.data()
            .chunks(per)
            .map(|chunk| ImagePlane {
                height: s[2],
                width: s[3],
                space,
                data: chunk.iter().map(|v| v.to_f64_lossy() as f32).collect(),
            })
            .collect())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Format(format!("{}: {other}", path.display())),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(Self::from_fn(h, w, ColorSpace::Rgb, |c, y, x| {
            img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        }))
    }

    /// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let result = match self.space {
            ColorSpace::Rgb => image::RgbImage::from_fn(w, h, |x, y| {
                image::Rgb(std::array::from_fn(|c| q(self.get(c, y as usize, x as usize))))
            })
            .save(path),
            ColorSpace::Luma => {
                image::GrayImage::from_fn(w, h, |x, y| image::Luma([q(self.get(0, y as usize, x as usize))]))
                    .save(path)
            }
        };
        result.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bicubic_preserves_constants() {
        let img = ImagePlane::filled(4, 5, ColorSpace::Rgb, 0.3);
        let up = img.upsample_bicubic(4);
        assert_eq!((up.height(), up.width()), (16, 20));
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-6));
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_in_the_interior() {
        let img = ImagePlane::from_fn(8, 8, ColorSpace::Luma, |_, _, x| x as f32 * 0.1);
        let up = img.upsample_bicubic(4);
        for x in 8..24 {
            let src = (x as f64 + 0.5) / 4.0 - 0.5;
            assert!((up.get(0, 10, x) as f64 - 0.1 * src).abs() < 1e-5);
        }
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let img = ImagePlane::from_fn(4, 4, ColorSpace::Luma, |_, y, x| (y * 4 + x) as f32);
        let d = img.box_downsample(2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(img.box_downsample(3).is_err());
    }

    #[test]
    fn stack_round_trips() {
        let a = ImagePlane::from_fn(2, 3, ColorSpace::Rgb, |c, y, x| (c + y + x) as f32 * 0.1);
        let t = ImagePlane::stack::<f32>(&[&a, &a]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 3]);
        let back = ImagePlane::unstack(&t, ColorSpace::Rgb).unwrap();
        assert_eq!(back, vec![a.clone(), a]);
    }
}
