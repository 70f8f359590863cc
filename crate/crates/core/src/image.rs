//! Image tensors and conversion to and from 8-bit PNG files.

use std::path::Path;

use ndarray::{Array3, Array4, ArrayD, Axis, Ix3};

use crate::error::{Error, Result};

/// A `C x H x W` image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
}

/// Decoded pixels in interleaved `H x W x C` order.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels {
    U8(Vec<u8>),
    /// Already in `[-1, 1]`.
    Normalized(Vec<f32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Pixels,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        Self { data: data.as_standard_layout().into_owned() }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(Array3::zeros((c, h, w)))
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels(), self.height(), self.width()]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::new(self.data.mapv(f))
    }

    pub fn mse(&self, other: &ImageTensor) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n
    }

    /// Channel-mean grayscale plane, `H x W`.
    pub fn grayscale(&self) -> ndarray::Array2<f32> {
        self.data.mean_axis(Axis(0)).expect("at least one channel")
    }

    pub fn to_raw(&self) -> RawImage {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut px = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    px.push(self.data[[ch, y, x]]);
                }
            }
        }
        RawImage { width: w, height: h, channels: c, pixels: Pixels::Normalized(px) }
    }

    /// Quantises to 8 bits: `round((x + 1) / 2 * 255)` after clamping.
    pub fn to_u8_interleaved(&self) -> Vec<u8> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let mut out = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = self.data[[ch, y, x]].clamp(-1.0, 1.0);
                    out.push(((v + 1.0) * 0.5 * 255.0).round() as u8);
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height() as u32, self.width() as u32);
        let buf = self.to_u8_interleaved();
        let color = match self.channels() {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::UnsupportedChannelCount(c)),
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer_with_format(path, &buf, w, h, color, image::ImageFormat::Png).map_err(|e| {
            Error::ImageCodec { path: path.to_path_buf(), message: e.to_string() }
        })
    }

    pub fn load_png(path: &Path, size: usize) -> Result<ImageTensor> {
        preprocess(&read_raw(path)?, size)
    }
}

/// Decodes an 8-bit PNG with 1 or 3 channels (alpha is dropped).
pub fn read_raw(path: &Path) -> Result<RawImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)
        .map_err(|e| Error::ImageCodec { path: path.to_path_buf(), message: e.to_string() })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, px) = match img.color().channel_count() {
        1 | 2 => (1, img.to_luma8().into_raw()),
        _ => (3, img.to_rgb8().into_raw()),
    };
    Ok(RawImage { width: w, height: h, channels, pixels: Pixels::U8(px) })
}

/// Bilinear resize to `size x size` with half-pixel centres, values mapped to
/// `[-1, 1]` (`2v/255 - 1` for 8-bit input) and grayscale replicated to RGB.
pub fn preprocess(raw: &RawImage, size: usize) -> Result<ImageTensor> {
    resample(raw, size, size)
}

/// [`preprocess`] to an arbitrary `out_w x out_h`.
pub fn resample(raw: &RawImage, out_w: usize, out_h: usize) -> Result<ImageTensor> {
    if raw.width == 0 || raw.height == 0 || out_w == 0 || out_h == 0 {
        return Err(Error::EmptyImage);
    }
    if raw.channels != 1 && raw.channels != 3 {
        return Err(Error::UnsupportedChannelCount(raw.channels));
    }
    let (w, h, c) = (raw.width, raw.height, raw.channels);
    let expected = w * h * c;
    let src: Vec<f32> = match &raw.pixels {
        Pixels::U8(p) => p.iter().map(|&v| 2.0 * v as f32 / 255.0 - 1.0).collect(),
        Pixels::Normalized(p) => p.clone(),
    };
    if src.len() != expected {
        return Err(Error::shape(expected, src.len()));
    }
    let sample = |ch: usize, y: usize, x: usize| src[(y * w + x) * c + ch];

    let axis = |out_len: usize, in_len: usize| -> Vec<(usize, usize, f32)> {
        let scale = in_len as f64 / out_len as f64;
        (0..out_len)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(in_len - 1);
                (lo, hi, (s - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Array3::<f32>::zeros((3, out_h, out_w));
    for ch in 0..3 {
        let sc = if c == 1 { 0 } else { ch };
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = sample(sc, y0, x0) * (1.0 - fx) + sample(sc, y0, x1) * fx;
                let bot = sample(sc, y1, x0) * (1.0 - fx) + sample(sc, y1, x1) * fx;
                out[[ch, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(ImageTensor::new(out))
}

/// Tiles equally sized images into one grid; `None` cells are filled with
/// `blank`.
pub fn montage(cells: &[Vec<Option<&ImageTensor>>], blank: f32) -> Result<ImageTensor> {
    let first = cells
        .iter()
        .flatten()
        .flatten()
        .next()
        .ok_or(Error::EmptyImage)?;
    let [c, h, w] = first.shape();
    let cols = cells.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Array3::<f32>::from_elem((c, cells.len() * h, cols * w), blank);
    for (r, row) in cells.iter().enumerate() {
        for (k, cell) in row.iter().enumerate() {
            if let Some(img) = cell {
                if img.shape() != [c, h, w] {
                    return Err(Error::shape([c, h, w], img.shape()));
                }
                out.slice_mut(ndarray::s![.., r * h..(r + 1) * h, k * w..(k + 1) * w]).assign(img.data());
            }
        }
    }
    Ok(ImageTensor::new(out))
}

/// Stacks images into an `N x C x H x W` batch.
pub fn stack(images: &[&ImageTensor]) -> Array4<f32> {
    let [c, h, w] = images[0].shape();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img.data());
    }
    out
}

pub fn stack_dyn<T: crate::autograd::Scalar>(images: &[&ImageTensor]) -> ArrayD<T> {
    stack(images).mapv(|v| T::from_f64(v as f64)).into_dyn()
}

/// Splits an `N x C x H x W` array back into images.
pub fn unstack<T: crate::autograd::Scalar>(batch: &ArrayD<T>) -> Vec<ImageTensor> {
    let s = batch.shape();
    (0..s[0])
        .map(|i| {
            let plane = batch.index_axis(Axis(0), i).mapv(|v| v.to_f64() as f32);
            ImageTensor::new(plane.into_dimensionality::<Ix3>().expect("NCHW batch"))
        })
        .collect()
}
