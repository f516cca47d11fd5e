//! Reduce an RGB capture to the plane lit by the laser, resample, normalize.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("expected {expected} bytes for a {width}x{height} RGB image, got {actual}")]
    DataLength {
        width: usize,
        height: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image has zero width or height")]
    Empty,
    #[error("expected 3 channels, got {0}")]
    Channels(usize),
    #[error("target side must be at least 1")]
    ZeroTarget,
    #[error("unknown laser color '{0}' (expected red, green or blue)")]
    UnknownLaser(String),
}

/// Laser source color; selects the RGB plane the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaserColor {
    Red,
    Green,
    Blue,
}

impl LaserColor {
    pub const ALL: [LaserColor; 3] = [LaserColor::Red, LaserColor::Green, LaserColor::Blue];

    /// Index into RGB-interleaved pixels.
    pub fn channel(self) -> usize {
        match self {
            LaserColor::Red => 0,
            LaserColor::Green => 1,
            LaserColor::Blue => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LaserColor::Red => "red",
            LaserColor::Green => "green",
            LaserColor::Blue => "blue",
        }
    }
}

impl fmt::Display for LaserColor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LaserColor {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "red" => Ok(LaserColor::Red),
            "green" => Ok(LaserColor::Green),
            "blue" => Ok(LaserColor::Blue),
            _ => Err(PreprocessError::UnknownLaser(s.to_string())),
        }
    }
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RawImage {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::Empty);
        }
        let expected = width * height * Self::CHANNELS;
        if data.len() != expected {
            return Err(PreprocessError::DataLength {
                width,
                height,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    /// Interleave three planes of equal size into one RGB image.
    pub fn from_planes(planes: [&Plane; 3]) -> Result<Self, PreprocessError> {
        let (w, h) = (planes[0].width, planes[0].height);
        for p in &planes[1..] {
            if p.width != w || p.height != h {
                return Err(PreprocessError::DataLength {
                    width: w,
                    height: h,
                    expected: w * h,
                    actual: p.width * p.height,
                });
            }
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for i in 0..w * h {
            data.extend(planes.iter().map(|p| p.data[i]));
        }
        Self::new(w, h, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn channels(&self) -> usize {
        Self::CHANNELS
    }

    /// Copy of one channel.
    pub fn plane(&self, channel: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(channel).step_by(3).copied().collect(),
        }
    }
}

/// Single-channel 8-bit image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, PreprocessError> {
        if width == 0 || height == 0 {
            return Err(PreprocessError::Empty);
        }
        if data.len() != width * height {
            return Err(PreprocessError::DataLength {
                width,
                height,
                expected: width * height,
                actual: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

pub fn extract_channel(img: &RawImage, laser: LaserColor) -> Plane {
    img.plane(laser.channel())
}

/// Largest centered square.
pub fn crop_center(plane: &Plane) -> Plane {
    let side = plane.width.min(plane.height);
    let x0 = (plane.width - side) / 2;
    let y0 = (plane.height - side) / 2;
    let mut data = Vec::with_capacity(side * side);
    for y in y0..y0 + side {
        data.extend_from_slice(&plane.data[y * plane.width + x0..][..side]);
    }
    Plane {
        width: side,
        height: side,
        data,
    }
}

/// Source coordinate and blend weight for each output index, half-pixel centers.
fn sample_positions(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resample to `target_side × target_side` with half-pixel centers.
pub fn resize_bilinear(plane: &Plane, target_side: usize) -> Result<Plane, PreprocessError> {
    if target_side == 0 {
        return Err(PreprocessError::ZeroTarget);
    }
    if plane.width == 0 || plane.height == 0 {
        return Err(PreprocessError::Empty);
    }
    if plane.width == target_side && plane.height == target_side {
        return Ok(plane.clone());
    }
    let xs = sample_positions(plane.width, target_side);
    let ys = sample_positions(plane.height, target_side);
    let mut data = Vec::with_capacity(target_side * target_side);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = plane.at(x0, y0) as f64 * (1.0 - fx) + plane.at(x1, y0) as f64 * fx;
            let bottom = plane.at(x0, y1) as f64 * (1.0 - fx) + plane.at(x1, y1) as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Plane {
        width: target_side,
        height: target_side,
        data,
    })
}

/// `value / 255` as an `[H, W, 1]` float tensor.
pub fn normalize(plane: &Plane) -> Tensor<f32> {
    Tensor::from_parts_unchecked(
        vec![plane.height, plane.width, 1],
        plane.data.iter().map(|&v| v as f32 / 255.0).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub laser: LaserColor,
    pub side: usize,
    /// Center-crop to a square before resizing instead of stretching.
    pub crop_center: bool,
}

impl PreprocessOptions {
    pub fn new(laser: LaserColor, side: usize) -> Self {
        Self {
            laser,
            side,
            crop_center: false,
        }
    }
}

/// extract_channel -> resize_bilinear -> normalize.
pub fn preprocess(img: &RawImage, laser: LaserColor, side: usize) -> Result<Tensor<f32>, PreprocessError> {
    preprocess_with(img, &PreprocessOptions::new(laser, side))
}

pub fn preprocess_with(img: &RawImage, opts: &PreprocessOptions) -> Result<Tensor<f32>, PreprocessError> {
    let mut plane = extract_channel(img, opts.laser);
    if opts.crop_center {
        plane = crop_center(&plane);
    }
    Ok(normalize(&resize_bilinear(&plane, opts.side)?))
}
