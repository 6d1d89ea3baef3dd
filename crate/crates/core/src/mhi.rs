//! Region of interest construction and two-channel motion history images.
//!
//! A mask sequence holds `M` binary frames, newest last. Frame `k` lies
//! `i = M - 1 - k` steps in the past and is drawn with decay `(M - i) / M`.
//! Frames are composited oldest to newest so newer silhouettes overwrite
//! older ones.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel 0 holds the person silhouette, channel 1 the bicycle.
pub const CHANNELS: usize = 2;

/// Time between mask frames in seconds.
pub const FRAME_STEP: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl BoundingBox {
    pub fn new(u_min: f64, v_min: f64, u_max: f64, v_max: f64) -> Result<Self> {
        let b = Self {
            u_min,
            v_min,
            u_max,
            v_max,
        };
        b.validate()?;
        Ok(b)
    }

    fn validate(&self) -> Result<()> {
        if !(self.u_min < self.u_max) || !(self.v_min < self.v_max) {
            return Err(Error::MalformedInput(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn union(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            u_min: self.u_min.min(other.u_min),
            v_min: self.v_min.min(other.v_min),
            u_max: self.u_max.max(other.u_max),
            v_max: self.v_max.max(other.v_max),
        }
    }

    fn intersects_frame(&self, width: usize, height: usize) -> bool {
        self.u_max > 0.0
            && self.v_max > 0.0
            && self.u_min < width as f64
            && self.v_min < height as f64
    }
}

/// Union of the person and bicycle boxes, scaled by `f_b` about its centre.
pub fn build_roi(person: &BoundingBox, bike: &BoundingBox, f_b: f64) -> Result<BoundingBox> {
    if !(f_b >= 1.0) || !f_b.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "ROI scale factor must be >= 1, got {f_b}"
        )));
    }
    person.validate()?;
    bike.validate()?;
    let u = person.union(bike);
    let cu = 0.5 * (u.u_min + u.u_max);
    let cv = 0.5 * (u.v_min + u.v_max);
    let hw = 0.5 * u.width() * f_b;
    let hh = 0.5 * u.height() * f_b;
    Ok(BoundingBox {
        u_min: cu - hw,
        v_min: cv - hh,
        u_max: cu + hw,
        v_max: cv + hh,
    })
}

/// MHI generation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MhiParams {
    /// Number of frames encoded.
    pub m: usize,
    pub width: usize,
    pub height: usize,
    /// ROI enlargement factor.
    pub f_b: f64,
}

impl Default for MhiParams {
    fn default() -> Self {
        Self {
            m: 50,
            width: 64,
            height: 64,
            f_b: 1.5,
        }
    }
}

impl MhiParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidParameter(
                "M, W and H must be positive".into(),
            ));
        }
        if !(self.f_b >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "f_b must be >= 1, got {}",
                self.f_b
            )));
        }
        Ok(())
    }
}

/// Binary two-channel segmentation frame, stored channel-planar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskFrame {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl MaskFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; CHANNELS * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != CHANNELS * width * height {
            return Err(Error::MalformedInput(format!(
                "mask data has {} values, expected {}",
                data.len(),
                CHANNELS * width * height
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::MalformedInput("mask values must be 0 or 1".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    fn idx(&self, u: usize, v: usize, c: usize) -> usize {
        (c * self.height + v) * self.width + u
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> u8 {
        self.data[self.idx(u, v, c)]
    }

    pub fn set(&mut self, u: usize, v: usize, c: usize, on: bool) {
        let i = self.idx(u, v, c);
        self.data[i] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Tight bounding box of the set pixels of channel `c`.
    pub fn channel_bbox(&self, c: usize) -> Option<BoundingBox> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v, c) == 1 {
                    b = Some(match b {
                        None => (u, v, u, v),
                        Some((a, bb, cc, d)) => (a.min(u), bb.min(v), cc.max(u), d.max(v)),
                    });
                }
            }
        }
        b.map(|(u0, v0, u1, v1)| BoundingBox {
            u_min: u0 as f64,
            v_min: v0 as f64,
            u_max: u1 as f64 + 1.0,
            v_max: v1 as f64 + 1.0,
        })
    }

    /// Pixel-centre centroid of channel `c`.
    pub fn channel_centroid(&self, c: usize) -> Option<(f64, f64)> {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
        for v in 0..self.height {
            for u in 0..self.width {
                if self.get(u, v, c) == 1 {
                    su += u as f64 + 0.5;
                    sv += v as f64 + 0.5;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (su / n as f64, sv / n as f64))
    }
}

/// `M` mask frames spaced 0.02 s apart, newest last.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub frames: Vec<MaskFrame>,
}

impl MaskSequence {
    pub fn new(frames: Vec<MaskFrame>) -> Result<Self> {
        let seq = Self { frames };
        seq.validate()?;
        Ok(seq)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .frames
            .first()
            .ok_or_else(|| Error::MalformedInput("empty mask sequence".into()))?;
        if self
            .frames
            .iter()
            .any(|f| f.width != first.width || f.height != first.height)
        {
            return Err(Error::MalformedInput("mask frames differ in size".into()));
        }
        Ok(())
    }
}

/// Two-channel decayed silhouette image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionHistoryImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f32>,
}

impl MotionHistoryImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; CHANNELS * width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize, c: usize) -> f32 {
        self.data[(c * self.height + v) * self.width + u]
    }

    /// Channel-planar values, `[c][v][u]`.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Crops every frame to `roi`, resizes it to `width x height` by nearest
/// neighbour and composites the decayed silhouettes oldest to newest.
///
/// Parts of the ROI outside the frame read as zero.
pub fn generate_mhi(
    seq: &MaskSequence,
    roi: &BoundingBox,
    width: usize,
    height: usize,
) -> Result<MotionHistoryImage> {
    seq.validate()?;
    roi.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidParameter("MHI size must be positive".into()));
    }
    let (fw, fh) = (seq.frames[0].width, seq.frames[0].height);
    if !roi.intersects_frame(fw, fh) {
        return Err(Error::MalformedInput(format!(
            "ROI {roi:?} does not intersect the {fw}x{fh} frame"
        )));
    }

    // Source pixel for every output column/row, None when outside the frame.
    let sample_axis = |lo: f64, extent: f64, n: usize, limit: usize| -> Vec<Option<usize>> {
        (0..n)
            .map(|k| {
                let s = (lo + (k as f64 + 0.5) * extent / n as f64).floor();
                (s >= 0.0 && s < limit as f64).then_some(s as usize)
            })
            .collect()
    };
    let cols = sample_axis(roi.u_min, roi.width(), width, fw);
    let rows = sample_axis(roi.v_min, roi.height(), height, fh);

    let m = seq.frames.len();
    let mut out = MotionHistoryImage::zeros(width, height);
    for (k, frame) in seq.frames.iter().enumerate() {
        let i = m - 1 - k;
        let tau = ((m - i) as f64 / m as f64) as f32;
        for c in 0..CHANNELS {
            for (v, src_v) in rows.iter().enumerate() {
                let Some(sv) = *src_v else { continue };
                for (u, src_u) in cols.iter().enumerate() {
                    let Some(su) = *src_u else { continue };
                    if frame.get(su, sv, c) == 1 {
                        out.data[(c * height + v) * width + u] = tau;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `{scene_id}_{frame_index}_{cam}.png`
pub fn mask_file_name(scene_id: &str, frame_index: usize, cam: u8) -> String {
    format!("{scene_id}_{frame_index}_{cam}.png")
}

fn write_rgb_png<W: Write>(writer: W, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let mut enc = png::Encoder::new(writer, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::Format(e.to_string()))?;
    w.write_image_data(rgb)
        .map_err(|e| Error::Format(e.to_string()))?;
    w.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

fn read_rgb_png<R: Read>(mut reader: R) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut r = decoder
        .read_info()
        .map_err(|e| Error::Format(e.to_string()))?;
    let size = r
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = r
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format("expected an 8-bit PNG".into()));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Format(format!(
                "unsupported PNG color type {other:?}"
            )))
        }
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(channels) {
        rgb.extend_from_slice(&px[..3]);
    }
    Ok((w, h, rgb))
}

fn to_rgb(width: usize, height: usize, value: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(width * height * 3);
    for v in 0..height {
        for u in 0..width {
            rgb.push(value(u, v, 0));
            rgb.push(value(u, v, 1));
            rgb.push(0);
        }
    }
    rgb
}

/// Person in R, bicycle in G, B = 0; set pixels are 255.
pub fn write_mask_png<W: Write>(writer: W, mask: &MaskFrame) -> Result<()> {
    let rgb = to_rgb(mask.width, mask.height, |u, v, c| mask.get(u, v, c) * 255);
    write_rgb_png(writer, mask.width, mask.height, &rgb)
}

pub fn read_mask_png<R: Read>(reader: R) -> Result<MaskFrame> {
    let (w, h, rgb) = read_rgb_png(reader)?;
    let mut mask = MaskFrame::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            let px = &rgb[(v * w + u) * 3..];
            mask.set(u, v, 0, px[0] >= 128);
            mask.set(u, v, 1, px[1] >= 128);
        }
    }
    Ok(mask)
}

/// Values stored as `round(255 * tau)`.
pub fn write_mhi_png<W: Write>(writer: W, mhi: &MotionHistoryImage) -> Result<()> {
    let rgb = to_rgb(mhi.width, mhi.height, |u, v, c| {
        (255.0 * mhi.get(u, v, c)).round() as u8
    });
    write_rgb_png(writer, mhi.width, mhi.height, &rgb)
}

/// Decodes an MHI PNG; values come back quantised to multiples of 1/255.
pub fn read_mhi_png<R: Read>(reader: R) -> Result<MotionHistoryImage> {
    let (w, h, rgb) = read_rgb_png(reader)?;
    let mut mhi = MotionHistoryImage::zeros(w, h);
    for c in 0..CHANNELS {
        for v in 0..h {
            for u in 0..w {
                mhi.data[(c * h + v) * w + u] = rgb[(v * w + u) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Ok(mhi)
}
