//! Adaptive lip-region masks: landmark bounds with padding, gap filling,
//! forward-looking temporal smoothing of the box corners, and rasterization
//! into rectangular binary masks.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::{BoundingBox, LandmarkSequence, VideoClip};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskParams {
    /// Fraction of the landmark box width/height added on every side.
    pub pad_ratio: f64,
    /// Weight of the current frame in the smoothing step.
    pub alpha: f64,
    /// Longest tolerated run of frames without landmarks.
    pub max_gap: usize,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { pad_ratio: 0.25, alpha: 0.75, max_gap: 8 }
    }
}

#[derive(Debug, Clone)]
pub struct MaskSequence {
    /// Smoothed, real-valued boxes; one per frame.
    pub boxes: Vec<BoundingBox>,
    /// `[F, 1, H, W]`, 1 marks the editable region.
    pub binary_masks: Tensor,
    /// Frames whose rasterized box is empty.
    pub degenerate: Vec<usize>,
}

impl MaskSequence {
    pub fn num_frames(&self) -> usize {
        self.boxes.len()
    }

    /// Fraction of pixels marked editable in each frame.
    pub fn coverage(&self) -> Result<Vec<f64>> {
        let (_, _, h, w) = self.binary_masks.dims4()?;
        let sums = self.binary_masks.to_dtype(DType::F64)?.sum((1, 2, 3))?.to_vec1::<f64>()?;
        Ok(sums.into_iter().map(|s| s / (h * w) as f64).collect())
    }

    pub fn frame_mask(&self, index: usize) -> Result<Tensor> {
        Ok(self.binary_masks.get(index)?)
    }

    pub fn slice(&self, start: usize, len: usize) -> Result<MaskSequence> {
        Ok(MaskSequence {
            boxes: self.boxes[start..start + len].to_vec(),
            binary_masks: self.binary_masks.narrow(0, start, len)?,
            degenerate: self.degenerate.iter().filter(|&&f| f >= start && f < start + len).map(|f| f - start).collect(),
        })
    }
}

/// Per-frame padded bounds of the lip landmarks, clamped to the frame.
pub fn landmarks_to_box(
    landmarks: &LandmarkSequence,
    pad_ratio: f64,
    width: usize,
    height: usize,
) -> Result<Vec<Option<BoundingBox>>> {
    if !(pad_ratio >= 0.0) {
        return Err(Error::InvalidArgument(format!("pad_ratio must be nonnegative, got {pad_ratio}")));
    }
    Ok(landmarks
        .frames
        .iter()
        .map(|pts| {
            pts.as_deref()
                .and_then(BoundingBox::enclosing)
                .map(|b| b.expand(pad_ratio).clamp(width, height))
        })
        .collect())
}

/// Fills missing boxes: interior runs by linear interpolation of the corner
/// coordinates, leading and trailing runs by copying the nearest detection.
pub fn fill_missing(boxes: &[Option<BoundingBox>], max_gap: usize) -> Result<Vec<BoundingBox>> {
    let known: Vec<usize> = boxes.iter().enumerate().filter_map(|(i, b)| b.map(|_| i)).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return Err(Error::NoFace);
    };
    let mut start = None;
    for (i, b) in boxes.iter().chain(std::iter::once(&Some(boxes[first].unwrap()))).enumerate() {
        match (b, start) {
            (None, None) => start = Some(i),
            (Some(_), Some(s)) => {
                if i - s > max_gap {
                    return Err(Error::GapTooLong { start: s, run: i - s, max_gap });
                }
                start = None;
            }
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let filled = match b {
            Some(b) => *b,
            None if i < first => boxes[first].unwrap(),
            None if i > last => boxes[last].unwrap(),
            None => {
                let next = known.partition_point(|&k| k < i);
                let (a, z) = (known[next - 1], known[next]);
                let t = (i - a) as f64 / (z - a) as f64;
                let (ca, cz) = (boxes[a].unwrap().coords(), boxes[z].unwrap().coords());
                BoundingBox::from_coords(std::array::from_fn(|k| ca[k] + t * (cz[k] - ca[k])))
            }
        };
        out.push(filled);
    }
    Ok(out)
}

/// `c'_t = alpha * c_t + (1 - alpha) * c_{t+1}` for every corner coordinate;
/// the last frame has no successor and is kept.
pub fn smooth_boxes(boxes: &[BoundingBox], alpha: f64) -> Result<Vec<BoundingBox>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut out = Vec::with_capacity(boxes.len());
    for (t, b) in boxes.iter().enumerate() {
        match boxes.get(t + 1) {
            Some(next) => {
                let (c, n) = (b.coords(), next.coords());
                out.push(BoundingBox::from_coords(std::array::from_fn(|k| alpha * c[k] + (1.0 - alpha) * n[k])));
            }
            None => out.push(*b),
        }
    }
    Ok(out)
}

/// Rasterizes each box (rounded to the pixel grid) into `[F, 1, H, W]`.
pub fn rasterize(boxes: &[BoundingBox], height: usize, width: usize) -> Result<MaskSequence> {
    let mut data = vec![0f32; boxes.len() * height * width];
    let mut degenerate = Vec::new();
    for (f, b) in boxes.iter().enumerate() {
        let (c0, r0, c1, r1) = b.clamp(width, height).pixel_bounds();
        if c1 <= c0 || r1 <= r0 {
            degenerate.push(f);
            continue;
        }
        let plane = &mut data[f * height * width..(f + 1) * height * width];
        for row in r0..r1 {
            plane[row * width + c0..row * width + c1].fill(1.0);
        }
    }
    let binary_masks = Tensor::from_vec(data, (boxes.len(), 1, height, width), &Device::Cpu)?;
    Ok(MaskSequence { boxes: boxes.to_vec(), binary_masks, degenerate })
}

/// Full chain: landmarks -> padded boxes -> gap fill -> smoothing -> masks.
pub fn build_masks(landmarks: &LandmarkSequence, height: usize, width: usize, params: &MaskParams) -> Result<MaskSequence> {
    let raw = landmarks_to_box(landmarks, params.pad_ratio, width, height)?;
    let filled = fill_missing(&raw, params.max_gap)?;
    let smoothed = smooth_boxes(&filled, params.alpha)?;
    rasterize(&smoothed, height, width)
}

/// Replaces editable-region pixels with `fill`; other pixels are untouched.
pub fn apply_mask(clip: &VideoClip, masks: &MaskSequence, fill: f32) -> Result<VideoClip> {
    let (f, c, h, w) = clip.frames().dims4()?;
    let (mf, mc, mh, mw) = masks.binary_masks.dims4()?;
    if (mf, mc, mh, mw) != (f, 1, h, w) {
        return Err(Error::shape(format!("masks {:?} do not match clip {:?}", masks.binary_masks.dims(), clip.frames().dims())));
    }
    let selector = masks.binary_masks.to_dtype(DType::U8)?.broadcast_as((f, c, h, w))?;
    let fill = Tensor::full(fill, (f, c, h, w), &Device::Cpu)?;
    let masked = selector.where_cond(&fill, clip.frames())?;
    clip.with_frames(masked)
}
