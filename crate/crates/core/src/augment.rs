//! Cutout and cutmix.
//!
//! Appliers are pure functions of an image and an explicit spec; samplers turn
//! an [`RngStream`] into specs. Keeping the two apart makes every augmentation
//! event replayable from its stream fields alone.

use std::io::Write;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};

/// Pixel value written into cut-out regions (normalized space).
pub const FILL: f64 = 0.0;

/// Padding used by the training-time crop/flip transform.
pub const TRAIN_PAD: usize = 4;

/// Per-sample transform applied to training images every epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTransform {
    /// [`pad_crop_flip`] with [`TRAIN_PAD`] pixels of zero padding.
    #[default]
    PadCropFlip,
    /// Images are used as stored; for non-spatial data such as synthetic blobs.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageDims {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Axis-aligned box; the top-left corner may lie outside the image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CutoutBox {
    pub row0: i64,
    pub col0: i64,
    pub height: usize,
    pub width: usize,
}

impl CutoutBox {
    pub fn new(row0: i64, col0: i64, height: usize, width: usize) -> Self {
        CutoutBox {
            row0,
            col0,
            height,
            width,
        }
    }

    /// Box of side lengths `(height, width)` centered on `(cy, cx)`.
    pub fn centered(cy: usize, cx: usize, height: usize, width: usize) -> Self {
        CutoutBox {
            row0: cy as i64 - (height / 2) as i64,
            col0: cx as i64 - (width / 2) as i64,
            height,
            width,
        }
    }

    /// Half-open `(r0, r1, c0, c1)` after clipping to the image.
    pub fn clip(&self, dims: ImageDims) -> (usize, usize, usize, usize) {
        let clamp = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let r0 = clamp(self.row0, dims.height);
        let r1 = clamp(self.row0 + self.height as i64, dims.height);
        let c0 = clamp(self.col0, dims.width);
        let c1 = clamp(self.col0 + self.width as i64, dims.width);
        (r0, r1.max(r0), c0, c1.max(c0))
    }

    pub fn clipped_area(&self, dims: ImageDims) -> usize {
        let (r0, r1, c0, c1) = self.clip(dims);
        (r1 - r0) * (c1 - c0)
    }
}

/// Surviving area fraction of the primary image: `1 - clipped_area / area`.
pub fn cutmix_lambda(cut: &CutoutBox, dims: ImageDims) -> f64 {
    1.0 - cut.clipped_area(dims) as f64 / dims.area() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CutmixEvent {
    #[serde(rename = "box")]
    pub cut: CutoutBox,
    pub partner: usize,
    pub lambda: f64,
}

impl CutmixEvent {
    /// Builds an event, computing `lambda` from the clipped box.
    pub fn new(cut: CutoutBox, partner: usize, dims: ImageDims) -> Self {
        CutmixEvent {
            cut,
            partner,
            lambda: cutmix_lambda(&cut, dims),
        }
    }

    /// True if the stored lambda equals the recomputed area ratio exactly.
    pub fn is_consistent(&self, dims: ImageDims) -> bool {
        self.lambda == cutmix_lambda(&self.cut, dims)
    }
}

fn for_each_in_box(dims: ImageDims, cut: &CutoutBox, mut f: impl FnMut(usize)) {
    let (r0, r1, c0, c1) = cut.clip(dims);
    for c in 0..dims.channels {
        for r in r0..r1 {
            let row = (c * dims.height + r) * dims.width;
            for col in c0..c1 {
                f(row + col);
            }
        }
    }
}

/// Copy of `image` with the clipped box set to [`FILL`].
pub fn apply_cutout(image: &[f64], dims: ImageDims, cut: &CutoutBox) -> Vec<f64> {
    debug_assert_eq!(image.len(), dims.len());
    let mut out = image.to_vec();
    for_each_in_box(dims, cut, |i| out[i] = FILL);
    out
}

/// Pastes the clipped box of `b` into a copy of `a`; returns the image and lambda.
pub fn apply_cutmix(
    a: &[f64],
    b: &[f64],
    dims: ImageDims,
    cut: &CutoutBox,
) -> Result<(Vec<f64>, f64)> {
    if a.len() != b.len() || a.len() != dims.len() {
        return Err(Error::usage(format!(
            "cutmix images must both match {:?}: got {} and {} values",
            dims.as_array(),
            a.len(),
            b.len()
        )));
    }
    let mut out = a.to_vec();
    for_each_in_box(dims, cut, |i| out[i] = b[i]);
    Ok((out, cutmix_lambda(cut, dims)))
}

/// Square cutout of side `size` centered uniformly over the pixel grid.
pub fn sample_cutout_box(stream: &mut RngStream, dims: ImageDims, size: usize) -> CutoutBox {
    debug_assert!(size <= dims.height.min(dims.width));
    let size = size.min(dims.height.min(dims.width));
    let cy = stream.below(dims.height as u64) as usize;
    let cx = stream.below(dims.width as u64) as usize;
    CutoutBox::centered(cy, cx, size, size)
}

/// Cutmix event with `lambda >= lambda_min`.
///
/// Draws the partner uniformly from `partner_pool`, then a target
/// `lambda' ~ U(lambda_min, 1)`, a box with sides `floor(side * sqrt(1 - lambda'))`
/// and a uniform center. Clipping and flooring only shrink the box, so the
/// rejection loop accepts on the first draw in practice.
pub fn sample_cutmix_event(
    stream: &mut RngStream,
    dims: ImageDims,
    partner_pool: &[usize],
    lambda_min: f64,
) -> CutmixEvent {
    assert!(!partner_pool.is_empty(), "cutmix partner pool is empty");
    debug_assert!((0.0..1.0).contains(&lambda_min));
    let partner = partner_pool[stream.below(partner_pool.len() as u64) as usize];
    loop {
        let target = stream.uniform(lambda_min, 1.0);
        let ratio = (1.0 - target).sqrt();
        let h = (dims.height as f64 * ratio) as usize;
        let w = (dims.width as f64 * ratio) as usize;
        let cy = stream.below(dims.height as u64) as usize;
        let cx = stream.below(dims.width as u64) as usize;
        let event = CutmixEvent::new(CutoutBox::centered(cy, cx, h, w), partner, dims);
        if event.lambda >= lambda_min {
            return event;
        }
    }
}

/// Zero-pads by `pad` pixels, takes a random crop of the original size, and
/// flips horizontally with probability 1/2.
pub fn pad_crop_flip(
    stream: &mut RngStream,
    image: &[f64],
    dims: ImageDims,
    pad: usize,
) -> Vec<f64> {
    let span = 2 * pad as u64 + 1;
    let dy = stream.below(span) as i64 - pad as i64;
    let dx = stream.below(span) as i64 - pad as i64;
    let flip = stream.bernoulli(0.5);
    let (h, w) = (dims.height as i64, dims.width as i64);
    let mut out = vec![0.0; image.len()];
    for c in 0..dims.channels {
        let plane = c * dims.area();
        for y in 0..h {
            let sy = y + dy;
            if sy < 0 || sy >= h {
                continue;
            }
            for x in 0..w {
                let xx = if flip { w - 1 - x } else { x };
                let sx = xx + dx;
                if sx < 0 || sx >= w {
                    continue;
                }
                out[plane + (y * w + x) as usize] = image[plane + (sy * w + sx) as usize];
            }
        }
    }
    out
}

/// One line of the augmentation audit log.
#[derive(Clone, Debug, Serialize)]
pub struct AugmentRecord {
    pub purpose: Purpose,
    pub cycle: u64,
    pub sample: u64,
    #[serde(rename = "box")]
    pub cut: CutoutBox,
    pub partner: Option<usize>,
    pub lambda: Option<f64>,
}

impl AugmentRecord {
    pub fn cutout(stream: &RngStream, cut: CutoutBox) -> Self {
        AugmentRecord {
            purpose: stream.purpose(),
            cycle: stream.cycle(),
            sample: stream.sample(),
            cut,
            partner: None,
            lambda: None,
        }
    }

    pub fn cutmix(stream: &RngStream, event: &CutmixEvent) -> Self {
        AugmentRecord {
            purpose: stream.purpose(),
            cycle: stream.cycle(),
            sample: stream.sample(),
            cut: event.cut,
            partner: Some(event.partner),
            lambda: Some(event.lambda),
        }
    }
}

/// Sink for JSON-line augmentation records.
pub struct AuditLog {
    out: Mutex<Box<dyn Write + Send>>,
}

impl AuditLog {
    pub fn new(out: Box<dyn Write + Send>) -> Self {
        AuditLog {
            out: Mutex::new(out),
        }
    }

    pub fn record(&self, rec: &AugmentRecord) -> Result<()> {
        let line = serde_json::to_string(rec)?;
        let mut out = self.out.lock().expect("audit log poisoned");
        writeln!(out, "{line}")?;
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        self.out.lock().expect("audit log poisoned").flush()?;
        Ok(())
    }
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("AuditLog")
    }
}
