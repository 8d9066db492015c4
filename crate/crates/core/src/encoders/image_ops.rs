//! Image array plumbing: zoom-crop simulation, bilinear resize, train-time
//! augmentation, patch extraction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::geodata::Payload;

/// Channel-major `[C, H, W]` float image.
#[derive(Debug, Clone)]
pub struct ImageArray {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl ImageArray {
    pub fn new(channels: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * h * w, "image data length mismatch");
        Self { channels, h, w, data }
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        Self::new(channels, h, w, vec![0.0; channels * h * w])
    }

    pub fn from_payload(p: &Payload) -> Result<Self> {
        if p.shape.len() != 3 {
            return Err(CoreError::InputDomain(format!(
                "image payload must be [C, H, W], got {:?}",
                p.shape
            )));
        }
        Ok(Self::new(p.shape[0], p.shape[1], p.shape[2], p.data.clone()))
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn crop(&self, top: usize, left: usize, ch: usize, cw: usize) -> ImageArray {
        assert!(top + ch <= self.h && left + cw <= self.w, "crop exceeds image bounds");
        let mut data = Vec::with_capacity(self.channels * ch * cw);
        for c in 0..self.channels {
            for y in 0..ch {
                let row = (c * self.h + top + y) * self.w + left;
                data.extend_from_slice(&self.data[row + 0..row + cw]);
            }
        }
        ImageArray::new(self.channels, ch, cw, data)
    }

    pub fn center_crop(&self, ch: usize, cw: usize) -> ImageArray {
        assert!(ch <= self.h && cw <= self.w, "center crop larger than image");
        self.crop((self.h - ch) / 2, (self.w - cw) / 2, ch, cw)
    }

    /// Bilinear resize (half-pixel centers). Identity when sizes match.
    pub fn resize(&self, oh: usize, ow: usize) -> ImageArray {
        if oh == self.h && ow == self.w {
            return self.clone();
        }
        let sy = self.h as f32 / oh as f32;
        let sx = self.w as f32 / ow as f32;
        let mut data = Vec::with_capacity(self.channels * oh * ow);
        for c in 0..self.channels {
            for oy in 0..oh {
                let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (self.h - 1) as f32);
                let y0 = fy.floor() as usize;
                let y1 = (y0 + 1).min(self.h - 1);
                let wy = fy - y0 as f32;
                for ox in 0..ow {
                    let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (self.w - 1) as f32);
                    let x0 = fx.floor() as usize;
                    let x1 = (x0 + 1).min(self.w - 1);
                    let wx = fx - x0 as f32;
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bot = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    data.push(top * (1.0 - wy) + bot * wy);
                }
            }
        }
        ImageArray::new(self.channels, oh, ow, data)
    }

    pub fn hflip(&self) -> ImageArray {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.h {
                for x in 0..self.w {
                    data.push(self.get(c, y, self.w - 1 - x));
                }
            }
        }
        ImageArray::new(self.channels, self.h, self.w, data)
    }
}

/// Simulate viewing a tile at zoom level `l`: center-crop `(l*h, l*w)` from
/// the source tile, then resize down to `(h, w)`.
pub fn zoom_crop(tile: &ImageArray, l: u32, out_hw: (usize, usize)) -> Result<ImageArray> {
    let (h, w) = out_hw;
    if l == 0 {
        return Err(CoreError::InputDomain("zoom level must be >= 1".into()));
    }
    let (ch, cw) = (l as usize * h, l as usize * w);
    if ch > tile.h || cw > tile.w {
        return Err(CoreError::InputDomain(format!(
            "zoom {l} needs a {ch}x{cw} crop but the tile is {}x{}",
            tile.h, tile.w
        )));
    }
    Ok(tile.center_crop(ch, cw).resize(h, w))
}

/// Train-time augmentation: square random-resized crop with area scale drawn
/// from `(0.2, 1.0)`, then horizontal flip with probability 0.5.
pub fn augment_train(img: &ImageArray, out_hw: usize, rng: &mut ChaCha8Rng) -> ImageArray {
    let area = (img.h * img.w) as f32;
    let scale = rng.gen_range(0.2f32..1.0);
    let side = ((area * scale).sqrt().round() as usize).clamp(1, img.h.min(img.w));
    let top = rng.gen_range(0..=img.h - side);
    let left = rng.gen_range(0..=img.w - side);
    let cropped = img.crop(top, left, side, side).resize(out_hw, out_hw);
    if rng.gen::<f32>() < 0.5 {
        cropped.hflip()
    } else {
        cropped
    }
}

/// Eval-time path: plain center crop at the encoder input size.
pub fn eval_crop(img: &ImageArray, out_hw: usize) -> ImageArray {
    img.center_crop(out_hw, out_hw)
}

/// Row-major patch matrix: patch `(py, px)` becomes row `py * nx + px`, with
/// the `C * patch * patch` pixels of that patch flattened channel-major.
pub fn patchify(img: &ImageArray, patch: usize) -> (Vec<f32>, usize, usize) {
    assert!(
        img.h % patch == 0 && img.w % patch == 0,
        "image {}x{} not divisible by patch {patch}",
        img.h,
        img.w
    );
    let ny = img.h / patch;
    let nx = img.w / patch;
    let mut rows = Vec::with_capacity(ny * nx * img.channels * patch * patch);
    for py in 0..ny {
        for px in 0..nx {
            for c in 0..img.channels {
                for y in 0..patch {
                    for x in 0..patch {
                        rows.push(img.get(c, py * patch + y, px * patch + x));
                    }
                }
            }
        }
    }
    (rows, nx, ny)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn ramp(c: usize, h: usize, w: usize) -> ImageArray {
        let mut img = ImageArray::zeros(c, h, w);
        for i in 0..img.data.len() {
            img.data[i] = i as f32;
        }
        img
    }

    #[test]
    fn zoom_one_equals_plain_center_crop() {
        let tile = ramp(3, 40, 40);
        let out = zoom_crop(&tile, 1, (32, 32)).unwrap();
        let want = tile.center_crop(32, 32);
        assert_eq!(out.data, want.data);
    }

    #[test]
    fn zoom_crop_shapes_follow_l_times_out() {
        // 1280 tile, l=3, out 256: crops 768x768 then resizes.
        let tile = ImageArray::zeros(1, 1280, 1280);
        let out = zoom_crop(&tile, 3, (256, 256)).unwrap();
        assert_eq!((out.h, out.w), (256, 256));
        // 1500 tile, l=5, out 300: the crop is the whole tile.
        let tile = ImageArray::zeros(1, 1500, 1500);
        let out = zoom_crop(&tile, 5, (300, 300)).unwrap();
        assert_eq!((out.h, out.w), (300, 300));
    }

    #[test]
    fn oversized_crop_is_input_domain_error() {
        let tile = ImageArray::zeros(1, 100, 100);
        assert!(matches!(zoom_crop(&tile, 5, (32, 32)), Err(CoreError::InputDomain(_))));
    }

    #[test]
    fn augment_is_deterministic_per_stream() {
        let img = ramp(3, 40, 40);
        let a = augment_train(&img, 32, &mut stream(9, "aug"));
        let b = augment_train(&img, 32, &mut stream(9, "aug"));
        assert_eq!(a.data, b.data);
        assert_eq!((a.h, a.w), (32, 32));
    }

    #[test]
    fn patchify_layout() {
        let img = ramp(2, 4, 4);
        let (rows, nx, ny) = patchify(&img, 2);
        assert_eq!((nx, ny), (2, 2));
        assert_eq!(rows.len(), 4 * 2 * 2 * 2);
        // First patch row starts with channel-0 pixel (0,0) = 0.0 and its
        // channel-0 block is the top-left 2x2 of channel 0.
        assert_eq!(&rows[0..4], &[0.0, 1.0, 4.0, 5.0]);
    }
}
