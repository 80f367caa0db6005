//! Aspect-preserving resize with mean-colour letterbox padding.

use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::numcore::Tensor;

/// Maps source pixel `(x, y)` to `(x * scale_x + offset_x, y * scale_y + offset_y)`
/// in the padded square of side `size`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Letterbox {
    pub src_w: usize,
    pub src_h: usize,
    pub size: usize,
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl Letterbox {
    /// Normalised source box to normalised box in the padded image.
    pub fn map_box(&self, b: &BoundingBox<f64>) -> BoundingBox<f64> {
        let n = self.size as f64;
        BoundingBox::new(
            (b.x * self.src_w as f64 * self.scale_x + self.offset_x) / n,
            (b.y * self.src_h as f64 * self.scale_y + self.offset_y) / n,
            b.w * self.src_w as f64 * self.scale_x / n,
            b.h * self.src_h as f64 * self.scale_y / n,
        )
    }

    pub fn unmap_box(&self, b: &BoundingBox<f64>) -> BoundingBox<f64> {
        let n = self.size as f64;
        BoundingBox::new(
            (b.x * n - self.offset_x) / self.scale_x / self.src_w as f64,
            (b.y * n - self.offset_y) / self.scale_y / self.src_h as f64,
            b.w * n / self.scale_x / self.src_w as f64,
            b.h * n / self.scale_y / self.src_h as f64,
        )
    }
}

fn bilinear(src: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut out = vec![0.0; nh * nw];
    for oy in 0..nh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out[oy * nw + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Resizes `raw[3, h, w]` so its longer side becomes `size`, then pads the
/// shorter side (content centred) with the per-channel mean of the resized
/// image.
pub fn preprocess_image(raw: &Tensor<f64>, size: usize) -> Result<(Tensor<f64>, Letterbox)> {
    if size == 0 {
        return Err(Error::Parameter("target size must be positive".into()));
    }
    let (h, w) = match *raw.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Dimension(format!("expected an RGB image [3, h, w], got {s:?}"))),
    };
    let (nh, nw) = if w >= h {
        (((h * size) as f64 / w as f64).round().max(1.0) as usize, size)
    } else {
        (size, ((w * size) as f64 / h as f64).round().max(1.0) as usize)
    };
    let ox = (size - nw) / 2;
    let oy = (size - nh) / 2;
    let mut out = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        let plane = &raw.data()[ch * h * w..(ch + 1) * h * w];
        let resized = if nh == h && nw == w {
            plane.to_vec()
        } else {
            bilinear(plane, h, w, nh, nw)
        };
        let mean = resized.iter().sum::<f64>() / resized.len() as f64;
        let mut canvas = vec![mean; size * size];
        for y in 0..nh {
            canvas[(y + oy) * size + ox..(y + oy) * size + ox + nw]
                .copy_from_slice(&resized[y * nw..(y + 1) * nw]);
        }
        out.extend(canvas);
    }
    let lb = Letterbox {
        src_w: w,
        src_h: h,
        size,
        scale_x: nw as f64 / w as f64,
        scale_y: nh as f64 / h as f64,
        offset_x: ox as f64,
        offset_y: oy as f64,
    };
    Ok((Tensor::new(vec![3, size, size], out)?, lb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_input_is_a_pure_resize() {
        let data: Vec<f64> = (0..3 * 8 * 8).map(|i| (i % 17) as f64 / 17.0).collect();
        let raw = Tensor::new(vec![3, 8, 8], data.clone()).unwrap();
        let (out, lb) = preprocess_image(&raw, 8).unwrap();
        assert_eq!(out.data(), &data[..]);
        assert_eq!((lb.offset_x, lb.offset_y), (0.0, 0.0));

        let (out, lb) = preprocess_image(&raw, 16).unwrap();
        assert_eq!(out.shape(), &[3, 16, 16]);
        assert_eq!((lb.offset_x, lb.offset_y, lb.scale_x), (0.0, 0.0, 2.0));
    }

    #[test]
    fn wide_input_pads_half_with_channel_means() {
        let (h, w, s) = (4, 8, 8);
        let color = [0.2, 0.6, 0.9];
        let data: Vec<f64> = color.iter().flat_map(|&c| vec![c; h * w]).collect();
        let raw = Tensor::new(vec![3, h, w], data).unwrap();
        let (out, lb) = preprocess_image(&raw, s).unwrap();
        assert_eq!((lb.offset_x, lb.offset_y), (0.0, 2.0));
        for ch in 0..3 {
            let plane = &out.data()[ch * s * s..(ch + 1) * s * s];
            // Content and padding both equal the constant colour.
            assert!(plane.iter().all(|&v| (v - color[ch]).abs() < 1e-15));
        }
    }

    #[test]
    fn padding_equals_resized_mean_exactly() {
        let (h, w, s) = (6, 12, 10);
        let data: Vec<f64> = (0..3 * h * w).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let raw = Tensor::new(vec![3, h, w], data).unwrap();
        let (out, lb) = preprocess_image(&raw, s).unwrap();
        let (ox, oy) = (lb.offset_x as usize, lb.offset_y as usize);
        let nh = (lb.scale_y * h as f64).round() as usize;
        for ch in 0..3 {
            let plane = &out.data()[ch * s * s..(ch + 1) * s * s];
            let content: Vec<f64> = (oy..oy + nh)
                .flat_map(|y| plane[y * s + ox..y * s + ox + s].to_vec())
                .collect();
            let mean = content.iter().sum::<f64>() / content.len() as f64;
            for y in (0..oy).chain(oy + nh..s) {
                assert!(plane[y * s..(y + 1) * s].iter().all(|&v| v == plane[0]));
            }
            assert!((plane[0] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn box_round_trip() {
        let raw = Tensor::zeros(vec![3, 30, 50]);
        let (_, lb) = preprocess_image(&raw, 64).unwrap();
        let b = BoundingBox::new(0.5, 0.5, 0.2, 0.4);
        let mapped = lb.map_box(&b);
        assert!((mapped.x - 0.5).abs() < 0.02 && (mapped.y - 0.5).abs() < 0.02);
        let back = lb.unmap_box(&mapped);
        for (a, c) in b.to_array().iter().zip(back.to_array()) {
            assert!((a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_zero_size() {
        let raw = Tensor::zeros(vec![3, 2, 2]);
        assert!(matches!(preprocess_image(&raw, 0), Err(Error::Parameter(_))));
    }
}
