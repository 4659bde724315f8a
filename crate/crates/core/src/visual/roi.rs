//! Bilinear ROI align.
//!
//! Each output cell is sampled once at its center. Pixel `i` of a map with
//! side `W` covers `[i, i+1)` in map units, so a normalized coordinate `x`
//! maps to the continuous index `x * W - 0.5`. Sample positions are clamped
//! to the valid index range before interpolation.

use candle_core::{Device, Tensor};

use crate::data::BoundingBox;
use crate::error::{Error, Result};

/// Four `(flat index, weight)` taps per sample point.
fn taps(b: &BoundingBox, height: usize, width: usize, out: usize) -> Vec<(u32, f64)> {
    let axis = |lo: f32, hi: f32, n: usize, k: usize| -> (usize, usize, f64) {
        let lo = lo as f64 * n as f64;
        let step = (hi as f64 * n as f64 - lo) / out as f64;
        let u = (lo + (k as f64 + 0.5) * step - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut t = Vec::with_capacity(out * out * 4);
    for a in 0..out {
        let (y0, y1, ly) = axis(b.y1, b.y2, height, a);
        for c in 0..out {
            let (x0, x1, lx) = axis(b.x1, b.x2, width, c);
            t.push(((y0 * width + x0) as u32, (1.0 - ly) * (1.0 - lx)));
            t.push(((y0 * width + x1) as u32, (1.0 - ly) * lx));
            t.push(((y1 * width + x0) as u32, ly * (1.0 - lx)));
            t.push(((y1 * width + x1) as u32, ly * lx));
        }
    }
    t
}

/// Aligns every box against one `(C, H, W)` map, returning
/// `(R, C * out * out)` with each row flattened channel-major.
pub fn roi_align_regions(map: &Tensor, boxes: &[BoundingBox], out: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3().map_err(|_| Error::shape(format!("ROI align expects (C,H,W), got {:?}", map.dims())))?;
    if out == 0 {
        return Err(Error::shape("ROI output size must be positive"));
    }
    if boxes.is_empty() {
        return Err(Error::shape("no boxes to align"));
    }
    let mut idx = Vec::with_capacity(boxes.len() * out * out * 4);
    let mut wts = Vec::with_capacity(idx.capacity());
    for b in boxes {
        b.validate().map_err(|e| Error::shape(format!("degenerate ROI: {e}")))?;
        for (i, wt) in taps(b, h, w, out) {
            idx.push(i);
            wts.push(wt);
        }
    }
    let r = boxes.len();
    let cells = out * out;
    let idx = Tensor::from_vec(idx, r * cells * 4, &Device::Cpu)?;
    let wts = Tensor::from_vec(wts, (r, cells, 4), &Device::Cpu)?.to_dtype(map.dtype())?;
    let gathered = map.reshape((c, h * w))?.index_select(&idx, 1)?.reshape((c, r, cells, 4))?;
    let pooled = gathered.broadcast_mul(&wts)?.sum(3)?; // (C, R, cells)
    Ok(pooled.transpose(0, 1)?.contiguous()?.reshape((r, c * cells))?)
}

/// Aligns a single box, returning `(C, out, out)`.
pub fn roi_align(map: &Tensor, b: &BoundingBox, out: usize) -> Result<Tensor> {
    let c = map.dims().first().copied().unwrap_or(0);
    Ok(roi_align_regions(map, std::slice::from_ref(b), out)?.reshape((c, out, out))?)
}
