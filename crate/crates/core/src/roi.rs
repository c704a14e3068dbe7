//! RoI feature-sampling kernels.
//!
//! Four ways of turning a full-image feature map plus a box into a fixed-size
//! per-view feature tensor, differing in where (and whether) bilinear
//! interpolation happens relative to cropping and pooling:
//!
//! - [`RoiKind::Pool`]: crop + pool. Box edges and bin edges are quantized to
//!   integer cells; each bin aggregates whole cells.
//! - [`RoiKind::Align`]: interp + crop + pool. No quantization; each bin
//!   aggregates regularly spaced bilinear samples.
//! - [`RoiKind::Warp`]: crop + interp + pool. The quantized crop is
//!   bilinearly resized to twice the output size, then 2x2-pooled.
//! - [`RoiKind::Refine`]: interp + crop + interp + pool. The full map is
//!   bilinearly upsampled first, the float box is resampled from the
//!   upsampled grid to twice the output size, then 2x2-pooled.
//!
//! Boxes are normalized; they map onto pixel coordinates by scaling with
//! `(width - 1)` / `(height - 1)`, matching the align-corners convention of
//! [`crate::tensor`]. Every kernel has a hand-derived backward pass.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{upsample_bilinear, upsample_bilinear_backward, FeatureMap, GradMap};

/// The four sampling kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoiKind {
    Pool,
    Align,
    Warp,
    Refine,
}

impl RoiKind {
    pub const ALL: [RoiKind; 4] = [RoiKind::Pool, RoiKind::Align, RoiKind::Warp, RoiKind::Refine];

    pub fn name(&self) -> &'static str {
        match self {
            RoiKind::Pool => "pool",
            RoiKind::Align => "align",
            RoiKind::Warp => "warp",
            RoiKind::Refine => "refine",
        }
    }
}

impl std::str::FromStr for RoiKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pool" => Ok(RoiKind::Pool),
            "align" => Ok(RoiKind::Align),
            "warp" => Ok(RoiKind::Warp),
            "refine" => Ok(RoiKind::Refine),
            other => Err(Error::invalid(format!("unknown roi kind `{other}`"))),
        }
    }
}

/// Bin aggregation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

/// Full parameterization of an RoI sampling kernel.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoiConfig {
    pub kind: RoiKind,
    /// Side of the square output grid.
    pub output_size: usize,
    /// Full-map upsampling factor (Refine only).
    pub upsample_factor: usize,
    pub pool_mode: PoolMode,
    /// Regular samples per bin per axis (Align only).
    pub samples_per_bin: usize,
}

impl RoiConfig {
    /// Defaults for a kind: output 14x14, 2x upsampling, 2x2 samples per
    /// bin; max pooling for Pool and average pooling for the interpolating
    /// kinds (smooth gradients for training).
    pub fn for_kind(kind: RoiKind) -> Self {
        RoiConfig {
            kind,
            output_size: 14,
            upsample_factor: 2,
            pool_mode: match kind {
                RoiKind::Pool => PoolMode::Max,
                _ => PoolMode::Average,
            },
            samples_per_bin: 2,
        }
    }

    pub fn with_output_size(mut self, output_size: usize) -> Self {
        self.output_size = output_size;
        self
    }

    pub fn with_pool_mode(mut self, mode: PoolMode) -> Self {
        self.pool_mode = mode;
        self
    }

    pub fn with_upsample_factor(mut self, factor: usize) -> Self {
        self.upsample_factor = factor;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size == 0 || self.upsample_factor == 0 || self.samples_per_bin == 0 {
            return Err(Error::invalid(format!(
                "roi config fields must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Fixed-size feature tensor extracted for one box.
#[derive(Debug, Clone)]
pub struct RoiFeature {
    pub bbox: BBox,
    /// Shape: channels x output_size x output_size.
    pub data: FeatureMap,
}

/// One interpolation tap along an axis: the two neighbor indices and the
/// fraction toward the upper one.
#[derive(Debug, Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f64,
}

fn tap(x: f64, n: usize) -> Tap {
    let hi = (n - 1) as f64;
    let x = x.clamp(0.0, hi);
    if n == 1 {
        return Tap { i0: 0, i1: 0, frac: 0.0 };
    }
    let mut i0 = x.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    Tap {
        i0,
        i1: i0 + 1,
        frac: x - i0 as f64,
    }
}

/// Endpoint-spaced coordinates: `n` points from `start` to `end` inclusive.
fn endpoint_coords(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|u| start + u as f64 * (end - start) / (n - 1) as f64)
        .collect()
}

/// Interior regular coordinates: `bins * per_bin` points, `per_bin` per bin
/// at fractions `(k + 0.5) / per_bin` of each bin.
fn interior_coords(start: f64, end: f64, bins: usize, per_bin: usize) -> Vec<f64> {
    let bin_w = (end - start) / bins as f64;
    let mut out = Vec::with_capacity(bins * per_bin);
    for b in 0..bins {
        for k in 0..per_bin {
            out.push(start + (b as f64 + (k as f64 + 0.5) / per_bin as f64) * bin_w);
        }
    }
    out
}

/// Round-half-away-from-zero quantization of a scaled coordinate, clamped to
/// the grid.
fn quantize(x: f64, n: usize) -> usize {
    (x.round().max(0.0) as usize).min(n - 1)
}

/// Integer bin boundaries for Pool: bin `b` of `bins` over `len` cells covers
/// `[round(b*len/bins), round((b+1)*len/bins))`; an empty range marks an
/// empty bin.
fn pool_bin_bounds(b: usize, bins: usize, len: usize) -> (usize, usize) {
    let lo = (b as f64 * len as f64 / bins as f64).round() as usize;
    let hi = ((b + 1) as f64 * len as f64 / bins as f64).round() as usize;
    (lo, hi)
}

/// Extracts one fixed-size feature tensor per box, order-preserving.
pub fn roi_forward(map: &FeatureMap, boxes: &[BBox], cfg: &RoiConfig) -> Result<Vec<RoiFeature>> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::invalid("roi_forward: empty box list"));
    }
    for b in boxes {
        b.validate()?;
    }
    // Refine shares one full-map upsample across all boxes.
    let upsampled = match cfg.kind {
        RoiKind::Refine => Some(upsample_bilinear(map, cfg.upsample_factor)?),
        _ => None,
    };
    boxes
        .iter()
        .map(|b| forward_one(map, upsampled.as_ref(), b, cfg))
        .collect()
}

fn forward_one(
    map: &FeatureMap,
    upsampled: Option<&FeatureMap>,
    bbox: &BBox,
    cfg: &RoiConfig,
) -> Result<RoiFeature> {
    let s = cfg.output_size;
    let data = match cfg.kind {
        RoiKind::Pool => pool_forward(map, bbox, cfg),
        RoiKind::Align => {
            let xs = interior_coords(
                bbox.x0 * (map.width() - 1) as f64,
                bbox.x1 * (map.width() - 1) as f64,
                s,
                cfg.samples_per_bin,
            );
            let ys = interior_coords(
                bbox.y0 * (map.height() - 1) as f64,
                bbox.y1 * (map.height() - 1) as f64,
                s,
                cfg.samples_per_bin,
            );
            grid_pool_forward(map, &xs, &ys, s, cfg.samples_per_bin, cfg.pool_mode)
        }
        RoiKind::Warp => {
            let (x_lo, x_hi) = quantized_span(bbox.x0, bbox.x1, map.width());
            let (y_lo, y_hi) = quantized_span(bbox.y0, bbox.y1, map.height());
            let xs = endpoint_coords(x_lo as f64, x_hi as f64, 2 * s);
            let ys = endpoint_coords(y_lo as f64, y_hi as f64, 2 * s);
            grid_pool_forward(map, &xs, &ys, s, 2, cfg.pool_mode)
        }
        RoiKind::Refine => {
            let up = upsampled.expect("refine upsample prepared by roi_forward");
            let xs = endpoint_coords(
                bbox.x0 * (up.width() - 1) as f64,
                bbox.x1 * (up.width() - 1) as f64,
                2 * s,
            );
            let ys = endpoint_coords(
                bbox.y0 * (up.height() - 1) as f64,
                bbox.y1 * (up.height() - 1) as f64,
                2 * s,
            );
            grid_pool_forward(up, &xs, &ys, s, 2, cfg.pool_mode)
        }
    };
    Ok(RoiFeature { bbox: *bbox, data })
}

/// Quantized inclusive cell span of a normalized interval.
fn quantized_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let a = quantize(lo * (n - 1) as f64, n);
    let b = quantize(hi * (n - 1) as f64, n);
    (a.min(b), a.max(b))
}

/// Samples a `(s*g) x (s*g)` grid of bilinear taps and pools each `g x g`
/// block into one output cell.
fn grid_pool_forward(
    map: &FeatureMap,
    xs: &[f64],
    ys: &[f64],
    s: usize,
    g: usize,
    mode: PoolMode,
) -> FeatureMap {
    let x_taps: Vec<Tap> = xs.iter().map(|&x| tap(x, map.width())).collect();
    let y_taps: Vec<Tap> = ys.iter().map(|&y| tap(y, map.height())).collect();
    let channels = map.channels();
    let mut out = FeatureMap::zeros(channels, s, s);
    for c in 0..channels {
        for by in 0..s {
            for bx in 0..s {
                let mut acc = f64::NEG_INFINITY;
                let mut sum = 0.0;
                for gy in 0..g {
                    let ty = y_taps[by * g + gy];
                    for gx in 0..g {
                        let tx = x_taps[bx * g + gx];
                        let v = tap_value(map, c, tx, ty);
                        match mode {
                            PoolMode::Max => {
                                if v > acc {
                                    acc = v;
                                }
                            }
                            PoolMode::Average => sum += v,
                        }
                    }
                }
                let v = match mode {
                    PoolMode::Max => acc,
                    PoolMode::Average => sum / (g * g) as f64,
                };
                out.set(c, by, bx, v);
            }
        }
    }
    out
}

#[inline]
fn tap_value(map: &FeatureMap, c: usize, tx: Tap, ty: Tap) -> f64 {
    let v00 = map.get(c, ty.i0, tx.i0);
    let v01 = map.get(c, ty.i0, tx.i1);
    let v10 = map.get(c, ty.i1, tx.i0);
    let v11 = map.get(c, ty.i1, tx.i1);
    (1.0 - ty.frac) * ((1.0 - tx.frac) * v00 + tx.frac * v01)
        + ty.frac * ((1.0 - tx.frac) * v10 + tx.frac * v11)
}

fn pool_forward(map: &FeatureMap, bbox: &BBox, cfg: &RoiConfig) -> FeatureMap {
    let s = cfg.output_size;
    let (x_lo, x_hi) = quantized_span(bbox.x0, bbox.x1, map.width());
    let (y_lo, y_hi) = quantized_span(bbox.y0, bbox.y1, map.height());
    let w_cells = x_hi - x_lo + 1;
    let h_cells = y_hi - y_lo + 1;
    let channels = map.channels();
    let mut out = FeatureMap::zeros(channels, s, s);
    for c in 0..channels {
        for by in 0..s {
            let (r0, r1) = pool_bin_bounds(by, s, h_cells);
            for bx in 0..s {
                let (c0, c1) = pool_bin_bounds(bx, s, w_cells);
                let v = if r1 <= r0 || c1 <= c0 {
                    // Empty bin: value of the clamped anchor cell.
                    let ay = (y_lo + r0.min(h_cells - 1)).min(y_hi);
                    let ax = (x_lo + c0.min(w_cells - 1)).min(x_hi);
                    map.get(c, ay, ax)
                } else {
                    let mut acc = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            let v = map.get(c, y_lo + r, x_lo + cc);
                            match cfg.pool_mode {
                                PoolMode::Max => {
                                    if v > acc {
                                        acc = v;
                                    }
                                }
                                PoolMode::Average => sum += v,
                            }
                        }
                    }
                    match cfg.pool_mode {
                        PoolMode::Max => acc,
                        PoolMode::Average => sum / ((r1 - r0) * (c1 - c0)) as f64,
                    }
                };
                out.set(c, by, bx, v);
            }
        }
    }
    out
}

/// Accumulated gradient with respect to the input map for a batch of boxes.
///
/// Takes the forward input map (max pooling must re-derive its argmax
/// routing from the forward values; average pooling only reads the shape).
/// Max-pool ties route to the first occurrence in row-major scan order.
pub fn roi_backward(
    map: &FeatureMap,
    boxes: &[BBox],
    cfg: &RoiConfig,
    grad_out: &[FeatureMap],
) -> Result<GradMap> {
    cfg.validate()?;
    if boxes.is_empty() {
        return Err(Error::invalid("roi_backward: empty box list"));
    }
    if grad_out.len() != boxes.len() {
        return Err(Error::ShapeMismatch(format!(
            "roi_backward: {} grads for {} boxes",
            grad_out.len(),
            boxes.len()
        )));
    }
    let s = cfg.output_size;
    let channels = map.channels();
    for g in grad_out {
        if g.shape() != (channels, s, s) {
            return Err(Error::ShapeMismatch(format!(
                "roi_backward: grad shape {:?}, expected {:?}",
                g.shape(),
                (channels, s, s)
            )));
        }
    }
    for b in boxes {
        b.validate()?;
    }

    let mut grad_map = GradMap::zeros(channels, map.height(), map.width());
    // Refine accumulates into the upsampled grid once, then pushes the whole
    // thing back through the shared upsample.
    let mut refine_state = match cfg.kind {
        RoiKind::Refine => {
            let up = upsample_bilinear(map, cfg.upsample_factor)?;
            let grad_up = GradMap::zeros(channels, up.height(), up.width());
            Some((up, grad_up))
        }
        _ => None,
    };

    for (bbox, g_out) in boxes.iter().zip(grad_out.iter()) {
        match cfg.kind {
            RoiKind::Pool => pool_backward(map, bbox, cfg, g_out, &mut grad_map),
            RoiKind::Align => {
                let xs = interior_coords(
                    bbox.x0 * (map.width() - 1) as f64,
                    bbox.x1 * (map.width() - 1) as f64,
                    s,
                    cfg.samples_per_bin,
                );
                let ys = interior_coords(
                    bbox.y0 * (map.height() - 1) as f64,
                    bbox.y1 * (map.height() - 1) as f64,
                    s,
                    cfg.samples_per_bin,
                );
                grid_pool_backward(
                    map,
                    &xs,
                    &ys,
                    s,
                    cfg.samples_per_bin,
                    cfg.pool_mode,
                    g_out,
                    &mut grad_map,
                );
            }
            RoiKind::Warp => {
                let (x_lo, x_hi) = quantized_span(bbox.x0, bbox.x1, map.width());
                let (y_lo, y_hi) = quantized_span(bbox.y0, bbox.y1, map.height());
                let xs = endpoint_coords(x_lo as f64, x_hi as f64, 2 * s);
                let ys = endpoint_coords(y_lo as f64, y_hi as f64, 2 * s);
                grid_pool_backward(map, &xs, &ys, s, 2, cfg.pool_mode, g_out, &mut grad_map);
            }
            RoiKind::Refine => {
                let (up, grad_up) = refine_state.as_mut().expect("refine state prepared");
                let xs = endpoint_coords(
                    bbox.x0 * (up.width() - 1) as f64,
                    bbox.x1 * (up.width() - 1) as f64,
                    2 * s,
                );
                let ys = endpoint_coords(
                    bbox.y0 * (up.height() - 1) as f64,
                    bbox.y1 * (up.height() - 1) as f64,
                    2 * s,
                );
                grid_pool_backward(up, &xs, &ys, s, 2, cfg.pool_mode, g_out, grad_up);
            }
        }
    }

    if let Some((_, grad_up)) = refine_state {
        let g = upsample_bilinear_backward(&grad_up, cfg.upsample_factor, map.shape())?;
        grad_map.accumulate(&g)?;
    }
    Ok(grad_map)
}

#[allow(clippy::too_many_arguments)]
fn grid_pool_backward(
    map: &FeatureMap,
    xs: &[f64],
    ys: &[f64],
    s: usize,
    g: usize,
    mode: PoolMode,
    grad_out: &FeatureMap,
    grad: &mut GradMap,
) {
    let x_taps: Vec<Tap> = xs.iter().map(|&x| tap(x, map.width())).collect();
    let y_taps: Vec<Tap> = ys.iter().map(|&y| tap(y, map.height())).collect();
    for c in 0..map.channels() {
        for by in 0..s {
            for bx in 0..s {
                let go = grad_out.get(c, by, bx);
                match mode {
                    PoolMode::Average => {
                        let share = go / (g * g) as f64;
                        for gy in 0..g {
                            let ty = y_taps[by * g + gy];
                            for gx in 0..g {
                                let tx = x_taps[bx * g + gx];
                                scatter_tap(grad, c, tx, ty, share);
                            }
                        }
                    }
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = (0usize, 0usize);
                        for gy in 0..g {
                            let ty = y_taps[by * g + gy];
                            for gx in 0..g {
                                let tx = x_taps[bx * g + gx];
                                let v = tap_value(map, c, tx, ty);
                                if v > best {
                                    best = v;
                                    best_idx = (gy, gx);
                                }
                            }
                        }
                        let ty = y_taps[by * g + best_idx.0];
                        let tx = x_taps[bx * g + best_idx.1];
                        scatter_tap(grad, c, tx, ty, go);
                    }
                }
            }
        }
    }
}

#[inline]
fn scatter_tap(grad: &mut GradMap, c: usize, tx: Tap, ty: Tap, g: f64) {
    grad.add(c, ty.i0, tx.i0, g * (1.0 - ty.frac) * (1.0 - tx.frac));
    grad.add(c, ty.i0, tx.i1, g * (1.0 - ty.frac) * tx.frac);
    grad.add(c, ty.i1, tx.i0, g * ty.frac * (1.0 - tx.frac));
    grad.add(c, ty.i1, tx.i1, g * ty.frac * tx.frac);
}

fn pool_backward(
    map: &FeatureMap,
    bbox: &BBox,
    cfg: &RoiConfig,
    grad_out: &FeatureMap,
    grad: &mut GradMap,
) {
    let s = cfg.output_size;
    let (x_lo, x_hi) = quantized_span(bbox.x0, bbox.x1, map.width());
    let (y_lo, y_hi) = quantized_span(bbox.y0, bbox.y1, map.height());
    let w_cells = x_hi - x_lo + 1;
    let h_cells = y_hi - y_lo + 1;
    for c in 0..map.channels() {
        for by in 0..s {
            let (r0, r1) = pool_bin_bounds(by, s, h_cells);
            for bx in 0..s {
                let (c0, c1) = pool_bin_bounds(bx, s, w_cells);
                let go = grad_out.get(c, by, bx);
                if r1 <= r0 || c1 <= c0 {
                    let ay = (y_lo + r0.min(h_cells - 1)).min(y_hi);
                    let ax = (x_lo + c0.min(w_cells - 1)).min(x_hi);
                    grad.add(c, ay, ax, go);
                    continue;
                }
                match cfg.pool_mode {
                    PoolMode::Average => {
                        let share = go / ((r1 - r0) * (c1 - c0)) as f64;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                grad.add(c, y_lo + r, x_lo + cc, share);
                            }
                        }
                    }
                    PoolMode::Max => {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_cell = (y_lo + r0, x_lo + c0);
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                let v = map.get(c, y_lo + r, x_lo + cc);
                                if v > best {
                                    best = v;
                                    best_cell = (y_lo + r, x_lo + cc);
                                }
                            }
                        }
                        grad.add(c, best_cell.0, best_cell.1, go);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(kind: RoiKind, s: usize) -> RoiConfig {
        RoiConfig::for_kind(kind).with_output_size(s)
    }

    /// Map whose values are a shuffled uniform grid: pairwise gaps of at
    /// least 1/len, so max-pool argmaxes stay stable under the perturbations
    /// used by finite differencing.
    fn separated_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let n = c * h * w;
        let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        FeatureMap::new(c, h, w, vals).unwrap()
    }

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let x0 = rng.gen_range(0.0..0.55);
        let y0 = rng.gen_range(0.0..0.55);
        let x1 = rng.gen_range(x0 + 0.25..1.0);
        let y1 = rng.gen_range(y0 + 0.25..1.0);
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_features() {
        let map = FeatureMap::constant(2, 9, 11, 3.75);
        let b = BBox::new(0.13, 0.22, 0.81, 0.94).unwrap();
        for kind in RoiKind::ALL {
            for mode in [PoolMode::Average, PoolMode::Max] {
                let c = cfg(kind, 5).with_pool_mode(mode);
                let out = roi_forward(&map, &[b], &c).unwrap();
                assert!(
                    out[0].data.data().iter().all(|&v| (v - 3.75).abs() < 1e-12),
                    "{kind:?} {mode:?}"
                );
            }
        }
    }

    #[test]
    fn refine_with_unit_factor_matches_warp_on_grid_aligned_box() {
        let map = FeatureMap::random(3, 2, 11, 11);
        // Corners on exact grid points of the 11-wide map: multiples of 1/10.
        let b = BBox::new(0.2, 0.1, 0.8, 0.9).unwrap();
        let refine = cfg(RoiKind::Refine, 4).with_upsample_factor(1);
        let warp = cfg(RoiKind::Warp, 4);
        let a = roi_forward(&map, &[b], &refine).unwrap();
        let w = roi_forward(&map, &[b], &warp).unwrap();
        for (x, y) in a[0].data.data().iter().zip(w[0].data.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    /// Smooth seeded map; the dense-quadrature comparison below is a
    /// statement about quadrature agreement, which only holds when the
    /// underlying surface varies slowly at the bin scale.
    fn smooth_map(h: usize, w: usize) -> FeatureMap {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / (w - 1) as f64;
                let v = y as f64 / (h - 1) as f64;
                data.push(
                    0.5 + 0.22 * (2.1 * u + 0.7).sin() * (1.7 * v - 0.4).cos()
                        + 0.08 * (1.3 * (u + v)).sin(),
                );
            }
        }
        FeatureMap::new(1, h, w, data).unwrap()
    }

    /// Independent bilinear evaluator for the dense oracle (deliberately not
    /// routed through the library sampler).
    fn oracle_bilinear(map: &FeatureMap, x: f64, y: f64) -> f64 {
        let xc = x.clamp(0.0, (map.width() - 1) as f64);
        let yc = y.clamp(0.0, (map.height() - 1) as f64);
        let x0 = (xc.floor() as usize).min(map.width() - 2);
        let y0 = (yc.floor() as usize).min(map.height() - 2);
        let fx = xc - x0 as f64;
        let fy = yc - y0 as f64;
        map.get(0, y0, x0) * (1.0 - fx) * (1.0 - fy)
            + map.get(0, y0, x0 + 1) * fx * (1.0 - fy)
            + map.get(0, y0 + 1, x0) * (1.0 - fx) * fy
            + map.get(0, y0 + 1, x0 + 1) * fx * fy
    }

    #[test]
    fn refine_matches_dense_quadrature_oracle() {
        // Oracle: average 32x32 dense samples of the interpolated surface
        // over each output cell footprint, per cell within 2% relative.
        let map = smooth_map(16, 16);
        let b = BBox::new(0.1, 0.2, 0.7, 0.9).unwrap();
        let s = 14;
        let out = roi_forward(&map, &[b], &cfg(RoiKind::Refine, s)).unwrap();

        let x0p = b.x0 * 15.0;
        let x1p = b.x1 * 15.0;
        let y0p = b.y0 * 15.0;
        let y1p = b.y1 * 15.0;
        let bw = (x1p - x0p) / s as f64;
        let bh = (y1p - y0p) / s as f64;
        let k = 32;
        for by in 0..s {
            for bx in 0..s {
                let mut sum = 0.0;
                for iy in 0..k {
                    for ix in 0..k {
                        let x = x0p + (bx as f64 + (ix as f64 + 0.5) / k as f64) * bw;
                        let y = y0p + (by as f64 + (iy as f64 + 0.5) / k as f64) * bh;
                        sum += oracle_bilinear(&map, x, y);
                    }
                }
                let dense = sum / (k * k) as f64;
                let got = out[0].data.get(0, by, bx);
                let rel = (got - dense).abs() / dense.abs();
                assert!(rel < 0.02, "cell ({by},{bx}): {got} vs dense {dense} ({rel:.4})");
            }
        }
    }

    #[test]
    fn forward_mean_gradient_passes_finite_differences_all_kinds() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for kind in RoiKind::ALL {
            let map = separated_map(17 + kind as u64, 2, 12, 13);
            let b = random_box(&mut rng);
            let c = cfg(kind, 5);
            let s = c.output_size;
            let ones = FeatureMap::constant(2, s, s, 1.0 / (2 * s * s) as f64);
            let analytic = roi_backward(&map, &[b], &c, &[ones]).unwrap();
            let f = |m: &FeatureMap| {
                let out = roi_forward(m, &[b], &c).unwrap();
                out[0].data.data().iter().sum::<f64>() / (2 * s * s) as f64
            };
            let report = finite_diff_check(f, &map, &analytic, 1e-5, 1e-3).unwrap();
            assert!(report.passed, "{kind:?}: {report}");
        }
    }

    #[test]
    fn backward_with_zero_grad_is_zero() {
        let map = FeatureMap::random(5, 2, 8, 8);
        let b = BBox::new(0.1, 0.1, 0.8, 0.9).unwrap();
        for kind in RoiKind::ALL {
            let c = cfg(kind, 3);
            let zeros = FeatureMap::zeros(2, 3, 3);
            let g = roi_backward(&map, &[b], &c, &[zeros]).unwrap();
            assert!(g.data().iter().all(|&v| v == 0.0), "{kind:?}");
        }
    }

    #[test]
    fn align_average_conserves_gradient_weight() {
        // Full-map box, average pooling, upstream all ones: every output cell
        // is a convex combination, so total scattered weight is one per cell.
        let map = FeatureMap::random(6, 3, 10, 10);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let c = cfg(RoiKind::Align, 4).with_pool_mode(PoolMode::Average);
        let ones = FeatureMap::constant(3, 4, 4, 1.0);
        let g = roi_backward(&map, &[b], &c, &[ones]).unwrap();
        let total: f64 = g.data().iter().sum();
        assert!((total - (4 * 4 * 3) as f64).abs() < 1e-9, "total {total}");
    }

    #[test]
    fn backward_matches_finite_differences_with_random_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (i, kind) in RoiKind::ALL.into_iter().enumerate() {
            let map = separated_map(100 + i as u64, 1, 14, 14);
            let b = random_box(&mut rng);
            let c = cfg(kind, 4);
            let upstream = FeatureMap::random(200 + i as u64, 1, 4, 4);
            let analytic = roi_backward(&map, &[b], &c, &[upstream.clone()]).unwrap();
            let f = |m: &FeatureMap| {
                let out = roi_forward(m, &[b], &c).unwrap();
                out[0]
                    .data
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(a, g)| a * g)
                    .sum::<f64>()
            };
            let report = finite_diff_check(f, &map, &analytic, 1e-5, 1e-3).unwrap();
            assert!(report.passed, "{kind:?}: {report}");
        }
    }

    /// Linear ramp in x: interpolating kinds must respond to sub-cell box
    /// shifts; Pool must plateau under shifts that keep the quantized
    /// corners.
    #[test]
    fn translation_sensitivity_and_quantization_plateau() {
        let w = 16;
        let data: Vec<f64> = (0..w * w).map(|i| (i % w) as f64).collect();
        let map = FeatureMap::new(1, w, w, data).unwrap();
        let b = BBox::new(0.2, 0.2, 0.6, 0.6).unwrap();
        let half_cell = 0.5 / (w - 1) as f64;
        let shifted = BBox::new(b.x0 + half_cell, b.y0, b.x1 + half_cell, b.y1).unwrap();
        for kind in [RoiKind::Align, RoiKind::Refine] {
            let c = cfg(kind, 4).with_pool_mode(PoolMode::Average);
            let a = roi_forward(&map, &[b], &c).unwrap();
            let s = roi_forward(&map, &[shifted], &c).unwrap();
            assert!(
                a[0].data
                    .data()
                    .iter()
                    .zip(s[0].data.data())
                    .any(|(x, y)| (x - y).abs() > 1e-9),
                "{kind:?} should respond to a half-cell shift"
            );
        }
        let tiny = 0.1 / (w - 1) as f64;
        let nudged = BBox::new(b.x0 + tiny, b.y0, b.x1 + tiny, b.y1).unwrap();
        let c = cfg(RoiKind::Pool, 4);
        let a = roi_forward(&map, &[b], &c).unwrap();
        let n = roi_forward(&map, &[nudged], &c).unwrap();
        assert_eq!(a[0].data.data(), n[0].data.data());
    }

    #[test]
    fn order_preserving_and_deterministic() {
        let map = FeatureMap::random(8, 2, 10, 10);
        let b1 = BBox::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let b2 = BBox::new(0.4, 0.4, 1.0, 1.0).unwrap();
        let c = cfg(RoiKind::Align, 3);
        let out = roi_forward(&map, &[b1, b2], &c).unwrap();
        assert_eq!(out[0].bbox, b1);
        assert_eq!(out[1].bbox, b2);
        let again = roi_forward(&map, &[b1, b2], &c).unwrap();
        for (a, b) in out.iter().zip(again.iter()) {
            assert_eq!(a.data.data(), b.data.data());
        }
    }

    #[test]
    fn tiny_box_clamps_to_single_cell_without_error() {
        let map = FeatureMap::random(9, 1, 8, 8);
        // Much smaller than one cell of an 8x8 grid.
        let b = BBox::new(0.50, 0.50, 0.51, 0.51).unwrap();
        for kind in RoiKind::ALL {
            let out = roi_forward(&map, &[b], &cfg(kind, 4)).unwrap();
            assert!(out[0].data.data().iter().all(|v| v.is_finite()), "{kind:?}");
        }
    }

    #[test]
    fn invalid_inputs_error() {
        let map = FeatureMap::random(1, 1, 4, 4);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let mut bad = cfg(RoiKind::Align, 4);
        bad.output_size = 0;
        assert!(roi_forward(&map, &[b], &bad).is_err());
        assert!(roi_forward(&map, &[], &cfg(RoiKind::Align, 4)).is_err());
        let wrong_grad = FeatureMap::zeros(1, 3, 3);
        assert!(roi_backward(&map, &[b], &cfg(RoiKind::Align, 4), &[wrong_grad]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn outputs_stay_within_input_range(
            seed in 0u64..500,
            kind_idx in 0usize..4,
            mode_max in any::<bool>(),
            x0 in 0.0f64..0.5,
            y0 in 0.0f64..0.5,
            dw in 0.2f64..0.5,
            dh in 0.2f64..0.5,
        ) {
            let map = FeatureMap::random(seed, 1, 9, 9);
            let b = BBox::new(x0, y0, (x0 + dw).min(1.0), (y0 + dh).min(1.0)).unwrap();
            let mode = if mode_max { PoolMode::Max } else { PoolMode::Average };
            let c = cfg(RoiKind::ALL[kind_idx], 3).with_pool_mode(mode);
            let out = roi_forward(&map, &[b], &c).unwrap();
            let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for &v in out[0].data.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
