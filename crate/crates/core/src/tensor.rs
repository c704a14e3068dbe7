//! Minimal dense-tensor substrate.
//!
//! [`FeatureMap`] is a rank-3 array (channels x height x width) stored
//! channel-major, row-major within each channel. All numeric work in this
//! crate runs in `f64`. The coordinate convention is align-corners: grid
//! point `(i, j)` of a map sits at pixel coordinate `(i, j)`, and resizes map
//! endpoint to endpoint. Samples outside the grid clamp to the border.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Dense rank-3 real array, channel-major and row-major within a channel.
///
/// Operations in this crate never mutate their input maps, so a constructed
/// map may be shared freely across threads for reading.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Gradient accumulator with the same shape as the map it differentiates.
///
/// Starts zero-filled; backward passes accumulate additively. Parallel
/// backward passes must each own a private `GradMap` and be reduced by
/// summation afterward.
pub type GradMap = FeatureMap;

impl FeatureMap {
    /// Builds a map from raw data in channel-major order.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "feature map dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                channels,
                height,
                width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map data".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Zero-filled map (also the canonical way to start a [`GradMap`]).
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    /// Map filled with a single value.
    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Deterministic uniform random map in `[0, 1)`, seeded.
    pub fn random(seed: u64, channels: usize, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width)
            .map(|_| rng.gen::<f64>())
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] += v;
    }

    /// Elementwise accumulate another map of identical shape.
    pub fn accumulate(&mut self, other: &FeatureMap) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "accumulate {:?} into {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }
}

/// Clamps `x` to `[0, n-1]` and returns the pair of neighbor indices plus the
/// interpolation fraction toward the upper one.
#[inline]
fn axis_neighbors(x: f64, n: usize) -> (usize, usize, f64) {
    let hi = (n - 1) as f64;
    let x = x.clamp(0.0, hi);
    if n == 1 {
        return (0, 0, 0.0);
    }
    let mut i0 = x.floor() as usize;
    if i0 > n - 2 {
        i0 = n - 2;
    }
    (i0, i0 + 1, x - i0 as f64)
}

/// Bilinear interpolation of channel `c` at real pixel coordinate `(x, y)`.
///
/// Sample point `(i, j)` of the stored grid sits at coordinate `(i, j)`;
/// coordinates outside the grid clamp to the border before interpolation.
pub fn bilinear_sample(map: &FeatureMap, c: usize, x: f64, y: f64) -> Result<f64> {
    if c >= map.channels {
        return Err(Error::invalid(format!(
            "channel {c} out of range (map has {})",
            map.channels
        )));
    }
    Ok(bilinear_sample_unchecked(map, c, x, y))
}

#[inline]
pub(crate) fn bilinear_sample_unchecked(map: &FeatureMap, c: usize, x: f64, y: f64) -> f64 {
    let (x0, x1, fx) = axis_neighbors(x, map.width);
    let (y0, y1, fy) = axis_neighbors(y, map.height);
    let v00 = map.get(c, y0, x0);
    let v01 = map.get(c, y0, x1);
    let v10 = map.get(c, y1, x0);
    let v11 = map.get(c, y1, x1);
    (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
}

/// Backward of [`bilinear_sample`]: scatters `grad_out` onto the four source
/// cells with the interpolation weights.
pub fn bilinear_sample_backward(
    grad: &mut GradMap,
    c: usize,
    x: f64,
    y: f64,
    grad_out: f64,
) -> Result<()> {
    if c >= grad.channels {
        return Err(Error::invalid(format!(
            "channel {c} out of range (map has {})",
            grad.channels
        )));
    }
    bilinear_sample_backward_unchecked(grad, c, x, y, grad_out);
    Ok(())
}

#[inline]
pub(crate) fn bilinear_sample_backward_unchecked(
    grad: &mut GradMap,
    c: usize,
    x: f64,
    y: f64,
    grad_out: f64,
) {
    let (x0, x1, fx) = axis_neighbors(x, grad.width);
    let (y0, y1, fy) = axis_neighbors(y, grad.height);
    grad.add(c, y0, x0, grad_out * (1.0 - fy) * (1.0 - fx));
    grad.add(c, y0, x1, grad_out * (1.0 - fy) * fx);
    grad.add(c, y1, x0, grad_out * fy * (1.0 - fx));
    grad.add(c, y1, x1, grad_out * fy * fx);
}

/// Maps output index `i` of an `n_out`-point grid onto the source grid of
/// `n_in` points, endpoint to endpoint (align-corners).
#[inline]
pub(crate) fn resize_coord(i: usize, n_out: usize, n_in: usize) -> f64 {
    if n_out <= 1 {
        return 0.0;
    }
    i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
}

/// General align-corners bilinear resize to an arbitrary output size.
pub fn resize_bilinear(map: &FeatureMap, out_h: usize, out_w: usize) -> Result<FeatureMap> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target dims must be >= 1"));
    }
    let (c, h, w) = map.shape();
    let mut out = FeatureMap::zeros(c, out_h, out_w);
    for ch in 0..c {
        for i in 0..out_h {
            let y = resize_coord(i, out_h, h);
            for j in 0..out_w {
                let x = resize_coord(j, out_w, w);
                out.set(ch, i, j, bilinear_sample_unchecked(map, ch, x, y));
            }
        }
    }
    Ok(out)
}

/// Bilinear upsampling by an integer factor, align-corners.
///
/// Output pixel `(i', j')` samples the input at
/// `(j' * (w-1) / (factor*w - 1), i' * (h-1) / (factor*h - 1))`. Factor 1 is
/// the identity.
pub fn upsample_bilinear(map: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (_, h, w) = map.shape();
    resize_bilinear(map, h * factor, w * factor)
}

/// Backward of [`upsample_bilinear`]: routes each output-cell gradient back
/// through its bilinear read.
pub fn upsample_bilinear_backward(
    grad_out: &FeatureMap,
    factor: usize,
    input_shape: (usize, usize, usize),
) -> Result<GradMap> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let (c, h, w) = input_shape;
    let (gc, gh, gw) = grad_out.shape();
    if gc != c || gh != h * factor || gw != w * factor {
        return Err(Error::ShapeMismatch(format!(
            "upsample backward: grad {:?} vs input {:?} x{}",
            grad_out.shape(),
            input_shape,
            factor
        )));
    }
    let mut grad = GradMap::zeros(c, h, w);
    for ch in 0..c {
        for i in 0..gh {
            let y = resize_coord(i, gh, h);
            for j in 0..gw {
                let x = resize_coord(j, gw, w);
                bilinear_sample_backward_unchecked(&mut grad, ch, x, y, grad_out.get(ch, i, j));
            }
        }
    }
    Ok(grad)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub passed: bool,
    /// Set when the checked function returned a non-finite value.
    pub failure: Option<String>,
}

impl GradCheckReport {
    fn failed(msg: String) -> Self {
        GradCheckReport {
            max_abs_err: f64::INFINITY,
            max_rel_err: f64::INFINITY,
            worst_index: 0,
            passed: false,
            failure: Some(msg),
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.failure {
            Some(msg) => write!(f, "FAIL ({msg})"),
            None => write!(
                f,
                "{} max_abs_err={:.3e} max_rel_err={:.3e} (worst at flat index {})",
                if self.passed { "pass" } else { "FAIL" },
                self.max_abs_err,
                self.max_rel_err,
                self.worst_index
            ),
        }
    }
}

/// Central-difference check of an analytic gradient of a scalar function of a
/// flat value vector.
///
/// Each element is perturbed by `+/-step`; the central difference is compared
/// to `analytic_grad`. The per-element relative error is
/// `|a - n| / max(|a|, |n|)`, except that elements where both magnitudes fall
/// below `step` (under the finite-difference noise floor) count as exact.
/// The check passes when the max relative error is within `tol`.
pub fn finite_diff_check_slice<F>(
    mut f: F,
    values: &[f64],
    analytic_grad: &[f64],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 || tol <= 0.0 {
        return Err(Error::invalid("finite_diff_check: step and tol must be > 0"));
    }
    if values.len() != analytic_grad.len() {
        return Err(Error::ShapeMismatch(format!(
            "finite_diff_check: {} values vs {} gradient entries",
            values.len(),
            analytic_grad.len()
        )));
    }

    let mut probe = values.to_vec();
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut worst = 0usize;
    for k in 0..values.len() {
        let orig = probe[k];
        probe[k] = orig + step;
        let f_plus = f(&probe);
        probe[k] = orig - step;
        let f_minus = f(&probe);
        probe[k] = orig;
        if !f_plus.is_finite() || !f_minus.is_finite() {
            return Ok(GradCheckReport::failed(format!(
                "non-finite function output at flat index {k}"
            )));
        }
        let numeric = (f_plus - f_minus) / (2.0 * step);
        let analytic = analytic_grad[k];
        let abs = (numeric - analytic).abs();
        let scale = numeric.abs().max(analytic.abs());
        let rel = if scale < step { 0.0 } else { abs / scale };
        if abs > max_abs {
            max_abs = abs;
        }
        if rel > max_rel {
            max_rel = rel;
            worst = k;
        }
    }
    Ok(GradCheckReport {
        max_abs_err: max_abs,
        max_rel_err: max_rel,
        worst_index: worst,
        passed: max_rel <= tol,
        failure: None,
    })
}

/// [`finite_diff_check_slice`] over the elements of a map.
pub fn finite_diff_check<F>(
    mut f: F,
    map: &FeatureMap,
    analytic_grad: &GradMap,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&FeatureMap) -> f64,
{
    if map.shape() != analytic_grad.shape() {
        return Err(Error::ShapeMismatch(format!(
            "finite_diff_check: map {:?} vs grad {:?}",
            map.shape(),
            analytic_grad.shape()
        )));
    }
    let shape = map.shape();
    finite_diff_check_slice(
        |vals| {
            let probe = FeatureMap {
                channels: shape.0,
                height: shape.1,
                width: shape.2,
                data: vals.to_vec(),
            };
            f(&probe)
        },
        map.data(),
        analytic_grad.data(),
        step,
        tol,
    )
}
