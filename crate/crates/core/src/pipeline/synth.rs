//! Synthetic composition dataset.
//!
//! Each image is a smooth seeded background plus one high-contrast elliptical
//! subject planted at `subject_box`. Candidate views are sampled windows
//! around (and occasionally away from) the subject, including near-duplicate
//! jittered views whose score differences are dominated by sub-cell geometry.
//! The analytic oracle defines the ground truth:
//!
//! ```text
//! score(v) = coverage(subject, v)
//!          - 0.5 * thirds_distance(subject_center, v)
//!          - 1.0 * truncation_penalty(subject, v)
//! ```

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Weight of the rule-of-thirds term in the oracle score.
pub const THIRDS_WEIGHT: f64 = 0.5;
/// Weight of the truncation term in the oracle score.
pub const TRUNCATION_WEIGHT: f64 = 1.0;

/// Dataset shape parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_views: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_train: 384,
            n_val: 96,
            n_views: 24,
            image_size: 64,
            seed: 1,
        }
    }
}

/// One generated image with its planted subject.
#[derive(Debug, Clone)]
pub struct SynthImage {
    pub image: FeatureMap,
    pub subject_box: BBox,
    pub seed: u64,
}

/// One image's candidate views paired with oracle scores.
#[derive(Debug, Clone)]
pub struct ViewList {
    pub image_ref: String,
    pub views: Vec<BBox>,
    pub gt_scores: Vec<f64>,
}

/// Fraction of the subject's area inside the view.
pub fn coverage(subject: &BBox, view: &BBox) -> f64 {
    subject.intersection_area(view) / subject.area()
}

/// Distance from the subject center, expressed in view-relative coordinates
/// (clamped to the view), to the nearest rule-of-thirds point.
pub fn thirds_distance(subject_center: (f64, f64), view: &BBox) -> f64 {
    let u = ((subject_center.0 - view.x0) / view.width()).clamp(0.0, 1.0);
    let v = ((subject_center.1 - view.y0) / view.height()).clamp(0.0, 1.0);
    let mut best = f64::INFINITY;
    for &tx in &[1.0 / 3.0, 2.0 / 3.0] {
        for &ty in &[1.0 / 3.0, 2.0 / 3.0] {
            let d = ((u - tx).powi(2) + (v - ty).powi(2)).sqrt();
            if d < best {
                best = d;
            }
        }
    }
    best
}

/// Fraction of the subject's area cut off by the view.
pub fn truncation_penalty(subject: &BBox, view: &BBox) -> f64 {
    1.0 - coverage(subject, view)
}

/// The analytic composition oracle.
pub fn oracle_score(subject: &BBox, view: &BBox) -> f64 {
    coverage(subject, view) - THIRDS_WEIGHT * thirds_distance(subject.center(), view)
        - TRUNCATION_WEIGHT * truncation_penalty(subject, view)
}

/// Generates a deterministic dataset: `n_images` images, each with
/// `n_views` scored candidate views. Identical arguments give bitwise
/// identical output.
pub fn synth_generate(
    seed: u64,
    n_images: usize,
    n_views: usize,
    image_size: usize,
) -> Result<Vec<(SynthImage, ViewList)>> {
    if n_views < 2 {
        return Err(Error::invalid("synth_generate: need at least 2 views"));
    }
    if image_size < 8 {
        return Err(Error::invalid("synth_generate: image_size must be >= 8"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_images);
    for idx in 0..n_images {
        let child_seed = master.gen::<u64>();
        out.push(generate_one(seed, idx, child_seed, n_views, image_size)?);
    }
    Ok(out)
}

fn generate_one(
    dataset_seed: u64,
    idx: usize,
    child_seed: u64,
    n_views: usize,
    size: usize,
) -> Result<(SynthImage, ViewList)> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed);

    // Subject geometry: strictly inside the unit square with ample margin.
    // The size range is deliberately narrow so that a view truncating the
    // subject still admits a good coverage estimate from the visible part.
    let hw = rng.gen_range(0.10..0.14);
    let hh = rng.gen_range(0.10..0.14);
    let cx = rng.gen_range(0.30..0.70);
    let cy = rng.gen_range(0.30..0.70);
    let subject = BBox::new(cx - hw, cy - hh, cx + hw, cy + hh)?;

    let image = render_image(&mut rng, size, &subject);
    let views = sample_views(&mut rng, &subject, n_views);
    let mut gt_scores: Vec<f64> = views
        .iter()
        .map(|v| oracle_score(&subject, v))
        .collect();
    // Deterministic tie-breaking jitter, tiny against the oracle scale.
    for s in gt_scores.iter_mut() {
        *s += rng.gen_range(0.0..1e-6);
    }

    Ok((
        SynthImage {
            image,
            subject_box: subject,
            seed: child_seed,
        },
        ViewList {
            image_ref: format!("synth-{dataset_seed}-{idx}"),
            views,
            gt_scores,
        },
    ))
}

fn render_image(rng: &mut ChaCha8Rng, size: usize, subject: &BBox) -> FeatureMap {
    let (cx, cy) = subject.center();
    let hw = subject.width() / 2.0;
    let hh = subject.height() / 2.0;

    // Smooth low-frequency background per channel.
    let mut base = [0.0; 3];
    let mut amp = [0.0; 3];
    let mut fx = [0.0; 3];
    let mut fy = [0.0; 3];
    let mut phase = [0.0; 3];
    let mut subj_color = [0.0; 3];
    for c in 0..3 {
        base[c] = rng.gen_range(0.25..0.45);
        amp[c] = rng.gen_range(0.05..0.15);
        fx[c] = rng.gen_range(0.5..1.5);
        fy[c] = rng.gen_range(0.5..1.5);
        phase[c] = rng.gen_range(0.0..std::f64::consts::TAU);
        subj_color[c] = if c % 2 == 0 {
            rng.gen_range(0.70..0.95)
        } else {
            rng.gen_range(0.05..0.30)
        };
    }

    let mut map = FeatureMap::zeros(3, size, size);
    let denom = (size - 1) as f64;
    for y in 0..size {
        let v = y as f64 / denom;
        for x in 0..size {
            let u = x as f64 / denom;
            // Soft elliptical membership, crisp rim with sub-pixel falloff.
            let d = ((u - cx) / hw).powi(2) + ((v - cy) / hh).powi(2);
            let m = ((1.0 - d) * 4.0).clamp(0.0, 1.0);
            for c in 0..3 {
                let bg = base[c]
                    + amp[c]
                        * (std::f64::consts::TAU * (fx[c] * u + fy[c] * v) + phase[c]).sin();
                let noise = rng.gen_range(-0.02..0.02);
                let val = (bg * (1.0 - m) + subj_color[c] * m + noise).clamp(0.0, 1.0);
                map.set(c, y, x, val);
            }
        }
    }
    map
}

fn sample_views(rng: &mut ChaCha8Rng, subject: &BBox, n_views: usize) -> Vec<BBox> {
    let (cx, cy) = subject.center();
    let mut views: Vec<BBox> = Vec::with_capacity(n_views);
    while views.len() < n_views {
        let roll: f64 = rng.gen();
        let candidate = if roll < 0.3 && !views.is_empty() {
            // Near-duplicate of an earlier view: sub-cell shifts, so samplers
            // that quantize box corners struggle to tell them apart.
            let prev = views[rng.gen_range(0..views.len())];
            let dx = rng.gen_range(-0.03..0.03);
            let dy = rng.gen_range(-0.03..0.03);
            shift_into_unit(&prev, dx, dy)
        } else {
            let w = rng.gen_range(0.30..0.80);
            let h = rng.gen_range(0.30..0.80);
            let (x0, y0) = if roll < 0.85 {
                // Place the subject center at a chosen in-view position.
                let u = rng.gen_range(0.10..0.90);
                let v = rng.gen_range(0.10..0.90);
                (cx - u * w, cy - v * h)
            } else {
                // Unconstrained placement; may truncate or miss the subject.
                (rng.gen_range(-0.2..1.0), rng.gen_range(-0.2..1.0))
            };
            clamp_window(x0, y0, w, h)
        };
        if let Some(b) = candidate {
            views.push(b);
        }
    }
    views
}

fn clamp_window(x0: f64, y0: f64, w: f64, h: f64) -> Option<BBox> {
    let x0 = x0.clamp(0.0, (1.0 - w).max(0.0));
    let y0 = y0.clamp(0.0, (1.0 - h).max(0.0));
    BBox::new(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0)).ok()
}

fn shift_into_unit(b: &BBox, dx: f64, dy: f64) -> Option<BBox> {
    clamp_window(b.x0 + dx, b.y0 + dy, b.width(), b.height())
}
