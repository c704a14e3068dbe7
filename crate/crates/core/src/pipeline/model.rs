//! Tiny scoring network with hand-derived backpropagation.
//!
//! Backbone: three 3x3 convolutions (stride 2 in the middle one), ReLU after
//! each. Head: three fully connected layers ending in a single rank score.
//! With an RoI mode the backbone runs once per image and each view's feature
//! tensor comes from the chosen kernel; in `RoiMode::None` each view is
//! cropped from the raw image, warped to a fixed input, and sent through the
//! backbone independently.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::ranking::{listwise_ce_loss, pairwise_hinge_loss, rank_order_score_scaled};
use crate::roi::{roi_backward, roi_forward, RoiConfig, RoiKind};
use crate::tensor::{bilinear_sample_unchecked, FeatureMap};

use super::{LossKind, RoiMode, ViewList};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArch {
    /// Channel progression including the input, e.g. `[3, 8, 16, 16]`.
    pub conv_channels: Vec<usize>,
    /// Stride per conv layer, e.g. `[1, 2, 1]`.
    pub conv_strides: Vec<usize>,
    /// Hidden FC sizes, e.g. `[64, 32]`; an output layer of size 1 is
    /// appended implicitly.
    pub fc_hidden: Vec<usize>,
    /// Side of the square RoI output grid.
    pub roi_output_size: usize,
    /// Full-map upsampling factor for the refine kernel.
    pub upsample_factor: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        ModelArch {
            conv_channels: vec![3, 8, 16, 16],
            conv_strides: vec![1, 2, 1],
            fc_hidden: vec![64, 32],
            roi_output_size: 14,
            upsample_factor: 2,
        }
    }
}

impl ModelArch {
    /// A deliberately small architecture for finite-difference checks.
    pub fn tiny() -> Self {
        ModelArch {
            conv_channels: vec![3, 4, 6, 6],
            conv_strides: vec![1, 2, 1],
            fc_hidden: vec![16, 8],
            roi_output_size: 3,
            upsample_factor: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.len() != self.conv_strides.len() + 1 {
            return Err(Error::invalid(
                "arch: conv_channels must have one more entry than conv_strides",
            ));
        }
        if self.conv_channels.iter().any(|&c| c == 0)
            || self.conv_strides.iter().any(|&s| s == 0)
            || self.fc_hidden.iter().any(|&n| n == 0)
            || self.roi_output_size == 0
            || self.upsample_factor == 0
        {
            return Err(Error::invalid("arch: all sizes must be >= 1"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        *self.conv_channels.last().unwrap()
    }

    /// Flattened per-view feature length fed to the head.
    pub fn head_input_len(&self) -> usize {
        self.feature_channels() * self.roi_output_size * self.roi_output_size
    }

    /// Input side for the crop-and-warp path; the stride-2 layer brings it
    /// down to `roi_output_size`.
    pub fn warp_input_size(&self) -> usize {
        let total_stride: usize = self.conv_strides.iter().product();
        self.roi_output_size * total_stride
    }

    pub fn roi_config(&self, kind: RoiKind) -> RoiConfig {
        RoiConfig::for_kind(kind)
            .with_output_size(self.roi_output_size)
            .with_upsample_factor(self.upsample_factor)
    }
}

/// 3x3 convolution weights, layout `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Fully connected weights, layout `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FcLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: ModelArch,
    pub convs: Vec<ConvLayer>,
    pub fcs: Vec<FcLayer>,
}

impl ModelParams {
    /// Adds seeded uniform noise to every bias.
    ///
    /// Zero biases put ReLU units with fully clamped input patches exactly on
    /// their kink (`pre == 0`), where central differences cannot match any
    /// subgradient; gradient checks therefore run at a bias-jittered point.
    pub fn jitter_biases(&mut self, seed: u64, amplitude: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in &mut self.convs {
            for b in &mut c.bias {
                *b += rng.gen_range(-amplitude..amplitude);
            }
        }
        for f in &mut self.fcs {
            for b in &mut f.bias {
                *b += rng.gen_range(-amplitude..amplitude);
            }
        }
    }

    /// Seeded init: fan-in-scaled normals (`std = sqrt(2 / fan_in)`), zero
    /// biases.
    pub fn init(arch: &ModelArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        for l in 0..arch.conv_strides.len() {
            let (cin, cout) = (arch.conv_channels[l], arch.conv_channels[l + 1]);
            let std = (2.0 / (cin * 9) as f64).sqrt();
            convs.push(ConvLayer {
                in_ch: cin,
                out_ch: cout,
                stride: arch.conv_strides[l],
                weights: normal_vec(&mut rng, cout * cin * 9, std),
                bias: vec![0.0; cout],
            });
        }
        let mut fcs = Vec::new();
        let mut in_dim = arch.head_input_len();
        for &h in &arch.fc_hidden {
            let std = (2.0 / in_dim as f64).sqrt();
            fcs.push(FcLayer {
                in_dim,
                out_dim: h,
                weights: normal_vec(&mut rng, h * in_dim, std),
                bias: vec![0.0; h],
            });
            in_dim = h;
        }
        let std = (2.0 / in_dim as f64).sqrt();
        fcs.push(FcLayer {
            in_dim,
            out_dim: 1,
            weights: normal_vec(&mut rng, in_dim, std),
            bias: vec![0.0; 1],
        });
        Ok(ModelParams { arch: arch.clone(), convs, fcs })
    }

    /// Zero-valued parameters of the same shape (useful as gradient and
    /// momentum buffers, and for the all-zero-weights edge case).
    pub fn zeros_like(&self) -> ModelParams {
        let mut p = self.clone();
        for c in &mut p.convs {
            c.weights.iter_mut().for_each(|v| *v = 0.0);
            c.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        for f in &mut p.fcs {
            f.weights.iter_mut().for_each(|v| *v = 0.0);
            f.bias.iter_mut().for_each(|v| *v = 0.0);
        }
        p
    }

    /// Named parameter tensors in a fixed order (checkpoint layout).
    pub fn tensors(&self) -> Vec<(String, Vec<u64>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((
                format!("conv{i}.weight"),
                vec![c.out_ch as u64, c.in_ch as u64, 3, 3],
                c.weights.as_slice(),
            ));
            out.push((format!("conv{i}.bias"), vec![c.out_ch as u64], c.bias.as_slice()));
        }
        for (i, f) in self.fcs.iter().enumerate() {
            out.push((
                format!("fc{i}.weight"),
                vec![f.out_dim as u64, f.in_dim as u64],
                f.weights.as_slice(),
            ));
            out.push((format!("fc{i}.bias"), vec![f.out_dim as u64], f.bias.as_slice()));
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend_from_slice(&c.weights);
            out.extend_from_slice(&c.bias);
        }
        for f in &self.fcs {
            out.extend_from_slice(&f.weights);
            out.extend_from_slice(&f.bias);
        }
        out
    }

    pub fn unflatten_from(&mut self, flat: &[f64]) -> Result<()> {
        fn take<'a>(flat: &'a [f64], pos: &mut usize, dst: &mut [f64]) -> Result<()> {
            let len = dst.len();
            if *pos + len > flat.len() {
                return Err(Error::ShapeMismatch(
                    "flat parameter vector too short".into(),
                ));
            }
            dst.copy_from_slice(&flat[*pos..*pos + len]);
            *pos += len;
            Ok(())
        }
        let mut pos = 0usize;
        for c in &mut self.convs {
            take(flat, &mut pos, &mut c.weights)?;
            take(flat, &mut pos, &mut c.bias)?;
        }
        for f in &mut self.fcs {
            take(flat, &mut pos, &mut f.weights)?;
            take(flat, &mut pos, &mut f.bias)?;
        }
        if pos != flat.len() {
            return Err(Error::ShapeMismatch("flat parameter vector too long".into()));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Box-Muller; two uniforms per normal keeps the stream deterministic.
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Gradients with the same structure as [`ModelParams`].
pub type ParamGrads = ModelParams;

fn conv_out_dim(n: usize, stride: usize) -> usize {
    // 3x3 kernel, padding 1.
    (n + 2 - 3) / stride + 1
}

/// Conv + ReLU forward; returns pre-activation (for the ReLU mask) and
/// post-activation maps.
fn conv_relu_forward(layer: &ConvLayer, input: &FeatureMap) -> (FeatureMap, FeatureMap) {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (conv_out_dim(h, layer.stride), conv_out_dim(w, layer.stride));
    let mut pre = FeatureMap::zeros(layer.out_ch, oh, ow);
    for o in 0..layer.out_ch {
        for i in 0..oh {
            let y0 = (i * layer.stride) as isize - 1;
            for j in 0..ow {
                let x0 = (j * layer.stride) as isize - 1;
                let mut acc = layer.bias[o];
                for c in 0..layer.in_ch {
                    let wbase = ((o * layer.in_ch) + c) * 9;
                    for ky in 0..3usize {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += input.get(c, y as usize, x as usize)
                                * layer.weights[wbase + ky * 3 + kx];
                        }
                    }
                }
                pre.set(o, i, j, acc);
            }
        }
    }
    let mut post = pre.clone();
    for v in post.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    (pre, post)
}

/// Backward through conv + ReLU. `grad_out` is w.r.t. the post-activation;
/// returns the gradient w.r.t. the layer input and accumulates weight/bias
/// gradients.
fn conv_relu_backward(
    layer: &ConvLayer,
    input: &FeatureMap,
    pre: &FeatureMap,
    grad_out: &FeatureMap,
    grad_layer: &mut ConvLayer,
) -> FeatureMap {
    let (h, w) = (input.height(), input.width());
    let (oh, ow) = (pre.height(), pre.width());
    let mut grad_in = FeatureMap::zeros(layer.in_ch, h, w);
    for o in 0..layer.out_ch {
        for i in 0..oh {
            let y0 = (i * layer.stride) as isize - 1;
            for j in 0..ow {
                if pre.get(o, i, j) <= 0.0 {
                    continue;
                }
                let g = grad_out.get(o, i, j);
                if g == 0.0 {
                    continue;
                }
                let x0 = (j * layer.stride) as isize - 1;
                grad_layer.bias[o] += g;
                for c in 0..layer.in_ch {
                    let wbase = ((o * layer.in_ch) + c) * 9;
                    for ky in 0..3usize {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            let (yu, xu) = (y as usize, x as usize);
                            grad_layer.weights[wbase + ky * 3 + kx] += g * input.get(c, yu, xu);
                            grad_in.add(c, yu, xu, g * layer.weights[wbase + ky * 3 + kx]);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

struct BackboneActs {
    /// Centered copy of the input fed to the first conv.
    input: FeatureMap,
    /// Pre-activation map per layer.
    pre: Vec<FeatureMap>,
    /// Post-activation map per layer (last one is the backbone output).
    post: Vec<FeatureMap>,
}

/// Pixel values arrive in `[0, 1]`; the backbone centers them to `[-1, 1]`
/// so first-layer activations are not all-positive-correlated.
fn center_input(image: &FeatureMap) -> FeatureMap {
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = 2.0 * (*v - 0.5);
    }
    out
}

fn backbone_forward(params: &ModelParams, image: &FeatureMap) -> BackboneActs {
    let input = center_input(image);
    let mut pre = Vec::with_capacity(params.convs.len());
    let mut post = Vec::with_capacity(params.convs.len());
    {
        let mut cur = &input;
        for layer in &params.convs {
            let (p, q) = conv_relu_forward(layer, cur);
            pre.push(p);
            post.push(q);
            cur = post.last().unwrap();
        }
    }
    BackboneActs { input, pre, post }
}

/// Backward through the whole backbone; accumulates into `grads`.
fn backbone_backward(
    params: &ModelParams,
    acts: &BackboneActs,
    grad_feat: FeatureMap,
    grads: &mut ParamGrads,
) {
    let mut g = grad_feat;
    for l in (0..params.convs.len()).rev() {
        let input = if l == 0 { &acts.input } else { &acts.post[l - 1] };
        g = conv_relu_backward(&params.convs[l], input, &acts.pre[l], &g, &mut grads.convs[l]);
    }
}

struct HeadActs {
    /// Input vector to each FC layer (index 0 is the flattened feature).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pres: Vec<Vec<f64>>,
}

fn head_forward(params: &ModelParams, flat: Vec<f64>) -> (f64, HeadActs) {
    let n_fc = params.fcs.len();
    let mut inputs = Vec::with_capacity(n_fc);
    let mut pres = Vec::with_capacity(n_fc - 1);
    let mut cur = flat;
    for (l, fc) in params.fcs.iter().enumerate() {
        let mut out = fc.bias.clone();
        for o in 0..fc.out_dim {
            let row = &fc.weights[o * fc.in_dim..(o + 1) * fc.in_dim];
            let mut acc = 0.0;
            for (wv, xv) in row.iter().zip(cur.iter()) {
                acc += wv * xv;
            }
            out[o] += acc;
        }
        inputs.push(cur);
        if l + 1 < n_fc {
            pres.push(out.clone());
            for v in out.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            cur = out;
        } else {
            return (out[0], HeadActs { inputs, pres });
        }
    }
    unreachable!("head has at least one layer")
}

/// Backward through the head; accumulates FC gradients and returns the
/// gradient w.r.t. the flattened feature vector.
fn head_backward(
    params: &ModelParams,
    acts: &HeadActs,
    d_score: f64,
    grads: &mut ParamGrads,
) -> Vec<f64> {
    let n_fc = params.fcs.len();
    let mut d_out = vec![d_score];
    for l in (0..n_fc).rev() {
        let fc = &params.fcs[l];
        let input = &acts.inputs[l];
        let gfc = &mut grads.fcs[l];
        let mut d_in = vec![0.0; fc.in_dim];
        for o in 0..fc.out_dim {
            let g = d_out[o];
            if g == 0.0 {
                continue;
            }
            gfc.bias[o] += g;
            let row = &fc.weights[o * fc.in_dim..(o + 1) * fc.in_dim];
            let grow = &mut gfc.weights[o * fc.in_dim..(o + 1) * fc.in_dim];
            for i in 0..fc.in_dim {
                grow[i] += g * input[i];
                d_in[i] += g * row[i];
            }
        }
        if l > 0 {
            // ReLU mask of the previous hidden layer.
            let pre = &acts.pres[l - 1];
            for (v, p) in d_in.iter_mut().zip(pre.iter()) {
                if *p <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        d_out = d_in;
    }
    d_out
}

/// Crops `bbox` from the image and warps it to a square input, align-corners.
fn crop_warp(image: &FeatureMap, bbox: &BBox, side: usize) -> FeatureMap {
    let mut out = FeatureMap::zeros(image.channels(), side, side);
    let x0 = bbox.x0 * (image.width() - 1) as f64;
    let x1 = bbox.x1 * (image.width() - 1) as f64;
    let y0 = bbox.y0 * (image.height() - 1) as f64;
    let y1 = bbox.y1 * (image.height() - 1) as f64;
    let denom = (side - 1).max(1) as f64;
    for c in 0..image.channels() {
        for i in 0..side {
            let y = y0 + i as f64 * (y1 - y0) / denom;
            for j in 0..side {
                let x = x0 + j as f64 * (x1 - x0) / denom;
                out.set(c, i, j, bilinear_sample_unchecked(image, c, x, y));
            }
        }
    }
    out
}

/// One rank score per view; deterministic.
pub fn forward_score(
    params: &ModelParams,
    image: &FeatureMap,
    views: &[BBox],
    roi_mode: RoiMode,
) -> Result<Vec<f64>> {
    if views.is_empty() {
        return Err(Error::invalid("forward_score: empty view list"));
    }
    if image.channels() != params.arch.conv_channels[0] {
        return Err(Error::ShapeMismatch(format!(
            "forward_score: image has {} channels, model expects {}",
            image.channels(),
            params.arch.conv_channels[0]
        )));
    }
    match roi_mode.kind() {
        Some(kind) => {
            let acts = backbone_forward(params, image);
            let feat = acts.post.last().unwrap();
            let cfg = params.arch.roi_config(kind);
            let rois = roi_forward(feat, views, &cfg)?;
            Ok(rois
                .into_iter()
                .map(|r| head_forward(params, r.data.data().to_vec()).0)
                .collect())
        }
        None => {
            let side = params.arch.warp_input_size();
            views
                .iter()
                .map(|v| {
                    let inp = crop_warp(image, v, side);
                    let acts = backbone_forward(params, &inp);
                    let flat = acts.post.last().unwrap().data().to_vec();
                    Ok(head_forward(params, flat).0)
                })
                .collect()
        }
    }
}

/// Loss over one view list plus its gradient in score space.
fn list_loss(
    pred: &[f64],
    gt: &[f64],
    loss_kind: LossKind,
    gt_temperature: f64,
) -> Result<(f64, Vec<f64>)> {
    let n = pred.len();
    match loss_kind {
        LossKind::Listwise => {
            // Ordinal ranks -> linear scores, best view largest.
            let order = descending_order(gt);
            let rank_scores = rank_order_score_scaled(n, gt_temperature)?;
            let mut gt_input = vec![0.0; n];
            for (rank_pos, &view_idx) in order.iter().enumerate() {
                gt_input[view_idx] = rank_scores[rank_pos];
            }
            let res = listwise_ce_loss(pred, &gt_input)?;
            Ok((res.value, res.grad))
        }
        LossKind::PairwiseAll | LossKind::PairwiseThreshold(_) => {
            let min_gap = match loss_kind {
                LossKind::PairwiseThreshold(d) => d,
                _ => 0.0,
            };
            let mut value = 0.0;
            let mut grad = vec![0.0; n];
            let mut pairs = 0usize;
            for i in 0..n {
                for j in 0..n {
                    if gt[i] > gt[j] && gt[i] - gt[j] >= min_gap {
                        let r = pairwise_hinge_loss(pred[i], pred[j])?;
                        value += r.value;
                        grad[i] += r.grad[0];
                        grad[j] += r.grad[1];
                        pairs += 1;
                    }
                }
            }
            if pairs > 0 {
                value /= pairs as f64;
                for g in grad.iter_mut() {
                    *g /= pairs as f64;
                }
            }
            Ok((value, grad))
        }
        LossKind::PairwiseAdjacent => {
            let order = descending_order(gt);
            let mut value = 0.0;
            let mut grad = vec![0.0; n];
            let pairs = n - 1;
            for w in order.windows(2) {
                let (better, worse) = (w[0], w[1]);
                let r = pairwise_hinge_loss(pred[better], pred[worse])?;
                value += r.value;
                grad[better] += r.grad[0];
                grad[worse] += r.grad[1];
            }
            value /= pairs as f64;
            for g in grad.iter_mut() {
                *g /= pairs as f64;
            }
            Ok((value, grad))
        }
    }
}

/// Indices sorted by descending value.
fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
    order
}

/// Mean loss over a batch of lists, forward only.
pub fn model_loss(
    params: &ModelParams,
    batch: &[(&FeatureMap, &ViewList)],
    loss_kind: LossKind,
    roi_mode: RoiMode,
    gt_temperature: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("model_loss: empty batch"));
    }
    let mut total = 0.0;
    for (image, list) in batch {
        let scores = forward_score(params, image, &list.views, roi_mode)?;
        let (value, _) = list_loss(&scores, &list.gt_scores, loss_kind, gt_temperature)?;
        total += value;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss over a batch of lists and the accumulated parameter gradients.
///
/// This is the single entry point the trainer and the gradient checks use,
/// so the checked path is exactly the trained path.
pub fn model_loss_and_grads(
    params: &ModelParams,
    batch: &[(&FeatureMap, &ViewList)],
    loss_kind: LossKind,
    roi_mode: RoiMode,
    gt_temperature: f64,
) -> Result<(f64, ParamGrads)> {
    if batch.is_empty() {
        return Err(Error::invalid("model_loss_and_grads: empty batch"));
    }
    let mut grads = params.zeros_like();
    let mut total = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (image, list) in batch {
        let n = list.views.len();
        match roi_mode.kind() {
            Some(kind) => {
                let acts = backbone_forward(params, image);
                let feat = acts.post.last().unwrap();
                let cfg = params.arch.roi_config(kind);
                let rois = roi_forward(feat, &list.views, &cfg)?;
                let mut head_acts = Vec::with_capacity(n);
                let mut scores = Vec::with_capacity(n);
                for r in &rois {
                    let (s, a) = head_forward(params, r.data.data().to_vec());
                    scores.push(s);
                    head_acts.push(a);
                }
                let (value, d_scores) = list_loss(&scores, &list.gt_scores, loss_kind, gt_temperature)?;
                total += value * scale;

                let s_out = params.arch.roi_output_size;
                let c_out = params.arch.feature_channels();
                let mut grad_rois = Vec::with_capacity(n);
                for (a, &ds) in head_acts.iter().zip(d_scores.iter()) {
                    let d_flat = head_backward(params, a, ds * scale, &mut grads);
                    grad_rois.push(FeatureMap::new(c_out, s_out, s_out, d_flat)?);
                }
                let grad_feat = roi_backward(feat, &list.views, &cfg, &grad_rois)?;
                backbone_backward(params, &acts, grad_feat, &mut grads);
            }
            None => {
                let side = params.arch.warp_input_size();
                let mut per_view: Vec<(BackboneActs, HeadActs)> = Vec::with_capacity(n);
                let mut scores = Vec::with_capacity(n);
                for v in &list.views {
                    let inp = crop_warp(image, v, side);
                    let acts = backbone_forward(params, &inp);
                    let flat = acts.post.last().unwrap().data().to_vec();
                    let (s, ha) = head_forward(params, flat);
                    scores.push(s);
                    per_view.push((acts, ha));
                }
                let (value, d_scores) = list_loss(&scores, &list.gt_scores, loss_kind, gt_temperature)?;
                total += value * scale;
                for ((acts, ha), &ds) in per_view.iter().zip(d_scores.iter()) {
                    if ds == 0.0 {
                        continue;
                    }
                    let d_flat = head_backward(params, ha, ds * scale, &mut grads);
                    let feat = acts.post.last().unwrap();
                    let grad_feat =
                        FeatureMap::new(feat.channels(), feat.height(), feat.width(), d_flat)?;
                    backbone_backward(params, acts, grad_feat, &mut grads);
                }
            }
        }
    }
    Ok((total, grads))
}
