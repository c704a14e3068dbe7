//! SGD-with-momentum trainer, evaluation, and the ablation runner.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranking::spearman;
use crate::tensor::FeatureMap;
use crate::views::{iou, pick_best_view};

use super::model::{forward_score, model_loss_and_grads, ModelArch, ModelParams};
use super::synth::{synth_generate, SynthConfig, SynthImage, ViewList};
use super::{LossKind, RoiMode, TrainConfig};

/// Everything a reproducible toy run needs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ToyRunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub arch: ModelArch,
}

/// Held-out data comes from a seed partition disjoint from training.
pub fn val_seed(train_seed: u64) -> u64 {
    train_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1)
}

/// One logged optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_spearman: f64,
}

/// Full training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    /// CSV with columns (epoch, step, loss, val_spearman); the validation
    /// column is filled on each epoch's final step row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,val_spearman\n");
        let mut epoch_end: std::collections::BTreeMap<usize, (usize, f64)> =
            std::collections::BTreeMap::new();
        for s in &self.steps {
            epoch_end.insert(s.epoch, (s.step, 0.0));
        }
        for e in &self.epochs {
            if let Some(v) = epoch_end.get_mut(&e.epoch) {
                v.1 = e.val_spearman;
            }
        }
        for s in &self.steps {
            let val = match epoch_end.get(&s.epoch) {
                Some(&(last_step, v)) if last_step == s.step => format!("{v}"),
                _ => String::new(),
            };
            out.push_str(&format!("{},{},{},{}\n", s.epoch, s.step, s.loss, val));
        }
        out
    }
}

/// Trained parameters plus the log. `params` is the best-validation epoch
/// checkpoint (early stopping); `final_params` is the last epoch's state.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub final_params: ModelParams,
    pub log: TrainLog,
}

/// Held-out ranking quality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub spearman: f64,
    pub top1_accuracy: f64,
    pub mean_iou_vs_oracle_best: f64,
}

/// Runs SGD with momentum per the config. Deterministic given
/// (config, data): list order is shuffled by a seeded generator and all
/// reductions are fixed-order.
pub fn train(
    config: &TrainConfig,
    arch: &ModelArch,
    train_data: &[(SynthImage, ViewList)],
    val_data: &[(SynthImage, ViewList)],
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    if train_data.is_empty() {
        return Err(Error::invalid("train: empty dataset"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let init_seed = rng.gen::<u64>();
    let mut params = ModelParams::init(arch, init_seed)?;
    let mut velocity = params.zeros_like();
    let mut log = TrainLog::default();

    let mut best_params = params.clone();
    let mut best_val = f64::NEG_INFINITY;
    let mut step_counter = 0usize;

    for epoch in 1..=config.epochs {
        let lr = if config.lr_decay_after_epochs > 0 && epoch > config.lr_decay_after_epochs {
            config.learning_rate * config.lr_decay_factor
        } else {
            config.learning_rate
        };

        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_lists) {
            let batch: Vec<(&FeatureMap, &ViewList)> = chunk
                .iter()
                .map(|&i| (&train_data[i].0.image, &train_data[i].1))
                .collect();
            let (loss, grads) = model_loss_and_grads(
                &params,
                &batch,
                config.loss_kind,
                config.roi_mode,
                config.gt_temperature,
            )?;
            sgd_step(&mut params, &mut velocity, &grads, lr, config.momentum);
            step_counter += 1;
            epoch_loss += loss;
            epoch_batches += 1;
            log.steps.push(StepLog {
                epoch,
                step: step_counter,
                loss,
            });
        }

        let val = if val_data.is_empty() {
            0.0
        } else {
            eval_rank_quality(&params, config.roi_mode, val_data)?.spearman
        };
        log.epochs.push(EpochLog {
            epoch,
            mean_loss: epoch_loss / epoch_batches.max(1) as f64,
            val_spearman: val,
        });
        if val > best_val {
            best_val = val;
            best_params = params.clone();
        }
    }

    if config.epochs == 0 {
        best_params = params.clone();
    }
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        log,
    })
}

fn sgd_step(
    params: &mut ModelParams,
    velocity: &mut ModelParams,
    grads: &ModelParams,
    lr: f64,
    momentum: f64,
) {
    let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..p.len() {
            v[i] = momentum * v[i] - lr * g[i];
            p[i] += v[i];
        }
    };
    for l in 0..params.convs.len() {
        update(
            &mut params.convs[l].weights,
            &mut velocity.convs[l].weights,
            &grads.convs[l].weights,
        );
        update(
            &mut params.convs[l].bias,
            &mut velocity.convs[l].bias,
            &grads.convs[l].bias,
        );
    }
    for l in 0..params.fcs.len() {
        update(
            &mut params.fcs[l].weights,
            &mut velocity.fcs[l].weights,
            &grads.fcs[l].weights,
        );
        update(
            &mut params.fcs[l].bias,
            &mut velocity.fcs[l].bias,
            &grads.fcs[l].bias,
        );
    }
}

/// Scores every list with the model and reduces to rank-quality metrics.
pub fn eval_rank_quality(
    params: &ModelParams,
    roi_mode: RoiMode,
    data: &[(SynthImage, ViewList)],
) -> Result<EvalReport> {
    let mut scored = Vec::with_capacity(data.len());
    for (img, list) in data {
        let pred = forward_score(params, &img.image, &list.views, roi_mode)?;
        scored.push((pred, list));
    }
    eval_scored_lists(&scored)
}

/// Metric reduction over (predicted scores, list) pairs: mean Spearman, Top-1
/// accuracy, and mean IoU between the picked and oracle-best views.
pub fn eval_scored_lists(scored: &[(Vec<f64>, &ViewList)]) -> Result<EvalReport> {
    if scored.is_empty() {
        return Err(Error::invalid("eval: empty dataset"));
    }
    let mut rho_sum = 0.0;
    let mut top1_hits = 0usize;
    let mut iou_sum = 0.0;
    for (pred, list) in scored {
        rho_sum += spearman(pred, &list.gt_scores)?;
        let picked = pick_best_view(&list.views, pred)?;
        let oracle_best = pick_best_view(&list.views, &list.gt_scores)?;
        if picked == oracle_best {
            top1_hits += 1;
        }
        iou_sum += iou(&picked, &oracle_best);
    }
    let n = scored.len() as f64;
    Ok(EvalReport {
        spearman: rho_sum / n,
        top1_accuracy: top1_hits as f64 / n,
        mean_iou_vs_oracle_best: iou_sum / n,
    })
}

/// One ablation variant: everything shared except the loss and the sampler.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSpec {
    pub base: ToyRunConfig,
    pub variants: Vec<(LossKind, RoiMode)>,
    /// Training seeds; results are averaged across them.
    pub seeds: Vec<u64>,
}

/// One row of the ablation table (mean over seeds).
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub loss_kind: LossKind,
    pub roi_mode: RoiMode,
    pub spearman: f64,
    pub top1_accuracy: f64,
    pub wall_clock_s: f64,
    /// Per-seed Spearman values behind the mean.
    pub per_seed_spearman: Vec<f64>,
}

/// Trains every (variant, seed) combination on the shared dataset and
/// reports per-variant means. Variants must differ only in loss and sampler,
/// so the dataset and budgets are identical across rows.
pub fn run_ablation(spec: &AblationSpec) -> Result<Vec<AblationRow>> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(Error::invalid("ablation: empty variants or seeds"));
    }
    let synth = &spec.base.synth;
    let train_data = synth_generate(synth.seed, synth.n_train, synth.n_views, synth.image_size)?;
    let val_data = synth_generate(
        val_seed(synth.seed),
        synth.n_val,
        synth.n_views,
        synth.image_size,
    )?;

    let mut rows = Vec::with_capacity(spec.variants.len());
    for &(loss_kind, roi_mode) in &spec.variants {
        let started = std::time::Instant::now();
        let mut rhos = Vec::with_capacity(spec.seeds.len());
        let mut top1s = Vec::with_capacity(spec.seeds.len());
        for &seed in &spec.seeds {
            let cfg = TrainConfig {
                loss_kind,
                roi_mode,
                rng_seed: seed,
                ..spec.base.train.clone()
            };
            let outcome = train(&cfg, &spec.base.arch, &train_data, &val_data)?;
            let report = eval_rank_quality(&outcome.params, roi_mode, &val_data)?;
            rhos.push(report.spearman);
            top1s.push(report.top1_accuracy);
        }
        let n = rhos.len() as f64;
        rows.push(AblationRow {
            loss_kind,
            roi_mode,
            spearman: rhos.iter().sum::<f64>() / n,
            top1_accuracy: top1s.iter().sum::<f64>() / n,
            wall_clock_s: started.elapsed().as_secs_f64(),
            per_seed_spearman: rhos,
        });
    }
    Ok(rows)
}

/// CSV rendering of an ablation table: one row per config.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("loss_kind,roi_kind,spearman,top1_accuracy,wall_clock_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.loss_kind.name(),
            r.roi_mode.name(),
            r.spearman,
            r.top1_accuracy,
            r.wall_clock_s
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranking::top1_entropy;

    fn small_setup() -> (TrainConfig, ModelArch, Vec<(SynthImage, ViewList)>, Vec<(SynthImage, ViewList)>) {
        let cfg = TrainConfig {
            epochs: 2,
            batch_lists: 4,
            rng_seed: 11,
            ..TrainConfig::default()
        };
        let arch = ModelArch::tiny();
        let train_data = synth_generate(21, 8, 6, 16).unwrap();
        let val_data = synth_generate(22, 4, 6, 16).unwrap();
        (cfg, arch, train_data, val_data)
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (mut cfg, arch, train_data, val_data) = small_setup();
        cfg.epochs = 0;
        let outcome = train(&cfg, &arch, &train_data, &val_data).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let expected = ModelParams::init(&arch, rng.gen::<u64>()).unwrap();
        assert_eq!(outcome.params, expected);
        assert!(outcome.log.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, arch, train_data, val_data) = small_setup();
        let a = train(&cfg, &arch, &train_data, &val_data).unwrap();
        let b = train(&cfg, &arch, &train_data, &val_data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn listwise_loss_never_dips_below_gt_entropy() {
        let (cfg, arch, train_data, val_data) = small_setup();
        let outcome = train(&cfg, &arch, &train_data, &val_data).unwrap();
        // Every per-step loss is a mean of per-list CE values, each bounded
        // below by the entropy of its gt Top-1 distribution; the global lower
        // bound is the min entropy across lists.
        let min_entropy = train_data
            .iter()
            .map(|(_, l)| {
                let gt = crate::ranking::rank_order_score(l.gt_scores.len()).unwrap();
                top1_entropy(&gt).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        for s in &outcome.log.steps {
            assert!(s.loss >= min_entropy - 1e-9, "step loss {} < bound", s.loss);
        }
    }

    #[test]
    fn eval_of_exact_gt_scores_is_perfect() {
        let data = synth_generate(31, 5, 8, 16).unwrap();
        let scored: Vec<(Vec<f64>, &ViewList)> = data
            .iter()
            .map(|(_, l)| (l.gt_scores.clone(), l))
            .collect();
        let report = eval_scored_lists(&scored).unwrap();
        assert_eq!(report.spearman, 1.0);
        assert_eq!(report.top1_accuracy, 1.0);
        assert_eq!(report.mean_iou_vs_oracle_best, 1.0);
    }

    #[test]
    fn eval_of_constant_scores_follows_tie_rule() {
        let data = synth_generate(33, 6, 8, 16).unwrap();
        let scored: Vec<(Vec<f64>, &ViewList)> = data
            .iter()
            .map(|(_, l)| (vec![0.0; l.views.len()], l))
            .collect();
        let report = eval_scored_lists(&scored).unwrap();
        // Constant predictions pick index 0 per the tie rule.
        let expected = data
            .iter()
            .filter(|(_, l)| {
                let oracle = pick_best_view(&l.views, &l.gt_scores).unwrap();
                l.views[0] == oracle
            })
            .count() as f64
            / data.len() as f64;
        assert_eq!(report.top1_accuracy, expected);
    }

    #[test]
    fn score_shift_leaves_metrics_unchanged() {
        let (cfg, arch, train_data, val_data) = small_setup();
        let outcome = train(&cfg, &arch, &train_data, &val_data).unwrap();
        let base = eval_rank_quality(&outcome.params, cfg.roi_mode, &val_data).unwrap();
        let mut shifted = outcome.params.clone();
        let last = shifted.fcs.len() - 1;
        shifted.fcs[last].bias[0] += 3.7;
        let moved = eval_rank_quality(&shifted, cfg.roi_mode, &val_data).unwrap();
        assert!((base.spearman - moved.spearman).abs() < 1e-12);
        assert_eq!(base.top1_accuracy, moved.top1_accuracy);
        assert!((base.mean_iou_vs_oracle_best - moved.mean_iou_vs_oracle_best).abs() < 1e-12);
    }

    #[test]
    fn ablation_emits_one_row_per_variant() {
        let base = ToyRunConfig {
            train: TrainConfig {
                epochs: 1,
                batch_lists: 4,
                ..TrainConfig::default()
            },
            synth: SynthConfig {
                n_train: 6,
                n_val: 3,
                n_views: 6,
                image_size: 16,
                seed: 5,
            },
            arch: ModelArch::tiny(),
        };
        let spec = AblationSpec {
            base,
            variants: vec![
                (LossKind::Listwise, RoiMode::Refine),
                (LossKind::PairwiseAll, RoiMode::Pool),
            ],
            seeds: vec![1, 2],
        };
        let rows = run_ablation(&spec).unwrap();
        assert_eq!(rows.len(), 2);
        let csv = ablation_to_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("loss_kind,roi_kind,"));
    }
}
