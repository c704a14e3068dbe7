//! Scratch experiment: learning-curve probe for the toy pipeline.
use viewrank_core::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(192);
    let image_size: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let epochs: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let decay_after: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(4);
    let temp: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(1.0);
    let roi_s: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(7);

    let synth = SynthConfig { n_train, n_val: 64, n_views: 24, image_size, seed: 1 };
    let mut arch = ModelArch::default();
    arch.roi_output_size = roi_s;
    let train_data = synth_generate(synth.seed, synth.n_train, synth.n_views, synth.image_size).unwrap();
    let val_data = synth_generate(val_seed(synth.seed), synth.n_val, synth.n_views, synth.image_size).unwrap();

    let cfg = TrainConfig { epochs, rng_seed: 7, lr_decay_after_epochs: decay_after, gt_temperature: temp, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    let out = train(&cfg, &arch, &train_data, &val_data).unwrap();
    println!("train: {:.1}s", t0.elapsed().as_secs_f64());
    for e in &out.log.epochs {
        println!("epoch {:2}: loss {:.4} val_spearman {:.4}", e.epoch, e.mean_loss, e.val_spearman);
    }
    let rep = eval_rank_quality(&out.params, cfg.roi_mode, &val_data).unwrap();
    let train_rep = eval_rank_quality(&out.params, cfg.roi_mode, &train_data[..64.min(train_data.len())]).unwrap();
    println!("best: val spearman {:.4} top1 {:.4} iou {:.4} | train spearman {:.4}",
        rep.spearman, rep.top1_accuracy, rep.mean_iou_vs_oracle_best, train_rep.spearman);
}
