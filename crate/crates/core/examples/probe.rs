//! Calibration probe: times burn-in / SSL steps and prints mAP trajectories.
//! Not part of the shipped surface; run with
//! `cargo run --release -p ssdet --example probe -- <corpus> <seed> <mode>`.

use std::time::Instant;

use ssdet::data::{split_dataset, Corpus, SceneSpec};
use ssdet::detector::DetectorConfig;
use ssdet::pseudo_label::EnsembleMode;
use ssdet::trainer::{run_training, RunEvent, TrainConfig, UpdateRule};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_scenes: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(330);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let rule = match args.get(3).map(|s| s.as_str()) {
        Some("fixed") => UpdateRule::Fixed,
        Some("copy") => UpdateRule::CopyEveryK,
        _ => UpdateRule::EmaPerIter,
    };
    let burn_in: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(300);
    let total: u64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(500);
    let n_props: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
    let alpha: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.99);
    let lr: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.02);

    let spec = SceneSpec::default();
    let t0 = Instant::now();
    let corpus = Corpus::generate(&spec, n_scenes, 2024).unwrap();
    eprintln!("corpus: {n_scenes} scenes in {:?}", t0.elapsed());

    let n_eval = n_scenes / 11 * 2;
    let split = split_dataset(corpus.len(), 0.10, seed, n_eval).unwrap();
    eprintln!(
        "split: {} labeled / {} unlabeled / {} eval",
        split.labeled.len(),
        split.unlabeled.len(),
        split.eval.len()
    );

    let det_cfg = DetectorConfig::default();
    let cfg = TrainConfig {
        burn_in_iters: burn_in,
        total_iters: total,
        n_proposals: n_props,
        alpha,
        lr,
        update_rule: rule,
        ensemble_mode: EnsembleMode::Flip,
        eval_interval: 100,
        seed,
        ..TrainConfig::default()
    };

    let t1 = Instant::now();
    let mut last_burn = Instant::now();
    let mut ssl_started = false;
    let out = run_training(&corpus, &split, &cfg, &det_cfg, None, |ev| {
        if let RunEvent::Record(r) = ev {
            if r.iteration == cfg.burn_in_iters && !ssl_started {
                eprintln!("burn-in done in {:?}", last_burn.elapsed());
                ssl_started = true;
                last_burn = Instant::now();
            }
            if let Some(t) = &r.teacher_map {
                let s = r.student_map.as_ref().unwrap();
                println!(
                    "iter {:4} phase {:?} teacher mAP {:.4} ap50 {:.4} | student mAP {:.4} | l_s {:.3} l_u {:.3}",
                    r.iteration, r.phase, t.map_50_95, t.ap50, s.map_50_95, r.l_s, r.l_u
                );
            }
        }
        Ok(())
    })
    .unwrap();
    eprintln!("ssl phase in {:?} (total {:?})", last_burn.elapsed(), t1.elapsed());
    let _ = out;
}
