//! Scratch probe: training speed and loss behavior on a small synthetic set.

use ctx3d_core::det::AnchorConfig;
use ctx3d_core::model::*;
use ctx3d_core::synth::{generate_dataset, SynthConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let m: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let n_volumes: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);

    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig::default();
    let t0 = Instant::now();
    let manifest = generate_dataset(&synth, n_volumes, 99, dir.path()).unwrap();
    println!("dataset: {n_volumes} volumes in {:.2}s", t0.elapsed().as_secs_f64());

    let mut cfg = ModelConfig::tiny(m);
    cfg.anchors = AnchorConfig { scales: vec![8.0, 12.0, 16.0, 24.0], ratios: vec![0.5, 1.0, 2.0], stride: 8 };
    cfg.epochs = epochs;
    let mut model = build_model(&cfg, 1).unwrap();

    let t1 = Instant::now();
    let data = Dataset::load(&manifest.train.list_path, &manifest.train.gt_path, 8).unwrap();
    println!(
        "loaded {} volumes, {} samples in {:.2}s",
        data.volumes.len(),
        data.samples.len(),
        t1.elapsed().as_secs_f64()
    );

    let t2 = Instant::now();
    let report = train(&mut model, &data, &TrainOptions { seed: 7, checkpoint_dir: None }).unwrap();
    let dt = t2.elapsed().as_secs_f64();
    let n_iters = report.trace.len();
    println!("trained {n_iters} iters in {dt:.1}s ({:.3}s/iter)", dt / n_iters as f64);
    let avg = |rows: &[TraceRow]| -> (f32, f32, f32, f32, f32) {
        let n = rows.len() as f32;
        (
            rows.iter().map(|r| r.rpn_cls).sum::<f32>() / n,
            rows.iter().map(|r| r.rpn_reg).sum::<f32>() / n,
            rows.iter().map(|r| r.head_cls).sum::<f32>() / n,
            rows.iter().map(|r| r.head_reg).sum::<f32>() / n,
            rows.iter().map(|r| r.total).sum::<f32>() / n,
        )
    };
    let k = (n_iters / 10).max(1);
    println!("first {k}: {:?}", avg(&report.trace[..k]));
    println!("last  {k}: {:?}", avg(&report.trace[n_iters - k..]));

    // quick self-eval on the train split key slices
    let t3 = Instant::now();
    let mut n_det = 0usize;
    let vol = &data.volumes[0];
    let keys: Vec<usize> = (0..vol.dims.0).collect();
    let dets = infer_volume(&model, vol, &keys, true).unwrap();
    for (_, d) in &dets {
        n_det += d.len();
    }
    println!("inference over {} slices: {:.2}s, {} dets", keys.len(), t3.elapsed().as_secs_f64(), n_det);
}
