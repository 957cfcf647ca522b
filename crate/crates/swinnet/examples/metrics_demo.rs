//! Score a few synthetic prediction/ground-truth pairs with every metric
//! and print the head of the precision/recall curve.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinnet::metrics::{
    adaptive_fmeasure, e_measure_adaptive, mae, pr_curve, s_measure, MetricsReport,
};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (32, 32);

    // ground truth: a rectangle; predictions of decreasing quality
    let mut gt = vec![0.0f64; h * w];
    for r in 8..24 {
        for c in 10..22 {
            gt[r * w + c] = 1.0;
        }
    }
    let sharp: Vec<f64> = gt.iter().map(|&g| 0.9 * g + 0.05).collect();
    let noisy: Vec<f64> = gt
        .iter()
        .map(|&g| (0.6 * g + 0.2 * rng.gen::<f64>()).clamp(0.0, 1.0))
        .collect();
    let blind: Vec<f64> = (0..h * w).map(|_| rng.gen()).collect();

    println!("prediction   S       adpF    adpE    MAE");
    for (name, pred) in [("sharp", &sharp), ("noisy", &noisy), ("random", &blind)] {
        println!(
            "{name:<12} {:.4}  {:.4}  {:.4}  {:.4}",
            s_measure(pred, &gt, h, w).unwrap(),
            adaptive_fmeasure(pred, &gt, h, w).unwrap(),
            e_measure_adaptive(pred, &gt, h, w).unwrap(),
            mae(pred, &gt, h, w).unwrap(),
        );
    }

    let pairs: Vec<(&[f64], &[f64])> = vec![(&sharp, &gt), (&noisy, &gt)];
    let report = MetricsReport::evaluate(&pairs, h, w).unwrap();
    println!("\naggregate over two maps:\n{}", report.table());

    let curve = pr_curve(&pairs, h, w).unwrap();
    println!("precision/recall curve ({} thresholds), first rows:", curve.len());
    for (t, p, r) in curve.iter().step_by(64) {
        println!("  tau {t:.3}  precision {p:.3}  recall {r:.3}");
    }
}
