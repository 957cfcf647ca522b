//! Saliency evaluation: MAE, adaptive F-measure, S-measure, E-measure,
//! and a 255-point precision/recall curve.
//!
//! All functions take a prediction in [0,1] and a binary ground truth of
//! the same spatial extent, as flat f64 slices plus height/width.

use crate::error::{Error, Result};

const EPS: f64 = 1e-12;

fn check_pair(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<()> {
    if h * w == 0 || pred.len() != h * w || gt.len() != h * w {
        return Err(Error::invalid(format!(
            "metric inputs must both be {h}x{w}, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    for &p in pred {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid("prediction values must lie in [0,1]"));
        }
    }
    for &g in gt {
        if g != 0.0 && g != 1.0 {
            return Err(Error::invalid("ground truth must be binary"));
        }
    }
    Ok(())
}

/// Min-max normalize into [0,1]; a constant map becomes all zeros.
pub fn normalize_map(x: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo <= 0.0 {
        return vec![0.0; x.len()];
    }
    x.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

pub fn mae(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(pred, gt, h, w)?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - g).abs())
        .sum::<f64>()
        / (h * w) as f64)
}

/// F-measure at the adaptive threshold 2*mean(pred), beta^2 = 0.3.
pub fn adaptive_fmeasure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(pred, gt, h, w)?;
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    let tau = (2.0 * mean).clamp(1e-12, 1.0 - 1e-8);
    let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in pred.iter().zip(gt) {
        let b = p >= tau;
        match (b, g > 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return Ok(0.0);
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fnn);
    let b2 = 0.3;
    Ok((1.0 + b2) * precision * recall / (b2 * precision + recall))
}

fn mean_of(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn var_of(x: &[f64], mean: f64) -> f64 {
    // sample variance (n-1), matching the reference implementation
    if x.len() < 2 {
        return 0.0;
    }
    x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (x.len() - 1) as f64
}

/// Object-level term: foreground score on pred/gt plus background score on
/// the complements, weighted by the foreground fraction.
fn s_object(pred: &[f64], gt: &[f64]) -> f64 {
    let score = |vals: &[f64]| -> f64 {
        if vals.is_empty() {
            return 0.0;
        }
        let m = mean_of(vals);
        let sd = var_of(vals, m).sqrt();
        2.0 * m / (m * m + 1.0 + sd + EPS)
    };
    let fg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g > 0.5)
        .map(|(&p, _)| p)
        .collect();
    let bg: Vec<f64> = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| g <= 0.5)
        .map(|(&p, _)| 1.0 - p)
        .collect();
    let mu = mean_of(gt);
    mu * score(&fg) + (1.0 - mu) * score(&bg)
}

fn ssim_region(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    if pred.is_empty() {
        return 1.0;
    }
    let (mx, my) = (mean_of(pred), mean_of(gt));
    let sx = var_of(pred, mx);
    let sy = var_of(gt, my);
    let sxy = if pred.len() < 2 {
        0.0
    } else {
        pred.iter()
            .zip(gt)
            .map(|(&p, &g)| (p - mx) * (g - my))
            .sum::<f64>()
            / (n - 1.0)
    };
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Region-level term: split at the ground-truth centroid, SSIM per
/// quadrant, weights by quadrant area fraction.
fn s_region(pred: &[f64], gt: &[f64], h: usize, w: usize) -> f64 {
    // centroid of the foreground mass (1-based cut as in the reference)
    let total: f64 = gt.iter().sum();
    let (cx, cy) = if total == 0.0 {
        (w / 2, h / 2)
    } else {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for r in 0..h {
            for c in 0..w {
                let g = gt[r * w + c];
                sx += g * (c as f64 + 1.0);
                sy += g * (r as f64 + 1.0);
            }
        }
        (
            (sx / total).round() as usize - 1,
            (sy / total).round() as usize - 1,
        )
    };
    let cx = cx.min(w - 1);
    let cy = cy.min(h - 1);

    let quad = |x: &[f64], r0: usize, r1: usize, c0: usize, c1: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
        for r in r0..r1 {
            out.extend_from_slice(&x[r * w + c0..r * w + c1]);
        }
        out
    };
    let bounds = [
        (0, cy + 1, 0, cx + 1),
        (0, cy + 1, cx + 1, w),
        (cy + 1, h, 0, cx + 1),
        (cy + 1, h, cx + 1, w),
    ];
    let area = (h * w) as f64;
    let mut s = 0.0;
    for (r0, r1, c0, c1) in bounds {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        let pq = quad(pred, r0, r1, c0, c1);
        let gq = quad(gt, r0, r1, c0, c1);
        let wq = pq.len() as f64 / area;
        s += wq * ssim_region(&pq, &gq);
    }
    s
}

/// Structure measure: S = 0.5 * S_object + 0.5 * S_region, with the
/// degenerate all-background / all-foreground ground truths scored by the
/// prediction mean.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(pred, gt, h, w)?;
    let mu = mean_of(gt);
    let s = if mu == 0.0 {
        1.0 - mean_of(pred)
    } else if mu == 1.0 {
        mean_of(pred)
    } else {
        let s = 0.5 * s_object(pred, gt) + 0.5 * s_region(pred, gt, h, w);
        s.max(0.0)
    };
    Ok(s.clamp(0.0, 1.0))
}

/// Enhanced-alignment measure at the adaptive threshold 2*mean(pred).
pub fn e_measure_adaptive(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check_pair(pred, gt, h, w)?;
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    let tau = (2.0 * mean).clamp(1e-12, 1.0 - 1e-8);
    let bin: Vec<f64> = pred.iter().map(|&p| (p >= tau) as u8 as f64).collect();

    let gt_sum: f64 = gt.iter().sum();
    let n = (h * w) as f64;
    if gt_sum == 0.0 {
        // no foreground: score is the fraction of correctly-off pixels
        return Ok(1.0 - mean_of(&bin));
    }
    if gt_sum == n {
        return Ok(mean_of(&bin));
    }
    let mp = mean_of(&bin);
    let mg = mean_of(gt);
    let mut acc = 0.0;
    for (&p, &g) in bin.iter().zip(gt) {
        let phi_p = p - mp;
        let phi_g = g - mg;
        let xi = 2.0 * phi_g * phi_p / (phi_g * phi_g + phi_p * phi_p + EPS);
        let e = (xi + 1.0) * (xi + 1.0) / 4.0;
        acc += e;
    }
    Ok(acc / n)
}

/// Micro-averaged precision/recall over 255 thresholds k/256, k = 1..255.
/// Counts are pooled across all supplied pairs before dividing.
pub fn pr_curve(pairs: &[(&[f64], &[f64])], h: usize, w: usize) -> Result<Vec<(f64, f64, f64)>> {
    for (p, g) in pairs {
        check_pair(p, g, h, w)?;
    }
    let mut out = Vec::with_capacity(255);
    for k in 1..=255usize {
        let tau = k as f64 / 256.0;
        let (mut tp, mut fp, mut fnn) = (0.0f64, 0.0f64, 0.0f64);
        for (pred, gt) in pairs {
            for (&p, &g) in pred.iter().zip(*gt) {
                let b = p >= tau;
                match (b, g > 0.5) {
                    (true, true) => tp += 1.0,
                    (true, false) => fp += 1.0,
                    (false, true) => fnn += 1.0,
                    (false, false) => {}
                }
            }
        }
        let precision = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
        let recall = if tp + fnn == 0.0 { 1.0 } else { tp / (tp + fnn) };
        out.push((tau, precision, recall));
    }
    Ok(out)
}

/// Dataset-level aggregate of the four scalar metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub s_measure: f64,
    pub f_measure: f64,
    pub e_measure: f64,
    pub mae: f64,
}

impl MetricsReport {
    /// Average per-image metrics over a set of pairs.
    pub fn evaluate(pairs: &[(&[f64], &[f64])], h: usize, w: usize) -> Result<MetricsReport> {
        if pairs.is_empty() {
            return Err(Error::invalid("no prediction/ground-truth pairs"));
        }
        let mut r = MetricsReport {
            count: pairs.len(),
            ..Default::default()
        };
        for (p, g) in pairs {
            r.s_measure += s_measure(p, g, h, w)?;
            r.f_measure += adaptive_fmeasure(p, g, h, w)?;
            r.e_measure += e_measure_adaptive(p, g, h, w)?;
            r.mae += mae(p, g, h, w)?;
        }
        let n = pairs.len() as f64;
        r.s_measure /= n;
        r.f_measure /= n;
        r.e_measure /= n;
        r.mae /= n;
        Ok(r)
    }

    pub fn table(&self) -> String {
        format!(
            "images  S       adpF    adpE    MAE\n{:<7} {:.4}  {:.4}  {:.4}  {:.4}\n",
            self.count, self.s_measure, self.f_measure, self.e_measure, self.mae
        )
    }

    pub fn key_values(&self) -> String {
        format!(
            "count {}\ns_measure {:.6}\nf_measure {:.6}\ne_measure {:.6}\nmae {:.6}\n",
            self.count, self.s_measure, self.f_measure, self.e_measure, self.mae
        )
    }
}

/// CSV rendering of [`pr_curve`] output: `threshold,precision,recall`.
pub fn pr_curve_csv(curve: &[(f64, f64, f64)]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for (t, p, r) in curve {
        s.push_str(&format!("{t:.6},{p:.6},{r:.6}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pair(r: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
        let pred: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let gt: Vec<f64> = (0..n).map(|_| (r.gen::<f64>() > 0.6) as u8 as f64).collect();
        (pred, gt)
    }

    #[test]
    fn mae_matches_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let (p, g) = random_pair(&mut r, 64);
        let got = mae(&p, &g, 8, 8).unwrap();
        let mut acc = 0.0;
        for i in 0..64 {
            acc += (p[i] - g[i]).abs();
        }
        assert!((got - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores() {
        let gt = vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let s = s_measure(&gt, &gt, 3, 3).unwrap();
        assert!(s > 0.95, "s = {s}");
        let f = adaptive_fmeasure(&gt, &gt, 3, 3).unwrap();
        assert!((f - 1.0).abs() < 1e-12);
        let e = e_measure_adaptive(&gt, &gt, 3, 3).unwrap();
        assert!((e - 1.0).abs() < 1e-9);
        assert_eq!(mae(&gt, &gt, 3, 3).unwrap(), 0.0);
    }

    #[test]
    fn inverted_prediction_scores_low() {
        let gt = vec![0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert_eq!(adaptive_fmeasure(&inv, &gt, 3, 3).unwrap(), 0.0);
        assert!(s_measure(&inv, &gt, 3, 3).unwrap() < 0.5);
        assert_eq!(mae(&inv, &gt, 3, 3).unwrap(), 1.0);
    }

    #[test]
    fn fmeasure_matches_direct_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (p, g) = random_pair(&mut r, 100);
            let got = adaptive_fmeasure(&p, &g, 10, 10).unwrap();
            let tau = (2.0 * p.iter().sum::<f64>() / 100.0).clamp(1e-12, 1.0 - 1e-8);
            let (mut tp, mut pp, mut gp) = (0.0, 0.0, 0.0);
            for i in 0..100 {
                let b = p[i] >= tau;
                if b {
                    pp += 1.0;
                }
                if g[i] > 0.5 {
                    gp += 1.0;
                }
                if b && g[i] > 0.5 {
                    tp += 1.0;
                }
            }
            let want = if tp == 0.0 {
                0.0
            } else {
                let pr = tp / pp;
                let rc = tp / gp;
                1.3 * pr * rc / (0.3 * pr + rc)
            };
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn smeasure_degenerate_ground_truths() {
        let pred = vec![0.25; 16];
        let zeros = vec![0.0; 16];
        let ones = vec![1.0; 16];
        assert!((s_measure(&pred, &zeros, 4, 4).unwrap() - 0.75).abs() < 1e-12);
        assert!((s_measure(&pred, &ones, 4, 4).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn smeasure_bounded_and_ranks_quality() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (_, g) = random_pair(&mut r, 256);
        // noisy-but-correlated prediction vs anti-correlated prediction
        let good: Vec<f64> = g.iter().map(|&v| (0.8 * v + 0.1).clamp(0.0, 1.0)).collect();
        let bad: Vec<f64> = g.iter().map(|&v| 1.0 - v).collect();
        let sg = s_measure(&good, &g, 16, 16).unwrap();
        let sb = s_measure(&bad, &g, 16, 16).unwrap();
        assert!((0.0..=1.0).contains(&sg) && (0.0..=1.0).contains(&sb));
        assert!(sg > sb);
    }

    #[test]
    fn emeasure_degenerates() {
        // constant-zero prediction binarizes to all-off
        let pred = vec![0.0; 16];
        let zeros = vec![0.0; 16];
        let ones = vec![1.0; 16];
        assert!((e_measure_adaptive(&pred, &zeros, 4, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!(e_measure_adaptive(&pred, &ones, 4, 4).unwrap() < 1e-12);
    }

    #[test]
    fn emeasure_matches_direct_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let (p, g) = random_pair(&mut r, 64);
        let got = e_measure_adaptive(&p, &g, 8, 8).unwrap();
        // independent recomputation
        let tau = (2.0 * p.iter().sum::<f64>() / 64.0).clamp(1e-12, 1.0 - 1e-8);
        let b: Vec<f64> = p.iter().map(|&v| (v >= tau) as u8 as f64).collect();
        let mp = b.iter().sum::<f64>() / 64.0;
        let mg = g.iter().sum::<f64>() / 64.0;
        let mut acc = 0.0;
        for i in 0..64 {
            let (pp, gg) = (b[i] - mp, g[i] - mg);
            let xi = 2.0 * gg * pp / (gg * gg + pp * pp + 1e-12);
            acc += (xi + 1.0) * (xi + 1.0) / 4.0;
        }
        assert!((got - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_has_255_monotone_thresholds() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (p, g) = random_pair(&mut r, 64);
        let curve = pr_curve(&[(&p, &g)], 8, 8).unwrap();
        assert_eq!(curve.len(), 255);
        // recall is non-increasing in the threshold
        for win in curve.windows(2) {
            assert!(win[1].2 <= win[0].2 + 1e-12);
        }
        assert!((curve[0].0 - 1.0 / 256.0).abs() < 1e-12);
        assert!((curve[254].0 - 255.0 / 256.0).abs() < 1e-12);
    }

    #[test]
    fn pr_curve_pools_counts_across_images() {
        // one image all-hit, one all-miss at high threshold: pooled
        // precision must sit between the two per-image values
        let p1 = vec![0.9; 4];
        let g1 = vec![1.0; 4];
        let p2 = vec![0.9; 4];
        let g2 = vec![0.0; 4];
        let curve = pr_curve(&[(&p1, &g1), (&p2, &g2)], 2, 2).unwrap();
        // at threshold 128/256 both images predict positive everywhere
        let row = curve[127];
        assert!((row.1 - 0.5).abs() < 1e-12);
        assert!((row.2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_handles_constant_maps() {
        assert_eq!(normalize_map(&[0.7, 0.7, 0.7]), vec![0.0, 0.0, 0.0]);
        let n = normalize_map(&[2.0, 4.0, 3.0]);
        assert_eq!(n, vec![0.0, 1.0, 0.5]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(mae(&[0.5], &[1.0, 0.0], 1, 2).is_err());
        assert!(mae(&[1.5, 0.0], &[1.0, 0.0], 1, 2).is_err());
        assert!(mae(&[0.5, 0.0], &[0.3, 0.0], 1, 2).is_err());
        assert!(MetricsReport::evaluate(&[], 1, 1).is_err());
    }

    #[test]
    fn report_averages_per_image() {
        let p1 = vec![1.0, 0.0, 0.0, 0.0];
        let g1 = vec![1.0, 0.0, 0.0, 0.0];
        let p2 = vec![0.0, 1.0, 1.0, 1.0];
        let g2 = vec![1.0, 0.0, 0.0, 0.0];
        let r = MetricsReport::evaluate(&[(&p1, &g1), (&p2, &g2)], 2, 2).unwrap();
        let m1 = mae(&p1, &g1, 2, 2).unwrap();
        let m2 = mae(&p2, &g2, 2, 2).unwrap();
        assert!((r.mae - 0.5 * (m1 + m2)).abs() < 1e-12);
        assert_eq!(r.count, 2);
        assert!(r.table().contains("MAE"));
        assert!(r.key_values().contains("mae 0.5"));
    }
}
