//! Kozachenko-Leonenko nearest-neighbour entropy estimate, used to track how
//! diverse the model dataset's state-action pairs are.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{usage, Result};

/// Distances below this are treated as this value so duplicates stay finite.
pub const DISTANCE_FLOOR: f64 = 1e-12;

/// Neighbour order used by the training diagnostics.
pub const DIAGNOSTIC_K: usize = 3;

/// Differential entropy estimate (nats) of the distribution the points were
/// drawn from:
///
/// `H ~ (d/n) sum_i ln rho_i + ln V_d + psi(n) - psi(k)`
///
/// where `rho_i` is the Euclidean distance from point `i` to its k-th nearest
/// neighbour and `V_d` the volume of the d-dimensional unit ball.
/// Brute-force O(n^2 d); callers subsample large sets.
pub fn knn_entropy(points: &[Vec<f64>], k: usize) -> Result<f64> {
    if k == 0 {
        return usage("knn_entropy: k must be positive");
    }
    if points.len() < k + 1 {
        return usage(format!(
            "knn_entropy: need at least k+1 = {} points, got {}",
            k + 1,
            points.len()
        ));
    }
    let d = points[0].len();
    if d == 0 || points.iter().any(|p| p.len() != d) {
        return usage("knn_entropy: points must share a nonzero dimension");
    }
    let n = points.len();

    // Flat row-major copy for a tighter inner loop.
    let flat: Vec<f64> = points.iter().flatten().copied().collect();
    let mut nearest = vec![f64::INFINITY; k];
    let mut sum_log_rho = 0.0;
    for i in 0..n {
        nearest.iter_mut().for_each(|v| *v = f64::INFINITY);
        let pi = &flat[i * d..(i + 1) * d];
        for j in 0..n {
            if i == j {
                continue;
            }
            let pj = &flat[j * d..(j + 1) * d];
            let dist2: f64 = pi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            // Keep the k smallest squared distances in ascending order.
            if dist2 < nearest[k - 1] {
                let mut pos = k - 1;
                while pos > 0 && nearest[pos - 1] > dist2 {
                    nearest[pos] = nearest[pos - 1];
                    pos -= 1;
                }
                nearest[pos] = dist2;
            }
        }
        sum_log_rho += nearest[k - 1].sqrt().max(DISTANCE_FLOOR).ln();
    }

    let df = d as f64;
    let ln_unit_ball = 0.5 * df * std::f64::consts::PI.ln() - ln_gamma(0.5 * df + 1.0);
    Ok(df / n as f64 * sum_log_rho + ln_unit_ball + digamma(n as f64) - digamma(k as f64))
}

/// Divides each coordinate by a fixed per-dimension scale. The trainer uses
/// the environment's nominal observation and action ranges so estimates
/// from different runs share one coordinate system.
pub fn standardize(points: &mut [Vec<f64>], scale: &[f64]) {
    for p in points.iter_mut() {
        for (x, s) in p.iter_mut().zip(scale) {
            *x /= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn standard_normal_1d() {
        let mut rng = seeded(11);
        let pts: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.sample(StandardNormal)]).collect();
        let h = knn_entropy(&pts, 3).unwrap();
        let want = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - want).abs() <= 0.05, "estimate {h} vs {want}");
    }

    #[test]
    fn uniform_unit_interval() {
        let mut rng = seeded(12);
        let pts: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.random::<f64>()]).collect();
        let h = knn_entropy(&pts, 3).unwrap();
        assert!(h.abs() <= 0.05, "estimate {h}");
    }

    #[test]
    fn scaling_adds_d_ln2() {
        let mut rng = seeded(13);
        let pts: Vec<Vec<f64>> = (0..2000)
            .map(|_| vec![rng.sample(StandardNormal), rng.random::<f64>()])
            .collect();
        let h = knn_entropy(&pts, 3).unwrap();
        let doubled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|x| 2.0 * x).collect()).collect();
        let h2 = knn_entropy(&doubled, 3).unwrap();
        assert!((h2 - h - 2.0 * 2f64.ln()).abs() <= 0.05);
    }

    #[test]
    fn duplicates_stay_finite() {
        let pts = vec![vec![1.0, 1.0]; 10];
        assert!(knn_entropy(&pts, 3).unwrap().is_finite());
    }

    #[test]
    fn too_few_points_rejected() {
        let pts = vec![vec![0.0], vec![1.0], vec![2.0]];
        assert!(knn_entropy(&pts, 3).is_err());
        assert!(knn_entropy(&pts, 0).is_err());
        assert!(knn_entropy(&[vec![0.0], vec![1.0, 2.0]], 1).is_err());
    }
}
