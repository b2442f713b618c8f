//! Mutual information between a continuous feature and discrete labels,
//! estimated with the nearest-neighbor method for discrete–continuous
//! mixtures, plus Pearson correlation.
//!
//! The MI estimator follows the standard recipe: per label class, the
//! distance to the k-th nearest same-class neighbor defines a radius; the
//! count m of cohort-wide points inside that (slightly shrunk) radius and
//! the class sizes enter a digamma formula.  Classes with a single member
//! are excluded.  Each repetition adds tiny noise (1e-10 of the feature
//! scale) to break ties, clamps the estimate at zero, and the repetitions
//! are averaged.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::digamma;

/// Distance from each point of a sorted array to its k-th nearest
/// neighbor within the same array (self excluded).
fn kth_neighbor_radii(sorted: &[f64], k: usize) -> Vec<f64> {
    let m = sorted.len();
    debug_assert!(k >= 1 && k < m);
    let mut radii = Vec::with_capacity(m);
    for j in 0..m {
        let (mut lo, mut hi) = (j, j);
        for _ in 0..k {
            let left = if lo > 0 { sorted[j] - sorted[lo - 1] } else { f64::INFINITY };
            let right = if hi + 1 < m { sorted[hi + 1] - sorted[j] } else { f64::INFINITY };
            if left <= right {
                lo -= 1;
            } else {
                hi += 1;
            }
        }
        radii.push((sorted[j] - sorted[lo]).max(sorted[hi] - sorted[j]));
    }
    radii
}

fn mi_single_rep(x: &[f64], labels: &[u32], k: usize) -> f64 {
    let n = x.len();
    // Group point indices by label.
    let mut classes: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }

    let mut sorted_all: Vec<f64> = x.to_vec();
    sorted_all.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut sum_psi_k = 0.0;
    let mut sum_psi_count = 0.0;
    let mut sum_psi_m = 0.0;
    let mut n_used = 0usize;
    for members in classes.values() {
        let count = members.len();
        if count < 2 {
            // Singleton classes carry no neighborhood information.
            continue;
        }
        let k_c = k.min(count - 1);
        let mut vals: Vec<f64> = members.iter().map(|&i| x[i]).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let radii = kth_neighbor_radii(&vals, k_c);
        for (&v, &r) in vals.iter().zip(&radii) {
            // Shrink the radius one ulp toward zero so the k-th neighbor
            // itself falls outside the closed ball (ties already broken by
            // jitter); the count includes the query point.  Membership is
            // decided by comparing directly computed distances against the
            // radius — the same subtractions that produced the radius — so
            // the shrink cannot be undone by endpoint rounding.
            let r = if r > 0.0 { r.next_down() } else { 0.0 };
            let at = sorted_all.partition_point(|&s| s < v);
            let mut lo = at;
            while lo > 0 && v - sorted_all[lo - 1] <= r {
                lo -= 1;
            }
            let mut hi = at;
            while hi + 1 < n && sorted_all[hi + 1] - v <= r {
                hi += 1;
            }
            let m = hi - lo + 1;
            sum_psi_m += digamma(m as f64);
            sum_psi_k += digamma(k_c as f64);
            sum_psi_count += digamma(count as f64);
            n_used += 1;
        }
    }
    if n_used == 0 {
        return 0.0;
    }
    let inv = 1.0 / n_used as f64;
    let mi = digamma(n_used as f64) + inv * sum_psi_k - inv * sum_psi_count - inv * sum_psi_m;
    mi.max(0.0)
}

/// Averaged, jittered nearest-neighbor MI estimate between a continuous
/// feature and discrete labels.  Returns 0 with a warning when only one
/// label class is present.
pub fn mutual_info(
    feature: &[f64],
    labels: &[u32],
    k: usize,
    reps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if feature.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "mutual_info",
            lhs: vec![feature.len()],
            rhs: vec![labels.len()],
        });
    }
    let n = feature.len();
    if n < k + 2 {
        return Err(Error::InvalidArgument {
            op: "mutual_info",
            reason: format!("need at least k+2 = {} samples, got {n}", k + 2),
        });
    }
    if k == 0 || reps == 0 {
        return Err(Error::InvalidArgument {
            op: "mutual_info",
            reason: format!("k ({k}) and reps ({reps}) must be positive"),
        });
    }
    let distinct = {
        let mut set = std::collections::BTreeSet::new();
        for &l in labels {
            set.insert(l);
        }
        set.len()
    };
    if distinct < 2 {
        log::warn!("mutual_info: single label class, returning 0");
        return Ok(0.0);
    }
    let mean = feature.iter().sum::<f64>() / n as f64;
    let std = (feature.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if std > 0.0 { 1e-10 * std } else { 1e-10 };
    let mut total = 0.0;
    let mut jittered = vec![0.0; n];
    for _ in 0..reps {
        for (j, &v) in feature.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            jittered[j] = v + scale * noise;
        }
        total += mi_single_rep(&jittered, labels, k);
    }
    Ok(total / reps as f64)
}

/// Sample Pearson correlation coefficient; constant inputs give 0 with a
/// warning rather than NaN.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch {
            op: "pearson",
            lhs: vec![x.len()],
            rhs: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument {
            op: "pearson",
            reason: format!("need at least 2 samples, got {}", x.len()),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        log::warn!("pearson: constant input, returning 0");
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}
