//! Distances between empirical distributions and grid densities.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

/// Wasserstein-1 between two 1-D empirical distributions.
///
/// For equal sample counts this is the mean absolute difference of the
/// sorted samples; unequal counts fall back to the exact CDF sweep.
pub fn w1_1d(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument("w1_1d needs nonempty samples".into()));
    }
    let a = sorted(samples_a);
    let b = sorted(samples_b);
    if a.len() == b.len() {
        let n = a.len() as f64;
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n);
    }
    // Integral of |F_a - F_b| over the merged support.
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut last = a[0].min(b[0]);
    let mut total = 0.0;
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        let fa = i as f64 / na;
        let fb = j as f64 / nb;
        total += (fa - fb).abs() * (next - last);
        while i < a.len() && a[i] <= next {
            i += 1;
        }
        while j < b.len() && b[j] <= next {
            j += 1;
        }
        last = next;
    }
    Ok(total)
}

/// Sliced W1 for multi-dimensional samples: average of `w1_1d` over
/// `projections` seeded random unit directions (rows are samples).
pub fn w1_sliced(
    samples_a: &[Vec<f64>],
    samples_b: &[Vec<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::InvalidArgument("w1_sliced needs nonempty samples".into()));
    }
    let dim = samples_a[0].len();
    if samples_b[0].len() != dim {
        return Err(Error::DimMismatch(format!(
            "sample dims {} vs {}",
            dim,
            samples_b[0].len()
        )));
    }
    if projections == 0 {
        return Err(Error::InvalidArgument("w1_sliced needs projections >= 1".into()));
    }
    let mut stream: Stream = rng::seeded(seed);
    let mut total = 0.0;
    for _ in 0..projections {
        let mut dir = rng::standard_normal_vec(&mut stream, dim);
        let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let project = |rows: &[Vec<f64>]| -> Vec<f64> {
            rows.iter()
                .map(|r| r.iter().zip(&dir).map(|(x, d)| x * d).sum())
                .collect()
        };
        total += w1_1d(&project(samples_a), &project(samples_b))?;
    }
    Ok(total / projections as f64)
}

/// Total variation between two densities tabulated on a common grid with
/// spacing `dx`: one half the L1 difference.
pub fn tv_grid(density_a: &[f64], density_b: &[f64], dx: f64) -> Result<f64> {
    if density_a.is_empty() || density_a.len() != density_b.len() {
        return Err(Error::DimMismatch(format!(
            "densities have {} and {} nodes",
            density_a.len(),
            density_b.len()
        )));
    }
    Ok(0.5
        * dx
        * density_a
            .iter()
            .zip(density_b)
            .map(|(p, q)| (p - q).abs())
            .sum::<f64>())
}
