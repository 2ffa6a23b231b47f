//! `Var = E‖ĝ‖² − ‖Eĝ‖²`, exactly over a finite distribution or by plug-in.

use crate::error::{Error, Result};
use crate::scalar::{norm_sq, Scalar};

/// Exact variance over `(probability, sample)` pairs.
///
/// Two passes (`Σ p‖g − ḡ‖²`) so a degenerate distribution gives zero rather
/// than a cancellation residue.
pub fn exact_variance<S: Scalar>(dist: &[(S, Vec<S>)]) -> S {
    let m = dist.first().map_or(0, |(_, g)| g.len());
    let mut mean = vec![S::zero(); m];
    for (p, g) in dist {
        crate::scalar::axpy(*p, g, &mut mean);
    }
    dist.iter()
        .map(|(p, g)| *p * g.iter().zip(&mean).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>())
        .sum()
}

/// Plug-in variance with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub variance: f64,
    pub std_error: f64,
}

pub fn sample_variance<S: Scalar>(samples: &[Vec<S>]) -> Result<VarianceEstimate> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientSamples { got: n, min: 2 });
    }
    let m = samples[0].len();
    let nf = n as f64;
    let mut mean = vec![0.0; m];
    let mut second = 0.0;
    for g in samples {
        for (a, v) in mean.iter_mut().zip(g) {
            *a += v.as_f64() / nf;
        }
        second += norm_sq(g).as_f64() / nf;
    }
    let variance = second - mean.iter().map(|v| v * v).sum::<f64>();
    // influence of one sample on E‖g‖² − ‖Eg‖²: ‖g‖² − 2 mᵀg
    let infl: Vec<f64> = samples
        .iter()
        .map(|g| {
            let q = norm_sq(g).as_f64();
            let mg: f64 = mean.iter().zip(g).map(|(a, b)| a * b.as_f64()).sum();
            q - 2.0 * mg
        })
        .collect();
    let im = infl.iter().sum::<f64>() / nf;
    let iv = infl.iter().map(|v| (v - im).powi(2)).sum::<f64>() / (nf - 1.0);
    Ok(VarianceEstimate {
        variance,
        std_error: (iv / nf).sqrt(),
    })
}
