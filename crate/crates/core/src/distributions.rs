//! Log-densities and log-pmfs with analytic partials.
//!
//! Outcome indices are 0-based throughout.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn check_finite<S: Scalar>(what: &str, xs: &[S]) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::non_finite(what, None))
    }
}

/// Numerically stable `ln Σ exp(x_j)`.
pub fn logsumexp<S: Scalar>(x: &[S]) -> S {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    if !m.is_finite() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<S>().ln()
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: S = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Categorical distribution parametrized by unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalLogits<S> {
    pub logits: Vec<S>,
}

impl<S: Scalar> CategoricalLogits<S> {
    pub fn new(logits: Vec<S>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::invalid("logits", "empty"));
        }
        check_finite("logits", &logits)?;
        Ok(Self { logits })
    }

    pub fn probs(&self) -> Vec<S> {
        softmax(&self.logits)
    }

    pub fn sample(&self, u: f64) -> Result<usize> {
        categorical_sample(&self.logits, u)
    }

    pub fn score(&self, k: usize) -> Result<(S, Vec<S>)> {
        categorical_score(&self.logits, k)
    }
}

/// Inverse-CDF draw: the first index whose cumulative probability exceeds `u`.
pub fn categorical_sample<S: Scalar>(logits: &[S], u: f64) -> Result<usize> {
    check_finite("logits", logits)?;
    if logits.is_empty() {
        return Err(Error::invalid("logits", "empty"));
    }
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid("u", format!("{u} is outside [0, 1)")));
    }
    let p = softmax(logits);
    let mut cum = 0.0;
    for (k, pk) in p.iter().enumerate() {
        cum += pk.as_f64();
        if u < cum {
            return Ok(k);
        }
    }
    Ok(p.len() - 1)
}

/// Log-pmf of outcome `k` and its gradient with respect to the logits.
pub fn categorical_score<S: Scalar>(logits: &[S], k: usize) -> Result<(S, Vec<S>)> {
    if k >= logits.len() {
        return Err(Error::OutcomeOutOfRange {
            outcome: k,
            size: logits.len(),
        });
    }
    check_finite("logits", logits)?;
    let lse = logsumexp(logits);
    let grad = softmax(logits)
        .into_iter()
        .enumerate()
        .map(|(j, p)| {
            if j == k {
                S::one() - p
            } else {
                -p
            }
        })
        .collect();
    Ok((logits[k] - lse, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalParams<S> {
    pub mean: S,
    pub sd: S,
}

impl<S: Scalar> NormalParams<S> {
    pub fn new(mean: S, sd: S) -> Result<Self> {
        if !(sd > S::zero()) || !sd.is_finite() {
            return Err(Error::invalid("sd", format!("must be positive, got {sd}")));
        }
        if !mean.is_finite() {
            return Err(Error::non_finite("mean", None));
        }
        Ok(Self { mean, sd })
    }

    /// Reparametrized draw `mean + sd·z`.
    pub fn transform(&self, z: S) -> S {
        self.mean + self.sd * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalLogPdf<S> {
    pub value: S,
    pub d_mean: S,
    pub d_sd: S,
    pub d_y: S,
}

pub fn normal_logpdf<S: Scalar>(params: &NormalParams<S>, y: S) -> Result<NormalLogPdf<S>> {
    let NormalParams { mean, sd } = *params;
    if !(sd > S::zero()) {
        return Err(Error::invalid("sd", format!("must be positive, got {sd}")));
    }
    let r = (y - mean) / sd;
    Ok(NormalLogPdf {
        value: -S::of(0.5) * r * r - sd.ln() - S::of(0.5 * LN_2PI),
        d_mean: r / sd,
        d_sd: (r * r - S::one()) / sd,
        d_y: -r / sd,
    })
}

pub fn normal_pdf<S: Scalar>(x: S) -> S {
    S::of(INV_SQRT_2PI) * (-S::of(0.5) * x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf<S: Scalar>(x: S) -> S {
    S::of(0.5) * (-x / S::SQRT_2()).erfc()
}

/// Mills ratio `Φ(−t)/φ(t)` for large positive `t` by continued fraction.
fn mills_ratio(t: f64) -> f64 {
    let mut acc = t;
    for k in (1..=60).rev() {
        acc = t + k as f64 / acc;
    }
    1.0 / acc
}

/// `(ln Φ(u), φ(u)/Φ(u))`, accurate far into the lower tail.
pub fn log_normal_cdf<S: Scalar>(u: S) -> (S, S) {
    let uf = u.as_f64();
    if uf < -30.0 {
        let r = mills_ratio(-uf);
        let log_pdf = -0.5 * uf * uf - 0.5 * LN_2PI;
        return (S::of(log_pdf + r.ln()), S::of(1.0 / r));
    }
    let cdf = 0.5 * libm::erfc(-uf / std::f64::consts::SQRT_2);
    let pdf = INV_SQRT_2PI * (-0.5 * uf * uf).exp();
    (S::of(cdf.ln()), S::of(pdf / cdf))
}

/// Inverse standard normal CDF for `p ∈ (0, 1)`.
///
/// Acklam's rational approximation followed by one Halley step against erfc.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let e = 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Multivariate normal with a lower-triangular factor whose diagonal is
/// stored as its logarithm.
///
/// `raw` is row-major `k×k`; entries above the diagonal are ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct MvNormalCholesky<S> {
    pub mean: Vec<S>,
    pub raw: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MvnLogPdf<S> {
    pub value: S,
    pub d_mean: Vec<S>,
    /// Row-major `k×k`, zero above the diagonal.
    pub d_raw: Vec<S>,
    pub d_y: Vec<S>,
}

impl<S: Scalar> MvNormalCholesky<S> {
    pub fn new(mean: Vec<S>, raw: Vec<S>) -> Result<Self> {
        let k = mean.len();
        if raw.len() != k * k {
            return Err(Error::dim("cholesky parameters", k * k, raw.len()));
        }
        check_finite("mean", &mean)?;
        check_finite("cholesky parameters", &raw)?;
        Ok(Self { mean, raw })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Effective factor `A` (row-major, lower-triangular).
    pub fn factor(&self) -> Vec<S> {
        let k = self.dim();
        let mut a = vec![S::zero(); k * k];
        for i in 0..k {
            for j in 0..i {
                a[i * k + j] = self.raw[i * k + j];
            }
            a[i * k + i] = self.raw[i * k + i].exp();
        }
        a
    }

    /// `mean + A z`.
    pub fn transform(&self, z: &[S]) -> Vec<S> {
        let k = self.dim();
        let a = self.factor();
        (0..k)
            .map(|i| self.mean[i] + (0..=i).map(|j| a[i * k + j] * z[j]).sum::<S>())
            .collect()
    }

    pub fn logpdf(&self, y: &[S]) -> Result<MvnLogPdf<S>> {
        mvnormal_logpdf(self, y)
    }
}

pub fn mvnormal_logpdf<S: Scalar>(dist: &MvNormalCholesky<S>, y: &[S]) -> Result<MvnLogPdf<S>> {
    let k = dist.dim();
    if y.len() != k {
        return Err(Error::dim("mvn outcome", k, y.len()));
    }
    check_finite("mvn outcome", y)?;
    let a = dist.factor();

    // w = A⁻¹ (y − μ)
    let mut w = vec![S::zero(); k];
    for i in 0..k {
        let mut acc = y[i] - dist.mean[i];
        for j in 0..i {
            acc -= a[i * k + j] * w[j];
        }
        w[i] = acc / a[i * k + i];
    }
    // v = A⁻ᵀ w = Σ⁻¹ (y − μ)
    let mut v = vec![S::zero(); k];
    for i in (0..k).rev() {
        let mut acc = w[i];
        for j in i + 1..k {
            acc -= a[j * k + i] * v[j];
        }
        v[i] = acc / a[i * k + i];
    }

    let log_det_half: S = (0..k).map(|i| dist.raw[i * k + i]).sum();
    let value = -S::of(0.5) * crate::scalar::norm_sq(&w) - log_det_half - S::of(0.5 * LN_2PI * k as f64);

    let mut d_raw = vec![S::zero(); k * k];
    for i in 0..k {
        for j in 0..i {
            d_raw[i * k + j] = v[i] * w[j];
        }
        d_raw[i * k + i] = v[i] * w[i] * a[i * k + i] - S::one();
    }
    let d_y = v.iter().map(|&x| -x).collect();
    if !value.is_finite() {
        return Err(Error::non_finite("mvn log-density", None));
    }
    Ok(MvnLogPdf {
        value,
        d_mean: v,
        d_raw,
        d_y,
    })
}

/// Branch probability `P(y = 0) = Φ((threshold − signal)/scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitSwitch<S> {
    pub threshold: S,
    pub scale: S,
    pub signal: S,
}

/// Partials of a log-pmf entry with respect to the switch inputs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProbitPartials<S> {
    pub threshold: S,
    pub scale: S,
    pub signal: S,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbitEval<S> {
    /// Probability of outcome 0.
    pub p: S,
    /// Log-pmf of outcomes 0 and 1.
    pub log_pmf: [S; 2],
    pub partials: [ProbitPartials<S>; 2],
}

impl<S: Scalar> ProbitSwitch<S> {
    pub fn eval(&self) -> Result<ProbitEval<S>> {
        probit_switch(self)
    }
}

pub fn probit_switch<S: Scalar>(sw: &ProbitSwitch<S>) -> Result<ProbitEval<S>> {
    if !(sw.scale > S::zero()) {
        return Err(Error::invalid(
            "scale",
            format!("must be positive, got {}", sw.scale),
        ));
    }
    if !(sw.threshold.is_finite() && sw.signal.is_finite() && sw.scale.is_finite()) {
        return Err(Error::non_finite("probit inputs", None));
    }
    let u = (sw.threshold - sw.signal) / sw.scale;
    let (log_p0, h0) = log_normal_cdf(u);
    // Outcome 1 has probability Φ(−u).
    let (log_p1, h1) = log_normal_cdf(-u);
    let du = ProbitPartials {
        threshold: S::one() / sw.scale,
        scale: -u / sw.scale,
        signal: -S::one() / sw.scale,
    };
    let scaled = |c: S| ProbitPartials {
        threshold: c * du.threshold,
        scale: c * du.scale,
        signal: c * du.signal,
    };
    Ok(ProbitEval {
        p: log_p0.exp(),
        log_pmf: [log_p0, log_p1],
        partials: [scaled(h0), scaled(-h1)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn categorical_examples() {
        assert_eq!(categorical_sample(&[1.0, 1.0], 0.25).unwrap(), 0);
        assert_eq!(categorical_sample(&[1.0, 1.0], 0.75).unwrap(), 1);
        // cumulative softmax is 0.6652, 0.9100: u = 0.9 lands in the second cell
        assert_eq!(categorical_sample(&[3.0, 2.0, 1.0], 0.9).unwrap(), 1);
        assert_eq!(categorical_sample(&[3.0, 2.0, 1.0], 0.95).unwrap(), 2);
        assert_eq!(categorical_sample(&[3.0, 2.0, 1.0], 0.7).unwrap(), 1);
        assert!(categorical_sample(&[f64::NAN, 1.0], 0.5).is_err());
        assert!(categorical_sample(&[1.0, 1.0], 1.0).is_err());

        let (lp, g) = categorical_score(&[1.0, 1.0], 1).unwrap();
        assert_relative_eq!(lp, -std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(g, vec![-0.5, 0.5]);
        assert_eq!(categorical_score(&[1.0, 1.0], 0).unwrap().1, vec![0.5, -0.5]);
        assert!(matches!(
            categorical_score(&[1.0, 1.0], 2),
            Err(Error::OutcomeOutOfRange { outcome: 2, size: 2 })
        ));
    }

    #[test]
    fn cumulative_softmax_of_bandit_logits() {
        let p = softmax(&[3.0, 2.0, 1.0]);
        assert_relative_eq!(p[0], 0.665_240_955_774_821_4, epsilon = 1e-15);
        let e = [3.0f64.exp(), 2.0f64.exp(), 1.0f64.exp()];
        let z: f64 = e.iter().sum();
        assert_relative_eq!(p[0] + p[1], (e[0] + e[1]) / z, epsilon = 1e-15);
        assert_relative_eq!(p[0] + p[1], 0.9100, epsilon = 1e-4);
    }

    #[test]
    fn normal_examples() {
        let std = NormalParams::new(0.0, 1.0).unwrap();
        assert_relative_eq!(normal_logpdf(&std, 0.0).unwrap().value, -0.918_938_533_204_672_8, epsilon = 1e-15);
        assert_eq!(normal_logpdf(&std, 1.0).unwrap().d_mean, 1.0);
        let p = NormalParams { mean: 2.0, sd: 3.0 };
        assert_relative_eq!(normal_logpdf(&p, 2.0).unwrap().d_sd, -1.0 / 3.0, epsilon = 1e-15);
        assert!(NormalParams::new(0.0, 0.0).is_err());
        assert!(normal_logpdf(&NormalParams { mean: 0.0, sd: -1.0 }, 0.0).is_err());
    }

    #[test]
    fn cdf_values_match_erf_oracle() {
        assert_eq!(normal_cdf(0.0f64), 0.5);
        // Φ(1) = (1 + erf(1/√2))/2
        let oracle = 0.5 * (1.0 + libm::erf(1.0 / std::f64::consts::SQRT_2));
        assert_relative_eq!(normal_cdf(1.0f64), oracle, epsilon = 1e-15);
        assert_relative_eq!(normal_cdf(1.0f64), 0.841_344_746_068_542_9, epsilon = 1e-13);
        assert_relative_eq!(normal_cdf(-1.0f64), 0.158_655_253_931_457_05, epsilon = 1e-13);
    }

    #[test]
    fn log_cdf_tail_is_continuous() {
        for &u in &[-29.9, -30.0, -30.1] {
            let (l, h) = log_normal_cdf(u);
            let erfc_log = (0.5 * libm::erfc(-u / std::f64::consts::SQRT_2)).ln();
            assert_relative_eq!(l, erfc_log, max_relative = 1e-12);
            assert_relative_eq!(h, -u * (1.0 + 1.0 / (u * u)), max_relative = 1e-5);
        }
        let (l, h) = log_normal_cdf(-100.0f64);
        assert!(l.is_finite() && h > 100.0);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let x = normal_quantile(p);
            assert_relative_eq!(normal_cdf(x), p, max_relative = 1e-13);
        }
        for &p in &[1e-300, 1e-20, 1e-10, 1.0 - 1e-12] {
            let x = normal_quantile(p);
            assert_relative_eq!(normal_cdf(x), p, max_relative = 1e-9);
        }
        assert_eq!(normal_quantile(0.5), 0.0);
    }

    #[test]
    fn mvn_small_cases() {
        let d = MvNormalCholesky::new(vec![0.0, 0.0], vec![0.0; 4]).unwrap();
        assert_relative_eq!(d.logpdf(&[0.0, 0.0]).unwrap().value, -LN_2PI, epsilon = 1e-15);

        let (mu, sigma, y) = (0.4, 1.7f64, -0.3);
        let d = MvNormalCholesky::new(vec![mu], vec![sigma.ln()]).unwrap();
        let m = d.logpdf(&[y]).unwrap();
        let n = normal_logpdf(&NormalParams { mean: mu, sd: sigma }, y).unwrap();
        assert_relative_eq!(m.value, n.value, epsilon = 1e-14);
        assert_relative_eq!(m.d_mean[0], n.d_mean, epsilon = 1e-14);
        // chain rule through σ = exp(raw)
        assert_relative_eq!(m.d_raw[0], n.d_sd * sigma, epsilon = 1e-14);
        assert!(MvNormalCholesky::new(vec![0.0], vec![0.0, 1.0]).is_err());
        assert!(d.logpdf(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn probit_examples() {
        let s = ProbitSwitch { threshold: 1.0, scale: 1.0, signal: 1.0 }.eval().unwrap();
        assert_relative_eq!(s.p, 0.5, epsilon = 1e-15);
        assert_relative_eq!(s.partials[0].threshold, 0.797_884_560_802_865_4, epsilon = 1e-13);
        let s = ProbitSwitch { threshold: 1.0, scale: 1.0, signal: 0.0 }.eval().unwrap();
        assert_relative_eq!(s.p, 0.841_344_746_068_542_9, epsilon = 1e-13);
        let s = ProbitSwitch { threshold: 2.0, scale: 1.0, signal: 3.0 }.eval().unwrap();
        assert_relative_eq!(s.p, 0.158_655_253_931_457_05, epsilon = 1e-13);
        assert!(ProbitSwitch { threshold: 0.0, scale: 0.0, signal: 0.0 }.eval().is_err());
    }
}
