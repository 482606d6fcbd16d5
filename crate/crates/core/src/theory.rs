//! Error bounds for quality-aware fusion and mask-quality scoring, with
//! Monte Carlo harnesses that check them.
//!
//! Norms are pixel-RMS (Frobenius norm over `sqrt(H * W)`). The constant hidden
//! in the `O(sqrt(log(1/delta) / K))` estimation term is taken as 1.
//!
//! The tail bound for the quality score is reported in two forms:
//!
//! * variance form: `2 exp(-2 K eps^2 / sigma_s^2) + 2 exp(-2 M eps^2 / sigma_m^2)`,
//! * range form (classical Hoeffding): the same with `sigma^2` replaced by the
//!   squared width of the support, `(2 sqrt(3) sigma)^2` for the uniform noise
//!   used here.
//!
//! The variance form can undershoot the true tail probability, so verification
//! gates on the range form and reports the variance form alongside.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GtInstance;
use crate::mask::{mean_squared_error, rms_distance, rms_norm, ProbMask};
use crate::qam::{process_instance, qmf_fuse, CandidateSet, QamConfig};
use crate::synth::{candidates_for, uniform_noise, CandidateSpec};

/// Three-term bound on the fused-mask error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub approximation: f64,
    pub estimation: f64,
    pub weighting: f64,
    pub total: f64,
    pub delta: f64,
    /// Candidates passing the box-score gate.
    pub k_hat: usize,
    /// Fused pixels passing the pixel gate.
    pub m_hat: usize,
}

/// Noise moments of the candidate generator and of the quality-score inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseStats {
    pub sigma_s2: f64,
    pub sigma_m2: f64,
    pub sigma_u2: f64,
    pub eps_s: f64,
    pub eps_u: f64,
    pub mu_s: f64,
    pub mu_m: f64,
}

impl Default for NoiseStats {
    fn default() -> Self {
        Self {
            sigma_s2: 0.01,
            sigma_m2: 0.01,
            sigma_u2: 0.0,
            eps_s: 0.0,
            eps_u: 0.0,
            mu_s: 0.75,
            mu_m: 0.75,
        }
    }
}

impl NoiseStats {
    pub fn validate(&self) -> Result<()> {
        if [self.sigma_s2, self.sigma_m2, self.sigma_u2]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::InvalidParameter(
                "variances must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!("delta {delta} not in (0, 1)")));
    }
    Ok(())
}

/// `sqrt(log(1/delta) / k_hat)`.
pub fn estimation_term(delta: f64, k_hat: usize) -> Result<f64> {
    check_delta(delta)?;
    if k_hat == 0 {
        return Err(Error::NoValidCandidates);
    }
    Ok(((1.0 / delta).ln() / k_hat as f64).sqrt())
}

/// Bound on the error of the fused mask built from `set` against `truth`.
///
/// `set` should already be ranked and truncated; every candidate counts
/// towards the approximation and weighting terms.
pub fn qmf_bound(set: &CandidateSet, truth: &ProbMask, eps_w: f64, delta: f64, cfg: &QamConfig) -> Result<BoundReport> {
    check_delta(delta)?;
    if !(eps_w.is_finite() && eps_w >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eps_w {eps_w} must be finite and nonnegative"
        )));
    }
    let fused = qmf_fuse(set, cfg)?;
    truth.ensure_same_dims(&fused.mask)?;
    let k_hat = fused.valid_count;
    let m_hat = fused.mask.values().iter().filter(|&&v| v as f64 > cfg.tau_m).count();

    let mut approximation = 0.0f64;
    let mut largest = 0.0f64;
    for c in set.candidates() {
        approximation = approximation.max(rms_distance(&c.mask, truth)?);
        largest = largest.max(rms_norm(&c.mask));
    }
    let estimation = estimation_term(delta, k_hat)?;
    let weighting = eps_w * largest;
    Ok(BoundReport {
        approximation,
        estimation,
        weighting,
        total: approximation + estimation + weighting,
        delta,
        k_hat,
        m_hat,
    })
}

/// First-order bound on the perturbation of the normalized fusion weights
/// caused by absolute errors `eps_s`, `eps_u` in the box scores and box IOUs:
///
/// `max_n 0.5 |eps_s_n / s_n + eps_u_n / u_n| sqrt(s_n u_n) / sum_k 1(s_k > tau) sqrt(s_k u_k)`
///
/// The maximum runs over gated candidates; the others carry no weight.
pub fn epsilon_w(s: &[f64], u: &[f64], eps_s: &[f64], eps_u: &[f64], cfg: &QamConfig) -> Result<f64> {
    let n = s.len();
    if u.len() != n || eps_s.len() != n || eps_u.len() != n {
        return Err(Error::InvalidParameter(
            "s, u, eps_s and eps_u must have equal length".into(),
        ));
    }
    let gated: Vec<usize> = (0..n).filter(|&i| s[i] > cfg.tau_m).collect();
    if gated.is_empty() {
        return Err(Error::NoValidCandidates);
    }
    if let Some(&i) = gated.iter().find(|&&i| u[i].is_nan() || u[i] <= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "box IOU of gated candidate {i} must be positive"
        )));
    }
    let denom: f64 = gated.iter().map(|&i| (s[i] * u[i]).sqrt()).sum();
    Ok(gated
        .iter()
        .map(|&i| 0.5 * (eps_s[i] / s[i] + eps_u[i] / u[i]).abs() * (s[i] * u[i]).sqrt() / denom)
        .fold(0.0, f64::max))
}

fn tail_term(count: usize, eps: f64, scale2: f64) -> f64 {
    if scale2 == 0.0 {
        return 0.0;
    }
    2.0 * (-2.0 * count as f64 * eps * eps / scale2).exp()
}

/// Variance-form tail bound before clamping; may exceed 1.
pub fn mqs_tail_bound(eps: f64, k_hat: usize, m_hat: usize, stats: &NoiseStats) -> Result<f64> {
    if eps.is_nan() || eps <= 0.0 || k_hat == 0 || m_hat == 0 {
        return Err(Error::InvalidParameter("need eps > 0 and k_hat, m_hat >= 1".into()));
    }
    if !(stats.sigma_s2 > 0.0 && stats.sigma_m2 > 0.0) {
        return Err(Error::InvalidParameter("variances must be positive".into()));
    }
    Ok(tail_term(k_hat, eps, stats.sigma_s2) + tail_term(m_hat, eps, stats.sigma_m2))
}

/// `P(|w - w*| >= eps)` bound in variance form, clamped to 1.
pub fn mqs_error_prob(eps: f64, k_hat: usize, m_hat: usize, stats: &NoiseStats) -> Result<f64> {
    Ok(mqs_tail_bound(eps, k_hat, m_hat, stats)?.min(1.0))
}

/// Width of the support of uniform noise with variance `sigma2`.
pub fn uniform_range(sigma2: f64) -> f64 {
    2.0 * (3.0 * sigma2).sqrt()
}

/// Classical Hoeffding bound for means of variables supported on intervals of
/// width `range_s` and `range_m`, before clamping.
pub fn hoeffding_range_bound(eps: f64, k_hat: usize, m_hat: usize, range_s: f64, range_m: f64) -> f64 {
    tail_term(k_hat, eps, range_s * range_s) + tail_term(m_hat, eps, range_m * range_m)
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Simulated quality scores: per trial, `s_hat` and `m_hat` are means of
/// `k_hat` and `m_hat` draws of bounded zero-mean noise around `mu_s`, `mu_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct MqsSamples {
    pub k_hat: usize,
    pub m_hat: usize,
    /// `|w - sqrt(mu_s mu_m)|` for each trial.
    pub deviations: Vec<f64>,
}

impl MqsSamples {
    pub fn exceedance(&self, eps: f64) -> f64 {
        let hits = self.deviations.iter().filter(|&&d| d >= eps).count();
        hits as f64 / self.deviations.len() as f64
    }

    pub fn rms_error(&self) -> f64 {
        let ss: f64 = self.deviations.iter().map(|d| d * d).sum();
        (ss / self.deviations.len() as f64).sqrt()
    }
}

pub fn simulate_mqs(noise: &NoiseStats, k_hat: usize, m_hat: usize, trials: usize, seed: u64) -> Result<MqsSamples> {
    noise.validate()?;
    if k_hat == 0 || m_hat == 0 || trials == 0 {
        return Err(Error::InvalidParameter(
            "k_hat, m_hat and trials must be positive".into(),
        ));
    }
    let (sd_s, sd_m) = (noise.sigma_s2.sqrt(), noise.sigma_m2.sqrt());
    let target = (noise.mu_s * noise.mu_m).sqrt();
    let deviations = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let s_noise: f64 = (0..k_hat).map(|_| uniform_noise(&mut rng, sd_s)).sum::<f64>() / k_hat as f64;
            let m_noise: f64 = (0..m_hat).map(|_| uniform_noise(&mut rng, sd_m)).sum::<f64>() / m_hat as f64;
            let w = ((noise.mu_s + s_noise).max(0.0) * (noise.mu_m + m_noise).max(0.0)).sqrt();
            (w - target).abs()
        })
        .collect();
    Ok(MqsSamples {
        k_hat,
        m_hat,
        deviations,
    })
}

/// One row of the quality-score verification grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MqsCheck {
    pub eps: f64,
    pub k_hat: usize,
    pub m_hat: usize,
    pub empirical_rate: f64,
    /// Variance form, clamped to 1.
    pub variance_bound: f64,
    /// Range form, clamped to 1.
    pub classical_bound: f64,
    pub rms_error: f64,
    /// The range-form bound is at least 1 and says nothing.
    pub vacuous: bool,
    pub pass: bool,
}

impl MqsCheck {
    pub fn from_samples(samples: &MqsSamples, noise: &NoiseStats, eps: f64) -> Self {
        let (k, m) = (samples.k_hat, samples.m_hat);
        let variance = (tail_term(k, eps, noise.sigma_s2) + tail_term(m, eps, noise.sigma_m2)).min(1.0);
        let classical_raw =
            hoeffding_range_bound(eps, k, m, uniform_range(noise.sigma_s2), uniform_range(noise.sigma_m2));
        let empirical_rate = samples.exceedance(eps);
        let vacuous = classical_raw >= 1.0;
        Self {
            eps,
            k_hat: k,
            m_hat: m,
            empirical_rate,
            variance_bound: variance,
            classical_bound: classical_raw.min(1.0),
            rms_error: samples.rms_error(),
            vacuous,
            pass: vacuous || empirical_rate <= classical_raw,
        }
    }
}

/// Simulates `trials` quality scores and compares the exceedance rate of `eps`
/// with the tail bounds.
pub fn mc_verify_mqs(
    noise: &NoiseStats,
    k_hat: usize,
    m_hat: usize,
    eps: f64,
    trials: usize,
    seed: u64,
) -> Result<MqsCheck> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidParameter(format!("eps {eps} must be positive")));
    }
    let samples = simulate_mqs(noise, k_hat, m_hat, trials, seed)?;
    Ok(MqsCheck::from_samples(&samples, noise, eps))
}

/// RMS error of `w` against sample size, with the fitted log-log slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub sizes: Vec<usize>,
    pub rms_errors: Vec<f64>,
    pub slope: f64,
    pub monotone: bool,
}

impl ConvergenceReport {
    pub fn slope_within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.slope)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Runs [`simulate_mqs`] with `k_hat = m_hat = n` for each size.
pub fn mqs_convergence(
    noise: &NoiseStats,
    sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<(ConvergenceReport, Vec<MqsSamples>)> {
    let samples = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| simulate_mqs(noise, n, n, trials, seed.wrapping_add(i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let rms_errors: Vec<f64> = samples.iter().map(MqsSamples::rms_error).collect();
    let xs: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let monotone = rms_errors.windows(2).all(|w| w[1] < w[0]);
    let report = ConvergenceReport {
        sizes: sizes.to_vec(),
        slope: log_log_slope(&xs, &rms_errors),
        rms_errors,
        monotone,
    };
    Ok((report, samples))
}

/// Outcome of the fusion simulation at one `K`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QmfCheck {
    pub k: usize,
    pub trials: usize,
    pub fused_mse: f64,
    pub mean_candidate_mse: f64,
    pub pass: bool,
}

const QMF_FRAME: usize = 24;

/// Fixed elliptical object used as the truth in fusion simulations.
fn qmf_truth() -> (GtInstance, ProbMask) {
    let c = QMF_FRAME as f64 / 2.0;
    let mask = ProbMask::from_fn(QMF_FRAME, QMF_FRAME, |y, x| {
        let dx = (x as f64 + 0.5 - c) / 8.0;
        let dy = (y as f64 + 0.5 - c) / 6.0;
        if dx * dx + dy * dy < 1.0 {
            1.0
        } else {
            0.0
        }
    })
    .expect("frame");
    let bbox = crate::synth::tight_box(&mask.binarize(0.5)).expect("non-empty truth");
    (GtInstance::new(1, 0, bbox), mask)
}

/// Fuses `k` noisy candidates of a fixed object per trial and compares the
/// fused error with the mean single-candidate error.
///
/// Mask noise is `sqrt(sigma_m2)`, relative box-score noise `sqrt(sigma_s2)`,
/// and box-corner jitter `sqrt(sigma_u2)`.
pub fn mc_verify_qmf(noise: &NoiseStats, k: usize, trials: usize, seed: u64, cfg: &QamConfig) -> Result<QmfCheck> {
    noise.validate()?;
    if k == 0 || trials == 0 {
        return Err(Error::InvalidParameter("k and trials must be positive".into()));
    }
    let (gt, truth) = qmf_truth();
    let spec = CandidateSpec {
        k,
        sigma_mask: noise.sigma_m2.sqrt(),
        box_jitter: noise.sigma_u2.sqrt(),
        score_noise: noise.sigma_s2.sqrt(),
        seed,
    };
    let fuse_cfg = QamConfig {
        adaptive_k: false,
        k_fixed: k,
        ..cfg.clone()
    };
    let per_trial = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<(f64, f64)> {
            let mut rng = trial_rng(seed, t);
            let set = candidates_for(&gt, &truth, &spec, &mut rng)?;
            let fused = process_instance(&set, &fuse_cfg).ok_or(Error::NoValidCandidates)?;
            let fused_mse = mean_squared_error(&fused.mask, &truth)?;
            let mut cand_mse = 0.0;
            for c in set.candidates() {
                cand_mse += mean_squared_error(&c.mask, &truth)?;
            }
            Ok((fused_mse, cand_mse / k as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let fused_mse = per_trial.iter().map(|p| p.0).sum::<f64>() / trials as f64;
    let mean_candidate_mse = per_trial.iter().map(|p| p.1).sum::<f64>() / trials as f64;
    Ok(QmfCheck {
        k,
        trials,
        fused_mse,
        mean_candidate_mse,
        pass: fused_mse < mean_candidate_mse,
    })
}

/// Fusion checks across several `K`, with the non-increase test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QmfSweep {
    pub checks: Vec<QmfCheck>,
    /// Each fused MSE is at most `1 + tolerance` times the previous one.
    pub non_increasing: bool,
    pub tolerance: f64,
}

impl QmfSweep {
    pub fn pass(&self) -> bool {
        self.non_increasing && self.checks.iter().all(|c| c.pass)
    }
}

pub fn qmf_sweep(
    noise: &NoiseStats,
    ks: &[usize],
    trials: usize,
    seed: u64,
    cfg: &QamConfig,
    tolerance: f64,
) -> Result<QmfSweep> {
    let checks = ks
        .iter()
        .map(|&k| mc_verify_qmf(noise, k, trials, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    let non_increasing = checks
        .windows(2)
        .all(|w| w[1].fused_mse <= (1.0 + tolerance) * w[0].fused_mse);
    Ok(QmfSweep {
        checks,
        non_increasing,
        tolerance,
    })
}
