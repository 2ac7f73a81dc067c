//! Length-6 orthonormal wavelet filters parameterized by two angles.
//!
//! The whole orthonormal length-6 family is swept out by a pair of lattice
//! angles (alpha, beta): (0, 0) collapses to Haar, another point gives the
//! classic Daubechies-6 taps, and every angle pair in between is a valid
//! quadrature-mirror bank. Networks learn the two angles instead of six taps,
//! so orthonormality is structural rather than a constraint to enforce.

use std::f64::consts::{SQRT_2, TAU};

use crate::error::{Error, Result};

pub const FILTER_LEN: usize = 6;

/// Largest L2 distance at which `fit_params_to_filter` still reports success.
pub const FIT_RESIDUAL_LIMIT: f64 = 1e-4;

/// The two learnable angles of one analysis bank. Unconstrained: the filter
/// map is 2*pi-periodic in each angle, so gradient steps never need wrapping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletParams {
    pub alpha: f64,
    pub beta: f64,
}

impl WaveletParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "wavelet angles must be finite, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(WaveletParams { alpha, beta })
    }
}

/// Matched lowpass/highpass pair produced from one angle pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    pub lowpass: [f64; FILTER_LEN],
    pub highpass: [f64; FILTER_LEN],
}

/// Per-tap derivatives of the lowpass filter with respect to each angle.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterGradients {
    pub d_alpha: [f64; FILTER_LEN],
    pub d_beta: [f64; FILTER_LEN],
}

/// Residuals of the quadrature-mirror conditions for a lowpass filter:
/// taps must sum to sqrt(2), have unit energy, and be orthogonal to their
/// own shift by two.
#[derive(Debug, Clone, Copy)]
pub struct ConditionReport {
    pub sum_residual: f64,
    pub norm_residual: f64,
    pub shift2_residual: f64,
    pub pass: bool,
}

/// Highpass taps from lowpass by alternating flip: g[n] = (-1)^n h[5-n].
pub(crate) fn alternating_flip(low: &[f64; FILTER_LEN]) -> [f64; FILTER_LEN] {
    let mut high = [0.0; FILTER_LEN];
    for (n, h) in high.iter_mut().enumerate() {
        let flipped = low[FILTER_LEN - 1 - n];
        *h = if n % 2 == 0 { flipped } else { -flipped };
    }
    high
}

/// Build the analysis bank for one angle pair.
///
/// The first four lowpass taps come from the lattice product of the two
/// angles; the last two are fixed by the unit-sum conditions on the even and
/// odd subsequences, which is what makes the family closed under the
/// quadrature-mirror constraints.
pub fn make_filters(params: WaveletParams) -> Result<FilterPair> {
    let WaveletParams { alpha, beta } = params;
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "wavelet angles must be finite, got alpha={alpha}, beta={beta}"
        )));
    }
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sab, cab) = (alpha - beta).sin_cos();

    let mut low = [0.0; FILTER_LEN];
    low[0] = ((1.0 + ca + sa) * (1.0 - cb - sb) + 2.0 * sb * ca) / (4.0 * SQRT_2);
    low[1] = ((1.0 - ca + sa) * (1.0 + cb - sb) - 2.0 * sb * ca) / (4.0 * SQRT_2);
    low[2] = (1.0 + cab + sab) / (2.0 * SQRT_2);
    low[3] = (1.0 + cab - sab) / (2.0 * SQRT_2);
    low[4] = 1.0 / SQRT_2 - low[0] - low[2];
    low[5] = 1.0 / SQRT_2 - low[1] - low[3];

    let highpass = alternating_flip(&low);
    Ok(FilterPair {
        lowpass: low,
        highpass,
    })
}

/// Analytic per-tap derivatives of the lowpass filter. The highpass
/// derivative is the alternating flip of these, matching `make_filters`.
pub fn filter_gradients(params: WaveletParams) -> Result<FilterGradients> {
    let WaveletParams { alpha, beta } = params;
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "wavelet angles must be finite, got alpha={alpha}, beta={beta}"
        )));
    }
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sab, cab) = (alpha - beta).sin_cos();

    let mut da = [0.0; FILTER_LEN];
    da[0] = ((ca - sa) * (1.0 - cb - sb) - 2.0 * sb * sa) / (4.0 * SQRT_2);
    da[1] = ((sa + ca) * (1.0 + cb - sb) + 2.0 * sb * sa) / (4.0 * SQRT_2);
    da[2] = (cab - sab) / (2.0 * SQRT_2);
    da[3] = (-cab - sab) / (2.0 * SQRT_2);
    da[4] = -da[0] - da[2];
    da[5] = -da[1] - da[3];

    let mut db = [0.0; FILTER_LEN];
    db[0] = ((1.0 + ca + sa) * (sb - cb) + 2.0 * cb * ca) / (4.0 * SQRT_2);
    db[1] = ((1.0 - ca + sa) * (-sb - cb) - 2.0 * cb * ca) / (4.0 * SQRT_2);
    db[2] = (sab - cab) / (2.0 * SQRT_2);
    db[3] = (sab + cab) / (2.0 * SQRT_2);
    db[4] = -db[0] - db[2];
    db[5] = -db[1] - db[3];

    Ok(FilterGradients {
        d_alpha: da,
        d_beta: db,
    })
}

/// Measure how far a lowpass filter is from the quadrature-mirror conditions.
pub fn check_qmf(low: &[f64; FILTER_LEN], tol: f64) -> ConditionReport {
    let sum: f64 = low.iter().sum();
    let norm: f64 = low.iter().map(|h| h * h).sum();
    let shift2: f64 = (0..FILTER_LEN - 2).map(|n| low[n] * low[n + 2]).sum();

    let sum_residual = (sum - SQRT_2).abs();
    let norm_residual = (norm - 1.0).abs();
    let shift2_residual = shift2.abs();
    ConditionReport {
        sum_residual,
        norm_residual,
        shift2_residual,
        pass: sum_residual < tol && norm_residual < tol && shift2_residual < tol,
    }
}

/// Recover the angle pair that generates a given lowpass filter.
///
/// Levenberg-Marquardt on the six tap residuals, restarted from a fixed grid
/// over [0, 2*pi)^2 to escape the cosine ridges; the 2x2 normal equations are
/// solved in closed form. Returns the canonicalized angles and the final L2
/// residual, or `NoFit` if no start gets within `FIT_RESIDUAL_LIMIT` (the
/// target is then not in the length-6 orthonormal family).
pub fn fit_params_to_filter(
    target: &[f64; FILTER_LEN],
    restarts: usize,
) -> Result<(WaveletParams, f64)> {
    if restarts == 0 {
        return Err(Error::InvalidParameter(
            "angle fitting needs at least one start".into(),
        ));
    }
    if target.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidParameter(
            "target filter taps must be finite".into(),
        ));
    }

    let cost_of = |p: [f64; 2]| -> ([f64; FILTER_LEN], f64) {
        let bank = make_filters(WaveletParams {
            alpha: p[0],
            beta: p[1],
        })
        .expect("finite angles");
        let mut r = [0.0; FILTER_LEN];
        let mut cost = 0.0;
        for n in 0..FILTER_LEN {
            r[n] = bank.lowpass[n] - target[n];
            cost += r[n] * r[n];
        }
        (r, cost)
    };
    let dot = |x: &[f64; FILTER_LEN], y: &[f64; FILTER_LEN]| -> f64 {
        x.iter().zip(y).map(|(a, b)| a * b).sum()
    };

    let side = (restarts as f64).sqrt().ceil() as usize;
    let mut best: Option<([f64; 2], f64)> = None;

    'starts: for k in 0..restarts {
        let (i, j) = (k / side, k % side);
        let mut p = [
            (i as f64 + 0.5) * TAU / side as f64,
            (j as f64 + 0.5) * TAU / side as f64,
        ];
        let (mut r, mut cost) = cost_of(p);
        let mut lambda = 1e-3;

        for _ in 0..100 {
            let g = filter_gradients(WaveletParams {
                alpha: p[0],
                beta: p[1],
            })
            .expect("finite angles");
            let (jaa, jab, jbb) = (
                dot(&g.d_alpha, &g.d_alpha),
                dot(&g.d_alpha, &g.d_beta),
                dot(&g.d_beta, &g.d_beta),
            );
            let (ga, gb) = (dot(&g.d_alpha, &r), dot(&g.d_beta, &r));
            if ga.hypot(gb) < 1e-14 {
                break;
            }

            let mut improved = false;
            for _ in 0..25 {
                let (a11, a22) = (jaa + lambda, jbb + lambda);
                let det = a11 * a22 - jab * jab;
                if det.abs() < 1e-300 {
                    lambda *= 10.0;
                    continue;
                }
                let step = [
                    -(a22 * ga - jab * gb) / det,
                    -(a11 * gb - jab * ga) / det,
                ];
                let trial = [p[0] + step[0], p[1] + step[1]];
                let (tr, tc) = cost_of(trial);
                if tc < cost {
                    p = trial;
                    r = tr;
                    cost = tc;
                    lambda = (lambda / 3.0).max(1e-12);
                    improved = true;
                    break;
                }
                lambda *= 4.0;
            }
            if !improved || cost < 1e-30 {
                break;
            }
        }

        if best.map_or(true, |(_, c)| cost < c) {
            best = Some((p, cost));
        }
        if cost < 1e-30 {
            break 'starts;
        }
    }

    let (p, cost) = best.expect("at least one start ran");
    let residual = cost.sqrt();
    if residual > FIT_RESIDUAL_LIMIT {
        return Err(Error::NoFit {
            best_residual: residual,
            limit: FIT_RESIDUAL_LIMIT,
        });
    }
    Ok((
        WaveletParams {
            alpha: p[0].rem_euclid(TAU),
            beta: p[1].rem_euclid(TAU),
        },
        residual,
    ))
}
