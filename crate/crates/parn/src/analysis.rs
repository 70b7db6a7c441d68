//! Estimation-accuracy analysis: Fisher information and CRLB evaluation,
//! first-order bias propagation for mismodeled velocity or drift inputs,
//! and small utilities for studying estimated clock series.
//!
//! All covariances are expressed in meters squared over the stacked
//! parameter vector `[p_u, c b_u]`, matching the solver.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::clock::ClockNoiseParams;
use crate::solver::{build_weight, design_matrix, weighted_normal_matrix, SolveMode, SolverInput, Theta};
use crate::sync::SanFilter;
use crate::{Error, Result, SPEED_OF_LIGHT};

/// Fisher information `G^T W G` evaluated at the true parameters.
pub fn fim(input: &SolverInput, truth: &Theta) -> Result<DMatrix<f64>> {
    let g = design_matrix(truth, input)?;
    let w = build_weight(input)?;
    Ok(weighted_normal_matrix(&g, &w))
}

/// Lower bound on the estimator covariance at a given geometry.
#[derive(Debug, Clone)]
pub struct CrlbReport {
    pub fim: DMatrix<f64>,
    pub crlb: DMatrix<f64>,
    /// Sum of the position diagonal, meters squared.
    pub position_variance_trace: f64,
    /// Clock entry of the diagonal, meters squared.
    pub clock_variance: f64,
}

impl CrlbReport {
    /// Square root of the full diagonal trace, meters.
    pub fn total_rmse(&self) -> f64 {
        (self.position_variance_trace + self.clock_variance).sqrt()
    }

    pub fn position_rmse(&self) -> f64 {
        self.position_variance_trace.sqrt()
    }

    pub fn clock_rmse(&self) -> f64 {
        self.clock_variance.sqrt()
    }
}

pub fn crlb_report(input: &SolverInput, truth: &Theta) -> Result<CrlbReport> {
    let f = fim(input, truth)?;
    let crlb = Cholesky::new(f.clone())
        .ok_or_else(|| Error::Geometry("Fisher information is not positive definite".into()))?
        .inverse();
    let dim = input.dimension();
    let position_variance_trace = (0..dim).map(|i| crlb[(i, i)]).sum();
    let clock_variance = crlb[(dim, dim)];
    Ok(CrlbReport {
        fim: f,
        crlb,
        position_variance_trace,
        clock_variance,
    })
}

/// CRLB for the same epoch with and without the device sync row.
#[derive(Debug, Clone)]
pub struct ModeComparison {
    pub mode1: CrlbReport,
    pub mode2: CrlbReport,
}

impl ModeComparison {
    /// True when no Mode 1 diagonal entry exceeds its Mode 2 counterpart
    /// beyond round-off.
    pub fn mode1_no_worse(&self) -> bool {
        let n = self.mode1.crlb.nrows();
        (0..n).all(|i| {
            let a = self.mode1.crlb[(i, i)];
            let b = self.mode2.crlb[(i, i)];
            a <= b * (1.0 + 1e-9)
        })
    }
}

/// Evaluates both bounds from a Mode 1 input.
pub fn compare_modes(input: &SolverInput, truth: &Theta) -> Result<ModeComparison> {
    if input.mode != SolveMode::Mode1 {
        return Err(Error::InvalidParameter(
            "mode comparison starts from a Mode 1 input".into(),
        ));
    }
    Ok(ModeComparison {
        mode1: crlb_report(input, truth)?,
        mode2: crlb_report(&input.to_mode2(), truth)?,
    })
}

/// First-order effect of feeding the Mode 1 solver a wrong velocity or
/// drift. The bias is `S r` with `S = (G^T W G)^-1 G^T W` and `r` the
/// model mismatch, which lives entirely in the device sync row.
#[derive(Debug, Clone)]
pub struct DeviationReport {
    /// Magnitude of the injected deviation: m/s for velocity, s/s for
    /// drift.
    pub deviation: f64,
    pub delay: f64,
    /// Predicted estimate bias over `[p_u, c b_u]`, meters.
    pub bias: DVector<f64>,
    pub bias_norm_sq: f64,
    pub position_bias_norm_sq: f64,
    pub clock_bias_sq: f64,
    /// Upper bound that replaces the exact mismatch with its worst-case
    /// magnitude along the sync path.
    pub simplified_bias_norm_sq: f64,
    pub covariance: DMatrix<f64>,
    pub variance_trace: f64,
}

impl DeviationReport {
    /// Root mean squared error combining bias and noise, meters.
    pub fn total_rmse(&self) -> f64 {
        (self.bias_norm_sq + self.variance_trace).sqrt()
    }
}

fn deviation_report_from_mismatch(
    input: &SolverInput,
    truth: &Theta,
    deviation: f64,
    mismatch_m: f64,
    worst_case_m: f64,
) -> Result<DeviationReport> {
    if input.mode != SolveMode::Mode1 {
        return Err(Error::InvalidParameter(
            "deviation analysis applies to Mode 1 inputs".into(),
        ));
    }
    let g = design_matrix(truth, input)?;
    let w = build_weight(input)?;
    let a = weighted_normal_matrix(&g, &w);
    let covariance = Cholesky::new(a)
        .ok_or_else(|| Error::Geometry("Fisher information is not positive definite".into()))?
        .inverse();
    let dim = input.dimension();
    let last = input.row_count() - 1;
    // Column of S that multiplies the sync-row residual.
    let g_last = g.row(last).transpose();
    let s_col = &covariance * g_last * w[last];
    let bias = &s_col * mismatch_m;
    let bias_norm_sq = bias.norm_squared();
    let position_bias_norm_sq = bias.rows(0, dim).norm_squared();
    let clock_bias_sq = bias[dim] * bias[dim];
    let simplified_bias_norm_sq = s_col.norm_squared() * worst_case_m * worst_case_m;
    let variance_trace = covariance.trace();
    Ok(DeviationReport {
        deviation,
        delay: input.response_delay,
        bias,
        bias_norm_sq,
        position_bias_norm_sq,
        clock_bias_sq,
        simplified_bias_norm_sq,
        covariance,
        variance_trace,
    })
}

/// Bias induced by assuming velocity `input.known_velocity` when the
/// device actually moved with `true_velocity` over the response delay.
pub fn velocity_deviation_report(
    input: &SolverInput,
    truth: &Theta,
    true_velocity: &DVector<f64>,
) -> Result<DeviationReport> {
    let assumed = input.known_velocity.as_ref().ok_or_else(|| {
        Error::InvalidParameter("deviation analysis needs the assumed velocity".into())
    })?;
    if true_velocity.len() != assumed.len() {
        return Err(Error::InvalidParameter(
            "velocity dimension mismatch".into(),
        ));
    }
    let dt = input.response_delay;
    let base = &input.anchor_positions[0] - &truth.position;
    // Measurement minus model at the truth: the sync row sees the true
    // motion while the model applies the assumed one.
    let mismatch_m = (&base + true_velocity * dt).norm() - (&base + assumed * dt).norm();
    let deviation = (true_velocity - assumed).norm();
    let worst_case_m = deviation * dt;
    deviation_report_from_mismatch(input, truth, deviation, mismatch_m, worst_case_m)
}

/// Bias induced by assuming drift `input.known_drift` when the device
/// clock actually drifted at `true_drift` over the response delay.
pub fn drift_deviation_report(
    input: &SolverInput,
    truth: &Theta,
    true_drift: f64,
) -> Result<DeviationReport> {
    let dt = input.response_delay;
    let delta = true_drift - input.known_drift;
    // True sync row carries -c w dt; the model subtracts the assumed term.
    let mismatch_m = -SPEED_OF_LIGHT * delta * dt;
    deviation_report_from_mismatch(input, truth, delta.abs(), mismatch_m, mismatch_m.abs())
}

/// Streaming RMS aggregation of estimation errors over `[p_u, c b_u]`.
#[derive(Debug, Clone, Default)]
pub struct RmseAccumulator {
    sum_sq_position: f64,
    sum_sq_clock: f64,
    count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseMetrics {
    pub position_rmse: f64,
    pub clock_rmse: f64,
    pub total_rmse: f64,
    pub count: usize,
}

impl RmseAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one error vector `[p_err, c b_err]` in meters.
    pub fn add(&mut self, error: &DVector<f64>) {
        let dim = error.len() - 1;
        self.sum_sq_position += error.rows(0, dim).norm_squared();
        self.sum_sq_clock += error[dim] * error[dim];
        self.count += 1;
    }

    pub fn add_parts(&mut self, position_sq: f64, clock_sq: f64) {
        self.sum_sq_position += position_sq;
        self.sum_sq_clock += clock_sq;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finalize(&self) -> Option<RmseMetrics> {
        if self.count == 0 {
            return None;
        }
        let n = self.count as f64;
        Some(RmseMetrics {
            position_rmse: (self.sum_sq_position / n).sqrt(),
            clock_rmse: (self.sum_sq_clock / n).sqrt(),
            total_rmse: ((self.sum_sq_position + self.sum_sq_clock) / n).sqrt(),
            count: self.count,
        })
    }
}

/// First differences scaled by the sample spacing.
pub fn differential_series(values: &[f64], times: &[f64]) -> Result<Vec<f64>> {
    if values.len() != times.len() || values.len() < 2 {
        return Err(Error::InvalidParameter(
            "differencing needs at least two aligned samples".into(),
        ));
    }
    values
        .windows(2)
        .zip(times.windows(2))
        .map(|(v, t)| {
            let dt = t[1] - t[0];
            if dt <= 0.0 {
                return Err(Error::InvalidParameter(
                    "sample times must be strictly increasing".into(),
                ));
            }
            Ok((v[1] - v[0]) / dt)
        })
        .collect()
}

/// Least-squares line through the samples, returned as (intercept at
/// `times[0]`, slope).
pub fn linear_fit(times: &[f64], values: &[f64]) -> Result<(f64, f64)> {
    if values.len() != times.len() || values.len() < 2 {
        return Err(Error::InvalidParameter(
            "line fitting needs at least two aligned samples".into(),
        ));
    }
    let t0 = times[0];
    let n = times.len() as f64;
    let mut sum_t = 0.0;
    let mut sum_v = 0.0;
    let mut sum_tt = 0.0;
    let mut sum_tv = 0.0;
    for (&t, &v) in times.iter().zip(values) {
        let ts = t - t0;
        sum_t += ts;
        sum_v += v;
        sum_tt += ts * ts;
        sum_tv += ts * v;
    }
    let det = n * sum_tt - sum_t * sum_t;
    if det.abs() < f64::EPSILON * n * sum_tt.max(1.0) {
        return Err(Error::InvalidParameter(
            "sample times are degenerate for a line fit".into(),
        ));
    }
    let slope = (n * sum_tv - sum_t * sum_v) / det;
    let intercept = (sum_v - slope * sum_t) / n;
    Ok((intercept, slope))
}

/// Residuals after removing the fitted line, exposing random structure in
/// an estimated clock series.
pub fn detrend_series(times: &[f64], values: &[f64]) -> Result<Vec<f64>> {
    let (intercept, slope) = linear_fit(times, values)?;
    Ok(times
        .iter()
        .zip(values)
        .map(|(&t, &v)| v - intercept - slope * (t - times[0]))
        .collect())
}

/// Drift estimate from the endpoints of an offset series, s/s.
pub fn rough_drift_estimate(offsets_s: &[f64], times: &[f64]) -> Result<f64> {
    if offsets_s.len() != times.len() || offsets_s.len() < 2 {
        return Err(Error::InvalidParameter(
            "drift estimation needs at least two aligned samples".into(),
        ));
    }
    let span = times[times.len() - 1] - times[0];
    if span <= 0.0 {
        return Err(Error::InvalidParameter(
            "sample times must be strictly increasing".into(),
        ));
    }
    Ok((offsets_s[offsets_s.len() - 1] - offsets_s[0]) / span)
}

/// Runs the two-state clock filter over an estimated offset series and
/// returns the filtered (offset, drift) track. Entries appear once the
/// filter has initialized, so the output is two samples shorter than the
/// input.
pub fn filtered_clock_track(
    offsets_s: &[f64],
    times: &[f64],
    noise: &ClockNoiseParams,
    sigma_s: f64,
) -> Result<Vec<(f64, f64)>> {
    if offsets_s.len() != times.len() {
        return Err(Error::InvalidParameter(
            "offset and time series must be aligned".into(),
        ));
    }
    let mut filter = SanFilter::new(0, 0.0, sigma_s, *noise);
    let mut track = Vec::new();
    for (&z, &t) in offsets_s.iter().zip(times) {
        filter.observe(z, t)?;
        if let Some(state) = filter.state() {
            track.push((state.x[0], state.x[1]));
        }
    }
    Ok(track)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    const C: f64 = SPEED_OF_LIGHT;

    fn square_positions() -> Vec<DVector<f64>> {
        vec![
            DVector::from_vec(vec![100.0, 0.0]),
            DVector::from_vec(vec![200.0, 100.0]),
            DVector::from_vec(vec![100.0, 200.0]),
            DVector::from_vec(vec![0.0, 100.0]),
        ]
    }

    fn center_input(mode: SolveMode, velocity: Option<DVector<f64>>) -> (SolverInput, Theta) {
        let truth = Theta::new(DVector::from_vec(vec![100.0, 100.0]), 30.0);
        let sigma = 0.05 / C;
        let input = SolverInput {
            anchor_positions: square_positions(),
            anchor_sigmas: vec![sigma; 4],
            san_offsets: vec![1e-7, -2e-7, 3e-7],
            san_offset_vars: vec![(0.0073 / C) * (0.0073 / C); 3],
            response_toas: vec![3.4e-7; 4],
            ud_sync_toa: if mode == SolveMode::Mode1 {
                Some(3.3e-7)
            } else {
                None
            },
            ud_sigma: sigma,
            known_velocity: velocity,
            known_drift: 0.0,
            response_delay: 0.005,
            mode,
        };
        (input, truth)
    }

    #[test]
    fn equal_weight_symmetric_scene_has_diagonal_information() {
        let (mut input, truth) = center_input(SolveMode::Mode2, None);
        input.san_offset_vars = vec![0.0; 3];
        let w = 1.0 / (0.05 * 0.05);
        let f = fim(&input, &truth).unwrap();
        let expected = [[2.0 * w, 0.0, 0.0], [0.0, 2.0 * w, 0.0], [0.0, 0.0, 4.0 * w]];
        for i in 0..3 {
            for j in 0..3 {
                assert_relative_eq!(f[(i, j)], expected[i][j], epsilon = 1e-9);
            }
        }
        let report = crlb_report(&input, &truth).unwrap();
        assert_relative_eq!(
            report.position_variance_trace,
            2.0 / (2.0 * w),
            max_relative = 1e-12
        );
        assert_relative_eq!(report.clock_variance, 1.0 / (4.0 * w), max_relative = 1e-12);
    }

    #[test]
    fn mode1_information_is_a_rank_one_update_of_mode2() {
        let (input, truth) = center_input(SolveMode::Mode1, Some(DVector::from_vec(vec![5.0, 0.0])));
        let f1 = fim(&input, &truth).unwrap();
        let f2 = fim(&input.to_mode2(), &truth).unwrap();
        let g = design_matrix(&truth, &input).unwrap();
        let w = build_weight(&input).unwrap();
        let last = input.row_count() - 1;
        let g_u = g.row(last).transpose();
        let update = &g_u * g_u.transpose() * w[last];
        let scale = f1.norm();
        assert!((f1 - (f2 + update)).norm() <= 1e-12 * scale);
    }

    #[test]
    fn mode_comparison_bounds_are_ordered_and_merge_as_the_sync_row_degrades() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (mut input, _) = center_input(
                SolveMode::Mode1,
                Some(DVector::from_vec(vec![5.0, 0.0])),
            );
            let truth = Theta::new(
                DVector::from_vec(vec![
                    rng.random_range(60.0..140.0),
                    rng.random_range(60.0..140.0),
                ]),
                rng.random_range(-500.0..500.0),
            );
            let cmp = compare_modes(&input, &truth).unwrap();
            assert!(cmp.mode1_no_worse());

            input.ud_sigma = 1e3;
            let merged = compare_modes(&input, &truth).unwrap();
            for i in 0..3 {
                assert_relative_eq!(
                    merged.mode1.crlb[(i, i)],
                    merged.mode2.crlb[(i, i)],
                    max_relative = 1e-6
                );
            }
        }
    }

    #[test]
    fn zero_deviation_leaves_only_the_noise_floor() {
        let v = DVector::from_vec(vec![5.0, 0.0]);
        let (input, truth) = center_input(SolveMode::Mode1, Some(v.clone()));
        let report = velocity_deviation_report(&input, &truth, &v).unwrap();
        assert_eq!(report.deviation, 0.0);
        assert_eq!(report.bias_norm_sq, 0.0);
        assert_relative_eq!(
            report.total_rmse(),
            report.variance_trace.sqrt(),
            max_relative = 1e-12
        );
        let crlb = crlb_report(&input, &truth).unwrap();
        assert_relative_eq!(
            report.variance_trace,
            crlb.position_variance_trace + crlb.clock_variance,
            max_relative = 1e-12
        );
    }

    #[test]
    fn simplified_bias_is_exact_for_deviation_along_the_sync_path() {
        let assumed = DVector::from_vec(vec![0.0, 0.0]);
        let (input, truth) = center_input(SolveMode::Mode1, Some(assumed));
        // The sync path points from the device toward the primary anchor,
        // straight down in this scene.
        let true_velocity = DVector::from_vec(vec![0.0, -3.0]);
        let report = velocity_deviation_report(&input, &truth, &true_velocity).unwrap();
        assert!(report.bias_norm_sq > 0.0);
        assert_relative_eq!(
            report.simplified_bias_norm_sq,
            report.bias_norm_sq,
            max_relative = 1e-9
        );

        // Off-path deviations are strictly below the worst case.
        let sideways = DVector::from_vec(vec![3.0, 0.0]);
        let off = velocity_deviation_report(&input, &truth, &sideways).unwrap();
        assert!(off.bias_norm_sq < off.simplified_bias_norm_sq);
    }

    #[test]
    fn worst_case_velocity_bias_scales_with_the_squared_delay() {
        let assumed = DVector::from_vec(vec![5.0, 0.0]);
        let (mut input, truth) = center_input(SolveMode::Mode1, Some(assumed));
        let true_velocity = DVector::from_vec(vec![5.0, 8.0]);
        let short = velocity_deviation_report(&input, &truth, &true_velocity).unwrap();
        input.response_delay *= 2.0;
        let long = velocity_deviation_report(&input, &truth, &true_velocity).unwrap();
        assert_relative_eq!(
            long.simplified_bias_norm_sq / short.simplified_bias_norm_sq,
            4.0,
            max_relative = 1e-2
        );
    }

    #[test]
    fn drift_bias_is_exactly_quadratic_in_the_deviation() {
        let (input, truth) = center_input(
            SolveMode::Mode1,
            Some(DVector::from_vec(vec![5.0, 0.0])),
        );
        let r1 = drift_deviation_report(&input, &truth, 1e-7).unwrap();
        let r2 = drift_deviation_report(&input, &truth, 2e-7).unwrap();
        assert_relative_eq!(r2.bias_norm_sq / r1.bias_norm_sq, 4.0, max_relative = 1e-12);
        assert_relative_eq!(
            r1.simplified_bias_norm_sq,
            r1.bias_norm_sq,
            max_relative = 1e-12
        );
    }

    #[test]
    fn half_ppm_drift_over_25_ms_mismatches_by_meters() {
        let (mut input, truth) = center_input(
            SolveMode::Mode1,
            Some(DVector::from_vec(vec![5.0, 0.0])),
        );
        input.response_delay = 0.025;
        let report = drift_deviation_report(&input, &truth, 0.5e-6).unwrap();
        // c * 0.5e-6 * 0.025 m of path mismatch.
        let mismatch = C * 0.5e-6 * 0.025;
        assert_relative_eq!(mismatch, 3.747405725, max_relative = 1e-9);
        let g = design_matrix(&truth, &input).unwrap();
        let w = build_weight(&input).unwrap();
        let a = weighted_normal_matrix(&g, &w);
        let cov = Cholesky::new(a).unwrap().inverse();
        let last = input.row_count() - 1;
        let s_col = &cov * g.row(last).transpose() * w[last];
        assert_relative_eq!(
            report.bias_norm_sq,
            s_col.norm_squared() * mismatch * mismatch,
            max_relative = 1e-12
        );
    }

    #[test]
    fn shrinking_any_noise_never_loosens_the_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let (mut input, truth) = center_input(
                SolveMode::Mode1,
                Some(DVector::from_vec(vec![5.0, 0.0])),
            );
            let before = crlb_report(&input, &truth).unwrap();
            let k = rng.random_range(0..4);
            input.anchor_sigmas[k] *= 0.5;
            let after = crlb_report(&input, &truth).unwrap();
            for i in 0..3 {
                assert!(after.crlb[(i, i)] <= before.crlb[(i, i)] * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn rmse_accumulator_reduces_known_errors() {
        let mut acc = RmseAccumulator::new();
        acc.add(&DVector::from_vec(vec![3.0, 4.0, 0.0]));
        let m = acc.finalize().unwrap();
        assert_relative_eq!(m.position_rmse, 5.0, max_relative = 1e-12);
        assert_eq!(m.clock_rmse, 0.0);
        assert_relative_eq!(m.total_rmse, 5.0, max_relative = 1e-12);

        let mut gauss = RmseAccumulator::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sigma = 0.7;
        for _ in 0..10_000 {
            let e = DVector::from_vec(vec![
                sigma * rng.sample::<f64, _>(StandardNormal),
                sigma * rng.sample::<f64, _>(StandardNormal),
                0.0,
            ]);
            gauss.add(&e);
        }
        let m = gauss.finalize().unwrap();
        // RMS of a 2-D isotropic Gaussian norm is sigma * sqrt(2).
        assert_relative_eq!(
            m.position_rmse,
            sigma * 2.0f64.sqrt(),
            max_relative = 0.02
        );
        assert!(RmseAccumulator::new().finalize().is_none());
    }

    #[test]
    fn series_utilities_recover_lines_and_slopes() {
        let times: Vec<f64> = (0..50).map(|k| 0.3 + 0.01 * k as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 2.0 + 3.0 * (t - 0.3)).collect();
        let (intercept, slope) = linear_fit(&times, &values).unwrap();
        assert_relative_eq!(intercept, 2.0, max_relative = 1e-12);
        assert_relative_eq!(slope, 3.0, max_relative = 1e-12);
        for r in detrend_series(&times, &values).unwrap() {
            assert!(r.abs() < 1e-12);
        }

        let squares = [0.0, 1.0, 4.0, 9.0];
        let unit_times = [0.0, 1.0, 2.0, 3.0];
        let diffs = differential_series(&squares, &unit_times).unwrap();
        assert_eq!(diffs, vec![1.0, 3.0, 5.0]);

        assert_relative_eq!(
            rough_drift_estimate(&values, &times).unwrap(),
            3.0,
            max_relative = 1e-12
        );
        assert!(differential_series(&[1.0], &[0.0]).is_err());
        assert!(linear_fit(&[1.0, 1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn filtering_an_offset_series_beats_endpoint_differencing() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let noise = ClockNoiseParams::new(1e-21, 5.9e-23);
        let sigma = 1e-9;
        let period = 0.01;
        let n = 400;
        let true_drift = 1e-6;
        let mut rough_err_sq = 0.0;
        let mut filtered_err_sq = 0.0;
        let trials = 50;
        for _ in 0..trials {
            let times: Vec<f64> = (0..n).map(|k| k as f64 * period).collect();
            let offsets: Vec<f64> = times
                .iter()
                .map(|t| 2e-6 + true_drift * t + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let rough = rough_drift_estimate(&offsets, &times).unwrap();
            let track = filtered_clock_track(&offsets, &times, &noise, sigma).unwrap();
            let filtered = track.last().unwrap().1;
            rough_err_sq += (rough - true_drift).powi(2);
            filtered_err_sq += (filtered - true_drift).powi(2);
        }
        // Endpoint differencing keeps the noise of two samples; the filter
        // averages the whole series.
        let rough_rms = (rough_err_sq / trials as f64).sqrt();
        let filtered_rms = (filtered_err_sq / trials as f64).sqrt();
        assert!(
            filtered_rms < rough_rms,
            "filtered {filtered_rms} vs rough {rough_rms}"
        );
        let expected_rough = 2.0f64.sqrt() * sigma / ((n - 1) as f64 * period);
        assert_relative_eq!(rough_rms, expected_rough, max_relative = 0.5);
    }
}
