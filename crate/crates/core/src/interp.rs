//! Sparse total-volume observations, natural cubic spline densification
//! and the time/volume normalization used by the networks.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{format_sig, parse_csv};
use crate::losses::ConstraintSpec;

/// Tolerance on `q_C + q_T + q_M = 1`. Published proportions are rounded to
/// five decimals, so their sums can miss 1 by a few 1e-5.
pub const PROPORTION_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub day: f64,
    pub total_volume: f64,
}

/// Measured total volumes plus proportion anchors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    points: Vec<DataPoint>,
    initial: Option<ConstraintSpec>,
    histology: Vec<ConstraintSpec>,
}

impl ObservationSet {
    pub fn new(
        points: Vec<DataPoint>,
        initial: Option<ConstraintSpec>,
        histology: Vec<ConstraintSpec>,
    ) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.day.is_finite() || !p.total_volume.is_finite() {
                return Err(Error::InvalidInput(format!("observation {i} is not finite")));
            }
            if p.total_volume <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "observation {i} (day {}) has non-positive volume {}",
                    p.day, p.total_volume
                )));
            }
            if i > 0 && p.day <= points[i - 1].day {
                return Err(Error::InvalidInput(format!(
                    "observation days must be strictly increasing (day {} after {})",
                    p.day,
                    points[i - 1].day
                )));
            }
        }
        for spec in initial.iter().chain(&histology) {
            spec.validate()?;
        }
        Ok(Self {
            points,
            initial,
            histology,
        })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn days(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.day).collect()
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.total_volume).collect()
    }

    pub fn initial(&self) -> Option<&ConstraintSpec> {
        self.initial.as_ref()
    }

    pub fn histology(&self) -> &[ConstraintSpec] {
        &self.histology
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_volume(&self) -> f64 {
        self.points
            .iter()
            .map(|p| p.total_volume)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same data with different anchors.
    pub fn with_anchors(
        &self,
        initial: Option<ConstraintSpec>,
        histology: Vec<ConstraintSpec>,
    ) -> Result<Self> {
        Self::new(self.points.clone(), initial, histology)
    }

    /// Observation CSV: header `day,total_volume`. Anchors are not part of
    /// the file.
    pub fn from_csv(text: &str, source_name: &str) -> Result<Self> {
        let rows = parse_csv(text, source_name, &["day", "total_volume"])?;
        let mut points: Vec<DataPoint> = Vec::with_capacity(rows.len());
        for (line, r) in rows {
            if let Some(prev) = points.last() {
                if r[0] <= prev.day {
                    return Err(Error::csv(
                        source_name,
                        line,
                        format!("day {} is not after the previous day {}", r[0], prev.day),
                    ));
                }
            }
            if r[1] <= 0.0 {
                return Err(Error::csv(source_name, line, "total_volume must be positive"));
            }
            points.push(DataPoint {
                day: r[0],
                total_volume: r[1],
            });
        }
        if points.is_empty() {
            return Err(Error::csv(source_name, 2, "no observations"));
        }
        Self::new(points, None, Vec::new())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("day,total_volume\n");
        for p in &self.points {
            writeln!(out, "{},{}", format_sig(p.day, 9), format_sig(p.total_volume, 9))
                .expect("write to string");
        }
        out
    }
}

/// Natural cubic spline through `(knots[i], values[i])`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineCurve {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// Second derivative at each knot; zero at both ends.
    second: Vec<f64>,
}

impl SplineCurve {
    pub fn fit(knots: &[f64], values: &[f64]) -> Result<Self> {
        if knots.len() != values.len() {
            return Err(Error::InvalidInput("knots and values differ in length".into()));
        }
        let n = knots.len();
        if n < 3 {
            return Err(Error::InsufficientData(format!(
                "spline needs at least 3 points, got {n}"
            )));
        }
        for w in knots.windows(2) {
            if w[1] == w[0] {
                return Err(Error::InvalidInput(format!("duplicate knot at t = {}", w[0])));
            }
            if w[1] < w[0] {
                return Err(Error::InvalidInput("knots must be increasing".into()));
            }
        }
        // Tridiagonal system for interior second derivatives (Thomas sweep):
        // h[i-1] M[i-1] + 2 (h[i-1] + h[i]) M[i] + h[i] M[i+1] = 6 (d[i] - d[i-1])
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let slope: Vec<f64> = (0..n - 1)
            .map(|i| (values[i + 1] - values[i]) / h[i])
            .collect();
        let m = n - 2;
        let mut diag = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        for k in 0..m {
            diag[k] = 2.0 * (h[k] + h[k + 1]);
            rhs[k] = 6.0 * (slope[k + 1] - slope[k]);
        }
        for k in 1..m {
            let w = h[k] / diag[k - 1];
            diag[k] -= w * h[k];
            rhs[k] -= w * rhs[k - 1];
        }
        let mut second = vec![0.0; n];
        for k in (0..m).rev() {
            let upper = if k + 1 < m { h[k + 1] * second[k + 2] } else { 0.0 };
            second[k + 1] = (rhs[k] - upper) / diag[k];
        }
        Ok(Self {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn segment(&self, t: f64) -> usize {
        let k = self.knots.partition_point(|&x| x <= t);
        k.clamp(1, self.knots.len() - 1) - 1
    }

    /// Value at `t`. Outside the knot range the end segments continue
    /// linearly (zero curvature).
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if t < self.knots[0] {
            return self.values[0] + (t - self.knots[0]) * self.derivative(self.knots[0]);
        }
        if t > self.knots[n - 1] {
            return self.values[n - 1] + (t - self.knots[n - 1]) * self.derivative(self.knots[n - 1]);
        }
        let i = self.segment(t);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * m0 + (b * b * b - b) * m1) * h * h / 6.0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let t = t.clamp(self.knots[0], self.knots[self.knots.len() - 1]);
        let i = self.segment(t);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = ((x1 - t) / h, (t - x0) / h);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        (self.values[i + 1] - self.values[i]) / h
            + ((1.0 - 3.0 * a * a) * m0 + (3.0 * b * b - 1.0) * m1) * h / 6.0
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let n = self.knots.len();
        if t <= self.knots[0] || t >= self.knots[n - 1] {
            return if t == self.knots[0] {
                self.second[0]
            } else if t == self.knots[n - 1] {
                self.second[n - 1]
            } else {
                0.0
            };
        }
        let i = self.segment(t);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        ((x1 - t) * self.second[i] + (t - x0) * self.second[i + 1]) / h
    }
}

/// Natural cubic spline through the observed totals.
pub fn fit_spline(obs: &ObservationSet) -> Result<SplineCurve> {
    SplineCurve::fit(&obs.days(), &obs.volumes())
}

/// Original knots plus `m_interp` evenly spaced points over the knot
/// range, sorted. A generated point that coincides with a knot is dropped
/// in favour of the knot.
pub fn augment(spline: &SplineCurve, m_interp: usize) -> Vec<(f64, f64)> {
    let knots = spline.knots();
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    let tol = 1e-9 * (hi - lo);
    let mut out: Vec<(f64, f64)> = knots
        .iter()
        .zip(spline.values())
        .map(|(&t, &v)| (t, v))
        .collect();
    for j in 0..m_interp {
        let t = if m_interp == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * j as f64 / (m_interp - 1) as f64
        };
        let k = knots.partition_point(|&x| x < t);
        let near_knot = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < knots.len())
            .any(|i| (knots[i] - t).abs() <= tol);
        if !near_knot {
            out.push((t, spline.eval(t)));
        }
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Affine map of `[t0, tF]` onto `[0, 1]` and division of volumes by a
/// fixed scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub t0: f64,
    pub tf: f64,
    pub volume_scale: f64,
}

impl Normalizer {
    pub fn new(t0: f64, tf: f64, volume_scale: f64) -> Result<Self> {
        if !(tf > t0) || !t0.is_finite() || !tf.is_finite() {
            return Err(Error::DegenerateRange(format!(
                "time range [{t0}, {tf}] is empty"
            )));
        }
        if !(volume_scale > 0.0 && volume_scale.is_finite()) {
            return Err(Error::DegenerateRange(format!(
                "volume scale {volume_scale} must be positive"
            )));
        }
        Ok(Self {
            t0,
            tf,
            volume_scale,
        })
    }

    /// Time range of the observations and their largest total volume.
    pub fn from_observations(obs: &ObservationSet) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::InsufficientData("no observations".into()));
        }
        let days = obs.days();
        Self::new(days[0], days[days.len() - 1], obs.max_volume())
    }

    pub fn duration(&self) -> f64 {
        self.tf - self.t0
    }

    pub fn time(&self, t: f64) -> f64 {
        (t - self.t0) / (self.tf - self.t0)
    }

    pub fn time_inv(&self, s: f64) -> f64 {
        self.t0 + s * (self.tf - self.t0)
    }

    pub fn volume(&self, v: f64) -> f64 {
        v / self.volume_scale
    }

    pub fn volume_inv(&self, v: f64) -> f64 {
        v * self.volume_scale
    }

    /// Normalized copy of `points`.
    pub fn apply(&self, points: &[(f64, f64)]) -> Vec<(f64, f64)> {
        points
            .iter()
            .map(|&(t, v)| (self.time(t), self.volume(v)))
            .collect()
    }
}

/// Normalize observations by their own time range and peak volume.
pub fn normalize(obs: &ObservationSet) -> Result<(Vec<(f64, f64)>, Normalizer)> {
    let n = Normalizer::from_observations(obs)?;
    let pts: Vec<(f64, f64)> = obs.points().iter().map(|p| (p.day, p.total_volume)).collect();
    Ok((n.apply(&pts), n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(days: &[f64], vols: &[f64]) -> ObservationSet {
        let pts = days
            .iter()
            .zip(vols)
            .map(|(&day, &total_volume)| DataPoint { day, total_volume })
            .collect();
        ObservationSet::new(pts, None, Vec::new()).unwrap()
    }

    /// Natural spline value via a dense Gaussian elimination on the full
    /// second-derivative system, including the two boundary rows.
    fn dense_natural_spline(x: &[f64], y: &[f64], t: f64) -> f64 {
        let n = x.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let (h0, h1) = (x[i] - x[i - 1], x[i + 1] - x[i]);
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            a[i][n] = (y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0;
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        let m: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let i = (0..n - 1).find(|&i| t <= x[i + 1]).unwrap();
        let h = x[i + 1] - x[i];
        let (p, q) = (x[i + 1] - t, t - x[i]);
        m[i] * p.powi(3) / (6.0 * h)
            + m[i + 1] * q.powi(3) / (6.0 * h)
            + (y[i] / h - m[i] * h / 6.0) * p
            + (y[i + 1] / h - m[i + 1] * h / 6.0) * q
    }

    #[test]
    fn reproduces_straight_line() {
        let xs = [0.0, 1.0, 2.5, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let s = SplineCurve::fit(&xs, &ys).unwrap();
        for k in 0..=70 {
            let t = k as f64 * 0.1;
            assert!((s.eval(t) - 2.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn cubic_data_against_dense_oracle() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.0, 1.0, 8.0, 27.0];
        let s = SplineCurve::fit(&xs, &ys).unwrap();
        let oracle = dense_natural_spline(&xs, &ys, 1.5);
        assert!((oracle - 3.15).abs() < 1e-12, "oracle {oracle}");
        assert!((s.eval(1.5) - oracle).abs() < 1e-12);
        for &t in &[0.3, 0.9, 2.2, 2.95] {
            assert!((s.eval(t) - dense_natural_spline(&xs, &ys, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn natural_boundary_and_knot_exactness() {
        let days = [6.0, 9.0, 13.0, 16.0, 20.0, 23.0];
        let vols = [2.0, 5.3, 17.4, 26.8, 24.5, 28.3];
        let s = SplineCurve::fit(&days, &vols).unwrap();
        for (d, v) in days.iter().zip(vols) {
            assert_eq!(s.eval(*d), v);
        }
        // numerical second derivative just inside each boundary
        let h = 1e-4;
        for &(t, sign) in &[(6.0, 1.0), (23.0, -1.0)] {
            let a = t + sign * h;
            let b = t + sign * 2.0 * h;
            let fd = (s.eval(b) - 2.0 * s.eval(a) + s.eval(t)) / (h * h);
            assert!(fd.abs() < 1e-2, "second derivative {fd} at {t}");
            assert_eq!(s.second_derivative(t), 0.0);
        }
        // C2 at interior knots
        for &k in &days[1..5] {
            let l = s.second_derivative(k - 1e-9);
            let r = s.second_derivative(k + 1e-9);
            assert!((l - r).abs() < 1e-6);
        }
    }

    #[test]
    fn spline_errors() {
        assert!(matches!(
            SplineCurve::fit(&[0.0, 1.0], &[1.0, 2.0]),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            SplineCurve::fit(&[0.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn augmentation_grid() {
        let o = obs(&[6.0, 9.0, 13.0, 16.0, 20.0, 23.0], &[2.0, 5.3, 17.4, 26.8, 24.5, 28.3]);
        let s = fit_spline(&o).unwrap();
        let none = augment(&s, 0);
        assert_eq!(none.len(), 6);
        assert_eq!(none.iter().map(|p| p.0).collect::<Vec<_>>(), o.days());

        let aug = augment(&s, 100);
        // endpoints 6 and 23 coincide with knots; no other day lands on
        // the 17/99-spaced grid
        assert_eq!(aug.len(), 104);
        assert!(aug.len() <= 106);
        assert!(aug.windows(2).all(|w| w[1].0 > w[0].0));
        for p in o.points() {
            let hit = aug.iter().find(|a| a.0 == p.day).unwrap();
            assert_eq!(hit.1, p.total_volume);
        }
    }

    #[test]
    fn normalization() {
        let o = obs(&[6.0, 14.5, 23.0], &[2.0, 8.0, 4.0]);
        let (pts, _) = normalize(&o).unwrap();
        assert_eq!(pts[0].0, 0.0);
        assert_eq!(pts[1].0, 0.5);
        assert_eq!(pts[2].0, 1.0);
        assert_eq!(pts[1].1, 1.0);
        assert!(matches!(
            Normalizer::new(6.0, 6.0, 1.0),
            Err(Error::DegenerateRange(_))
        ));
    }

    #[test]
    fn observation_csv_rejects_unsorted_days() {
        let err = ObservationSet::from_csv("day,total_volume\n6,1\n9,2\n8,3\n", "obs.csv").unwrap_err();
        match err {
            Error::Csv { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("not after"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn normalizer_roundtrip_and_order(
            t0 in -50.0f64..50.0, span in 0.1f64..100.0, scale in 1e-3f64..1e4,
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let n = Normalizer::new(t0, t0 + span, scale).unwrap();
            let (ta, tb) = (t0 + a * span, t0 + b * span);
            let back = n.time_inv(n.time(ta));
            prop_assert!((back - ta).abs() <= 1e-12 * ta.abs().max(span));
            let v = a * 1e3 + 1e-3;
            prop_assert!((n.volume_inv(n.volume(v)) - v).abs() <= 1e-12 * v);
            prop_assert_eq!(ta < tb, n.time(ta) < n.time(tb));
            prop_assert_eq!(a < b, n.volume(a) < n.volume(b));
        }

        #[test]
        fn augmented_grid_strictly_increasing(m in 0usize..300) {
            let o = obs(&[6.0, 9.0, 13.0, 16.0, 20.0, 23.0], &[2.0, 5.3, 17.4, 26.8, 24.5, 28.3]);
            let aug = augment(&fit_spline(&o).unwrap(), m);
            prop_assert!(aug.windows(2).all(|w| w[1].0 > w[0].0));
            prop_assert!(aug.len() >= 6 && aug.len() <= 6 + m);
        }
    }
}
