//! Median and 0.2/0.8 quantile bands across trials.

/// One trial's observations. A `None` value marks an x where the estimator
/// was skipped.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub points: Vec<(f64, Option<f64>)>,
}

impl Curve {
    pub fn new(points: Vec<(f64, Option<f64>)>) -> Self {
        Self { points }
    }

    /// Value at `x`: exact match, linear interpolation between two observed
    /// neighbours, or the last value held after the curve ends. Returns
    /// `None` before the first point and next to any skipped point.
    pub fn value_at(&self, x: f64) -> Option<f64> {
        let pts = &self.points;
        let first = pts.first()?;
        if x < first.0 {
            return None;
        }
        let last = pts.last()?;
        if x >= last.0 {
            return last.1;
        }
        let i = pts.partition_point(|p| p.0 <= x);
        let (x0, y0) = pts[i - 1];
        if x0 == x {
            return y0;
        }
        let (x1, y1) = pts[i];
        let (y0, y1) = (y0?, y1?);
        Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    }
}

/// Outcome of one (estimator, trial) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub estimator: String,
    pub trial: usize,
    /// `Err` holds the reason the whole trial was skipped.
    pub curve: Result<Curve, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeriesRow {
    pub x: f64,
    pub estimator: String,
    pub median: f64,
    pub q20: f64,
    pub q80: f64,
    /// At least one trial contributed nothing at this x. Statistics come
    /// from the remaining trials and are NaN when none remain.
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedSeries {
    pub x_label: String,
    pub y_label: String,
    /// Whether `y` is a log10 quantity (drawn on a log axis).
    pub log_y: bool,
    pub estimators: Vec<String>,
    pub rows: Vec<SeriesRow>,
}

impl AggregatedSeries {
    pub fn rows_for<'a>(&'a self, estimator: &'a str) -> impl Iterator<Item = &'a SeriesRow> + 'a {
        self.rows.iter().filter(move |r| r.estimator == estimator)
    }
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Aligns all curves on the union of their x values and summarizes each
/// estimator there. Rows are ordered by x, then by `estimators` order.
pub fn aggregate(
    outcomes: &[TrialOutcome],
    estimators: &[String],
    x_label: &str,
    y_label: &str,
    log_y: bool,
) -> AggregatedSeries {
    let mut grid: Vec<f64> = outcomes
        .iter()
        .filter_map(|o| o.curve.as_ref().ok())
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut rows = Vec::with_capacity(grid.len() * estimators.len());
    for &x in &grid {
        for est in estimators {
            let mut values = Vec::new();
            let mut skipped = false;
            for o in outcomes.iter().filter(|o| &o.estimator == est) {
                match o.curve.as_ref().ok().and_then(|c| c.value_at(x)) {
                    Some(v) => values.push(v),
                    None => skipped = true,
                }
            }
            values.sort_by(f64::total_cmp);
            rows.push(SeriesRow {
                x,
                estimator: est.clone(),
                median: quantile(&values, 0.5),
                q20: quantile(&values, 0.2),
                q80: quantile(&values, 0.8),
                skipped,
            });
        }
    }
    AggregatedSeries {
        x_label: x_label.to_string(),
        y_label: y_label.to_string(),
        log_y,
        estimators: estimators.to_vec(),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> Curve {
        Curve::new(points.iter().map(|&(x, y)| (x, Some(y))).collect())
    }

    fn outcome(est: &str, trial: usize, c: Curve) -> TrialOutcome {
        TrialOutcome {
            estimator: est.into(),
            trial,
            curve: Ok(c),
        }
    }

    #[test]
    fn quantiles_interpolate_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&v, 0.5), 3.0);
        assert!((quantile(&v, 0.2) - 1.8).abs() < 1e-15);
        assert!((quantile(&v, 0.8) - 4.2).abs() < 1e-15);
        assert_eq!(quantile(&[7.0], 0.2), 7.0);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn curve_interpolates_and_holds_last_value() {
        let c = curve(&[(0.0, 0.0), (4.0, -4.0), (9.0, -14.0)]);
        assert_eq!(c.value_at(2.0), Some(-2.0));
        assert_eq!(c.value_at(4.0), Some(-4.0));
        assert_eq!(c.value_at(20.0), Some(-14.0));
        assert_eq!(c.value_at(-1.0), None);
        let gap = Curve::new(vec![(1.0, Some(1.0)), (2.0, None), (3.0, Some(3.0))]);
        assert_eq!(gap.value_at(1.5), None);
        assert_eq!(gap.value_at(2.0), None);
        assert_eq!(gap.value_at(3.0), Some(3.0));
    }

    #[test]
    fn single_trial_has_degenerate_band() {
        let s = aggregate(
            &[outcome("a", 0, curve(&[(0.0, 1.0), (5.0, -3.0)]))],
            &["a".into()],
            "x",
            "y",
            true,
        );
        assert_eq!(s.rows.len(), 2);
        for r in &s.rows {
            assert_eq!(r.q20, r.median);
            assert_eq!(r.q80, r.median);
            assert!(!r.skipped);
        }
    }

    #[test]
    fn union_grid_and_ordering() {
        let outs = vec![
            outcome("a", 0, curve(&[(0.0, 0.0), (4.0, -4.0)])),
            outcome("a", 1, curve(&[(0.0, 0.0), (5.0, -5.0)])),
            outcome("b", 0, curve(&[(0.0, 0.0), (9.0, -1.0)])),
        ];
        let s = aggregate(&outs, &["a".into(), "b".into()], "x", "y", true);
        let xs: Vec<f64> = s.rows.iter().map(|r| r.x).collect();
        assert_eq!(xs, vec![0.0, 0.0, 4.0, 4.0, 5.0, 5.0, 9.0, 9.0]);
        let a4 = &s.rows[2];
        assert_eq!(a4.estimator, "a");
        // Trial 1 at x=4 interpolates to -4.
        assert_eq!(a4.median, -4.0);
        for r in &s.rows {
            assert!(r.q20 <= r.median && r.median <= r.q80);
        }
    }

    #[test]
    fn skipped_trials_contribute_nothing() {
        let outs = vec![
            outcome("a", 0, curve(&[(0.0, 1.0), (1.0, 2.0)])),
            TrialOutcome {
                estimator: "a".into(),
                trial: 1,
                curve: Err("budget".into()),
            },
            TrialOutcome {
                estimator: "b".into(),
                trial: 0,
                curve: Err("budget".into()),
            },
        ];
        let s = aggregate(&outs, &["a".into(), "b".into()], "x", "y", false);
        for r in s.rows_for("a") {
            assert!(r.skipped);
            assert!(r.median.is_finite());
        }
        for r in s.rows_for("b") {
            assert!(r.skipped);
            assert!(r.median.is_nan());
        }
    }
}
