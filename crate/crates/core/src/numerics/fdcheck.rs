/// Outcome of comparing an analytic gradient with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error, if any was checked.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates where both estimates fell below the floor.
    pub skipped: usize,
}

/// Compares `analytic` with central differences of `f` around `params`.
///
/// Relative error per coordinate is `|a − c| / max(|a|, |c|)`; coordinates
/// where both magnitudes are below `floor` are skipped.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    step: f64,
    floor: f64,
) -> FdReport {
    assert!(step > 0.0, "step must be positive");
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut x = params.to_vec();
    let mut report = FdReport { max_rel_err: 0.0, worst_index: None, checked: 0, skipped: 0 };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x);
        x[i] = orig - step;
        let minus = f(&x);
        x[i] = orig;
        let central = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let scale = a.abs().max(central.abs());
        if scale < floor {
            report.skipped += 1;
            continue;
        }
        report.checked += 1;
        let rel = (a - central).abs() / scale;
        if report.worst_index.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    report
}
