//! Central finite differences as an independent oracle for tape gradients.

use super::{DiffError, Tape, Tensor, Var};

/// Entries whose analytic magnitude is below this fraction of the largest
/// gradient entry are compared on that absolute scale instead, since central
/// differences carry roughly `eps·|f|/h` of rounding noise.
pub const FD_RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the reverse-mode gradient of the scalar `f(x)` against central
/// differences with step `h`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<FdReport, DiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone(), true);
    let y = f(&mut tape, xv)?;
    let analytic = tape.backward(y)?.wrt(&tape, xv)?.into_data();
    drop(tape);

    let eval = |probe: &Tensor| -> Result<f64, DiffError> {
        let mut tape = Tape::new();
        let v = tape.input(probe.clone(), false);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let (max_rel_error, worst_index) = max_relative_error(&analytic, &numeric);
    Ok(FdReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

/// `max_i |a_i - n_i| / (|a_i| + FLOOR·max|a| + 1e-12)` and its argmax.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs() / (a.abs() + FD_RELATIVE_FLOOR * scale + 1e-12);
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    worst
}
