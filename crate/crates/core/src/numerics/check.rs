use super::{NumericsError, Tape, Tensor, Var};

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(1e-6))
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Index, analytic value, and numeric value of the worst element.
    pub worst: Option<(usize, f64, f64)>,
    pub pass: bool,
    pub checked: usize,
}

impl GradReport {
    fn from_pairs(pairs: &[(f64, f64)], tol: f64) -> Self {
        let mut max = 0.0;
        let mut worst = None;
        for (i, &(a, n)) in pairs.iter().enumerate() {
            let e = rel_err(a, n);
            if e >= max {
                max = e;
                worst = Some((i, a, n));
            }
        }
        GradReport {
            max_rel_err: max,
            worst,
            pass: max <= tol,
            checked: pairs.len(),
        }
    }
}

/// Checks the tape gradient of `f` at `x` against central finite differences.
///
/// `f` must build a scalar loss from the leaf it is handed. Each element of
/// `x` is perturbed by `+-eps` on fresh tapes, so `f` must be deterministic.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradReport, NumericsError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, NumericsError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_grad());
    let out = f(&mut tape, leaf)?;
    if tape.value(out).numel() != 1 {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check",
            details: format!("loss must be scalar, got {:?}", tape.shape(out)),
        });
    }
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |data: &[f64]| -> Result<f64, NumericsError> {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new(x.shape().to_vec(), data.to_vec())?);
        let o = f(&mut t, l)?;
        let v = t.value(o).data()[0];
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut pairs = Vec::with_capacity(x.numel());
    let mut probe = x.data().to_vec();
    for i in 0..x.numel() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = eval(&probe)?;
        probe[i] = orig - eps;
        let lo = eval(&probe)?;
        probe[i] = orig;
        pairs.push((analytic[i], (hi - lo) / (2.0 * eps)));
    }
    Ok(GradReport::from_pairs(&pairs, tol))
}

/// Compares an already-computed gradient against central differences of a
/// plain scalar function over a flat parameter vector. Used for whole-model
/// checks where the loss closure rebuilds its own tape internally.
pub fn grad_check_values<F>(
    f: F,
    x: &[f64],
    analytic: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradReport, NumericsError>
where
    F: Fn(&[f64]) -> Result<f64, NumericsError>,
{
    if analytic.len() != x.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "grad_check_values",
            details: format!("{} params vs {} gradient entries", x.len(), analytic.len()),
        });
    }
    let mut probe = x.to_vec();
    let mut pairs = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let hi = f(&probe)?;
        probe[i] = orig - eps;
        let lo = f(&probe)?;
        probe[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(NumericsError::NonFinite("grad_check_values probe"));
        }
        pairs.push((analytic[i], (hi - lo) / (2.0 * eps)));
    }
    Ok(GradReport::from_pairs(&pairs, tol))
}
