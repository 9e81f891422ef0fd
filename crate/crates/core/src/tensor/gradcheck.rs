use super::{Float, Result, Tape, Tensor, TensorError, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, coordinate)` of the largest error.
    pub worst: Option<(usize, usize)>,
    pub coordinates_checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<(f64, Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::Usage("checked function must return a scalar".into()));
    }
    let value = tape.scalar_value(out);
    if !value.is_finite() {
        return Err(TensorError::NonFinite("finite-difference evaluation".into()));
    }
    Ok((value, tape, vars, out))
}

/// Maximum over all coordinates of
/// `|analytic − central| / (|analytic| + |central| + 1e-12)`.
///
/// `f` records a scalar function of `params` on the given tape; every
/// parameter is treated as differentiable.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with(f, params, h, usize::MAX).map(|r| r.max_rel_error)
}

/// As [`finite_diff_check`], probing at most `max_coords_per_param`
/// evenly strided coordinates of each parameter.
pub fn finite_diff_check_with<F>(
    f: F,
    params: &[Tensor<f64>],
    h: f64,
    max_coords_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(TensorError::Param {
            op: "finite_diff_check",
            msg: format!("step must be positive, got {h}"),
        });
    }
    let mut params: Vec<Tensor<f64>> = params.iter().map(|p| p.clone().with_grad()).collect();
    let (_, tape, vars, out) = eval(&f, &params)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| grads.get(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = n.div_ceil(max_coords_per_param.max(1)).max(1);
        for c in (0..n).step_by(stride) {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + h;
            let up = eval(&f, &params)?.0;
            params[pi].data_mut()[c] = orig - h;
            let down = eval(&f, &params)?.0;
            params[pi].data_mut()[c] = orig;
            let central = (up - down) / (2.0 * h);
            let a = analytic[pi][c];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
            report.coordinates_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((pi, c));
            }
        }
    }
    Ok(report)
}

/// Converts a tensor to f64 for gradient checking.
pub fn to_f64<T: Float>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(vec![1], vec![3.0]).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.mul(v[0], v[0])?), &[x], 1e-4).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(
            |t, _| t.constant(vec![1], vec![4.2]),
            &[x],
            1e-4,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::new(vec![1], vec![-1.0]).unwrap();
        let r = finite_diff_check(|t, v| Ok(t.log(v[0])), &[x], 1e-4);
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }
}
