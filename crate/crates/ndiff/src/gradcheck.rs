//! Central finite differences, used as an independent oracle for the
//! analytic backward passes.

use crate::{Result, Tape, Tensor, Var};

/// Norm-wise relative error `‖a − n‖∞ / max(‖a‖∞, ‖n‖∞, 1e-8)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
    diff / inf(analytic).max(inf(numeric)).max(1e-8)
}

/// `∂f/∂x` by central differences with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = xp[k];
            xp[k] = orig + h;
            let fp = f(&xp);
            xp[k] = orig - h;
            let fm = f(&xp);
            xp[k] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Compares tape gradients of a scalar function of several inputs against
/// central differences. Returns the worst per-input relative error.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars).expect("forward succeeded once already");
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = central_difference(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                eval(&vals)
            },
            input.data(),
            h,
        );
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}
