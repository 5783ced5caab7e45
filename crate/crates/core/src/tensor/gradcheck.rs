//! Central-difference gradient checks against the tape.

use super::{ParamStore, Result, Tape, Tensor, Var};

/// Largest relative deviation between tape gradients and central
/// differences of `f` with respect to every entry of every input.
///
/// The relative error of one entry is `|a − n| / (max(|a|, |n|) + floor)`.
pub fn max_gradient_error<F>(inputs: &[Tensor], eps: f64, floor: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf_grad(x.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss, &mut store)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = f(&mut tape, &vars)?;
        Ok(tape.value(y).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs().max(numeric.abs()) + floor));
        }
    }
    Ok(worst)
}
