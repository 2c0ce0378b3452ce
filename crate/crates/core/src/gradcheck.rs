//! Central finite-difference gradient checking against the tape.

use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Graph, Result, Tensor, Var};

/// Worst relative error between tape gradients and central differences with
/// step `h`, over every coordinate of every input. `f` must build a scalar.
///
/// Relative error is `|fd - an| / max(|fd| + |an|, 1e-6)`, so coordinates
/// whose true gradient is zero compare on an absolute scale.
pub fn max_relative_error<F>(inputs: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(x.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.leaf(x.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let x0 = inputs[k].data()[j];
            probe[k].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[k].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[k].data_mut()[j] = x0;
            let fd = (up - down) / (2.0 * h);
            let an = analytic[k].data()[j];
            let err = math::abs(fd - an) / (math::abs(fd) + math::abs(an)).max(1e-6);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
