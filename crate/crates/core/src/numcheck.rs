//! Independent numerical verification of gradients.
//!
//! Central finite differences evaluated through fresh forward passes — no
//! part of the reverse-mode path is reused, so this is a genuinely
//! independent oracle for every backward rule in the crate.

use ndarray::ArrayD;

use crate::autodiff::{Graph, Var};

/// Builds a scalar loss from leaves; re-invoked for every probe evaluation.
pub type LossBuilder<'a> = dyn FnMut(&mut Graph<f64>, &[Var]) -> Var + 'a;

/// Maximum relative error between the analytic gradient of `inputs[which]`
/// and central finite differences at the probed flat indices (all indices if
/// `probe` is empty).
///
/// Relative error uses `|a - n| / max(|a|, |n|, floor)` so vanishing
/// gradients do not blow up the ratio.
pub fn max_rel_grad_err(
    build: &mut LossBuilder,
    inputs: &[ArrayD<f64>],
    which: usize,
    probe: &[usize],
    floor: f64,
) -> f64 {
    // Analytic gradient.
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = build(&mut g, &vars);
    assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
    let grads = g.backward(loss);
    let analytic = grads
        .get(vars[which])
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(inputs[which].raw_dim()));
    let analytic_flat: Vec<f64> = analytic.iter().copied().collect();

    let eval = |xs: &[ArrayD<f64>], build: &mut LossBuilder| -> f64 {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let loss = build(&mut g, &vars);
        g.scalar(loss)
    };

    let all: Vec<usize>;
    let probe = if probe.is_empty() {
        all = (0..inputs[which].len()).collect();
        &all
    } else {
        probe
    };

    let mut worst = 0.0f64;
    for &idx in probe {
        let x0 = inputs[which].as_slice().expect("standard layout")[idx];
        let h = 1e-5 * (1.0 + x0.abs());
        let mut xs = inputs.to_vec();
        xs[which].as_slice_mut().unwrap()[idx] = x0 + h;
        let fp = eval(&xs, build);
        xs[which].as_slice_mut().unwrap()[idx] = x0 - h;
        let fm = eval(&xs, build);
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic_flat[idx];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Deterministic probe subset: `count` indices spread over `len`.
pub fn spread_indices(len: usize, count: usize) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn catches_broken_gradients() {
        // tanh gradient should verify to high accuracy.
        let x = arr1(&[0.3, -1.2, 2.0]).into_dyn();
        let mut build = |g: &mut Graph<f64>, vs: &[Var]| {
            let t = g.tanh(vs[0]);
            g.sum_all(t)
        };
        let err = max_rel_grad_err(&mut build, &[x], 0, &[], 1e-6);
        assert!(err < 1e-6, "tanh gradcheck err {err}");
    }
}
