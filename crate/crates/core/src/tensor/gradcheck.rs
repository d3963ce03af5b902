use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>], requires_grad: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check: function must return a scalar".into()));
    }
    Ok((g, vars, out))
}

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// and a central-difference estimate, over every coordinate of every input.
/// The relative error of one coordinate is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
///
/// A central difference is only meaningful where `f` is smooth, so a probe
/// whose `±eps` evaluations put any relu input on the other side of zero is
/// retried with a step ten times smaller (at most three times); the last
/// step is used even if it still straddles a kink.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let coords: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.numel()).collect()).collect();
    check_coords(&f, inputs, eps, &coords)
}

/// Like [`grad_check`] but probes at most `per_input` randomly chosen
/// coordinates of each input, for functions with many parameters.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor<f64>], eps: f64, per_input: usize, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            let mut idx = sample(&mut rng, n, per_input.min(n)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect();
    check_coords(&f, inputs, eps, &coords)
}

fn check_coords<F>(f: &F, inputs: &[Tensor<f64>], eps: f64, coords: &[Vec<usize>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, out) = evaluate(f, inputs, true)?;
    let base = g.scalar(out);
    let pattern = g.relu_pattern();
    let (g2, _, out2) = evaluate(f, inputs, false)?;
    if g2.scalar(out2).to_bits() != base.to_bits() {
        return Err(Error::Contract("grad_check: function is not deterministic".into()));
    }
    g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, idxs) in coords.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for &j in idxs {
            let orig = inputs[i].data()[j];
            let mut step = eps;
            let numeric = loop {
                probe[i].data_mut()[j] = orig + step;
                let (gp, _, op) = evaluate(f, &probe, false)?;
                probe[i].data_mut()[j] = orig - step;
                let (gm, _, om) = evaluate(f, &probe, false)?;
                probe[i].data_mut()[j] = orig;
                let smooth = gp.relu_pattern() == pattern && gm.relu_pattern() == pattern;
                if smooth || step <= eps / 1000.0 {
                    break (gp.scalar(op) - gm.scalar(om)) / (2.0 * step);
                }
                step /= 10.0;
            };
            let a = analytic[j];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact_to_roundoff() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 1.7);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn sigmoid_sum() {
        let x = Tensor::from_fn(&[6], |i| (i as f64 * 1.3).sin() * 3.0);
        let err = grad_check(
            |g, v| {
                let s = g.sigmoid(v[0]);
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn a_kink_inside_the_probe_is_not_an_error() {
        let x = Tensor::new(&[3], vec![4e-6, -2.0, 1.5]).unwrap();
        let err = grad_check(
            |g, v| {
                let r = g.relu(v[0]);
                Ok(g.sum(r))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let x = Tensor::from_fn(&[2], |i| i as f64);
        let res = grad_check(
            |g, v| {
                calls.set(calls.get() + 1.0);
                let s = g.scale(v[0], calls.get());
                Ok(g.sum(s))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
