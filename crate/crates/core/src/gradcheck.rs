//! Central-difference verification of analytic gradients.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A collection of tensors that can be bound into a graph as parameters.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameters for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// Max over entries of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub entries: usize,
}

/// Compares backward-pass gradients against central differences
/// `(f(x+h) − f(x−h)) / 2h` for every entry of every parameter tensor.
///
/// `f` must be deterministic and must bind parameters through
/// [`Graph::param`] so their gradients can be looked up. Parameters that `f`
/// never binds are treated as having zero analytic gradient.
pub fn grad_check<P, F>(params: &mut P, h: f64, f: F) -> Result<GradCheck>
where
    P: Parameters,
    F: for<'a> Fn(&mut Graph<'a>, &'a P) -> Result<NodeId>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let loss = f(&mut g, params)?;
        g.backward(loss)?;
        params
            .tensors()
            .into_iter()
            .map(|t| {
                g.param_grad(t)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect()
    };

    let eval = |p: &P| -> Result<f64> {
        let mut g = Graph::new();
        let loss = f(&mut g, p)?;
        let v = g.value(loss);
        if !v.is_scalar() {
            return Err(Error::contract("grad_check objective must be scalar"));
        }
        Ok(v.item())
    };

    let mut worst = 0.0f64;
    let mut entries = 0;
    let counts: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let orig = params.tensors()[ti].data()[j];
            params.tensors_mut()[ti].data_mut()[j] = orig + h;
            let plus = eval(params)?;
            params.tensors_mut()[ti].data_mut()[j] = orig - h;
            let minus = eval(params)?;
            params.tensors_mut()[ti].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_sum_has_unit_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = vec![Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng)];
        let res = grad_check(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0]);
            Ok(g.sum(x))
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-10, "{res:?}");
        assert_eq!(res.entries, 12);
    }

    #[test]
    fn tanh_sum_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = vec![Tensor::uniform(&[10], -2.0, 2.0, &mut rng)];
        let res = grad_check(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0]);
            let t = g.tanh(x);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(res.max_rel_error < 1e-6, "{res:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // x·x with one factor detached: analytic 0.5, numeric 1.0.
        let mut params = vec![Tensor::vector(vec![0.5])];
        let res = grad_check(&mut params, 1e-5, |g, p| {
            let x = g.param(&p[0]);
            let hidden = g.constant(p[0].clone());
            let y = g.mul(x, hidden)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(res.max_rel_error > 0.4, "{res:?}");
    }
}
