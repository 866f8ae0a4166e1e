use super::{relative_error, Graph, Mode, ParamStore, Var};
use crate::error::{Result, TensorError};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Probe at most this many coordinates per parameter (evenly strided).
    /// `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    /// Build graphs in train mode with this dropout seed (the same masks are
    /// drawn on every evaluation). `None` uses eval mode.
    pub train_seed: Option<u64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coords_per_param: None,
            train_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, coordinate)` where the maximum was observed.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compares tape gradients of a scalar function of `params` against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, evaluated in f64.
///
/// `f` builds the function on a fresh graph; it must be deterministic
/// (evaluate in [`super::Mode::Eval`] or with a fixed dropout seed).
pub fn grad_check<F>(f: F, params: &ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    fn graph(store: &ParamStore, train_seed: Option<u64>) -> Graph<'_> {
        match train_seed {
            Some(seed) => Graph::with_mode(store, Mode::Train, seed),
            None => Graph::new(store),
        }
    }
    let analytic = {
        let mut g = graph(params, opts.train_seed);
        let out = f(&mut g)?;
        if g.value(out).len() != 1 {
            return Err(TensorError::arg(
                "grad_check",
                format!("function must be scalar-valued, got shape {:?}", g.shape(out)),
            )
            .into());
        }
        g.backward(out)?
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = graph(store, opts.train_seed);
        let out = f(&mut g)?;
        Ok(g.value(out)[0])
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coords_checked: 0,
    };
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let n = params.get(id).numel();
        let stride = match opts.max_coords_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = params.get(id).data[i];
            probe.get_mut(id).data[i] = orig + opts.eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data[i] = orig - opts.eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let tape = analytic.param(id).map_or(0.0, |g| g[i]);
            let err = relative_error(tape, numeric);
            report.coords_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_has_zero_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.7]));
        let rep = grad_check(
            |g| Ok(g.param(id)),
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_relative_error < 1e-9, "{rep:?}");
    }

    #[test]
    fn sum_of_squares_gradient_is_2x() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::uniform(&[3, 4], 2.0, &mut rng));
        let f = |g: &mut Graph| {
            let x = g.param(id);
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        };
        let rep = grad_check(f, &store, GradCheckOptions::default()).unwrap();
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");

        let mut g = Graph::new(&store);
        let out = f(&mut g).unwrap();
        let grads = g.backward(out).unwrap();
        for (gv, xv) in grads.param(id).unwrap().iter().zip(&store.get(id).data) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn non_scalar_output_is_an_argument_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, 2.0]));
        let err = grad_check(|g| Ok(g.param(id)), &store, GradCheckOptions::default()).unwrap_err();
        assert!(err.to_string().contains("scalar"));
    }
}
