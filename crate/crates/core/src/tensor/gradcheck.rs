//! Central finite-difference validation of tape gradients.

use rand::Rng;

use super::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that coordinates whose
/// true gradient is (numerically) zero compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares tape gradients of `loss` with extrapolated central differences
/// on up to `coords` random coordinates of every parameter tensor. Perturbed
/// evaluations keep the expectile branches of the unperturbed tape, so the
/// numeric side differentiates the same piece of a piecewise loss that the
/// tape does.
pub fn check_gradients<F>(store: &ParamStore, coords: usize, floor: f64, rng: &mut impl Rng, loss: F) -> GradCheck
where
    F: Fn(&mut Graph, &ParamStore) -> Var,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    let grads = g.backward(l);
    let branches = g.branches().to_vec();
    let eval = |s: &ParamStore| {
        let mut g = Graph::replaying(branches.clone());
        let l = loss(&mut g, s);
        g.value(l).item()
    };
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = store.clone();
    for id in store.ids() {
        let len = store.get(id).data().len();
        let picks: Vec<usize> = if len <= coords {
            (0..len).collect()
        } else {
            (0..coords).map(|_| rng.random_range(0..len)).collect()
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            let numeric = numeric_derivative(|step| {
                probe.get_mut(id).data_mut()[k] = orig + step;
                let plus = eval(&probe);
                probe.get_mut(id).data_mut()[k] = orig - step;
                let minus = eval(&probe);
                (plus, minus)
            });
            probe.get_mut(id).data_mut()[k] = orig;
            let analytic = grads.get(id).map_or(0.0, |m| m.data()[k]);
            let err = relative_error(analytic, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), k, analytic, numeric));
                }
            }
        }
    }
    report
}

/// Derivative at 0 of a function given as `f(step) -> (f(+step), f(-step))`.
///
/// Central differences on steps `1e-2, 1e-3, ..., 1e-8`, each adjacent pair
/// Richardson-combined to cancel the `h^2` term. The estimate returned is the
/// one whose disagreement with its finer neighbour, plus the roundoff bound
/// of that neighbour's smallest step, is least. Large steps suffer truncation
/// error and small ones roundoff; the choice never looks at an analytic value.
pub fn numeric_derivative(mut f: impl FnMut(f64) -> (f64, f64)) -> f64 {
    const RUNGS: usize = 7;
    let mut diff = [0.0f64; RUNGS];
    let mut noise = [0.0f64; RUNGS];
    for i in 0..RUNGS {
        let h = 10f64.powi(-(i as i32) - 2);
        let (plus, minus) = f(h);
        diff[i] = (plus - minus) / (2.0 * h);
        noise[i] = 64.0 * f64::EPSILON * plus.abs().max(minus.abs()) / h;
    }
    let rich: Vec<f64> = (0..RUNGS - 1).map(|i| (100.0 * diff[i + 1] - diff[i]) / 99.0).collect();
    let mut best = rich[0];
    let mut best_err = f64::INFINITY;
    for i in 0..RUNGS - 2 {
        let err = (rich[i] - rich[i + 1]).abs() + noise[i + 2];
        if err < best_err {
            best_err = err;
            best = rich[i];
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn recovers_smooth_derivatives() {
        for x in [-2.0f64, 0.3, 1.0, 4.0] {
            let d = numeric_derivative(|h| ((x + h).sin(), (x - h).sin()));
            assert!((d - x.cos()).abs() < 1e-11, "{x}: {d}");
        }
    }

    #[test]
    fn expectile_kink_inside_the_stencil_is_not_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::from_vec(1, 3, vec![1e-7, -2e-7, 0.5]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = check_gradients(&store, 3, 1e-9, &mut rng, |g, p| {
            let x = g.param(p, id);
            let c = g.constant(Matrix::from_vec(1, 3, vec![3.0, 3.0, 3.0]));
            let y = g.mul(x, c);
            let e = g.expectile(y, 0.9);
            g.sum(e)
        });
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn a_wrong_tape_gradient_is_reported() {
        let mut store = ParamStore::new();
        let id = store.add("x", Matrix::from_vec(1, 2, vec![0.7, -1.3]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // x * sg[x] has tape gradient x but true derivative 2x
        let r = check_gradients(&store, 2, 1e-9, &mut rng, |g, p| {
            let x = g.param(p, id);
            let c = g.detach(x);
            let y = g.mul(x, c);
            g.sum(y)
        });
        assert!((r.max_rel_error - 0.5).abs() < 1e-8, "{r:?}");
    }
}
