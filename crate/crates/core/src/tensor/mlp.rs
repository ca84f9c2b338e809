use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{gelu_matrix, layer_norm};
use super::{matrix::gemm, Graph, Matrix, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// Whether a forward pass binds parameters as trainable leaves or constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

/// Dense network: hidden layers are `linear -> GELU -> [layer norm]`, the
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    in_dim: usize,
    out_dim: usize,
    layers: Vec<Layer>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        layer_norm: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_dim;
        let widths: Vec<usize> = hidden.iter().copied().chain(Some(out_dim)).collect();
        for (i, &w) in widths.iter().enumerate() {
            let last = i + 1 == widths.len();
            let wid = store.add_glorot(format!("{name}.l{i}.w"), prev, w, rng);
            let bid = store.add(format!("{name}.l{i}.b"), Matrix::zeros(1, w));
            let norm = (!last && layer_norm).then(|| {
                (
                    store.add(format!("{name}.l{i}.ln_gain"), Matrix::filled(1, w, 1.0)),
                    store.add(format!("{name}.l{i}.ln_bias"), Matrix::zeros(1, w)),
                )
            });
            layers.push(Layer { w: wid, b: bid, norm });
            prev = w;
        }
        Mlp {
            in_dim,
            out_dim,
            layers,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Parameter ids of every layer, in order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| {
                let mut v = vec![l.w, l.b];
                if let Some((g, b)) = l.norm {
                    v.extend([g, b]);
                }
                v
            })
            .collect()
    }

    /// Sets every parameter of this network to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn check_width(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim {
            return Err(Error::usage(format!(
                "network expects input width {}, got {cols}",
                self.in_dim
            )));
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, bind: Bind) -> Result<Var> {
        self.check_width(g.value(x).cols())?;
        let bind_param = |g: &mut Graph, id: ParamId| match bind {
            Bind::Train => g.param(store, id),
            Bind::Frozen => g.constant(store.get(id).clone()),
        };
        let mut h = x;
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = bind_param(g, layer.w);
            let b = bind_param(g, layer.b);
            h = g.linear(h, w, b);
            if i + 1 < n {
                h = g.gelu(h);
                if let Some((gain, bias)) = layer.norm {
                    let gain = bind_param(g, gain);
                    let bias = bind_param(g, bias);
                    h = g.layer_norm(h, gain, bias);
                }
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass; bit-identical to [`Mlp::forward`].
    pub fn eval(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.check_width(x.cols())?;
        let n = self.layers.len();
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = (store.get(layer.w), store.get(layer.b));
            let mut out = Matrix::zeros(h.rows(), w.cols());
            for r in 0..out.rows() {
                out.row_mut(r).copy_from_slice(b.data());
            }
            gemm(1.0, &h, false, w, false, 1.0, &mut out);
            h = out;
            if i + 1 < n {
                h = gelu_matrix(h);
                if let Some((gain, bias)) = layer.norm {
                    h = layer_norm(&h, store.get(gain).data(), store.get(bias).data()).0;
                }
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_network_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", 3, &[8, 8], 2, false, &mut rng);
        mlp.zero(&mut store);
        let out = mlp.eval(&store, &Matrix::filled(4, 3, 1.5)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", 3, &[], 3, true, &mut rng);
        *store.get_mut(mlp.param_ids()[0]) = Matrix::identity(3);
        let x = Matrix::from_vec(2, 3, vec![1., -2., 3., 0.5, 0., -1.]);
        assert_eq!(mlp.eval(&store, &x).unwrap(), x);
    }

    #[test]
    fn deterministic_and_tape_matches_eval() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "f", 5, &[16, 16], 3, true, &mut rng);
            (store, mlp)
        };
        let (s1, m1) = build();
        let (s2, m2) = build();
        let x = Matrix::from_vec(2, 5, (0..10).map(|i| i as f64 * 0.1 - 0.4).collect());
        let a = m1.eval(&s1, &x).unwrap();
        let b = m2.eval(&s2, &x).unwrap();
        assert_eq!(a, b);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = m1.forward(&mut g, &s1, xv, Bind::Train).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "f", 3, &[4], 1, true, &mut rng);
        assert!(matches!(mlp.eval(&store, &Matrix::zeros(1, 2)), Err(Error::Usage(_))));
    }
}
