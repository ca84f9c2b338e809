use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analogy::train::encode_rows;
use crate::tensor::{column_bilinear, Bind, Graph, Matrix, Mlp, ParamStore, Var};
use crate::Result;

/// `backbone(feature)` with `feature_i = <anchor(s) column i, disp(c) column i>`
/// where both modules emit a `b x p` matrix, stored row-major per sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BilinearHead {
    pub anchor: Mlp,
    pub disp: Mlp,
    pub backbone: Mlp,
    pub b: usize,
    pub p: usize,
}

/// One MLP on `[obs(s), conditioning]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonolithicHead {
    pub net: Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Bilinear(BilinearHead),
    Monolithic(MonolithicHead),
}

/// Widths shared by every head of an agent.
#[derive(Debug, Clone, Copy)]
pub(crate) struct HeadShape<'a> {
    pub obs_dim: usize,
    pub cond_dim: usize,
    pub out_dim: usize,
    pub b: usize,
    pub p: usize,
    pub component_hidden: &'a [usize],
    pub backbone_hidden: &'a [usize],
    pub monolithic_hidden: &'a [usize],
    pub layer_norm: bool,
}

impl Head {
    pub(crate) fn bilinear(store: &mut ParamStore, name: &str, shape: HeadShape, rng: &mut impl Rng) -> Self {
        let bp = shape.b * shape.p;
        let ln = shape.layer_norm;
        Head::Bilinear(BilinearHead {
            anchor: Mlp::new(store, &format!("{name}.anchor"), shape.obs_dim, shape.component_hidden, bp, ln, rng),
            disp: Mlp::new(store, &format!("{name}.disp"), shape.cond_dim, shape.component_hidden, bp, ln, rng),
            backbone: Mlp::new(store, &format!("{name}.backbone"), shape.p, shape.backbone_hidden, shape.out_dim, ln, rng),
            b: shape.b,
            p: shape.p,
        })
    }

    pub(crate) fn monolithic(store: &mut ParamStore, name: &str, shape: HeadShape, rng: &mut impl Rng) -> Self {
        Head::Monolithic(MonolithicHead {
            net: Mlp::new(
                store,
                &format!("{name}.net"),
                shape.obs_dim + shape.cond_dim,
                shape.monolithic_hidden,
                shape.out_dim,
                shape.layer_norm,
                rng,
            ),
        })
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Head::Bilinear(h) => h.backbone.out_dim(),
            Head::Monolithic(h) => h.net.out_dim(),
        }
    }

    pub fn networks(&self) -> Vec<&Mlp> {
        match self {
            Head::Bilinear(h) => vec![&h.anchor, &h.disp, &h.backbone],
            Head::Monolithic(h) => vec![&h.net],
        }
    }

    /// Tape forward for states `idx` (rows of `obs`) and conditioning rows `cond`.
    /// `full` is `obs` already on the tape when running state networks over the
    /// whole table is cheaper.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        obs: &Matrix,
        full: Option<Var>,
        idx: &[usize],
        cond: Var,
    ) -> Result<Var> {
        match self {
            Head::Bilinear(h) => {
                let a = encode_rows(g, &h.anchor, params, obs, full, idx)?;
                let d = h.disp.forward(g, params, cond, Bind::Train)?;
                let f = g.column_bilinear(a, d, h.p);
                h.backbone.forward(g, params, f, Bind::Train)
            }
            Head::Monolithic(h) => {
                let x = g.constant(obs.gather_rows(idx));
                let x = g.concat(&[x, cond]);
                h.net.forward(g, params, x, Bind::Train)
            }
        }
    }

    /// Tape-free forward on gathered observation rows.
    pub(crate) fn eval(&self, params: &ParamStore, obs_rows: &Matrix, cond: &Matrix) -> Result<Matrix> {
        match self {
            Head::Bilinear(h) => {
                let f = self.features(params, obs_rows, cond)?;
                h.backbone.eval(params, &f)
            }
            Head::Monolithic(h) => h.net.eval(params, &hstack(obs_rows, cond)),
        }
    }

    /// State-module outputs for every row of `obs`, for reuse across
    /// [`Head::eval_indexed`] calls; `None` for monolithic heads.
    pub(crate) fn anchor_table(&self, params: &ParamStore, obs: &Matrix) -> Result<Option<Matrix>> {
        match self {
            Head::Bilinear(h) => Ok(Some(h.anchor.eval(params, obs)?)),
            Head::Monolithic(_) => Ok(None),
        }
    }

    /// Tape-free forward for states `idx`; `table` is this head's
    /// [`Head::anchor_table`] over `obs` under the same parameters.
    pub(crate) fn eval_indexed(
        &self,
        params: &ParamStore,
        obs: &Matrix,
        table: Option<&Matrix>,
        idx: &[usize],
        cond: &Matrix,
    ) -> Result<Matrix> {
        match (self, table) {
            (Head::Bilinear(h), Some(t)) => {
                let d = h.disp.eval(params, cond)?;
                let f = column_bilinear(&t.gather_rows(idx), &d, h.p);
                h.backbone.eval(params, &f)
            }
            _ => self.eval(params, &obs.gather_rows(idx), cond),
        }
    }

    /// Bilinear feature rows (`p` columns); `None` for monolithic heads.
    pub(crate) fn features(&self, params: &ParamStore, obs_rows: &Matrix, cond: &Matrix) -> Result<Matrix> {
        match self {
            Head::Bilinear(h) => {
                let a = h.anchor.eval(params, obs_rows)?;
                let d = h.disp.eval(params, cond)?;
                Ok(column_bilinear(&a, &d, h.p))
            }
            Head::Monolithic(_) => Err(crate::Error::usage("monolithic heads have no bilinear features")),
        }
    }
}

pub(crate) fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), a.cols() + b.cols());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        row[..a.cols()].copy_from_slice(a.row(r));
        row[a.cols()..].copy_from_slice(b.row(r));
    }
    out
}
