use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numcore::{NodeId, ParamId, ParamStore, Tape};

/// Recurrent cell family. Only the gated recurrent unit is built in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Gru,
}

/// Single-layer gated recurrent unit.
///
/// ```text
/// r  = σ(x·W_r + b_r + h·U_r)
/// u  = σ(x·W_u + b_u + h·U_u)
/// n  = tanh(x·W_n + b_n + r ⊙ (h·U_n))
/// h' = n + u ⊙ (h − n)
/// ```
///
/// The three gate blocks are stored side by side in one `[in, 3H]` input
/// matrix, one `[1, 3H]` bias and one `[H, 3H]` recurrent matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    w_in: ParamId,
    bias: ParamId,
    w_hidden: ParamId,
}

impl RecurrentCell {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w_in = store.add_uniform(format!("{prefix}.w_in"), input_dim, 3 * hidden_dim, rng);
        let bias = store.add(
            format!("{prefix}.bias"),
            crate::numcore::Tensor::zeros(&[1, 3 * hidden_dim]),
        );
        let w_hidden = store.add_uniform(format!("{prefix}.w_hidden"), hidden_dim, 3 * hidden_dim, rng);
        Self {
            kind: CellKind::Gru,
            input_dim,
            hidden_dim,
            w_in,
            bias,
            w_hidden,
        }
    }

    pub fn step(&self, tape: &mut Tape, x: NodeId, h: NodeId) -> Result<NodeId> {
        let hd = self.hidden_dim;
        let w_in = tape.param(self.w_in);
        let bias = tape.param(self.bias);
        let w_hidden = tape.param(self.w_hidden);
        let gx = tape.matmul(x, w_in)?;
        let gx = tape.add(gx, bias)?;
        let gh = tape.matmul(h, w_hidden)?;

        let gx_r = tape.slice_cols(gx, 0, hd)?;
        let gh_r = tape.slice_cols(gh, 0, hd)?;
        let r = tape.add(gx_r, gh_r)?;
        let r = tape.sigmoid(r)?;

        let gx_u = tape.slice_cols(gx, hd, hd)?;
        let gh_u = tape.slice_cols(gh, hd, hd)?;
        let u = tape.add(gx_u, gh_u)?;
        let u = tape.sigmoid(u)?;

        let gx_n = tape.slice_cols(gx, 2 * hd, hd)?;
        let gh_n = tape.slice_cols(gh, 2 * hd, hd)?;
        let gated = tape.mul(r, gh_n)?;
        let n = tape.add(gx_n, gated)?;
        let n = tape.tanh(n)?;

        let delta = tape.sub(h, n)?;
        let kept = tape.mul(u, delta)?;
        tape.add(n, kept)
    }

    /// Graph-free forward step used by decoding.
    pub fn step_values(&self, store: &ParamStore, x: &[f64], h: &[f64]) -> Vec<f64> {
        let hd = self.hidden_dim;
        let mut gx = vec![0.0; 3 * hd];
        vec_mat_acc(x, store.get(self.w_in).data(), &mut gx);
        for (g, b) in gx.iter_mut().zip(store.get(self.bias).data()) {
            *g += b;
        }
        let mut gh = vec![0.0; 3 * hd];
        vec_mat_acc(h, store.get(self.w_hidden).data(), &mut gh);
        (0..hd)
            .map(|j| {
                let r = crate::numcore::sigmoid(gx[j] + gh[j]);
                let u = crate::numcore::sigmoid(gx[hd + j] + gh[hd + j]);
                let n = (gx[2 * hd + j] + r * gh[2 * hd + j]).tanh();
                n + u * (h[j] - n)
            })
            .collect()
    }
}

/// `out += x · W` for a row vector `x` and row-major `W` with `out.len()` columns.
pub(crate) fn vec_mat_acc(x: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (p, xv) in x.iter().enumerate() {
        if *xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[p * n..(p + 1) * n]) {
            *o += xv * wv;
        }
    }
}
