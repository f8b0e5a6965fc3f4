//! Layer building blocks shared by the encoders and the fusion stacks.

use crate::error::Result;
use crate::numeric::{Graph, Tensor, Var};
use crate::params::Binding;

/// `x W + b` with `x: n×d_in`, `W: d_in×d_out`, `b: d_out`.
pub fn affine(g: &mut Graph, x: Var, p: &Binding, prefix: &str) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add(xw, b)
}

/// Runs a GRU over the rows of `input: T×d_in` from a zero state. Returns
/// the hidden state for every position, indexed by position, so a reversed
/// run's `out[t]` has consumed rows `t..T`.
pub fn gru_sequence(
    g: &mut Graph,
    input: Var,
    p: &Binding,
    prefix: &str,
    reverse: bool,
) -> Result<Vec<Var>> {
    let w = p.var(&format!("{prefix}.w"))?;
    let u = p.var(&format!("{prefix}.u"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let hidden = g.value(u).shape()[0];
    let t_len = g.value(input).shape()[0];
    let mut h = g.constant(Tensor::zeros(&[hidden]));
    let mut out = vec![h; t_len];
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..t_len).rev())
    } else {
        Box::new(0..t_len)
    };
    for t in order {
        let x = g.row(input, t)?;
        h = g.gru_cell(x, h, w, u, b)?;
        out[t] = h;
    }
    Ok(out)
}

/// Bidirectional GRU: `T × 2h`, forward states then backward states.
pub fn bigru(g: &mut Graph, input: Var, p: &Binding, prefix: &str) -> Result<Var> {
    let fwd = gru_sequence(g, input, p, &format!("{prefix}.gru_fwd"), false)?;
    let bwd = gru_sequence(g, input, p, &format!("{prefix}.gru_bwd"), true)?;
    let fwd = g.stack_rows(&fwd)?;
    let bwd = g.stack_rows(&bwd)?;
    g.concat_last(&[fwd, bwd])
}

/// BiGRU followed by a ReLU fully-connected layer that fuses the two
/// directions back to the hidden size; shared by the sentence and video
/// encoders.
pub fn bigru_encoder(g: &mut Graph, input: Var, p: &Binding, prefix: &str) -> Result<Var> {
    let h = bigru(g, input, p, prefix)?;
    let fused = affine(g, h, p, &format!("{prefix}.fuse"))?;
    Ok(g.relu(fused))
}
