//! Composite network blocks built from graph primitives: attention,
//! position-wise feedforward, and the LSTM cell. Gradients come for
//! free from the primitives' backward rules.

use super::{Graph, Tensor};
use crate::error::Error;
use crate::Result;

/// Scaled dot-product attention over batched sequences:
/// q `[B,T,dk]`, k `[B,T,dk]`, v `[B,T,dv]` -> `[B,T,dv]`.
pub fn scaled_dot_attention(g: &mut Graph, q: Tensor, k: Tensor, v: Tensor) -> Result<Tensor> {
    let dk = *g
        .shape(q)
        .last()
        .ok_or_else(|| Error::shape("attention on scalar"))? as f64;
    let kt = g.permute(k, vec![0, 2, 1])?;
    let scores = g.bmm(q, kt)?;
    let scaled = g.scale(scores, 1.0 / dk.sqrt());
    let attn = g.softmax(scaled)?;
    g.bmm(attn, v)
}

/// Multi-head self-attention: x `[B,T,D]` with square projections
/// wq/wk/wv/wo `[D,D]`, `heads` dividing D.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    heads: usize,
) -> Result<Tensor> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("multi_head_attention input {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape(format!("{heads} heads do not divide dim {d}")));
    }
    let dk = d / heads;
    let flat = g.reshape(x, vec![b * t, d])?;
    let split = |g: &mut Graph, w: Tensor| -> Result<Tensor> {
        let proj = g.matmul(flat, w)?;
        let seq = g.reshape(proj, vec![b, t, heads, dk])?;
        let headed = g.permute(seq, vec![0, 2, 1, 3])?;
        g.reshape(headed, vec![b * heads, t, dk])
    };
    let q = split(g, wq)?;
    let k = split(g, wk)?;
    let v = split(g, wv)?;
    let ctx = scaled_dot_attention(g, q, k, v)?;
    let merged = g.reshape(ctx, vec![b, heads, t, dk])?;
    let ordered = g.permute(merged, vec![0, 2, 1, 3])?;
    let flat_out = g.reshape(ordered, vec![b * t, d])?;
    let out = g.matmul(flat_out, wo)?;
    g.reshape(out, vec![b, t, d])
}

/// Position-wise feedforward applied identically at every position:
/// x `[B,T,D]`, w1 `[D,F]`, b1 `[F]`, w2 `[F,D]`, b2 `[D]`.
pub fn position_wise_ffn(
    g: &mut Graph,
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
) -> Result<Tensor> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("position_wise_ffn input {s:?}")));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    let flat = g.reshape(x, vec![b * t, d])?;
    let h = g.matmul(flat, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.relu(h);
    let out = g.matmul(h, w2)?;
    let out = g.add_bias(out, b2)?;
    g.reshape(out, vec![b, t, d])
}

/// Per-gate weights of one LSTM cell (input, forget, output, cell).
#[derive(Clone, Copy)]
pub struct LstmParams {
    pub wx_i: Tensor,
    pub wh_i: Tensor,
    pub b_i: Tensor,
    pub wx_f: Tensor,
    pub wh_f: Tensor,
    pub b_f: Tensor,
    pub wx_o: Tensor,
    pub wh_o: Tensor,
    pub b_o: Tensor,
    pub wx_g: Tensor,
    pub wh_g: Tensor,
    pub b_g: Tensor,
}

/// Standard LSTM cell: x `[B,Din]`, h/c `[B,Dh]` -> (h', c').
pub fn lstm_step(
    g: &mut Graph,
    x: Tensor,
    h: Tensor,
    c: Tensor,
    p: &LstmParams,
) -> Result<(Tensor, Tensor)> {
    let gate = |g: &mut Graph, wx: Tensor, wh: Tensor, b: Tensor| -> Result<Tensor> {
        let xp = g.matmul(x, wx)?;
        let hp = g.matmul(h, wh)?;
        let sum = g.add(xp, hp)?;
        g.add_bias(sum, b)
    };
    let i_pre = gate(g, p.wx_i, p.wh_i, p.b_i)?;
    let i = g.sigmoid(i_pre);
    let f_pre = gate(g, p.wx_f, p.wh_f, p.b_f)?;
    let f = g.sigmoid(f_pre);
    let o_pre = gate(g, p.wx_o, p.wh_o, p.b_o)?;
    let o = g.sigmoid(o_pre);
    let g_pre = gate(g, p.wx_g, p.wh_g, p.b_g)?;
    let cand = g.tanh(g_pre);

    let keep = g.mul_elem(f, c)?;
    let write = g.mul_elem(i, cand)?;
    let c_next = g.add(keep, write)?;
    let c_act = g.tanh(c_next);
    let h_next = g.mul_elem(o, c_act)?;
    Ok((h_next, c_next))
}
