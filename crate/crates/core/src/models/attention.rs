use std::rc::Rc;

use crate::autodiff::{Graph, ParameterSet, Tensor, TensorError, Var};

use super::ModelError;

/// Sinusoidal position table of shape `[seq_len, dim]`.
///
/// Even columns hold `sin(t / 10000^(d/D))`, odd columns
/// `cos(t / 10000^((d−1)/D))`.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Result<Tensor, ModelError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(ModelError::Config(format!(
            "positional encoding needs an even dimension, got {dim}"
        )));
    }
    if seq_len == 0 {
        return Err(ModelError::Config("positional encoding needs seq_len ≥ 1".into()));
    }
    let mut data = vec![0.0; seq_len * dim];
    for t in 0..seq_len {
        for d in 0..dim {
            let pair = (d - d % 2) as f64;
            let angle = t as f64 / 10000f64.powf(pair / dim as f64);
            data[t * dim + d] = if d % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Ok(Tensor::new(vec![seq_len, dim], data)?)
}

/// Lower-triangular mask: query `i` may attend to keys `0..=i`.
pub fn causal_mask(len: usize) -> Rc<[bool]> {
    (0..len * len).map(|i| i % len <= i / len).collect::<Vec<_>>().into()
}

/// Scaled dot-product attention `softmax(QKᵀ/√d_k)·V` over batched `[B, L, d]` inputs.
///
/// Masked entries (`false`) get exactly zero weight; a row with no admissible
/// key is a contract error.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Rc<[bool]>>) -> Result<Var, TensorError> {
    let dk = *g.shape(q).last().unwrap();
    let scores = g.batch_matmul(q, k, true)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let weights = g.softmax_masked(scaled, mask)?;
    g.batch_matmul(weights, v, false)
}

/// Tape handles of one multi-head attention block.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl MultiHeadVars {
    pub fn load(g: &mut Graph, params: &ParameterSet, prefix: &str) -> Result<Self, TensorError> {
        let mut p = |n: &str| g.param(params, &format!("{prefix}.{n}"));
        Ok(Self {
            wq: p("wq")?,
            bq: p("bq")?,
            wk: p("wk")?,
            bk: p("bk")?,
            wv: p("wv")?,
            bv: p("bv")?,
            wo: p("wo")?,
            bo: p("bo")?,
        })
    }
}

pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Multi-head attention of `query [B, Lq, D]` over `memory [B, Lk, D]`.
///
/// `D` is split into `heads` blocks of width `D / heads`; each block runs
/// scaled dot-product attention and the concatenated result is projected
/// back to `D`.
pub fn multi_head_attention(
    g: &mut Graph,
    m: &MultiHeadVars,
    query: Var,
    memory: Var,
    heads: usize,
    mask: Option<Rc<[bool]>>,
) -> Result<Var, TensorError> {
    let dim = *g.shape(query).last().unwrap();
    let dk = dim / heads;
    let q = linear(g, query, m.wq, m.bq)?;
    let k = linear(g, memory, m.wk, m.bk)?;
    let v = linear(g, memory, m.wv, m.bv)?;
    let ctx = if heads == 1 {
        attention(g, q, k, v, mask)?
    } else {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 2, h * dk, dk)?;
            let kh = g.slice(k, 2, h * dk, dk)?;
            let vh = g.slice(v, 2, h * dk, dk)?;
            outs.push(attention(g, qh, kh, vh, mask.clone())?);
        }
        g.concat(&outs, 2)?
    };
    linear(g, ctx, m.wo, m.bo)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn pe_first_row_alternates() {
        let pe = positional_encoding(5, 8).unwrap();
        assert_eq!(&pe.data()[..8], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.data()[8] - 0.841471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(positional_encoding(4, 7).is_err());
    }

    #[test]
    fn single_key_returns_its_value() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 3, 2], &[1.0, -2.0, 0.3, 4.0, 9.0, 1.0])).unwrap();
        let k = g.constant(t(&[1, 1, 2], &[0.7, -0.1])).unwrap();
        let v = g.constant(t(&[1, 1, 3], &[5.0, 6.0, 7.0])).unwrap();
        let out = attention(&mut g, q, k, v, None).unwrap();
        for row in g.value(out).chunks(3) {
            assert_eq!(row, &[5.0, 6.0, 7.0]);
        }
    }

    #[test]
    fn zero_logits_average_values() {
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 2], &[1.0, 0.0])).unwrap();
        let k = g.constant(t(&[1, 3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 3.0])).unwrap();
        let v = g.constant(t(&[1, 3, 1], &[3.0, 6.0, 9.0])).unwrap();
        let out = attention(&mut g, q, k, v, None).unwrap();
        assert!((g.value(out)[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn two_key_hand_logits() {
        // q·k/√1 gives logits [ln 2, 0]
        let mut g = Graph::new();
        let q = g.constant(t(&[1, 1, 1], &[2f64.ln()])).unwrap();
        let k = g.constant(t(&[1, 2, 1], &[1.0, 0.0])).unwrap();
        let v = g.constant(t(&[1, 2, 2], &[3.0, -3.0, 6.0, 0.0])).unwrap();
        let out = attention(&mut g, q, k, v, None).unwrap();
        let expect = [2.0 / 3.0 * 3.0 + 1.0 / 3.0 * 6.0, 2.0 / 3.0 * -3.0];
        for (a, b) in g.value(out).iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(3);
        assert_eq!(&m[..], &[true, false, false, true, true, false, true, true, true]);
    }
}
