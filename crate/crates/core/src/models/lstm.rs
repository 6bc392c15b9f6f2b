//! LSTM encoders-decoders.
//!
//! Two encoder LSTMs read the speed and position sequences. Their final
//! hidden and cell states are concatenated along the feature axis and
//! projected back to `D`, giving the initial state of both decoder LSTMs.
//! The speed decoder starts from the last observed speed and feeds back its
//! own predictions; the action decoder consumes the same input stream.

use crate::autodiff::{Graph, ParameterSet, TensorError, Var};

use super::attention::linear;
use super::{ModelConfig, ModelError, WindowBatch};

/// Per-cell parameter names, in gate order input, forget, output, candidate.
pub const LSTM_GATE_PARAMS: [&str; 12] = [
    "w_xi", "w_hi", "b_i", "w_xf", "w_hf", "b_f", "w_xo", "w_ho", "b_o", "w_xc", "w_hc", "b_c",
];

/// Tape handles for one LSTM cell; arrays are indexed input, forget, output, candidate.
#[derive(Debug, Clone, Copy)]
pub struct LstmCellVars {
    pub w_x: [Var; 4],
    pub w_h: [Var; 4],
    pub b: [Var; 4],
}

impl LstmCellVars {
    pub fn load(g: &mut Graph, params: &ParameterSet, prefix: &str) -> Result<Self, TensorError> {
        let mut load = |kind: &str| -> Result<[Var; 4], TensorError> {
            let mut out = Vec::with_capacity(4);
            for gate in ["i", "f", "o", "c"] {
                let name = match kind {
                    "b" => format!("{prefix}.b_{gate}"),
                    k => format!("{prefix}.{k}{gate}"),
                };
                out.push(g.param(params, &name)?);
            }
            Ok([out[0], out[1], out[2], out[3]])
        };
        Ok(Self {
            w_x: load("w_x")?,
            w_h: load("w_h")?,
            b: load("b")?,
        })
    }
}

/// One LSTM step on row-vector inputs `x [B, in]`, `h_prev`, `c_prev [B, D]`.
///
/// ```text
/// i = σ(x·W_xi + h·W_hi + b_i)    f = σ(x·W_xf + h·W_hf + b_f)
/// o = σ(x·W_xo + h·W_ho + b_o)    c̃ = tanh(x·W_xc + h·W_hc + b_c)
/// c' = f ⊙ c + i ⊙ c̃              h' = o ⊙ tanh(c')
/// ```
pub fn lstm_cell(
    g: &mut Graph,
    cell: &LstmCellVars,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var), TensorError> {
    let mut pre = [x; 4];
    for k in 0..4 {
        let a = g.matmul(x, cell.w_x[k])?;
        let b = g.matmul(h_prev, cell.w_h[k])?;
        let s = g.add(a, b)?;
        pre[k] = g.add_bias(s, cell.b[k])?;
    }
    let i = g.sigmoid(pre[0])?;
    let f = g.sigmoid(pre[1])?;
    let o = g.sigmoid(pre[2])?;
    let cand = g.tanh(pre[3])?;
    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

fn load_stack(
    g: &mut Graph,
    params: &ParameterSet,
    prefix: &str,
    layers: usize,
) -> Result<Vec<LstmCellVars>, TensorError> {
    (0..layers)
        .map(|l| LstmCellVars::load(g, params, &format!("{prefix}.l{l}")))
        .collect()
}

fn step_stack(g: &mut Graph, cells: &[LstmCellVars], x: Var, states: &mut [(Var, Var)]) -> Result<Var, TensorError> {
    let mut input = x;
    for (cell, state) in cells.iter().zip(states.iter_mut()) {
        let (h, c) = lstm_cell(g, cell, input, state.0, state.1)?;
        *state = (h, c);
        input = h;
    }
    Ok(input)
}

/// Unrolls a stacked encoder over `inputs [B, L, 4]` and returns the final
/// `(h, c)` of every layer.
pub fn lstm_encode(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    prefix: &str,
    inputs: Var,
) -> Result<Vec<(Var, Var)>, ModelError> {
    let shape = g.shape(inputs).to_vec();
    let (b, len, feat) = (shape[0], shape[1], shape[2]);
    let d = cfg.embed_dim;
    let cells = load_stack(g, params, prefix, cfg.num_layers)?;
    let zero = g.constant_from(vec![b, d], vec![0.0; b * d])?;
    let mut states = vec![(zero, zero); cfg.num_layers];
    for t in 0..len {
        let x = g.slice(inputs, 1, t, 1)?;
        let x = g.reshape(x, vec![b, feat])?;
        step_stack(g, &cells, x, &mut states)?;
    }
    Ok(states)
}

/// Unrolls both decoders for `horizon` steps from `init` states.
///
/// `first_input [B, 4]` is in network units. Returns speeds `[B, horizon, 4]`
/// in normalized units and logits `[B, horizon]`.
pub fn lstm_decode(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    init: &[(Var, Var)],
    first_input: Var,
    horizon: usize,
) -> Result<(Var, Var), ModelError> {
    let b = g.shape(first_input)[0];
    let speed_cells = load_stack(g, params, "lstm.dec_speed", cfg.num_layers)?;
    let action_cells = load_stack(g, params, "lstm.dec_action", cfg.num_layers)?;
    let sw = g.param(params, "lstm.dec_speed.out.w")?;
    let sb = g.param(params, "lstm.dec_speed.out.b")?;
    let aw = g.param(params, "lstm.dec_action.out.w")?;
    let ab = g.param(params, "lstm.dec_action.out.b")?;

    let mut speed_states = init.to_vec();
    let mut action_states = init.to_vec();
    let mut x = first_input;
    let mut speeds = Vec::with_capacity(horizon);
    let mut logits = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let hs = step_stack(g, &speed_cells, x, &mut speed_states)?;
        let ha = step_stack(g, &action_cells, x, &mut action_states)?;
        let s = linear(g, hs, sw, sb)?;
        let a = linear(g, ha, aw, ab)?;
        speeds.push(g.reshape(s, vec![b, 1, 4])?);
        logits.push(a);
        x = s;
    }
    let speed = g.concat(&speeds, 1)?;
    let speed = g.scale(speed, 1.0 / cfg.speed_scale)?;
    let logits = g.concat(&logits, 1)?;
    Ok((speed, logits))
}

/// Full LSTM pass: encode, fuse, decode `horizon` steps.
pub fn lstm_forward(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    horizon: usize,
) -> Result<(Var, Var), ModelError> {
    let (b, o) = (batch.size, batch.obs_len);
    let speeds = g.constant_from(vec![b, o, 4], batch.speeds.clone())?;
    let positions = g.constant_from(vec![b, o, 4], batch.positions.clone())?;
    let enc_s = lstm_encode(g, params, cfg, "lstm.enc_speed", speeds)?;
    let enc_p = lstm_encode(g, params, cfg, "lstm.enc_pos", positions)?;

    let mut init = Vec::with_capacity(cfg.num_layers);
    for (l, ((hs, cs), (hp, cp))) in enc_s.into_iter().zip(enc_p).enumerate() {
        let hcat = g.concat(&[hs, hp], 1)?;
        let ccat = g.concat(&[cs, cp], 1)?;
        let w = g.param(params, &format!("lstm.fuse.l{l}.h.w"))?;
        let bias = g.param(params, &format!("lstm.fuse.l{l}.h.b"))?;
        let h0 = linear(g, hcat, w, bias)?;
        let w = g.param(params, &format!("lstm.fuse.l{l}.c.w"))?;
        let bias = g.param(params, &format!("lstm.fuse.l{l}.c.b"))?;
        let c0 = linear(g, ccat, w, bias)?;
        init.push((h0, c0));
    }
    let first = g.constant_from(vec![b, 4], batch.last_speeds())?;
    lstm_decode(g, params, cfg, &init, first, horizon)
}
