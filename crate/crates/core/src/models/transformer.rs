//! Transformer encoders-decoders.
//!
//! Position and speed sequences pass through separate encoder stacks. The
//! two `[B, O, D]` encoder outputs are concatenated along the sequence axis
//! into a `[B, 2·O, D]` memory that both decoders attend to. The speed and
//! action decoders share one target stream (a learned start token followed
//! by the shifted speeds) and differ only in their weights and output heads.

use crate::autodiff::{Graph, ParameterSet, TensorError, Var};

use super::attention::{causal_mask, linear, multi_head_attention, positional_encoding, MultiHeadVars};
use super::{ModelConfig, ModelError, WindowBatch};

fn add_positions(g: &mut Graph, x: Var, cfg: &ModelConfig) -> Result<Var, ModelError> {
    let shape = g.shape(x).to_vec();
    let (b, len) = (shape[0], shape[1]);
    let pe = positional_encoding(len, cfg.embed_dim)?;
    let pe = g.constant(pe)?;
    let pe = g.broadcast(pe, b)?;
    Ok(g.add(x, pe)?)
}

fn layer_norm(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let gamma = g.param(params, &format!("{prefix}.g"))?;
    let beta = g.param(params, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

fn feed_forward(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let w1 = g.param(params, &format!("{prefix}.w1"))?;
    let b1 = g.param(params, &format!("{prefix}.b1"))?;
    let w2 = g.param(params, &format!("{prefix}.w2"))?;
    let b2 = g.param(params, &format!("{prefix}.b2"))?;
    let h = linear(g, x, w1, b1)?;
    let h = g.relu(h)?;
    linear(g, h, w2, b2)
}

fn embed(g: &mut Graph, params: &ParameterSet, prefix: &str, x: Var) -> Result<Var, TensorError> {
    let w = g.param(params, &format!("{prefix}.embed.w"))?;
    let b = g.param(params, &format!("{prefix}.embed.b"))?;
    linear(g, x, w, b)
}

fn encoder_stack(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    prefix: &str,
    input: Var,
) -> Result<Var, ModelError> {
    let x = embed(g, params, prefix, input)?;
    let mut x = add_positions(g, x, cfg)?;
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.layer{l}");
        let attn = MultiHeadVars::load(g, params, &format!("{p}.attn"))?;
        let a = multi_head_attention(g, &attn, x, x, cfg.num_heads, None)?;
        let r = g.add(x, a)?;
        let h = layer_norm(g, params, &format!("{p}.ln1"), r)?;
        let f = feed_forward(g, params, &format!("{p}.ff"), h)?;
        let r = g.add(h, f)?;
        x = layer_norm(g, params, &format!("{p}.ln2"), r)?;
    }
    Ok(x)
}

fn decoder_stack(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    prefix: &str,
    memory: Var,
    target: Var,
) -> Result<Var, ModelError> {
    let len = g.shape(target)[1];
    let mask = causal_mask(len);
    let y = embed(g, params, prefix, target)?;
    let mut y = add_positions(g, y, cfg)?;
    for l in 0..cfg.num_layers {
        let p = format!("{prefix}.layer{l}");
        let sa = MultiHeadVars::load(g, params, &format!("{p}.self_attn"))?;
        let a = multi_head_attention(g, &sa, y, y, cfg.num_heads, Some(mask.clone()))?;
        let r = g.add(y, a)?;
        let h1 = layer_norm(g, params, &format!("{p}.ln1"), r)?;
        let ca = MultiHeadVars::load(g, params, &format!("{p}.cross_attn"))?;
        let c = multi_head_attention(g, &ca, h1, memory, cfg.num_heads, None)?;
        let r = g.add(h1, c)?;
        let h2 = layer_norm(g, params, &format!("{p}.ln2"), r)?;
        let f = feed_forward(g, params, &format!("{p}.ff"), h2)?;
        let r = g.add(h2, f)?;
        y = layer_norm(g, params, &format!("{p}.ln3"), r)?;
    }
    Ok(y)
}

/// Runs both encoders and returns the fused `[B, 2·O, D]` memory.
pub fn tf_encode(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &WindowBatch,
) -> Result<Var, ModelError> {
    let (b, o) = (batch.size, batch.obs_len);
    let speeds = g.constant_from(vec![b, o, 4], batch.speeds.clone())?;
    let positions = g.constant_from(vec![b, o, 4], batch.positions.clone())?;
    let enc_s = encoder_stack(g, params, cfg, "tf.enc_speed", speeds)?;
    let enc_p = encoder_stack(g, params, cfg, "tf.enc_pos", positions)?;
    Ok(g.concat(&[enc_s, enc_p], 1)?)
}

/// Runs both decoders over `target [B, L, 4]` (network units).
///
/// Returns speeds `[B, L, 4]` in normalized units and action logits `[B, L]`.
pub fn tf_decode(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    memory: Var,
    target: Var,
) -> Result<(Var, Var), ModelError> {
    let shape = g.shape(target).to_vec();
    if shape.len() != 3 || shape[2] != 4 {
        return Err(TensorError::Dimension {
            op: "tf_decode",
            lhs: shape,
            rhs: vec![0, 0, 4],
        }
        .into());
    }
    let (b, len) = (shape[0], shape[1]);

    let ds = decoder_stack(g, params, cfg, "tf.dec_speed", memory, target)?;
    let w = g.param(params, "tf.dec_speed.out.w")?;
    let bias = g.param(params, "tf.dec_speed.out.b")?;
    let s = linear(g, ds, w, bias)?;
    let speed = g.scale(s, 1.0 / cfg.speed_scale)?;

    let da = decoder_stack(g, params, cfg, "tf.dec_action", memory, target)?;
    let w = g.param(params, "tf.dec_action.out.w")?;
    let bias = g.param(params, "tf.dec_action.out.b")?;
    let a = linear(g, da, w, bias)?;
    let logits = g.reshape(a, vec![b, len])?;
    Ok((speed, logits))
}

/// Teacher-forcing target stream `[B, T, 4]`: start token, then ground-truth
/// speeds `1..T` shifted right by one.
pub fn tf_teacher_inputs(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &WindowBatch,
) -> Result<Var, ModelError> {
    let (b, t) = (batch.size, batch.pred_len);
    let start = g.param(params, "tf.start_token")?;
    let start = g.broadcast(start, b)?;
    let start = g.reshape(start, vec![b, 1, 4])?;
    if t == 1 {
        return Ok(start);
    }
    let shifted: Vec<f64> = (0..b)
        .flat_map(|i| {
            batch.target_speeds[i * t * 4..(i * t + t - 1) * 4]
                .iter()
                .map(|v| v * cfg.speed_scale)
        })
        .collect();
    let shifted = g.constant_from(vec![b, t - 1, 4], shifted)?;
    Ok(g.concat(&[start, shifted], 1)?)
}

/// Full transformer pass for an explicit target stream.
pub fn tf_forward(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    target_inputs: Var,
) -> Result<(Var, Var), ModelError> {
    let memory = tf_encode(g, params, cfg, batch)?;
    tf_decode(g, params, cfg, memory, target_inputs)
}

/// Feeds the decoder its own speed predictions one step at a time.
///
/// Step `k` decodes `[start, ŝ₁, …, ŝₖ]` and keeps the output at position `k`.
/// Returns speeds `[B·horizon·4]` and logits `[B·horizon]`.
pub(crate) fn tf_autoregressive(
    g: &mut Graph,
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &WindowBatch,
    horizon: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let b = batch.size;
    let memory = tf_encode(g, params, cfg, batch)?;
    let memory = g.tensor(memory);
    let start = params
        .get("tf.start_token")
        .ok_or_else(|| TensorError::UnknownParameter("tf.start_token".into()))?
        .data()
        .to_vec();

    // per-window decoder input in network units, grown by one step per iteration
    let mut streams: Vec<Vec<f64>> = vec![start; b];
    let mut speeds = vec![0.0; b * horizon * 4];
    let mut logits = vec![0.0; b * horizon];
    for k in 0..horizon {
        let mut step = Graph::new();
        let mem = step.constant(memory.clone())?;
        let flat: Vec<f64> = streams.iter().flatten().copied().collect();
        let target = step.constant_from(vec![b, k + 1, 4], flat)?;
        let (s, l) = tf_decode(&mut step, params, cfg, mem, target)?;
        let sv = step.value(s);
        let lv = step.value(l);
        for i in 0..b {
            let out = &sv[(i * (k + 1) + k) * 4..(i * (k + 1) + k + 1) * 4];
            speeds[(i * horizon + k) * 4..(i * horizon + k + 1) * 4].copy_from_slice(out);
            logits[i * horizon + k] = lv[i * (k + 1) + k];
            streams[i].extend(out.iter().map(|v| v * cfg.speed_scale));
        }
    }
    Ok((speeds, logits))
}
