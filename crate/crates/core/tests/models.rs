use pedcast_core::autodiff::{finite_diff_check, Graph, ParameterSet, Tensor, TensorError, Var};
use pedcast_core::models::{
    init_params, lstm_cell, lstm_forward, tf_decode, tf_encode, tf_forward, Forecaster, LstmCellVars, Model,
    ModelConfig, ModelKind, WindowBatch, LSTM_GATE_PARAMS,
};
use pedcast_core::seqdata::{reconstruct_positions, ActionLabel, BBox, ObservationWindow, SpeedVec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn window(rng: &mut ChaCha8Rng, o: usize, t: usize) -> ObservationWindow {
    let mut b = BBox::new(rng.random_range(0.3..0.6), rng.random_range(0.4..0.6), 0.05, 0.12).unwrap();
    let mut positions = Vec::new();
    let mut speeds = Vec::new();
    let mut all = Vec::new();
    for _ in 0..o + t {
        let s = SpeedVec::new(
            rng.random_range(-0.004..0.004),
            rng.random_range(-0.002..0.002),
            rng.random_range(-0.0005..0.0005),
            rng.random_range(-0.0005..0.0005),
        );
        b = b.advanced(&s);
        all.push((b, s));
    }
    for &(p, s) in &all[..o] {
        positions.push(p);
        speeds.push(s);
    }
    let target_speeds: Vec<SpeedVec> = all[o..].iter().map(|x| x.1).collect();
    let target_positions = reconstruct_positions(positions[o - 1], &target_speeds);
    ObservationWindow {
        positions,
        speeds,
        observed_actions: vec![ActionLabel::NotCrossing; o],
        target_speeds,
        target_positions,
        target_actions: (0..t)
            .map(|k| {
                if k % 2 == 0 {
                    ActionLabel::Crossing
                } else {
                    ActionLabel::NotCrossing
                }
            })
            .collect(),
        source_video_id: "vid".into(),
        source_track_id: "ped".into(),
        start_frame: 0,
    }
}

fn windows(seed: u64, n: usize, o: usize, t: usize) -> Vec<ObservationWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| window(&mut rng, o, t)).collect()
}

fn small(kind: ModelKind, o: usize, t: usize) -> ModelConfig {
    let mut cfg = ModelConfig::default_for(kind, o, t);
    cfg.embed_dim = 16;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.ff_dim = 32;
    cfg
}

fn batch(ws: &[ObservationWindow], cfg: &ModelConfig) -> WindowBatch {
    let refs: Vec<&ObservationWindow> = ws.iter().collect();
    WindowBatch::new(&refs, cfg.speed_scale).unwrap()
}

fn zero_all(params: &mut ParameterSet) {
    for i in 0..params.len() {
        params.tensor_mut(i).data_mut().fill(0.0);
    }
}

fn tensor_err(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid {
        op: "test",
        msg: e.to_string(),
    }
}

#[test]
fn output_shapes() {
    for kind in [ModelKind::TfEd, ModelKind::LstmEd] {
        let cfg = small(kind, 5, 3);
        let model = Model::new(cfg, 1).unwrap();
        let ws = windows(2, 4, 5, 3);
        let mut g = Graph::new();
        let (s, l) = model.forward_train(&mut g, &batch(&ws, &cfg)).unwrap();
        assert_eq!(g.shape(s), &[4, 3, 4]);
        assert_eq!(g.shape(l), &[4, 3]);
        let f = model.forecast(&ws[0], 3).unwrap();
        assert_eq!(f.horizon(), 3);
        assert_eq!(
            f.position_seq,
            reconstruct_positions(ws[0].last_position(), &f.speed_seq)
        );
        for (p, l) in f.action_probs.iter().zip(&f.action_labels) {
            assert!((0.0..=1.0).contains(p));
            assert_eq!(l.is_crossing(), *p >= 0.5);
        }
    }
}

#[test]
fn transformer_decoder_is_causal() {
    let (o, t) = (4, 8);
    let mut cfg = small(ModelKind::TfEd, o, t);
    cfg.num_layers = 2;
    let params = init_params(&cfg, 3).unwrap();
    let ws = windows(4, 2, o, t);
    let b = batch(&ws, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base: Vec<f64> = (0..2 * t * 4).map(|_| rng.random_range(-1.0..1.0)).collect();

    let run = |inputs: Vec<f64>| {
        let mut g = Graph::new();
        let target = g.constant_from(vec![2, t, 4], inputs).unwrap();
        let (s, l) = tf_forward(&mut g, &params, &cfg, &b, target).unwrap();
        (g.value(s).to_vec(), g.value(l).to_vec())
    };
    let (s0, l0) = run(base.clone());
    for j in 0..t {
        let mut perturbed = base.clone();
        for i in 0..2 {
            for k in j + 1..t {
                perturbed[(i * t + k) * 4..(i * t + k + 1) * 4].fill(0.0);
            }
        }
        let (s1, l1) = run(perturbed);
        for i in 0..2 {
            for k in 0..=j {
                let a = &s0[(i * t + k) * 4..(i * t + k + 1) * 4];
                let b = &s1[(i * t + k) * 4..(i * t + k + 1) * 4];
                assert!(
                    a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "speed step {k} changed for j={j}"
                );
                assert_eq!(l0[i * t + k].to_bits(), l1[i * t + k].to_bits());
            }
        }
        if j + 1 < t {
            assert_ne!(s0, s1, "perturbation after {j} had no effect");
        }
    }
}

#[test]
fn zero_parameters_give_half_probability() {
    for kind in [ModelKind::TfEd, ModelKind::LstmEd] {
        let cfg = small(kind, 4, 3);
        let mut model = Model::new(cfg, 0).unwrap();
        zero_all(&mut model.params);
        let ws = windows(6, 3, 4, 3);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        for f in model.forecast_batch(&refs, 3).unwrap() {
            assert!(f.action_probs.iter().all(|&p| p == 0.5));
            assert!(f.action_labels.iter().all(|l| l.is_crossing()));
        }
    }
}

fn cell_params(d: usize, input: usize, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for name in LSTM_GATE_PARAMS {
        let shape = if name.starts_with("w_x") {
            vec![input, d]
        } else if name.starts_with("w_h") {
            vec![d, d]
        } else {
            vec![d]
        };
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
        p.insert(format!("cell.{name}"), Tensor::new(shape, data).unwrap())
            .unwrap();
    }
    p
}

fn run_cell(p: &ParameterSet, x: &[f64], h: &[f64], c: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let vars = LstmCellVars::load(&mut g, p, "cell").unwrap();
    let x = g.constant_from(vec![1, x.len()], x.to_vec()).unwrap();
    let h = g.constant_from(vec![1, d], h.to_vec()).unwrap();
    let c = g.constant_from(vec![1, d], c.to_vec()).unwrap();
    let (h, c) = lstm_cell(&mut g, &vars, x, h, c).unwrap();
    (g.value(h).to_vec(), g.value(c).to_vec())
}

#[test]
fn lstm_cell_at_zero_parameters() {
    let d = 3;
    let mut p = cell_params(d, 4, 1);
    zero_all(&mut p);
    let c_prev = [0.8, -1.2, 0.1];
    let (h, c) = run_cell(&p, &[0.3, 0.1, -0.2, 0.5], &[0.4, 0.2, -0.9], &c_prev, d);
    for k in 0..d {
        assert!((c[k] - 0.5 * c_prev[k]).abs() < 1e-15);
        assert!((h[k] - 0.5 * (0.5 * c_prev[k]).tanh()).abs() < 1e-15);
    }
    let (h, c) = run_cell(&p, &[0.3, 0.1, -0.2, 0.5], &[0.4, 0.2, -0.9], &[0.0; 3], d);
    assert!(h.iter().chain(&c).all(|&v| v == 0.0));
}

#[test]
fn lstm_cell_forget_gate_preserves_memory() {
    let d = 4;
    let mut p = cell_params(d, 4, 2);
    for (name, v) in [("cell.b_f", 10.0), ("cell.b_i", -10.0)] {
        p.get_mut(name).unwrap().data_mut().fill(v);
    }
    for name in ["cell.w_xf", "cell.w_hf", "cell.w_xi", "cell.w_hi"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let c_prev = [0.7, -0.3, 1.5, 0.0];
    let (_, c) = run_cell(&p, &[0.2, -0.4, 0.1, 0.9], &[0.1, 0.5, -0.5, 0.3], &c_prev, d);
    // independent oracle: f = σ(10), i = σ(−10), |c̃| ≤ 1
    let f = 1.0 / (1.0 + (-10f64).exp());
    let i = 1.0 / (1.0 + 10f64.exp());
    for k in 0..d {
        assert!((c[k] - c_prev[k]).abs() <= (1.0 - f) * c_prev[k].abs() + i + 1e-15);
        assert!((c[k] - c_prev[k]).abs() < 1e-4);
    }
}

#[test]
fn lstm_cell_gradient_matches_finite_differences() {
    let d = 3;
    let mut p = cell_params(d, 4, 3);
    let report = finite_diff_check(
        |g, params| {
            let vars = LstmCellVars::load(g, params, "cell")?;
            let x = g.constant_from(vec![2, 4], vec![0.3, -0.1, 0.7, 0.2, -0.5, 0.4, 0.0, 0.9])?;
            let h = g.constant_from(vec![2, d], vec![0.1, -0.6, 0.3, 0.2, 0.2, -0.4])?;
            let c = g.constant_from(vec![2, d], vec![0.5, 0.1, -0.8, 1.1, -0.2, 0.3])?;
            let (h, _) = lstm_cell(g, &vars, x, h, c)?;
            g.sum(h)
        },
        &mut p,
        1e-6,
        1e-5,
    )
    .unwrap();
    assert_eq!(report.params.len(), 12);
    assert!(report.passed, "{:?}", report.worst());
}

#[test]
fn lstm_stationary_input_with_zero_parameters_is_still() {
    let cfg = small(ModelKind::LstmEd, 4, 5);
    let mut model = Model::new(cfg, 0).unwrap();
    zero_all(&mut model.params);
    let b = BBox::new(0.4, 0.5, 0.05, 0.1).unwrap();
    let w = ObservationWindow {
        positions: vec![b; 4],
        speeds: vec![SpeedVec::new(0.0, 0.0, 0.0, 0.0); 4],
        observed_actions: vec![ActionLabel::NotCrossing; 4],
        target_speeds: vec![SpeedVec::new(0.0, 0.0, 0.0, 0.0); 5],
        target_positions: vec![b; 5],
        target_actions: vec![ActionLabel::NotCrossing; 5],
        source_video_id: "v".into(),
        source_track_id: "t".into(),
        start_frame: 0,
    };
    let f = model.forecast(&w, 5).unwrap();
    assert!(f.speed_seq.iter().all(|s| s.to_array() == [0.0; 4]));
    assert!(f.position_seq.iter().all(|p| *p == b));
}

#[test]
fn decoding_is_a_horizon_prefix() {
    for kind in [ModelKind::LstmEd, ModelKind::TfEd] {
        let cfg = small(kind, 4, 16);
        let model = Model::new(cfg, 8).unwrap();
        let ws = windows(9, 3, 4, 16);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        let long = model.forecast_batch(&refs, 16).unwrap();
        for h in [1, 5] {
            let short = model.forecast_batch(&refs, h).unwrap();
            for (s, l) in short.iter().zip(&long) {
                assert_eq!(&s.speed_seq[..], &l.speed_seq[..h], "{kind} h={h}");
                assert_eq!(&s.action_probs[..], &l.action_probs[..h]);
            }
        }
    }
}

#[test]
fn lstm_forward_prefix_on_the_tape() {
    let cfg = small(ModelKind::LstmEd, 4, 16);
    let params = init_params(&cfg, 4).unwrap();
    let ws = windows(10, 2, 4, 16);
    let b = batch(&ws, &cfg);
    let run = |h: usize| {
        let mut g = Graph::new();
        let (s, l) = lstm_forward(&mut g, &params, &cfg, &b, h).unwrap();
        (g.value(s).to_vec(), g.value(l).to_vec())
    };
    let (s16, l16) = run(16);
    let (s1, l1) = run(1);
    for i in 0..2 {
        assert_eq!(&s1[i * 4..i * 4 + 4], &s16[i * 64..i * 64 + 4]);
        assert_eq!(l1[i], l16[i * 16]);
    }
}

#[test]
fn single_step_decode_matches_teacher_forcing() {
    let cfg = small(ModelKind::TfEd, 4, 1);
    let mut model = Model::new(cfg, 11).unwrap();
    model
        .params
        .get_mut("tf.start_token")
        .unwrap()
        .data_mut()
        .copy_from_slice(&[0.3, -0.2, 0.1, 0.5]);
    let ws = windows(12, 3, 4, 1);
    let b = batch(&ws, &cfg);
    let mut g = Graph::new();
    let (s, l) = model.forward_train(&mut g, &b).unwrap();
    let (ds, dp) = model.decode_autoregressive(&b, 1).unwrap();
    assert_eq!(g.value(s), &ds[..]);
    for (z, p) in g.value(l).iter().zip(&dp) {
        assert_eq!(1.0 / (1.0 + (-z).exp()), *p);
    }
}

#[test]
fn inference_is_deterministic() {
    for kind in [ModelKind::TfEd, ModelKind::LstmEd] {
        let cfg = small(kind, 4, 6);
        let ws = windows(13, 5, 4, 6);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        let a = Model::new(cfg, 21).unwrap().forecast_batch(&refs, 6).unwrap();
        let b = Model::new(cfg, 21).unwrap().forecast_batch(&refs, 6).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn init_is_seeded() {
    for kind in [ModelKind::TfEd, ModelKind::LstmEd] {
        let cfg = small(kind, 4, 2);
        let a = init_params(&cfg, 1).unwrap();
        let b = init_params(&cfg, 1).unwrap();
        let c = init_params(&cfg, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().zip(c.iter()).any(|((_, x), (_, y))| x.data() != y.data()));
        assert!(a
            .iter()
            .filter(|(n, _)| n.ends_with(".b"))
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn lstm_parameter_count_matches_closed_form() {
    let cfg = ModelConfig::lstm_ed(15, 16);
    let d = cfg.embed_dim;
    assert_eq!(d, 256);
    let per_lstm = 4 * (4 * d + d * d + d);
    let fusion = 2 * (2 * d * d + d);
    let heads = (d * 4 + 4) + (d + 1);
    let expected = 4 * per_lstm + fusion + heads;
    assert_eq!(expected, 1_332_997);
    assert_eq!(init_params(&cfg, 0).unwrap().num_values(), expected);
}

#[test]
fn default_configs() {
    let tf = ModelConfig::tf_ed(15, 16);
    assert_eq!((tf.embed_dim, tf.num_layers, tf.num_heads, tf.ff_dim), (256, 3, 8, 512));
    let tf1 = ModelConfig::tf_ed(15, 1);
    assert_eq!((tf1.num_layers, tf1.num_heads), (1, 1));
    let lstm = ModelConfig::lstm_ed(15, 16);
    assert_eq!((lstm.embed_dim, lstm.num_layers), (256, 1));
    let mut bad = tf;
    bad.num_heads = 7;
    assert!(bad.validate().is_err());
    assert!(Model::new(bad, 0).is_err());
}

#[test]
fn encoder_memory_concatenates_sequences() {
    let cfg = small(ModelKind::TfEd, 5, 2);
    let params = init_params(&cfg, 1).unwrap();
    let ws = windows(1, 3, 5, 2);
    let mut g = Graph::new();
    let mem = tf_encode(&mut g, &params, &cfg, &batch(&ws, &cfg)).unwrap();
    assert_eq!(g.shape(mem), &[3, 10, 16]);
    let bad = g.constant_from(vec![3, 2, 3], vec![0.0; 18]).unwrap();
    assert!(tf_decode(&mut g, &params, &cfg, mem, bad).is_err());
}

fn model_loss(g: &mut Graph, params: &ParameterSet, cfg: &ModelConfig, b: &WindowBatch) -> Result<Var, TensorError> {
    let model = Model {
        config: *cfg,
        params: params.clone(),
    };
    let (s, l) = model.forward_train(g, b).map_err(tensor_err)?;
    let s = g.scale(s, cfg.speed_scale)?;
    let target: Vec<f64> = b.target_speeds.iter().map(|v| v * cfg.speed_scale).collect();
    let target = g.constant_from(vec![b.size, b.pred_len, 4], target)?;
    let a = g.constant_from(vec![b.size, b.pred_len], b.target_actions.clone())?;
    let m = g.mse(s, target)?;
    let c = g.bce_with_logits(l, a)?;
    g.add(m, c)
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for kind in [ModelKind::TfEd, ModelKind::LstmEd] {
        let cfg = small(kind, 4, 2);
        let mut params = init_params(&cfg, 17).unwrap();
        // non-zero biases and start token so every path carries signal
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for i in 0..params.len() {
            if params.tensor(i).shape().len() == 1 {
                for v in params.tensor_mut(i).data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
        let ws = windows(19, 2, 4, 2);
        let b = batch(&ws, &cfg);
        let report = finite_diff_check(|g, p| model_loss(g, p, &cfg, &b), &mut params, 1e-5, 1e-4).unwrap();
        assert!(report.passed, "{kind}: {:?}", report.worst());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn batch_permutation_permutes_outputs(seed in 0u64..1000, lstm in any::<bool>(), rot in 1usize..5) {
        let kind = if lstm { ModelKind::LstmEd } else { ModelKind::TfEd };
        let cfg = small(kind, 4, 3);
        let model = Model::new(cfg, seed).unwrap();
        let ws = windows(seed + 1, 5, 4, 3);
        let refs: Vec<&ObservationWindow> = ws.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot);
        let a = model.forecast_batch(&refs, 3).unwrap();
        let b = model.forecast_batch(&rotated, 3).unwrap();
        for (i, f) in b.iter().enumerate() {
            prop_assert_eq!(f, &a[(i + rot) % 5]);
        }
    }
}
