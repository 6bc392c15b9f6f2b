use pedcast_core::metrics::{accuracy, ade, fde, score_forecasts, ConfusionCounts};
use pedcast_core::models::Forecast;
use pedcast_core::seqdata::{reconstruct_positions, ActionLabel, BBox, ImageSize, ObservationWindow, SpeedVec};
use proptest::prelude::*;

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..0.2f64, 0.01..0.4f64).prop_map(|(x, y, w, h)| BBox { x, y, w, h })
}

fn label() -> impl Strategy<Value = ActionLabel> {
    any::<bool>().prop_map(|b| {
        if b {
            ActionLabel::Crossing
        } else {
            ActionLabel::NotCrossing
        }
    })
}

fn pairs(max: usize) -> impl Strategy<Value = (Vec<BBox>, Vec<BBox>)> {
    (1..=max).prop_flat_map(|n| (prop::collection::vec(bbox(), n), prop::collection::vec(bbox(), n)))
}

proptest! {
    #[test]
    fn displacement_metrics_are_translation_invariant((p, g) in pairs(12), dx in -0.1..0.1f64, dy in -0.1..0.1f64) {
        let img = ImageSize::JAAD;
        let shift = |v: &[BBox]| v.iter().map(|b| BBox { x: b.x + dx, y: b.y + dy, ..*b }).collect::<Vec<_>>();
        let (a0, f0) = (ade(&p, &g, img).unwrap(), fde(&p, &g, img).unwrap());
        let (a1, f1) = (ade(&shift(&p), &shift(&g), img).unwrap(), fde(&shift(&p), &shift(&g), img).unwrap());
        prop_assert!(a0 >= 0.0 && f0 >= 0.0);
        prop_assert!((a0 - a1).abs() <= 1e-9 * a0.max(1.0));
        prop_assert!((f0 - f1).abs() <= 1e-9 * f0.max(1.0));
    }

    #[test]
    fn displacement_metrics_scale_with_image((p, g) in pairs(12), s in 0.1..10.0f64) {
        let img = ImageSize::new(640.0, 480.0);
        let big = ImageSize::new(640.0 * s, 480.0 * s);
        let (a0, a1) = (ade(&p, &g, img).unwrap(), ade(&p, &g, big).unwrap());
        prop_assert!((a1 - s * a0).abs() <= 1e-9 * a1.max(1.0));
        let (f0, f1) = (fde(&p, &g, img).unwrap(), fde(&p, &g, big).unwrap());
        prop_assert!((f1 - s * f0).abs() <= 1e-9 * f1.max(1.0));
    }

    #[test]
    fn single_step_ade_equals_fde((p, g) in pairs(1)) {
        let img = ImageSize::JAAD;
        prop_assert_eq!(ade(&p, &g, img).unwrap().to_bits(), fde(&p, &g, img).unwrap().to_bits());
    }

    #[test]
    fn accuracy_ignores_order(v in prop::collection::vec((label(), label()), 1..200), rot in 0usize..200) {
        let (p, g): (Vec<_>, Vec<_>) = v.iter().copied().unzip();
        let (a, c) = accuracy(&p, &g).unwrap();
        let mut r = v.clone();
        let k = rot % r.len();
        r.rotate_left(k);
        let (p2, g2): (Vec<_>, Vec<_>) = r.into_iter().unzip();
        let (a2, c2) = accuracy(&p2, &g2).unwrap();
        prop_assert_eq!(a.to_bits(), a2.to_bits());
        prop_assert_eq!(c, c2);
        prop_assert_eq!(c.total(), v.len() as u64);
    }
}

fn window(last: BBox, speeds: Vec<SpeedVec>, actions: Vec<ActionLabel>) -> ObservationWindow {
    ObservationWindow {
        positions: vec![last],
        speeds: vec![SpeedVec::default()],
        observed_actions: vec![ActionLabel::NotCrossing],
        target_positions: reconstruct_positions(last, &speeds),
        target_speeds: speeds,
        target_actions: actions,
        source_video_id: "v".into(),
        source_track_id: "t".into(),
        start_frame: 0,
    }
}

#[test]
fn report_is_consistent_and_order_free() {
    let last = BBox {
        x: 0.5,
        y: 0.5,
        w: 0.05,
        h: 0.1,
    };
    let mut ws = Vec::new();
    let mut fs = Vec::new();
    for i in 0..7 {
        let s = |k: usize| SpeedVec::new(0.001 * (i as f64 - 3.0), 0.0005 * k as f64, 0.0, 0.0);
        let truth: Vec<SpeedVec> = (0..4).map(s).collect();
        let acts = (0..4)
            .map(|k| {
                if (i + k) % 3 == 0 {
                    ActionLabel::Crossing
                } else {
                    ActionLabel::NotCrossing
                }
            })
            .collect();
        ws.push(window(last, truth, acts));
        fs.push(Forecast::new(
            last,
            vec![SpeedVec::default(); 4],
            vec![0.7 * (i % 2) as f64; 4],
        ));
    }
    let refs: Vec<&ObservationWindow> = ws.iter().collect();
    let r = score_forecasts(&fs, &refs, 4, ImageSize::JAAD).unwrap();
    assert_eq!(r.fde, *r.per_step_ade.last().unwrap());
    let mean_curve = r.per_step_ade.iter().sum::<f64>() / 4.0;
    assert!((r.ade - mean_curve).abs() < 1e-12);
    assert_eq!(r.counts.total(), 28);
    assert_eq!(r.accuracy, r.counts.accuracy().unwrap());

    let mut perm: Vec<usize> = (0..7).collect();
    perm.reverse();
    perm.swap(1, 4);
    let refs2: Vec<&ObservationWindow> = perm.iter().map(|&i| &ws[i]).collect();
    let fs2: Vec<Forecast> = perm.iter().map(|&i| fs[i].clone()).collect();
    let r2 = score_forecasts(&fs2, &refs2, 4, ImageSize::JAAD).unwrap();
    assert_eq!(r, r2);

    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("step,ade_px,accuracy\n1,"));
    assert!(r.to_table().contains("accuracy"));
    assert!(r.summary_csv().lines().nth(1).unwrap().starts_with("7,4,"));
}

#[test]
fn perfect_predictor_has_flat_zero_curve() {
    let last = BBox {
        x: 0.3,
        y: 0.6,
        w: 0.05,
        h: 0.1,
    };
    let speeds = vec![SpeedVec::new(0.002, 0.001, 0.0001, 0.0002); 6];
    let w = window(last, speeds.clone(), vec![ActionLabel::Crossing; 6]);
    let f = Forecast::new(last, speeds, vec![1.0; 6]);
    let r = score_forecasts(&[f], &[&w], 6, ImageSize::JAAD).unwrap();
    assert!(r.per_step_ade.iter().all(|&v| v == 0.0));
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(
        r.counts,
        ConfusionCounts {
            tp: 6,
            tn: 0,
            fp: 0,
            fn_: 0
        }
    );
}
