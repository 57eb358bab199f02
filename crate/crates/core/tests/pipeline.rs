use probreg::sim::{generate_sequence, Scenario};
use probreg::tracker::{evaluate, metrics_from_ious, run_sequence, TrackerConfig};
use probreg::Error;
use proptest::prelude::*;

#[test]
fn sequences_are_reproducible_from_the_seed() {
    let a = generate_sequence(&Scenario::distractor(1, 17)).unwrap();
    let b = generate_sequence(&Scenario::distractor(1, 17)).unwrap();
    assert_eq!(a.frames, b.frames);
    let c = generate_sequence(&Scenario::distractor(1, 18)).unwrap();
    assert_ne!(a.frames[0].features, c.frames[0].features);
}

#[test]
fn evaluation_conventions() {
    let m = metrics_from_ious(&[0.6]).unwrap();
    assert_eq!((m.op_at(50), m.op_at(75)), (1.0, 0.0));
    let perfect = metrics_from_ious(&[1.0; 7]).unwrap();
    assert!((perfect.auc - 100.0 / 101.0).abs() < 1e-15);

    let seq = generate_sequence(&Scenario::static_noiseless(5)).unwrap();
    let gt: Vec<[f64; 4]> = seq.frames.iter().map(|f| f.ground_truth.unwrap()).collect();
    assert_eq!(evaluate(&seq, &gt).unwrap(), perfect_for(5));
    assert!(matches!(evaluate(&seq, &gt[..3]), Err(Error::Dimension(_))));
}

fn perfect_for(n: usize) -> probreg::tracker::Metrics {
    metrics_from_ious(&vec![1.0; n]).unwrap()
}

#[test]
fn tracked_static_scene_reports_the_ground_truth() {
    let seq = generate_sequence(&Scenario::static_noiseless(15)).unwrap();
    let run = run_sequence(&seq, &TrackerConfig::default()).unwrap();
    assert!(run.missing.iter().all(|&m| !m));
    assert!(run.ious.iter().flatten().all(|&v| v >= 0.99));
    assert_eq!(run.trace_csv().lines().count(), 16);
}

proptest! {
    #[test]
    fn op_curve_is_monotone_and_auc_bounded(ious in prop::collection::vec(0.0f64..=1.0, 1..50)) {
        let m = metrics_from_ious(&ious).unwrap();
        prop_assert_eq!(m.op.len(), 101);
        prop_assert!(m.op.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!((0.0..=1.0).contains(&m.auc));
        let direct = (0..=100)
            .map(|k| ious.iter().filter(|&&v| v > k as f64 / 100.0).count() as f64 / ious.len() as f64)
            .sum::<f64>()
            / 101.0;
        prop_assert!((m.auc - direct).abs() < 1e-12);
    }
}
