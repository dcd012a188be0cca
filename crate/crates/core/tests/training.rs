use dfr_core::harness::{generate_synthetic, SyntheticSpec};
use dfr_core::{evaluate, train, TrainConfig};

#[test]
fn unshifted_well_separated_domains_need_no_adaptation() {
    let spec = SyntheticSpec {
        samples_per_class: 150,
        separation: 10.0,
        shift_translation: 0.0,
        shift_rotation: 0.0,
        shift_scale: 1.0,
        label_noise: 0.0,
        seed: 2,
        ..SyntheticSpec::default()
    };
    let (source, target) = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        seed: 2,
        ..TrainConfig::default().with_toggles(false, false, false)
    };
    let (params, history) = train(&cfg, &source, &target).unwrap();
    let acc = evaluate(&params, &target).unwrap().accuracy;
    assert!(acc >= 0.99, "source-only accuracy {acc}");
    assert_eq!(history.epochs.len(), 5);
}

#[test]
fn full_method_runs_every_phase() {
    let spec = SyntheticSpec {
        samples_per_class: 40,
        seed: 4,
        ..SyntheticSpec::default()
    };
    let (source, target) = generate_synthetic(&spec).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        batch_size: 32,
        seed: 4,
        ..TrainConfig::default()
    };
    let (_, history) = train(&cfg, &source, &target).unwrap();
    assert_eq!(history.rounds.len(), 3);
    let thresholds: Vec<f64> = history.rounds.iter().map(|r| r.threshold).collect();
    assert_eq!(thresholds, [0.9, 0.6, 0.3]);
    for e in &history.epochs {
        assert!(e.registration_loss.is_some() && e.histogram_loss.is_some());
        assert!(e.source_loss.is_finite());
    }
}
