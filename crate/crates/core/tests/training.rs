use gaunet::data::{generate_dataset, Dataset, SynthConfig};
use gaunet::net::{build_model, predict_count, train, train_model, ConvKind, Model, NetworkConfig, TrainOptions};

fn dataset_loss(model: &Model, ds: &Dataset) -> f64 {
    ds.samples.iter().map(|s| model.loss(s).unwrap()).sum::<f64>() / ds.len() as f64
}

#[test]
fn two_hundred_steps_reduce_loss() {
    let ds = generate_dataset(&SynthConfig::default(), 50, 21, "s").unwrap();
    for kind in [ConvKind::Gaussian, ConvKind::Standard] {
        let cfg = NetworkConfig::tiny().with_kind(kind);
        let model = build_model(&cfg).unwrap();
        let before = dataset_loss(&model, &ds);
        let opts = TrainOptions {
            epochs: 16,
            ..TrainOptions::default()
        };
        let (state, _) = train_model(model, &ds, &opts, None).unwrap();
        assert!(state.step >= 200, "{} steps", state.step);
        let after = dataset_loss(&state.model, &ds);
        assert!(after < before, "{kind:?}: {before} -> {after}");
    }
}

#[test]
fn ten_dot_image_is_counted_within_bound() {
    let train_set = generate_dataset(&SynthConfig::default(), 200, 1, "train").unwrap();
    let (state, _) = train(&NetworkConfig::tiny(), &train_set, &TrainOptions::default(), None).unwrap();
    let ten = SynthConfig {
        count_min: 10,
        count_max: 10,
        ..SynthConfig::default()
    };
    let probe = generate_dataset(&ten, 3, 99, "ten").unwrap();
    let bound = 0.15 * train_set.mean_count();
    for s in &probe.samples {
        assert_eq!(s.annotations.len(), 10);
        let count = predict_count(&state.model, &s.image).unwrap();
        assert!((count - 10.0).abs() < bound, "{count} vs 10 (bound {bound})");
    }
}
