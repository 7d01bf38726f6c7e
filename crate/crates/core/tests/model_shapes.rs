use std::time::{Duration, Instant};

use agegrad::model::{self, count_parameters, param_layout, BridgeMode, ModelSpec, ParamStore, Variant};
use agegrad::{Error, Graph, Tensor};

fn count(spec: &ModelSpec, prefix: &str) -> usize {
    param_layout(spec)
        .iter()
        .filter(|d| d.name.starts_with(prefix))
        .map(|d| d.shape.iter().product::<usize>())
        .sum()
}

fn image(spec: &ModelSpec, batch: usize) -> Tensor<f32> {
    let n = batch * 3 * spec.input_size * spec.input_size;
    Tensor::new(
        vec![batch, 3, spec.input_size, spec.input_size],
        (0..n).map(|i| ((i * 7919) % 255) as f32 / 127.5 - 1.0).collect(),
    )
    .unwrap()
}

#[test]
fn default_hybrid_intermediate_shapes() {
    let spec = ModelSpec::default();
    let params = ParamStore::init(&spec, 0).unwrap();
    let t0 = Instant::now();
    let mut g = Graph::<f32>::new();
    params.load_into(&mut g).unwrap();
    let x = g.input(image(&spec, 1));
    let out = model::forward(&mut g, &spec, x).unwrap();
    let elapsed = t0.elapsed();
    assert_eq!(g.shape(out.features.unwrap()), &[1, 768, 7, 7]);
    assert_eq!(g.shape(out.tokens.unwrap()), &[1, 196, 192]);
    assert_eq!(g.shape(out.encoded.unwrap()), &[1, 196, 192]);
    assert_eq!(g.shape(out.prediction).iter().product::<usize>(), 1);
    assert!(g.data(out.prediction)[0].is_finite());
    assert!(elapsed < Duration::from_secs(30), "forward took {elapsed:?}");
}

/// Published totals: ConvNeXt-T 28,589,128 with a 1000-way classifier and
/// final norm; ViT-Ti 5,717,416 with patch embedding, class token,
/// 197 positions and a 1000-way classifier.
#[test]
fn parameter_counts_match_reference_architectures() {
    let spec = ModelSpec::default();
    assert_eq!(count(&spec, "backbone."), 28_589_128 - (768 * 1000 + 1000) - 2 * 768);
    let vit_ti_extras = (16 * 16 * 3 * 192 + 192) + 192 + 197 * 192 + (192 * 1000 + 1000);
    assert_eq!(count(&spec, "encoder."), 5_717_416 - vit_ti_extras);
    assert_eq!(count(&spec, "head."), 192 * 256 + 256 + 256 + 1);
    assert_eq!(count(&ModelSpec { head_layers: 1, ..spec.clone() }, "head."), 193);
    assert_eq!(count_parameters(&spec), count(&spec, ""));
    assert_eq!(ParamStore::init(&spec, 3).unwrap().count(), count_parameters(&spec));
}

#[test]
fn every_variant_and_bridge_mode_predicts_one_age_per_image() {
    let base = ModelSpec::desk();
    let specs = [
        base.clone(),
        ModelSpec { bridge_mode: BridgeMode::Reshape, ..base.clone() },
        ModelSpec { variant: Variant::ConvNext, ..base.clone() },
        ModelSpec { variant: Variant::Vit, token_count: 16, ..base.clone() },
        ModelSpec { head_layers: 1, use_layer_scale: false, positional_embedding: false, ..base.clone() },
    ];
    for spec in specs {
        spec.validate().unwrap();
        let params = ParamStore::init(&spec, 1).unwrap();
        params.check_matches(&spec).unwrap();
        let p = model::predict(&spec, &params, &image(&spec, 3)).unwrap();
        assert_eq!(p.len(), 3, "{spec:?}");
        assert!(p.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn batched_and_parallel_prediction_agree_with_single_images() {
    let spec = ModelSpec::reduced();
    let params = ParamStore::init(&spec, 5).unwrap();
    let batch = image(&spec, 4);
    let whole = model::predict(&spec, &params, &batch).unwrap();
    let chunked = model::predict_parallel(&spec, &params, &batch, 1).unwrap();
    assert_eq!(whole, chunked);
    let per = batch.len() / 4;
    for (i, &w) in whole.iter().enumerate() {
        let one = Tensor::new(vec![1, 3, 32, 32], batch.data()[i * per..(i + 1) * per].to_vec()).unwrap();
        assert_eq!(model::predict(&spec, &params, &one).unwrap(), vec![w]);
    }
}

#[test]
fn wrong_image_size_is_shape_error() {
    let spec = ModelSpec::reduced();
    let params = ParamStore::init(&spec, 0).unwrap();
    let bad = image(&ModelSpec::desk(), 1);
    assert!(matches!(model::predict(&spec, &params, &bad), Err(Error::Shape(_))));
}

#[test]
fn parameters_from_another_spec_are_rejected_by_name() {
    let params = ParamStore::init(&ModelSpec::reduced(), 0).unwrap();
    let other = ModelSpec { head_hidden: 48, ..ModelSpec::reduced() };
    let err = params.check_matches(&other).unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("head.fc1.weight"), "{err}");
}
