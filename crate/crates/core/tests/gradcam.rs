mod common;

use candle_core::{DType, Device, Tensor};
use deepguard::cam::{gradcam_map, AttentionMap, CamModel};
use deepguard::dataset::Label;
use deepguard::model::{ModelBundle, ModelConfig};
use deepguard::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::planted::{PlantedModel, LAYER};

fn random_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..3 * 224 * 224).map(|_| rng.random()).collect();
    Tensor::from_vec(data, (1, 3, 224, 224), &Device::Cpu).unwrap()
}

fn assert_normalized(map: &AttentionMap) {
    assert_eq!(map.heat.len(), 224 * 224);
    assert!(map.heat.iter().all(|v| (0.0..=1.0).contains(v)));
    let max = map.heat.iter().cloned().fold(0.0f32, f32::max);
    if map.degenerate {
        assert_eq!(max, 0.0);
    } else {
        assert_eq!(max, 1.0);
    }
}

#[test]
fn planted_dependence_is_localized() {
    let model = PlantedModel::new(1.0);
    for seed in 0..5 {
        let map = gradcam_map(&model, &random_image(seed), LAYER, Some(Label::Fake), "planted").unwrap();
        assert_normalized(&map);
        assert!(!map.degenerate);
        let mass = map.mass_in(0, 0, 112, 112);
        assert!(mass >= 0.5, "top-left quadrant holds {mass}");
    }
}

#[test]
fn constant_logit_gives_degenerate_map() {
    let model = PlantedModel::new(0.0);
    let map = gradcam_map(&model, &random_image(1), LAYER, None, "flat").unwrap();
    assert!(map.degenerate);
    assert!(map.heat.iter().all(|v| *v == 0.0));
    // the constant logit is -1, so the predicted class is real
    assert_eq!(map.target_class, Label::Real);
}

#[test]
fn detector_maps_are_normalized_and_deterministic() {
    let model = ModelBundle::new(ModelConfig::default(), DType::F32, &Device::Cpu).unwrap();
    let x = random_image(7);
    for layer in CamModel::cam_layers(&model) {
        for class in [Label::Real, Label::Fake] {
            let a = gradcam_map(&model, &x, &layer, Some(class), "s").unwrap();
            assert_normalized(&a);
            let b = gradcam_map(&model, &x, &layer, Some(class), "s").unwrap();
            assert_eq!(a, b);
        }
    }
    let predicted = gradcam_map(&model, &x, &model.default_layer(), None, "s").unwrap();
    let logit = model.forward(&x).unwrap().logits.to_vec1::<f32>().unwrap()[0];
    assert_eq!(predicted.target_class, if logit >= 0.0 { Label::Fake } else { Label::Real });
}

#[test]
fn unknown_layer_is_a_config_error() {
    let model = ModelBundle::new(
        ModelConfig {
            use_attention_companion: false,
            ..ModelConfig::default()
        },
        DType::F32,
        &Device::Cpu,
    )
    .unwrap();
    let err = gradcam_map(&model, &random_image(0), "attention.block", None, "s").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(err.to_string().contains("trunk.stem"));
}
