use std::sync::Arc;
use std::thread;

use bcnn::engine::{ConvTiling, LayerOutput};
use bcnn::oracle::{self, reference_forward};
use bcnn::{preproc, Engine, InputMode, ModelDescriptor, ReferenceConfig};

#[test]
fn reference_scores_equal_oracle() {
    let m = ReferenceConfig::default().random_model(31).unwrap();
    for i in 0..3 {
        let img = preproc::seeded_image(77, i, m.input_shape());
        let inf = Engine::default().forward(&m, &img).unwrap();
        let o = reference_forward(&m, &img).unwrap();
        assert_eq!(inf.class, o.class);
        let oracle_scores: Vec<f32> = o.scores.iter().map(|&s| s as f32).collect();
        assert_eq!(inf.scores, oracle_scores);
        assert!(inf.class < m.num_classes());
    }
}

#[test]
fn every_input_mode_is_equivalent() {
    for mode in [InputMode::None, InputMode::ThresholdRgb, InputMode::ThresholdGray, InputMode::Lbp] {
        let m = ReferenceConfig {
            height: 24,
            width: 20,
            ..ReferenceConfig::with_mode(mode)
        }
        .random_model(5)
        .unwrap();
        let r = oracle::check_equivalence(&m, 10, 2).unwrap();
        assert!(r.is_equivalent(), "{mode}: {r}");
        assert!(r.max_float_rel_err <= oracle::FLOAT_RTOL);
    }
}

#[test]
fn engine_settings_do_not_change_outputs() {
    let m = ReferenceConfig {
        height: 32,
        width: 32,
        ..Default::default()
    }
    .random_model(8)
    .unwrap();
    let img = preproc::seeded_image(1, 1, m.input_shape());
    let (_, reference) = Engine::default().forward_traced(&m, &img).unwrap();
    for (tile, segments, band) in [(1, 1, 1), (2, 2, 3), (8, 8, 8), (64, 64, 32), (usize::MAX, 577, 64)] {
        let e = Engine {
            conv_tiling: ConvTiling::uniform(tile),
            fc_segments: segments,
            band_rows: band,
        };
        let (_, t) = e.forward_traced(&m, &img).unwrap();
        assert_eq!(t, reference);
    }
    assert!(matches!(reference.layers[0], LayerOutput::IntMap(_)));
}

#[test]
fn concurrent_forward_on_shared_model() {
    let m: Arc<ModelDescriptor> = Arc::new(
        ReferenceConfig {
            height: 32,
            width: 32,
            ..Default::default()
        }
        .random_model(4)
        .unwrap(),
    );
    let expected: Vec<_> = (0..8)
        .map(|i| Engine::default().forward(&m, &preproc::seeded_image(3, i, m.input_shape())).unwrap())
        .collect();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let m = Arc::clone(&m);
            thread::spawn(move || {
                (0..8)
                    .map(|i| Engine::default().forward(&m, &preproc::seeded_image(3, i, m.input_shape())).unwrap())
                    .collect::<Vec<_>>()
            })
        })
        .collect();
    for h in handles {
        assert_eq!(h.join().unwrap(), expected);
    }
}

#[test]
fn model_file_roundtrip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let m = ReferenceConfig::default().random_model(6).unwrap();
    let p = dir.path().join("ref.bcnn");
    m.save(&p).unwrap();
    let back = ModelDescriptor::load(&p).unwrap();
    assert_eq!(back, m);
    let img = preproc::seeded_image(0, 0, m.input_shape());
    assert_eq!(
        Engine::default().forward(&back, &img).unwrap(),
        Engine::default().forward(&m, &img).unwrap()
    );
}
