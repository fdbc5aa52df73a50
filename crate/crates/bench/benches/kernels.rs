use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salience_core::filtering::{
    select_queries, selective_encoder_layer, sine_position_encoding, EncoderConfig,
};
use salience_core::geometry::{nms, BBox};
use salience_core::pipeline::{generate_scene, SceneConfig};
use salience_core::predictor::SaliencePredictor;
use salience_core::tensor::{ParamStore, Tape, Tensor};
use salience_core::{FilterRatios, PyramidSpec};

// Layer cost at a few keep fractions; 1.0 is the dense layer.
fn encoder_layer(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    cfg.init_layer(&mut store, "enc.", &mut rng);
    let n = 256;
    let queries = Tensor::randn([n, cfg.channels], 1.0, &mut rng);
    let pos = sine_position_encoding(16, 16, cfg.channels);
    let mut group = c.benchmark_group("encoder_layer");
    for keep in [0.1, 0.3, 1.0] {
        let count = ((n as f64) * keep).ceil() as usize;
        let selected: Vec<usize> = (0..count).collect();
        group.bench_with_input(BenchmarkId::from_parameter(keep), &selected, |b, sel| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = store.attach_frozen(&mut tape);
                let q = tape.constant(queries.clone());
                let p = tape.constant(pos.clone());
                let out = selective_encoder_layer(&mut tape, q, p, sel, &params, "enc.", &cfg).unwrap();
                black_box(tape.value(out).data()[0])
            })
        });
    }
    group.finish();
}

fn nms_boxes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("nms");
    for n in [100, 1000] {
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                BBox::new(
                    rng.random_range(0.0..100.0),
                    rng.random_range(0.0..100.0),
                    rng.random_range(1.0..10.0),
                    rng.random_range(1.0..10.0),
                )
                .unwrap()
            })
            .collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(nms(&boxes, &scores, 0.3).unwrap().len()))
        });
    }
    group.finish();
}

fn predictor_and_selection(c: &mut Criterion) {
    let spec = PyramidSpec::default();
    let scene = generate_scene(7, &spec, &SceneConfig::default()).unwrap();
    let predictor = SaliencePredictor::new(spec.channels, spec.levels());
    let params = predictor.init_params(&mut ChaCha8Rng::seed_from_u64(3));
    c.bench_function("predictor_forward", |b| {
        b.iter(|| black_box(predictor.predict(&params, &scene.pyramid).unwrap().len()))
    });
    let maps = predictor.predict(&params, &scene.pyramid).unwrap();
    let ratios = FilterRatios::default();
    c.bench_function("select_queries", |b| {
        b.iter(|| black_box(select_queries(&maps, &ratios).unwrap().total_selected()))
    });
}

criterion_group!(benches, encoder_layer, nms_boxes, predictor_and_selection);
criterion_main!(benches);
