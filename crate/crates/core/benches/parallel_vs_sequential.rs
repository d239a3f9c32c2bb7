use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use chexfusion::data::{generate_synthetic, SyntheticConfig};
use chexfusion::losses::{loss_on_tape, LossConfig};
use chexfusion::model::{ForwardMode, Model, ModelConfig, ParamGroup};
use chexfusion::par;
use chexfusion::tensor::{StreamKey, Tape, Tensor};

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", false), ("sequential", true)]
}

fn bench_matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_256");
    let mut rng = StreamKey::new(0, "bench.matmul", 0).rng();
    let a = Tensor::from_fn(&[256, 256], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
    let b = a.clone();
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_sequential(seq);
            bench.iter(|| {
                let tape = Tape::no_grad();
                let x = tape.constant(a.clone());
                let y = tape.constant(b.clone());
                black_box(tape.matmul(x, y).unwrap());
            });
        });
    }
    par::set_sequential(false);
    g.finish();
}

fn bench_batch_gradients(c: &mut Criterion) {
    let model = Model::new(ModelConfig::default()).unwrap();
    let store = model.init_params(0, &[ParamGroup::Backbone, ParamGroup::Head]).unwrap();
    let (ds, _) = generate_synthetic(&SyntheticConfig::with_classes(12, 16, 0)).unwrap();
    let images: Vec<&Tensor> = ds.studies.iter().map(|s| &s.views[0].pixels).collect();
    let targets = ds.targets();
    let cfg = LossConfig::new(vec![0.2; 12]);
    let mut g = c.benchmark_group("stage1_batch16_grad");
    g.sample_size(10);
    for (name, seq) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |bench| {
            par::set_sequential(seq);
            bench.iter(|| {
                let losses = par::map_indexed(images.len(), |i| {
                    let tape = Tape::new();
                    let logits = model.single_view_logits(&tape, &store, images[i], &ForwardMode::eval()).unwrap();
                    let l = loss_on_tape(&tape, logits, &targets[i], &cfg).unwrap();
                    let grads = tape.backward(l).unwrap().for_store(&store);
                    grads.len()
                });
                black_box(losses);
            });
        });
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, bench_matmul, bench_batch_gradients);
criterion_main!(benches);
