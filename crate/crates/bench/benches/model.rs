use catr_core::config::RunConfig;
use catr_core::data::{generate, sample_seeds, GenConfig};
use catr_core::matching::training_loss;
use catr_core::model::Catr;
use catr_core::nn::Graph;
use criterion::Criterion;

pub fn bench(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let model = Catr::new(&cfg.model, 0).unwrap();
    let sample = generate(&GenConfig::default(), &sample_seeds(3, 1)).unwrap().remove(0);
    let target = sample.gt.targets(8).unwrap();

    let mut group = c.benchmark_group("desk_model");
    group.sample_size(10);
    group.bench_function("forward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            model.forward(&mut g, &sample.video, &sample.audio).unwrap();
            g.len()
        })
    });
    group.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut g = Graph::new(&model.store);
            let out = model.forward(&mut g, &sample.video, &sample.audio).unwrap();
            let loss = training_loss(&mut g, out.mask_logits, out.reference_logits, &target, &sample.gt.visibility, &cfg.loss)
                .unwrap();
            let grads = g.backward(loss.total).unwrap();
            g.param_grads(&grads).len()
        })
    });
    group.finish();
}
