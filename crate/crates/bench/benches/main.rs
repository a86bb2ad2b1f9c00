mod model;

use criterion::{criterion_group, criterion_main};

criterion_group!(benches, attention::bench, model::bench, metrics::bench);
criterion_main!(benches);
