use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use mmnet_bench::input;
use mmnet_core::ca::AttentionHook;
use mmnet_core::model::loss;
use mmnet_core::nn::ParamStore;
use mmnet_core::pc::{MultiHeadSelfAttention, NUM_PATCHES};
use mmnet_core::{Graph, MmNet, ModelConfig, Rng};

fn conv(c: &mut Criterion) {
    let x = input(&[64, 56, 56], 1);
    let w = input(&[128, 64, 3, 3], 2);
    let b = input(&[128], 3);
    c.bench_function("conv2d 64->128 3x3 s2 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(xv, wv, bv, 2, 1).unwrap();
            let s = g.sum(y).unwrap();
            g.backward(s).unwrap();
        })
    });
}

fn msa(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let m = MultiHeadSelfAttention::new(&mut store, "msa", 512, 4, &mut Rng::new(4)).unwrap();
    let x = input(&[NUM_PATCHES, 512], 5);
    c.bench_function("msa 196x512 h4 fwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = store.bind_frozen(&mut g);
            let xv = g.constant(x.clone());
            m.forward(&mut g, &p, xv).unwrap();
        })
    });
}

fn model(c: &mut Criterion) {
    let net = MmNet::new(ModelConfig::default(), &mut Rng::new(6)).unwrap();
    let (onset, apex) = (input(&[3, 224, 224], 7), input(&[3, 224, 224], 8));
    c.bench_function("mmnet predict", |bench| bench.iter(|| net.predict(&onset, &apex).unwrap()));
    c.bench_function("mmnet train step", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let p = net.params().bind(&mut g);
            let pass = net.forward(&mut g, &p, &onset, &apex, AttentionHook::None).unwrap();
            let l = loss(&mut g, pass.logits, 1).unwrap();
            g.backward(l).unwrap();
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().measurement_time(Duration::new(10, 0)).sample_size(10);
    targets = conv, msa, model
}

criterion_main!(benches);
