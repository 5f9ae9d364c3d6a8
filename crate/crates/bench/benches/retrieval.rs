use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mixrag::autodiff::Tape;
use mixrag::model::{ForwardOptions, Model, ModelConfig, QueryInput};
use mixrag::pcst;
use mixrag::rng::Rng;
use mixrag::subgraph::cosine_topk;
use mixrag_bench::{corpus, pcst_instance};

fn bench_pcst(c: &mut Criterion) {
    let mut group = c.benchmark_group("pcst");
    for n in [8, 12] {
        let inst = pcst_instance(n, n, 1);
        group.bench_with_input(BenchmarkId::new("exact", n), &inst, |b, inst| {
            b.iter(|| pcst::solve_exact(black_box(inst)))
        });
    }
    for n in [50, 200, 1000] {
        let inst = pcst_instance(n, n, 2);
        group.bench_with_input(BenchmarkId::new("heuristic", n), &inst, |b, inst| {
            b.iter(|| pcst::solve_heuristic(black_box(inst)))
        });
    }
    group.finish();
}

fn bench_cosine_topk(c: &mut Criterion) {
    let mut group = c.benchmark_group("cosine_topk");
    for nodes in [100, 1000] {
        let (corpus, set) = corpus(nodes, 256);
        let ctx = set.get(&corpus.train[0].graph).unwrap();
        let q = set.embed_query(&corpus.train[0].query).unwrap();
        group.bench_function(BenchmarkId::from_parameter(nodes), |b| {
            b.iter(|| cosine_topk(black_box(q.data()), ctx.table.nodes(), 20).unwrap())
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("forward");
    group.sample_size(20);
    let (corpus, set) = corpus(15, 256);
    let ex = &corpus.train[0];
    let ctx = set.get(&ex.graph).unwrap();
    let q = set.embed_query(&ex.query).unwrap();
    for layers in [1, 3] {
        let model = Model::init(ModelConfig { layers, ..ModelConfig::default() }, 0).unwrap();
        group.bench_function(BenchmarkId::new("layers", layers), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let input = QueryInput { graph: &ctx.graph, table: &ctx.table, query: &q };
                let f = model.forward(&mut tape, input, &ForwardOptions::eval(0.05), &mut Rng::new(0)).unwrap();
                black_box(f.p_soft)
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_pcst, bench_cosine_topk, bench_forward);
criterion_main!(benches);
