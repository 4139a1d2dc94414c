use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use infomax::attention::{multi_head_forward, AttentionMode, Mask, MeaConfig, MultiHeadSpec};
use infomax::distilling::{DistillConfig, Distiller};
use infomax::param::ParamStore;
use infomax::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D_MODEL: usize = 64;

fn random(l: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(&[l, d], (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn heads_of(x: &Tensor, heads: usize) -> Tensor {
    let (l, d) = (x.shape()[0], x.shape()[1]);
    let dh = d / heads;
    let mut out = Vec::with_capacity(l * d);
    for h in 0..heads {
        for i in 0..l {
            out.extend_from_slice(&x.row(i)[h * dh..(h + 1) * dh]);
        }
    }
    Tensor::new(&[heads, l, dh], out).unwrap()
}

fn attention(c: &mut Criterion) {
    let cfg = DistillConfig::default();
    let heads = cfg.heads();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let kd = Distiller::new("k", D_MODEL, cfg.clone()).unwrap();
    let vd = Distiller::new("v", D_MODEL, cfg).unwrap();
    kd.init(&mut store, &mut rng);
    vd.init(&mut store, &mut rng);

    let mut g = c.benchmark_group("attention_forward");
    g.sample_size(10);
    for l in [256usize, 512, 1024] {
        let x = random(l, D_MODEL, &mut rng);
        g.bench_with_input(BenchmarkId::new("mea_distilled", l), &x, |b, x| {
            let spec = MultiHeadSpec { heads, mode: AttentionMode::Mea(MeaConfig::default()), mask: Mask::None };
            b.iter(|| {
                let k = kd.apply(&store, x).unwrap();
                let v = vd.apply(&store, x).unwrap();
                multi_head_forward(x, &k, &v, &spec).unwrap()
            })
        });
        g.bench_with_input(BenchmarkId::new("dense", l), &x, |b, x| {
            let spec = MultiHeadSpec { heads, mode: AttentionMode::Dense, mask: Mask::None };
            let kv = heads_of(x, heads);
            b.iter(|| multi_head_forward(x, &kv, &kv, &spec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
