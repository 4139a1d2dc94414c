//! End-to-end acceptance checks. Runs as a plain binary (no libtest harness)
//! so the timing-sensitive criteria run one at a time; prints one line per
//! criterion and exits non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use infomax::alloc::TrackingAllocator;
use infomax::attention::{
    dense_attention, mea_attention, variance_proxy, Mask, MeaConfig,
};
use infomax::autograd::Graph;
use infomax::bench::{bench_scaling, BenchMode, BenchSettings};
use infomax::commands::{cmd_predict, cmd_sweep, cmd_train, train_only, SweepParam};
use infomax::data::{prepare, repeat_last_baseline, synthetic, RawSeries, SyntheticSpec};
use infomax::decomposition::series_decomp;
use infomax::distilling::{distill_kv, DistillConfig, Distiller};
use infomax::gradcheck::grad_check;
use infomax::model::{Ablation, ForwardCtx, Model, ModelConfig};
use infomax::par::Execution;
use infomax::param::ParamStore;
use infomax::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

type Outcome = Result<String, String>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed <= limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn full_budget_equals_dense() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let l = rng.gen_range(1..=64);
        let d = rng.gen_range(1..=16);
        let (q, k, v) = (random(&[l, d], &mut rng), random(&[l, d], &mut rng), random(&[l, d], &mut rng));
        let cfg = MeaConfig {
            top_u: Some(l),
            sample_keys: Some(l),
            seed: i,
            ..MeaConfig::default()
        };
        let (out, _) = mea_attention(&q, &k, &v, &cfg, Mask::None).map_err(|e| e.to_string())?;
        let dense = dense_attention(&q, &k, &v, Mask::None).map_err(|e| e.to_string())?;
        worst = worst.max(out.max_abs_diff(&dense));
    }
    within(start.elapsed(), Duration::from_secs(10))?;
    check(worst <= 1e-6, format!("max abs error {worst:.2e} over 100 instances in {:.2?}", start.elapsed()))
}

fn empty_selection_gives_means() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let (lq, lk, d) = (rng.gen_range(1..40), rng.gen_range(1..40), rng.gen_range(1..9));
        let l = lq.min(lk);
        for (mask, lq) in [(Mask::None, lq), (Mask::Causal, l)] {
            let q = random(&[lq, d], &mut rng);
            let k = random(&[lk, d], &mut rng);
            let v = random(&[lk, d], &mut rng);
            let cfg = MeaConfig {
                top_u: Some(0),
                seed: i,
                ..MeaConfig::default()
            };
            let (out, sel) = mea_attention(&q, &k, &v, &cfg, mask).map_err(|e| e.to_string())?;
            if !sel.selected.is_empty() {
                return Err("selection not empty".into());
            }
            for r in 0..lq {
                let visible = match mask {
                    Mask::None => lk,
                    Mask::Causal => (r + 1).min(lk),
                };
                for c in 0..d {
                    let mean = (0..visible).map(|j| v.at2(j, c)).sum::<f64>() / visible as f64;
                    worst = worst.max((out.at2(r, c) - mean).abs());
                }
            }
        }
    }
    check(worst <= 1e-12, format!("max deviation from visible-value mean {worst:.2e}"))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn ranks(keys: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    idx
}

fn variance_tracks_entropy() -> Outcome {
    let temps = [0.25, 0.5, 1.0, 2.0, 4.0];
    let l_k = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agree = [0usize; 2];
    let budgets = [l_k, (3.0 * (l_k as f64).sqrt()).ceil() as usize];
    for trial in 0..50 {
        let s: Vec<f64> = (0..l_k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // keys are the unit basis, so q_t · k_j / √d = s_j / T
        let k = Tensor::new(&[l_k, l_k], (0..l_k * l_k).map(|i| f64::from(i / l_k == i % l_k)).collect()).unwrap();
        let scale = (l_k as f64).sqrt();
        let q = Tensor::from_rows(&temps.iter().map(|t| s.iter().map(|v| v / t * scale).collect()).collect::<Vec<_>>()).unwrap();
        let entropy: Vec<f64> = temps
            .iter()
            .map(|t| {
                let p = softmax(&s.iter().map(|v| v / t).collect::<Vec<_>>());
                -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
            })
            .collect();
        for (b, &u) in budgets.iter().enumerate() {
            let cfg = MeaConfig {
                sample_keys: Some(u),
                seed: trial,
                ..MeaConfig::default()
            };
            let sel = variance_proxy(&q, &k, &cfg, Mask::None).map_err(|e| e.to_string())?;
            let neg_var: Vec<f64> = sel.variance_per_query.iter().map(|v| -v).collect();
            if ranks(&neg_var) == ranks(&entropy) {
                agree[b] += 1;
            }
        }
    }
    let full = agree[0] as f64 / 50.0;
    let sampled = agree[1] as f64 / 50.0;
    check(
        full == 1.0 && sampled >= 0.98,
        format!("rank agreement {:.0}% with U = L_K, {:.0}% with U = {}", full * 100.0, sampled * 100.0, budgets[1]),
    )
}

fn linear_scaling() -> Outcome {
    let start = Instant::now();
    let settings = BenchSettings::default();
    let mea = bench_scaling(&[256, 512, 1024, 2048, 4096], BenchMode::Mea, &settings).map_err(|e| e.to_string())?;
    let dense = bench_scaling(&[256, 512, 1024, 2048], BenchMode::Dense, &settings).map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(300))?;
    let count = |l: usize| mea.records.iter().find(|r| r.l == l).map(|r| r.dot_product_rows).unwrap_or(0);
    let ratio = count(2048) as f64 / count(1024) as f64;
    let (ms, ds) = (mea.slope.unwrap_or(f64::NAN), dense.slope.unwrap_or(f64::NAN));
    let peak = mea.records.last().map(|r| r.peak_bytes).unwrap_or(0);
    check(
        ms <= 1.25 && ds >= 1.75 && ratio <= 2.2,
        format!(
            "MEA slope {ms:.3}, dense slope {ds:.3}, dot products 2048/1024 = {ratio:.3}, MEA peak at 4096 {} KiB, {:.1?}",
            peak / 1024,
            start.elapsed()
        ),
    )
}

fn distilling_shapes() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = DistillConfig::default();
    let mut store = ParamStore::new();
    for p in ["kv.k", "kv.v"] {
        Distiller::new(p, 512, cfg.clone()).unwrap().init(&mut store, &mut rng);
    }
    let kv = distill_kv(&random(&[729, 512], &mut rng), &cfg, &store, "kv").map_err(|e| e.to_string())?;
    let first = kv.keys.shape().to_vec();
    let kv784 = distill_kv(&random(&[784, 512], &mut rng), &cfg, &store, "kv").map_err(|e| e.to_string())?;
    // pad to a multiple of l, then pool by l
    let mut t = 784;
    let mut per_stage = Vec::new();
    for _ in 0..3 {
        t = (t + 2) / 3;
        per_stage.push(t);
    }
    let planned: Vec<usize> = cfg.stage_extents(784, 512).iter().map(|e| e.0).collect();
    check(
        first == [8, 27, 64] && kv.values.shape() == [8, 27, 64] && kv784.keys.shape()[1] == 30 && planned == per_stage,
        format!("729 -> {first:?}, 784 -> L_K {} via {planned:?}", kv784.keys.shape()[1]),
    )
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (l, d) = (rng.gen_range(1..200), rng.gen_range(1..5));
        let w = 2 * rng.gen_range(0..20) + 1;
        let x = Tensor::new(&[l, d], (0..l * d).map(|_| rng.gen_range(-100.0..100.0)).collect()).unwrap();
        let p = series_decomp(&x, w).map_err(|e| e.to_string())?;
        for i in 0..x.len() {
            worst = worst.max((p.trend.data()[i] + p.seasonal.data()[i] - x.data()[i]).abs());
        }
    }
    let mut flat = true;
    for c in [0.1, -3.7, 1e6 / 3.0, 0.0] {
        let p = series_decomp(&Tensor::full(&[97, 3], c), 25).map_err(|e| e.to_string())?;
        flat &= p.seasonal.data().iter().all(|&v| v == 0.0);
    }
    check(
        worst <= 1e-12 && flat,
        format!("max reconstruction error {worst:.2e}; constant series seasonal exactly zero: {flat}"),
    )
}

fn tiny_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        l_x: 32,
        l_label: Some(8),
        l_y: 8,
        d_x: 2,
        d_y: 2,
        d_model: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        decomp_window: 5,
        ablation,
        ..ModelConfig::default()
    }
}

fn decoder_causality() -> Outcome {
    let cfg = tiny_config(Ablation::Full);
    let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
    let params = model.init_params(7);
    let raw = synthetic(&SyntheticSpec { len: 200, features: 2, ..Default::default() }).unwrap();
    let data = prepare(&raw, &cfg).map_err(|e| e.to_string())?;
    let sample = data.train.sample(0);
    let mut g = Graph::new();
    let x = model.build_decoder_input(&mut g, &params, &sample).map_err(|e| e.to_string())?;
    let base = g.value(x).clone();
    let len = cfg.decoder_len();
    let run = |input: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(input.clone()).unwrap();
        let y = model.decoder_self_attention(&mut g, &params, 0, v, ForwardCtx::default()).unwrap();
        g.value(y).clone()
    };
    let reference = run(&base);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut later_changed = true;
    for j in 0..len {
        let mut perturbed = base.clone();
        for c in 0..cfg.d_model {
            perturbed.data_mut()[j * cfg.d_model + c] += rng.gen_range(-5.0..5.0);
        }
        let out = run(&perturbed);
        for i in 0..j {
            for c in 0..cfg.d_model {
                worst = worst.max((out.at2(i, c) - reference.at2(i, c)).abs());
            }
        }
        later_changed &= (0..cfg.d_model).any(|c| out.at2(j, c) != reference.at2(j, c));
    }
    check(
        worst <= 1e-9 && later_changed,
        format!("max change before the perturbed row {worst:.2e} over {len} positions"),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let cfg = tiny_config(Ablation::Full);
    let model = Model::new(cfg.clone()).map_err(|e| e.to_string())?;
    let raw = synthetic(&SyntheticSpec { len: 200, features: 2, ..Default::default() }).unwrap();
    let data = prepare(&raw, &cfg).map_err(|e| e.to_string())?;
    let sample = data.train.sample(5);
    let params = model.init_params(9);
    let report = grad_check(&params, |g, s| model.loss(g, s, &sample, ForwardCtx::default()), 1e-4)
        .map_err(|e| e.to_string())?;
    within(start.elapsed(), Duration::from_secs(120))?;
    check(
        report.pass_fraction >= 0.95,
        format!(
            "pass fraction {:.4} over {} entries, {:.1?}",
            report.pass_fraction,
            report.checked,
            start.elapsed()
        ),
    )
}

fn smoke_config() -> ModelConfig {
    let mut c = ModelConfig {
        l_x: 96,
        l_y: 24,
        label_double: true,
        d_x: 1,
        d_y: 1,
        d_model: 32,
        encoder_layers: 2,
        decoder_layers: 1,
        ..ModelConfig::default()
    };
    c.train.learning_rate = 3e-3;
    c.train.batch_size = 8;
    c.train.max_epochs = 100;
    c.train.max_steps = Some(2000);
    c
}

fn smoke_data() -> RawSeries {
    synthetic(&SyntheticSpec {
        len: 1200,
        seed: 1,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn one_pass_decoding() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = tiny_config(Ablation::Full);
    cfg.d_x = 1;
    cfg.d_y = 1;
    cfg.train.max_steps = Some(5);
    let raw = synthetic(&SyntheticSpec { len: 300, ..Default::default() }).unwrap();
    let trained = cmd_train(&cfg, &raw, 1, None, dir.path(), Execution::Parallel).map_err(|e| e.to_string())?;
    let o = cmd_predict(&trained.checkpoint, &raw, Some(8), false, dir.path(), Execution::Parallel)
        .map_err(|e| e.to_string())?;
    check(
        o.decoder_passes == o.windows as u64,
        format!("{} decoder passes for {} windows", o.decoder_passes, o.windows),
    )
}

struct SmokeRuns {
    full: Vec<f64>,
    baseline: f64,
    steps: usize,
    elapsed: Duration,
}

const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];

fn smoke_runs() -> Result<SmokeRuns, String> {
    let cfg = smoke_config();
    let raw = smoke_data();
    let data = prepare(&raw, &cfg).map_err(|e| e.to_string())?;
    let (baseline, _) = repeat_last_baseline(&data.test).map_err(|e| e.to_string())?;
    let mut full = Vec::new();
    let mut steps = 0;
    let mut elapsed = Duration::ZERO;
    for &seed in &ABLATION_SEEDS {
        let t = Instant::now();
        let o = train_only(&cfg, &raw, seed, None, Execution::Parallel).map_err(|e| e.to_string())?;
        if seed == ABLATION_SEEDS[0] {
            elapsed = t.elapsed();
            steps = o.manifest.steps;
        }
        full.push(o.manifest.test_mse);
    }
    Ok(SmokeRuns {
        full,
        baseline,
        steps,
        elapsed,
    })
}

fn smoke_quality(runs: &SmokeRuns) -> Outcome {
    within(runs.elapsed, Duration::from_secs(600))?;
    let ratio = runs.full[0] / runs.baseline;
    check(
        ratio <= 0.70 && runs.steps <= 2000,
        format!(
            "test MSE {:.4} vs repeat-last {:.4} (ratio {ratio:.3}) after {} steps in {:.1?}",
            runs.full[0], runs.baseline, runs.steps, runs.elapsed
        ),
    )
}

fn sensitivity_flatness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let points = cmd_sweep(
        &smoke_config(),
        &smoke_data(),
        SweepParam::C,
        &[1.0, 3.0, 5.0, 7.0, 9.0],
        ABLATION_SEEDS[0],
        dir.path(),
        Execution::Parallel,
    )
    .map_err(|e| e.to_string())?;
    let mse: Vec<f64> = points.iter().map(|p| p.mse).collect();
    let mean = mse.iter().sum::<f64>() / mse.len() as f64;
    let spread = mse.iter().copied().fold(f64::NEG_INFINITY, f64::max) - mse.iter().copied().fold(f64::INFINITY, f64::min);
    let listed: Vec<String> = points.iter().map(|p| format!("c={}:{:.4}", p.value, p.mse)).collect();
    check(
        spread <= 0.15 * mean,
        format!("spread {:.1}% of mean ({})", 100.0 * spread / mean, listed.join(" ")),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_ordering(runs: &SmokeRuns) -> Outcome {
    let raw = smoke_data();
    let cfg = smoke_config();
    let variant = |a: Ablation| -> Result<Vec<f64>, String> {
        ABLATION_SEEDS
            .iter()
            .map(|&s| {
                train_only(&cfg, &raw, s, Some(a), Execution::Parallel)
                    .map(|o| o.manifest.test_mse)
                    .map_err(|e| e.to_string())
            })
            .collect()
    };
    let no_distill = variant(Ablation::NoDistill)?;
    let no_mea = variant(Ablation::NoMea)?;
    let no_tsd = variant(Ablation::NoTsd)?;
    let full = mean(&runs.full);
    let (nd, nm, nt) = (mean(&no_distill), mean(&no_mea), mean(&no_tsd));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join("/");
    check(
        full <= nd && full <= nt && (nm - full).abs() <= 0.10 * full,
        format!(
            "mean test MSE over seeds {ABLATION_SEEDS:?}: full {full:.4} [{}], no-distill {nd:.4} [{}], no-mea {nm:.4} [{}], no-tsd {nt:.4} [{}]",
            fmt(&runs.full),
            fmt(&no_distill),
            fmt(&no_mea),
            fmt(&no_tsd)
        ),
    )
}

fn determinism() -> Outcome {
    let mut cfg = tiny_config(Ablation::Full);
    cfg.d_x = 1;
    cfg.d_y = 1;
    cfg.train.max_steps = Some(30);
    cfg.train.batch_size = 4;
    let raw = synthetic(&SyntheticSpec { len: 300, ..Default::default() }).unwrap();
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cmd_train(&cfg, &raw, 7, None, a.path(), Execution::Parallel).map_err(|e| e.to_string())?;
    cmd_train(&cfg, &raw, 7, None, b.path(), Execution::Sequential).map_err(|e| e.to_string())?;
    let mut same = Vec::new();
    for f in ["loss.csv", "steps.csv", "checkpoint.json", "manifest.json"] {
        let x = std::fs::read(a.path().join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
        same.push(format!("{f} ({} bytes)", x.len()));
    }
    check(true, format!("bit-identical: {}", same.join(", ")))
}

fn run(id: usize, name: &str, f: impl FnOnce() -> Outcome, failures: &mut usize) {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
        Err(detail) => {
            *failures += 1;
            println!("criterion {id:>2} FAIL  {name}: {detail}");
        }
    }
}

fn main() {
    // `cargo test -- <filter>` style arguments are accepted and ignored.
    let mut failures = 0;
    run(1, "full-budget MEA equals dense attention", full_budget_equals_dense, &mut failures);
    run(2, "empty selection falls back to visible means", empty_selection_gives_means, &mut failures);
    run(3, "sampled variance ranks like entropy", variance_tracks_entropy, &mut failures);
    run(4, "linear scaling of MEA with distilling", linear_scaling, &mut failures);
    run(5, "distilling shape law", distilling_shapes, &mut failures);
    run(6, "decomposition identity", decomposition_identity, &mut failures);
    run(7, "decoder self-attention causality", decoder_causality, &mut failures);
    run(8, "full-model gradient check", gradient_integrity, &mut failures);
    run(9, "one decoder pass per forecast window", one_pass_decoding, &mut failures);
    match smoke_runs() {
        Ok(runs) => {
            run(10, "smoke forecasting quality", || smoke_quality(&runs), &mut failures);
            run(11, "sensitivity to c is flat", sensitivity_flatness, &mut failures);
            run(12, "ablation ordering", || ablation_ordering(&runs), &mut failures);
        }
        Err(e) => {
            for (id, name) in [(10, "smoke forecasting quality"), (11, "sensitivity to c is flat"), (12, "ablation ordering")] {
                failures += 1;
                println!("criterion {id:>2} FAIL  {name}: smoke training failed: {e}");
            }
        }
    }
    run(13, "training is bit-for-bit reproducible", determinism, &mut failures);
    println!("{} of 13 criteria passed", 13 - failures.min(13));
    if failures > 0 {
        std::process::exit(1);
    }
}
