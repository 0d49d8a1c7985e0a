//! Acceptance checks. Prints one PASS/FAIL line per criterion; soft criteria
//! report without affecting the exit status.
//!
//! `ACCEPTANCE_ONLY=1,4,7` restricts the run to the listed criteria.

use std::collections::HashSet;
use std::time::Instant;

use flop_core::layers::linear::GateKind;
use flop_core::layers::{FixedNoise, Linear, Mask};
use flop_core::lm::corpus::zipf_text;
use flop_core::lm::{SizeControl, StepMetrics};
use flop_core::tensor::Tensor;
use flop_core::{
    bench_compacted, BenchOptions, CharCorpus, ColumnGatedLinear, FactorizedLinear, GateConfig, Graph, HardConcreteGate,
    MaskMode, Method, Param, PruneReport, RecurrentLM, RunConfig, Split, Trainer, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Res<T> = flop_core::Result<T>;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Res<Verdict> {
    Ok(Verdict { pass, detail })
}

fn failed(e: &flop_core::Error) -> Res<Verdict> {
    verdict(false, format!("error: {e}"))
}

// ---------------------------------------------------------------- shared setup

/// Synthetic Zipfian word text, about 550k characters.
fn desk_corpus() -> CharCorpus {
    let text = zipf_text(&mut ChaCha8Rng::seed_from_u64(11), 100_000, 2000, 1.1);
    CharCorpus::from_bytes(text.as_bytes(), Default::default(), Default::default()).expect("desk corpus")
}

fn desk_config(method: Method, seed: u64, steps: u64, compression: f64, basis: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "seed = {seed}\nmethod = \"{}\"\n[model]\nembed_dim = 64\nhidden = 192\nlayers = 2\n\
         [train]\nsteps = {steps}\nbatch_size = 16\nunroll = 32\n\
         [prune]\ntarget_compression = {compression}\nbasis = \"{basis}\"\n",
        method.as_str()
    ))
    .expect("desk config")
}

fn train(cfg: &RunConfig, corpus: &CharCorpus, mut on_step: impl FnMut(&Trainer, &StepMetrics)) -> Res<Trainer> {
    let mut t = Trainer::new(cfg, corpus)?;
    while t.step < t.total_steps {
        let m = t.train_step(corpus)?;
        on_step(&t, &m);
    }
    Ok(t)
}

/// Closed-form open probability, written out independently of the library.
fn open_probability(alpha: f64, l: f64, r: f64) -> f64 {
    1.0 / (1.0 + (-(alpha - (-l / r).ln())).exp())
}

// ------------------------------------------------------------- 1: L0 vs Monte Carlo

fn c1() -> Res<Verdict> {
    let start = Instant::now();
    let n = 200_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut closed_form_ok = true;
    for alpha in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        let gate = HardConcreteGate::with_alpha("g", vec![alpha; n], vec![1; n], GateConfig::default())?;
        let z = gate.sample_values(&gate.draw_uniforms(&mut rng))?;
        let empirical = z.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        let want = open_probability(alpha, -0.1, 1.1);
        worst = worst.max((empirical - want).abs());
        closed_form_ok &= (gate.open_probability()[0] - want).abs() < 1e-12;
    }
    let at_zero = open_probability(0.0, -0.1, 1.1);
    closed_form_ok &= (at_zero - 11.0 / 12.0).abs() < 1e-12;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        worst < 0.005 && closed_form_ok && secs < 10.0,
        format!("max |MC - closed form| {worst:.5} (< 0.005), P(alpha=0) {at_zero:.6}, {secs:.1}s"),
    )
}

// ------------------------------------------------------------- 2: gradient checks

const FD_EPS: f64 = 1e-5;
/// Relative errors use `max(|a|, |n|, FD_FLOOR)` as denominator.
const FD_FLOOR: f64 = 1e-3;

/// Largest relative error between backprop and central differences over every
/// trainable entry returned by `params`.
fn fd_max_rel<M: ?Sized>(
    m: &mut M,
    params: for<'a> fn(&'a mut M) -> Vec<&'a mut Param>,
    loss: &dyn Fn(&M, &mut Graph) -> Res<Var>,
) -> Res<f64> {
    let mut g = Graph::new();
    let l = loss(m, &mut g)?;
    g.backward(l)?;
    let analytic: Vec<Option<Vec<f64>>> = params(m)
        .iter()
        .map(|p| {
            p.trainable.then(|| {
                g.param_grad(p.id()).map_or_else(|| vec![0.0; p.value.numel()], |t| t.data().to_vec())
            })
        })
        .collect();
    let eval = |m: &M| -> Res<f64> {
        let mut g = Graph::new();
        let l = loss(m, &mut g)?;
        Ok(g.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        let Some(grad) = grad else { continue };
        for (i, &a) in grad.iter().enumerate() {
            let orig = params(m)[pi].value.data()[i];
            params(m)[pi].value.data_mut()[i] = orig + FD_EPS;
            let up = eval(m)?;
            params(m)[pi].value.data_mut()[i] = orig - FD_EPS;
            let down = eval(m)?;
            params(m)[pi].value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max((numeric - a).abs() / numeric.abs().max(a.abs()).max(FD_FLOOR));
        }
    }
    Ok(worst)
}

fn all_params(v: &mut [Param]) -> Vec<&mut Param> {
    v.iter_mut().collect()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` kept at least `gap` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > gap) {
                break x;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng, [usize; 3]) -> Vec<Tensor>,
    build: fn(&mut Graph, &[Var]) -> Res<Var>,
}

fn rows(g: &Graph, v: Var) -> usize {
    g.shape(v)[0]
}

fn op_cases() -> Vec<OpCase> {
    fn mat(r: &mut ChaCha8Rng, a: usize, b: usize) -> Tensor {
        uniform(r, &[a, b], -1.0, 1.0)
    }
    vec![
        OpCase { name: "matmul", inputs: |r, [m, k, n]| vec![mat(r, m, k), mat(r, k, n)], build: |g, v| g.matmul(v[0], v[1]) },
        OpCase { name: "matmul_nt", inputs: |r, [m, k, n]| vec![mat(r, m, k), mat(r, n, k)], build: |g, v| g.matmul_nt(v[0], v[1]) },
        OpCase { name: "add", inputs: |r, [m, _, n]| vec![mat(r, m, n), mat(r, m, n)], build: |g, v| g.add(v[0], v[1]) },
        OpCase {
            name: "add_row",
            inputs: |r, [m, _, n]| vec![mat(r, m, n), uniform(r, &[n], -1.0, 1.0)],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase {
            name: "add_scalar_tensor",
            inputs: |r, [m, _, n]| vec![mat(r, m, n), Tensor::scalar(r.gen_range(-1.0..1.0))],
            build: |g, v| g.add(v[0], v[1]),
        },
        OpCase { name: "mul", inputs: |r, [m, _, n]| vec![mat(r, m, n), mat(r, m, n)], build: |g, v| g.mul(v[0], v[1]) },
        OpCase {
            name: "mul_row",
            inputs: |r, [m, _, n]| vec![mat(r, m, n), uniform(r, &[n], -1.0, 1.0)],
            build: |g, v| g.mul(v[0], v[1]),
        },
        OpCase { name: "sub", inputs: |r, [m, _, n]| vec![mat(r, m, n), mat(r, m, n)], build: |g, v| g.sub(v[0], v[1]) },
        OpCase { name: "affine", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.affine(v[0], 1.7, -0.3) },
        OpCase { name: "scale", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.scale(v[0], -2.5) },
        OpCase { name: "add_scalar", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.add_scalar(v[0], 0.4) },
        OpCase {
            name: "sigmoid",
            inputs: |r, [m, _, n]| vec![uniform(r, &[m, n], -4.0, 4.0)],
            build: |g, v| g.sigmoid(v[0]),
        },
        OpCase { name: "tanh", inputs: |r, [m, _, n]| vec![uniform(r, &[m, n], -3.0, 3.0)], build: |g, v| g.tanh(v[0]) },
        OpCase { name: "log", inputs: |r, [m, _, n]| vec![uniform(r, &[m, n], 0.2, 3.0)], build: |g, v| g.log(v[0]) },
        OpCase {
            name: "abs",
            inputs: |r, [m, _, n]| vec![away_from(r, &[m, n], -1.0, 1.0, &[0.0], 1e-3)],
            build: |g, v| g.abs(v[0]),
        },
        OpCase {
            name: "clamp",
            inputs: |r, [m, _, n]| vec![away_from(r, &[m, n], -1.0, 1.0, &[-0.5, 0.5], 1e-3)],
            build: |g, v| g.clamp(v[0], -0.5, 0.5),
        },
        OpCase { name: "square", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.square(v[0]) },
        OpCase { name: "sum", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.sum(v[0]) },
        OpCase { name: "mean", inputs: |r, [m, _, n]| vec![mat(r, m, n)], build: |g, v| g.mean(v[0]) },
        OpCase {
            name: "index_rows",
            inputs: |r, [m, _, n]| vec![mat(r, m, n)],
            build: |g, v| {
                let last = rows(g, v[0]) - 1;
                g.index_rows(v[0], &[last, 0, last])
            },
        },
        OpCase {
            name: "select_cols",
            inputs: |r, [m, _, n]| vec![mat(r, m, n)],
            build: |g, v| {
                let n = g.shape(v[0])[1];
                let cols: Vec<usize> = (0..n).rev().chain([0]).collect();
                g.select_cols(v[0], &cols)
            },
        },
        OpCase {
            name: "slice_rows",
            inputs: |r, [m, _, n]| vec![mat(r, m + 1, n)],
            build: |g, v| {
                let len = rows(g, v[0]) - 1;
                g.slice_rows(v[0], 1, len)
            },
        },
        OpCase {
            name: "concat_rows",
            inputs: |r, [m, k, n]| vec![mat(r, m, n), mat(r, k, n)],
            build: |g, v| g.concat_rows(&[v[0], v[1]]),
        },
        OpCase {
            name: "scatter_rows",
            inputs: |r, [m, _, n]| vec![mat(r, m, n)],
            build: |g, v| {
                let m = rows(g, v[0]);
                let pos: Vec<usize> = (0..m).map(|i| 2 * i).collect();
                g.scatter_rows(v[0], &pos, 2 * m + 1)
            },
        },
        OpCase {
            name: "softmax_cross_entropy",
            inputs: |r, [m, _, n]| vec![uniform(r, &[m, n + 1], -2.0, 2.0)],
            build: |g, v| {
                let (m, c) = (g.shape(v[0])[0], g.shape(v[0])[1]);
                let targets: Vec<usize> = (0..m).map(|i| (3 * i + 1) % c).collect();
                g.softmax_cross_entropy(v[0], &targets)
            },
        },
    ]
}

/// `sum(y ∘ w)` for a fixed random `w` of the output's shape.
fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Res<Var> {
    let w = g.constant(w.clone())?;
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn output_weights(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, shape, -1.0, 1.0)
}

fn gated_linear(rng: &mut ChaCha8Rng, column: bool) -> Res<(Linear, Tensor)> {
    let (d_in, d_out) = (rng.gen_range(2..6), rng.gen_range(2..6));
    let gate = GateKind::HardConcrete(GateConfig { init_alpha: 0.0, init_jitter: 1.5, ..GateConfig::default() });
    let lin = if column {
        Linear::Column(ColumnGatedLinear::new("c", d_in, d_out, true, gate, rng)?)
    } else {
        let rank = rng.gen_range(1..5);
        Linear::Factorized(FactorizedLinear::new("f", d_in, d_out, rank, true, gate, rng)?)
    };
    let x = uniform(rng, &[3, d_in], -1.0, 1.0);
    Ok((lin, x))
}

fn c2() -> Res<Verdict> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Vec<(String, f64)> = Vec::new();
    for case in op_cases() {
        let mut w = 0.0f64;
        for _ in 0..100 {
            let dims = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
            let mut params: Vec<Param> =
                (case.inputs)(&mut rng, dims).into_iter().enumerate().map(|(i, t)| Param::new(format!("x{i}"), t)).collect();
            let shape = {
                let mut g = Graph::new();
                let vars = params.iter().map(|p| g.param(p)).collect::<Res<Vec<_>>>()?;
                let y = (case.build)(&mut g, &vars)?;
                g.shape(y).to_vec()
            };
            let weights = output_weights(&mut rng, &shape);
            let build = case.build;
            let loss = move |ps: &[Param], g: &mut Graph| -> Res<Var> {
                let vars = ps.iter().map(|p| g.param(p)).collect::<Res<Vec<_>>>()?;
                let y = build(g, &vars)?;
                weighted_sum(g, y, &weights)
            };
            w = w.max(fd_max_rel(params.as_mut_slice(), all_params, &loss)?);
        }
        worst.push((case.name.to_string(), w));
    }
    for (column, name) in [(false, "gated factorized layer"), (true, "gated column layer")] {
        let mut w = 0.0f64;
        for _ in 0..100 {
            let (mut lin, x) = gated_linear(&mut rng, column)?;
            let u: Vec<f64> = (0..lin.mask().and_then(Mask::components).unwrap()).map(|_| rng.gen::<f64>()).collect();
            let d_out = match &lin {
                Linear::Factorized(l) => l.d_out(),
                Linear::Column(l) => l.d_out(),
                _ => unreachable!(),
            };
            let weights = output_weights(&mut rng, &[3, d_out]);
            let loss = move |l: &Linear, g: &mut Graph| -> Res<Var> {
                let mut noise = FixedNoise::new(vec![u.clone()]);
                let b = l.bind(g, &mut MaskMode::Sample(&mut noise))?;
                let xv = g.constant(x.clone())?;
                let y = b.forward(g, xv)?;
                let y = g.tanh(y)?;
                weighted_sum(g, y, &weights)
            };
            w = w.max(fd_max_rel(&mut lin, Linear::params_mut, &loss)?);
        }
        worst.push((name.to_string(), w));
    }
    let mut w = 0.0f64;
    for _ in 0..10 {
        let cfg = flop_core::lm::ModelConfig { embed_dim: 4, hidden: 4, layers: 2, ..Default::default() };
        let gate = GateConfig { init_alpha: 0.0, init_jitter: 1.5, ..GateConfig::default() };
        let mut model = RecurrentLM::new(&cfg, 6, Method::FlopL0, gate, &mut rng)?;
        for p in model.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.5..0.5));
        }
        let draws: Vec<Vec<f64>> = model.gates().iter().map(|g| (0..g.len()).map(|_| rng.gen::<f64>()).collect()).collect();
        let ids: Vec<usize> = (0..7).map(|_| rng.gen_range(0..6)).collect();
        let loss = move |m: &RecurrentLM, g: &mut Graph| -> Res<Var> {
            let mut noise = FixedNoise::new(draws.clone());
            let bound = m.bind(g, &mut MaskMode::Sample(&mut noise))?;
            let mut state = m.zero_state(1);
            let logits = m.forward(g, &bound, &ids[..6], 1, &mut state)?;
            g.softmax_cross_entropy(logits, &ids[1..])
        };
        w = w.max(fd_max_rel(&mut model, RecurrentLM::params_mut, &loss)?);
    }
    worst.push(("gated recurrent LM".to_string(), w));
    let secs = start.elapsed().as_secs_f64();
    let (name, max) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    verdict(
        max < 1e-4 && secs < 60.0,
        format!("{} checks, worst rel err {max:.2e} ({name}), {secs:.1}s", worst.len()),
    )
}

// ------------------------------------------------------------- 3: compaction

fn logits(model: &RecurrentLM, ids: &[usize], batch: usize) -> Res<Tensor> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, &mut MaskMode::Deterministic)?;
    let mut state = model.zero_state(batch);
    let l = model.forward(&mut g, &bound, ids, batch, &mut state)?;
    Ok(g.value(l).clone())
}

fn c3(corpus: &CharCorpus) -> Res<Verdict> {
    let cfg = desk_config(Method::FlopL0, 3, 300, 0.5, "prunable");
    let base = train(&cfg, corpus, |_, _| {})?.model;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let valid = &corpus.split(Split::Valid)[..4000];
    let ids = &valid[..64];
    let (mut max_diff, mut bpc_mismatch) = (0.0f64, 0);
    for _ in 0..20 {
        let mut m = base.clone();
        for mask in m.masks_mut() {
            let gate = mask.gate_mut().expect("hard concrete gates");
            gate.alpha.value.data_mut().iter_mut().for_each(|a| *a = rng.gen_range(-5.0..5.0));
        }
        let c = m.compact();
        max_diff = max_diff.max(logits(&m, ids, 4)?.max_abs_diff(&logits(&c, ids, 4)?));
        let (a, b) = (m.bpc(valid, 256)?, c.bpc(valid, 256)?);
        bpc_mismatch += usize::from(format!("{a:.6}") != format!("{b:.6}"));
    }
    verdict(
        max_diff < 1e-10 && bpc_mismatch == 0,
        format!("20 gate states: max |logit diff| {max_diff:.1e} (< 1e-10), bpc mismatches at 6 decimals {bpc_mismatch}"),
    )
}

// ------------------------------------------------------------- 4: column gating special case

fn c4() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut identical = 0;
    let trials = 20;
    for _ in 0..trials {
        let (lin, x) = gated_linear(&mut rng, true)?;
        let Linear::Column(col) = lin else { unreachable!() };
        let u: Vec<f64> = (0..col.d_in()).map(|_| rng.gen::<f64>()).collect();
        let run = |lin: Linear| -> Res<(Tensor, Tensor, Tensor, Tensor)> {
            let mut g = Graph::new();
            let mut noise = FixedNoise::new(vec![u.clone()]);
            let b = lin.bind(&mut g, &mut MaskMode::Sample(&mut noise))?;
            let xv = g.constant(x.clone())?;
            let y = b.forward(&mut g, xv)?;
            let t = g.tanh(y)?;
            let loss = g.sum(t)?;
            let out = g.value(y).clone();
            g.backward(loss)?;
            let grad = |p: &Param| g.param_grad(p.id()).cloned().unwrap();
            let params = lin.params();
            let alpha = lin.mask().and_then(Mask::param).unwrap();
            Ok((out, grad(params[0]), grad(params.iter().find(|p| p.name.ends_with(".b")).unwrap()), grad(alpha)))
        };
        let fac = Linear::Factorized(col.as_factorized());
        let a = run(Linear::Column(col))?;
        let b = run(fac)?;
        identical += usize::from(a == b);
    }
    verdict(identical == trials, format!("{identical}/{trials} layers with identical outputs and W, bias, gate gradients"))
}

// ------------------------------------------------------------- 5 and 9: size control

struct SizeRun {
    trainer: Trainer,
    /// `|s − t| / prunable` after the target schedule saturates.
    post_saturation: Vec<f64>,
    secs: f64,
}

fn size_run(corpus: &CharCorpus) -> Res<SizeRun> {
    let start = Instant::now();
    let cfg = desk_config(Method::FlopL0, 3, 6000, 0.5, "prunable");
    let mut post = Vec::new();
    let trainer = train(&cfg, corpus, |t, m| {
        let (Some(c), Some(target)) = (t.lagrangian(), m.target_size) else { return };
        if c.step >= c.anneal_steps {
            post.push((m.expected_size - target).abs() / c.prunable_total);
        }
    })?;
    Ok(SizeRun { trainer, post_saturation: post, secs: start.elapsed().as_secs_f64() })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

fn c5(run: &SizeRun) -> Res<Verdict> {
    let model = &run.trainer.model;
    let prunable = model.prunable_total() as f64;
    let target = 0.5 * prunable;
    let expected = model.expected_kept_prunable();
    let fixed = model.count().total - model.prunable_total();
    let compact = model.compact();
    let actual = compact.count().total - fixed;
    let exp_err = (expected - target).abs() / target;
    let act_err = (actual as f64 - target).abs() / target;
    let n = run.post_saturation.len();
    let tenth = (n / 10).max(1);
    let (early, late) = (mean(&run.post_saturation[..tenth]), mean(&run.post_saturation[n - tenth..]));
    let bookkeeping = actual == model.kept_prunable();
    verdict(
        exp_err < 0.05 && act_err < 0.05 && late < early && bookkeeping && run.secs < 900.0,
        format!(
            "{} params; expected kept off target by {:.2}%, compacted by {:.2}% (< 5%); \
             mean |s-t| after saturation {early:.4} -> {late:.4}; {:.0}s",
            model.count().total,
            exp_err * 100.0,
            act_err * 100.0,
            run.secs
        ),
    )
}

fn c9(run: &SizeRun) -> Res<Verdict> {
    let u = PruneReport::from_model(&run.trainer.model).undecided_gate_fraction;
    verdict(u <= 0.1, format!("{:.1}% of gates with open probability in (0.1, 0.9) (<= 10%)", u * 100.0))
}

// ------------------------------------------------------------- 6: target schedule

fn c6() -> Res<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exact = 0;
    for _ in 0..1000 {
        let m = rng.gen_range(1..10_000u64);
        let k = rng.gen_range(0..20_000u64);
        let prunable = rng.gen_range(1.0..1e6);
        let t_max = rng.gen_range(0.0..=prunable);
        let c = flop_core::LagrangianController::new(prunable, t_max, m, 1.0, flop_core::Violation::Raw)?;
        let removal = (k as f64 / m as f64).min(1.0) * (prunable - t_max);
        let target = if k >= m { t_max } else { prunable - removal };
        exact += usize::from(c.scheduled_removal(k) == removal && c.target_size(k) == target);
    }
    verdict(exact == 1000, format!("{exact}/1000 triples reproduce min(1, k/m) schedule exactly"))
}

// ------------------------------------------------------------- 7: speedup

fn c7() -> Res<Verdict> {
    let opts = BenchOptions::default();
    let r = bench_compacted(3056, 3056, 512, &[51, 102], 64, &opts)?;
    let (s90, s80) = (r[0].speedup, r[1].speedup);
    let unstable = r.iter().any(|b| b.unstable);
    verdict(
        s90 >= 1.5 && s80 >= 1.3,
        format!(
            "3056x3056 rank 512, {} trials: {s90:.2}x at 90% (>= 1.5), {s80:.2}x at 80% (>= 1.3){}",
            opts.trials,
            if unstable { ", timings flagged unstable" } else { "" }
        ),
    )
}

// ------------------------------------------------------------- 8 and 10: quality ordering, embedding

const SEEDS: [u64; 3] = [1, 2, 3];
const ORDERING_STEPS: u64 = 3000;

struct QualityRuns {
    bpc: Vec<(Method, Vec<f64>, Vec<f64>)>,
    /// Kept ranks of the most and least frequent embedding clusters per FLOP-L0 seed.
    clusters: Vec<(usize, usize)>,
}

fn quality_runs(corpus: &CharCorpus) -> Res<QualityRuns> {
    let mut bpc = Vec::new();
    let mut clusters = Vec::new();
    for method in [Method::FlopL0, Method::Fac, Method::NpL0] {
        let (mut scores, mut compressions) = (Vec::new(), Vec::new());
        for seed in SEEDS {
            let cfg = desk_config(method, seed, ORDERING_STEPS, 0.7, "total");
            let t = train(&cfg, corpus, |_, _| {})?;
            scores.push(t.evaluate(corpus, Split::Valid)?);
            compressions.push(PruneReport::from_model(&t.model).compression);
            if method == Method::FlopL0 {
                let ranks = t.model.layer_ranks();
                let kept = |name: &str| ranks.iter().find(|r| r.name == name).map_or(0, |r| r.kept);
                clusters.push((kept("embedding.c0"), kept("embedding.c2")));
            }
        }
        bpc.push((method, scores, compressions));
    }
    Ok(QualityRuns { bpc, clusters })
}

fn c8(q: &QualityRuns) -> Res<Verdict> {
    let mean_of = |m: Method| q.bpc.iter().find(|r| r.0 == m).map(|r| mean(&r.1)).unwrap();
    let (flop, fac, np) = (mean_of(Method::FlopL0), mean_of(Method::Fac), mean_of(Method::NpL0));
    let detail = q
        .bpc
        .iter()
        .map(|(m, b, c)| format!("{m} bpc {:.3} at {:.0}% compression", mean(b), mean(c) * 100.0))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(flop <= fac && flop <= np, format!("{} seeds, {ORDERING_STEPS} steps: {detail}", SEEDS.len()))
}

fn c10(q: &QualityRuns) -> Res<Verdict> {
    let wins = q.clusters.iter().filter(|(hi, lo)| hi >= lo).count();
    verdict(wins >= 2, format!("frequent vs rare cluster kept rank per seed {:?}; {wins}/3 seeds ordered", q.clusters))
}

// ------------------------------------------------------------- 11: AGP

fn c11(corpus: &CharCorpus) -> Res<Verdict> {
    let cfg = desk_config(Method::FlopAgp, 3, 3000, 0.5, "prunable");
    let mut prev: Option<Vec<Vec<bool>>> = None;
    let (mut subset, mut schedule_monotone, mut last_sparsity) = (true, true, 0.0f64);
    let t = train(&cfg, corpus, |t, m| {
        let now: Vec<Vec<bool>> = t.model.magnitude_masks().iter().map(|m| m.pruned.clone()).collect();
        if let Some(p) = &prev {
            subset &= p.iter().flatten().zip(now.iter().flatten()).all(|(a, b)| !a || *b);
        }
        prev = Some(now);
        if let Some(s) = m.sparsity {
            schedule_monotone &= s >= last_sparsity;
            last_sparsity = s;
        }
    })?;
    let SizeControl::Agp(sched) = &t.control else { unreachable!() };
    let cubic_monotone = (0..=t.total_steps).all(|k| sched.sparsity(k + 1) >= sched.sparsity(k));
    let (pruned, total): (usize, usize) = t
        .model
        .magnitude_masks()
        .iter()
        .fold((0, 0), |(p, n), m| (p + m.pruned.iter().filter(|x| **x).count(), n + m.len()));
    let achieved = pruned as f64 / total as f64;
    verdict(
        subset && schedule_monotone && cubic_monotone && achieved == sched.final_sparsity,
        format!(
            "zeroed sets nested: {subset}; schedule monotone: {}; final sparsity {pruned}/{total} = {achieved} vs target {}",
            schedule_monotone && cubic_monotone,
            sched.final_sparsity
        ),
    )
}

// ------------------------------------------------------------- driver

fn main() {
    let only: Option<HashSet<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().is_none_or(|o| o.contains(&i));
    let soft: HashSet<u32> = [8, 9, 10].into();
    let corpus = desk_corpus();
    let mut hard_failures = 0;
    let mut report = |i: u32, outcome: Res<Verdict>, secs: f64| {
        let (pass, detail) = match outcome {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let tag = if soft.contains(&i) { " (soft)" } else { "" };
        println!("criterion {i:>2}: {}{tag}  {detail}  [{secs:.1}s]", if pass { "PASS" } else { "FAIL" });
        if !pass && !soft.contains(&i) {
            hard_failures += 1;
        }
    };
    let timed = |f: &dyn Fn() -> Res<Verdict>| {
        let start = Instant::now();
        let v = f();
        (v, start.elapsed().as_secs_f64())
    };
    let simple: [(u32, &dyn Fn() -> Res<Verdict>); 5] =
        [(1, &c1), (2, &c2), (3, &|| c3(&corpus)), (4, &c4), (6, &c6)];
    for (i, f) in simple {
        if wanted(i) {
            let (v, s) = timed(f);
            report(i, v, s);
        }
    }
    if wanted(5) || wanted(9) {
        match size_run(&corpus) {
            Ok(run) => {
                if wanted(5) {
                    report(5, c5(&run), run.secs);
                }
                if wanted(9) {
                    report(9, c9(&run), 0.0);
                }
            }
            Err(e) => {
                for i in [5, 9].into_iter().filter(|&i| wanted(i)) {
                    report(i, failed(&e), 0.0);
                }
            }
        }
    }
    if wanted(7) {
        let (v, s) = timed(&c7);
        report(7, v, s);
    }
    if wanted(8) || wanted(10) {
        let start = Instant::now();
        let runs = quality_runs(&corpus);
        let secs = start.elapsed().as_secs_f64();
        match runs {
            Ok(q) => {
                if wanted(8) {
                    report(8, c8(&q), secs);
                }
                if wanted(10) {
                    report(10, c10(&q), 0.0);
                }
            }
            Err(e) => {
                for i in [8, 10].into_iter().filter(|&i| wanted(i)) {
                    report(i, failed(&e), secs);
                }
            }
        }
    }
    if wanted(11) {
        let (v, s) = timed(&|| c11(&corpus));
        report(11, v, s);
    }
    if hard_failures > 0 {
        println!("{hard_failures} hard criteria failed");
        std::process::exit(1);
    }
}
