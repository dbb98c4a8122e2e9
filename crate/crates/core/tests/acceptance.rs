//! End-to-end acceptance checks. Runs as a plain binary so every verdict is
//! printed, then exits non-zero if any check failed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eoslab::ddpm::{
    diffusion_loss, make_schedule, sample, sample_untrained, snr, to_signed, toy_two_mode,
    DdpmConfig, DiffusionMode, DiffusionModel, EpsPredictor, NoiseDraw, ScheduleKind,
};
use eoslab::metrics::{
    fid, gaussian_stats, image_fid, precision_recall, Embedder, GaussianStats, MetricsRecord,
};
use eoslab::nn::{Mode, Model, OptimizerKind, TrainConfig, UNetConfig};
use eoslab::partition::{enumerate_combinations, partition_tertiles};
use eoslab::runner::{self, RunConfig, RunDir};
use eoslab::tensor::{grad_check, Tape, Tensor, Var};
use eoslab::uncertainty::{
    expected_entropy, mc_forward, McSampleSet, PatientEntropy, UncertaintyReport,
};
use eoslab::Result;

type Verdict = std::result::Result<String, String>;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-6;
const GRAD_TOLERANCE: f64 = 1e-5;

/// `sum(y ⊙ w)` for a fixed random `w`, reducing any output to a scalar.
fn project(t: &mut Tape, y: Var, w: &Tensor) -> Result<Var> {
    let wv = t.constant(w.clone());
    let p = t.mul(y, wv)?;
    t.sum(p)
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut x = Tensor::uniform(shape, 0.1, 1.0, rng);
    for v in x.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    x
}

struct GradSuite {
    worst: BTreeMap<&'static str, f64>,
}

impl GradSuite {
    fn record(&mut self, name: &'static str, err: Result<f64>) -> std::result::Result<(), String> {
        let e = err.map_err(|e| format!("{name}: {e}"))?;
        let w = self.worst.entry(name).or_insert(0.0);
        *w = w.max(e);
        Ok(())
    }

    /// Checks a unary map `x -> project(f(x))`.
    fn unary(
        &mut self,
        name: &'static str,
        x: &Tensor,
        out_shape: &[usize],
        rng: &mut ChaCha8Rng,
        f: impl Fn(&mut Tape, Var) -> Result<Var>,
    ) -> std::result::Result<(), String> {
        let w = Tensor::randn(out_shape, rng);
        let err = grad_check(
            |t, v| {
                let y = f(t, v)?;
                project(t, y, &w)
            },
            x,
            FD_STEP,
        );
        self.record(name, err)
    }

    /// Checks a binary map with respect to each argument in turn.
    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        out_shape: &[usize],
        rng: &mut ChaCha8Rng,
        f: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
    ) -> std::result::Result<(), String> {
        let w = Tensor::randn(out_shape, rng);
        let first = grad_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let y = f(t, v, bv)?;
                project(t, y, &w)
            },
            a,
            FD_STEP,
        );
        self.record(name, first)?;
        let second = grad_check(
            |t, v| {
                let av = t.constant(a.clone());
                let y = f(t, av, v)?;
                project(t, y, &w)
            },
            b,
            FD_STEP,
        );
        self.record(name, second)
    }
}

/// The analytic gradient through a reversal layer must be `-λ` times the
/// finite-difference gradient of the identity.
fn reversal_error(x: &Tensor, lambda: f64, w: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let r = tape.grad_reverse(xv, lambda)?;
    let loss = project(&mut tape, r, w)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(xv).expect("gradient").data().to_vec();
    let numeric = grad_check_numeric(x, w)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a + lambda * n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}

fn grad_check_numeric(x: &Tensor, w: &Tensor) -> Result<Vec<f64>> {
    (0..x.numel())
        .map(|i| {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = x.clone();
                p.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.constant(p);
                let l = project(&mut t, v, w)?;
                t.value(l).item()
            };
            Ok((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP))
        })
        .collect()
}

fn unet_checks(
    suite: &mut GradSuite,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> std::result::Result<(), String> {
    let cfg = UNetConfig {
        depth: 2,
        base_channels: 2,
        ..UNetConfig::default()
    };
    let mut model = Model::new(cfg, seed).map_err(|e| e.to_string())?;
    // zero-initialised biases can park a pre-activation exactly on a ReLU
    // kink; check at a generic point instead
    for value in model.params.values_mut() {
        for v in value.data_mut() {
            *v += 0.05 * rng.gen_range(-1.0..1.0);
        }
    }
    let x = Tensor::uniform(&[1, 3, 8, 8], -0.5, 0.5, rng);
    let target = {
        let mut t = Tensor::uniform(&[1, 2, 8, 8], 0.0, 1.0, rng);
        let d = t.data_mut();
        for i in 0..64 {
            let s = d[i] + d[i + 64];
            d[i] /= s;
            d[i + 64] /= s;
        }
        t
    };
    let loss_with = |t: &mut Tape, bound: &eoslab::nn::Bound, input: Var| -> Result<Var> {
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        let logits = model.forward_on(t, bound, input, None, Mode::Eval, &mut no_rng)?;
        let y = t.constant(target.clone());
        t.cross_entropy(logits, y)
    };
    let err = grad_check(
        |t, v| {
            let bound = model.bind(t, false);
            loss_with(t, &bound, v)
        },
        &x,
        FD_STEP,
    );
    suite.record("unet (input)", err)?;
    for (name, value) in &model.params {
        let err = grad_check(
            |t, v| {
                let mut bound = model.bind(t, false);
                bound.replace(name, v)?;
                let xv = t.constant(x.clone());
                loss_with(t, &bound, xv)
            },
            value,
            FD_STEP,
        )
        .map_err(|e| eoslab::Error::InvalidArgument(format!("{name}: {e}")));
        suite.record("unet (parameters)", err)?;
    }
    Ok(())
}

fn ac1_gradients() -> Verdict {
    let start = Instant::now();
    let mut suite = GradSuite {
        worst: BTreeMap::new(),
    };
    for seed in 0..10u64 {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[2, 3, 4], rng);
        let b = Tensor::randn(&[2, 3, 4], rng);
        suite.binary("add", &a, &b, &[2, 3, 4], rng, |t, x, y| t.add(x, y))?;
        suite.binary("sub", &a, &b, &[2, 3, 4], rng, |t, x, y| t.sub(x, y))?;
        suite.binary("mul", &a, &b, &[2, 3, 4], rng, |t, x, y| t.mul(x, y))?;
        let m1 = Tensor::randn(&[3, 4], rng);
        let m2 = Tensor::randn(&[4, 2], rng);
        suite.binary("matmul", &m1, &m2, &[3, 2], rng, |t, x, y| t.matmul(x, y))?;
        let img = Tensor::randn(&[2, 3, 6, 6], rng);
        let k = Tensor::randn(&[4, 3, 3, 3], rng);
        suite.binary("conv2d", &img, &k, &[2, 4, 6, 6], rng, |t, x, y| {
            t.conv2d(x, y, 1, 1)
        })?;
        suite.binary(
            "conv2d (stride 2)",
            &img,
            &k,
            &[2, 4, 3, 3],
            rng,
            |t, x, y| t.conv2d(x, y, 2, 1),
        )?;
        let small = Tensor::randn(&[2, 3, 3, 3], rng);
        let kt = Tensor::randn(&[3, 2, 2, 2], rng);
        suite.binary(
            "conv_transpose2d",
            &small,
            &kt,
            &[2, 2, 6, 6],
            rng,
            |t, x, y| t.conv_transpose2d(x, y, 2, 0),
        )?;
        let signed = away_from_zero(&[2, 3, 4], rng);
        suite.unary("relu", &signed, &[2, 3, 4], rng, |t, x| t.relu(x))?;
        suite.unary("sigmoid", &a, &[2, 3, 4], rng, |t, x| t.sigmoid(x))?;
        let logits = Tensor::randn(&[2, 3, 2, 2], rng);
        suite.unary("softmax", &logits, &[2, 3, 2, 2], rng, |t, x| t.softmax(x))?;
        let positive = Tensor::uniform(&[2, 3, 4], 0.5, 2.0, rng);
        suite.unary("log", &positive, &[2, 3, 4], rng, |t, x| t.log(x))?;
        suite.unary("exp", &a, &[2, 3, 4], rng, |t, x| t.exp(x))?;
        suite.unary("mean", &a, &[], rng, |t, x| t.mean(x))?;
        suite.unary("mean_axes", &logits, &[2, 3], rng, |t, x| {
            t.mean_axes(x, &[2, 3])
        })?;
        suite.unary("sum", &a, &[], rng, |t, x| t.sum(x))?;
        suite.unary("reshape", &a, &[6, 4], rng, |t, x| t.reshape(x, &[6, 4]))?;
        let c2 = Tensor::randn(&[2, 2, 2, 2], rng);
        suite.binary(
            "concat_channels",
            &logits,
            &c2,
            &[2, 5, 2, 2],
            rng,
            |t, x, y| t.concat_channels(&[x, y]),
        )?;
        suite.unary("scale", &a, &[2, 3, 4], rng, |t, x| t.scale(x, -1.7))?;
        let mask = Tensor::new(
            vec![2, 3, 4],
            (0..24)
                .map(|_| if rng.gen_bool(0.5) { 2.0 } else { 0.0 })
                .collect(),
        )
        .expect("mask");
        suite.unary("dropout_apply", &a, &[2, 3, 4], rng, |t, x| {
            let m = t.constant(mask.clone());
            t.dropout_apply(x, m)
        })?;
        suite.binary("mse", &a, &b, &[], rng, |t, x, y| t.mse(x, y))?;
        let probs = {
            let mut p = Tensor::uniform(&[2, 3, 2, 2], 0.1, 1.0, rng);
            let d = p.data_mut();
            for n in 0..2 {
                for px in 0..4 {
                    let s: f64 = (0..3).map(|c| d[n * 12 + c * 4 + px]).sum();
                    for c in 0..3 {
                        d[n * 12 + c * 4 + px] /= s;
                    }
                }
            }
            p
        };
        suite.binary("cross_entropy", &logits, &probs, &[], rng, |t, x, y| {
            t.cross_entropy(x, y)
        })?;
        let w = Tensor::randn(&[2, 3, 4], rng);
        let lambda = rng.gen_range(0.1..2.0);
        suite.record("grad_reverse", reversal_error(&a, lambda, &w))?;
        unet_checks(&mut suite, rng, seed)?;
    }
    let elapsed = start.elapsed();
    let (name, worst) = suite
        .worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(n, w)| (*n, *w))
        .expect("checks ran");
    let summary = format!(
        "{} checks, worst relative error {worst:.2e} ({name}), {:.1}s",
        suite.worst.len(),
        elapsed.as_secs_f64()
    );
    if worst < GRAD_TOLERANCE && elapsed < Duration::from_secs(60) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- schedule

fn ac2_schedule() -> Verdict {
    let schedule = DdpmConfig::default()
        .schedule()
        .map_err(|e| e.to_string())?;
    let t_max = 1000;
    if schedule.steps != t_max {
        return Err(format!("default chain has {} steps", schedule.steps));
    }
    let mut product = 1.0;
    let mut worst = 0.0f64;
    for t in 1..=t_max {
        let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / (t_max - 1) as f64;
        product *= 1.0 - beta;
        let got = schedule.alpha_bar_at(t).map_err(|e| e.to_string())?;
        worst = worst.max((got - product).abs());
    }
    let ab = schedule.alpha_bar_at(t_max).map_err(|e| e.to_string())?;
    let s = snr(&schedule, t_max).map_err(|e| e.to_string())?;
    let summary = format!("alpha_bar_T {ab:.3e}, SNR(T) {s:.3e}, max oracle deviation {worst:.1e}");
    if ab < 1e-4 && s < 1e-4 && worst <= 1e-12 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- training loss stubs

struct Exact(Tensor);

impl EpsPredictor for Exact {
    fn predict_eps(&self, _: &Tensor, _: &[usize], _: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

struct Zero;

impl EpsPredictor for Zero {
    fn predict_eps(&self, xt: &Tensor, _: &[usize], _: Option<&Tensor>) -> Result<Tensor> {
        Ok(Tensor::zeros(xt.shape()))
    }
}

fn ac3_loss_stubs() -> Verdict {
    let schedule =
        make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).map_err(|e| e.to_string())?;
    let rng = &mut ChaCha8Rng::seed_from_u64(17);
    let x0 = Tensor::uniform(&[4, 1, 5, 5], -1.0, 1.0, rng);
    let mut worst_exact = 0.0f64;
    let mut total = 0.0;
    let draws = 10_000;
    for _ in 0..draws {
        let draw = NoiseDraw::sample(x0.shape(), schedule.steps, rng).map_err(|e| e.to_string())?;
        let exact = diffusion_loss(&Exact(draw.eps.clone()), &x0, None, &draw, &schedule)
            .map_err(|e| e.to_string())?;
        worst_exact = worst_exact.max(exact.abs());
        total += diffusion_loss(&Zero, &x0, None, &draw, &schedule).map_err(|e| e.to_string())?;
    }
    let mean = total / draws as f64;
    let summary =
        format!("exact stub loss {worst_exact:e}, zero stub loss {mean:.4} over {draws} draws");
    if worst_exact == 0.0 && (mean - 1.0).abs() <= 0.05 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- toy diffusion

fn ac4_toy_ddpm() -> Verdict {
    let start = Instant::now();
    let run = || -> Result<(f64, f64)> {
        let data = toy_two_mode(512, 8, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = DdpmConfig {
            base_channels: 8,
            ..DdpmConfig::desk_scale()
        };
        let mut model = DiffusionModel::new(&cfg, DiffusionMode::Generative, 1, 5)?;
        let before = sample_untrained(&model, 256, 8, &mut ChaCha8Rng::seed_from_u64(9))?;
        let untrained = image_fid(&data, &before, Embedder::RawDownsample)?;
        let train = TrainConfig {
            epochs: 5,
            learning_rate: 0.001,
            batch_size: 16,
            seed: 3,
            optimizer: OptimizerKind::Adam,
            momentum: 0.0,
        };
        model.fit(&to_signed(&data), None, &train)?;
        let after = sample(&model, 256, 8, &mut ChaCha8Rng::seed_from_u64(9))?;
        Ok((
            untrained,
            image_fid(&data, &after, Embedder::RawDownsample)?,
        ))
    };
    let (untrained, trained) = run().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ratio = trained / untrained;
    let summary = format!(
        "proxy-FID {trained:.3} trained vs {untrained:.3} untrained (ratio {ratio:.3}), {:.1}s",
        elapsed.as_secs_f64()
    );
    if ratio <= 0.5 && elapsed < Duration::from_secs(300) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- entropy

fn ac5_entropy() -> Verdict {
    let uniform =
        McSampleSet::new([4, 2, 2, 3, 3], vec![0.5; 4 * 2 * 2 * 9]).map_err(|e| e.to_string())?;
    let u = expected_entropy(&uniform);
    let u_err = u
        .values
        .iter()
        .map(|v| (v - std::f64::consts::LN_2).abs())
        .fold(0.0, f64::max);

    let rng = &mut ChaCha8Rng::seed_from_u64(4);
    let mut onehot = Vec::new();
    for _ in 0..3 * 2 * 9 {
        let c = rng.gen_range(0..2);
        onehot.push((
            c,
            [f64::from(u8::from(c == 0)), f64::from(u8::from(c == 1))],
        ));
    }
    // layout [M, N, C, H, W]
    let mut probs = vec![0.0; 3 * 2 * 2 * 9];
    for (idx, (_, p)) in onehot.iter().enumerate() {
        let (mn, px) = (idx / 9, idx % 9);
        probs[mn * 18 + px] = p[0];
        probs[mn * 18 + 9 + px] = p[1];
    }
    let hot =
        expected_entropy(&McSampleSet::new([3, 2, 2, 3, 3], probs).map_err(|e| e.to_string())?);
    let hot_max = hot.values.iter().cloned().fold(0.0, f64::max);

    let model = Model::new(
        UNetConfig {
            depth: 1,
            base_channels: 2,
            dropout_rate: 0.0,
            ..UNetConfig::default()
        },
        8,
    )
    .map_err(|e| e.to_string())?;
    let x = Tensor::uniform(&[2, 3, 8, 8], -0.5, 0.5, rng);
    let samples = mc_forward(&model, &x, 6, rng).map_err(|e| e.to_string())?;
    let first = samples.sample(0);
    let spread = (1..samples.samples())
        .flat_map(|k| {
            let s = samples.sample(k);
            s.data()
                .iter()
                .zip(first.data())
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);

    let summary =
        format!("uniform error {u_err:.1e}, one-hot max {hot_max:e}, dropout-0 spread {spread:e}");
    if u_err <= 1e-12 && hot_max == 0.0 && spread == 0.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- FID

fn ac6_fid() -> Verdict {
    let rng = &mut ChaCha8Rng::seed_from_u64(6);
    let vectors: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let stats = gaussian_stats(&vectors).map_err(|e| e.to_string())?;
    let same = fid(&stats, &stats).map_err(|e| e.to_string())?;
    let a = GaussianStats {
        mu: vec![3.0, 4.0],
        sigma: vec![1.0, 0.0, 0.0, 1.0],
    };
    let b = GaussianStats {
        mu: vec![0.0, 0.0],
        sigma: vec![1.0, 0.0, 0.0, 1.0],
    };
    let shifted = fid(&a, &b).map_err(|e| e.to_string())?;
    let summary = format!("identical {same:.1e}, mean shift (3,4) {shifted:.10}");
    if same.abs() <= 1e-8 && (shifted - 25.0).abs() <= 1e-6 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- partition

fn ac7_partition() -> Verdict {
    let rng = &mut ChaCha8Rng::seed_from_u64(7);
    let mut entries: Vec<PatientEntropy> = (0..30)
        .map(|i| PatientEntropy {
            patient_id: format!("E-{:03}", i + 1),
            entropy: rng.gen_range(0.0..0.7),
            patches: 10,
        })
        .collect();
    let reference = partition_tertiles(&UncertaintyReport::from_entries(entries.clone()))
        .map_err(|e| e.to_string())?;
    let sizes = (
        reference.low.len(),
        reference.medium.len(),
        reference.high.len(),
    );
    let mut stable = true;
    for _ in 0..20 {
        entries.shuffle(rng);
        let p = partition_tertiles(&UncertaintyReport::from_entries(entries.clone()))
            .map_err(|e| e.to_string())?;
        stable &= p == reference;
    }
    let combos = enumerate_combinations(&TrainConfig::default()).len();
    let summary = format!("sizes {sizes:?}, permutation stable {stable}, {combos} combinations");
    if sizes == (10, 10, 10) && stable && combos == 3 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- comparison run

fn find<'a>(
    records: &'a [MetricsRecord],
    name: &str,
) -> std::result::Result<&'a MetricsRecord, String> {
    records
        .iter()
        .find(|r| r.model == name)
        .ok_or_else(|| format!("no {name} row"))
}

fn ac8_comparison() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = RunConfig::load(&configs_dir().join("comparison.toml")).map_err(|e| e.to_string())?;
    let budget_ok = cfg.train.epochs == 100
        && cfg.train.learning_rate == 0.001
        && cfg.baseline.unet.dropout_rate == 0.5
        && cfg.mdan.unet.dropout_rate == 0.5;
    if !budget_ok {
        return Err("comparison config does not use the shared training budget".into());
    }
    let run = RunDir::open(dir.path(), Some(cfg)).map_err(|e| e.to_string())?;
    let results = runner::run_all(&run).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let base = find(&results, eoslab::baseline::BASELINE_NAME)?;
    let mdan = find(&results, eoslab::mdan::MDAN_NAME)?;
    let ddpm = find(&results, eoslab::ddpm::DDPM_NAME)?;
    let fid_of = |r: &MetricsRecord| match r.fid {
        eoslab::metrics::Fid::Value(v) => Some(v),
        _ => None,
    };
    let (mf, df) = (fid_of(mdan), fid_of(ddpm));
    let summary = format!(
        "MDAN P {:.3} R {:.3} vs MCD UNet P {:.3} R {:.3} (margins {:+.3} / {:+.3}); proxy-FID MDAN {} DDPM {}; {:.0}s",
        mdan.precision,
        mdan.recall,
        base.precision,
        base.recall,
        mdan.precision - base.precision,
        mdan.recall - base.recall,
        mdan.fid,
        ddpm.fid,
        elapsed.as_secs_f64()
    );
    let ordered = mdan.precision >= base.precision + 0.02
        && mdan.recall >= base.recall + 0.02
        && matches!((mf, df), (Some(m), Some(d)) if m < d)
        && elapsed < Duration::from_secs(15 * 60);
    if ordered {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- precision / recall

fn ac9_precision_recall() -> Verdict {
    let rng = &mut ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for _ in 0..100 {
        let density = rng.gen_range(0.05..0.95);
        let pred: Vec<u8> = (0..256).map(|_| u8::from(rng.gen_bool(density))).collect();
        let gt: Vec<u8> = (0..256).map(|_| u8::from(rng.gen_bool(density))).collect();
        let (mut tp, mut fp, mut fn_) = (0u32, 0u32, 0u32);
        for (p, g) in pred.iter().zip(&gt) {
            match (p, g) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let oracle = (
            f64::from(tp) / f64::from(tp + fp),
            f64::from(tp) / f64::from(tp + fn_),
        );
        if precision_recall(&pred, &gt).map_err(|e| e.to_string())? != oracle {
            mismatches += 1;
        }
    }
    let hand = precision_recall(&[1, 1, 0, 0], &[1, 0, 1, 0]).map_err(|e| e.to_string())?;
    let summary = format!("{mismatches} mismatches in 100 pairs, hand case {hand:?}");
    if mismatches == 0 && hand == (0.5, 0.5) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

// ---------------------------------------------------------------- determinism

const COMPARED: [&str; 3] = ["results.tsv", "results.md", "combinations.tsv"];

fn ac10_determinism() -> Verdict {
    let cfg = RunConfig::load(&configs_dir().join("smoke.toml")).map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir(), tempfile::tempdir()];
    let mut listings = Vec::new();
    for d in &dirs {
        let d = d.as_ref().map_err(|e| e.to_string())?;
        let run = RunDir::open(d.path(), Some(cfg.clone())).map_err(|e| e.to_string())?;
        runner::run_all(&run).map_err(|e| e.to_string())?;
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        for name in COMPARED {
            files.insert(
                name.into(),
                std::fs::read(d.path().join(name)).map_err(|e| e.to_string())?,
            );
        }
        for e in std::fs::read_dir(d.path().join("metrics")).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            let name = format!("metrics/{}", p.file_name().expect("file").to_string_lossy());
            files.insert(name, std::fs::read(&p).map_err(|e| e.to_string())?);
        }
        listings.push(files);
    }
    let n = listings[0].len();
    let summary = format!("{n} files compared across two runs");
    if n == COMPARED.len() + 9 && listings[0] == listings[1] {
        Ok(summary)
    } else {
        Err(format!("{summary}: contents differ"))
    }
}

fn main() {
    let checks: [(&str, fn() -> Verdict); 10] = [
        ("AC-1", ac1_gradients),
        ("AC-2", ac2_schedule),
        ("AC-3", ac3_loss_stubs),
        ("AC-4", ac4_toy_ddpm),
        ("AC-5", ac5_entropy),
        ("AC-6", ac6_fid),
        ("AC-7", ac7_partition),
        ("AC-8", ac8_comparison),
        ("AC-9", ac9_precision_recall),
        ("AC-10", ac10_determinism),
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| a.starts_with("AC-"))
        .collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !only.is_empty() && !only.iter().any(|o| o == name) {
            continue;
        }
        match check() {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
