//! Acceptance criteria, one PASS/FAIL line each. Exits nonzero on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ltlab::analysis::{self, TheoryParams};
use ltlab::config::{DatasetSource, ExperimentConfig};
use ltlab::core::autograd::{grad_check, grad_check_many, Graph, Var};
use ltlab::core::backbone::{adapter, AdapterConfig, PenultimateTap, ViTConfig};
use ltlab::core::data::{imbalance_factor, ClassPrior, LongTailProfile, SynthParams};
use ltlab::core::head::{cosine_logits, fuse, infer, total_loss, SciltConfig};
use ltlab::core::losses::{loss, loss_value, LossConfig, LossKind};
use ltlab::core::metrics::{bscore, round1};
use ltlab::core::model::{HeadConfig, Model, ModelConfig, SingleHeadConfig, TapChoice};
use ltlab::core::ot::{cost_matrix, exact_ot_small, sinkhorn, SinkhornConfig};
use ltlab::core::tensor::Tensor;
use ltlab::core::Rng;
use ltlab::run::{self, RunRecord};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String) -> Outcome {
    let took = start.elapsed();
    let detail = format!("{detail}; {:.1}s of {}s", took.as_secs_f64(), budget.as_secs());
    ensure(took <= budget, detail)
}

fn bscore_rows() -> Outcome {
    let rows = [((39.7, 11.1), 17.3), ((19.7, 20.8), 20.2), ((34.9, 15.1), 21.1)];
    let got: Vec<f64> = rows.iter().map(|&((o, m), _)| round1(bscore(o, m))).collect();
    let ok = rows.iter().zip(&got).all(|(&(_, want), g)| (g - want).abs() <= 0.05);
    ensure(ok, format!("got {got:?}"))
}

fn imbalance_arithmetic() -> Outcome {
    let rows = [((10277, 200), 51.4), ((4955, 183), 27.1), ((41046, 68), 603.6)];
    let mut got = Vec::new();
    for &((max, min), _) in &rows {
        got.push(round1(imbalance_factor(&[max, min]).map_err(|e| e.to_string())?));
    }
    let ok = rows.iter().zip(&got).all(|(&(_, want), g)| (g - want).abs() <= 0.05);
    ensure(ok, format!("got {got:?}"))
}

fn loss_equivalences() -> Outcome {
    let mut rng = Rng::new(30);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, c) = (1 + rng.below(16), 2 + rng.below(9));
        let logits = Tensor::uniform(&[n, c], -8.0, 8.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let counts: Vec<usize> = (0..c).map(|_| 1 + rng.below(500)).collect();
        let skewed = ClassPrior::from_counts(&counts).map_err(|e| e.to_string())?;
        let uniform = ClassPrior::uniform(c).map_err(|e| e.to_string())?;
        let value = |prior: &ClassPrior, cfg: LossConfig| loss_value(&logits, &labels, prior, &cfg).map_err(|e| e.to_string());
        let ce = value(&skewed, LossConfig::of(LossKind::Ce))?;
        let variants = [
            value(&uniform, LossConfig::of(LossKind::La))?,
            value(&skewed, LossConfig { gamma: 0.0, ..LossConfig::of(LossKind::Focal) })?,
            value(&skewed, LossConfig { beta: 0.0, ..LossConfig::of(LossKind::Cb) })?,
            value(&skewed, LossConfig { margin_scale: 0.0, ..LossConfig::of(LossKind::Ldam) })?,
        ];
        for v in variants {
            worst = worst.max((v - ce).abs());
        }
    }
    ensure(worst <= 1e-12, format!("max |loss - ce| = {worst:.2e} over 100 batches"))
}

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        vit: ViTConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            ffn_hidden: 8,
        },
        adapter: AdapterConfig {
            bottleneck: 2,
            scale: 1.0,
        },
        penultimate_tap: PenultimateTap::Normalized,
        head: HeadConfig::Scilt(SciltConfig::default()),
    }
}

fn weighted_sum(g: &mut Graph, x: Var, rng: &mut Rng) -> ltlab::core::Result<Var> {
    let w = Tensor::uniform(g.value(x).shape(), -1.0, 1.0, rng);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(40);
    let mut errs: Vec<(String, f64)> = Vec::new();
    let prior = ClassPrior::from_counts(&[40, 12, 5, 1]).map_err(|e| e.to_string())?;
    let labels = [0, 3, 1, 2, 0];
    let logits = Tensor::uniform(&[5, 4], -2.0, 2.0, &mut rng);
    for kind in LossKind::ALL {
        let cfg = LossConfig::of(kind);
        let e = grad_check(|g, z| loss(g, z, &labels, &prior, &cfg), &logits, 1e-6).map_err(|e| e.to_string())?;
        errs.push((kind.as_str().into(), e));
    }

    let fusion_pts = vec![
        Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4, 6], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[6], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[6], -1.0, 1.0, &mut rng),
    ];
    let mut wr = rng.derive(1);
    let w = Tensor::uniform(&[4, 6], -1.0, 1.0, &mut wr);
    let e = grad_check_many(
        |g, v| {
            let f = fuse(g, v[0], v[1], v[2], v[3])?;
            let c = g.constant(w.clone());
            let p = g.mul(f, c)?;
            Ok(g.sum(p))
        },
        &fusion_pts,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    errs.push(("fusion".into(), e));

    let adapter_pts = vec![
        Tensor::uniform(&[5, 6], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[6, 3], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng),
    ];
    let e = grad_check_many(
        |g, v| {
            let out = adapter(g, v[0], v[1], v[2], 0.7)?;
            weighted_sum(g, out, &mut Rng::new(41))
        },
        &adapter_pts,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    errs.push(("adapter".into(), e));

    let head_pts = vec![
        Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[5], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[5], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng),
        Tensor::uniform(&[4, 5], -1.0, 1.0, &mut rng),
    ];
    let e = grad_check_many(
        |g, v| {
            let f = fuse(g, v[0], v[1], v[2], v[3])?;
            let s1 = cosine_logits(g, f, v[4], 16.0)?;
            let s2 = cosine_logits(g, v[1], v[5], 16.0)?;
            total_loss(g, s1, s2, &[0, 1, 3, 2], &prior, 1.0)
        },
        &head_pts,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    errs.push(("dual head".into(), e));

    let mut m = Model::init(&toy_model_config(), 3, &Rng::new(42)).map_err(|e| e.to_string())?;
    let mut mr = Rng::new(43);
    for (name, shape) in [
        ("adapter.0.up", vec![2, 8]),
        ("adapter.1.up", vec![2, 8]),
        ("head.gate.w1", vec![8]),
        ("head.gate.w2", vec![8]),
    ] {
        m.store
            .assign(name, Tensor::uniform(&shape, -0.5, 0.5, &mut mr))
            .map_err(|e| e.to_string())?;
    }
    let images = Tensor::uniform(&[3, 4, 4, 1], 0.0, 1.0, &mut mr);
    let prior3 = ClassPrior::from_counts(&[10, 4, 1]).map_err(|e| e.to_string())?;
    let (_, trainable) = m.partition();
    let points: Vec<Tensor> = trainable.iter().map(|&i| m.store.get(i).tensor.clone()).collect();
    let e = grad_check_many(
        |g, vars| {
            let mut p = m.store.bind_with(g, |_| false);
            for (&id, &v) in trainable.iter().zip(vars) {
                p.replace(id, v);
            }
            let out = m.forward(g, &p, &images)?;
            m.loss(g, &out, &[0, 2, 1], &prior3)
        },
        &points,
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    errs.push(("end to end".into(), e));

    let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errs
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    if worst >= 1e-4 {
        return Err(format!("max relative error {worst:.2e}: {detail}"));
    }
    within_budget(start, Duration::from_secs(60), format!("max relative error {worst:.2e}: {detail}"))
}

fn sinkhorn_vs_exact() -> Outcome {
    let start = Instant::now();
    let mut rng = Rng::new(50);
    let cfg = SinkhornConfig {
        epsilon: 1e-3,
        log_domain: true,
        ..SinkhornConfig::default()
    };
    let (mut worst_gap, mut worst_violation) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (n, m) = (1 + rng.below(6), 1 + rng.below(6));
        let x = Tensor::uniform(&[n, 2], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[m, 2], -1.0, 1.0, &mut rng);
        let c = cost_matrix(&x, &y, 2.0).map_err(|e| e.to_string())?;
        let a = simplex(n, &mut rng);
        let b = simplex(m, &mut rng);
        let exact = exact_ot_small(&a, &b, &c).map_err(|e| e.to_string())?;
        let plan = sinkhorn(&a, &b, &c, &cfg).map_err(|e| e.to_string())?;
        let gap = (plan.cost - exact).abs() / exact.max(f64::MIN_POSITIVE);
        worst_gap = worst_gap.max(gap);
        worst_violation = worst_violation.max(plan.marginal_violation);
    }
    let detail = format!("max relative gap {worst_gap:.2e}, max marginal violation {worst_violation:.2e}");
    if worst_gap >= 0.01 || worst_violation >= 1e-8 {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(60), detail)
}

fn simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(0.1, 1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn fusion_algebra() -> Outcome {
    let mut rng = Rng::new(60);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, d) = (1 + rng.below(8), 1 + rng.below(16));
        let zp = Tensor::uniform(&[n, d], -3.0, 3.0, &mut rng);
        let zf = Tensor::uniform(&[n, d], -3.0, 3.0, &mut rng);
        let mut g = Graph::new();
        let (p, f) = (g.constant(zp.clone()), g.constant(zf.clone()));
        let w1 = g.constant(Tensor::zeros(&[d]));
        let w2 = g.constant(Tensor::zeros(&[d]));
        let z = fuse(&mut g, p, f, w1, w2).map_err(|e| e.to_string())?;
        for ((o, a), b) in g.value(z).data().iter().zip(zp.data()).zip(zf.data()) {
            worst = worst.max((o - (a + b)).abs());
        }
    }
    let mut flips = 0;
    for _ in 0..1000 {
        let (n, c) = (1 + rng.below(6), 2 + rng.below(8));
        let s1 = Tensor::uniform(&[n, c], -5.0, 5.0, &mut rng);
        let s2 = Tensor::uniform(&[n, c], -5.0, 5.0, &mut rng);
        let (mut t1, mut t2) = (s1.clone(), s2.clone());
        for i in 0..n {
            let (k1, k2) = (rng.uniform_range(-10.0, 10.0), rng.uniform_range(-10.0, 10.0));
            t1.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += k1);
            t2.data_mut()[i * c..(i + 1) * c].iter_mut().for_each(|v| *v += k2);
        }
        if infer(&s1, &s2).map_err(|e| e.to_string())? != infer(&t1, &t2).map_err(|e| e.to_string())? {
            flips += 1;
        }
    }
    ensure(
        worst <= 1e-12 && flips == 0,
        format!("zero-gate error {worst:.1e}; {flips} of 1000 shifted cases changed prediction"),
    )
}

fn small_config(name: &str, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = name.into();
    cfg.seed = seed;
    cfg.dataset = DatasetSource::Synth {
        profile: LongTailProfile {
            num_classes: 10,
            n_max: 100,
            imbalance_factor: 100.0,
        },
        params: SynthParams::default(),
        seed,
    };
    cfg.model.vit = ViTConfig {
        embed_dim: 16,
        depth: 2,
        heads: 2,
        ffn_hidden: 32,
        ..ViTConfig::default()
    };
    cfg.train.epochs = 3;
    cfg
}

fn rademacher_subadditivity() -> Outcome {
    let start = Instant::now();
    let cfg = small_config("theory", 0);
    let data = run::load_data(&cfg.dataset).map_err(|e| e.to_string())?;
    let (_, model) = run::train_run(&cfg, &data).map_err(|e| e.to_string())?;
    let images = analysis::head_images(&data.test, 200);
    let params = TheoryParams {
        draws: 10_000,
        ..TheoryParams::default()
    };
    let r = analysis::check_theory(&model, &images, params).map_err(|e| e.to_string())?;
    let detail = format!(
        "{} violating draws of {}; R(F1+F2) {:.5} vs R(F1)+R(F2) {:.5} (3 stderr {:.1e})",
        r.draw_violations,
        r.draws,
        r.r_combined,
        r.r_sum,
        3.0 * r.stderrs.difference
    );
    if !(r.holds && r.draw_violations == 0 && r.draws == 10_000) {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(120), detail)
}

fn behavior_config(name: &str, head: HeadConfig, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.name = name.into();
    cfg.seed = seed;
    cfg.dataset = DatasetSource::Synth {
        profile: LongTailProfile {
            num_classes: 10,
            n_max: 500,
            imbalance_factor: 100.0,
        },
        params: SynthParams::default(),
        seed,
    };
    cfg.model.head = head;
    cfg
}

fn dual_head_beats_baselines() -> Outcome {
    let start = Instant::now();
    let arms = [
        (
            "ce",
            HeadConfig::Single(SingleHeadConfig {
                loss: LossConfig::of(LossKind::Ce),
                tap: TapChoice::Final,
                ..SingleHeadConfig::default()
            }),
        ),
        ("scilt", HeadConfig::Scilt(SciltConfig::default())),
        (
            "no_fusion",
            HeadConfig::Scilt(SciltConfig {
                fusion: false,
                ..SciltConfig::default()
            }),
        ),
    ];
    let mut sums = [(0.0, 0.0); 3];
    for seed in 0..3 {
        let data = run::load_data(&behavior_config("data", HeadConfig::default(), seed).dataset)
            .map_err(|e| e.to_string())?;
        for (k, (name, head)) in arms.iter().enumerate() {
            let cfg = behavior_config(name, head.clone(), seed);
            let (r, _) = run::train_run(&cfg, &data).map_err(|e| e.to_string())?;
            let t = &r.test_report;
            eprintln!(
                "  seed {seed} {name:9} ovacc {:.1} macro {:.1} bscore {:.1} ({:.0}s)",
                t.ovacc, t.macro_acc, t.bscore, r.wall_clock_secs
            );
            sums[k].0 += t.macro_acc / 3.0;
            sums[k].1 += t.bscore / 3.0;
        }
    }
    let [ce, scilt, nofuse] = sums;
    let detail = format!(
        "mean macro/bscore: scilt {:.1}/{:.1}, ce {:.1}/{:.1}, no fusion bscore {:.1}",
        scilt.0, scilt.1, ce.0, ce.1, nofuse.1
    );
    if !(scilt.0 > ce.0 && scilt.1 > ce.1 && nofuse.1 < scilt.1) {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(15 * 60), detail)
}

fn determinism() -> Outcome {
    let start = Instant::now();
    let cfg = small_config("determinism", 7);
    let data = run::load_data(&cfg.dataset).map_err(|e| e.to_string())?;
    let strip = |mut r: RunRecord| {
        r.wall_clock_secs = 0.0;
        r
    };
    let (a, _) = run::train_run(&cfg, &data).map_err(|e| e.to_string())?;
    let again = run::load_data(&cfg.dataset).map_err(|e| e.to_string())?;
    let (b, _) = run::train_run(&cfg, &again).map_err(|e| e.to_string())?;
    let same_hash = a.checkpoint_sha256 == b.checkpoint_sha256;
    let frozen = a.frozen_unchanged && b.frozen_unchanged;
    let same_record = strip(a.clone()) == strip(b);
    let detail = format!(
        "hash {}, identical hashes {same_hash}, identical records {same_record}, frozen unchanged {frozen}",
        &a.checkpoint_sha256[..12]
    );
    if !(same_hash && frozen && same_record) {
        return Err(detail);
    }
    within_budget(start, Duration::from_secs(300), detail)
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("bscore reproduces the self-consistent table rows", bscore_rows),
        ("imbalance factor arithmetic", imbalance_arithmetic),
        ("loss reductions to cross-entropy", loss_equivalences),
        ("gradients match central differences", gradient_suite),
        ("sinkhorn within 1% of exact transport", sinkhorn_vs_exact),
        ("fusion and ensemble algebra", fusion_algebra),
        ("rademacher sub-additivity on a trained model", rademacher_subadditivity),
        ("dual head beats ce and the fusion-off ablation", dual_head_beats_baselines),
        ("runs are deterministic", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS criterion {n}: {name} ({d})"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {n}: {name} ({d})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
