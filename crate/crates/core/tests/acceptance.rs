//! Acceptance suite. Each criterion runs in isolation and prints one
//! `criterion N: PASS|FAIL` line; the process exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gancompress::autodiff::{Tape, Var};
use gancompress::export::count_params;
use gancompress::nn::{Ctx, Init, Mode, ParamStore};
use gancompress::objectives::{
    adv_loss_g, aggregate_cd, aggregate_pp, attention_map, distill_loss, total_loss, AdvLoss, DEFAULT_PP_WEIGHT,
};
use gancompress::pipeline::{self, RunConfig, SWEEP_ALPHAS};
use gancompress::pruning::{binarize_rule, MaskConfig, MaskState};
use gancompress::report::read_metrics;
use gancompress::train::{load_model, Ablation, Adam, GenModel, OptimState, TrainConfig};
use gancompress::verify::{gradcheck_suite, GRADCHECK_STEP, GRADCHECK_TOL};
use gancompress::Tensor;

type Outcome = Result<String, String>;
type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn gradient_correctness() -> Outcome {
    let mut checks = 0;
    for seed in [0, 1, 2] {
        for c in ok(gradcheck_suite(seed, GRADCHECK_STEP, GRADCHECK_TOL))? {
            ensure!(
                c.report.passed(),
                "{} (seed {seed}) rel error {:e} > {GRADCHECK_TOL:e}",
                c.name,
                c.report.worst()
            );
            checks += 1;
        }
    }
    Ok(format!(
        "{checks} checks over 3 seeds at h={GRADCHECK_STEP:e}, tol={GRADCHECK_TOL:e}"
    ))
}

/// Plain subgradient descent on `Σ|w_i + 1|` alone. Returns, per
/// coordinate, the first step within 1e-3 of −1 and the gate value there.
fn descend(w0: &[f64], lr: f64, max_steps: usize, cfg: &MaskConfig) -> Result<Vec<Option<(usize, f64)>>, String> {
    let mut store = ParamStore::<f64>::new();
    let mask = ok(MaskState::new(&mut store, "mask", w0.len(), cfg))?;
    store.set(mask.w, ok(Tensor::from_f64([w0.len()], w0))?);
    let mut first_hit = vec![None; w0.len()];
    for step in 1..=max_steps {
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, true);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
        let r = ok(mask.regularizer(&mut cx))?;
        let wv = cx.param(mask.w);
        let g = ok(cx.tape.backward(r))?.wrt(cx.tape, wv);
        let w: Vec<f64> = store
            .value(mask.w)
            .data()
            .iter()
            .zip(g.data())
            .map(|(w, g)| w - lr * g)
            .collect();
        store.set(mask.w, ok(Tensor::from_f64([w.len()], &w))?);
        let m = mask.mask_values(&store);
        for (i, &wi) in w.iter().enumerate() {
            if first_hit[i].is_none() && (wi + 1.0).abs() <= 1e-3 {
                first_hit[i] = Some((step, m.data()[i]));
            }
        }
    }
    Ok(first_hit)
}

fn mask_dynamics() -> Outcome {
    let lr = 1e-2;
    // Starts on the lr grid around −1, the default initialization among them.
    let w0 = [0.01, 0.0, 0.5, -0.37, -1.25, -2.0, 1.0, 0.99];
    let budget: Vec<usize> = w0
        .iter()
        .map(|w| ((w + 1.0f64).abs() / lr).ceil() as usize + 10)
        .collect();
    let max = *budget.iter().max().unwrap();
    // σ(−10) from high-precision evaluation; σ(−1000) ≈ 5.1e-435 is below
    // the smallest f64 and evaluates to 0.
    for (delta, oracle) in [(1e3, 0.0), (10.0, 4.5397868702434395e-05)] {
        let cfg = MaskConfig {
            delta,
            ..MaskConfig::default()
        };
        for (i, hit) in descend(&w0, lr, max, &cfg)?.into_iter().enumerate() {
            let (step, m) = hit.ok_or_else(|| format!("w0={} never within 1e-3 of −1", w0[i]))?;
            ensure!(
                step <= budget[i],
                "w0={} reached −1 at step {step}, budget {}",
                w0[i],
                budget[i]
            );
            ensure!(
                (m - oracle).abs() <= 1e-9,
                "δ={delta}, w0={}: mask {m:e} vs σ(−δ) {oracle:e}",
                w0[i]
            );
        }
    }
    Ok(format!(
        "{} starts within budget, σ(−δ) matched at δ=1e3 and δ=10",
        w0.len()
    ))
}

fn binarization_trick() -> Outcome {
    let pivot = 0.005;
    // ratio exactly α stays relaxed; one more gate at the pivot flips it.
    ensure!(
        binarize_rule(&[0.001f64, 0.002, 0.9, 0.8], pivot, 0.5).is_none(),
        "ratio = α must not binarize"
    );
    ensure!(
        binarize_rule(&[0.001f64, 0.005, 0.006, 0.8], pivot, 0.4) == Some(vec![false, false, true, true]),
        "gate at pivot must count as closed"
    );
    ensure!(
        binarize_rule(&[0.005f64; 4], pivot, 0.7) == Some(vec![false; 4]),
        "all-at-pivot must close every gate"
    );
    ensure!(
        binarize_rule(&[0.0051f64; 10], pivot, 0.0).is_none(),
        "no gate below pivot must not binarize"
    );
    let seven_of_ten: Vec<f64> = (0..10).map(|i| if i < 7 { 0.004 } else { 0.6 }).collect();
    ensure!(
        binarize_rule(&seven_of_ten, pivot, 0.7).is_none(),
        "7/10 at α=0.7 must stay relaxed"
    );
    ensure!(
        binarize_rule(&seven_of_ten, pivot, 0.69) == Some((0..10).map(|i| i >= 7).collect()),
        "7/10 at α=0.69 must binarize"
    );

    let cfg = MaskConfig::default();
    let logit = |m: f64| (m / (1.0 - m)).ln() / cfg.delta;
    let mut store = ParamStore::<f64>::new();
    let mut mask = ok(MaskState::new(&mut store, "mask", 10, &cfg))?;
    let w: Vec<f64> = (0..10)
        .map(|i| if i < 8 { logit(0.001) } else { logit(0.97) })
        .collect();
    store.set(mask.w, ok(Tensor::from_f64([10], &w))?);
    ensure!(mask.binarize_check(&mut store), "8/10 closed at α=0.7 must freeze");
    let frozen_m = mask.mask_values(&store);
    let frozen_w = store.value(mask.w).clone();

    let adam = Adam {
        beta1: 0.5,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = OptimState::new(&store);
    let x = Init::new(5).normal::<f64>(&[2, 10, 3, 3], 1.0);
    for step in 0..1000 {
        let mut tape = Tape::new();
        let vars = tape.bind_params(&store, true);
        let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
        let xv = cx.tape.constant(x.clone());
        let y = ok(mask.forward(&mut cx, xv))?;
        let y = ok(cx.tape.square(y))?;
        let y = ok(cx.tape.sum(y))?;
        let r = ok(mask.regularizer(&mut cx))?;
        let loss = ok(cx.tape.add(y, r))?;
        let wv = cx.param(mask.w);
        let grads = ok(cx.tape.backward(loss))?;
        let g = grads.wrt(cx.tape, wv);
        ensure!(
            g.data().iter().all(|&v| v == 0.0),
            "nonzero mask gradient at step {step}"
        );
        let all: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| grads.get(v).cloned()).collect();
        ok(adam.step(&mut store, &all, &mut state, 1e-1))?;
        mask.binarize_check(&mut store);
    }
    ensure!(mask.mask_values(&store) == frozen_m, "frozen mask values moved");
    ensure!(*store.value(mask.w) == frozen_w, "frozen mask parameters moved");
    Ok("boundary cases exact; 1000 Adam steps left frozen mask unchanged with zero gradient".into())
}

fn toy(num_classes: usize, width: usize, size: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::toy(num_classes, width, size);
    cfg.set_seed(seed);
    cfg.train.sample_grid_every_epoch = false;
    cfg.train.checkpoint_every_epoch = false;
    cfg
}

fn prune_equivalence(root: &Path) -> Outcome {
    let mut cfg = toy(8, 32, 32, 4);
    cfg.train.ablation = Ablation::NoCd;
    cfg.train.stop_when_frozen = true;
    cfg.train.steps_per_epoch = Some(150);
    let data = ok(pipeline::dataset(&cfg))?;
    let dir = root.join("equivalence");
    let run = ok(pipeline::run_student(&cfg, &data, None, &dir))?;
    ensure!(run.all_frozen, "masks not all frozen after {} steps", run.steps);
    let c = ok(pipeline::compress(&run.checkpoint, &dir, 100, 11))?;
    ensure!(
        c.max_deviation <= 1e-5,
        "max abs deviation {:e} > 1e-5",
        c.max_deviation
    );
    Ok(format!(
        "frozen after {} steps; max abs deviation {:e} over 100 pairs (f32)",
        run.steps, c.max_deviation
    ))
}

fn compression_accounting(root: &Path) -> Outcome {
    let mut cfg = toy(4, 16, 16, 5);
    cfg.train.stop_when_frozen = true;
    cfg.train.steps_per_epoch = Some(150);
    let data = ok(pipeline::dataset(&cfg))?;
    let teacher = ok(pipeline::run_teacher(&cfg, &data, &root.join("accounting_teacher")))?;
    let points = ok(pipeline::sweep_alpha(
        &cfg,
        &SWEEP_ALPHAS,
        &data,
        Some(&teacher.checkpoint),
        &root.join("sweep"),
    ))?;

    let mut after = Vec::new();
    let mut reduction_07 = None;
    for p in &points {
        let c = p
            .compressed
            .as_ref()
            .ok_or_else(|| format!("α={}: masks did not all freeze", p.alpha))?;
        let student = ok(load_model::<f32>(&p.run.checkpoint))?.gen;
        let pruned = ok(load_model::<f32>(&c.pruned))?.gen;
        for m in student.arch.masks() {
            let z = m.zero_fraction(&student.store);
            ensure!(
                m.is_frozen() && z >= p.alpha,
                "α={}: mask zero-fraction {z} < α",
                p.alpha
            );
        }
        for (name, g) in [("student", &student), ("pruned", &pruned)] {
            let formula = ok(count_params(&g.arch))?;
            let brute = g.store.trainable_numel() as u64;
            ensure!(
                formula == brute,
                "α={}: {name} formula {formula} != enumerated {brute}",
                p.alpha
            );
        }
        if p.alpha == 0.7 {
            reduction_07 = Some(c.report.net_prunable_reduction());
        }
        after.push(c.report.totals.params_after);
    }
    let r = reduction_07.ok_or("no α=0.7 point")?;
    ensure!(r >= 0.6, "net prunable reduction {r:.4} < 0.6 at α=0.7");
    ensure!(
        after.windows(2).all(|w| w[1] < w[0]),
        "parameter curve not decreasing: {after:?}"
    );
    Ok(format!(
        "net reduction {:.1}% at α=0.7; params after {after:?}",
        100.0 * r
    ))
}

fn distill(t: &mut Tape<f64>, a: Tensor<f64>, b: Tensor<f64>) -> Result<f64, String> {
    let (a, b) = (t.constant(a), t.constant(b));
    let l = ok(distill_loss(t, a, b))?;
    Ok(t.value(l).item())
}

fn distillation_properties() -> Outcome {
    let mut t = Tape::<f64>::new();
    let mut init = Init::new(21);
    let f = init.normal::<f64>(&[3, 4, 4], 1.0).map(|v| v * v);
    let same = distill(&mut t, f.clone(), f.clone())?;
    ensure!(same.abs() <= 1e-12, "identical maps gave {same:e}");
    let scaled = distill(&mut t, f.clone(), f.map(|v| 3.7 * v))?;
    ensure!(scaled.abs() <= 1e-12, "rescaled maps gave {scaled:e}");
    let mut a = Tensor::zeros([1, 4, 4]);
    let mut b = Tensor::zeros([1, 4, 4]);
    a.data_mut()[0] = 1.0;
    b.data_mut()[5] = 1.0;
    let disjoint = distill(&mut t, a, b)?;
    ensure!(
        (disjoint - 2f64.sqrt()).abs() <= 1e-6,
        "disjoint one-hot gave {disjoint}"
    );

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..10_000 {
        let (bsz, h, w) = (rng.random_range(1..4), rng.random_range(1..6), rng.random_range(1..6));
        let c = rng.random_range(1..5);
        let scale = 10f64.powf(rng.random_range(-3.0..3.0));
        let mut draw = |ch: usize| Tensor::from_fn([bsz, ch, h, w], |_| scale * rng.random_range(-1.0..1.0));
        let (ot, os) = (draw(c + 2), draw(c));
        let (ot, os) = (t.constant(ot), t.constant(os));
        let (ft, fs) = (ok(attention_map(&mut t, ot))?, ok(attention_map(&mut t, os))?);
        let l = ok(distill_loss(&mut t, ft, fs))?;
        let v = t.value(l).item();
        ensure!((0.0..=2.0).contains(&v), "trial {trial}: loss {v} outside [0, 2]");
        if trial % 256 == 0 {
            t = Tape::new();
        }
    }
    Ok("0 for identical/rescaled, √2 for disjoint one-hot, 10⁴ fuzz trials in [0, 2]".into())
}

fn loss_assembly() -> Outcome {
    let student = ok(GenModel::<f64>::build(&RunConfig::default().generator))?;
    let blocks = student.arch.blocks.len();
    let n_masks = student.arch.masks().count();
    ensure!(
        blocks == 5 && n_masks == 10,
        "toy student has {blocks} blocks and {n_masks} masks"
    );
    let distilled = TrainConfig::default().distill_blocks;
    ensure!(
        distilled.len() == 4,
        "default distillation over {} blocks",
        distilled.len()
    );

    // Mask k holds w = (−1 + 0.1k, −1 − 0.05k): Σ|w+1| = 0.15k, Σ_k = 6.75.
    let mut store = ParamStore::<f64>::new();
    let masks: Vec<MaskState> = (0..10)
        .map(|k| {
            let m = MaskState::new(&mut store, &format!("m{k}"), 2, &MaskConfig::default()).unwrap();
            let k = k as f64;
            store.set(m.w, Tensor::from_f64([2], &[-1.0 + 0.1 * k, -1.0 - 0.05 * k]).unwrap());
            m
        })
        .collect();
    let refs: Vec<&MaskState> = masks.iter().collect();
    let mut tape = Tape::new();
    let vars = tape.bind_params(&store, true);
    let mut cx = Ctx::new(&mut tape, &mut store, &vars, Mode::Train);
    let pp = ok(aggregate_pp(&mut cx, &refs))?;
    let pp_v = cx.tape.value(pp).item();
    ensure!((pp_v - 0.675).abs() <= 1e-12, "L_PP {pp_v} vs 0.675");

    let per_block: Vec<Var> = [0.2, 0.4, 0.6, 0.9]
        .iter()
        .map(|&v| cx.tape.constant(Tensor::scalar(v)))
        .collect();
    let cd = ok(aggregate_cd(cx.tape, &per_block))?;
    let cd_v = cx.tape.value(cd).item();
    ensure!((cd_v - 0.525).abs() <= 1e-12, "L_CD {cd_v} vs 0.525");

    let zeros = cx.tape.constant(Tensor::zeros([4]));
    let adv = ok(adv_loss_g(cx.tape, zeros, AdvLoss::NonSaturating))?;
    let adv_v = cx.tape.value(adv).item();
    ensure!((adv_v - std::f64::consts::LN_2).abs() <= 1e-12, "L_ADV {adv_v} vs ln 2");

    let total = ok(total_loss(cx.tape, Some(pp), Some(cd), adv, DEFAULT_PP_WEIGHT))?;
    let total_v = cx.tape.value(total).item();
    let expected = 0.01 * 0.675 + 0.525 + std::f64::consts::LN_2;
    ensure!((total_v - expected).abs() <= 1e-12, "total {total_v} vs {expected}");
    Ok(format!("L_PP 0.675, L_CD 0.525, total {expected}"))
}

fn column(rows: &[Vec<f64>], i: usize) -> Vec<f64> {
    rows.iter().map(|r| r[i]).collect()
}

fn smoke_ablations(root: &Path) -> Outcome {
    let cfg = toy(4, 16, 16, 3);
    let data = ok(pipeline::dataset(&cfg))?;
    let started = Instant::now();
    let teacher = ok(pipeline::run_teacher(&cfg, &data, &root.join("smoke_teacher")))?;
    let mut notes = Vec::new();
    for ablation in [Ablation::Full, Ablation::NoPp, Ablation::NoCd, Ablation::TwoStep] {
        let mut c = cfg.clone();
        c.train.ablation = ablation;
        let t = c.train.uses_cd().then_some(teacher.checkpoint.as_path());
        let run = ok(pipeline::run_student(
            &c,
            &data,
            t,
            &root.join(format!("smoke_{ablation}")),
        ))?;
        ensure!(run.epochs_run == 2, "{ablation}: ran {} epochs", run.epochs_run);
        let (_, rows) = ok(read_metrics(&run.metrics))?;
        ensure!(
            rows.iter().flatten().all(|v| v.is_finite()),
            "{ablation}: non-finite metric"
        );
        match ablation {
            Ablation::Full => {
                let cd = column(&rows, 4);
                let first = cd[..100].iter().sum::<f64>() / 100.0;
                let k = cd.len().div_ceil(10);
                let last = cd[cd.len() - k..].iter().sum::<f64>() / k as f64;
                let ratio = last / first;
                ensure!(
                    ratio <= 0.5,
                    "full: last-10% L_CD {last:.4} is {ratio:.3} of first-100 {first:.4}"
                );
                notes.push(format!("full L_CD ratio {ratio:.3}"));
            }
            Ablation::NoPp => {
                let most = column(&rows, 8).into_iter().fold(0.0, f64::max);
                ensure!(most == 0.0, "no_pp: {most} masks froze");
            }
            _ => {}
        }
    }
    notes.push(format!("{:.0?} total", started.elapsed()));
    Ok(notes.join(", "))
}

fn full_pipeline(cfg: &RunConfig, dir: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let data = ok(pipeline::dataset(cfg))?;
    let teacher = ok(pipeline::run_teacher(cfg, &data, &dir.join("teacher")))?;
    let student = ok(pipeline::run_student(
        cfg,
        &data,
        Some(&teacher.checkpoint),
        &dir.join("student"),
    ))?;
    ensure!(student.all_frozen, "student masks did not all freeze");
    let c = ok(pipeline::compress(
        &student.checkpoint,
        &dir.join("export"),
        cfg.equivalence_trials,
        cfg.train.seed,
    ))?;
    let report = ok(std::fs::read(dir.join("export").join("prune_report.csv")))?;
    ensure!(
        report == c.report.to_csv().into_bytes(),
        "report file differs from in-memory report"
    );
    let metrics = ok(std::fs::read(&student.metrics))?;
    Ok((metrics, report))
}

fn determinism(root: &Path) -> Outcome {
    let cfg = toy(4, 16, 16, 9);
    let a = full_pipeline(&cfg, &root.join("det_a"))?;
    let b = full_pipeline(&cfg, &root.join("det_b"))?;
    ensure!(a.0 == b.0, "metrics CSVs differ");
    ensure!(a.1 == b.1, "prune reports differ");
    let ta = ok(std::fs::read(root.join("det_a/teacher/metrics.csv")))?;
    let tb = ok(std::fs::read(root.join("det_b/teacher/metrics.csv")))?;
    ensure!(ta == tb, "teacher metrics differ");
    Ok(format!(
        "{} metric bytes and {} report bytes identical",
        a.0.len(),
        a.1.len()
    ))
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temporary directory");
    let root = root.path();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient correctness", Box::new(gradient_correctness)),
        ("mask dynamics", Box::new(mask_dynamics)),
        ("binarization trick", Box::new(binarization_trick)),
        ("prune equivalence", Box::new(|| prune_equivalence(root))),
        ("compression accounting", Box::new(|| compression_accounting(root))),
        ("distillation properties", Box::new(distillation_properties)),
        ("loss assembly", Box::new(loss_assembly)),
        ("ablation smoke", Box::new(|| smoke_ablations(root))),
        ("determinism", Box::new(|| determinism(root))),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL {name} ({secs:.1}s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
