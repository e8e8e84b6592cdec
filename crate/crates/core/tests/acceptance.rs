//! Acceptance run: one PASS/FAIL line per criterion A1–A8.
//!
//! The experimental criteria train real models, so the whole run takes tens
//! of minutes on one core. Every line is printed; the process exits nonzero
//! on a failed criterion only when `PEEL_ACCEPTANCE_STRICT=1`.
//! `PEEL_ACCEPTANCE_ONLY=A1,A7` restricts the run.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use peel_core::autodiff::{grad_check_at, AutodiffError, Bound, Tape, Tensor, Var};
use peel_core::graphs::{generate_synthetic, ContextModel, Dataset, MultiViewSample, SynthScenario};
use peel_core::harness::cli::run_cli;
use peel_core::harness::{intervene, make_splits, InterveneConfig, SplitConfig, Splits};
use peel_core::objective::{rho_schedule, total_loss, triv_loss, ObjectiveConfig, ObjectiveError};
use peel_core::peeling::{extract_saliency, forward_stack, trace_batch, BatchInput, ModelConfig, PeelError, PeelModel};
use peel_core::theory::verify_theory;
use peel_core::trainer::{evaluate, train, TrainConfig};

// A1
const GRAD_INSTANCES: usize = 20;
const GRAD_BATCH: usize = 8;
const GRAD_DEPTH: usize = 3;
const GRAD_WIDTH: usize = 16;
const GRAD_COORDS_PER_TENSOR: usize = 4;
const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// A3
const THEORY_BUDGET: Duration = Duration::from_secs(300);
// A4
const SPREAD_MAX: f64 = 0.05;
const SPREAD_BUDGET: Duration = Duration::from_secs(600);
// A4–A6 experiment
const KAPPA: f64 = 0.8;
const N_SAMPLES: usize = 2000;
const CONTEXT_STRENGTH: f64 = 1.0;
const SEEDS: [u64; 3] = [0, 1, 2];
const EXP_DEPTH: usize = 3;
const EXP_WIDTH: usize = 16;
const EXP_EPOCHS: usize = 40;
const DEPTHS: [usize; 4] = [1, 3, 5, 9];
const MIN_WINS: usize = 2;
const SWEEP_BUDGET: Duration = Duration::from_secs(1200);
// A6
const SALIENCY_MIN_CONTRAST: f64 = 0.15;
const SALIENCY_BUDGET: Duration = Duration::from_secs(600);
// A7
const SCHEDULE_EXPECTED: [f64; 5] = [0.5, 0.575, 0.65, 0.725, 0.8];
const SCHEDULE_TOL: f64 = 1e-15;

struct Line {
    id: &'static str,
    pass: bool,
}

fn report(id: &'static str, pass: bool, detail: String) -> Line {
    println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
    Line { id, pass }
}

fn grad_instance(seed: u64) -> (PeelModel, BatchInput) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = SynthScenario {
        min_nodes: 5,
        max_nodes: 9,
        feature_dim: 4,
        seed,
        ..SynthScenario::default()
    };
    let ds = generate_synthetic(&s, GRAD_BATCH).unwrap();
    let mut cfg = ModelConfig::for_dataset(&ds);
    cfg.depth = GRAD_DEPTH;
    cfg.encoder.hidden = GRAD_WIDTH;
    cfg.encoder.embed_dim = GRAD_WIDTH;
    cfg.seed = seed;
    let mut m = PeelModel::new(cfg).unwrap();
    // zero-initialized heads would hide their own derivative paths
    for id in m.params.ids().collect::<Vec<_>>() {
        for v in m.params.get_mut(id).data_mut() {
            if *v == 0.0 {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    let refs: Vec<&MultiViewSample> = ds.samples.iter().collect();
    let q = (0..GRAD_BATCH).map(|_| rng.random_range(-1.0..1.0)).collect();
    (m, BatchInput::new(&refs, q, &ds.view_ids).unwrap())
}

fn unwrap_peel(e: PeelError) -> AutodiffError {
    match e {
        PeelError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

fn unwrap_obj(e: ObjectiveError) -> AutodiffError {
    match e {
        ObjectiveError::Autodiff(a) => a,
        other => panic!("{other}"),
    }
}

fn a1() -> Line {
    let t = Instant::now();
    let cfg = ObjectiveConfig {
        lambda_cons: 0.3,
        gamma: 0.02,
        ..ObjectiveConfig::default()
    };
    let (mut worst, mut done, mut kinked, mut checked) = (0.0f64, 0, 0, 0);
    let mut seed = 0;
    while done < GRAD_INSTANCES {
        let (m, input) = grad_instance(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa1);
        seed += 1;
        let coords: Vec<(usize, usize)> = m
            .params
            .tensors()
            .iter()
            .enumerate()
            .flat_map(|(pi, p)| {
                let k = GRAD_COORDS_PER_TENSOR.min(p.len());
                rand::seq::index::sample(&mut rng, p.len(), k).into_iter().map(move |j| (pi, j)).collect::<Vec<_>>()
            })
            .collect();
        let f = |tape: &mut Tape, vars: &[Var]| {
            let sv = forward_stack(tape, &Bound::from_vars(vars.to_vec()), &m, &input).map_err(unwrap_peel)?;
            Ok(total_loss(tape, &sv, &input.y, &cfg).map_err(unwrap_obj)?.0)
        };
        let r = grad_check_at(f, m.params.tensors(), GRAD_STEP, &coords).unwrap();
        if r.non_differentiable_point {
            kinked += 1;
            continue;
        }
        worst = worst.max(r.max_rel_err);
        checked += r.checked;
        done += 1;
    }
    let el = t.elapsed();
    report(
        "A1",
        worst < GRAD_TOL && el < GRAD_BUDGET,
        format!(
            "gradient check: {done} instances (B={GRAD_BATCH}, L={GRAD_DEPTH}, D={GRAD_WIDTH}), {checked} coordinates, \
             max rel err {worst:.2e} (< {GRAD_TOL:.0e}), {kinked} kink instances redrawn, {:.1}s (< {}s)",
            el.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn a2() -> Line {
    let mut nonzero = 0;
    let mut params = 0;
    let mut trivial_moves = true;
    for seed in 100..120 {
        let (m, input) = grad_instance(seed);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true).unwrap();
        let sv = forward_stack(&mut tape, &bound, &m, &input).unwrap();
        let y = tape.constant(Tensor::vector(input.y.clone())).unwrap();
        let l = triv_loss(&mut tape, sv.t_sum, y, sv.y_c_star).unwrap();
        let g = tape.backward(l).unwrap();
        for id in m.causal_path_params() {
            params += 1;
            if g.get(bound.var(id)).data().iter().any(|&v| v != 0.0) {
                nonzero += 1;
            }
        }
        trivial_moves &= m
            .trivial_params()
            .iter()
            .any(|&id| g.get(bound.var(id)).data().iter().any(|&v| v != 0.0));
    }
    report(
        "A2",
        nonzero == 0 && trivial_moves,
        format!(
            "stop-gradient: {nonzero} of {params} causal-path parameter gradients of the trivial loss nonzero \
             over 20 random models (must be exactly 0); trivial parameters receive gradient: {trivial_moves}"
        ),
    )
}

fn a3() -> Line {
    let t = Instant::now();
    let checks = verify_theory(0).unwrap();
    let el = t.elapsed();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    for c in &checks {
        println!(
            "   {:<5} {:<48} predicted {:>12.6e} observed {:>12.6e} tol {:.1e}",
            if c.pass { "ok" } else { "FAIL" },
            c.name,
            c.predicted,
            c.observed,
            c.tolerance
        );
    }
    report(
        "A3",
        failed.is_empty() && el < THEORY_BUDGET,
        format!(
            "theory oracles: {}/{} checks pass{}, {:.1}s (< {}s)",
            checks.len() - failed.len(),
            checks.len(),
            if failed.is_empty() { String::new() } else { format!(" (failed: {failed:?})") },
            el.as_secs_f64(),
            THEORY_BUDGET.as_secs()
        ),
    )
}

struct Experiment {
    splits: Splits,
    ctx: ContextModel,
}

fn experiment() -> Experiment {
    let s = SynthScenario {
        noise_sd: SynthScenario::noise_sd_for_kappa(1.0, KAPPA),
        context_strength: CONTEXT_STRENGTH,
        ..SynthScenario::default()
    };
    let ds: Dataset = generate_synthetic(&s, N_SAMPLES).unwrap();
    Experiment {
        splits: make_splits(&ds, &SplitConfig::default(), 0.15),
        ctx: s.context(),
    }
}

fn exp_config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: EXP_EPOCHS,
        depth: EXP_DEPTH,
        hidden: EXP_WIDTH,
        embed_dim: EXP_WIDTH,
        seed,
        ..TrainConfig::default()
    }
}

struct Run {
    model: PeelModel,
    mse: f64,
    secs: f64,
}

fn run(e: &Experiment, cfg: &TrainConfig) -> Run {
    let t = Instant::now();
    let out = train(&e.splits.train, &e.splits.val, cfg, &e.ctx, None).unwrap();
    let m = evaluate(&out.model, &e.splits.test, cfg.batch_size, &e.ctx, cfg.seed).unwrap();
    Run {
        model: out.model,
        mse: m.mse,
        secs: t.elapsed().as_secs_f64(),
    }
}

const VARIANTS: [&str; 5] = ["no-split", "no-schedule", "no-trivial", "no-mono", "avg-causal-layer"];

fn variant_config(name: &str, seed: u64) -> TrainConfig {
    let mut c = exp_config(seed);
    let ab = &mut c.objective.ablations;
    match name {
        "full" => {}
        "no-split" => ab.no_split = true,
        "no-schedule" => ab.no_schedule = true,
        "no-trivial" => ab.no_trivial = true,
        "no-mono" => ab.no_mono = true,
        "avg-causal-layer" => ab.average_causal = true,
        other => panic!("unknown variant {other}"),
    }
    c
}

fn spread(e: &Experiment, m: &PeelModel) -> f64 {
    intervene(m, &e.splits.test, &InterveneConfig::default(), &e.ctx).unwrap().spread
}

fn a4(e: &Experiment, full: &[Run], no_split: &[Run]) -> Line {
    let t = Instant::now();
    let fs: Vec<f64> = full.iter().map(|r| spread(e, &r.model)).collect();
    let ns: Vec<f64> = no_split.iter().map(|r| spread(e, &r.model)).collect();
    let train_secs: f64 = full.iter().chain(no_split).map(|r| r.secs).sum();
    let secs = train_secs + t.elapsed().as_secs_f64();
    let bounded = fs.iter().all(|&s| s <= SPREAD_MAX);
    let smaller = fs.iter().zip(&ns).all(|(f, n)| f < n);
    report(
        "A4",
        bounded && smaller && secs < SPREAD_BUDGET.as_secs_f64(),
        format!(
            "re-batching spread over B∈{{8,16,32}}×shuffle: full {} (≤ {SPREAD_MAX}), no-split {}, \
             full smaller on every seed: {smaller}, {secs:.0}s (< {}s)",
            fmt(&fs),
            fmt(&ns),
            SPREAD_BUDGET.as_secs()
        ),
    )
}

fn fmt(v: &[f64]) -> String {
    format!("[{}]", v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", "))
}

fn a5(e: &Experiment, runs: &BTreeMap<&str, Vec<Run>>) -> Line {
    let t = Instant::now();
    let full: Vec<f64> = runs["full"].iter().map(|r| r.mse).collect();
    let mut parts = vec![format!("full {}", fmt(&full))];
    let mut directions = true;
    for v in VARIANTS {
        let mses: Vec<f64> = runs[v].iter().map(|r| r.mse).collect();
        let wins = full.iter().zip(&mses).filter(|(f, a)| f < a).count();
        directions &= wins >= MIN_WINS;
        parts.push(format!("{v} {} wins {wins}/{}", fmt(&mses), SEEDS.len()));
    }
    let mut depth_mse = Vec::new();
    for &d in &DEPTHS {
        let mses: Vec<f64> = if d == EXP_DEPTH {
            full.clone()
        } else {
            SEEDS
                .iter()
                .map(|&s| run(e, &TrainConfig { depth: d, ..exp_config(s) }).mse)
                .collect()
        };
        depth_mse.push(mses.iter().sum::<f64>() / mses.len() as f64);
    }
    let argmin = depth_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let interior = argmin != 0 && argmin != DEPTHS.len() - 1;
    let train_secs: f64 = runs.values().flatten().map(|r| r.secs).sum();
    let secs = train_secs + t.elapsed().as_secs_f64();
    report(
        "A5",
        interior && directions && secs < SWEEP_BUDGET.as_secs_f64(),
        format!(
            "depth sweep {DEPTHS:?} mean test MSE {} (interior minimum: {interior}); ablations: {}; \
             ≥{MIN_WINS}/{} wins each: {directions}; {secs:.0}s (< {}s)",
            fmt(&depth_mse),
            parts.join("; "),
            SEEDS.len(),
            SWEEP_BUDGET.as_secs()
        ),
    )
}

fn contrast(m: &PeelModel, test: &Dataset, layer: usize) -> f64 {
    let (mut hot, mut cold, mut nh, mut nc) = (0.0, 0.0, 0usize, 0usize);
    for chunk in test.samples.chunks(16).filter(|c| c.len() >= 2) {
        let refs: Vec<&MultiViewSample> = chunk.iter().collect();
        let input = BatchInput::new(&refs, vec![0.0; refs.len()], &m.config.views).unwrap();
        let trace = trace_batch(m, &input).unwrap();
        for (map, s) in extract_saliency(&trace, layer).unwrap().iter().zip(chunk) {
            let motif = s.motif.as_ref().expect("synthetic sample");
            for pis in map.views.values() {
                for (i, p) in pis.iter().enumerate() {
                    if motif.contains(&i) {
                        hot += p;
                        nh += 1;
                    } else {
                        cold += p;
                        nc += 1;
                    }
                }
            }
        }
    }
    hot / nh as f64 - cold / nc as f64
}

fn a6(e: &Experiment, full: &[Run]) -> Line {
    let t = Instant::now();
    let m = &full[0].model;
    let last = contrast(m, &e.splits.test, m.config.depth);
    let first = contrast(m, &e.splits.test, 1);
    let others: Vec<(f64, f64)> = full[1..]
        .iter()
        .map(|r| (contrast(&r.model, &e.splits.test, 1), contrast(&r.model, &e.splits.test, r.model.config.depth)))
        .collect();
    let secs = full[0].secs + t.elapsed().as_secs_f64();
    report(
        "A6",
        last >= SALIENCY_MIN_CONTRAST && last > first && secs < SALIENCY_BUDGET.as_secs_f64(),
        format!(
            "saliency contrast mean π(motif) − mean π(rest): layer {} {last:.3} (≥ {SALIENCY_MIN_CONTRAST}), \
             layer 1 {first:.3}; other seeds (layer 1, layer L): {}; {secs:.0}s (< {}s)",
            m.config.depth,
            others.iter().map(|(a, b)| format!("({a:.3}, {b:.3})")).collect::<Vec<_>>().join(" "),
            SALIENCY_BUDGET.as_secs()
        ),
    )
}

fn a7() -> Line {
    let got: Vec<f64> = (1..=5).map(|l| rho_schedule(l, 5, 0.5, 0.8)).collect();
    let err = got
        .iter()
        .zip(SCHEDULE_EXPECTED)
        .map(|(g, e)| (g - e).abs())
        .fold(0.0, f64::max);
    report(
        "A7",
        err <= SCHEDULE_TOL,
        format!("schedule L=5 on [0.5, 0.8]: {got:?}, max abs err {err:.1e} (≤ {SCHEDULE_TOL:.0e})"),
    )
}

fn a8() -> Line {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(
        &cfg,
        "[data]\nn = 120\n[data.synthetic]\nseed = 4\n[train]\nepochs = 3\ndepth = 2\nhidden = 8\nembed_dim = 8\n\
         [intervene]\nbatch_sizes = [8, 16]\n",
    )
    .unwrap();
    let files = ["train.log.jsonl", "train.history.json", "metrics.json", "model.ckpt.json"];
    let mut outputs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        let code = run_cli([
            "peel",
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--seed",
            "11",
        ]);
        assert_eq!(code, 0);
        let code = run_cli([
            "peel",
            "intervene",
            "--config",
            cfg.to_str().unwrap(),
            "--output",
            out.to_str().unwrap(),
            "--seed",
            "11",
            "--checkpoint",
            out.join("model.ckpt.json").to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        outputs.push(
            files
                .iter()
                .chain(&["intervention.json"])
                .map(|f| std::fs::read(out.join(f)).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    let same = outputs[0] == outputs[1];
    report(
        "A8",
        same,
        format!("determinism: train + intervene run twice with seed 11; {} artifacts byte-identical: {same}", files.len() + 1),
    )
}

fn main() {
    let only: Option<Vec<String>> = std::env::var("PEEL_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let want = |id: &str| only.as_ref().is_none_or(|o| o.iter().any(|x| x == id));
    let mut lines = Vec::new();
    if want("A1") {
        lines.push(a1());
    }
    if want("A2") {
        lines.push(a2());
    }
    if want("A3") {
        lines.push(a3());
    }
    if want("A4") || want("A5") || want("A6") {
        let e = experiment();
        let mut names = vec!["full"];
        if want("A4") || want("A5") {
            names.push("no-split");
        }
        if want("A5") {
            names.extend(&VARIANTS[1..]);
        }
        let mut runs: BTreeMap<&str, Vec<Run>> = BTreeMap::new();
        for name in names {
            let rs: Vec<Run> = SEEDS.iter().map(|&s| run(&e, &variant_config(name, s))).collect();
            println!(
                "   trained {name:<17} test MSE {} ({:.0}s)",
                fmt(&rs.iter().map(|r| r.mse).collect::<Vec<_>>()),
                rs.iter().map(|r| r.secs).sum::<f64>()
            );
            runs.insert(name, rs);
        }
        if want("A4") {
            lines.push(a4(&e, &runs["full"], &runs["no-split"]));
        }
        if want("A5") {
            lines.push(a5(&e, &runs));
        }
        if want("A6") {
            lines.push(a6(&e, &runs["full"]));
        }
    }
    if want("A7") {
        lines.push(a7());
    }
    if want("A8") {
        lines.push(a8());
    }
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        lines.len() - failed.len(),
        lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if !failed.is_empty() && std::env::var("PEEL_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
