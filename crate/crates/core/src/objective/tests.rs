use proptest::prelude::*;

use super::*;
use crate::autodiff::{grad_check, Bound};
use crate::graphs::{generate_synthetic, Dataset, MultiViewSample, SynthScenario};
use crate::peeling::{forward_stack, BatchInput, ModelConfig, PeelModel};

fn vecvar(tape: &mut Tape, v: &[f64]) -> Var {
    tape.constant(Tensor::vector(v.to_vec())).unwrap()
}

fn pearson(c: &[f64], y: &[f64], eps: f64) -> f64 {
    let mut tape = Tape::new();
    let (c, y) = (vecvar(&mut tape, c), vecvar(&mut tape, y));
    let r = pearson_batch(&mut tape, c, y, eps).unwrap();
    tape.value(r).item()
}

#[test]
fn pearson_examples() {
    let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 1e-8);
    assert!(r < 1.0 && 1.0 - r < 1e-7);
    let r = pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0], 1e-8);
    assert!(r > -1.0 && r + 1.0 < 1e-7);
    assert_eq!(pearson(&[1.0, 1.0, 1.0], &[0.3, -2.0, 5.0], 1e-8), 0.0);
}

#[test]
fn pearson_matches_the_plain_statistic() {
    let c = [0.3, -1.2, 2.2, 0.7, -0.4];
    let y = [1.0, -0.5, 1.9, 0.1, 0.2];
    assert!((pearson(&c, &y, 1e-8) - crate::stats::pearson(&c, &y, 1e-8)).abs() < 1e-15);
}

#[test]
fn pearson_needs_two_samples() {
    let mut tape = Tape::new();
    let c = vecvar(&mut tape, &[1.0]);
    assert!(matches!(
        pearson_batch(&mut tape, c, c, 1e-8),
        Err(ObjectiveError::BatchTooSmall(1))
    ));
}

#[test]
fn schedule_values() {
    let s: Vec<f64> = (1..=5).map(|l| rho_schedule(l, 5, 0.5, 0.8)).collect();
    for (a, b) in s.iter().zip([0.5, 0.575, 0.65, 0.725, 0.8]) {
        assert!((a - b).abs() <= 1e-15, "{a} vs {b}");
    }
    assert_eq!(rho_schedule(1, 7, 0.2, 0.9), 0.2);
    assert_eq!(rho_schedule(7, 7, 0.2, 0.9), 0.9);
    assert_eq!(rho_schedule(1, 1, 0.2, 0.9), 0.9);
    assert!((1..=4).all(|l| rho_schedule(l, 4, 0.6, 0.6) == 0.6));
    let cfg = ObjectiveConfig {
        ablations: Ablations {
            no_schedule: true,
            ..Ablations::default()
        },
        ..ObjectiveConfig::default()
    };
    assert_eq!(cfg.targets(3), vec![0.8; 3]);
}

#[test]
fn corr_loss_by_hand() {
    // c is orthogonal to the centered labels, so both correlations are 0
    let mut tape = Tape::new();
    let y = vecvar(&mut tape, &[1.0, 2.0, 3.0, 4.0]);
    let c = vecvar(&mut tape, &[1.0, -1.0, -1.0, 1.0]);
    let (l, corrs) = corr_loss(&mut tape, &[c, c], y, &[0.5, 0.8], 1e-8).unwrap();
    assert_eq!(tape.value(corrs[0]).item(), 0.0);
    assert!((tape.value(l).item() - 0.445).abs() < 1e-15);
    let (l, _) = corr_loss(&mut tape, &[y], y, &[pearson(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 1e-8)], 1e-8).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

fn mono(c: &[f64], gamma: f64) -> f64 {
    let mut tape = Tape::new();
    let vs: Vec<Var> = c.iter().map(|&v| tape.scalar(v).unwrap()).collect();
    let m = mono_loss(&mut tape, &vs, gamma).unwrap();
    tape.value(m).item()
}

#[test]
fn mono_loss_by_hand() {
    assert!((mono(&[0.5, 0.3], 0.1) - 0.3).abs() < 1e-15);
    assert_eq!(mono(&[0.3, 0.5], 0.1), 0.0);
    assert_eq!(mono(&[0.1, 0.2, 0.2, 0.7], 0.0), 0.0);
    assert_eq!(mono(&[0.9], 0.5), 0.0);
    assert!((mono(&[0.6, 0.4, 0.5], 0.0) - 0.1).abs() < 1e-15);
}

#[test]
fn triv_loss_example() {
    let mut tape = Tape::new();
    let t = vecvar(&mut tape, &[-0.01]);
    let y = vecvar(&mut tape, &[-0.80]);
    let yc = vecvar(&mut tape, &[-0.78]);
    let l = triv_loss(&mut tape, t, y, yc).unwrap();
    assert!((tape.value(l).item() - 1e-4).abs() < 1e-15);
}

#[test]
fn triv_loss_does_not_reach_the_causal_readout() {
    let mut tape = Tape::new();
    let t = tape.param(Tensor::vector(vec![0.2, -0.1])).unwrap();
    let yc = tape.param(Tensor::vector(vec![0.5, 0.4])).unwrap();
    let y = vecvar(&mut tape, &[1.0, 0.0]);
    let l = triv_loss(&mut tape, t, y, yc).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(!g.is_reachable(yc));
    assert_eq!(g.get(yc).data(), &[0.0, 0.0]);
    // d/dt mean((t - r)^2) = (t - r) for two samples
    assert!((g.get(t).data()[0] - (0.2 - 0.5)).abs() < 1e-15);
}

#[test]
fn consistency_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.5, 0.5]).unwrap()).unwrap();
    let b = tape.constant(Tensor::matrix(2, 2, vec![0.0, 2.0, -0.5, 0.5]).unwrap()).unwrap();
    let same = consistency_loss(&mut tape, &[a, a], 1e-12).unwrap();
    assert!(tape.value(same).item().abs() < 1e-10);
    let orth = consistency_loss(&mut tape, &[a, b], 1e-12).unwrap();
    assert!((tape.value(orth).item() - 1.0).abs() < 1e-10);
    let single = consistency_loss(&mut tape, &[a], 1e-12).unwrap();
    assert_eq!(tape.value(single).item(), 0.0);
}

#[test]
fn default_weights() {
    let c = ObjectiveConfig::default();
    assert_eq!(c.effective_weights(), [1.0, 0.5, 1.0, 0.0]);
    assert_eq!((c.rho_min, c.rho_max, c.gamma, c.eps), (0.5, 0.8, 0.0, 1e-8));
    let mut ns = c.clone();
    ns.ablations.no_split = true;
    assert_eq!(ns.effective_weights(), [0.0, 0.0, 0.0, 0.0]);
    let mut nm = c.clone();
    nm.ablations.no_mono = true;
    assert_eq!(nm.effective_weights(), [1.0, 0.0, 1.0, 0.0]);
    assert!(ObjectiveConfig {
        rho_min: 0.9,
        ..ObjectiveConfig::default()
    }
    .validate()
    .is_err());
    assert!(ObjectiveConfig {
        lambda_mono: -1.0,
        ..ObjectiveConfig::default()
    }
    .validate()
    .is_err());
}

fn data() -> Dataset {
    let s = SynthScenario {
        min_nodes: 5,
        max_nodes: 8,
        motif_size: 3,
        feature_dim: 4,
        seed: 5,
        ..SynthScenario::default()
    };
    generate_synthetic(&s, 8).unwrap()
}

fn small_model(ds: &Dataset, depth: usize, seed: u64) -> PeelModel {
    let mut cfg = ModelConfig::for_dataset(ds);
    cfg.depth = depth;
    cfg.encoder.hidden = 5;
    cfg.encoder.embed_dim = 4;
    cfg.encoder.rounds = 1;
    cfg.seed = seed;
    let mut m = PeelModel::new(cfg).unwrap();
    for id in m.params.ids().collect::<Vec<_>>() {
        if m.params.name(id).ends_with("u_q") {
            m.params.get_mut(id).data_mut()[0] = 0.25;
        }
    }
    m
}

fn batch(ds: &Dataset) -> BatchInput {
    let s: Vec<&MultiViewSample> = ds.samples.iter().collect();
    let q = (0..s.len()).map(|i| (i as f64).cos()).collect();
    BatchInput::new(&s, q, &ds.view_ids).unwrap()
}

fn loss_of(model: &PeelModel, input: &BatchInput, cfg: &ObjectiveConfig) -> LossBreakdown {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, true).unwrap();
    let vars = forward_stack(&mut tape, &bound, model, input).unwrap();
    total_loss(&mut tape, &vars, &input.y, cfg).unwrap().1
}

#[test]
fn breakdown_is_additive_bitwise() {
    let ds = data();
    let m = small_model(&ds, 3, 1);
    let input = batch(&ds);
    for cfg in [
        ObjectiveConfig::default(),
        ObjectiveConfig {
            lambda_cons: 0.5,
            gamma: 0.05,
            ..ObjectiveConfig::default()
        },
    ] {
        let b = loss_of(&m, &input, &cfg);
        assert_eq!(b.total, b.recompute_total());
        assert_eq!(b.layer_corr.len(), 3);
        assert!(b.corr >= 0.0 && b.mono >= 0.0 && b.cons >= 0.0);
    }
}

#[test]
fn no_split_reduces_to_prediction_loss() {
    let ds = data();
    let m = small_model(&ds, 3, 2);
    let mut cfg = ObjectiveConfig::default();
    cfg.ablations.no_split = true;
    let b = loss_of(&m, &batch(&ds), &cfg);
    assert_eq!(b.total, b.pred);
    let zero = ObjectiveConfig {
        lambda_caus: 0.0,
        lambda_mono: 0.0,
        lambda_unif: 0.0,
        ..ObjectiveConfig::default()
    };
    let b = loss_of(&m, &batch(&ds), &zero);
    assert_eq!(b.total, b.pred);
}

#[test]
fn perfect_fit_with_met_targets_has_zero_loss() {
    // one layer, no trivial contribution, c = y exactly, target = the attained correlation
    let mut tape = Tape::new();
    let y = [0.5, -1.0, 2.0, 0.25];
    let yv = vecvar(&mut tape, &y);
    let zeros = vecvar(&mut tape, &[0.0; 4]);
    let rho = pearson(&y, &y, 1e-8);
    let vars = StackVars {
        c: vec![yv],
        t: vec![zeros],
        y_c_star: yv,
        t_sum: zeros,
        causal_readout: yv,
        y_hat: yv,
        view_z: vec![],
        alphas: vec![],
        gate_weights: vec![],
        trivial_gate_weights: vec![],
    };
    let cfg = ObjectiveConfig {
        rho_min: rho,
        rho_max: rho,
        ..ObjectiveConfig::default()
    };
    let (_, b) = total_loss(&mut tape, &vars, &y, &cfg).unwrap();
    assert_eq!(b.total, 0.0);
}

#[test]
fn trivial_loss_leaves_every_causal_parameter_untouched() {
    let ds = data();
    let input = batch(&ds);
    for seed in 0..5 {
        let m = small_model(&ds, 3, seed);
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, true).unwrap();
        let vars = forward_stack(&mut tape, &bound, &m, &input).unwrap();
        let y = vecvar(&mut tape, &input.y);
        let l = triv_loss(&mut tape, vars.t_sum, y, vars.y_c_star).unwrap();
        let g = tape.backward(l).unwrap();
        for id in m.causal_path_params() {
            assert!(g.get(bound.var(id)).data().iter().all(|&v| v == 0.0), "{}", m.params.name(id));
        }
        assert!(m
            .trivial_params()
            .iter()
            .any(|&id| g.get(bound.var(id)).data().iter().any(|&v| v != 0.0)));
    }
}

#[test]
fn full_objective_gradient_matches_finite_differences() {
    let ds = data();
    let input = batch(&ds);
    let m = small_model(&ds, 3, 7);
    let cfg = ObjectiveConfig {
        lambda_cons: 0.3,
        gamma: 0.02,
        ..ObjectiveConfig::default()
    };
    let f = |tape: &mut Tape, vars: &[Var]| {
        let bound = Bound::from_vars(vars.to_vec());
        let sv = forward_stack(tape, &bound, &m, &input).map_err(|e| match e {
            crate::peeling::PeelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        let (l, _) = total_loss(tape, &sv, &input.y, &cfg).map_err(|e| match e {
            ObjectiveError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        Ok(l)
    };
    let r = grad_check(f, m.params.tensors(), 1e-5).unwrap();
    assert!(r.checked > 500);
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

#[test]
fn corr_loss_gradient_on_random_columns() {
    let cols: Vec<Tensor> = (0..3)
        .map(|l| Tensor::vector((0..8).map(|i| ((i * 7 + l * 3) as f64 * 0.61).sin()).collect()))
        .collect();
    let y: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
    let f = |tape: &mut Tape, vars: &[Var]| {
        let yv = tape.constant(Tensor::vector(y.clone()))?;
        let (l, _) = corr_loss(tape, vars, yv, &[0.5, 0.65, 0.8], 1e-8).map_err(|e| match e {
            ObjectiveError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        Ok(l)
    };
    let r = grad_check(f, &cols, 1e-6).unwrap();
    assert_eq!(r.checked, 24);
    assert!(r.max_rel_err < 1e-4, "{r:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pearson_is_affine_invariant(
        c in prop::collection::vec(-3.0f64..3.0, 6),
        y in prop::collection::vec(-3.0f64..3.0, 6),
        a in 0.1f64..10.0,
        b in -5.0f64..5.0,
    ) {
        let spread = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread(&c) > 0.1 && spread(&y) > 0.1);
        let moved: Vec<f64> = c.iter().map(|v| a * v + b).collect();
        let (r0, r1) = (pearson(&c, &y, 1e-8), pearson(&moved, &y, 1e-8));
        prop_assert!((r0 - r1).abs() < 1e-6);
        prop_assert!(r0.abs() < 1.0);
    }

    #[test]
    fn penalties_are_non_negative(
        corrs in prop::collection::vec(-1.0f64..1.0, 1..6),
        gamma in 0.0f64..0.3,
    ) {
        prop_assert!(mono(&corrs, gamma) >= 0.0);
        let sorted = {
            let mut s = corrs.clone();
            s.sort_by(f64::total_cmp);
            s
        };
        prop_assert_eq!(mono(&sorted, 0.0), 0.0);
    }
}
