use muir::alignment::{
    init_soft_weights, run_muir, AlignmentState, ModelState, MuirConfig, SelectionRule,
};
use muir::bank::{
    collapse_for_inference, generate_all, generate_from, init_bank, parameter_counts, soft_merge_block, usage_counts,
    BankConfig, Contexts, HypermoduleBank, ModuleId,
};
use muir::checkpoint::{decode_checkpoint, encode_checkpoint};
use muir::decompose::{assemble_layer, decompose_layer, extract_block, BlockShape, LayerSpec, PseudoTaskLocation};
use muir::synthetic::{generate_synthetic, DataConfig, JointLinearModel};
use muir::tensor::{mode1_product, softmax, Array, Tape, Var};
use muir::theory::{run_decomposed_ea, trial_rng, EaConfig, InitMode, LinearFitness, Sampling};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x6d75_6972),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let len = shape.iter().product();
    Array::new(shape.to_vec(), (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn locations(count: usize, fan_in: usize) -> Vec<PseudoTaskLocation> {
    (0..count)
        .map(|i| PseudoTaskLocation {
            index: i,
            layer: i,
            slot: 0,
            row: 0,
            col: 0,
            fan_in,
        })
        .collect()
}

/// Bank with `k` modules and an alignment over `l` locations that uses all
/// of them.
fn aligned_bank(rng: &mut ChaCha8Rng, cfg: BankConfig, l: usize, k: usize) -> (HypermoduleBank, Contexts, Vec<ModuleId>) {
    let locs = locations(l, cfg.m);
    let (mut bank, mut contexts) = init_bank(&locs, cfg, rng).unwrap();
    let mut psi: Vec<ModuleId> = (0..l).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
    // Shuffle so shared modules are scattered.
    for i in (1..l).rev() {
        psi.swap(i, rng.random_range(0..=i));
    }
    bank.recount(&psi).unwrap();
    bank.remove_orphans();
    for z in &mut contexts.values {
        *z = random_array(rng, &[cfg.c]);
    }
    (bank, contexts, psi)
}

proptest! {
    #![proptest_config(config(64))]

    #[test]
    fn mode1_matches_triple_loop(c in 1usize..6, m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = random_array(&mut rng, &[c, m, n]);
        let z = random_array(&mut rng, &[c]);
        let out = mode1_product(&h, &z).unwrap();
        prop_assert_eq!(out.shape(), &[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut expect = 0.0;
                for k in 0..c {
                    expect += h.data()[k * m * n + i * n + j] * z.data()[k];
                }
                prop_assert!((out.at2(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-700.0f64..700.0, 1..12)) {
        let p = softmax(&Array::vector(values.clone()));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted = softmax(&Array::vector(values.iter().map(|v| v + 123.0).collect()));
        prop_assert!(p.max_abs_diff(&shifted) <= 1e-12);
    }

    #[test]
    fn uniform_beliefs_at_default_alpha(lambda in 1usize..40) {
        let alpha = lambda as f64 / (lambda as f64 + 1.0);
        let p = softmax(&init_soft_weights(lambda, alpha).unwrap());
        for &v in p.data() {
            prop_assert!((v - 1.0 / (lambda as f64 + 1.0)).abs() <= 1e-12);
        }
    }

    #[test]
    fn decomposition_round_trips(
        kind in 0usize..4,
        p in 1usize..4,
        q in 1usize..4,
        m in 1usize..5,
        n in 1usize..5,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let spec = match kind {
            0 => LayerSpec::dense("d", p * m, q * n),
            1 => LayerSpec::conv1d("c", p * m, q * n, k),
            2 => LayerSpec::conv2d("c2", p * m, q * n, k, 2),
            // LSTM slots are (input, 4h) and (h, 4h); h is a multiple of m so both tile.
            _ => LayerSpec::lstm("l", p * m, m * q * n),
        };
        let shape = BlockShape::new(m, n);
        let locs = match decompose_layer(0, &spec, &shape, 0) {
            Ok(l) => l,
            Err(_) => return Ok(()),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slots: Vec<Array> = spec.slot_dims().iter().map(|&(r, c)| random_array(&mut rng, &[r, c])).collect();
        let blocks: Vec<(PseudoTaskLocation, Array)> =
            locs.iter().map(|l| (*l, extract_block(&slots, l, &shape).unwrap())).collect();
        prop_assert_eq!(locs.len() * m * n, spec.weight_count());
        let rebuilt = assemble_layer(0, &spec, &shape, &blocks).unwrap();
        prop_assert_eq!(rebuilt, slots);
    }

    #[test]
    fn inference_never_exceeds_original(
        l in 1usize..60,
        k_frac in 0.0f64..1.0,
        c in 0usize..6,
        m in 1usize..6,
        n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 1 + (k_frac * (l - 1) as f64) as usize;
        let psi: Vec<ModuleId> = (0..l).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let counts = parameter_counts(&psi, &BankConfig::new(c, m, n));
        prop_assert!(counts.inference <= counts.original);
    }

    #[test]
    fn collapse_preserves_outputs(
        l in 1usize..24,
        k_frac in 0.0f64..1.0,
        c in 1usize..5,
        m in 1usize..5,
        n in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BankConfig::new(c, m, n);
        let k = 1 + (k_frac * (l - 1) as f64) as usize;
        let (bank, contexts, psi) = aligned_bank(&mut rng, cfg, l, k);
        let collapsed = collapse_for_inference(&psi, &bank, &contexts).unwrap();
        let original = generate_all(&bank, &psi, &contexts).unwrap();
        for (a, b) in collapsed.blocks().unwrap().iter().zip(&original) {
            prop_assert!(a.max_abs_diff(b) <= 1e-10);
        }
        let counts = parameter_counts(&psi, &cfg);
        prop_assert_eq!(collapsed.parameter_count(), counts.inference);
        prop_assert!(collapsed.parameter_count() <= l * m * n);
    }

    #[test]
    fn one_hot_soft_merge_is_plain_generation(
        k in 1usize..6,
        pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = BankConfig::new(3, 4, 2);
        let (bank, _, _) = aligned_bank(&mut rng, cfg, k, k);
        let candidates: Vec<ModuleId> = bank.ids();
        let z = random_array(&mut rng, &[3]);
        let j = pick.index(candidates.len());
        let mut s = vec![f64::NEG_INFINITY; candidates.len()];
        s[j] = rng.random_range(-3.0..3.0);
        let merged = soft_merge_block(&bank, &candidates, &Array::vector(s), &z).unwrap();
        let direct = generate_from(&bank, candidates[j], &z).unwrap();
        prop_assert!(merged.max_abs_diff(&direct) <= 1e-12);
    }

    #[test]
    fn commit_keeps_usage_consistent(
        l in 2usize..40,
        lambda in 1usize..6,
        p in 0.05f64..1.0,
        rule in 0usize..2,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = locations(l, 4);
        let (mut bank, _) = init_bank(&locs, BankConfig::new(1, 4, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new((0..l).collect(), lambda);
        for _ in 0..3 {
            state.propose_candidates(&mut bank, &locs, p, 0.05, &mut rng).unwrap();
            for s in &mut state.soft {
                *s = random_array(&mut rng, &[lambda + 1]);
            }
            let rule = [SelectionRule::Belief, SelectionRule::Random][rule];
            state.commit_selection(&mut bank, rule, &mut rng).unwrap();
            let total: usize = bank.modules().map(|m| m.usage).sum();
            prop_assert_eq!(total, l);
            prop_assert!(bank.usage_consistent(&state.incumbent));
            prop_assert!(bank.modules().all(|m| m.usage > 0));
        }
    }

    #[test]
    fn commit_is_shift_invariant(
        l in 2usize..30,
        lambda in 1usize..6,
        shift in -50.0f64..50.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = locations(l, 4);
        let (mut bank, _) = init_bank(&locs, BankConfig::new(1, 4, 1), &mut rng).unwrap();
        let mut a = AlignmentState::new((0..l).collect(), lambda);
        a.propose_candidates(&mut bank, &locs, 0.5, 0.0, &mut rng).unwrap();
        for s in &mut a.soft {
            // Coarse values so that ties occur and exercise the tie rule.
            *s = Array::vector((0..=lambda).map(|_| f64::from(rng.random_range(0..3u8))).collect());
        }
        let mut b = a.clone();
        for s in &mut b.soft {
            *s = s.map(|v| v + shift);
        }
        let mut bank_b = bank.clone();
        a.commit_selection(&mut bank, SelectionRule::Belief, &mut rng).unwrap();
        b.commit_selection(&mut bank_b, SelectionRule::Belief, &mut rng).unwrap();
        prop_assert_eq!(a.incumbent, b.incumbent);
        prop_assert_eq!(bank, bank_b);
    }

    /// With one challenger, every location perturbed, and beliefs that rank
    /// slots by their true per-location fitness, a commit is exactly one
    /// generation of the per-location (1+1)-EA on the same proposals.
    #[test]
    fn oracle_beliefs_reproduce_the_ea_step(l in 2usize..50, steps in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let locs = locations(l, 1);
        let (mut bank, _) = init_bank(&locs, BankConfig::new(1, 1, 1), &mut rng).unwrap();
        bank.set_initial_count(l);
        let mut state = AlignmentState::new((0..l).collect(), 1);
        let fit = |m: ModuleId| f64::from(u8::from(m == 0));
        for _ in 0..steps {
            state.propose_candidates(&mut bank, &locs, 1.0, 0.0, &mut rng).unwrap();
            prop_assert_eq!(state.perturbed.len(), l);
            let expected: Vec<ModuleId> = (0..l)
                .map(|loc| {
                    let (inc, ch) = (state.incumbent[loc], state.candidates[0][loc]);
                    if fit(ch) > fit(inc) { ch } else { inc }
                })
                .collect();
            for loc in 0..l {
                let ms = state.modules_at(loc);
                state.soft[loc] = Array::vector(ms.iter().map(|&m| fit(m)).collect());
            }
            state.commit_selection(&mut bank, SelectionRule::Belief, &mut rng).unwrap();
            prop_assert_eq!(&state.incumbent, &expected);
        }
    }
}

/// Builds a random differentiable graph from `params` and returns its loss.
/// `plan` selects which optional ops appear.
fn build_graph(tape: &mut Tape, params: &[Array], plan: &[u8; 6], target: &Array) -> (Var, Vec<Var>) {
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    // params: h0, h1, h2 (c x m x n), z (c), s (3), x (r x m), bias (n)
    let [h0, h1, h2, z, s, x, bias] = leaves[..] else { unreachable!() };
    let blocks: Vec<Var> = [h0, h1, h2].iter().map(|&h| tape.mode1_product(h, z).unwrap()).collect();
    let probs = tape.softmax(s).unwrap();
    let mut block = tape.weighted_sum(&blocks, probs).unwrap();
    if plan[0] % 2 == 1 {
        block = tape.add(block, blocks[plan[1] as usize % 3]).unwrap();
    }
    let mut y = tape.matmul(x, block).unwrap();
    y = tape.add_bias(y, bias).unwrap();
    if plan[2] % 2 == 1 {
        y = tape.tanh(y);
    }
    if plan[3] % 2 == 1 {
        y = tape.mul(y, y).unwrap();
    }
    if plan[4] % 2 == 1 {
        let shape = tape.value(y).shape().to_vec();
        let flat = tape.reshape(y, &[shape[0] * shape[1]]).unwrap();
        y = tape.reshape(flat, &shape).unwrap();
    }
    let y = tape.scale(y, 0.5 + f64::from(plan[5] % 4));
    let fit = tape.mse(y, target.clone()).unwrap();
    let total = tape.sum(block);
    let reg = tape.mul(total, total).unwrap();
    let loss = tape.mean(&[fit, reg]).unwrap();
    (loss, leaves)
}

proptest! {
    #![proptest_config(config(128))]

    #[test]
    fn gradients_match_finite_differences(
        c in 1usize..4,
        m in 1usize..4,
        n in 1usize..4,
        r in 1usize..4,
        plan in any::<[u8; 6]>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes: [Vec<usize>; 7] = [vec![c, m, n], vec![c, m, n], vec![c, m, n], vec![c], vec![3], vec![r, m], vec![n]];
        let params: Vec<Array> = shapes.iter().map(|s| random_array(&mut rng, s)).collect();
        let target = random_array(&mut rng, &[r, n]);

        let mut tape = Tape::new();
        let (loss, leaves) = build_graph(&mut tape, &params, &plan, &target);
        let grads = tape.backward(loss).unwrap();

        let h = 1e-5;
        let eval = |ps: &[Array]| {
            let mut t = Tape::new();
            let (l, _) = build_graph(&mut t, ps, &plan, &target);
            t.value(l).item().unwrap()
        };
        for (pi, leaf) in leaves.iter().enumerate() {
            for e in 0..params[pi].len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[e] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let g = grads.wrt(*leaf).data()[e];
                let scale = g.abs().max(fd.abs()).max(1e-4);
                prop_assert!(
                    (g - fd).abs() / scale <= 1e-4,
                    "param {} entry {}: analytic {} vs numeric {}", pi, e, g, fd
                );
            }
        }
    }
}

#[test]
fn revert_restores_the_best_state_bit_for_bit() {
    let tasks = generate_synthetic(5, &DataConfig::default()).unwrap();
    let model = JointLinearModel::new(&tasks);
    let cfg = MuirConfig {
        n_gen: 12,
        n_iter: 20,
        n_final: 0,
        seed: 5,
        ..MuirConfig::synthetic()
    };
    let state = ModelState::pessimistic(&model, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let run = run_muir(&model, &cfg, state).unwrap();
    assert_eq!(run.state, run.best.state);
    let restored = decode_checkpoint(&encode_checkpoint(&run.best.state).unwrap()).unwrap();
    let a = generate_all(&restored.bank, &restored.psi, &restored.contexts).unwrap();
    let b = run.best.state.blocks().unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.data(), y.data());
    }
    assert_eq!(restored.psi, run.best.state.psi);
}

/// Whole-run check of the same equivalence: oracle-belief alignment and the
/// per-location EA take the same expected number of generations.
#[test]
fn oracle_alignment_matches_ea_runtime() {
    const L: usize = 64;
    const TRIALS: usize = 400;
    let locs = locations(L, 1);
    let fit = |m: ModuleId| f64::from(u8::from(m == 0));
    let mut muir_iters = Vec::new();
    for t in 0..TRIALS {
        let mut rng = trial_rng(11, t as u64);
        let (mut bank, _) = init_bank(&locs, BankConfig::new(1, 1, 1), &mut rng).unwrap();
        let mut state = AlignmentState::new((0..L).collect(), 1);
        let mut gens = 0;
        while state.incumbent.iter().any(|&m| m != 0) {
            state.propose_candidates(&mut bank, &locs, 1.0, 0.0, &mut rng).unwrap();
            for loc in 0..L {
                let ms = state.modules_at(loc);
                state.soft[loc] = Array::vector(ms.iter().map(|&m| fit(m)).collect());
            }
            state.commit_selection(&mut bank, SelectionRule::Belief, &mut rng).unwrap();
            gens += 1;
            assert!(usage_counts(&state.incumbent).contains_key(&0), "optimum module lost");
        }
        muir_iters.push(gens as f64);
    }
    let cfg = EaConfig::new(L, L, L, 1, Sampling::Proportional, InitMode::Pessimistic);
    let fitness = LinearFitness::unit(L);
    let ea_iters: Vec<f64> = (0..TRIALS)
        .map(|t| run_decomposed_ea(&cfg, &fitness, &mut trial_rng(12, t as u64)).unwrap().0 as f64)
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&muir_iters), mean(&ea_iters));
    assert!((a - b).abs() <= 0.1 * b, "alignment {a} vs EA {b}");
}
