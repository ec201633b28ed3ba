use fapnet_autodiff::gradcheck::grad_check;
use fapnet_autodiff::nn::{bilstm, linear, Activation, AttentionPool, BiLstm, Linear, LstmCell, LstmState, MlpBlock};
use fapnet_autodiff::{Init, ParamStore, Tape, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// element contributes a distinct gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let w = random_vec(&mut rng(seed ^ 0xabc), out.numel());
    let w = tape.constant(w, out.rows(), out.cols()).unwrap();
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Gradient check with respect to data leaves of the given shapes.
fn check_inputs<B>(shapes: &[(usize, usize)], seed: u64, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
    let x0 = random_vec(&mut rng(seed), n);
    let f = |x: &[f64]| {
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for &(r, c) in shapes {
            vars.push(tape.leaf(x[off..off + r * c].to_vec(), r, c, true).unwrap());
            off += r * c;
        }
        let out = build(&mut tape, &vars);
        let loss = project(&mut tape, out, seed);
        let g = tape.backward(loss);
        let grad = vars.iter().flat_map(|v| g.wrt(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; v.numel()])).collect();
        (tape.scalar(loss), grad)
    };
    grad_check(f, &x0, TOL).max_rel_error
}

/// Gradient check with respect to every parameter of `store` (and data leaves).
fn check_params<B>(store: &ParamStore<f64>, input_shapes: &[(usize, usize)], seed: u64, build: B) -> f64
where
    B: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Var,
{
    let n_in: usize = input_shapes.iter().map(|(r, c)| r * c).sum();
    let mut x0 = random_vec(&mut rng(seed), n_in);
    x0.extend(store.flatten());
    let f = |x: &[f64]| {
        let mut s = store.clone();
        s.set_flat(&x[n_in..]).unwrap();
        s.zero_grad();
        let mut tape = Tape::new();
        let mut vars = Vec::new();
        let mut off = 0;
        for &(r, c) in input_shapes {
            vars.push(tape.leaf(x[off..off + r * c].to_vec(), r, c, true).unwrap());
            off += r * c;
        }
        let out = build(&mut tape, &s, &vars);
        let loss = project(&mut tape, out, seed);
        let g = tape.backward(loss);
        let mut grad: Vec<f64> =
            vars.iter().flat_map(|v| g.wrt(*v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; v.numel()])).collect();
        s.accumulate(&g.param_grads(s.len()), 1.0);
        grad.extend(s.flatten_grads());
        (tape.scalar(loss), grad)
    };
    grad_check(f, &x0, TOL).max_rel_error
}

#[test]
fn linear_identity_and_constant() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
    let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3, 3).unwrap();
    let zero_b = tape.zeros(1, 3);
    let y = linear(&mut tape, x, eye, Some(zero_b)).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let w0 = tape.zeros(3, 2);
    let b = tape.constant(vec![0.5, -2.0], 1, 2).unwrap();
    let y = linear(&mut tape, x, w0, Some(b)).unwrap();
    assert_eq!(tape.value(y), &[0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn linear_matches_hand_product_and_gradient() {
    let mut r = rng(11);
    let x = random_vec(&mut r, 6);
    let w = random_vec(&mut r, 6);
    let b = random_vec(&mut r, 2);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone(), 2, 3).unwrap();
    let wv = tape.constant(w.clone(), 3, 2).unwrap();
    let bv = tape.constant(b.clone(), 1, 2).unwrap();
    let y = linear(&mut tape, xv, wv, Some(bv)).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let hand: f64 = (0..3).map(|k| x[i * 3 + k] * w[k * 2 + j]).sum::<f64>() + b[j];
            assert!((tape.value(y)[i * 2 + j] - hand).abs() < 1e-15);
        }
    }
    for seed in 0..3 {
        let err = check_inputs(&[(2, 3), (3, 2), (1, 2)], seed, |t, v| linear(t, v[0], v[1], Some(v[2])).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn linear_shape_mismatch_is_reported() {
    let mut tape = Tape::<f64>::new();
    let x = tape.zeros(2, 3);
    let w = tape.zeros(4, 2);
    let err = linear(&mut tape, x, w, None).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn elementwise_and_structural_ops_gradients() {
    for seed in 0..3 {
        let err = check_inputs(&[(3, 4)], seed, |t, v| t.tanh(v[0]));
        assert!(err < TOL, "tanh {err}");
        let err = check_inputs(&[(3, 4)], seed, |t, v| t.sigmoid(v[0]));
        assert!(err < TOL, "sigmoid {err}");
        let err = check_inputs(&[(3, 4), (3, 4)], seed, |t, v| t.mul(v[0], v[1]).unwrap());
        assert!(err < TOL, "mul {err}");
        let err = check_inputs(&[(3, 2), (3, 3)], seed, |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]).unwrap();
            let s = t.slice_cols(c, 1, 4).unwrap();
            t.tanh(s)
        });
        assert!(err < TOL, "concat/slice {err}");
        let err = check_inputs(&[(4, 3)], seed, |t, v| {
            let g = t.gather_rows(v[0], vec![3, 0, 0, 2, 1, 3]).unwrap();
            let s = t.stack_rows(&[g, v[0]]).unwrap();
            t.scale(s, 0.7)
        });
        assert!(err < TOL, "gather/stack {err}");
        let err = check_inputs(&[(6, 1)], seed, |t, v| t.softmax_groups(v[0], 3).unwrap());
        assert!(err < TOL, "softmax {err}");
        let err = check_inputs(&[(6, 3), (6, 1)], seed, |t, v| t.group_weighted_sum(v[0], v[1], 2).unwrap());
        assert!(err < TOL, "weighted sum {err}");
        let err = check_inputs(&[(8, 3)], seed, |t, v| t.standardize_groups(v[0], 4).unwrap());
        assert!(err < TOL, "standardize {err}");
    }
}

#[test]
fn relu_gradient_away_from_kink() {
    // Inputs drawn in [-1, 1] are at least 1e-3 from zero for these seeds.
    for seed in 0..3 {
        let err = check_inputs(&[(3, 4)], seed, |t, v| t.relu(v[0]));
        assert!(err < TOL, "relu {err}");
    }
}

#[test]
fn mlp_block_residual_identity() {
    let mut store = ParamStore::<f64>::new();
    let block = MlpBlock::new(&mut store, "b", 3, &[3, 3], Activation::Relu, &mut rng(0));
    assert!(block.shortcut.is_none());
    store.set_flat(&vec![0.0; store.numel()]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0], 2, 3).unwrap();
    let y = block.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn mlp_block_single_layer_is_linear_activation_residual() {
    let mut store = ParamStore::<f64>::new();
    let block = MlpBlock::new(&mut store, "b", 3, &[2], Activation::Tanh, &mut rng(1));
    let mut tape = Tape::new();
    let x = tape.constant(random_vec(&mut rng(2), 6), 2, 3).unwrap();
    let y = block.forward(&mut tape, &store, x).unwrap();
    let l = block.layers[0].forward(&mut tape, &store, x).unwrap();
    let a = tape.tanh(l);
    let s = block.shortcut.as_ref().unwrap().forward(&mut tape, &store, x).unwrap();
    let expected = tape.add(a, s).unwrap();
    assert_eq!(tape.value(y), tape.value(expected));
}

#[test]
fn mlp_block_gradient() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let block = MlpBlock::new(&mut store, "b", 4, &[5, 3], Activation::Tanh, &mut rng(seed));
        let err = check_params(&store, &[(3, 4)], seed, |t, s, v| block.forward(t, s, v[0]).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn attention_pool_fixed_point_and_saturation() {
    let mut store = ParamStore::<f64>::new();
    let pool = AttentionPool::new(&mut store, "att", 2, &mut rng(4));
    let mut tape = Tape::new();
    let same = tape.constant(vec![0.3, -0.7, 0.3, -0.7, 0.3, -0.7], 3, 2).unwrap();
    let out = pool.forward(&mut tape, &store, same, 3).unwrap();
    for (o, e) in tape.value(out).iter().zip([0.3, -0.7]) {
        assert!((o - e).abs() < 1e-15);
    }

    // Score weight (1, 0): the member with a huge first coordinate dominates.
    store.set_flat(&[1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(vec![0.0, 1.0, 1000.0, 2.0, 0.5, 3.0], 3, 2).unwrap();
    let out = pool.forward(&mut tape, &store, x, 3).unwrap();
    assert!((tape.value(out)[0] - 1000.0).abs() < 1e-9);
    assert!((tape.value(out)[1] - 2.0).abs() < 1e-9);
}

#[test]
fn attention_pool_gradient() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let pool = AttentionPool::new(&mut store, "att", 4, &mut rng(seed));
        let err = check_params(&store, &[(6, 4)], seed, |t, s, v| pool.forward(t, s, v[0], 3).unwrap());
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

fn cell(seed: u64, input: usize, hidden: usize) -> (ParamStore<f64>, LstmCell) {
    let mut store = ParamStore::<f64>::new();
    let c = LstmCell::new(&mut store, "lstm", input, hidden, &mut rng(seed));
    (store, c)
}

#[test]
fn lstm_zero_params_give_zero_state() {
    let (mut store, c) = cell(0, 3, 2);
    store.set_flat(&vec![0.0; store.numel()]).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(vec![1.0, 2.0, 3.0], 1, 3).unwrap();
    let s0 = c.zero_state(&mut tape, 1);
    let s = c.step(&mut tape, &store, x, s0).unwrap();
    assert_eq!(tape.value(s.h), &[0.0, 0.0]);
    assert_eq!(tape.value(s.c), &[0.0, 0.0]);
}

#[test]
fn lstm_forced_gates_keep_cell() {
    let (mut store, c) = cell(0, 2, 2);
    let h = 2;
    store.set_flat(&vec![0.0; store.numel()]).unwrap();
    let bias = store.get_mut(c.bias).tensor.values_mut();
    for v in &mut bias[0..h] {
        *v = -1e3;
    }
    for v in &mut bias[h..2 * h] {
        *v = 1e3;
    }
    let mut tape = Tape::new();
    let x = tape.constant(vec![0.4, -0.9], 1, 2).unwrap();
    let h0 = tape.constant(vec![0.2, 0.1], 1, 2).unwrap();
    let c0 = tape.constant(vec![0.75, -1.25], 1, 2).unwrap();
    let s = c.step(&mut tape, &store, x, LstmState { h: h0, c: c0 }).unwrap();
    assert_eq!(tape.value(s.c), &[0.75, -1.25]);
}

#[test]
fn lstm_cell_gradient() {
    for seed in 0..3 {
        let (store, c) = cell(seed, 3, 2);
        let err = check_params(&store, &[(2, 3), (2, 2), (2, 2)], seed, |t, s, v| {
            let st = c.step(t, s, v[0], LstmState { h: v[1], c: v[2] }).unwrap();
            t.concat_cols(&[st.h, st.c]).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn bilstm_single_step_sees_same_input() {
    let mut store = ParamStore::<f64>::new();
    let bi = BiLstm::new(&mut store, "bi", 3, 2, &mut rng(5));
    let mut tape = Tape::new();
    let x = tape.constant(random_vec(&mut rng(6), 3), 1, 3).unwrap();
    let out = bi.forward(&mut tape, &store, &[x]).unwrap();
    let s0 = bi.forward.zero_state(&mut tape, 1);
    let f = bi.forward.step(&mut tape, &store, x, s0).unwrap();
    let s0 = bi.backward.zero_state(&mut tape, 1);
    let b = bi.backward.step(&mut tape, &store, x, s0).unwrap();
    let expected: Vec<f64> = tape.value(f.h).iter().chain(tape.value(b.h)).copied().collect();
    assert_eq!(tape.value(out[0]), expected.as_slice());
}

#[test]
fn bilstm_reversal_swaps_halves() {
    let mut store = ParamStore::<f64>::new();
    let bi = BiLstm::new(&mut store, "bi", 3, 2, &mut rng(7));
    let mut r = rng(8);
    let mut tape = Tape::new();
    let xs: Vec<Var> = (0..4).map(|_| tape.constant(random_vec(&mut r, 6), 2, 3).unwrap()).collect();
    let out = bilstm(&mut tape, &store, &xs, &bi.forward, &bi.backward).unwrap();
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let out_rev = bilstm(&mut tape, &store, &rev, &bi.backward, &bi.forward).unwrap();
    let t_len = xs.len();
    for t in 0..t_len {
        let a = tape.value(out[t]);
        let b = tape.value(out_rev[t_len - 1 - t]);
        for row in 0..2 {
            assert_eq!(&a[row * 4..row * 4 + 2], &b[row * 4 + 2..row * 4 + 4]);
            assert_eq!(&a[row * 4 + 2..row * 4 + 4], &b[row * 4..row * 4 + 2]);
        }
    }
}

#[test]
fn bilstm_gradient_three_steps() {
    for seed in 0..3 {
        let mut store = ParamStore::<f64>::new();
        let bi = BiLstm::new(&mut store, "bi", 2, 3, &mut rng(seed));
        let err = check_params(&store, &[(2, 2), (2, 2), (2, 2)], seed, |t, s, v| {
            let out = bi.forward(t, s, v).unwrap();
            t.stack_rows(&out).unwrap()
        });
        assert!(err < TOL, "seed {seed}: {err}");
    }
}

#[test]
fn layer_cost_formulas_match_tape_count() {
    let mut store = ParamStore::<f32>::new();
    let mut r = rng(9);
    let lin = Linear::new(&mut store, "l", 5, 7, true, &mut r);
    let block = MlpBlock::new(&mut store, "m", 5, &[6, 6], Activation::Relu, &mut r);
    let pool = AttentionPool::new(&mut store, "a", 6, &mut r);
    let c = LstmCell::new(&mut store, "c", 6, 4, &mut r);
    let mut tape = Tape::new();
    let x = tape.constant(vec![0.1; 12 * 5], 12, 5).unwrap();

    let before = tape.flops();
    lin.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.flops() - before, lin.flops(12));

    let before = tape.flops();
    let h = block.forward(&mut tape, &store, x).unwrap();
    assert_eq!(tape.flops() - before, block.flops(12));

    let before = tape.flops();
    let p = pool.forward(&mut tape, &store, h, 4).unwrap();
    assert_eq!(tape.flops() - before, pool.flops(3, 4));

    let s0 = c.zero_state(&mut tape, 3);
    let before = tape.flops();
    c.step(&mut tape, &store, p, s0).unwrap();
    assert_eq!(tape.flops() - before, c.step_flops(3));

    assert_eq!(lin.num_params(), 5 * 7 + 7);
    assert_eq!(block.num_params() + lin.num_params() + pool.num_params() + c.num_params(), store.numel());
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let bi = BiLstm::new(&mut store, "bi", 3, 4, &mut rng(10));
        let mut tape = Tape::new();
        let mut r = rng(12);
        let xs: Vec<Var> = (0..5)
            .map(|_| tape.constant(random_vec(&mut r, 6).iter().map(|&v| v as f32).collect(), 2, 3).unwrap())
            .collect();
        let out = bi.forward(&mut tape, &store, &xs).unwrap();
        out.iter().flat_map(|v| tape.value(*v).to_vec()).collect::<Vec<f32>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn init_follows_fan_in_and_forget_bias() {
    let mut store = ParamStore::<f64>::new();
    let c = LstmCell::new(&mut store, "c", 16, 8, &mut rng(13));
    let bound = 1.0 / 4.0;
    assert!(store.get(c.w_ih).tensor.values().iter().all(|v| v.abs() <= bound));
    let b = store.get(c.bias).tensor.values();
    assert!(b[..8].iter().all(|&v| v == 0.0));
    assert!(b[8..16].iter().all(|&v| v == 1.0));
    assert!(b[16..].iter().all(|&v| v == 0.0));
    let mut s2 = ParamStore::<f64>::new();
    s2.add("z", vec![2, 2], Init::Zeros, &mut rng(0));
    assert_eq!(s2.flatten(), vec![0.0; 4]);
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(values in proptest::collection::vec(-50.0f64..50.0, 1..24), group in 1usize..6) {
        let n = values.len() / group * group;
        prop_assume!(n > 0);
        let y = fapnet_autodiff::kernels::softmax_groups(&values[..n], group);
        for chunk in y.chunks(group) {
            prop_assert!(chunk.iter().all(|&v| v >= 0.0));
            prop_assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn lstm_hidden_state_is_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
        let (mut store, c) = cell(seed, 4, 3);
        let scaled: Vec<f64> = store.flatten().iter().map(|v| v * scale).collect();
        store.set_flat(&scaled).unwrap();
        let mut tape = Tape::new();
        let mut r = rng(seed + 1);
        let mut s = c.zero_state(&mut tape, 2);
        for _ in 0..6 {
            let x = tape.constant(random_vec(&mut r, 8).iter().map(|v| v * scale).collect(), 2, 4).unwrap();
            s = c.step(&mut tape, &store, x, s).unwrap();
            prop_assert!(tape.value(s.h).iter().all(|h| h.abs() <= 1.0));
        }
    }
}
