use hidformer::model::params::{AttentionParams, Linear};
use hidformer::model::{
    embed_freq, embed_time, forward, forward_traced, init_params, linear_attention, merge_segments,
    recursive_attention, segment_tokens, tower_forward, AttentionKind, HidformerConfig, ModelError,
    ATTENTION_EPS,
};
use hidformer::tensor::{finite_diff_check, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy() -> HidformerConfig {
    HidformerConfig {
        n_t: 4,
        n_e: 4,
        n_b: 2,
        n_d: 2,
        t_x: 8,
        t_y: 4,
        d_ff: 8,
        merge_factor: 2,
        seed: 0,
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn linear_of(tape: &Tape, w: Tensor, b: Tensor) -> Linear<Var> {
    Linear {
        weight: tape.constant(w),
        bias: tape.constant(b),
    }
}

fn random_attention(tape: &Tape, rng: &mut ChaCha8Rng, e: usize) -> AttentionParams<Var> {
    let mut lin = || {
        let w = random_tensor(rng, &[e, e]);
        let b = random_tensor(rng, &[e]);
        linear_of(tape, w, b)
    };
    AttentionParams {
        query: lin(),
        key: lin(),
        value: lin(),
        output: lin(),
    }
}

/// 1-d projections `q = a_q·x`, `k = a_k·x`, `v = a_v·x`, identity output.
fn scalar_attention(tape: &Tape, a_q: f64, a_k: f64, a_v: f64) -> AttentionParams<Var> {
    let s = |a: f64| {
        linear_of(
            tape,
            Tensor::matrix(1, 1, vec![a]).unwrap(),
            Tensor::zeros(&[1]),
        )
    };
    AttentionParams {
        query: s(a_q),
        key: s(a_k),
        value: s(a_v),
        output: s(1.0),
    }
}

fn phi(u: f64) -> f64 {
    if u >= 0.0 {
        u + 1.0
    } else {
        u.exp()
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect()
}

#[test]
fn segmentation_examples() {
    let w = Tensor::zeros(&[128, 6]);
    let segs = segment_tokens(&w, 4).unwrap();
    assert_eq!(segs.len(), 4);
    assert!(segs.iter().all(|s| s.shape() == [32, 6]));

    let w = Tensor::new(vec![8, 6], (0..48).map(f64::from).collect()).unwrap();
    let segs = segment_tokens(&w, 4).unwrap();
    assert!(segs.iter().all(|s| s.shape() == [2, 6]));
    assert_eq!(segs[1].data()[0], 12.0);
    assert_eq!(segs[3].data()[11], 47.0);

    let w = Tensor::zeros(&[10, 6]);
    assert!(matches!(segment_tokens(&w, 4), Err(ModelError::Config(_))));
}

#[test]
fn embed_time_examples() {
    let cfg = HidformerConfig {
        n_e: 16,
        ..HidformerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tape = Tape::new();
    let window = tape.constant(Tensor::zeros(&[128, 6]));
    let embed = linear_of(
        &tape,
        random_tensor(&mut rng, &[192, 16]),
        Tensor::zeros(&[16]),
    );
    let out = embed_time(&tape, window, &embed, &cfg).unwrap();
    assert_eq!(tape.shape(out), vec![4, 16]);
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));

    // a one-hot entry at flattened position (row 1, channel 2) of segment 2
    let mut data = vec![0.0; 128 * 6];
    let pos = 6 + 2;
    data[2 * 192 + pos] = 1.0;
    let w = random_tensor(&mut rng, &[192, 16]);
    let expected_row = w.data()[pos * 16..(pos + 1) * 16].to_vec();
    let embed = linear_of(&tape, w, Tensor::zeros(&[16]));
    let window = tape.constant(Tensor::new(vec![128, 6], data).unwrap());
    let out = tape.value(embed_time(&tape, window, &embed, &cfg).unwrap());
    assert_eq!(&out.data()[2 * 16..3 * 16], expected_row.as_slice());
    assert!(out.data()[..2 * 16].iter().all(|&v| v == 0.0));
}

#[test]
fn embed_freq_examples() {
    let cfg = HidformerConfig::default();
    let f = cfg.freq_features();
    assert_eq!(f, 204);
    let tape = Tape::new();
    let identity = linear_of(&tape, Tensor::eye(f), Tensor::zeros(&[f]));

    let zero = tape.constant(Tensor::zeros(&[128, 6]));
    let out = tape.value(embed_freq(&tape, zero, &identity, &cfg).unwrap());
    assert!(out.data().iter().all(|&v| v == 0.0));

    // constant prices: each channel's spectrum is nonzero only at DC
    let row = [0.4, 0.5, 0.3, 0.45, 0.45, 0.2];
    let data: Vec<f64> = (0..128).flat_map(|_| row).collect();
    let flat = tape.constant(Tensor::new(vec![128, 6], data).unwrap());
    let out = tape.value(embed_freq(&tape, flat, &identity, &cfg).unwrap());
    assert_eq!(out.shape(), &[4, 204]);
    for token in out.data().chunks(204) {
        for (c, spectrum) in token.chunks(34).enumerate() {
            assert!((spectrum[0] - 32.0 * row[c]).abs() < 1e-12);
            assert!(spectrum[1..].iter().all(|v| v.abs() < 1e-12));
        }
    }
}

#[test]
fn single_token_attention_returns_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let mut p = random_attention(&tape, &mut rng, 3);
    p.output = linear_of(&tape, Tensor::eye(3), Tensor::zeros(&[3]));
    let x = tape.constant(random_tensor(&mut rng, &[1, 3]));
    let v = tape.value(tape.affine(x, p.value.weight, p.value.bias).unwrap());
    for o in [
        recursive_attention(&tape, x, &p).unwrap(),
        linear_attention(&tape, x, &p).unwrap(),
    ] {
        let diff = tape.value(o).max_abs_diff(&v).unwrap();
        // only the eps in the normalizer separates the two
        assert!(diff < 1e-7, "{diff}");
    }
}

#[test]
fn identical_tokens_give_identical_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let p = random_attention(&tape, &mut rng, 4);
    let token = random_tensor(&mut rng, &[1, 4]);
    let data: Vec<f64> = (0..5).flat_map(|_| token.data().to_vec()).collect();
    let x = tape.constant(Tensor::matrix(5, 4, data).unwrap());
    let out = rows(&tape.value(recursive_attention(&tape, x, &p).unwrap()));
    for r in &out[1..] {
        for (a, b) in r.iter().zip(&out[0]) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn two_token_hand_unrolled() {
    let (a_q, a_k, a_v) = (0.8, -1.3, 2.0);
    let (x1, x2) = (0.5, -0.7);
    let tape = Tape::new();
    let p = scalar_attention(&tape, a_q, a_k, a_v);
    let x = tape.constant(Tensor::matrix(2, 1, vec![x1, x2]).unwrap());

    let (q1, q2) = (phi(a_q * x1), phi(a_q * x2));
    let (k1, k2) = (phi(a_k * x1), phi(a_k * x2));
    let (v1, v2) = (a_v * x1, a_v * x2);
    let eps = ATTENTION_EPS;

    let rec = tape.value(recursive_attention(&tape, x, &p).unwrap());
    let want1 = q1 * k1 * v1 / (q1 * k1 + eps);
    let want2 = (q2 * k1 * v1 + q2 * k2 * v2) / (q2 * (k1 + k2) + eps);
    assert!((rec.data()[0] - want1).abs() < 1e-14);
    assert!((rec.data()[1] - want2).abs() < 1e-14);

    let lin = tape.value(linear_attention(&tape, x, &p).unwrap());
    let all1 = (q1 * k1 * v1 + q1 * k2 * v2) / (q1 * (k1 + k2) + eps);
    assert!((lin.data()[0] - all1).abs() < 1e-14);
    assert!((lin.data()[1] - want2).abs() < 1e-14);
}

#[test]
fn last_token_agrees_between_attention_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in 1..8 {
        let tape = Tape::new();
        let p = random_attention(&tape, &mut rng, 5);
        let x = tape.constant(random_tensor(&mut rng, &[n, 5]));
        let r = tape.value(recursive_attention(&tape, x, &p).unwrap());
        let l = tape.value(linear_attention(&tape, x, &p).unwrap());
        let last = (n - 1) * 5..n * 5;
        for (a, b) in r.data()[last.clone()].iter().zip(&l.data()[last]) {
            assert!((a - b).abs() <= 1e-10);
        }
    }
}

#[test]
fn causal_outputs_ignore_later_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tape = Tape::new();
    let p = random_attention(&tape, &mut rng, 4);
    let base = random_tensor(&mut rng, &[6, 4]);
    let out = tape.value(recursive_attention(&tape, tape.constant(base.clone()), &p).unwrap());
    for j in 0..6 {
        let mut zeroed = base.clone();
        zeroed.data_mut()[j * 4..].iter_mut().for_each(|v| *v = 0.0);
        let o = tape.value(recursive_attention(&tape, tape.constant(zeroed), &p).unwrap());
        assert_eq!(&o.data()[..j * 4], &out.data()[..j * 4]);
    }
}

#[test]
fn permutation_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let p = random_attention(&tape, &mut rng, 4);
    let x = random_tensor(&mut rng, &[5, 4]);
    let perm = [3usize, 0, 4, 1, 2];
    let mut px = Vec::new();
    for &i in &perm {
        px.extend_from_slice(&x.data()[i * 4..(i + 1) * 4]);
    }
    let px = Tensor::matrix(5, 4, px).unwrap();

    let lin = rows(&tape.value(linear_attention(&tape, tape.constant(x.clone()), &p).unwrap()));
    let lin_p = rows(&tape.value(linear_attention(&tape, tape.constant(px.clone()), &p).unwrap()));
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in lin_p[k].iter().zip(&lin[i]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    let rec = rows(&tape.value(recursive_attention(&tape, tape.constant(x), &p).unwrap()));
    let rec_p = rows(&tape.value(recursive_attention(&tape, tape.constant(px), &p).unwrap()));
    let max_dev = perm
        .iter()
        .enumerate()
        .flat_map(|(k, &i)| {
            rec_p[k]
                .iter()
                .zip(&rec[i])
                .map(|(a, b)| (a - b).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max);
    assert!(max_dev > 1e-6, "recursive attention should depend on order");
}

#[test]
fn merge_examples() {
    let tape = Tape::new();
    let e = 2;
    let w = Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 10.0, 0.0, 0.0, 10.0]).unwrap();
    let p = linear_of(&tape, w, Tensor::zeros(&[2]));
    let x4 =
        tape.constant(Tensor::matrix(4, e, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap());
    let m = merge_segments(&tape, x4, &p, 2).unwrap();
    assert_eq!(tape.value(m).data(), &[31.0, 42.0, 75.0, 86.0]);

    let x1 = tape.constant(Tensor::matrix(1, e, vec![0.3, -0.2]).unwrap());
    let m = merge_segments(&tape, x1, &p, 2).unwrap();
    assert_eq!(m, x1);

    let x3 = tape.constant(Tensor::matrix(3, e, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let m = merge_segments(&tape, x3, &p, 2).unwrap();
    assert_eq!(tape.shape(m), vec![2, 2]);
    // second group is (token 3, zeros)
    assert_eq!(&tape.value(m).data()[2..], &[5.0, 6.0]);
}

fn bound_toy(cfg: &HidformerConfig, zero: bool) -> (Tape, hidformer::model::BoundParams) {
    let mut params = init_params(cfg, 9).unwrap();
    if zero {
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    (tape, bound)
}

#[test]
fn tower_output_lengths() {
    let cfg = HidformerConfig {
        n_e: 8,
        d_ff: 8,
        ..HidformerConfig::default()
    };
    let (tape, bound) = bound_toy(&cfg, false);
    let tokens = tape.constant(Tensor::full(&[4, 8], 0.1));
    let out = tower_forward(&tape, tokens, &bound.tree.time, AttentionKind::Recursive, 2).unwrap();
    assert_eq!(out.block_tokens, vec![2, 1, 1]);
    assert_eq!(tape.shape(out.flat), vec![32]);

    let one = HidformerConfig { n_b: 1, ..cfg };
    let (tape, bound) = bound_toy(&one, false);
    let tokens = tape.constant(Tensor::full(&[4, 8], 0.1));
    let out = tower_forward(&tape, tokens, &bound.tree.freq, AttentionKind::Linear, 2).unwrap();
    assert_eq!(out.block_tokens, vec![2]);
    assert_eq!(tape.shape(out.flat), vec![16]);
}

#[test]
fn zero_input_zero_biases_give_zero_tower_output() {
    let cfg = toy();
    let params = init_params(&cfg, 11).unwrap();
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let tokens = tape.constant(Tensor::zeros(&[4, 4]));
    for (tower, kind) in [
        (&bound.tree.time, AttentionKind::Recursive),
        (&bound.tree.freq, AttentionKind::Linear),
    ] {
        let out = tower_forward(&tape, tokens, tower, kind, 2).unwrap();
        assert!(tape.value(out.flat).data().iter().all(|&v| v == 0.0));
    }
    let _ = bound_toy(&cfg, true);
}

#[test]
fn default_config_emits_full_horizon() {
    let cfg = HidformerConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let window = random_tensor(&mut rng, &[128, 6]);
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let w = tape.constant(window.clone());
    let trace = forward_traced(&tape, w, &bound.tree, &cfg).unwrap();
    assert_eq!(tape.shape(trace.prediction), vec![128]);
    assert_eq!(trace.time.block_tokens, vec![2, 1, 1]);
    assert_eq!(trace.freq.block_tokens, vec![2, 1, 1]);

    let batch = params
        .predict_batch(&[window.clone(), Tensor::zeros(&[128, 6]), window.clone()])
        .unwrap();
    assert_eq!(batch.shape(), &[3, 128]);
    assert_eq!(&batch.data()[..128], &batch.data()[256..]);
    assert_eq!(
        params.predict(&window).unwrap(),
        params.predict(&window).unwrap()
    );
}

#[test]
fn forward_rejects_wrong_window() {
    let cfg = toy();
    let params = init_params(&cfg, 0).unwrap();
    assert!(matches!(
        params.predict(&Tensor::zeros(&[9, 6])),
        Err(ModelError::Shape(_))
    ));
}

#[test]
fn toy_forward_gradient_check() {
    let cfg = toy();
    let params = init_params(&cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let window = random_tensor(&mut rng, &[8, 6]).map_unit();
    let target = Tensor::vector(vec![0.2, 0.4, 0.5, 0.3]);
    let template = params.clone();
    let report = finite_diff_check(
        |tape, vars| {
            let bound = template.bind_vars(vars.to_vec());
            let w = tape.constant(window.clone());
            let pred = forward(tape, w, &bound.tree, &cfg).map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            let t = tape.constant(target.clone());
            let d = tape.sub(pred, t)?;
            let sq = tape.mul(d, d)?;
            tape.sum(sq)
        },
        params.tensors(),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(
        report.passed,
        "max rel error {} at {:?}",
        report.max_rel_error, report.worst
    );
}

trait UnitRange {
    fn map_unit(self) -> Self;
}

impl UnitRange for Tensor {
    fn map_unit(mut self) -> Self {
        self.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.5 * (*v + 1.0));
        self
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn output_length_matches_horizon(
        n_t in 1usize..5,
        seg in 1usize..5,
        t_y in 1usize..9,
        n_e in 1usize..5,
        n_b in 1usize..4,
        n_d in 1usize..4,
        merge_factor in 1usize..4,
        seed in 0u64..1000,
    ) {
        let cfg = HidformerConfig {
            n_t, n_e, n_b, n_d, t_x: n_t * seg, t_y, d_ff: 3, merge_factor, seed,
        };
        let params = init_params(&cfg, seed).unwrap();
        let out = params.predict(&Tensor::full(&[cfg.t_x, 6], 0.5)).unwrap();
        prop_assert_eq!(out.shape(), &[t_y]);
    }
}
