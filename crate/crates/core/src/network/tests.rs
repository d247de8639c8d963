use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::layers::{self, LN_EPS};
use super::*;
use crate::domain::TokenMatrix;

type M = Vec<Vec<f64>>;

fn mm(a: &M, b: &M) -> M {
    let inner = b.len();
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| (0..inner).map(|t| row[t] * b[t][j]).sum())
                .collect()
        })
        .collect()
}

fn vadd(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn madd(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| vadd(x, y)).collect()
}

fn add_bias(a: &M, b: &M) -> M {
    a.iter().map(|r| vadd(r, &b[0])).collect()
}

fn tanh_m(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|x| x.tanh()).collect()).collect()
}

fn softmax(row: &[f64], mask: &[bool]) -> Vec<f64> {
    let mx = row
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(x, &m)| if m { (x - mx).exp() } else { 0.0 })
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn ln(a: &M) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter().map(|x| (x - mean) / (var + LN_EPS).sqrt()).collect()
        })
        .collect()
}

/// Dense single-head attention; `mask` covers the key positions.
fn attention(q: &M, k: &M, v: &M, mask: &[bool], d: usize) -> (M, M) {
    let s = 1.0 / (d as f64).sqrt();
    let w: M = q
        .iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * s)
                .collect();
            softmax(&logits, mask)
        })
        .collect();
    (mm(&w, v), w)
}

fn to_m(data: &[f64], rows: usize, cols: usize) -> M {
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn pm(p: &RouterParams, name: &str) -> M {
    let t = p.get(name).unwrap();
    let (r, c) = t.dims2().unwrap();
    to_m(t.data(), r, c)
}

fn rand_m(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> M {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

fn flat(a: &M) -> Vec<f64> {
    a.iter().flatten().copied().collect()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn konst(tape: &mut Tape, a: &M) -> Var {
    tape.constant(a.len(), a[0].len(), flat(a)).unwrap()
}

fn small_cfg(k: usize) -> RouterConfig {
    let mut c = RouterConfig::for_data(5, 4, 6, k);
    c.hidden_dim = 8;
    c.capsule_count = 3;
    c
}

/// Random weights, including non-zero biases, so oracles exercise every term.
fn random_params(cfg: &RouterConfig, seed: u64) -> RouterParams {
    let mut p = RouterParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for b in &mut p.blocks {
        if b.tensor.shape()[0] == 1 {
            for v in b.tensor.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    p
}

fn query(rng: &mut ChaCha8Rng, cfg: &RouterConfig, n: usize, l: usize) -> MultimodalQuery {
    let v = rand_m(rng, n, cfg.image_dim);
    let q = rand_m(rng, l, cfg.question_dim);
    MultimodalQuery {
        query_id: "q".into(),
        image_tokens: TokenMatrix::new(n, cfg.image_dim, flat(&v)).unwrap(),
        question_tokens: TokenMatrix::new(l, cfg.question_dim, flat(&q)).unwrap(),
        slice_label: None,
    }
}

fn candidates(rng: &mut ChaCha8Rng, cfg: &RouterConfig, k: usize) -> CandidateSet {
    let d = rand_m(rng, k, cfg.descriptor_dim);
    let costs = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
    CandidateSet::new(flat(&d), cfg.descriptor_dim, costs).unwrap()
}

fn oracle_mlp2(x: &M, p: &RouterParams, w1: &str, b1: &str, w2: &str, b2: &str) -> M {
    let h = tanh_m(&add_bias(&mm(x, &pm(p, w1)), &pm(p, b1)));
    add_bias(&mm(&h, &pm(p, w2)), &pm(p, b2))
}

#[test]
fn capsules_match_dense_attention() {
    let cfg = small_cfg(3);
    let p = random_params(&cfg, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v = rand_m(&mut rng, 2, cfg.image_dim);
    let q = rand_m(&mut rng, 2, cfg.question_dim);
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, &cfg, false).unwrap();
    let (iv, iq) = (konst(&mut tape, &v), konst(&mut tape, &q));
    let caps = layers::extract_capsules(&mut tape, &pv, &cfg, iv, iq).unwrap();

    let mut x = mm(&v, &pm(&p, "image_proj"));
    x.extend(mm(&q, &pm(&p, "question_proj")));
    let keys = mm(&x, &pm(&p, "capsule_key"));
    let vals = mm(&x, &pm(&p, "capsule_value"));
    let (r, w) = attention(&pm(&p, "capsule_queries"), &keys, &vals, &[true; 4], cfg.hidden_dim);
    assert!(max_diff(tape.value(caps.r), &flat(&r)) < 1e-12);
    assert!(max_diff(tape.value(caps.weights), &flat(&w)) < 1e-12);
}

#[test]
fn capsules_single_and_duplicated_tokens() {
    let mut cfg = small_cfg(3);
    cfg.question_dim = cfg.image_dim;
    let p = random_params(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = rand_m(&mut rng, 1, cfg.image_dim);

    // A single joint token: every capsule equals its value projection.
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, &cfg, false).unwrap();
    let iv = konst(&mut tape, &v);
    let empty = tape.constant(0, cfg.question_dim, vec![]).unwrap();
    let caps = layers::extract_capsules(&mut tape, &pv, &cfg, iv, empty).unwrap();
    let value = mm(&mm(&v, &pm(&p, "image_proj")), &pm(&p, "capsule_value"));
    for k in 0..cfg.capsule_count {
        let row = &tape.value(caps.r)[k * cfg.hidden_dim..(k + 1) * cfg.hidden_dim];
        assert!(max_diff(row, &value[0]) < 1e-12);
    }

    // Doubling every position changes nothing.
    let v = rand_m(&mut rng, 2, cfg.image_dim);
    let q = rand_m(&mut rng, 1, cfg.question_dim);
    let run = |v: &M, q: &M| {
        let mut tape = Tape::new();
        let pv = p.attach(&mut tape, &cfg, false).unwrap();
        let (iv, iq) = (konst(&mut tape, v), konst(&mut tape, q));
        let caps = layers::extract_capsules(&mut tape, &pv, &cfg, iv, iq).unwrap();
        tape.value(caps.r).to_vec()
    };
    let base = run(&v, &q);
    let dv: M = v.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    let dq: M = q.iter().flat_map(|r| [r.clone(), r.clone()]).collect();
    assert!(max_diff(&base, &run(&dv, &dq)) < 1e-12);
}

#[test]
fn model_tokens_are_affine_in_descriptors() {
    let cfg = small_cfg(3);
    let mut p = random_params(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut cands = candidates(&mut rng, &cfg, 3);
    cands.descriptor_mut(0).fill(0.0);
    let d1 = cands.descriptor(1).to_vec();
    cands.descriptor_mut(2).copy_from_slice(&d1);

    let run = |p: &RouterParams| {
        let mut tape = Tape::new();
        let pv = p.attach(&mut tape, &cfg, false).unwrap();
        let a = layers::build_model_tokens(&mut tape, &pv, &cfg, &cands).unwrap();
        tape.value(a).to_vec()
    };
    let got = run(&p);
    let desc = to_m(cands.descriptors(), 3, cfg.descriptor_dim);
    let expect = add_bias(&mm(&desc, &pm(&p, "token_proj")), &pm(&p, "token_bias"));
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);
    let d = cfg.hidden_dim;
    assert_eq!(got[d..2 * d], got[2 * d..3 * d]);

    p.get_mut("token_bias").unwrap().data_mut().fill(0.0);
    let got = run(&p);
    assert!(got[..d].iter().all(|v| *v == 0.0));
}

#[test]
fn model_tokens_reject_wrong_descriptor_width() {
    let cfg = small_cfg(2);
    let p = random_params(&cfg, 5);
    let cands = CandidateSet::new(vec![0.0; 2 * 3], 3, vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, &cfg, false).unwrap();
    assert!(matches!(
        layers::build_model_tokens(&mut tape, &pv, &cfg, &cands),
        Err(NetworkError::Config(_))
    ));
}

fn oracle_read(p: &RouterParams, a: &M, r: &M, d: usize, read: Option<M>) -> (M, M) {
    let n = ln(a);
    let q = mm(&n, &pm(p, "layer0.read_q"));
    let k = mm(r, &pm(p, "layer0.read_k"));
    let v = mm(r, &pm(p, "layer0.read_v"));
    let (att, w) = attention(&q, &k, &v, &vec![true; r.len()], d);
    let rh = read.unwrap_or(att);
    let input: M = n
        .iter()
        .zip(&rh)
        .map(|(ni, ri)| {
            let mut row = ni.clone();
            row.extend(ri);
            row.extend(ni.iter().zip(ri).map(|(x, y)| x * y));
            row
        })
        .collect();
    let f = oracle_mlp2(&input, p, "layer0.ffn_w1", "layer0.ffn_b1", "layer0.ffn_w2", "layer0.ffn_b2");
    (madd(a, &f), w)
}

fn run_read(p: &RouterParams, cfg: &RouterConfig, a: &M, r: &M) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let (va, vr) = (konst(&mut tape, a), konst(&mut tape, r));
    let out = layers::model_read_capsules(&mut tape, &pv.layers[0], cfg, va, vr).unwrap();
    (tape.value(out.out).to_vec(), tape.value(out.weights).to_vec())
}

#[test]
fn model_read_matches_dense_formula() {
    let cfg = small_cfg(4);
    let p = random_params(&cfg, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = rand_m(&mut rng, 4, cfg.hidden_dim);
    let r = rand_m(&mut rng, 3, cfg.hidden_dim);
    let (got, w) = run_read(&p, &cfg, &a, &r);
    let (expect, ew) = oracle_read(&p, &a, &r, cfg.hidden_dim, None);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);
    assert!(max_diff(&w, &flat(&ew)) < 1e-12);
}

#[test]
fn model_read_single_or_identical_capsules_reads_value() {
    let cfg = small_cfg(2);
    let p = random_params(&cfg, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = rand_m(&mut rng, 2, cfg.hidden_dim);
    let r1 = rand_m(&mut rng, 1, cfg.hidden_dim);
    let value = mm(&r1, &pm(&p, "layer0.read_v"));
    let read = vec![value[0].clone(); 2];
    let (expect, _) = oracle_read(&p, &a, &r1, cfg.hidden_dim, Some(read));

    let (got, w) = run_read(&p, &cfg, &a, &r1);
    assert_eq!(w, vec![1.0, 1.0]);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);

    let same = vec![r1[0].clone(); 3];
    let (got, _) = run_read(&p, &cfg, &a, &same);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);
}

/// The pairwise MLP on a concatenated feature, with its stacked first layer.
fn oracle_psi(p: &RouterParams, feature: Vec<f64>) -> f64 {
    let mut w1 = pm(p, "layer0.psi_self");
    w1.extend(pm(p, "layer0.psi_other"));
    w1.extend(pm(p, "layer0.psi_diff"));
    w1.extend(pm(p, "layer0.psi_prod"));
    let h = tanh_m(&add_bias(&mm(&vec![feature], &w1), &pm(p, "layer0.psi_b1")));
    add_bias(&mm(&h, &pm(p, "layer0.psi_w2")), &pm(p, "layer0.psi_b2"))[0][0]
}

fn pair_feature(x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut f = x.to_vec();
    f.extend(y);
    f.extend(x.iter().zip(y).map(|(a, b)| a - b));
    f.extend(x.iter().zip(y).map(|(a, b)| a * b));
    f
}

fn run_bias(p: &RouterParams, cfg: &RouterConfig, a: &M, omega: &[bool]) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let va = konst(&mut tape, a);
    let b = layers::pairwise_bias(&mut tape, &pv.layers[0], va, omega).unwrap();
    tape.value(b).to_vec()
}

#[test]
fn pairwise_bias_matches_dense_mlp() {
    let cfg = small_cfg(4);
    let p = random_params(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_m(&mut rng, 4, cfg.hidden_dim);
    let omega = [true, false, true, true];
    let got = run_bias(&p, &cfg, &a, &omega);
    let n = ln(&a);
    for i in 0..4 {
        for j in 0..4 {
            let b = got[i * 4 + j];
            if i == j || !omega[i] || !omega[j] {
                assert_eq!(b, 0.0);
            } else {
                assert!((b - oracle_psi(&p, pair_feature(&n[i], &n[j]))).abs() < 1e-12);
            }
        }
    }
    assert!((got[2] - got[8]).abs() > 1e-9, "bias should not be forced antisymmetric or symmetric");
}

#[test]
fn pairwise_bias_equal_tokens_and_single_model() {
    let cfg = small_cfg(2);
    let mut p = random_params(&cfg, 13);
    p.get_mut("layer0.psi_b2").unwrap().data_mut().fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let row = rand_m(&mut rng, 1, cfg.hidden_dim);
    let a = vec![row[0].clone(), row[0].clone()];
    let got = run_bias(&p, &cfg, &a, &[true, true]);
    let n = &ln(&a)[0];
    let zero = vec![0.0; n.len()];
    let mut f = n.clone();
    f.extend(n);
    f.extend(&zero);
    f.extend(n.iter().map(|x| x * x));
    assert!((got[1] - oracle_psi(&p, f)).abs() < 1e-12);
    assert_eq!(got[1], got[2]);

    let single = vec![row[0].clone()];
    let cfg1 = small_cfg(1);
    assert_eq!(run_bias(&p, &cfg1, &single, &[true]), vec![0.0]);
}

fn oracle_self_attention(p: &RouterParams, abar: &M, b: &M, omega: &[bool], d: usize) -> M {
    let n = ln(abar);
    let q = mm(&n, &pm(p, "layer0.self_q"));
    let k = mm(&n, &pm(p, "layer0.self_k"));
    let v = mm(&n, &pm(p, "layer0.self_v"));
    let s = 1.0 / (d as f64).sqrt();
    abar.iter()
        .enumerate()
        .map(|(i, ai)| {
            if !omega[i] {
                return ai.clone();
            }
            let logits: Vec<f64> = (0..abar.len())
                .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() * s + b[i][j])
                .collect();
            let w = softmax(&logits, omega);
            let mut out = ai.clone();
            for (j, wj) in w.iter().enumerate() {
                for (o, vj) in out.iter_mut().zip(&v[j]) {
                    *o += wj * vj;
                }
            }
            out
        })
        .collect()
}

fn run_self(p: &RouterParams, cfg: &RouterConfig, a: &M, b: &M, omega: &[bool]) -> Result<Vec<f64>, NetworkError> {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let (va, vb) = (konst(&mut tape, a), konst(&mut tape, b));
    let out = layers::masked_self_attention(&mut tape, &pv.layers[0], cfg, va, vb, omega)?;
    let w = tape.value(out.weights);
    let k = a.len();
    for i in 0..k {
        let total: f64 = w[i * k..(i + 1) * k].iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for j in 0..k {
            if !omega[j] {
                assert_eq!(w[i * k + j], 0.0);
            }
        }
    }
    Ok(tape.value(out.out).to_vec())
}

#[test]
fn self_attention_matches_dense_formula() {
    let cfg = small_cfg(3);
    let p = random_params(&cfg, 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let a = rand_m(&mut rng, 3, cfg.hidden_dim);
    let b = rand_m(&mut rng, 3, 3);
    let omega = [true; 3];
    let got = run_self(&p, &cfg, &a, &b, &omega).unwrap();
    let expect = oracle_self_attention(&p, &a, &b, &omega, cfg.hidden_dim);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);

    let omega = [true, false, true];
    let got = run_self(&p, &cfg, &a, &b, &omega).unwrap();
    let expect = oracle_self_attention(&p, &a, &b, &omega, cfg.hidden_dim);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);
    assert_eq!(got[cfg.hidden_dim..2 * cfg.hidden_dim], a[1][..]);
}

#[test]
fn self_attention_zero_bias_is_plain_masked_attention() {
    let cfg = small_cfg(4);
    let p = random_params(&cfg, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = rand_m(&mut rng, 4, cfg.hidden_dim);
    let zero = vec![vec![0.0; 4]; 4];
    let omega = [true, true, false, true];
    let got = run_self(&p, &cfg, &a, &zero, &omega).unwrap();
    // Reference: standard attention over the available keys, residual added.
    let n = ln(&a);
    let q = mm(&n, &pm(&p, "layer0.self_q"));
    let k = mm(&n, &pm(&p, "layer0.self_k"));
    let v = mm(&n, &pm(&p, "layer0.self_v"));
    let (att, _) = attention(&q, &k, &v, &omega, cfg.hidden_dim);
    for i in 0..4 {
        let row = &got[i * cfg.hidden_dim..(i + 1) * cfg.hidden_dim];
        let expect = if omega[i] { vadd(&a[i], &att[i]) } else { a[i].clone() };
        assert!(max_diff(row, &expect) < 1e-12);
    }
}

#[test]
fn self_attention_single_model_and_empty_support() {
    let cfg = small_cfg(2);
    let p = random_params(&cfg, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let a = rand_m(&mut rng, 2, cfg.hidden_dim);
    let b = rand_m(&mut rng, 2, 2);
    let got = run_self(&p, &cfg, &a, &b, &[false, true]).unwrap();
    let self_value = mm(&ln(&a), &pm(&p, "layer0.self_v"));
    let d = cfg.hidden_dim;
    assert!(max_diff(&got[d..], &vadd(&a[1], &self_value[1])) < 1e-12);
    assert!(matches!(
        run_self(&p, &cfg, &a, &b, &[false, false]),
        Err(NetworkError::Tensor(TensorError::EmptySupport(_)))
    ));
}

fn run_feedback_weights(scores: &[f64], omega: &[bool], tau: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.len(), 1, scores.to_vec()).unwrap();
    let w = layers::feedback_weights(&mut tape, s, omega, tau).unwrap();
    tape.value(w).to_vec()
}

#[test]
fn feedback_weight_examples() {
    let w = run_feedback_weights(&[1.0, 0.5], &[true, true], 0.5);
    assert!((w[0] - 0.7310586).abs() < 1e-6);
    assert!((w[1] - 0.2689414).abs() < 1e-6);
    assert_eq!(run_feedback_weights(&[0.3, 9.0, -2.0], &[false, true, false], 0.2), vec![0.0, 1.0, 0.0]);
    let w = run_feedback_weights(&[0.4, 0.4, 7.0, 0.4], &[true, true, false, true], 0.1);
    for i in [0, 1, 3] {
        assert!((w[i] - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(w[2], 0.0);
    let direct: Vec<f64> = {
        let s = [0.2, -0.7, 1.3];
        let mx = 1.3;
        let e: Vec<f64> = s.iter().map(|x: &f64| (-(mx - x) / 0.3).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|x| x / z).collect()
    };
    let got = run_feedback_weights(&[0.2, -0.7, 1.3], &[true; 3], 0.3);
    assert!(max_diff(&got, &direct) < 1e-15);
}

fn oracle_feedback(p: &RouterParams, r: &M, a: &M, w: &[f64], omega: &[bool], d: usize) -> M {
    let m: M = a
        .iter()
        .zip(w)
        .zip(omega)
        .filter(|(_, &o)| o)
        .map(|((ai, wi), _)| ai.iter().map(|x| x * wi).collect())
        .collect();
    let q = mm(&ln(r), &pm(p, "layer0.fb_q"));
    let k = mm(&m, &pm(p, "layer0.fb_k"));
    let v = mm(&m, &pm(p, "layer0.fb_v"));
    let (att, _) = attention(&q, &k, &v, &vec![true; m.len()], d);
    madd(r, &att)
}

fn run_feedback(p: &RouterParams, cfg: &RouterConfig, r: &M, a: &M, w: &[f64], omega: &[bool]) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let (vr, va) = (konst(&mut tape, r), konst(&mut tape, a));
    let vw = tape.constant(1, w.len(), w.to_vec()).unwrap();
    let out = layers::capsule_feedback(&mut tape, &pv.layers[0], cfg, vr, va, vw, omega).unwrap();
    tape.value(out.out).to_vec()
}

#[test]
fn capsule_feedback_matches_dense_formula() {
    let cfg = small_cfg(3);
    let p = random_params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let r = rand_m(&mut rng, 3, cfg.hidden_dim);
    let a = rand_m(&mut rng, 3, cfg.hidden_dim);
    let omega = [true, false, true];
    let w = [0.35, 0.0, 0.65];
    let got = run_feedback(&p, &cfg, &r, &a, &w, &omega);
    let expect = oracle_feedback(&p, &r, &a, &w, &omega, cfg.hidden_dim);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);

    let w = [1.0, 0.0, 0.0];
    let got = run_feedback(&p, &cfg, &r, &a, &w, &[true, true, true]);
    let expect = oracle_feedback(&p, &r, &a, &w, &[true; 3], cfg.hidden_dim);
    assert!(max_diff(&got, &flat(&expect)) < 1e-12);
}

#[test]
fn capsule_feedback_single_model_adds_its_value() {
    let cfg = small_cfg(2);
    let p = random_params(&cfg, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let r = rand_m(&mut rng, 3, cfg.hidden_dim);
    let a = rand_m(&mut rng, 2, cfg.hidden_dim);
    let got = run_feedback(&p, &cfg, &r, &a, &[0.0, 1.0], &[false, true]);
    let value = mm(&vec![a[1].clone()], &pm(&p, "layer0.fb_v"));
    let d = cfg.hidden_dim;
    for k in 0..3 {
        assert!(max_diff(&got[k * d..(k + 1) * d], &vadd(&r[k], &value[0])) < 1e-12);
    }
}

fn run_outcomes(p: &RouterParams, cfg: &RouterConfig, a: &M) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let va = konst(&mut tape, a);
    let joint = tape.constant(1, cfg.hidden_dim, vec![0.1; cfg.hidden_dim]).unwrap();
    let (mu, sigma) = layers::predict_outcomes(&mut tape, &pv, cfg, va, joint).unwrap();
    (tape.value(mu).to_vec(), tape.value(sigma).to_vec())
}

#[test]
fn outcome_head_sigma_floor_and_sharing() {
    let cfg = small_cfg(3);
    let mut p = random_params(&cfg, 25);
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let mut a = rand_m(&mut rng, 3, cfg.hidden_dim);
    a[2] = a[0].clone();
    let (mu, sigma) = run_outcomes(&p, &cfg, &a);
    let out = oracle_mlp2(&ln(&a), &p, "out_w1", "out_b1", "out_w2", "out_b2");
    for i in 0..3 {
        assert!((mu[i] - out[i][0]).abs() < 1e-12);
        let expect = crate::tensor::softplus(out[i][1]) + cfg.sigma_floor;
        assert!((sigma[i] - expect).abs() < 1e-12);
    }
    assert_eq!(mu[0], mu[2]);
    assert_eq!(sigma[0], sigma[2]);

    // Zero the eta column: sigma = ln 2 + eps.
    let d = cfg.hidden_dim;
    {
        let w2 = p.get_mut("out_w2").unwrap().data_mut();
        for t in 0..d {
            w2[t * 2 + 1] = 0.0;
        }
    }
    p.get_mut("out_b2").unwrap().data_mut()[1] = 0.0;
    let (_, sigma) = run_outcomes(&p, &cfg, &a);
    for s in &sigma {
        assert!((s - (std::f64::consts::LN_2 + cfg.sigma_floor)).abs() < 1e-12);
    }
    p.get_mut("out_b2").unwrap().data_mut()[1] = -50.0;
    let (_, sigma) = run_outcomes(&p, &cfg, &a);
    for s in &sigma {
        assert!((s - cfg.sigma_floor).abs() < 1e-12);
    }
}

fn run_correction(p: &RouterParams, cfg: &RouterConfig, a: &M, r: &M) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let pv = p.attach(&mut tape, cfg, false).unwrap();
    let (va, vr) = (konst(&mut tape, a), konst(&mut tape, r));
    let mu = tape.constant(a.len(), 1, vec![0.5; a.len()]).unwrap();
    let (delta, corrected) = layers::bounded_correction(&mut tape, &pv, cfg, va, vr, mu).unwrap();
    (tape.value(delta).to_vec(), tape.value(corrected).to_vec())
}

#[test]
fn correction_matches_formula_and_limits() {
    let mut cfg = small_cfg(3);
    cfg.correction_bound = 0.25;
    let mut p = random_params(&cfg, 27);
    let mut rng = ChaCha8Rng::seed_from_u64(28);
    let a = rand_m(&mut rng, 3, cfg.hidden_dim);
    let r = rand_m(&mut rng, 4, cfg.hidden_dim);
    let (delta, corrected) = run_correction(&p, &cfg, &a, &r);
    let pooled: Vec<f64> = (0..cfg.hidden_dim).map(|j| r.iter().map(|x| x[j]).sum::<f64>() / 4.0).collect();
    let input: M = ln(&a)
        .into_iter()
        .map(|mut row| {
            row.extend(&pooled);
            row
        })
        .collect();
    let h = oracle_mlp2(&input, &p, "corr_w1", "corr_b1", "corr_w2", "corr_b2");
    for i in 0..3 {
        assert!((delta[i] - 0.25 * h[i][0].tanh()).abs() < 1e-12);
        assert!(delta[i].abs() <= 0.25);
        assert_eq!(corrected[i], 0.5 + delta[i]);
    }

    cfg.correction_bound = 0.0;
    let (delta, corrected) = run_correction(&p, &cfg, &a, &r);
    assert!(delta.iter().all(|d| *d == 0.0));
    assert!(corrected.iter().all(|c| *c == 0.5));

    cfg.correction_bound = 0.25;
    p.get_mut("corr_w2").unwrap().data_mut().fill(0.0);
    p.get_mut("corr_b2").unwrap().data_mut().fill(0.0);
    let (delta, _) = run_correction(&p, &cfg, &a, &r);
    assert!(delta.iter().all(|d| *d == 0.0));
}

#[test]
fn route_examples() {
    let (s, chosen) = route(&[0.9, 0.8], &[1.0, 0.0], &[true, true], 0.2).unwrap();
    assert!((s[0].unwrap() - 0.7).abs() < 1e-12);
    assert!((s[1].unwrap() - 0.8).abs() < 1e-12);
    assert_eq!(chosen, 1);
    assert_eq!(route(&[0.1, 0.9, 0.5], &[0.0; 3], &[true, false, false], 0.0).unwrap().1, 0);
    let (s, chosen) = route(&[0.3, 0.9, 0.7], &[0.0, 0.5, 1.0], &[true, true, true], 0.0).unwrap();
    assert_eq!(chosen, 1);
    assert_eq!(s.len(), 3);
    // Exact ties: cheaper first, then canonical order.
    assert_eq!(route(&[0.5, 0.5, 0.5], &[0.4, 0.2, 0.2], &[true; 3], 0.0).unwrap().1, 1);
    assert!(route(&[0.5], &[0.0], &[false], 0.0).is_err());
    let (s, _) = route(&[0.5, 0.2], &[0.0, 0.0], &[false, true], 0.0).unwrap();
    assert_eq!(s[0], None);
}

proptest::proptest! {
    #[test]
    fn route_argmax_ignores_constant_shift(
        mu in proptest::collection::vec(-1.0f64..1.0, 1..8),
        shift in -0.5f64..0.5,
        lambda in 0.0f64..2.0,
        seed in 0u64..1000,
    ) {
        let k = mu.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let costs: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut omega: Vec<bool> = (0..k).map(|_| rng.random_bool(0.7)).collect();
        omega[rng.random_range(0..k)] = true;
        // Quantized so that the shift is exact in floating point.
        let mu: Vec<f64> = mu.iter().map(|m| (m * 64.0).round() / 64.0).collect();
        let shift = (shift * 64.0).round() / 64.0;
        let shifted: Vec<f64> = mu.iter().map(|m| m + shift).collect();
        let costs: Vec<f64> = costs.iter().map(|c| (c * 64.0).round() / 64.0).collect();
        let (_, a) = route(&mu, &costs, &omega, lambda).unwrap();
        let (_, b) = route(&shifted, &costs, &omega, lambda).unwrap();
        let (sa, _) = route(&mu, &costs, &omega, lambda).unwrap();
        let best = sa[a].unwrap();
        let (sb, _) = route(&shifted, &costs, &omega, lambda).unwrap();
        proptest::prop_assert!(a == b || (sb[a].unwrap() - sb[b].unwrap()).abs() < 1e-12 && (best - sa[b].unwrap()).abs() < 1e-12);
    }
}

fn full_cfg(k: usize) -> RouterConfig {
    let mut c = small_cfg(k);
    c.correction_bound = 0.2;
    c
}

fn random_omega(rng: &mut ChaCha8Rng, k: usize) -> Vec<bool> {
    let mut omega: Vec<bool> = (0..k).map(|_| rng.random_bool(0.7)).collect();
    let i = rng.random_range(0..k);
    omega[i] = true;
    omega
}

fn check_record(rec: &ForwardRecord, cfg: &RouterConfig) {
    let omega = &rec.available;
    for (i, &m) in omega.iter().enumerate() {
        assert_eq!(rec.mu[i].is_some(), m);
        if m {
            assert!(rec.sigma[i].unwrap() >= cfg.sigma_floor);
            assert!(rec.delta[i].unwrap().abs() <= cfg.correction_bound);
        }
    }
    for w in &rec.feedback_weights {
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for (wi, &m) in w.iter().zip(omega) {
            if !m {
                assert_eq!(*wi, 0.0);
            }
        }
    }
    for att in &rec.attention {
        let (r, c) = att.dims2().unwrap();
        for i in 0..r {
            let total: f64 = att.data()[i * c..(i + 1) * c].iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
    let rho = cfg.correction_bound;
    let avail: Vec<usize> = (0..omega.len()).filter(|&i| omega[i]).collect();
    for &i in &avail {
        for &j in &avail {
            let (mi, mj) = (rec.mu[i].unwrap(), rec.mu[j].unwrap());
            if (mi - mj).abs() > 2.0 * rho {
                let (ci, cj) = (rec.corrected[i].unwrap(), rec.corrected[j].unwrap());
                assert_eq!((ci - cj).signum(), (mi - mj).signum());
            }
        }
    }
    assert!(omega[rec.chosen]);
}

#[test]
fn forward_records_every_stage() {
    let cfg = full_cfg(5);
    let p = random_params(&cfg, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let q = query(&mut rng, &cfg, 4, 2);
    let cands = candidates(&mut rng, &cfg, 5);
    let omega = [true, false, true, true, false];
    let rec = forward(&q, &cands, &omega, &p, &cfg, 0.3).unwrap();
    assert_eq!(rec.capsules.len(), cfg.comm_layers + 1);
    assert_eq!(rec.model_states.len(), cfg.comm_layers + 1);
    assert_eq!(rec.layer_scores.len(), cfg.comm_layers);
    assert_eq!(rec.capsules[0].shape(), &[cfg.capsule_count, cfg.hidden_dim]);
    assert_eq!(rec.model_states[2].shape(), &[5, cfg.hidden_dim]);
    check_record(&rec, &cfg);
    let corrected: Vec<f64> = rec.corrected.iter().map(|c| c.unwrap_or(0.0)).collect();
    assert_eq!(rec.chosen, route(&corrected, cands.costs(), &omega, 0.3).unwrap().1);
    assert!(forward(&q, &cands, &[false; 5], &p, &cfg, 0.0).is_err());
    assert!(forward(&q, &cands, &[true; 4], &p, &cfg, 0.0).is_err());
}

#[test]
fn forward_many_random_passes_respect_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for trial in 0..60 {
        let k = rng.random_range(1..7);
        let mut cfg = full_cfg(k);
        cfg.comm_layers = trial % 4;
        let p = random_params(&cfg, trial as u64);
        let (n, l) = (rng.random_range(1..5), rng.random_range(1..3));
        let q = query(&mut rng, &cfg, n, l);
        let cands = candidates(&mut rng, &cfg, k);
        let omega = random_omega(&mut rng, k);
        let rec = forward(&q, &cands, &omega, &p, &cfg, rng.random_range(0.0..1.0)).unwrap();
        check_record(&rec, &cfg);
    }
}

#[test]
fn forward_is_permutation_equivariant() {
    let k = 6;
    let cfg = full_cfg(k);
    let p = random_params(&cfg, 35);
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    let q = query(&mut rng, &cfg, 4, 2);
    let cands = candidates(&mut rng, &cfg, k);
    let omega = random_omega(&mut rng, k);
    let base = forward(&q, &cands, &omega, &p, &cfg, 0.4).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let pc = cands.permuted(&perm);
        let po: Vec<bool> = perm.iter().map(|&i| omega[i]).collect();
        let rec = forward(&q, &pc, &po, &p, &cfg, 0.4).unwrap();
        for (t, &i) in perm.iter().enumerate() {
            for (a, b) in [
                (&rec.mu, &base.mu),
                (&rec.sigma, &base.sigma),
                (&rec.delta, &base.delta),
                (&rec.utilities, &base.utilities),
            ] {
                match (a[t], b[i]) {
                    (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                    (None, None) => {}
                    other => panic!("availability mismatch {other:?}"),
                }
            }
        }
        for (h, caps) in rec.capsules.iter().enumerate() {
            worst = worst.max(max_diff(caps.data(), base.capsules[h].data()));
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn unavailable_descriptors_do_not_leak() {
    let k = 5;
    let cfg = full_cfg(k);
    let p = random_params(&cfg, 37);
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let q = query(&mut rng, &cfg, 3, 2);
    let cands = candidates(&mut rng, &cfg, k);
    let omega = [true, false, true, false, true];
    let base = forward(&q, &cands, &omega, &p, &cfg, 0.2).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let mut c = cands.clone();
        for i in [1, 3] {
            for v in c.descriptor_mut(i) {
                *v = rng.random_range(-5.0..5.0);
            }
        }
        let rec = forward(&q, &c, &omega, &p, &cfg, 0.2).unwrap();
        for i in [0, 2, 4] {
            for (a, b) in [(&rec.mu, &base.mu), (&rec.sigma, &base.sigma), (&rec.utilities, &base.utilities)] {
                worst = worst.max((a[i].unwrap() - b[i].unwrap()).abs());
            }
        }
        worst = worst.max(max_diff(rec.capsules.last().unwrap().data(), base.capsules.last().unwrap().data()));
        assert_eq!(rec.chosen, base.chosen);
    }
    assert!(worst < 1e-9, "max deviation {worst}");
}

#[test]
fn no_communication_path_runs_from_initial_tokens() {
    let mut cfg = full_cfg(3);
    cfg.comm_layers = 0;
    let p = random_params(&cfg, 39);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let q = query(&mut rng, &cfg, 2, 1);
    let cands = candidates(&mut rng, &cfg, 3);
    let rec = forward(&q, &cands, &[true; 3], &p, &cfg, 0.0).unwrap();
    assert_eq!(rec.model_states.len(), 1);
    assert!(rec.feedback_weights.is_empty());
    // Oracle: outcome head on [LN(A0); mean projected joint tokens].
    let v = to_m(q.image_tokens.data(), 2, cfg.image_dim);
    let qq = to_m(q.question_tokens.data(), 1, cfg.question_dim);
    let mut x = mm(&v, &pm(&p, "image_proj"));
    x.extend(mm(&qq, &pm(&p, "question_proj")));
    let mean: Vec<f64> = (0..cfg.hidden_dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / 3.0).collect();
    let a0 = to_m(rec.model_states[0].data(), 3, cfg.hidden_dim);
    let input: M = ln(&a0)
        .into_iter()
        .map(|mut r| {
            r.extend(&mean);
            r
        })
        .collect();
    let out = oracle_mlp2(&input, &p, "out_w1", "out_b1", "out_w2", "out_b2");
    for i in 0..3 {
        assert!((rec.mu[i].unwrap() - out[i][0]).abs() < 1e-12);
    }
}

#[test]
fn ablation_variants_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for (capsules, model_tokens, distributional) in [(false, true, true), (true, false, true), (true, true, false)] {
        let mut cfg = full_cfg(4);
        cfg.variant = ArchVariant {
            capsules,
            model_tokens,
            distributional,
        };
        let p = random_params(&cfg, 42);
        let q = query(&mut rng, &cfg, 3, 2);
        let cands = candidates(&mut rng, &cfg, 4);
        let rec = forward(&q, &cands, &[true, true, false, true], &p, &cfg, 0.1).unwrap();
        check_record(&rec, &cfg);
        if !distributional {
            assert!(rec.sigma.iter().flatten().all(|s| *s == 1.0));
        }
        if !capsules {
            let c = &rec.capsules[0];
            let d = cfg.hidden_dim;
            assert_eq!(c.data()[..d], c.data()[d..2 * d]);
        }
    }
}
