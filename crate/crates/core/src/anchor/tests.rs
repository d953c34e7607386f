use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::params::ParamStore;
use crate::tensor::{GradcheckOptions, Tape, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn mat(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

fn mm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

/// Loop-level multi-head attention of `q_in` over `kv_in`.
fn naive_attention(
    store: &ParamStore,
    att: &Attention,
    q_in: &[Vec<f64>],
    kv_in: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w = |n: &str| mat(store.get(&att.name(n)).unwrap());
    let (q, k, v) = (mm(q_in, &w("wq")), mm(kv_in, &w("wk")), mm(kv_in, &w("wv")));
    let dh = att.dim / att.heads;
    let mut o = vec![vec![0.0; att.dim]; q.len()];
    let mut avg = vec![vec![0.0; kv_in.len()]; q.len()];
    for h in 0..att.heads {
        for i in 0..q.len() {
            let s: Vec<f64> = (0..k.len())
                .map(|j| {
                    (h * dh..(h + 1) * dh)
                        .map(|c| q[i][c] * k[j][c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.len() {
                let a = e[j] / z;
                avg[i][j] += a / att.heads as f64;
                for c in h * dh..(h + 1) * dh {
                    o[i][c] += a * v[j][c];
                }
            }
        }
    }
    (mm(&o, &w("wo")), avg)
}

fn flat(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{x} vs {y}");
    }
}

fn setup(dim: usize, cfg: PamConfig, seed: u64) -> (PixelAnchor, ParamStore, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pam = PixelAnchor::new("pam", dim, cfg).unwrap();
    let mut store = ParamStore::new();
    pam.init(&mut store, &mut rng).unwrap();
    (pam, store, rng)
}

fn cfg(sa1: bool, topk: bool, sa2: bool) -> PamConfig {
    PamConfig {
        use_sa1: sa1,
        use_topk: topk,
        use_sa2: sa2,
        heads: 1,
    }
}

#[test]
fn single_token_attention_returns_value_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let att = Attention::new("a", 3, 1).unwrap();
    let mut store = ParamStore::new();
    att.init(&mut store, &mut rng).unwrap();
    let x = rand_tensor(&[1, 3], &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let (out, a) = self_attention(&mut tape, &p, &att, xv).unwrap();
    assert_eq!(tape.value(a).data(), &[1.0]);
    let w = |n: &str| mat(store.get(&att.name(n)).unwrap());
    let expect = mm(&mm(&mat(&x), &w("wv")), &w("wo"));
    close(tape.value(out).data(), &flat(&expect), 1e-12);
}

#[test]
fn attention_matches_loop_oracle() {
    for (heads, seed) in [(1, 0), (2, 1), (4, 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = Attention::new("a", 8, heads).unwrap();
        let mut store = ParamStore::new();
        att.init(&mut store, &mut rng).unwrap();
        let q = rand_tensor(&[6, 8], &mut rng);
        let kv = rand_tensor(&[3, 8], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (qv, kvv) = (tape.constant(q.clone()), tape.constant(kv.clone()));
        let (out, a) = att.forward(&mut tape, &p, qv, kvv).unwrap();
        let (eo, ea) = naive_attention(&store, &att, &mat(&q), &mat(&kv));
        close(tape.value(out).data(), &flat(&eo), 1e-12);
        close(tape.value(a).data(), &flat(&ea), 1e-12);
        for row in tape.value(a).data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn heads_must_divide_channels() {
    assert!(matches!(
        Attention::new("a", 6, 4),
        Err(Error::InvalidArgument(_))
    ));
    assert!(PixelAnchor::new(
        "p",
        6,
        PamConfig {
            heads: 4,
            ..PamConfig::full()
        }
    )
    .is_err());
}

#[test]
fn sa2_requires_topk() {
    assert!(matches!(
        PixelAnchor::new("p", 4, cfg(true, false, true)),
        Err(Error::Config(_))
    ));
}

#[test]
fn self_attention_gradcheck() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let att = Attention::new("a", 4, 1).unwrap();
        let mut store = ParamStore::new();
        att.init(&mut store, &mut rng).unwrap();
        let x = rand_tensor(&[4, 4], &mut rng);
        let w = rand_tensor(&[4, 4], &mut rng);
        let r = store
            .gradcheck(
                &[x],
                |t, p, v| {
                    let (o, _) = self_attention(t, p, &att, v[0])?;
                    let w = t.constant(w.clone());
                    let y = t.mul(o, w)?;
                    t.sum(y)
                },
                &GradcheckOptions::with_rtol(1e-4),
            )
            .unwrap();
        assert!(r.passed(), "seed {seed}: {r}");
    }
}

#[test]
fn saliency_examples() {
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::full(&[5, 5], 0.2));
    let s = saliency_scores(&mut tape, u).unwrap();
    close(tape.value(s).data(), &[0.2; 5], 1e-15);

    let mut onehot = vec![0.0; 16];
    for i in 0..4 {
        onehot[i * 4 + 2] = 1.0;
    }
    let a = tape.constant(Tensor::new(vec![4, 4], onehot).unwrap());
    let s = saliency_scores(&mut tape, a).unwrap();
    assert_eq!(tape.value(s).data(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn saliency_matches_column_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rows = vec![];
    for _ in 0..8 {
        let r: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
        let z: f64 = r.iter().sum();
        rows.push(r.into_iter().map(|v| v / z).collect::<Vec<_>>());
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(vec![8, 8], flat(&rows)).unwrap());
    let s = saliency_scores(&mut tape, a).unwrap();
    let expect: Vec<f64> = (0..8)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 8.0)
        .collect();
    close(tape.value(s).data(), &expect, 1e-12);
    assert!((tape.value(s).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn all_flags_off_is_a_self_attention_block() {
    let (pam, store, mut rng) = setup(4, cfg(false, false, false), 3);
    let fm = rand_tensor(&[4, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(fm.clone());
    let out = pam.forward(&mut tape, &p, x).unwrap();
    assert!(out.anchors.is_none());
    let tokens: Vec<Vec<f64>> = (0..9)
        .map(|n| (0..4).map(|c| fm.data()[c * 9 + n]).collect())
        .collect();
    let att = Attention::new("pam.prop", 4, 1).unwrap();
    let (o, _) = naive_attention(&store, &att, &tokens, &tokens);
    let got = tape.value(out.output);
    for c in 0..4 {
        for n in 0..9 {
            let e = fm.data()[c * 9 + n] + o[n][c];
            assert!((got.data()[c * 9 + n] - e).abs() < 1e-12);
        }
    }
}

#[test]
fn four_by_four_keeps_four_anchors() {
    let (pam, store, mut rng) = setup(4, PamConfig::full(), 4);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(rand_tensor(&[4, 4, 4], &mut rng));
    let a = pam.forward(&mut tape, &p, x).unwrap().anchors.unwrap();
    assert_eq!(a.indices.len(), 4);
    assert_eq!(a.refined.shape(), &[4, 4]);
    assert_eq!(anchor_count(9), 2);
    assert_eq!(anchor_count(3), 1);
}

#[test]
fn output_shape_matches_input() {
    let mut seed = 0;
    for c in [4, 8] {
        for hw in [4, 8] {
            for sa1 in [false, true] {
                seed += 1;
                let (pam, store, mut rng) = setup(c, cfg(sa1, true, true), seed);
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let x = tape.constant(rand_tensor(&[c, hw, hw], &mut rng));
                let out = pam.forward(&mut tape, &p, x).unwrap();
                assert_eq!(tape.shape(out.output), &[c, hw, hw]);
            }
        }
    }
}

#[test]
fn too_few_tokens_is_an_error() {
    let (pam, store, _) = setup(4, PamConfig::full(), 0);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[4, 1, 3]));
    assert!(pam.forward(&mut tape, &p, x).is_err());
}

#[test]
fn token_grid_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fm = rand_tensor(&[3, 2, 5], &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(fm.clone());
    let g = TokenGrid::flatten(&mut tape, x).unwrap();
    assert_eq!(tape.shape(g.tokens), &[10, 3]);
    assert_eq!(tape.value(g.tokens).at(&[7, 2]), fm.at(&[2, 1, 2]));
    let back = g.unflatten(&mut tape, g.tokens).unwrap();
    assert_eq!(tape.value(back), &fm);
}

#[test]
fn flops_examples() {
    let full = PamConfig::full();
    let f = pam_flops_estimate(&full, 8, 16, 16);
    assert_eq!((f.n, f.k), (256, 64));
    assert_eq!(f.propagation_stage(), 256 * 64 * 8);
    assert_eq!(f.propagation, 2 * 256 * 64 * 8);
    let g = pam_flops_estimate(&full, 8, 32, 32);
    assert_eq!(g.propagation, 16 * f.propagation);

    let no_sa2 = cfg(true, true, false);
    let dense = pam_flops_estimate(&cfg(true, false, false), 8, 16, 16);
    assert_eq!(pam_flops_with_k(&no_sa2, 8, 256, 256), dense);
    assert_eq!(dense.propagation, 2 * 256 * 256 * 8);
    assert!(f.total() < pam_flops_with_k(&full, 8, 256, 256).total());
}

#[test]
fn param_count_matches_store() {
    for (c, config) in [
        (4, PamConfig::full()),
        (8, cfg(false, true, false)),
        (4, cfg(false, false, false)),
    ] {
        let (pam, store, _) = setup(c, config, 9);
        assert_eq!(pam.param_count(), store.numel());
    }
}

fn assert_optimal(a: &AnchorSet) {
    let chosen: std::collections::HashSet<usize> = a.indices.iter().copied().collect();
    let min_sel = a
        .indices
        .iter()
        .map(|&i| a.saliency[i])
        .fold(f64::INFINITY, f64::min);
    for (j, &s) in a.saliency.iter().enumerate() {
        if !chosen.contains(&j) {
            assert!(s <= min_sel, "token {j} ({s}) beats an anchor ({min_sel})");
        }
    }
    for w in a.indices.windows(2) {
        let (s0, s1) = (a.saliency[w[0]], a.saliency[w[1]]);
        assert!(s0 > s1 || (s0 == s1 && w[0] < w[1]));
    }
    assert!((a.saliency.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn anchors_are_optimal_over_random_inputs() {
    for seed in 0..100u64 {
        let sa1 = seed % 2 == 0;
        let (pam, store, mut rng) = setup(4, cfg(sa1, true, seed % 3 == 0), seed);
        let hw = [4, 5, 6][seed as usize % 3];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(rand_tensor(&[4, hw, hw], &mut rng));
        let a = pam.forward(&mut tape, &p, x).unwrap().anchors.unwrap();
        assert_eq!(a.indices.len(), anchor_count(hw * hw));
        assert_optimal(&a);
    }
}

#[test]
fn permuting_tokens_permutes_selection() {
    for (seed, sa1) in [(11, true), (12, false)] {
        let (pam, store, mut rng) = setup(4, cfg(sa1, true, true), seed);
        let tokens = rand_tensor(&[16, 4], &mut rng);
        let mut perm: Vec<usize> = (0..16).collect();
        perm.shuffle(&mut rng);
        // row r of the permuted matrix is row perm[r] of the original
        let rows = mat(&tokens);
        let permuted: Vec<f64> = perm.iter().flat_map(|&r| rows[r].clone()).collect();

        let run = |t: Tensor| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let x = tape.constant(t);
            let s = pam.select(&mut tape, &p, x).unwrap();
            (
                tape.value(s.saliency.unwrap()).data().to_vec(),
                s.indices.unwrap(),
            )
        };
        let (s0, i0) = run(tokens);
        let (s1, i1) = run(Tensor::new(vec![16, 4], permuted).unwrap());
        for r in 0..16 {
            assert!((s1[r] - s0[perm[r]]).abs() < 1e-12);
        }
        let mut mapped: Vec<usize> = i1.iter().map(|&r| perm[r]).collect();
        let mut orig = i0.clone();
        mapped.sort();
        orig.sort();
        assert_eq!(mapped, orig);
    }
}

#[test]
fn zero_value_paths_give_identity() {
    for (seed, config) in [
        (1, PamConfig::full()),
        (2, cfg(false, true, false)),
        (3, cfg(false, false, false)),
    ] {
        let (pam, mut store, mut rng) = setup(4, config, seed);
        pam.zero_value_paths(&mut store).unwrap();
        let fm = rand_tensor(&[4, 4, 4], &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(fm.clone());
        let out = pam.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(out.output), &fm);
    }
}

#[test]
fn gradient_reaches_non_anchor_tokens() {
    let (pam, store, mut rng) = setup(4, PamConfig::full(), 21);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let fm = rand_tensor(&[4, 4, 4], &mut rng);
    let x = tape.param(fm);
    let out = pam.forward(&mut tape, &p, x).unwrap();
    let idx = out.anchors.unwrap().indices;
    let w = tape.constant(rand_tensor(&[4, 4, 4], &mut rng));
    let y = tape.mul(out.output, w).unwrap();
    let l = tape.sum(y).unwrap();
    let g = tape.backward(l).unwrap();
    let g = g.get(x).unwrap();
    let other = (0..16).find(|i| !idx.contains(i)).unwrap();
    // remove the residual contribution, which alone would reach every token
    let wv = tape.value(w).clone();
    let through_module: f64 = (0..4)
        .map(|c| (g.data()[c * 16 + other] - wv.data()[c * 16 + other]).abs())
        .sum();
    assert!(through_module > 1e-8, "{through_module}");
}

#[test]
fn pam_gradcheck() {
    for (seed, config) in [
        (31, PamConfig::full()),
        (32, cfg(false, true, true)),
        (33, cfg(true, true, false)),
    ] {
        let (pam, store, mut rng) = setup(4, config, seed);
        let fm = rand_tensor(&[4, 4, 4], &mut rng);
        let w = rand_tensor(&[4, 4, 4], &mut rng);
        let r = store
            .gradcheck(
                &[fm],
                |t, p, v| {
                    let o = pam.forward(t, p, v[0])?.output;
                    let w = t.constant(w.clone());
                    let y = t.mul(o, w)?;
                    t.sum(y)
                },
                &GradcheckOptions::with_rtol(1e-4),
            )
            .unwrap();
        assert!(r.passed(), "seed {seed}: {r}");
    }
}
