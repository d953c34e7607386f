//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with the measured values, then asserts.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mygo::anchor::{PamConfig, PixelAnchor};
use mygo::checks::{model_gradcheck, ops_gradchecks, OPS};
use mygo::data::{best_threshold_f1, generate, make_split, pgm, PhantomSpec, Sample, SplitConfig};
use mygo::kan::{kan_forward, KanConfig, KanLayer, SplineGrid};
use mygo::losses::{ce_loss, focal_loss, one_hot, total_loss, LossConfig};
use mygo::metrics::compute_metrics;
use mygo::network::{load_checkpoint, save_checkpoint, ModelConfig, MyGoModel};
use mygo::training::{
    cosine_lr, evaluate, input_of, log_csv, run_ablation, train, TrainConfig, ABLATION_ROWS,
};
use mygo::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn report(n: u32, ok: bool, detail: String) {
    println!(
        "criterion {n}: {} {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n}: {detail}");
}

fn rand_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn rand_mask(h: usize, w: usize, density: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let d = (0..h * w)
        .map(|_| f64::from(u8::from(rng.gen_bool(density))))
        .collect();
    Tensor::new(vec![h, w], d).unwrap()
}

#[test]
fn criterion_01_gradient_integrity() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for seed in 0..10 {
        let reports = ops_gradchecks(1e-4, seed).unwrap();
        assert_eq!(reports.len(), OPS.len());
        for (name, r) in reports {
            worst = worst.max(r.max_rel_error);
            if !r.passed() || r.checked == 0 {
                failed.push(format!("{name}@{seed}"));
            }
        }
    }
    let model = model_gradcheck(1e-3, 60, 1).unwrap();
    let elapsed = t.elapsed();
    let ok = failed.is_empty()
        && model.passed()
        && model.checked >= 50
        && elapsed < Duration::from_secs(300);
    report(
        1,
        ok,
        format!(
            "ops worst rel {worst:.2e} (rtol 1e-4, failures {failed:?}); model {} params worst rel {:.2e} (rtol 1e-3); {:.1}s",
            model.checked,
            model.max_rel_error,
            elapsed.as_secs_f64()
        ),
    );
}

/// Cox–de Boor recursion on the extended uniform knot vector, the last
/// interior cell closed on the right.
fn bspline(g: &SplineGrid, i: usize, p: usize, x: f64) -> f64 {
    let h = (g.hi - g.lo) / g.intervals as f64;
    let t = |k: usize| g.lo + (k as f64 - g.degree as f64) * h;
    if p == 0 {
        if x >= g.hi {
            return f64::from(u8::from(i == g.intervals + g.degree - 1));
        }
        return f64::from(u8::from(t(i) <= x && x < t(i + 1)));
    }
    (x - t(i)) / (t(i + p) - t(i)) * bspline(g, i, p - 1, x)
        + (t(i + p + 1) - x) / (t(i + p + 1) - t(i + 1)) * bspline(g, i + 1, p - 1, x)
}

#[test]
fn criterion_02_kan_forward_equals_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let dims = [
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        ];
        let config = KanConfig {
            grid: SplineGrid::default(),
            use_base: trial % 2 == 0,
        };
        let layers = [
            KanLayer::new("a", dims[0], dims[1], config),
            KanLayer::new("b", dims[1], dims[2], config),
        ];
        let mut store = mygo::ParamStore::new();
        for l in &layers {
            l.init(&mut store, &mut rng).unwrap();
            for v in store.get_mut(&l.coeffs_name()).unwrap().data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let x0: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_vec(x0.clone()));
        let y = kan_forward(&mut tape, &p, &layers, x).unwrap();
        let got = tape.value(y).data().to_vec();

        // x_{l+1,j} += phi_{l,j,i}(x_{l,i})
        let mut xs = x0;
        for l in &layers {
            let g = l.config.grid;
            let m = g.n_basis();
            let coeffs = store.get(&l.coeffs_name()).unwrap().data().to_vec();
            let base = l
                .config
                .use_base
                .then(|| store.get(&l.base_name()).unwrap().data().to_vec());
            let mut next = vec![0.0; l.n_out];
            for (j, slot) in next.iter_mut().enumerate() {
                for (i, &xi) in xs.iter().enumerate() {
                    let xc = xi.clamp(g.lo, g.hi);
                    let mut phi: f64 = (0..m)
                        .map(|k| coeffs[(i * m + k) * l.n_out + j] * bspline(&g, k, g.degree, xc))
                        .sum();
                    if let Some(b) = &base {
                        phi += b[i * l.n_out + j] * xi / (1.0 + (-xi).exp());
                    }
                    *slot += phi;
                }
            }
            xs = next;
        }
        for (a, b) in got.iter().zip(&xs) {
            worst = worst.max((a - b).abs());
        }
    }
    report(
        2,
        worst <= 1e-12,
        format!("100 stacks, max |vectorized - loop| {worst:.2e} (atol 1e-12)"),
    );
}

#[test]
fn criterion_03_closed_form_losses() {
    // one lesion pixel with equal logits: p_t = 0.5, alpha_t = 0.25
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 1, 1]), true);
    let target = one_hot(&Tensor::new(vec![1, 1], vec![1.0]).unwrap(), 2).unwrap();
    let cfg = LossConfig {
        alpha: 0.25,
        gamma: 2.0,
        use_focal: true,
    };
    let fl = focal_loss(&mut tape, logits, &target, &cfg).unwrap();
    let fl = tape.value(fl).item();
    let fl_ok = (fl - 0.0433217).abs() <= 1e-6;

    let ce_uniform = ce_loss(&mut tape, logits, &target).unwrap();
    let ce_uniform = tape.value(ce_uniform).item();
    let ln2_ok = (ce_uniform - std::f64::consts::LN_2).abs() <= 1e-9;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let plain = LossConfig {
        alpha: 1.0,
        gamma: 0.0,
        use_focal: true,
    };
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let mut tape = Tape::new();
        let l = tape.leaf(rand_tensor(&[2, 6, 6], 4.0, &mut rng), true);
        let target = one_hot(&rand_mask(6, 6, 0.3, &mut rng), 2).unwrap();
        let f = focal_loss(&mut tape, l, &target, &plain).unwrap();
        let f = tape.value(f).item();
        let c = ce_loss(&mut tape, l, &target).unwrap();
        let c = tape.value(c).item();
        worst = worst.max((f - c).abs());
    }
    let eq_ok = worst <= 1e-12;
    report(
        3,
        fl_ok && ln2_ok && eq_ok,
        format!("focal(0.5) {fl:.9} (0.0433217 ± 1e-6); focal(γ0,α1) - CE max {worst:.2e} (1e-12); CE uniform - ln2 {:.2e} (1e-9)", ce_uniform - std::f64::consts::LN_2),
    );
}

#[test]
fn criterion_04_scheduler_endpoints() {
    let t_max = 200;
    let start = cosine_lr(0, t_max, 1e-4, 1e-5).unwrap();
    let end = cosine_lr(t_max, t_max, 1e-4, 1e-5).unwrap();
    let mid = cosine_lr(t_max / 2, t_max, 1e-4, 1e-5).unwrap();
    let errs = [
        (start - 1e-4).abs(),
        (end - 1e-5).abs(),
        (mid - 5.5e-5).abs(),
    ];
    report(
        4,
        errs.iter().all(|&e| e <= 1e-18),
        format!("start {start:e} end {end:e} mid {mid:e}; abs errors {errs:?} (1e-18)"),
    );
}

#[test]
fn criterion_05_anchor_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut bad_k, mut bad_order, mut worst_identity) = (0, 0, 0.0f64);
    for trial in 0..1000 {
        let c = 4;
        let (h, w) = loop {
            let (h, w) = (rng.gen_range(1..9), rng.gen_range(1..9));
            if h * w >= 4 {
                break (h, w);
            }
        };
        let config = PamConfig {
            use_sa1: trial % 2 == 0,
            use_sa2: trial % 3 != 0,
            ..PamConfig::full()
        };
        let pam = PixelAnchor::new("pam", c, config).unwrap();
        let mut store = mygo::ParamStore::new();
        pam.init(&mut store, &mut rng).unwrap();
        let fm = rand_tensor(&[c, h, w], 2.0, &mut rng);

        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(fm.clone());
        let a = pam.forward(&mut tape, &p, x).unwrap().anchors.unwrap();
        let k = ((0.25 * (h * w) as f64).floor() as usize).max(1);
        if a.indices.len() != k {
            bad_k += 1;
        }
        let min_sel = a
            .indices
            .iter()
            .map(|&i| a.saliency[i])
            .fold(f64::INFINITY, f64::min);
        let max_unsel = (0..h * w)
            .filter(|i| !a.indices.contains(i))
            .map(|i| a.saliency[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if min_sel < max_unsel {
            bad_order += 1;
        }

        pam.zero_value_paths(&mut store).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let x = tape.constant(fm.clone());
        let y = pam.forward(&mut tape, &p, x).unwrap().output;
        for (a, b) in tape.value(y).data().iter().zip(fm.data()) {
            worst_identity = worst_identity.max((a - b).abs());
        }
    }
    report(
        5,
        bad_k == 0 && bad_order == 0 && worst_identity <= 1e-12,
        format!("1000 maps: wrong k {bad_k}, selection order violations {bad_order}, zero-value identity error {worst_identity:.1e} (1e-12)"),
    );
}

#[test]
fn criterion_06_metrics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst, mut worst_dice, mut worst_sum) = (0.0f64, 0.0f64, 0.0f64);
    let mut count_mismatch = 0;
    for trial in 0..1000 {
        let density = [0.0, 0.05, 0.3, 0.7, 1.0][trial % 5];
        let pred = rand_mask(16, 16, rng.gen_range(0.0..1.0), &mut rng);
        let truth = rand_mask(16, 16, density, &mut rng);
        let m = compute_metrics(&pred, &truth).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            match (p == 1.0, t == 1.0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        if (tp, fp, tn, fn_) != (m.tp, m.fp, m.tn, m.fn_) {
            count_mismatch += 1;
        }
        let ratio = |a: u64, b: u64| {
            if b == 0 {
                100.0
            } else {
                100.0 * a as f64 / b as f64
            }
        };
        let expect = [
            ratio(tp, tp + fp + fn_),
            ratio(2 * tp, 2 * tp + fp + fn_),
            ratio(tn, tn + fp),
            if tn + fp == 0 {
                0.0
            } else {
                100.0 * fp as f64 / (tn + fp) as f64
            },
        ];
        for (got, want) in [m.iou, m.dice, m.specificity, m.fpr].iter().zip(expect) {
            worst = worst.max((got - want).abs());
        }
        let iou = m.iou / 100.0;
        worst_dice = worst_dice.max((m.dice / 100.0 - 2.0 * iou / (1.0 + iou)).abs());
        worst_sum = worst_sum.max((m.specificity + m.fpr - 100.0).abs());
    }
    report(
        6,
        count_mismatch == 0 && worst <= 1e-12 && worst_dice <= 1e-12 && worst_sum <= 1e-12,
        format!("1000 pairs: count mismatches {count_mismatch}, metric error {worst:.1e}, dice identity {worst_dice:.1e}, spec+fpr-100 {worst_sum:.1e} (1e-12)"),
    );
}

#[test]
fn criterion_07_overfit() {
    let data = generate(&PhantomSpec::default(), 8).unwrap();
    assert_eq!(data[0].image.shape(), &[64, 64]);
    let cfg = TrainConfig {
        batch_size: 8,
        lr_max: 3e-3,
        lr_min: 1e-4,
        epochs: 200,
        model: ModelConfig {
            base_channels: 8,
            pam: Some(PamConfig::full()),
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let iterations = cfg.epochs * data.len().div_ceil(cfg.batch_size);
    let t = Instant::now();
    let out = train(&data, &[], &cfg).unwrap();
    let m = evaluate(&out.model, &out.final_params, &data)
        .unwrap()
        .mean()
        .unwrap();
    let elapsed = t.elapsed();
    let thr = best_threshold_f1(&data);
    report(
        7,
        iterations <= 200 && m.dice >= 95.0 && m.iou >= 90.0 && elapsed < Duration::from_secs(1800) && thr.f1 < 30.0,
        format!(
            "{iterations} iterations, final train Dice {:.2} (≥95) IoU {:.2} (≥90), {:.0}s (<1800); threshold F1 {:.2} (<30)",
            m.dice,
            m.iou,
            elapsed.as_secs_f64(),
            thr.f1
        ),
    );
}

/// Mean pixel cross-entropy of `logits` against `mask`, computed longhand.
fn longhand_ce(logits: &Tensor, mask: &Tensor) -> f64 {
    let (hw, n) = (mask.len(), logits.shape()[0]);
    let l = logits.data();
    let mut total = 0.0;
    for (px, &m) in mask.data().iter().enumerate() {
        let z: Vec<f64> = (0..n).map(|c| l[c * hw + px]).collect();
        let zmax = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        total += lse - z[m as usize];
    }
    total / hw as f64
}

fn desk_data(seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let spec = PhantomSpec {
        size: 32,
        lesion_radius: [2.5, 4.0],
        seed: 100 + seed,
        ..PhantomSpec::default()
    };
    let n = 700;
    let samples = generate(&spec, n).unwrap();
    let split = make_split(
        n,
        &SplitConfig {
            seed,
            ..SplitConfig::default()
        },
    )
    .unwrap();
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    (pick(&split.train), pick(&split.test))
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr_max: 2e-3,
        lr_min: 1e-4,
        epochs: 16,
        seed,
        model: ModelConfig {
            base_channels: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_08_ablation() {
    // wiring: six short runs with checkpoints
    let (train_set, test_set) = desk_data(0);
    let small_train = &train_set[..8];
    let tiny = TrainConfig {
        epochs: 1,
        batch_size: 8,
        ..desk_config(0)
    };
    let dir = TempDir::new().unwrap();
    let rows = run_ablation(
        small_train,
        &test_set[..4],
        &ABLATION_ROWS,
        &tiny,
        Some(dir.path()),
    )
    .unwrap();
    let hashes: Vec<&String> = rows
        .iter()
        .map(|r| r.manifest_hash.as_ref().unwrap())
        .collect();
    let distinct = (0..6).all(|i| (i + 1..6).all(|j| hashes[i] != hashes[j]));

    // one batch in one epoch: the recorded loss is the initial loss
    let model = MyGoModel::new(ABLATION_ROWS[0].apply(&tiny).model).unwrap();
    let params = model
        .init(&mut ChaCha8Rng::seed_from_u64(tiny.seed))
        .unwrap();
    let ce: f64 = small_train
        .iter()
        .map(|s| {
            longhand_ce(
                &model.logits(&params, &input_of(s).unwrap()).unwrap(),
                &s.mask,
            )
        })
        .sum::<f64>()
        / small_train.len() as f64;
    let loss_gap = (rows[0].first_loss - ce).abs();
    // the same parameters under each row's own loss
    let s = &small_train[0];
    let mut tape = Tape::new();
    let p = params.bind_constant(&mut tape);
    let x = tape.constant(input_of(s).unwrap());
    let logits = model.forward(&mut tape, &p, x).unwrap();
    let target = one_hot(&s.mask, 2).unwrap();
    let baseline_loss = ABLATION_ROWS[0].apply(&tiny).loss;
    let total = total_loss(&mut tape, logits, &target, &baseline_loss).unwrap();
    let total = tape.value(total).item();
    let ce_only = ce_loss(&mut tape, logits, &target).unwrap();
    let ce_only = tape.value(ce_only).item();

    // direction on the desk split
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let (train_set, test_set) = if seed == 0 {
            (train_set.clone(), test_set.clone())
        } else {
            desk_data(seed)
        };
        let cfg = desk_config(seed);
        let res = run_ablation(
            &train_set,
            &test_set,
            &[ABLATION_ROWS[0].clone(), ABLATION_ROWS[5].clone()],
            &cfg,
            None,
        )
        .unwrap();
        let (base, ours) = (res[0].iou, res[1].iou);
        if ours >= base {
            wins += 1;
        }
        lines.push(format!("seed {seed}: {base:.2}/{ours:.2}"));
    }
    report(
        8,
        distinct && loss_gap <= 1e-12 && total == ce_only && wins >= 4,
        format!(
            "manifests pairwise distinct {distinct}; Baseline loss - CE {loss_gap:.1e}; Ours ≥ Baseline test IoU in {wins}/5 (≥4) [{}]",
            lines.join(", ")
        ),
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn criterion_09_determinism() {
    let spec = PhantomSpec {
        size: 32,
        lesion_radius: [2.5, 4.0],
        ..PhantomSpec::default()
    };
    let data = generate(&spec, 12).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        lr_max: 1e-3,
        lr_min: 1e-4,
        seed: 9,
        model: ModelConfig {
            base_channels: 4,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    };
    let tmp = TempDir::new().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = train(&data[..8], &data[8..], &cfg).unwrap();
        let dir = tmp.path().join(name);
        save_checkpoint(&dir, &out.model, &out.best_params, &cfg.run_description()).unwrap();
        runs.push((log_csv(&out.log), dir_bytes(&dir)));
    }
    let same_log = runs[0].0 == runs[1].0;
    let same_ck = runs[0].1 == runs[1].1;
    report(
        9,
        same_log && same_ck,
        format!(
            "identical logs {same_log}, identical checkpoint files {same_ck} ({} files)",
            runs[0].1.len()
        ),
    );
}

#[test]
fn criterion_10_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = MyGoModel::new(ModelConfig {
        base_channels: 4,
        ..ModelConfig::default()
    })
    .unwrap();
    let params = model.init(&mut rng).unwrap();
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path().join("ck");
    save_checkpoint(&dir, &model, &params, "round trip").unwrap();
    let back = load_checkpoint(&dir).unwrap();
    let bits = |p: &mygo::ParamStore| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let names = |p: &mygo::ParamStore| p.names().map(str::to_string).collect::<Vec<_>>();
    let ck_ok = back.model.config == model.config
        && names(&back.params) == names(&params)
        && bits(&back.params) == bits(&params);

    let mut pgm_ok = true;
    for _ in 0..20 {
        let (h, w) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let n = h * w;
        let image = Tensor::new(
            vec![h, w],
            (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect(),
        )
        .unwrap();
        let path = tmp.path().join("x.pgm");
        pgm::write_pgm(&path, &image).unwrap();
        let read = pgm::read_pgm(&path).unwrap();
        let expect: Vec<u64> = image
            .data()
            .iter()
            .map(|v| ((v * 255.0).round() / 255.0).to_bits())
            .collect();
        let got: Vec<u64> = read.data().iter().map(|v| v.to_bits()).collect();
        pgm_ok &= read.shape() == image.shape() && got == expect;
        // a quantized image survives unchanged
        pgm::write_pgm(&path, &read).unwrap();
        pgm_ok &= pgm::read_pgm(&path).unwrap() == read;

        let mask = rand_mask(h, w, 0.4, &mut rng);
        pgm::write_mask(&path, &mask).unwrap();
        pgm_ok &= pgm::read_mask(&path).unwrap() == mask;
    }
    report(
        10,
        ck_ok && pgm_ok,
        format!("checkpoint bitwise {ck_ok} ({} params); PGM image and mask round trips bitwise {pgm_ok}", params.numel()),
    );
}
