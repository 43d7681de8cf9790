//! Acceptance criteria 1-10. Every criterion prints one `PASS`/`FAIL` line
//! on stderr. Property criteria (1-5, 9) and the completion part of 10
//! fail the test; the toy-scale trend verdicts (6, 7, 8 and the ordering
//! part of 10) are reported as measured.

use std::io::Write;
use std::sync::OnceLock;

use hrda_core::crop::{sample_context_box, sample_detail_box, CropBox, CropConfig};
use hrda_core::data::{generate_benchmark, BenchmarkSpec};
use hrda_core::fusion::{self, Prediction};
use hrda_core::gradcheck::grad_check_many;
use hrda_core::model::ModelConfig;
use hrda_core::ops::{self, Factor};
use hrda_core::pseudo::{fuse_full, plan_windows, sliding_prediction_with};
use hrda_core::train::{compute_gradients, run_experiment, EvalResult, PreparedData, TrainBatch};
use hrda_core::{AttentionMode, Graph, NetworkParams, TeacherState, Tensor, TrainConfig, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    // written past the test harness capture so the lines always show
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2} {verdict} [{name}] {detail}"
    );
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn probs(shape: &[usize], r: &mut impl Rng) -> Tensor {
    ops::softmax_channels(&uniform(shape, -3.0, 3.0, r)).unwrap()
}

// ---------------------------------------------------------------- 1

fn fusion_identities() -> (bool, String) {
    let cfg = CropConfig::default();
    let (chr, cwr) = cfg.context_hr();
    let (gh, gw) = (cfg.context_h / cfg.stride, cfg.context_w / cfg.stride);
    let (fh, fw) = (chr / cfg.stride, cwr / cfg.stride);
    let mut r = rng(11);
    let mut worst_norm: f64 = 0.0;
    let mut exact = true;
    for trial in 0..20 {
        let ctx = CropBox::new(0, 0, chr, cwr);
        let lr = Prediction::probabilities(probs(&[2, 5, gh, gw], &mut r), ctx);
        let up_lr = ops::resize_bilinear(&lr.scores, Factor::up(cfg.scale)).unwrap();

        // a = 0: context only
        let det = sample_detail_box(&ctx, &cfg, &mut r).unwrap();
        let det_pred = Prediction::probabilities(
            probs(
                &[2, 5, cfg.detail_h / cfg.stride, cfg.detail_w / cfg.stride],
                &mut r,
            ),
            det,
        );
        let padded = fusion::pad_detail(&det_pred, &ctx, &det, &cfg).unwrap();
        for a_ch in [1, 5] {
            let zero =
                fusion::fuse(&lr, &padded, &Tensor::zeros(&[2, a_ch, gh, gw]), &cfg).unwrap();
            exact &= zero.scores == up_lr;
        }

        // a = 1 with a detail crop spanning the whole context crop
        let full = Prediction::probabilities(probs(&[2, 5, fh, fw], &mut r), ctx);
        for a_ch in [1, 5] {
            let ones = fusion::mask_attention(&Tensor::ones(&[2, a_ch, gh, gw]), &ctx, &ctx, &cfg)
                .unwrap();
            let one = fusion::fuse(&lr, &full.scores, &ones, &cfg).unwrap();
            exact &= one.scores == full.scores;
        }
        // the same identities for full-attention pseudo-label fusion
        exact &= fuse_full(&lr, &full, &Tensor::zeros(&[2, 1, gh, gw]), cfg.scale)
            .unwrap()
            .scores
            == up_lr;
        exact &= fuse_full(&lr, &full, &Tensor::ones(&[2, 1, gh, gw]), cfg.scale)
            .unwrap()
            .scores
            == full.scores;

        // partition of unity inside the detail region
        let (t, l, h, w) = fusion::detail_cells_on_fused_grid(&ctx, &det, &cfg).unwrap();
        for a_ch in [1, 5] {
            let a = uniform(&[2, a_ch, gh, gw], 0.0, 1.0, &mut r);
            let masked = fusion::mask_attention(&a, &ctx, &det, &cfg).unwrap();
            let fused = fusion::fuse(&lr, &padded, &masked, &cfg).unwrap();
            let inside = ops::crop(&fused.scores, t, l, h, w).unwrap();
            let err = Prediction::probabilities(inside, det)
                .normalization_error()
                .unwrap();
            worst_norm = worst_norm.max(err);
            // where the upsampled attention vanishes the fused argmax is the context argmax
            let up_a = ops::resize_bilinear(&masked, Factor::up(cfg.scale)).unwrap();
            let (fa, ca) = (
                hrda_core::pseudo::argmax_channels(&fused.scores),
                hrda_core::pseudo::argmax_channels(&up_lr),
            );
            let plane = fh * fw;
            for b in 0..2 {
                for p in 0..plane {
                    let zero_att =
                        (0..a_ch).all(|c| up_a.data()[(b * a_ch + c) * plane + p] == 0.0);
                    if zero_att && fa[b * plane + p] != ca[b * plane + p] {
                        exact = false;
                    }
                }
            }
        }
        let _ = trial;
    }
    let pass = exact && worst_norm < 1e-6;
    (
        pass,
        format!("bit-exact identities: {exact}; max normalization error {worst_norm:.2e}"),
    )
}

// ---------------------------------------------------------------- 2

/// Predictor depending only on the `o x o` cell under each output pixel,
/// with dyadic scores so overlap averages are exact.
fn cell_predictor(x: &Tensor, o: usize) -> Tensor {
    let (n, _, h, w) = x.dims4("cell").unwrap();
    let (gh, gw) = (h / o, w / o);
    let mut out = Tensor::zeros(&[n, 4, gh, gw]);
    for b in 0..n {
        for y in 0..gh {
            for xx in 0..gw {
                let v = x.at4(b, 0, y * o, xx * o) + x.at4(b, 1, y * o + o - 1, xx * o + 1);
                let k = ((v * 7.0).floor() as i64).rem_euclid(4) as usize;
                for c in 0..4 {
                    let s = if c == k { 0.625 } else { 0.125 };
                    out.data_mut()[((b * 4 + c) * gh + y) * gw + xx] = s;
                }
            }
        }
    }
    out
}

fn brute_starts(region: usize, win: usize) -> Vec<usize> {
    let stride = (win / 2).max(1);
    let mut s = Vec::new();
    let mut v = 0;
    while v + win <= region {
        s.push(v);
        v += stride;
    }
    if s.last().is_none_or(|&l| l + win != region) {
        s.push(region - win);
    }
    s
}

fn sliding_oracle() -> (bool, String) {
    let mut ok = true;
    let o = 4;
    let mut r = rng(22);
    // translation-invariant predictor vs whole-input prediction
    for (rh, rw, wh, ww) in [
        (64, 64, 32, 32),
        (96, 64, 64, 32),
        (128, 128, 32, 32),
        (72, 40, 24, 16),
    ] {
        let x = uniform(&[2, 3, rh, rw], 0.0, 1.0, &mut r);
        let plan = plan_windows(rh, rw, wh, ww).unwrap();
        let slid = sliding_prediction_with(|b| Ok(cell_predictor(b, o)), &x, &plan, o).unwrap();
        ok &= slid == cell_predictor(&x, o);
    }
    // real network made of pointwise layers, which is translation invariant on the stride grid
    let point = ModelConfig {
        kernel: 1,
        ..ModelConfig::default()
    };
    let net = NetworkParams::init(&point, &mut r).unwrap();
    let x = uniform(&[1, 3, 96, 96], 0.0, 1.0, &mut r);
    let slid =
        hrda_core::pseudo::sliding_hr_prediction(&net, &x, &plan_windows(96, 96, 32, 32).unwrap())
            .unwrap();
    let whole = ops::softmax_channels(&net.forward_seg(&x).unwrap()).unwrap();
    let net_err = slid.scores.max_abs_diff(&whole);
    ok &= net_err < 1e-12;

    // window plans against a brute-force union of boxes
    let mut plans_ok = 0;
    for _ in 0..200 {
        let (wh, ww) = (r.random_range(1..40usize), r.random_range(1..40usize));
        let (rh, rw) = (
            wh + r.random_range(0..90usize),
            ww + r.random_range(0..90usize),
        );
        let plan = plan_windows(rh, rw, wh, ww).unwrap();
        let mut counts = vec![0u32; rh * rw];
        let mut inside = true;
        for b in &plan.windows {
            inside &= b.bottom <= rh && b.right <= rw && b.height() == wh && b.width() == ww;
            for y in b.top..b.bottom.min(rh) {
                for xx in b.left..b.right.min(rw) {
                    counts[y * rw + xx] += 1;
                }
            }
        }
        let (sr, sc) = (brute_starts(rh, wh), brute_starts(rw, ww));
        let mut expect: Vec<(usize, usize)> = sr
            .iter()
            .flat_map(|&t| sc.iter().map(move |&l| (t, l)))
            .collect();
        let mut got: Vec<(usize, usize)> = plan.windows.iter().map(|b| (b.top, b.left)).collect();
        expect.sort_unstable();
        got.sort_unstable();
        if inside
            && got == expect
            && counts == plan.overlap_counts()
            && counts.iter().all(|&c| c >= 1)
        {
            plans_ok += 1;
        }
    }
    ok &= plans_ok == 200;
    (ok, format!("sliding == whole: network err {net_err:.1e}; {plans_ok}/200 plans match the union oracle"))
}

// ---------------------------------------------------------------- 3

type Case = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Graph, &[Var]) -> hrda_core::Result<Var>>,
);

/// Scalar probe `sum(y * R)` with a fixed random `R`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> hrda_core::Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let r = g.constant(uniform(&shape, -1.0, 1.0, &mut rng(seed)));
    let m = g.mul(y, r)?;
    Ok(g.sum(m))
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

fn primitive_cases(r: &mut ChaCha8Rng) -> Vec<Case> {
    let n = r.random_range(1..3);
    let c = r.random_range(1..5);
    let h = r.random_range(3..9);
    let w = r.random_range(3..9);
    let x = uniform(&[n, c, h, w], -1.0, 1.0, r);
    let s = r.random::<u64>();
    let k = [1usize, 3][r.random_range(0..2)];
    let cout = r.random_range(1..5);
    let stride = r.random_range(1..3);
    let f = r.random_range(1..4);
    let (ch, cw) = (r.random_range(1..=h), r.random_range(1..=w));
    let (top, left) = (r.random_range(0..=h - ch), r.random_range(0..=w - cw));
    let offs: Vec<(usize, usize)> = (0..n)
        .map(|_| (r.random_range(0..=h - ch), r.random_range(0..=w - cw)))
        .collect();
    let pad_offs = offs.clone();
    let target = {
        let mut t = Tensor::zeros(&[n, c, h, w]);
        for b in 0..n {
            for p in 0..h * w {
                let cls = r.random_range(0..c);
                t.data_mut()[(b * c + cls) * h * w + p] = 1.0;
            }
        }
        t
    };
    let q = uniform(&[n, h, w], 0.0, 1.0, r);
    let a1 = uniform(&[n, 1, h, w], -1.0, 1.0, r);
    let ac = uniform(&[n, c, h, w], -1.0, 1.0, r);
    let y2 = uniform(&[n, c, h, w], -1.0, 1.0, r);
    let even = uniform(&[n, c, 2 * h, 2 * w], -1.0, 1.0, r);
    let bs = if n > 1 { 1 } else { 0 };
    vec![
        (
            "conv2d",
            vec![
                x.clone(),
                uniform(&[cout, c, k, k], -1.0, 1.0, r),
                uniform(&[cout], -1.0, 1.0, r),
            ],
            Box::new(move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, k / 2)?;
                probe(g, y, s)
            }),
        ),
        (
            "resize_bilinear_up",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.resize_bilinear(v[0], Factor::up(f))?;
                probe(g, y, s)
            }),
        ),
        (
            "resize_bilinear_down",
            vec![even],
            Box::new(move |g, v| {
                let y = g.resize_bilinear(v[0], Factor::down(2))?;
                probe(g, y, s)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(x.clone())],
            Box::new(move |g, v| {
                let y = g.relu(v[0]);
                probe(g, y, s)
            }),
        ),
        (
            "sigmoid",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.sigmoid(v[0]);
                probe(g, y, s)
            }),
        ),
        (
            "softmax",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.softmax(v[0])?;
                probe(g, y, s)
            }),
        ),
        (
            "normalize_channels",
            vec![x.map(|v| v.abs() + 0.2)],
            Box::new(move |g, v| {
                let y = g.normalize_channels(v[0])?;
                probe(g, y, s)
            }),
        ),
        (
            "add",
            vec![x.clone(), y2.clone()],
            Box::new(move |g, v| {
                let y = g.add(v[0], v[1])?;
                probe(g, y, s)
            }),
        ),
        (
            "sub",
            vec![x.clone(), y2.clone()],
            Box::new(move |g, v| {
                let y = g.sub(v[0], v[1])?;
                probe(g, y, s)
            }),
        ),
        (
            "mul",
            vec![x.clone(), y2.clone()],
            Box::new(move |g, v| {
                let y = g.mul(v[0], v[1])?;
                probe(g, y, s)
            }),
        ),
        (
            "mul_channels_shared",
            vec![a1, x.clone()],
            Box::new(move |g, v| {
                let y = g.mul_channels(v[0], v[1])?;
                probe(g, y, s)
            }),
        ),
        (
            "mul_channels_per_class",
            vec![ac, x.clone()],
            Box::new(move |g, v| {
                let y = g.mul_channels(v[0], v[1])?;
                probe(g, y, s)
            }),
        ),
        (
            "affine",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.affine(v[0], -1.7, 0.3);
                probe(g, y, s)
            }),
        ),
        (
            "square",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0]);
                probe(g, y, s)
            }),
        ),
        (
            "crop",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.crop(v[0], top, left, ch, cw)?;
                probe(g, y, s)
            }),
        ),
        (
            "crop_each",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.crop_each(v[0], &offs, ch, cw)?;
                probe(g, y, s)
            }),
        ),
        (
            "zero_pad",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.zero_pad(v[0], h + 3, w + 2, 2, 1)?;
                probe(g, y, s)
            }),
        ),
        (
            "pad_each",
            vec![uniform(&[n, c, ch, cw], -1.0, 1.0, r)],
            Box::new(move |g, v| {
                let y = g.pad_each(v[0], h, w, &pad_offs)?;
                probe(g, y, s)
            }),
        ),
        (
            "batch_slice",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.batch_slice(v[0], bs, 1)?;
                probe(g, y, s)
            }),
        ),
        (
            "sum",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0]);
                Ok(g.sum(y))
            }),
        ),
        (
            "mean",
            vec![x.clone()],
            Box::new(move |g, v| {
                let y = g.square(v[0]);
                Ok(g.mean(y))
            }),
        ),
        (
            "nll",
            vec![x.map(|v| v.abs() * 0.5 + 0.1)],
            Box::new(move |g, v| g.nll(v[0], &target, &q)),
        ),
    ]
}

/// Finite-difference check of the full source-domain HRDA loss with
/// respect to every network parameter.
fn composite_check(attention_channels: usize) -> f64 {
    let cfg = TrainConfig {
        crop: CropConfig {
            scale: 2,
            stride: 2,
            context_h: 8,
            context_w: 8,
            detail_h: 8,
            detail_w: 8,
        },
        model: ModelConfig {
            channels: vec![4, 6],
            strides: vec![2, 1],
            attention_channels,
            ..ModelConfig::default()
        },
        lambda_t: 0.0,
        lambda_d: 0.3,
        ..TrainConfig::default()
    };
    let mut r = rng(33);
    let params = NetworkParams::init(&cfg.model, &mut r).unwrap();
    let mut labels = Tensor::zeros(&[2, 5, 24, 24]);
    for b in 0..2 {
        for p in 0..576 {
            let cls = (p / 24 / 6 + p % 24 / 5 + b) % 5;
            labels.data_mut()[(b * 5 + cls) * 576 + p] = 1.0;
        }
    }
    let batch = TrainBatch {
        source_images: uniform(&[2, 3, 24, 24], 0.0, 1.0, &mut r),
        source_labels: labels,
        target_images: Tensor::zeros(&[2, 3, 24, 24]),
    };
    let loss = |p: &NetworkParams| compute_gradients(p, p, &batch, &cfg, &mut rng(44)).unwrap();
    let (_, analytic) = loss(&params);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    let grads: Vec<Vec<f64>> = analytic
        .named_tensors()
        .iter()
        .map(|t| t.1.data().to_vec())
        .collect();
    for (ti, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let orig = p.tensors_mut()[ti].data()[j];
            p.tensors_mut()[ti].data_mut()[j] = orig + eps;
            let up = loss(&p).0.total;
            p.tensors_mut()[ti].data_mut()[j] = orig - eps;
            let down = loss(&p).0.total;
            p.tensors_mut()[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

fn gradients() -> (bool, String) {
    let mut r = rng(3);
    let mut worst: (f64, &str) = (0.0, "");
    let mut count = 0;
    for _ in 0..5 {
        for (name, inputs, f) in primitive_cases(&mut r) {
            let e = grad_check_many(|g, v| f(g, v), &inputs, 1e-5).unwrap();
            count += 1;
            if e > worst.0 {
                worst = (e, name);
            }
        }
    }
    let comp = composite_check(1).max(composite_check(5));
    let pass = worst.0 < 1e-4 && comp < 1e-3;
    (
        pass,
        format!(
            "{count} primitive checks, worst {:.2e} ({}); composite hrda_source_loss {comp:.2e}",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------- 4

fn chi2_uniform(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

fn crop_invariants() -> (bool, String) {
    let cfg = CropConfig {
        scale: 2,
        stride: 4,
        context_h: 64,
        context_w: 64,
        detail_h: 64,
        detail_w: 64,
    };
    let (h, w) = (192, 256);
    let k = cfg.align();
    let mut r = rng(44);
    let mut row = vec![0usize; (h - 128) / k + 1];
    let mut col = vec![0usize; (w - 128) / k + 1];
    let mut drow = vec![0usize; (128 - 64) / k + 1];
    let mut dcol = vec![0usize; (128 - 64) / k + 1];
    let mut bad = 0;
    for _ in 0..10_000 {
        let c = sample_context_box(h, w, &cfg, &mut r).unwrap();
        let d = sample_detail_box(&c, &cfg, &mut r).unwrap();
        let aligned = [
            c.top, c.bottom, c.left, c.right, d.top, d.bottom, d.left, d.right,
        ]
        .iter()
        .all(|v| v % k == 0);
        let sized = c.height() == 128 && c.width() == 128 && d.height() == 64 && d.width() == 64;
        if !(aligned && sized && c.bottom <= h && c.right <= w && c.contains(&d)) {
            bad += 1;
            continue;
        }
        row[c.top / k] += 1;
        col[c.left / k] += 1;
        drow[(d.top - c.top) / k] += 1;
        dcol[(d.left - c.left) / k] += 1;
    }
    let p = [&row, &col, &drow, &dcol].map(|c| chi2_uniform(c));
    let pmin = p.iter().cloned().fold(1.0, f64::min);
    let pass = bad == 0 && pmin > 0.01;
    (
        pass,
        format!("{bad} violations in 10000 pairs; min chi-square p-value {pmin:.3}"),
    )
}

// ---------------------------------------------------------------- 5

fn ema_law() -> (bool, String) {
    let alpha = 0.999;
    let cfg = ModelConfig::default();
    let student = NetworkParams::init(&cfg, &mut rng(5)).unwrap();
    let mut teacher =
        TeacherState::new(NetworkParams::init(&cfg, &mut rng(6)).unwrap(), alpha).unwrap();
    let init: Vec<Vec<f64>> = teacher
        .params
        .named_tensors()
        .iter()
        .map(|t| t.1.data().to_vec())
        .collect();
    let theta: Vec<Vec<f64>> = student
        .named_tensors()
        .iter()
        .map(|t| t.1.data().to_vec())
        .collect();
    let mut worst: f64 = 0.0;
    for t in 1..=1000 {
        teacher.ema_update(&student).unwrap();
        let decay = alpha.powi(t);
        for ((cur, p0), th) in teacher.params.named_tensors().iter().zip(&init).zip(&theta) {
            for ((&v, &a), &b) in cur.1.data().iter().zip(p0).zip(th) {
                worst = worst.max(((v - b).abs() - decay * (a - b).abs()).abs());
            }
        }
    }
    let mut demo = TeacherState::new(student.zeros_like(), alpha).unwrap();
    let ones = {
        let mut o = student.zeros_like();
        o.tensors_mut()
            .into_iter()
            .for_each(|t| t.data_mut().fill(1.0));
        o
    };
    demo.ema_update(&ones).unwrap();
    let step = (demo.params.seg_head.bias.data()[0] - 0.001).abs();
    let pass = worst < 1e-10 && step < 1e-15 && TrainConfig::default().alpha == alpha;
    (pass, format!("alpha {alpha}: max deviation from geometric law over 1000 steps {worst:.2e}; one step from 0 towards 1 gives {}", demo.params.seg_head.bias.data()[0]))
}

// ---------------------------------------------------------------- experiments

struct Runs {
    data: PreparedData,
    results: Vec<(&'static str, u64, EvalResult, String)>,
}

fn variants() -> Vec<(&'static str, TrainConfig)> {
    let base = TrainConfig {
        eval_interval: 0,
        ..TrainConfig::default()
    };
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("hrda", base.clone()),
        ("lr_only", with(&|c| c.use_detail_crop = false)),
        ("hr_only", with(&|c| c.use_context_crop = false)),
        ("source_only", with(&|c| c.lambda_t = 0.0)),
        ("average", with(&|c| c.attention = AttentionMode::Average)),
        ("lambda_d_0", with(&|c| c.lambda_d = 0.0)),
        ("lambda_d_0.3", with(&|c| c.lambda_d = 0.3)),
        ("lambda_d_1", with(&|c| c.lambda_d = 1.0)),
    ]
}

fn train(cfg: &TrainConfig, data: &PreparedData) -> (EvalResult, String) {
    let mut csv = Vec::new();
    let r = run_experiment(cfg, data, &mut csv).expect("training run");
    (r.final_eval().clone(), String::from_utf8(csv).unwrap())
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let spec = BenchmarkSpec::default();
        assert!(spec.source_train >= 200 && spec.target_train >= 200);
        assert_eq!(
            (
                spec.scene.height,
                spec.scene.width,
                hrda_core::data::NUM_CLASSES
            ),
            (128, 128, 5)
        );
        let data = PreparedData::from_dataset(&generate_benchmark(&spec).unwrap()).unwrap();
        let mut results = Vec::new();
        for seed in SEEDS {
            for (name, cfg) in variants() {
                assert_eq!(cfg.steps, 2000);
                let cfg = TrainConfig { seed, ..cfg };
                let t = std::time::Instant::now();
                let (e, csv) = train(&cfg, &data);
                let _ = writeln!(
                    std::io::stderr(),
                    "  run {name:<13} seed {seed}: target mIoU {:.4} ({:.0?})",
                    e.miou,
                    t.elapsed()
                );
                results.push((name, seed, e, csv));
            }
        }
        Runs { data, results }
    })
}

fn result(name: &str, seed: u64) -> &'static EvalResult {
    &runs()
        .results
        .iter()
        .find(|r| r.0 == name && r.1 == seed)
        .unwrap()
        .2
}

fn mean_miou(name: &str) -> f64 {
    SEEDS.iter().map(|&s| result(name, s).miou).sum::<f64>() / SEEDS.len() as f64
}

fn resolution_trend() -> (bool, String) {
    let (h, lr, hr, so) = (
        mean_miou("hrda"),
        mean_miou("lr_only"),
        mean_miou("hr_only"),
        mean_miou("source_only"),
    );
    let pass = h - lr >= 0.02 && h - hr >= 0.02 && h - so >= 0.05;
    (pass, format!("mean mIoU hrda {h:.4}, lr_only {lr:.4} ({:+.2} pts), hr_only {hr:.4} ({:+.2} pts), source_only {so:.4} ({:+.2} pts)", 100.0 * (h - lr), 100.0 * (h - hr), 100.0 * (h - so)))
}

fn attention_trend() -> (bool, String) {
    let (l, a) = (mean_miou("hrda"), mean_miou("average"));
    (
        l - a > 0.0,
        format!(
            "mean mIoU learned {l:.4} vs average {a:.4} ({:+.2} pts)",
            100.0 * (l - a)
        ),
    )
}

fn attention_behaviour() -> (bool, String) {
    let mut wins = 0;
    let mut parts = Vec::new();
    for s in SEEDS {
        let e = result("hrda", s);
        let (sm, lg) = (e.attn_small.unwrap(), e.attn_large.unwrap());
        wins += usize::from(sm > lg);
        parts.push(format!("seed {s}: small {sm:.3} / large {lg:.3}"));
    }
    (
        wins * 2 > SEEDS.len(),
        format!("{wins}/3 seeds; {}", parts.join(", ")),
    )
}

fn determinism() -> (bool, String) {
    let cfg = TrainConfig {
        seed: 0,
        ..variants()[0].1.clone()
    };
    let (_, again) = train(&cfg, &runs().data);
    let first = &runs()
        .results
        .iter()
        .find(|r| r.0 == "hrda" && r.1 == 0)
        .unwrap()
        .3;
    let short = TrainConfig {
        steps: 60,
        eval_interval: 20,
        eval_images: 5,
        seed: 7,
        ..TrainConfig::default()
    };
    let (a, b) = (train(&short, &runs().data).1, train(&short, &runs().data).1);
    let pass = *first == again && a == b;
    (
        pass,
        format!(
            "full run CSV identical: {}; 60-step CSV with 4 rows identical: {}",
            *first == again,
            a == b
        ),
    )
}

fn lambda_d_sanity() -> (bool, bool, String) {
    let complete = ["lambda_d_0", "hrda", "lambda_d_0.3", "lambda_d_1"]
        .iter()
        .all(|n| SEEDS.iter().all(|&s| result(n, s).miou.is_finite()));
    let beats_interior = |extreme: f64, interior: [f64; 2]| interior.iter().all(|&i| extreme > i);
    let mut events = Vec::new();
    for (name, label) in [("lambda_d_0", "0"), ("lambda_d_1", "1.0")] {
        for s in SEEDS {
            if beats_interior(
                result(name, s).miou,
                [result("hrda", s).miou, result("lambda_d_0.3", s).miou],
            ) {
                events.push(format!("{label} at seed {s}"));
            }
        }
        if beats_interior(
            mean_miou(name),
            [mean_miou("hrda"), mean_miou("lambda_d_0.3")],
        ) {
            events.push(format!("{label} on the mean"));
        }
    }
    let detail = format!(
        "mean mIoU 0: {:.4}, 0.1: {:.4}, 0.3: {:.4}, 1.0: {:.4}; extreme beating both interior values: {}",
        mean_miou("lambda_d_0"),
        mean_miou("hrda"),
        mean_miou("lambda_d_0.3"),
        mean_miou("lambda_d_1"),
        if events.is_empty() { "never".to_string() } else { events.join(", ") }
    );
    (complete, events.is_empty(), detail)
}

#[test]
fn acceptance_criteria() {
    let mut hard_failures = Vec::new();
    let mut check = |n: usize, name: &str, hard: bool, (pass, detail): (bool, String)| {
        report(n, name, pass, &detail);
        if hard && !pass {
            hard_failures.push(n);
        }
    };
    check(1, "fusion identities", true, fusion_identities());
    check(2, "sliding-window oracle", true, sliding_oracle());
    check(3, "gradient correctness", true, gradients());
    check(4, "crop-geometry invariants", true, crop_invariants());
    check(5, "EMA law", true, ema_law());
    runs();
    check(6, "multi-resolution trend", false, resolution_trend());
    check(7, "learned vs average attention", false, attention_trend());
    check(8, "scale-attention behaviour", false, attention_behaviour());
    check(9, "determinism", true, determinism());
    let (complete, ordered, detail) = lambda_d_sanity();
    check(
        10,
        "lambda_d robustness",
        false,
        (complete && ordered, detail),
    );
    if !complete {
        hard_failures.push(10);
    }
    assert!(
        hard_failures.is_empty(),
        "criteria failed: {hard_failures:?}"
    );
}
