//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::io;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use opunet::data::{normalize_patch, split_dataset, PatchRecord};
use opunet::metrics::f1_from_iou;
use opunet::model::{encode_checkpoint, load_checkpoint, save_checkpoint};
use opunet::{
    ConfusionCounts, OpUNet, OpUNetConfig, OperationalConv2D, Tensor, TransposedOperationalConv2D,
};
use opunet_cli::{
    cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, EvalArgs, GradcheckArgs, Scope, SynthArgs,
};
use rand::{RngExt, SeedableRng};
use rand_xoshiro::SplitMix64;

const GRADCHECK_TOLERANCE: f64 = 1e-5;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const Q1_CASES: usize = 100;
const Q1_TOLERANCE: f64 = 1e-6;
const DEFAULT_PARAMS: usize = 4_131_445;
const REPORTED_PARAMS: f64 = 4.3e6;
const PARAM_BUDGET_SLACK: f64 = 0.04;
const F1_IDENTITY_TOLERANCE: f64 = 1e-12;
const OVERFIT_F1: f64 = 0.99;
const GENERALIZATION_F1: f64 = 0.90;
const LEARNING_BUDGET: Duration = Duration::from_secs(30 * 60);
const RENORMALIZE_TOLERANCE: f32 = 1e-6;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let args = GradcheckArgs {
        scope: Scope::Layer,
        seed: 0,
        corrupt: None,
    };
    let reports = cli(cmd_gradcheck(&args, &mut io::sink()))?;
    let elapsed = start.elapsed();
    // 3 Q × 4 kernels × 2 strides × 2 layer types × (weights, bias, input).
    ensure(reports.len() == 144, || {
        format!("{} groups checked, expected 144", reports.len())
    })?;
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    ensure(worst < GRADCHECK_TOLERANCE, || {
        format!("worst relative error {worst:e}")
    })?;
    ensure(elapsed < GRADCHECK_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "144 groups, worst {worst:.2e} < {GRADCHECK_TOLERANCE:e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn random(shape: &[usize], rng: &mut SplitMix64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = ((h + 2 * p - k) / s + 1, (wd + 2 * p - k) / s + 1);
    Tensor::from_fn([n, cout, ho, wo], |i| {
        let (ox, oy, co, bi) = (
            i % wo,
            i / wo % ho,
            i / (wo * ho) % cout,
            i / (wo * ho * cout),
        );
        let mut acc = b[co];
        for ci in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let (iy, ix) = (
                        (oy * s + ky) as isize - p as isize,
                        (ox * s + kx) as isize - p as isize,
                    );
                    if (0..h as isize).contains(&iy) && (0..wd as isize).contains(&ix) {
                        acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                            * w.data()[((co * cin + ci) * k + ky) * k + kx];
                    }
                }
            }
        }
        acc
    })
}

fn naive_conv_transpose(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    s: usize,
    p: usize,
    op: usize,
) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, k) = (w.shape()[1], w.shape()[2]);
    let (ho, wo) = ((h - 1) * s + k + op - 2 * p, (wd - 1) * s + k + op - 2 * p);
    let mut out = Tensor::from_fn([n, cout, ho, wo], |i| b[i / (ho * wo) % cout]);
    for bi in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let v = x.data()[((bi * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (oy, ox) = (
                                    (iy * s + ky) as isize - p as isize,
                                    (ix * s + kx) as isize - p as isize,
                                );
                                if (0..ho as isize).contains(&oy) && (0..wo as isize).contains(&ox)
                                {
                                    out.data_mut()[((bi * cout + co) * ho + oy as usize) * wo
                                        + ox as usize] +=
                                        v * w.data()[((ci * cout + co) * k + ky) * k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn criterion_2_q1_is_convolution() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut transposed = 0;
    for case in 0..Q1_CASES {
        let (cin, cout) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let k = rng.random_range(1..=6usize);
        let s = rng.random_range(1..=3usize);
        let p = rng.random_range(0..=(k - 1) / 2 + 1).min(k - 1);
        let h = rng.random_range(k.max(2)..=9);
        let x = random(&[rng.random_range(1..=2), cin, h, h], &mut rng);

        let mut conv = OperationalConv2D::<f64>::new(cin, cout, k, 1, s, p).unwrap();
        conv.init_params(rng.random());
        conv.bias = random(&[cout], &mut rng);
        let plain = naive_conv(
            &x,
            &conv.weights.clone().reshape([cout, cin, k, k]).unwrap(),
            conv.bias.data(),
            s,
            p,
        );
        let err = max_rel(&conv.infer(&x).unwrap(), &plain);
        ensure(err < Q1_TOLERANCE, || {
            format!("conv case {case}: error {err:e}")
        })?;
        worst = worst.max(err);

        let op = rng.random_range(0..s);
        if (h - 1) * s + k + op <= 2 * p {
            continue;
        }
        let mut tr = TransposedOperationalConv2D::<f64>::new(cin, cout, k, 1, s, p, op).unwrap();
        tr.init_params(rng.random());
        tr.bias = random(&[cout], &mut rng);
        let plain = naive_conv_transpose(
            &x,
            &tr.weights.clone().reshape([cin, cout, k, k]).unwrap(),
            tr.bias.data(),
            s,
            p,
            op,
        );
        let err = max_rel(&tr.infer(&x).unwrap(), &plain);
        ensure(err < Q1_TOLERANCE, || {
            format!("transposed case {case}: error {err:e}")
        })?;
        worst = worst.max(err);
        transposed += 1;
    }
    ensure(transposed >= Q1_CASES, || {
        format!("only {transposed} transposed cases had a valid geometry")
    })?;
    Ok(format!("{Q1_CASES} conv and {transposed} transposed random cases, worst {worst:.2e} < {Q1_TOLERANCE:e}"))
}

fn criterion_3_architecture() -> Outcome {
    let config = OpUNetConfig::default();
    let model = OpUNet::<f32>::build(&config, 0).unwrap();
    let x = Tensor::from_fn([1, 3, 256, 256], |i| ((i % 509) as f32 / 254.0) - 1.0);
    let mut h = x.clone();
    for layer in model.encoder() {
        h = layer.infer(&h).unwrap().map(f32::tanh);
    }
    ensure(h.shape() == [1, 192, 8, 8], || {
        format!("bottleneck {:?}", h.shape())
    })?;
    let y = model.forward(&x).unwrap();
    ensure(y.shape() == [1, 1, 256, 256], || {
        format!("output {:?}", y.shape())
    })?;

    let layer = |cin: usize, cout: usize, k: usize| 3 * cin * cout * k * k + cout;
    let by_hand = layer(3, 12, 5)
        + layer(12, 24, 5)
        + layer(24, 48, 5)
        + layer(48, 96, 5)
        + layer(96, 192, 5)
        + layer(192, 96, 5)
        + layer(192, 48, 5)
        + layer(96, 24, 5)
        + layer(48, 12, 5)
        + layer(24, 1, 6);
    let counted = model.count_params();
    ensure(
        by_hand == DEFAULT_PARAMS && counted == DEFAULT_PARAMS,
        || format!("{counted} / {by_hand} params"),
    )?;
    let gap = (counted as f64 - REPORTED_PARAMS).abs() / REPORTED_PARAMS;
    ensure(gap < PARAM_BUDGET_SLACK, || {
        format!("{:.1}% from 4.3M", 100.0 * gap)
    })?;
    Ok(format!(
        "1x3x256x256 -> 1x1x256x256, bottleneck 8x8, {counted} params ({:.1}% below 4.3M)",
        100.0 * gap
    ))
}

fn criterion_4_metrics() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let c = ConfusionCounts {
            tp: rng.random_range(1..1_000_000),
            fp: rng.random_range(0..1_000_000),
            fn_: rng.random_range(0..1_000_000),
            tn: rng.random_range(0..1_000_000),
        };
        let s = c.scores();
        worst = worst.max((s.f1 - f1_from_iou(s.iou)).abs());
    }
    ensure(worst < F1_IDENTITY_TOLERANCE, || {
        format!("F1/IoU identity off by {worst:e}")
    })?;
    let (p, r) = (0.987, 0.831);
    let f1_from_pr = 2.0 * p * r / (p + r);
    let from_iou = f1_from_iou(0.821);
    let rounded = |v: f64| (v * 1000.0).round() / 1000.0;
    ensure(
        rounded(from_iou) == 0.902 && rounded(f1_from_pr) == 0.902,
        || format!("0.821 -> {from_iou:.4}, P/R -> {f1_from_pr:.4}"),
    )?;
    Ok(format!("identity within {worst:.1e} on 10000 draws; IoU 0.821 -> F1 {from_iou:.4}, P/R -> {f1_from_pr:.4}"))
}

fn write_config(path: &Path, json: &str) {
    fs::write(path, json).unwrap();
}

fn overfit(root: &Path) -> Result<f64, String> {
    let data = root.join("overfit");
    let synth = SynthArgs {
        out: data.clone(),
        count: 8,
        size: 64,
        seed: 21,
        min_blobs: 0,
        max_blobs: 4,
    };
    cli(cmd_synth(&synth, &mut io::sink()))?;
    let all: String = (0..8).map(|i| format!("synth_{i:05}.ls8p\n")).collect();
    fs::write(data.join("all.txt"), all).unwrap();
    let cfg = root.join("overfit.json");
    write_config(
        &cfg,
        r#"{"seed": 1,
            "model": {"encoder_widths": [4, 8, 16, 32, 64], "input_size": 64},
            "train": {"max_epochs": 500, "patience": 100, "learning_rate": 0.001, "batch_size": 2},
            "data": {"train_manifest": "overfit/all.txt", "val_manifest": "overfit/all.txt"},
            "output": {"checkpoint": "overfit.opun", "log": "overfit.log"}}"#,
    );
    let outcome = cli(cmd_train(&cfg, &mut io::sink()))?;
    ensure(outcome.epochs.len() <= 500, || "ran past max_epochs".into())?;
    let eval = EvalArgs {
        checkpoint: root.join("overfit.opun"),
        manifest: data.join("all.txt"),
        threshold: 0.5,
        resize: false,
    };
    Ok(cli(cmd_eval(&eval, &mut io::sink()))?.f1)
}

fn generalization(root: &Path) -> Result<f64, String> {
    let data = root.join("general");
    let synth = SynthArgs {
        out: data.clone(),
        count: 500,
        size: 64,
        seed: 11,
        min_blobs: 0,
        max_blobs: 4,
    };
    cli(cmd_synth(&synth, &mut io::sink()))?;
    let count = |f: &str| fs::read_to_string(data.join(f)).unwrap().lines().count();
    let sizes = (count("train.txt"), count("val.txt"), count("test.txt"));
    ensure(sizes == (200, 50, 250), || format!("split sizes {sizes:?}"))?;
    let cfg = root.join("general.json");
    write_config(
        &cfg,
        r#"{"seed": 1,
            "model": {"encoder_widths": [4, 8, 16, 32, 64], "input_size": 64},
            "train": {"max_epochs": 200, "patience": 30, "learning_rate": 0.001},
            "data": {"train_manifest": "general/train.txt", "val_manifest": "general/val.txt"},
            "output": {"checkpoint": "general.opun", "log": "general.log"}}"#,
    );
    cli(cmd_train(&cfg, &mut io::sink()))?;
    let eval = EvalArgs {
        checkpoint: root.join("general.opun"),
        manifest: data.join("test.txt"),
        threshold: 0.5,
        resize: false,
    };
    Ok(cli(cmd_eval(&eval, &mut io::sink()))?.f1)
}

fn criterion_5_learning() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let train_f1 = overfit(root.path())?;
    ensure(train_f1 >= OVERFIT_F1, || {
        format!("overfit train F1 {train_f1:.4}")
    })?;
    let test_f1 = generalization(root.path())?;
    let elapsed = start.elapsed();
    ensure(test_f1 >= GENERALIZATION_F1, || {
        format!("generalization test F1 {test_f1:.4}")
    })?;
    ensure(elapsed < LEARNING_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "overfit train F1 {train_f1:.4} >= {OVERFIT_F1}; test F1 {test_f1:.4} >= {GENERALIZATION_F1}; {:.0}s",
        elapsed.as_secs_f64()
    ))
}

fn criterion_6_normalization() -> Outcome {
    let mut rng = SplitMix64::seed_from_u64(6);
    for case in 0..200 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(2..=12));
        let scale = 10f32.powi(rng.random_range(-3..=4));
        let constant = case % 5 == 0;
        let plane = h * w;
        let data: Vec<f32> = (0..3 * plane)
            .map(|i| {
                if constant && i < plane {
                    7.5
                } else {
                    scale * rng.random_range(-1.0f32..1.0)
                }
            })
            .collect();
        let p = PatchRecord::new(
            "n",
            Tensor::new([3, h, w], data).unwrap(),
            Tensor::zeros([h, w]),
        )
        .unwrap();
        let n = normalize_patch(&p);
        for c in 0..3 {
            let raw = &p.bands.data()[c * plane..(c + 1) * plane];
            let out = &n.bands.data()[c * plane..(c + 1) * plane];
            ensure(out.iter().all(|v| (-1.0..=1.0).contains(v)), || {
                format!("case {case}: value outside [-1, 1]")
            })?;
            if raw.iter().all(|&v| v == raw[0]) {
                ensure(out.iter().all(|&v| v == 0.0), || {
                    format!("case {case}: degenerate channel not zero")
                })?;
                continue;
            }
            let (lo, hi) = raw.iter().enumerate().fold((0, 0), |(lo, hi), (i, &v)| {
                (
                    if v < raw[lo] { i } else { lo },
                    if v > raw[hi] { i } else { hi },
                )
            });
            ensure(out[lo] == -1.0 && out[hi] == 1.0, || {
                format!("case {case}: extremes {} {}", out[lo], out[hi])
            })?;
        }
        let again = normalize_patch(&n);
        let drift = again
            .bands
            .data()
            .iter()
            .zip(n.bands.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        ensure(drift <= RENORMALIZE_TOLERANCE, || {
            format!("case {case}: renormalization drift {drift:e}")
        })?;
    }
    Ok("200 random patches: min -> -1, max -> +1 exactly, range kept, constants -> 0, fixed point within 1e-6".into())
}

fn criterion_7_reproducibility() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let dirs = [root.path().join("a"), root.path().join("b")];
    for d in &dirs {
        let synth = SynthArgs {
            out: d.clone(),
            count: 10,
            size: 32,
            seed: 7,
            min_blobs: 0,
            max_blobs: 4,
        };
        cli(cmd_synth(&synth, &mut io::sink()))?;
    }
    for name in ["train.txt", "val.txt", "test.txt"]
        .into_iter()
        .map(String::from)
        .chain((0..10).map(|i| format!("synth_{i:05}.ls8p")))
    {
        let same = fs::read(dirs[0].join(&name)).unwrap() == fs::read(dirs[1].join(&name)).unwrap();
        ensure(same, || format!("synthetic file {name} differs"))?;
    }

    let mut checkpoints = Vec::new();
    for d in &dirs {
        let cfg = d.join("run.json");
        write_config(
            &cfg,
            r#"{"seed": 5,
                "model": {"encoder_widths": [2, 4, 4, 8, 8], "input_size": 32},
                "train": {"max_epochs": 3, "patience": 3, "learning_rate": 0.001, "batch_size": 2},
                "data": {"train_manifest": "train.txt", "val_manifest": "val.txt"}}"#,
        );
        cli(cmd_train(&cfg, &mut io::sink()))?;
        checkpoints.push(fs::read(d.join("model.opun")).unwrap());
    }
    ensure(checkpoints[0] == checkpoints[1], || {
        "cmd_train checkpoints differ".into()
    })?;

    let original = dirs[0].join("model.opun");
    let loaded = cli(load_checkpoint(&original))?;
    ensure(cli(encode_checkpoint(&loaded))? == checkpoints[0], || {
        "re-encoded checkpoint differs".into()
    })?;
    let copy = root.path().join("copy.opun");
    cli(save_checkpoint(&loaded, &copy))?;
    let reloaded = cli(load_checkpoint(&copy))?;
    let x = Tensor::from_fn([2, 3, 32, 32], |i| ((i * 13 % 97) as f32 / 48.0) - 1.0);
    let (a, b) = (loaded.forward(&x).unwrap(), reloaded.forward(&x).unwrap());
    ensure(
        a.data()
            .iter()
            .zip(b.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()),
        || "forward differs".into(),
    )?;
    Ok(format!(
        "synthetic files, {}-byte checkpoints and round-trip forwards bit-identical",
        checkpoints[0].len()
    ))
}

fn criterion_8_split() -> Outcome {
    for n in 3..=1000usize {
        let ids: Vec<String> = (0..n).map(|i| format!("p{i}")).collect();
        let m = cli(split_dataset(&ids, n as u64))?;
        let sizes = (m.train.len(), m.val.len(), m.test.len());
        let expected = (n * 4 / 10, n / 10, n - n * 4 / 10 - n / 10);
        ensure(sizes == expected, || {
            format!("n={n}: sizes {sizes:?}, expected {expected:?}")
        })?;
        let mut all: Vec<&String> = m.train.iter().chain(&m.val).chain(&m.test).collect();
        all.sort();
        all.dedup();
        ensure(all.len() == n, || {
            format!("n={n}: split is not a partition")
        })?;
    }
    Ok("40/10/50 floor split is a partition for every n in [3, 1000]".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("gradient correctness", criterion_1_gradients),
        (
            "Q=1 degeneracy to convolution",
            criterion_2_q1_is_convolution,
        ),
        ("architecture contract", criterion_3_architecture),
        ("metric consistency", criterion_4_metrics),
        ("desk-scale learning", criterion_5_learning),
        ("normalization", criterion_6_normalization),
        ("reproducibility", criterion_7_reproducibility),
        ("split proportions", criterion_8_split),
    ];
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL  {}. {name}: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
