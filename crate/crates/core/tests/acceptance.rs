//! Acceptance suite. Prints one `criterion N ...: PASS|FAIL` line per
//! criterion and exits nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,9` restricts the run; `MNIST_DIR` points at the
//! official IDX files (default `data/mnist` at the workspace root).

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use spinalxfer::backbone::{decode_feature_file, encode_feature_file, Backbone, MiniCnnConfig};
use spinalxfer::checkpoint::Checkpoint;
use spinalxfer::config::ExperimentConfig;
use spinalxfer::gradcheck::{check_parameters, finite_difference_check, FdReport};
use spinalxfer::heads::{
    spinal_param_count, traditional_param_count, HalfOrder, SpinalHead, SpinalHeadConfig, TraditionalHead,
    TraditionalHeadConfig,
};
use spinalxfer::ingest::{
    dicom_to_rgb, encode_minimal_dicom, encode_pgm16, load_idx, parse_dicom_bytes, decode_pgm16, RawGray16,
    EXPLICIT_VR_LITTLE_ENDIAN,
};
use spinalxfer::layers::{seeded_rng, Parameterized};
use spinalxfer::metrics::{
    accuracy_from_class_counts, class_metrics, format_ratio, overall_accuracy, ClassMetrics, ConfusionMatrix,
};
use spinalxfer::runner::{load_data, run_restarts, RestartResult};
use spinalxfer::trainer::{
    evaluate, prepare_protocol, step_lr, train_epoch, Protocol, Samples, Schedule, Stage, TrainData, TrainState,
};
use spinalxfer::{Tape, Tensor, Var};

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_available() -> bool {
    let d = mnist_dir();
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
        .iter()
        .all(|f| d.join(f).is_file())
}

fn require_mnist() -> Result<(), String> {
    ensure(mnist_available(), || format!("official MNIST IDX files not found in {}", mnist_dir().display()))
}

fn random_tensor(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut rng = seeded_rng(&[seed, salt]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ out ⊙ r` for a fixed random `r`, so every output element carries a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> spinalxfer::Result<Var> {
    let r = random_tensor(tape.shape(out), seed, 999);
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

// 1 ------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, FdReport)> = Vec::new();
    let mut record = |name: &'static str, r: FdReport| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some((_, w)) => *w = w.merge(r),
        None => worst.push((name, r)),
    };
    for seed in 0..SEEDS {
        let a = random_tensor(&[3, 4], seed, 1);
        let b = random_tensor(&[4, 5], seed, 2);
        let (bc, ac) = (b.clone(), a.clone());
        record(
            "matmul",
            finite_difference_check(
                |t, x| {
                    let bv = t.constant(bc.clone());
                    let o = t.matmul(x, bv)?;
                    project(t, o, seed)
                },
                &a,
                H,
            )
            .map_err(err)?
            .merge(
                finite_difference_check(
                    |t, x| {
                        let av = t.constant(ac.clone());
                        let o = t.matmul(av, x)?;
                        project(t, o, seed)
                    },
                    &b,
                    H,
                )
                .map_err(err)?,
            ),
        );

        let img = random_tensor(&[2, 2, 6, 6], seed, 3);
        let ker = random_tensor(&[3, 2, 3, 3], seed, 4);
        for (stride, pad) in [(1, 1), (2, 0)] {
            let (kc, ic) = (ker.clone(), img.clone());
            record(
                "conv2d",
                finite_difference_check(
                    |t, x| {
                        let k = t.constant(kc.clone());
                        let o = t.conv2d(x, k, stride, pad)?;
                        project(t, o, seed)
                    },
                    &img,
                    H,
                )
                .map_err(err)?
                .merge(
                    finite_difference_check(
                        |t, k| {
                            let x = t.constant(ic.clone());
                            let o = t.conv2d(x, k, stride, pad)?;
                            project(t, o, seed)
                        },
                        &ker,
                        H,
                    )
                    .map_err(err)?,
                ),
            );
        }

        let x = random_tensor(&[4, 7], seed, 5);
        record(
            "relu",
            finite_difference_check(
                |t, x| {
                    let o = t.relu(x)?;
                    project(t, o, seed)
                },
                &x,
                H,
            )
            .map_err(err)?,
        );

        let x = random_tensor(&[2, 3, 4, 6], seed, 6);
        record(
            "maxpool2",
            finite_difference_check(
                |t, x| {
                    let o = t.maxpool2(x)?;
                    project(t, o, seed)
                },
                &x,
                H,
            )
            .map_err(err)?,
        );

        let x = random_tensor(&[3, 4], seed, 7);
        let other = random_tensor(&[3, 2], seed, 8);
        record(
            "concat",
            finite_difference_check(
                |t, x| {
                    let y = t.constant(other.clone());
                    let half = t.narrow(x, 1, 1, 2)?;
                    let o = t.concat(&[half, y, x], 1)?;
                    project(t, o, seed)
                },
                &x,
                H,
            )
            .map_err(err)?,
        );

        let bias = random_tensor(&[3], seed, 9);
        let feat = random_tensor(&[2, 3, 2, 2], seed, 10);
        let fc = feat.clone();
        record(
            "bias",
            finite_difference_check(
                |t, b| {
                    let x = t.constant(fc.clone());
                    let o = t.add_bias(x, b)?;
                    project(t, o, seed)
                },
                &bias,
                H,
            )
            .map_err(err)?,
        );

        let logits = random_tensor(&[5, 4], seed, 11);
        let labels = [0, 3, 1, 1, 2];
        record(
            "softmax-CE",
            finite_difference_check(|t, x| t.softmax_cross_entropy(x, &labels), &logits, H).map_err(err)?,
        );

        let input = random_tensor(&[3, 10], seed, 12);
        let labels = [2, 0, 1];
        for order in [HalfOrder::FirstHalfFirst, HalfOrder::SecondHalfFirst] {
            let cfg = SpinalHeadConfig {
                half_order: order,
                ..SpinalHeadConfig::new(10, 3, 4, 3)
            };
            let mut head = SpinalHead::<f64>::init(cfg, seed).map_err(err)?;
            jitter_biases(&mut head, seed);
            let params = check_parameters(
                &mut head,
                |h, t| {
                    let x = t.constant(input.clone());
                    let o = h.forward(t, x)?;
                    t.softmax_cross_entropy(o, &labels)
                },
                H,
            )
            .map_err(err)?;
            ensure(params.checked == spinal_param_count(&cfg), || "spinal head parameter coverage".into())?;
            let inputs = finite_difference_check(
                |t, x| {
                    let o = head.forward(t, x)?;
                    t.softmax_cross_entropy(o, &labels)
                },
                &input,
                H,
            )
            .map_err(err)?;
            record("spinal head", params.merge(inputs));
        }

        let cfg = TraditionalHeadConfig {
            input_dim: 10,
            hidden: 6,
            classes: 3,
        };
        let mut head = TraditionalHead::<f64>::init(cfg, seed).map_err(err)?;
        jitter_biases(&mut head, seed);
        let params = check_parameters(
            &mut head,
            |h, t| {
                let x = t.constant(input.clone());
                let o = h.forward(t, x)?;
                t.softmax_cross_entropy(o, &labels)
            },
            H,
        )
        .map_err(err)?;
        ensure(params.checked == traditional_param_count(&cfg), || "traditional head parameter coverage".into())?;
        record("traditional head", params);
    }
    let elapsed = start.elapsed();
    let mut detail = Vec::new();
    for (name, r) in &worst {
        ensure(r.passes(TOL), || format!("{name}: {r:?}"))?;
        detail.push(format!("{name} {:.1e}", r.max_rel_err));
    }
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("{SEEDS} seeds, max rel err: {}; {:.2}s", detail.join(", "), elapsed.as_secs_f64()))
}

fn jitter_biases<M: Parameterized<f64>>(m: &mut M, seed: u64) {
    m.visit_params_mut(&mut |name, t| {
        if name.ends_with("bias") {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = 0.1 * ((i as u64 + seed) as f64).sin();
            }
        }
    });
}

// 2 ------------------------------------------------------------------------

const MNIST_ROWS: [(u64, u64, u64, &str, &str, &str); 10] = [
    (978, 1, 2, "0.9990", "0.9980", "0.9985"),
    (1135, 4, 0, "0.9965", "1.0000", "0.9982"),
    (1027, 1, 5, "0.9990", "0.9952", "0.9971"),
    (1009, 4, 1, "0.9961", "0.9990", "0.9975"),
    (980, 5, 2, "0.9949", "0.9980", "0.9964"),
    (888, 2, 4, "0.9978", "0.9955", "0.9966"),
    (955, 2, 3, "0.9979", "0.9969", "0.9974"),
    (1025, 2, 3, "0.9981", "0.9971", "0.9976"),
    (971, 1, 3, "0.9990", "0.9969", "0.9979"),
    (1006, 3, 3, "0.9970", "0.9970", "0.9970"),
];

const COVID_ROWS: [(u64, u64, u64, &str, &str, &str); 2] = [
    (58, 41, 39, "0.5859", "0.5979", "0.5918"),
    (178, 39, 41, "0.8203", "0.8128", "0.8165"),
];

fn check_rows(rows: &[(u64, u64, u64, &str, &str, &str)]) -> Result<Vec<ClassMetrics>, String> {
    let mut out = Vec::new();
    for (k, &(tp, fp, fn_, p, r, f)) in rows.iter().enumerate() {
        let m = ClassMetrics::from_counts(tp, fp, fn_);
        let got = [format_ratio(m.precision), format_ratio(m.recall), format_ratio(m.f1)];
        ensure(got == [p, r, f], || format!("row {k}: got {got:?}, printed {:?}", [p, r, f]))?;
        out.push(m);
    }
    Ok(out)
}

fn criterion_2() -> Outcome {
    let mnist = check_rows(&MNIST_ROWS)?;
    let covid = check_rows(&COVID_ROWS)?;
    let acc3 = accuracy_from_class_counts(&mnist).map_err(err)?;
    ensure(acc3 == 9974.0 / 10000.0, || format!("MNIST accuracy {acc3}"))?;
    let m = ConfusionMatrix::from_counts(vec![vec![58, 39], vec![41, 178]], vec!["none".into(), "opacity".into()])
        .map_err(err)?;
    let acc4 = overall_accuracy(&m).map_err(err)?;
    ensure(acc4 == 236.0 / 316.0, || format!("COVID accuracy {acc4}"))?;
    ensure(accuracy_from_class_counts(&covid).map_err(err)? == acc4, || "COVID count accuracy".into())?;
    let from_matrix = class_metrics(&m);
    ensure(from_matrix == covid, || "COVID matrix metrics".into())?;
    Ok(format!(
        "12 rows match to 4 decimals; accuracies {:.2}% and {:.2}%",
        100.0 * acc3,
        100.0 * acc4
    ))
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let trace: Vec<f64> = Schedule::default().lr_trace().into_iter().map(|(_, lr)| lr).collect();
    let mut expected = vec![0.01; 7];
    expected.extend([0.001; 3]);
    expected.extend([0.001; 7]);
    expected.extend([0.0001; 3]);
    ensure(trace == expected, || format!("trace {trace:?}"))?;
    ensure(step_lr(0.01, 7, 7, 0.1) == 0.001, || "step_lr".into())?;
    Ok("20-epoch trace equals [0.01]x7 [0.001]x3 [0.001]x7 [0.0001]x3".into())
}

// 4 ------------------------------------------------------------------------

fn tiny_image_data(n: usize, classes: usize, seed: u64) -> Samples {
    let (px, labels) = common::synthetic_images(n, classes, seed);
    let side = common::SIDE;
    let inputs = Tensor::new(vec![n, 1, side, side], px.iter().map(|&p| p as f32 / 255.0).collect()).unwrap();
    Samples::new(
        inputs,
        labels.iter().map(|&l| l as usize).collect(),
        (0..classes).map(|c| c.to_string()).collect(),
    )
    .unwrap()
}

fn criterion_4() -> Outcome {
    let bb = MiniCnnConfig {
        in_channels: 1,
        widths: vec![4, 8],
        height: common::SIDE,
        width: common::SIDE,
    };
    let head = spinalxfer::heads::HeadConfig::Spinal(SpinalHeadConfig::new(bb.feature_dim(), 4, 4, 3));
    let source_model = Backbone::<f32>::init(bb.clone(), 17).map_err(err)?;
    let source = Checkpoint::from_model(&source_model).map_err(err)?;
    let source_crc = source.crc();
    let data = TrainData {
        train: tiny_image_data(96, 3, 1),
        val: tiny_image_data(24, 3, 2),
        test: Some(tiny_image_data(24, 3, 3)),
        train_transform: None,
        eval_transform: None,
    };
    let schedule = Schedule {
        stages: vec![Stage { lr: 0.01, epochs: 3 }, Stage { lr: 0.001, epochs: 2 }],
        batch_size: 16,
        ..Schedule::default()
    };
    let mut crcs = Vec::new();
    for protocol in [Protocol::TransferLearning, Protocol::TransferredInit] {
        let model = prepare_protocol(protocol, Some(&bb), &head, Some(&source), 5).map_err(err)?;
        let outcome = spinalxfer::trainer::two_stage_train(model, &data, &schedule, 5).map_err(err)?;
        let trained = outcome.state.model.backbone_checkpoint().map_err(err)?;
        let best = outcome.state.best_model().backbone_checkpoint().map_err(err)?;
        crcs.push((protocol, trained.crc(), best.crc(), trained.encode() == source.encode()));
    }
    let (_, tl_last, tl_best, tl_bytes) = crcs[0];
    let (_, ti_last, ti_best, ti_bytes) = crcs[1];
    ensure(tl_bytes && tl_last == source_crc && tl_best == source_crc, || {
        format!("TL backbone {tl_last:08x}/{tl_best:08x} vs source {source_crc:08x}")
    })?;
    ensure(!ti_bytes && ti_last != source_crc && ti_best != source_crc, || {
        format!("TI backbone {ti_last:08x} equals source {source_crc:08x}")
    })?;
    Ok(format!("source {source_crc:08x}; TL {tl_last:08x} (identical bytes); TI {ti_last:08x}"))
}

// 5 ------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let mut rng = seeded_rng(&[5, 5]);
    for _ in 0..100 {
        let cfg = SpinalHeadConfig {
            half_order: if rng.gen() { HalfOrder::FirstHalfFirst } else { HalfOrder::SecondHalfFirst },
            ..SpinalHeadConfig::new(2 * rng.gen_range(1..60), rng.gen_range(1..40), rng.gen_range(2..7), rng.gen_range(2..12))
        };
        let head = SpinalHead::<f32>::zeros(cfg).map_err(err)?;
        let mut enumerated = 0;
        head.visit_params(&mut |_, t| enumerated += t.numel());
        ensure(enumerated == spinal_param_count(&cfg), || format!("{cfg:?}: {enumerated} enumerated"))?;
    }
    let mut cases = 0;
    for w in [1, 2, 4, 8, 16, 32, 64, 128] {
        for l in 2..=8 {
            for c in [2, 10, 100] {
                for d in [2 * w + 2, 3 * w, 4 * w, 512, 2048, 25088] {
                    if d <= 2 * w || d % 2 != 0 {
                        continue;
                    }
                    let s = spinal_param_count(&SpinalHeadConfig::new(d, w, l, c));
                    let t = traditional_param_count(&TraditionalHeadConfig {
                        input_dim: d,
                        hidden: l * w,
                        classes: c,
                    });
                    ensure(s < t, || format!("D={d} w={w} L={l} C={c}: spinal {s} >= traditional {t}"))?;
                    cases += 1;
                }
            }
        }
    }
    Ok(format!("100 random configs enumerate exactly; spinal < traditional on {cases} grid points"))
}

// runner helpers -------------------------------------------------------------

fn pairs_to_config(pairs: &[(&str, &str, String)]) -> Result<ExperimentConfig, String> {
    ExperimentConfig::parse(&common::config_text(pairs)).map_err(err)
}

fn mnist_pairs(extra: &[(&'static str, &'static str, &str)]) -> Vec<(&'static str, &'static str, String)> {
    let mut pairs = vec![
        ("run", "name", "acceptance".to_string()),
        ("data", "kind", "mnist".into()),
        ("data", "dir", mnist_dir().display().to_string()),
        ("augment", "resize", "28".into()),
        ("head", "width", "64".into()),
        ("head", "sublayers", "4".into()),
    ];
    pairs.extend(extra.iter().map(|&(s, k, v)| (s, k, v.to_string())));
    pairs
}

fn run_config(cfg: &ExperimentConfig) -> Result<Vec<RestartResult>, String> {
    let loaded = load_data(cfg).map_err(err)?;
    run_restarts(cfg, cfg.head.kind, &loaded).map_err(err)
}

// 6 ------------------------------------------------------------------------

fn desk_run(train_subset: &str, minutes: u64) -> Result<(f64, Duration), String> {
    let cfg = pairs_to_config(&mnist_pairs(&[
        ("data", "train_subset", train_subset),
        ("augment", "train", "mnist"),
        ("schedule", "batch_size", "16"),
    ]))?;
    let start = Instant::now();
    let results = run_config(&cfg)?;
    let elapsed = start.elapsed();
    let acc = results[0].test_accuracy();
    ensure(acc >= 0.99 - if train_subset == "0" { 0.0 } else { 0.02 }, || {
        format!("subset {train_subset}: test accuracy {:.2}% in {elapsed:?}", 100.0 * acc)
    })?;
    ensure(elapsed < Duration::from_secs(60 * minutes), || {
        format!("subset {train_subset}: {:.2}% but took {elapsed:?}", 100.0 * acc)
    })?;
    Ok((acc, elapsed))
}

fn criterion_6() -> Outcome {
    require_mnist()?;
    let (small, small_t) = desk_run("6000", 5)?;
    let (full, full_t) = desk_run("0", 60)?;
    Ok(format!(
        "6k subset {:.2}% in {:.0}s; full 60k {:.2}% in {:.1} min",
        100.0 * small,
        small_t.as_secs_f64(),
        100.0 * full,
        full_t.as_secs_f64() / 60.0
    ))
}

// 7 ------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    require_mnist()?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let common_keys: [(&'static str, &'static str, &str); 3] =
        [("augment", "train", "none"), ("schedule", "batch_size", "16"), ("data", "train_fraction", "0.8")];
    let mut wins = 0;
    let mut lines = Vec::new();
    for rep in 0..5u64 {
        let seed = (1000 + 100 * rep).to_string();
        let mut pre = common_keys.to_vec();
        pre.extend([
            ("run", "seed", seed.as_str()),
            ("data", "classes", "0,1,2,3,4"),
            ("data", "train_subset", "3000"),
            ("data", "test_subset", "500"),
            ("schedule", "stage1_epochs", "3"),
            ("schedule", "stage2_epochs", "1"),
        ]);
        let source = run_config(&pairs_to_config(&mnist_pairs(&pre))?)?;
        let src_path = tmp.path().join(format!("source-{rep}.spnc"));
        source[0].checkpoint.save(&src_path).map_err(err)?;
        let src = src_path.display().to_string();
        let mut tops = Vec::new();
        for mode in ["tl", "ti"] {
            let mut keys = common_keys.to_vec();
            keys.extend([
                ("run", "seed", seed.as_str()),
                ("run", "restarts", "5"),
                ("data", "classes", "5,6,7,8,9"),
                ("data", "train_subset", "500"),
                ("data", "test_subset", "2000"),
                ("schedule", "stage1_epochs", "4"),
                ("schedule", "stage2_epochs", "2"),
                ("protocol", "mode", mode),
                ("protocol", "source", src.as_str()),
            ]);
            let runs = run_config(&pairs_to_config(&mnist_pairs(&keys))?)?;
            let top = runs.iter().map(RestartResult::test_accuracy).fold(f64::NEG_INFINITY, f64::max);
            let seeds: Vec<String> = runs.iter().map(|r| r.seed.to_string()).collect();
            tops.push((top, seeds.join(" ")));
        }
        let ti_wins = tops[1].0 >= tops[0].0;
        wins += ti_wins as usize;
        lines.push(format!(
            "rep {rep} seeds [{}]: TL top {:.2}%, TI top {:.2}%",
            tops[0].1,
            100.0 * tops[0].0,
            100.0 * tops[1].0
        ));
    }
    for l in &lines {
        println!("    {l}");
    }
    ensure(wins >= 4, || format!("TI top >= TL top in only {wins}/5 repetitions"))?;
    Ok(format!("TI top >= TL top in {wins}/5 repetitions (seeds listed above)"))
}

// 8 ------------------------------------------------------------------------

fn fingerprint(results: &[RestartResult]) -> Vec<(Vec<String>, u32, String)> {
    results
        .iter()
        .map(|r| {
            let history = r.outcome.state.history.iter().map(|e| format!("{e:?}")).collect();
            let test = r.outcome.test.as_ref().map(ConfusionMatrix::to_csv).unwrap_or_default();
            (history, r.checkpoint.crc(), test)
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let data = tmp.path().join("synthetic");
    common::write_synthetic_mnist(&data, 200, 60, 4);
    let feats = tmp.path().join("features.ftns");
    let mut rng = seeded_rng(&[8]);
    let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
    let values: Vec<f32> = labels
        .iter()
        .flat_map(|&l| (0..6).map(move |d| if d / 2 == l { 1.0 } else { 0.0 }))
        .map(|v: f32| v + rng.gen_range(-0.3..0.3))
        .collect();
    fs::write(&feats, encode_feature_file(&values, 6, &labels).map_err(err)?).map_err(err)?;

    let image = common::with(
        common::image_pairs(&data, tmp.path()),
        &[("augment", "train", "mnist"), ("run", "restarts", "3"), ("run", "workers", "2"), ("run", "seed", "42")],
    );
    let f = feats.display().to_string();
    let features: Vec<(&str, &str, String)> = [
        ("run", "seed", "7"),
        ("run", "restarts", "2"),
        ("data", "kind", "features"),
        ("data", "train_file", f.as_str()),
        ("data", "test_file", f.as_str()),
        ("backbone", "kind", "none"),
        ("head", "kind", "traditional"),
        ("head", "hidden", "8"),
        ("schedule", "stage1_epochs", "3"),
        ("schedule", "stage2_epochs", "3"),
        ("schedule", "batch_size", "8"),
    ]
    .into_iter()
    .map(|(s, k, v)| (s, k, v.to_string()))
    .collect();
    let mut checked = Vec::new();
    for (name, pairs) in [("image+augment", image), ("features", features)] {
        let cfg = pairs_to_config(&pairs)?;
        let a = fingerprint(&run_config(&cfg)?);
        let b = fingerprint(&run_config(&cfg)?);
        ensure(a == b, || format!("{name}: runs differ"))?;
        let crcs: Vec<String> = a.iter().map(|(_, c, _)| format!("{c:08x}")).collect();
        checked.push(format!("{name} [{}]", crcs.join(",")));
    }
    Ok(format!("identical histories and checkpoint CRCs: {}", checked.join("; ")))
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    require_mnist()?;
    let d = mnist_dir();
    let train = load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte")).map_err(err)?;
    let test = load_idx(&d.join("t10k-images-idx3-ubyte"), &d.join("t10k-labels-idx1-ubyte")).map_err(err)?;
    ensure(train.len() == 60000 && test.len() == 10000, || format!("N = {}/{}", train.len(), test.len()))?;
    ensure(train.image_shape() == (1, 28, 28), || format!("shape {:?}", train.image_shape()))?;

    let mut ck = Checkpoint::new();
    let bb = Backbone::<f32>::init(MiniCnnConfig::mnist(), 3).map_err(err)?;
    for (name, t) in bb.named_params() {
        ck.insert(name, t).map_err(err)?;
    }
    ck.insert("extra.f64", Tensor::new(vec![3], vec![f64::MIN_POSITIVE, -0.0, 1e300]).unwrap())
        .map_err(err)?;
    let bytes = ck.encode();
    let again = Checkpoint::decode(&bytes).map_err(err)?;
    ensure(again.encode() == bytes && again.crc() == ck.crc(), || "checkpoint round trip".into())?;

    let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
    let feats: Vec<f32> = (0..50 * 7).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
    let fbytes = encode_feature_file(&feats, 7, &labels).map_err(err)?;
    let set = decode_feature_file(&fbytes).map_err(err)?;
    ensure(set.features.data() == feats.as_slice() && set.labels == labels, || "feature payload".into())?;
    ensure(
        encode_feature_file(set.features.data(), 7, &set.labels).map_err(err)? == fbytes,
        || "feature file bytes".into(),
    )?;

    let raw = RawGray16::new(33, 21, vec![1234; 33 * 21]).map_err(err)?.with_rescale(1.0, -1024.0);
    let dicom = parse_dicom_bytes(&encode_minimal_dicom(&raw, EXPLICIT_VR_LITTLE_ENDIAN)).map_err(err)?;
    let pgm = decode_pgm16(&encode_pgm16(&raw)).map_err(err)?;
    for (name, r) in [("DICOM", dicom), ("PGM", pgm)] {
        let rgb = dicom_to_rgb(&r, 512).map_err(err)?;
        ensure(rgb.shape() == [3, 512, 512], || format!("{name} shape {:?}", rgb.shape()))?;
        let plane = 512 * 512;
        ensure(rgb.data()[plane..].iter().all(|&v| v == 0.0), || format!("{name}: nonzero edge channel"))?;
    }
    Ok("IDX N=60000/10000; checkpoint and feature files bitwise; constant DICOM/PGM edges zero".into())
}

// 10 -----------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let (samples, source) = if mnist_available() {
        let d = mnist_dir();
        let set = load_idx(&d.join("train-images-idx3-ubyte"), &d.join("train-labels-idx1-ubyte"))
            .and_then(|s| s.take(32))
            .map_err(err)?;
        (Samples::from(set), "MNIST")
    } else {
        (tiny_image_data(32, 10, 10), "synthetic")
    };
    let s = samples.inputs.shape().to_vec();
    let bb = MiniCnnConfig {
        height: s[2],
        width: s[3],
        ..MiniCnnConfig::mnist()
    };
    let head = spinalxfer::heads::HeadConfig::Spinal(SpinalHeadConfig::new(
        bb.feature_dim(),
        64,
        4,
        samples.classes(),
    ));
    let model = prepare_protocol(Protocol::Scratch, Some(&bb), &head, None, 0).map_err(err)?;
    let schedule = Schedule {
        stages: vec![Stage { lr: 0.01, epochs: 200 }],
        gamma: 1.0,
        batch_size: 8,
        ..Schedule::default()
    };
    let data = TrainData {
        train: samples.clone(),
        val: samples.clone(),
        test: None,
        train_transform: None,
        eval_transform: None,
    };
    let mut state = TrainState::new(model);
    for epoch in 1..=200 {
        train_epoch(&mut state, &data, &schedule, 1, 0.01, 0).map_err(err)?;
        let acc = overall_accuracy(&evaluate(&state.model, &samples, None).map_err(err)?).map_err(err)?;
        if acc == 1.0 {
            return Ok(format!("32 {source} samples at 100% training accuracy after {epoch} epochs"));
        }
    }
    let last = state.history.last().map_or(0.0, |r| r.val_acc);
    Err(format!("training accuracy {:.2}% after 200 epochs", 100.0 * last))
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let criteria: [Criterion; 10] = [
        (1, "gradient suite", criterion_1),
        (2, "metric oracle", criterion_2),
        (3, "schedule oracle", criterion_3),
        (4, "protocol laws", criterion_4),
        (5, "parameter economy", criterion_5),
        (6, "desk-scale MNIST", criterion_6),
        (7, "TL vs TI", criterion_7),
        (8, "determinism", criterion_8),
        (9, "format round-trips", criterion_9),
        (10, "memorization", criterion_10),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{secs:.1}s] {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
