//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `MIDCCNN_SKIP_ORDERING=1` skips the long pooling-order experiment
//! (criterion 6), which then reports SKIP.

use std::fs;
use std::ops::ControlFlow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use midccnn::checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint};
use midccnn::data::{save_ppm, synth_generate, synth_generate_with, SynthParams};
use midccnn::eval::{evaluate_oa, protocol, EvalReport, ProtocolSeeds, ProtocolSpec};
use midccnn::mil::{MilConfig, MilHead, PoolingMethod};
use midccnn::nn::{Forward, Mode, ParamStore};
use midccnn::train::{train, train_with, TrainConfig};
use midccnn::{shape_plan, DccnnConfig, Dccnn, HeadKind, Network, PoolKind, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(300);
const ORACLE_TOLERANCE: f64 = 1e-12;
const ORACLE_CASES: usize = 100;
const ORACLE_BUDGET: Duration = Duration::from_secs(60);
const MIL_CASES: usize = 1000;
const MIL_TOLERANCE: f64 = 1e-9;
const OVERFIT_MAX_EPOCHS: usize = 200;
const OVERFIT_BUDGET: Duration = Duration::from_secs(600);
const ORDERING_MARGIN: f64 = 2.0;
const ORDERING_BUDGET: Duration = Duration::from_secs(2 * 3600);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_midccnn"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn midccnn");
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_1() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("gradcheck.json");
    let start = Instant::now();
    let out = run(bin().args(["gradcheck", "--profile", "desk", "--tolerance"]).arg(GRADCHECK_TOLERANCE.to_string()).arg("--out").arg(&report));
    let elapsed = start.elapsed();
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap_or_default()).unwrap_or_default();
    let max = json["max_rel_err"].as_f64().unwrap_or(f64::NAN);
    let checked = json["checked"].as_u64().unwrap_or(0);
    let tensors = json["tensors"].as_u64().unwrap_or(0);
    let (dccnn, mil) = midccnn::train::gradcheck_profile();
    let net = Network::new(&dccnn, &mil).unwrap();
    let trainable = net.store.iter().filter(|(_, p)| p.kind.trainable()).count() as u64;
    check(
        out.status.code() == Some(0) && max < GRADCHECK_TOLERANCE && checked >= 200 && tensors == trainable && elapsed < GRADCHECK_BUDGET,
        format!(
            "max rel err {max:.2e} < {GRADCHECK_TOLERANCE:.0e} over {checked} coordinates in {tensors}/{trainable} tensors, exit {:?}, {:.1}s",
            out.status.code(),
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = DccnnConfig {
        head: HeadKind::GapFc,
        ..DccnnConfig::default()
    };
    let plan = shape_plan(&cfg).unwrap();
    let expected = [
        ("conv", 112),
        ("pool", 56),
        ("dense_block_1", 56),
        ("transition_1", 28),
        ("dense_block_2", 28),
        ("transition_2", 14),
        ("dense_block_3", 14),
        ("transition_3", 7),
        ("refine", 7),
        ("global_avg_pool", 1),
        ("fc", 1),
    ];
    let mut problems = Vec::new();
    for (name, size) in expected {
        match plan.stage(name) {
            Some(s) if s.height == size && s.width == size => {}
            other => problems.push(format!("{name}: {:?}", other.map(|s| (s.height, s.width)))),
        }
    }
    let k = cfg.growth_rate;
    let ch = |n: &str| plan.stage(n).map_or(0, |s| s.channels);
    for i in 1..=3 {
        let before = if i == 1 { ch("pool") } else { ch(&format!("transition_{}", i - 1)) };
        if ch(&format!("dense_block_{i}")) != before + 3 * k {
            problems.push(format!("dense_block_{i} adds {} channels", ch(&format!("dense_block_{i}")) - before));
        }
        if ch(&format!("transition_{i}")) != ch(&format!("dense_block_{i}")) {
            problems.push(format!("transition_{i} changes the channel count"));
        }
    }
    if ch("fc") != cfg.num_classes {
        problems.push(format!("fc has {} outputs", ch("fc")));
    }
    let mut store = ParamStore::new();
    let convs = Dccnn::new(&mut store, &cfg).unwrap().conv_layer_count();
    if convs != 23 {
        problems.push(format!("{convs} conv layers"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("224 px plan 112/56/56/28/28/14/14/7/7 → GAP 1×1, +3k per block, transitions keep channels, {convs} conv layers")
        } else {
            problems.join("; ")
        },
    )
}

fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::with_capacity(n * co * oh * ow);
    for b0 in 0..n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b[o];
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    s += x.at(&[b0, c, y as usize, xx as usize]) * w.at(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn naive_pool(x: &Tensor, kind: PoolKind, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut vals = Vec::new();
                    for u in 0..k {
                        for v in 0..k {
                            let (y, xx) = ((i * stride + u) as isize - pad as isize, (j * stride + v) as isize - pad as isize);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                vals.push(x.at(&[b, ch, y as usize, xx as usize]));
                            }
                        }
                    }
                    out.push(match kind {
                        PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => vals.iter().sum::<f64>() / vals.len() as f64,
                    });
                }
            }
        }
    }
    out
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..ORACLE_CASES {
        let (n, ci, co) = (rng.gen_range(1..3), rng.gen_range(1..5), rng.gen_range(1..5));
        let k = rng.gen_range(1..4);
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..k));
        let h = rng.gen_range(k..9);
        let w = rng.gen_range(k..9);
        let x = random_tensor(&mut rng, &[n, ci, h, w]);
        let wt = random_tensor(&mut rng, &[co, ci, k, k]);
        let b = random_tensor(&mut rng, &[co]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(wt.clone()), tape.leaf(b.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        worst[0] = worst[0].max(max_abs_diff(tape.value(y).data(), &naive_conv(&x, &wt, b.data(), stride, pad)));

        let kind = if rng.gen_bool(0.5) { PoolKind::Max } else { PoolKind::Avg };
        let pk = rng.gen_range(1..4usize).min(h).min(w);
        let (ps, pp) = (rng.gen_range(1..3), rng.gen_range(0..=pk / 2));
        let y = tape.pool2d(kind, xv, pk, ps, pp).unwrap();
        worst[1] = worst[1].max(max_abs_diff(tape.value(y).data(), &naive_pool(&x, kind, pk, ps, pp)));

        let (m, kk, nn) = (rng.gen_range(1..7), rng.gen_range(1..7), rng.gen_range(1..7));
        let a = random_tensor(&mut rng, &[m, kk]);
        let bm = random_tensor(&mut rng, &[kk, nn]);
        let (av, bmv) = (tape.leaf(a.clone()), tape.leaf(bm.clone()));
        let y = tape.matmul(av, bmv).unwrap();
        let naive: Vec<f64> = (0..m * nn)
            .map(|idx| (0..kk).map(|t| a.at(&[idx / nn, t]) * bm.at(&[t, idx % nn])).sum())
            .collect();
        worst[2] = worst[2].max(max_abs_diff(tape.value(y).data(), &naive));

        let (c, nc) = (rng.gen_range(1..9), rng.gen_range(2..6));
        let (fh, fw) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut store = ParamStore::new();
        let head = MilHead::new(&mut store, c, nc, &MilConfig::default());
        store.initialize(rng.gen());
        let f = random_tensor(&mut rng, &[n, c, fh, fw]);
        let mut fwd = Forward::new(&store, Mode::Eval);
        let fv = fwd.input(f.clone());
        let logits = head.instance_logits(&mut fwd, fv).unwrap();
        let (wt, bias) = (store.tensor(head.instance_conv.weight), store.tensor(head.instance_conv.bias));
        let mut naive = Vec::new();
        for b0 in 0..n {
            for cls in 0..nc {
                for i in 0..fh {
                    for j in 0..fw {
                        let dot: f64 = (0..c).map(|ch| wt.data()[cls * c + ch] * f.at(&[b0, ch, i, j])).sum();
                        naive.push(dot + bias.data()[cls]);
                    }
                }
            }
        }
        worst[3] = worst[3].max(max_abs_diff(fwd.tape.value(logits).data(), &naive));
    }
    let elapsed = start.elapsed();
    check(
        worst.iter().all(|&e| e <= ORACLE_TOLERANCE) && elapsed < ORACLE_BUDGET,
        format!(
            "{ORACLE_CASES} cases each, max abs err conv {:.1e} pool {:.1e} matmul {:.1e} instance logits {:.1e} (≤ {ORACLE_TOLERANCE:.0e}), {:.2}s",
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut sum_err, mut mean_err, mut single_exact) = (0.0f64, 0.0f64, true);
    for case in 0..MIL_CASES {
        let (c, nc, l) = (rng.gen_range(1..8), rng.gen_range(2..7), rng.gen_range(1..9));
        let (h, w) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let mut store = ParamStore::new();
        let mil = MilConfig {
            hidden_dim: l,
            ..MilConfig::default()
        };
        let head = MilHead::new(&mut store, c, nc, &mil);
        store.initialize(case as u64);
        let scale = rng.gen_range(0.1..5.0);
        let f = Tensor::from_fn(&[2, c, h, w], |_| scale * rng.gen_range(-1.0..1.0));

        let mut fwd = Forward::new(&store, Mode::Eval);
        let fv = fwd.input(f.clone());
        let out = head.forward(&mut fwd, fv).unwrap();
        let a = fwd.tape.value(out.attention.unwrap());
        for bag in 0..2 {
            let s: f64 = a.data()[bag * h * w..(bag + 1) * h * w].iter().sum();
            sum_err = sum_err.max((s - 1.0).abs());
        }

        let mut zeroed = store.clone();
        zeroed.tensor_mut(head.w2).data_mut().fill(0.0);
        let mut fwd = Forward::new(&zeroed, Mode::Eval);
        let fv = fwd.input(f.clone());
        let out = head.forward(&mut fwd, fv).unwrap();
        let p = fwd.tape.value(out.p_bag).data().to_vec();
        let probs = fwd.tape.value(out.instance_probs);
        for bag in 0..2 {
            for cls in 0..nc {
                let m: f64 = (0..h * w).map(|q| probs.data()[(bag * nc + cls) * h * w + q]).sum::<f64>() / (h * w) as f64;
                mean_err = mean_err.max((p[bag * nc + cls] - m).abs());
            }
        }

        let single = Tensor::from_fn(&[1, c, 1, 1], |_| scale * rng.gen_range(-1.0..1.0));
        let mut fwd = Forward::new(&store, Mode::Eval);
        let sv = fwd.input(single);
        let out = head.forward(&mut fwd, sv).unwrap();
        single_exact &= fwd.tape.value(out.p_bag).data() == fwd.tape.value(out.instance_probs).data();
    }
    check(
        sum_err <= MIL_TOLERANCE && mean_err <= MIL_TOLERANCE && single_exact,
        format!(
            "{MIL_CASES} cases: |Σa − 1| ≤ {sum_err:.1e}, w2 = 0 vs mean pooling ≤ {mean_err:.1e} (tol {MIL_TOLERANCE:.0e}), single instance exact: {single_exact}"
        ),
    )
}

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let data = synth_generate(3, 8, 96, 0).unwrap();
    let mut net = Network::new(&DccnnConfig::desk(3), &MilConfig::default()).unwrap();
    let config = TrainConfig {
        seed: 0,
        max_epochs: Some(OVERFIT_MAX_EPOCHS),
        ..TrainConfig::desk()
    };
    let mut reached = None;
    let outcome = train_with(&mut net, &data, &config, |record, net| {
        let (oa, _) = evaluate_oa(net, &data)?;
        if oa == 100.0 {
            reached = Some(record.epoch);
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    })
    .unwrap();
    let elapsed = start.elapsed();
    let detail = match reached {
        Some(e) => format!("24 images classified 100% correctly (eval mode) after epoch {e}"),
        None => format!("not fitted after {} epochs", outcome.history.len()),
    };
    check(
        reached.is_some_and(|e| e < OVERFIT_MAX_EPOCHS) && elapsed < OVERFIT_BUDGET,
        format!("{detail}, {:.0}s", elapsed.as_secs_f64()),
    )
}

/// Pinned setup of the pooling-order experiment.
fn ordering_spec(method: PoolingMethod) -> ProtocolSpec {
    ProtocolSpec {
        dccnn: DccnnConfig::desk(3),
        mil: MilConfig {
            method,
            ..MilConfig::default()
        },
        train: TrainConfig {
            stage_epochs: ORDERING_STAGE_EPOCHS,
            ..TrainConfig::desk()
        },
        train_ratio: 0.8,
        repetitions: 5,
        seeds: ProtocolSeeds {
            split_base: ORDERING_SPLIT_SEED,
            model_base: ORDERING_MODEL_SEED,
        },
    }
}

const ORDERING_DATA_SEED: u64 = 0;
const ORDERING_SPLIT_SEED: u64 = 0;
const ORDERING_MODEL_SEED: u64 = 0;
const ORDERING_STAGE_EPOCHS: usize = 20;

fn ordering_params() -> SynthParams {
    SynthParams::default()
}

fn criterion_6() -> Verdict {
    if std::env::var_os("MIDCCNN_SKIP_ORDERING").is_some() {
        return Verdict::Skip("MIDCCNN_SKIP_ORDERING is set".into());
    }
    let start = Instant::now();
    let data = synth_generate_with(3, 100, 96, ORDERING_DATA_SEED, &ordering_params()).unwrap().dataset;
    let mut means = Vec::new();
    for method in [PoolingMethod::Attention, PoolingMethod::Mean, PoolingMethod::Max] {
        let report: EvalReport = protocol(&data, &ordering_spec(method), |_| Ok(())).unwrap();
        eprintln!("  {:<9} per-rep OA {:?}", method.as_str(), report.per_rep_oa);
        means.push((method, report.mean_oa, report.std_oa));
    }
    let elapsed = start.elapsed();
    let (att, mean, max) = (means[0].1, means[1].1, means[2].1);
    let summary: Vec<String> = means.iter().map(|(m, oa, sd)| format!("{} {oa:.2}±{sd:.2}", m.as_str())).collect();
    check(
        att >= mean && mean >= max && att - max >= ORDERING_MARGIN && elapsed < ORDERING_BUDGET,
        format!(
            "mean OA {}; need attention ≥ mean ≥ max and attention − max ≥ {ORDERING_MARGIN}; {:.0} min",
            summary.join(", "),
            elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn tiny_config() -> serde_json::Value {
    serde_json::json!({
        "dccnn": {"input_size": 64, "init_channels": 8, "growth_rate": 4, "num_classes": 3},
        "mil": {"hidden_dim": 8},
        "train": {"batch_size": 4, "stage_epochs": 1},
        "data": {"train_ratio": 0.5},
        "protocol": {"repetitions": 2, "split_seed": 11, "model_seed": 5}
    })
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_7() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = run(bin().args(["synth", "--classes", "3", "--per-class", "4", "--size", "64", "--seed", "2", "--out"]).arg(&data));
    let config = dir.path().join("config.json");
    fs::write(&config, tiny_config().to_string()).unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let status = run(bin().arg("protocol").arg("--config").arg(&config).arg("--data").arg(&data).arg("--out").arg(&out).arg("--save-models"));
        runs.push((status.status.success(), files_under(&out)));
    }
    let same = runs[0].1 == runs[1].1;
    let models = runs[0].1.iter().filter(|(n, _)| n.ends_with(".midc")).count();
    let report = runs[0].1.iter().any(|(n, _)| n == "report.json");
    check(
        synth.status.success() && runs.iter().all(|r| r.0) && same && models == 2 && report,
        format!(
            "two protocol runs: {} files ({} checkpoints, report.json, resolved_config.json) byte-identical: {same}",
            runs[0].1.len(),
            models
        ),
    )
}

fn criterion_8() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let data = synth_generate(3, 4, 96, 8).unwrap();
    let mut net = Network::new(&DccnnConfig::desk(3), &MilConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_epochs: Some(2),
        ..TrainConfig::desk()
    };
    let outcome = train(&mut net, &data, &cfg).unwrap();
    let path = dir.path().join("model.midc");
    save_checkpoint(&path, &net, &data.class_names, Some(&cfg), Some(&outcome.adam)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = Tensor::from_fn(&[10, 3, 96, 96], |_| rng.gen_range(0.0..1.0));
    let before = net.predict(&inputs).unwrap();
    let after = loaded.network.predict(&inputs).unwrap();
    let identical = before == after;
    let rebytes = checkpoint_bytes(&loaded.network, &loaded.meta.class_names, loaded.meta.train.as_ref(), loaded.adam.as_ref()).unwrap();
    let same_file = rebytes == fs::read(&path).unwrap();
    check(
        identical && same_file && loaded.adam.as_ref() == Some(&outcome.adam),
        format!("10 random inputs: predictions bit-identical after reload: {identical}; re-encoded file identical: {same_file}"),
    )
}

const UCM_CLASSES: [&str; 21] = [
    "agricultural",
    "airplane",
    "baseballdiamond",
    "beach",
    "buildings",
    "chaparral",
    "denseresidential",
    "forest",
    "freeway",
    "golfcourse",
    "harbor",
    "intersection",
    "mediumresidential",
    "mobilehomepark",
    "overpass",
    "parkinglot",
    "river",
    "runway",
    "sparseresidential",
    "storagetanks",
    "tenniscourts",
];

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("UCMerced_LandUse");
    let per_class = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (c, name) in UCM_CLASSES.iter().enumerate() {
        let class_dir = root.join(name);
        fs::create_dir_all(&class_dir).unwrap();
        for i in 0..per_class {
            let tint = c as f64 / 21.0;
            if i % 2 == 0 {
                let img = Tensor::from_fn(&[3, 40, 40], |_| (tint + rng.gen_range(0.0..0.3)).min(1.0));
                save_ppm(&img, &class_dir.join(format!("{name}{i:02}.ppm"))).unwrap();
            } else {
                let mut pgm = b"P5\n36 36\n255\n".to_vec();
                pgm.extend((0..36 * 36).map(|_| (255.0 * tint) as u8 ^ rng.gen_range(0..32u8)));
                fs::write(class_dir.join(format!("{name}{i:02}.pgm")), pgm).unwrap();
            }
        }
    }
    // Desk-sized backbone and one epoch per repetition; everything else is
    // the stock configuration (21 classes, ratio 0.8, 40-epoch stages, 10
    // repetitions).
    let config = dir.path().join("ucm.json");
    let doc = serde_json::json!({
        "dccnn": {"input_size": 64, "init_channels": 8, "growth_rate": 4},
        "train": {"batch_size": 16, "max_epochs": 1}
    });
    fs::write(&config, doc.to_string()).unwrap();
    let out = dir.path().join("run");
    let status = run(bin().arg("protocol").arg("--config").arg(&config).arg("--data").arg(&root).arg("--out").arg(&out));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap_or_default()).unwrap_or_default();
    let resolved: serde_json::Value =
        serde_json::from_slice(&fs::read(out.join("resolved_config.json")).unwrap_or_default()).unwrap_or_default();
    let reps = report["per_rep_oa"].as_array().map_or(0, Vec::len);
    let confusion = report["confusion"].as_array().cloned().unwrap_or_default();
    let rows_ok = confusion.len() == 21
        && confusion.iter().all(|r| {
            r.as_array()
                .is_some_and(|r| r.len() == 21 && r.iter().filter_map(|v| v.as_u64()).sum::<u64>() == 1)
        });
    let stock = resolved["dccnn"]["num_classes"] == 21
        && resolved["data"]["train_ratio"] == 0.8
        && resolved["train"]["stage_epochs"] == 40
        && resolved["protocol"]["repetitions"] == 10;
    check(
        status.status.success() && reps == 10 && rows_ok && stock,
        format!(
            "21-class directory (PPM + PGM, resized to 64 px) ran the 10-repetition protocol at ratio 0.8 with 40-epoch stages: {reps} OA entries, 21×21 confusion; reported OA values are not comparable to full-scale results"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient correctness", criterion_1),
        ("architecture conformance", criterion_2),
        ("oracle equivalence", criterion_3),
        ("MIL pooling identities", criterion_4),
        ("overfit sanity", criterion_5),
        ("pooling order on synthetic data", criterion_6),
        ("determinism", criterion_7),
        ("persistence", criterion_8),
        ("UCM-layout protocol run", criterion_9),
    ];
    let only: Option<Vec<usize>> = std::env::var("MIDCCNN_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let line = match verdict {
            Verdict::Pass(d) => format!("criterion {n} ({name}): PASS: {d}"),
            Verdict::Fail(d) => {
                failed += 1;
                format!("criterion {n} ({name}): FAIL: {d}")
            }
            Verdict::Skip(d) => format!("criterion {n} ({name}): SKIP: {d}"),
        };
        println!("{line}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
