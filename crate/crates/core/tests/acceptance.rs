//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Device, Kind, Tensor};

use common::{path_str, run_cli, stderr, synthetic_index};
use ladi_flood::catalog::Label;
use ladi_flood::dataset::synthetic::{synthetic_image, write_fixture};
use ladi_flood::dataset::{
    augment_resized, draw_balanced, eval_transform, resize, split, AugmentationPolicy, SampleDraw, SplitSpec,
};
use ladi_flood::evaluation::{confusion, metrics, FloodClassifier};
use ladi_flood::models::{
    build_model, serialized_size_mb, torch_rng_guard, BuildOptions, Cnn4Dims, ModelKind, ModelSpec,
};
use ladi_flood::training::{loss_fn, train, train_step, OptimizerKind, OptimizerState, TrainConfig, TrainLog, TrainSet};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    check(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64())
    })
}

/// Counts and rational metrics from plain integer loops over 0/1 values.
fn brute_force(p: &[u8], t: &[u8]) -> ([u64; 4], f64, Option<f64>, Option<f64>) {
    let mut c = [0u64; 4]; // tp fp tn fn
    for i in 0..p.len() {
        let slot = match (p[i], t[i]) {
            (1, 1) => 0,
            (1, 0) => 1,
            (0, 0) => 2,
            _ => 3,
        };
        c[slot] += 1;
    }
    let hits = p.iter().zip(t).filter(|(a, b)| a == b).count();
    let acc = hits as f64 / p.len() as f64;
    let pred_pos = p.iter().filter(|&&v| v == 1).count() as u64;
    let true_pos = t.iter().filter(|&&v| v == 1).count() as u64;
    let prec = (pred_pos > 0).then(|| c[0] as f64 / pred_pos as f64);
    let rec = (true_pos > 0).then(|| c[0] as f64 / true_pos as f64);
    (c, acc, prec, rec)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
        _ => false,
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let to_label = |v: u8| if v == 1 { Label::Flood } else { Label::NonFlood };
    for case in 0..1000 {
        let len = rng.gen_range(1..=500);
        // skewed positive rates so zero denominators occur
        let rate = [0.0, 0.02, 0.5, 0.98, 1.0][case % 5];
        let p: Vec<u8> = (0..len).map(|_| rng.gen_bool(rate) as u8).collect();
        let t: Vec<u8> = (0..len).map(|_| rng.gen_bool(0.5) as u8).collect();
        let pl: Vec<Label> = p.iter().map(|&v| to_label(v)).collect();
        let tl: Vec<Label> = t.iter().map(|&v| to_label(v)).collect();
        let cm = confusion(&pl, &tl).map_err(|e| e.to_string())?;
        let m = metrics(&cm).map_err(|e| e.to_string())?;
        let (c, acc, prec, rec) = brute_force(&p, &t);
        check([cm.tp, cm.fp, cm.tn, cm.fn_] == c, || format!("case {case}: counts {cm:?} vs {c:?}"))?;
        check((m.accuracy - acc).abs() <= 1e-12, || format!("case {case}: accuracy"))?;
        check(close(m.precision, prec), || format!("case {case}: precision {:?} vs {prec:?}", m.precision))?;
        check(close(m.recall, rec), || format!("case {case}: recall {:?} vs {rec:?}", m.recall))?;
    }
    within(start.elapsed(), 10.0)?;
    Ok("1000 vectors agree with brute force".into())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let index = synthetic_index(3000, 2500);
    for seed in 0..50u64 {
        let draw: SampleDraw = draw_balanced(&index, 2000, 0.5, seed).map_err(|e| e.to_string())?;
        let pos = draw.count(Label::Flood);
        check(pos == 1000 && draw.samples.len() == 2000, || format!("seed {seed}: draw {pos}/2000"))?;
        let spec = SplitSpec {
            train_fraction: 0.8,
            stratified: true,
            seed,
        };
        let (tr, te) = split(&draw, &spec).map_err(|e| e.to_string())?;
        let count = |s: &[ladi_flood::dataset::LabeledSample], l| s.iter().filter(|x| x.label == l).count();
        let got = (
            tr.len(),
            te.len(),
            count(&tr, Label::Flood),
            count(&tr, Label::NonFlood),
            count(&te, Label::Flood),
            count(&te, Label::NonFlood),
        );
        check(got == (1600, 400, 800, 800, 200, 200), || format!("seed {seed}: split {got:?}"))?;
        let mut ids: Vec<&str> = tr.iter().chain(&te).map(|s| s.image_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        check(ids.len() == 2000, || format!("seed {seed}: split not a partition"))?;
    }
    within(start.elapsed(), 30.0)?;
    Ok("1000/1000 draw and 1600/400 (800/800, 200/200) split for 50 seeds".into())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let policy = AugmentationPolicy::default();
    let sources: Vec<_> = [(300, 400), (256, 256), (480, 360), (260, 300)]
        .iter()
        .enumerate()
        .map(|(i, &(h, w))| {
            let label = if i % 2 == 0 { Label::Flood } else { Label::NonFlood };
            resize(&synthetic_image(label, i as u64, h, w), &policy).expect("resize")
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut flips = 0usize;
    let mut max_angle = 0f32;
    const N: usize = 10_000;
    for i in 0..N {
        let (arr, trace) = augment_resized(&sources[i % sources.len()], &policy, &mut rng).map_err(|e| e.to_string())?;
        check((arr.height, arr.width) == (250, 250), || format!("output {}x{}", arr.height, arr.width))?;
        check(arr.data.len() == 3 * 250 * 250, || "data length".into())?;
        check(trace.angle_deg.abs() <= 10.0, || format!("angle {}", trace.angle_deg))?;
        max_angle = max_angle.max(trace.angle_deg.abs());
        flips += trace.flipped as usize;
    }
    let rate = flips as f64 / N as f64;
    check((rate - 0.5).abs() <= 0.02, || format!("flip rate {rate}"))?;
    within(start.elapsed(), 120.0)?;
    Ok(format!("10000 outputs 250x250, max |angle| {max_angle:.2}, flip rate {rate:.4}"))
}

fn separable_set(n_per_class: usize, side: u32, seed: u64) -> Vec<(String, ladi_flood::dataset::RgbImage, Label)> {
    (0..2 * n_per_class)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Flood } else { Label::NonFlood };
            let img = synthetic_image(label, seed * 10_000 + i as u64, side, side);
            (format!("s{seed}_{i:04}"), img, label)
        })
        .collect()
}

fn criterion_4() -> Outcome {
    let mut notes = Vec::new();

    // held-out accuracy
    let start = Instant::now();
    let policy = AugmentationPolicy {
        resize_target: 72,
        crop_size: 64,
        ..Default::default()
    };
    let all = separable_set(100, 96, 4);
    let (train_imgs, test_imgs): (Vec<_>, Vec<_>) = all.into_iter().enumerate().partition(|(i, _)| i % 5 != 0);
    let train_imgs: Vec<_> = train_imgs.into_iter().map(|(_, x)| x).collect();
    let test_imgs: Vec<_> = test_imgs.into_iter().map(|(_, x)| x).collect();
    let set = TrainSet::new(train_imgs, policy.clone()).map_err(|e| e.to_string())?;
    let spec = ModelSpec::new(ModelKind::Cnn4).input_size(64);
    let handle = build_model(&spec, &BuildOptions { seed: 4, ..Default::default() }).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        epochs: 5,
        batch_size: 16,
        learning_rate: 1e-3,
        seed: 4,
        ..Default::default()
    };
    let (_, log) = train(&handle, &set, &config, None).map_err(|e| e.to_string())?;
    let arrays: Vec<_> = test_imgs
        .iter()
        .map(|(_, img, _)| eval_transform(img, &policy).expect("eval transform"))
        .collect();
    let preds = handle.classify(&arrays).map_err(|e| e.to_string())?;
    let correct = preds.iter().zip(&test_imgs).filter(|(p, (_, _, l))| p.label == *l).count();
    let acc = correct as f64 / test_imgs.len() as f64;
    let elapsed = start.elapsed();
    check(acc >= 0.95, || format!("held-out accuracy {acc:.3} after 5 epochs"))?;
    within(elapsed, 300.0)?;
    notes.push(format!(
        "held-out acc {:.1}% ({} imgs, final train loss {:.4}, {:.0}s)",
        acc * 100.0,
        test_imgs.len(),
        log.epochs.last().map_or(f64::NAN, |e| e.mean_loss),
        elapsed.as_secs_f64()
    ));

    // fixed-batch descent with a small learning rate
    let handle = build_model(&spec, &BuildOptions { seed: 5, ..Default::default() }).map_err(|e| e.to_string())?;
    let small = TrainConfig {
        learning_rate: 1e-4,
        optimizer: OptimizerKind::SgdMomentum,
        ..Default::default()
    };
    let mut state = OptimizerState::new(&handle, &small).map_err(|e| e.to_string())?;
    let (xs, ys) = set.batch(&(0..16).collect::<Vec<_>>(), 0, 0, Kind::Float).map_err(|e| e.to_string())?;
    let mut losses = Vec::new();
    {
        let _rng = torch_rng_guard();
        for _ in 0..10 {
            tch::manual_seed(11); // same dropout mask every step
            losses.push(train_step(&handle, &xs, &ys, &mut state).map_err(|e| e.to_string())?.0);
        }
    }
    check(losses.windows(2).all(|w| w[1] <= w[0]), || format!("losses rose: {losses:?}"))?;
    notes.push(format!("loss {:.5} -> {:.5} over 10 steps", losses[0], losses[9]));

    // head gradient against central differences, in f64
    let tiny = ModelSpec::new(ModelKind::Cnn4).input_size(8);
    let options = BuildOptions {
        seed: 6,
        kind: Kind::Double,
        cnn4_dims: Cnn4Dims {
            channels: [3, 4, 4, 5],
            hidden: 6,
        },
        ..Default::default()
    };
    let handle = build_model(&tiny, &options).map_err(|e| e.to_string())?;
    let xs = Tensor::randn([4, 3, 8, 8], (Kind::Double, Device::Cpu));
    let ys = Tensor::from_slice(&[0i64, 1, 1, 0]);
    let loss_at = || {
        tch::no_grad(|| loss_fn(&handle.forward_t(&xs, false), &ys).expect("loss").double_value(&[]))
    };
    let vars = handle.var_store().variables();
    loss_fn(&handle.forward_t(&xs, false), &ys).map_err(|e| e.to_string())?.backward();
    let eps = 1e-6;
    let mut worst = 0f64;
    for name in ["fc2.weight", "fc2.bias"] {
        let var = &vars[name];
        let grad = Vec::<f64>::try_from(var.grad().flatten(0, -1)).map_err(|e| e.to_string())?;
        let flat = var.flatten(0, -1);
        for (k, &g) in grad.iter().enumerate() {
            let mut cell = flat.get(k as i64);
            let mut nudge = |d: f64| {
                let _ = tch::no_grad(|| cell.g_add_scalar_(d));
            };
            nudge(eps);
            let up = loss_at();
            nudge(-2.0 * eps);
            let down = loss_at();
            nudge(eps);
            let fd = (up - down) / (2.0 * eps);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    check(worst <= 1e-4, || format!("finite-difference relative error {worst:e}"))?;
    notes.push(format!("max head-gradient rel. error {worst:.1e}"));
    Ok(notes.join("; "))
}

fn criterion_5() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut sizes = HashMap::new();
    for kind in ModelKind::ALL {
        let spec = ModelSpec::new(kind).pretrained(false);
        let handle = build_model(&spec, &BuildOptions { seed: 5, ..Default::default() }).map_err(|e| e.to_string())?;
        for b in [1i64, 4, 17] {
            let xs = Tensor::randn([b, 3, 250, 250], (Kind::Float, Device::Cpu));
            let out = tch::no_grad(|| handle.forward_t(&xs, false));
            check(out.size() == [b, 2], || format!("{kind}: B={b} gave {:?}", out.size()))?;
            let finite = out.isfinite().all().int64_value(&[]) == 1;
            check(finite, || format!("{kind}: non-finite logits"))?;
        }
        let path = dir.path().join(format!("{}.safetensors", kind.id()));
        let size = serialized_size_mb(&handle, &path).map_err(|e| e.to_string())?;
        sizes.insert(kind, size);
        let xs = Tensor::randn([2, 3, 250, 250], (Kind::Float, Device::Cpu));
        let before = tch::no_grad(|| handle.forward_t(&xs, false));
        drop(handle);
        let mut other =
            build_model(&spec, &BuildOptions { seed: 99, ..Default::default() }).map_err(|e| e.to_string())?;
        other.load_weights(&path).map_err(|e| e.to_string())?;
        let after = tch::no_grad(|| other.forward_t(&xs, false));
        check(before.equal(&after), || format!("{kind}: reloaded predictions differ"))?;
        fs::remove_file(&path).ok();
    }
    let mobile = sizes[&ModelKind::MobileNetV2];
    check(sizes.values().all(|&s| s >= mobile), || format!("MobileNetV2 not smallest: {sizes:?}"))?;
    let (r34, r50, r101) = (
        sizes[&ModelKind::ResNet34],
        sizes[&ModelKind::ResNet50],
        sizes[&ModelKind::ResNet101],
    );
    check(r34 < r50 && r50 < r101, || format!("resnet sizes {r34} {r50} {r101}"))?;
    let mut listed: Vec<_> = ModelKind::ALL.iter().map(|k| format!("{}={:.1}MB", k.id(), sizes[k])).collect();
    listed.sort();
    Ok(format!("all seven B in {{1,4,17}} ok, bitwise round trip; {}", listed.join(" ")))
}

struct RunArtifacts {
    index: Vec<u8>,
    log: TrainLog,
    report: serde_json::Value,
}

fn pipeline(fixture_csv: &Path, out: &Path) -> Result<RunArtifacts, String> {
    let out_s = path_str(out);
    let steps: [Vec<&str>; 3] = [
        vec!["prepare", "--labels", path_str(fixture_csv), "--out-dir", out_s],
        vec![
            "train", "--model", "cnn4", "--epochs", "2", "--n", "24", "--batch-size", "8", "--resize", "40",
            "--crop", "32", "--data-seed", "3", "--model-seed", "4", "--augment-seed", "5", "--out-dir", out_s,
        ],
        vec!["eval", "--out-dir", out_s, "--grid-k", "4"],
    ];
    for args in &steps {
        let o = run_cli(args);
        check(o.status.success(), || format!("{} failed: {}", args[0], stderr(&o)))?;
    }
    let read = |name: &str| fs::read(out.join(name)).map_err(|e| format!("{name}: {e}"));
    Ok(RunArtifacts {
        index: read("index.csv")?,
        log: TrainLog::read_jsonl(&out.join("train_log.jsonl")).map_err(|e| e.to_string())?,
        report: serde_json::from_slice(&read("eval_report.json")?).map_err(|e| e.to_string())?,
    })
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fixture = write_fixture(&dir.path().join("fixture"), 14, 14, (48, 48), 6).map_err(|e| e.to_string())?;
    let a = pipeline(&fixture.labels_csv, &dir.path().join("a"))?;
    let b = pipeline(&fixture.labels_csv, &dir.path().join("b"))?;
    check(a.index == b.index, || "index files differ".into())?;
    check(a.log.epochs.len() == 2, || format!("{} log lines", a.log.epochs.len()))?;
    check(a.log.deterministic_part() == b.log.deterministic_part(), || {
        format!("train logs differ: {:?} vs {:?}", a.log.deterministic_part(), b.log.deterministic_part())
    })?;
    let metric = |r: &serde_json::Value| {
        ["accuracy", "precision", "recall", "confusion", "n_test", "size_mb"].map(|k| r[k].clone())
    };
    check(metric(&a.report) == metric(&b.report), || format!("reports differ: {} vs {}", a.report, b.report))?;
    Ok(format!(
        "index {} bytes identical, logs identical, accuracy {}",
        a.index.len(),
        a.report["accuracy"]
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("metric oracle equivalence", criterion_1),
        ("sampling/split exactness", criterion_2),
        ("augmentation geometry", criterion_3),
        ("training sanity at desk scale", criterion_4),
        ("model-zoo contracts", criterion_5),
        ("determinism", criterion_6),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|p| *p == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match outcome {
            Ok(detail) => format!("criterion {id} ({name}): PASS [{secs:.1}s] {detail}"),
            Err(why) => {
                failed += 1;
                format!("criterion {id} ({name}): FAIL [{secs:.1}s] {why}")
            }
        };
        println!("{line}");
    }
    if filter.is_empty() || filter.iter().any(|p| p == "7") {
        println!("criterion 7 (full-corpus reproduction): NOT RUN (documented long-running experiment, not a CI gate)");
    }
    if failed > 0 {
        println!("acceptance: {failed} criterion/criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all run criteria passed");
}
