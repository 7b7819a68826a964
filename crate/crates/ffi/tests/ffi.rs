use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use ladi_flood::catalog::Label;
use ladi_flood::dataset::synthetic::{synthetic_image, write_fixture};
use ladi_flood::dataset::{eval_transform, AugmentationPolicy};
use ladi_flood::evaluation::FloodClassifier;
use ladi_flood::models::{build_model, parameter_count, BuildOptions, ModelKind, ModelSpec};
use ladi_flood::training::{train, CheckpointMeta, CheckpointSink, TrainConfig, TrainSet};
use ladi_flood_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = ladi_last_error_message();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn policy() -> AugmentationPolicy {
    AugmentationPolicy {
        resize_target: 36,
        crop_size: 32,
        ..Default::default()
    }
}

fn toy_checkpoint(dir: &Path) -> PathBuf {
    let items: Vec<_> = (0..8)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Flood } else { Label::NonFlood };
            (format!("t{i}"), synthetic_image(label, i, 40, 40), label)
        })
        .collect();
    let set = TrainSet::new(items, policy()).unwrap();
    let handle =
        build_model(&ModelSpec::new(ModelKind::Cnn4).input_size(32), &BuildOptions { seed: 1, ..Default::default() }).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        ..Default::default()
    };
    let sink = CheckpointSink {
        weights: dir.join("model.safetensors"),
        meta: CheckpointMeta::new(*handle.spec(), 1, &config, policy()),
    };
    train(&handle, &set, &config, Some(&sink)).unwrap();
    sink.weights
}

#[test]
fn confusion_and_metrics_through_the_abi() {
    let preds = [1u8, 1, 0, 0];
    let truths = [1u8, 0, 1, 0];
    let mut cm = LadiConfusion::default();
    let status = unsafe { ladi_confusion(preds.as_ptr(), truths.as_ptr(), 4, &mut cm) };
    assert_eq!(status, LadiStatus::Ok);
    assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (1, 1, 1, 1));

    let mut m = LadiMetrics::default();
    assert_eq!(unsafe { ladi_metrics(&cm, &mut m) }, LadiStatus::Ok);
    assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 0.5));
    assert!(m.has_precision && m.has_recall);

    let none_predicted = LadiConfusion { tp: 0, fp: 0, tn: 5, fn_: 5 };
    assert_eq!(unsafe { ladi_metrics(&none_predicted, &mut m) }, LadiStatus::Ok);
    assert!(!m.has_precision && m.has_recall);
    assert_eq!((m.accuracy, m.recall), (0.5, 0.0));
}

#[test]
fn bad_arguments_set_status_and_message() {
    let mut cm = LadiConfusion::default();
    let preds = [1u8, 2];
    let status = unsafe { ladi_confusion(preds.as_ptr(), ptr::null(), 2, &mut cm) };
    assert_eq!(status, LadiStatus::NullArgument);
    assert!(last_error().contains("truths"), "{}", last_error());

    let status = unsafe { ladi_confusion(preds.as_ptr(), preds.as_ptr(), 2, &mut cm) };
    assert_eq!(status, LadiStatus::InvalidArgument);
    assert_eq!(unsafe { ladi_confusion(preds.as_ptr(), preds.as_ptr(), 0, &mut cm) }, LadiStatus::InvalidArgument);

    let empty = LadiConfusion::default();
    let mut m = LadiMetrics::default();
    assert_eq!(unsafe { ladi_metrics(&empty, &mut m) }, LadiStatus::InvalidArgument);

    // success clears the message
    let ones = [1u8];
    assert_eq!(unsafe { ladi_confusion(ones.as_ptr(), ones.as_ptr(), 1, &mut cm) }, LadiStatus::Ok);
    assert!(ladi_last_error_message().is_null());
}

#[test]
fn prepare_and_read_index() {
    let dir = tempfile::tempdir().unwrap();
    let fx = write_fixture(&dir.path().join("fx"), 3, 4, (16, 16), 1).unwrap();
    let out = dir.path().join("index.csv");
    let mut index: *mut LadiIndex = ptr::null_mut();
    let status = unsafe { ladi_prepare(cstr(&fx.labels_csv).as_ptr(), cstr(&out).as_ptr(), false, &mut index) };
    assert_eq!(status, LadiStatus::Ok, "{}", last_error());
    unsafe {
        assert_eq!(ladi_index_len(index), 7);
        assert_eq!(ladi_index_count(index, 1), 3);
        assert_eq!(ladi_index_count(index, 0), 4);
        assert_eq!(ladi_index_count(index, 9), 0);
        ladi_index_free(index);
    }

    let mut again: *mut LadiIndex = ptr::null_mut();
    assert_eq!(unsafe { ladi_index_read(cstr(&out).as_ptr(), &mut again) }, LadiStatus::Ok);
    assert_eq!(unsafe { ladi_index_len(again) }, 7);
    unsafe { ladi_index_free(again) };
    assert_eq!(unsafe { ladi_index_len(ptr::null()) }, 0);

    let missing = dir.path().join("missing.csv");
    let status = unsafe { ladi_index_read(cstr(&missing).as_ptr(), &mut again) };
    assert_eq!(status, LadiStatus::Io);
    assert!(last_error().contains("missing.csv"));

    std::fs::write(&missing, "not an index\n").unwrap();
    assert_eq!(unsafe { ladi_index_read(cstr(&missing).as_ptr(), &mut again) }, LadiStatus::Schema);
}

#[test]
fn model_predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    let mut model: *mut LadiModel = ptr::null_mut();
    assert_eq!(unsafe { ladi_model_load(cstr(&ckpt).as_ptr(), &mut model) }, LadiStatus::Ok, "{}", last_error());

    let (lib, _) = ladi_flood::training::load_checkpoint(&ckpt).unwrap();
    unsafe {
        assert_eq!(ladi_model_parameter_count(model), parameter_count(&lib));
        assert_eq!(ladi_model_input_size(model), 32);
    }
    for (i, label) in [Label::Flood, Label::NonFlood].into_iter().enumerate() {
        let img = synthetic_image(label, 100 + i as u64, 48, 40);
        let want = lib.classify(&[eval_transform(&img, &policy()).unwrap()]).unwrap()[0];

        let mut got = LadiPrediction::default();
        let status = unsafe { ladi_model_predict_rgb(model, img.as_raw().as_ptr(), 40, 48, &mut got) };
        assert_eq!(status, LadiStatus::Ok, "{}", last_error());
        assert_eq!((got.label, got.confidence), (want.label.as_u8(), want.confidence));

        let png = dir.path().join(format!("probe{i}.png"));
        img.save(&png).unwrap();
        let mut from_file = LadiPrediction::default();
        assert_eq!(unsafe { ladi_model_predict_file(model, cstr(&png).as_ptr(), &mut from_file) }, LadiStatus::Ok);
        assert_eq!(from_file, got);
    }

    // small images are upscaled, empty ones rejected
    let tiny = [0u8; 3];
    let mut p = LadiPrediction::default();
    assert_eq!(unsafe { ladi_model_predict_rgb(model, tiny.as_ptr(), 1, 1, &mut p) }, LadiStatus::Ok);
    assert_eq!(unsafe { ladi_model_predict_rgb(model, tiny.as_ptr(), 0, 4, &mut p) }, LadiStatus::InvalidArgument);
    let missing = dir.path().join("nope.png");
    assert_eq!(unsafe { ladi_model_predict_file(model, cstr(&missing).as_ptr(), &mut p) }, LadiStatus::Io);
    unsafe { ladi_model_free(model) };
    assert_eq!(unsafe { ladi_model_parameter_count(ptr::null()) }, -1);
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = toy_checkpoint(dir.path());
    std::fs::write(&ckpt, b"garbage").unwrap();
    let mut model: *mut LadiModel = ptr::null_mut();
    assert_eq!(unsafe { ladi_model_load(cstr(&ckpt).as_ptr(), &mut model) }, LadiStatus::Checkpoint);
    assert!(model.is_null());
    assert!(last_error().contains("checkpoint"), "{}", last_error());
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ladi_flood.h")
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let h = header();
    assert!(h.exists());
    for (compiler, lang) in [("cc", "c"), ("c++", "c++")] {
        let Ok(out) = Command::new(compiler)
            .args(["-fsyntax-only", "-Wall", "-Werror", "-x", lang])
            .arg(&h)
            .output()
        else {
            eprintln!("{compiler} not available; skipping");
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

const C_SMOKE: &str = r#"
#include <stdio.h>
#include "ladi_flood.h"

int main(void) {
    uint8_t preds[] = {1, 1, 0, 0, 1};
    uint8_t truths[] = {1, 0, 1, 0, 1};
    LadiConfusion cm;
    LadiMetrics m;
    if (ladi_confusion(preds, truths, 5, &cm) != LADI_STATUS_OK) return 1;
    if (ladi_metrics(&cm, &m) != LADI_STATUS_OK) return 2;
    if (ladi_index_read(NULL, NULL) != LADI_STATUS_NULL_ARGUMENT) return 3;
    printf("%llu %llu %llu %llu %.4f %d\n", (unsigned long long)cm.tp, (unsigned long long)cm.fp,
           (unsigned long long)cm.tn, (unsigned long long)cm.fn_, m.accuracy, (int)m.has_precision);
    return 0;
}
"#;

/// Links a C program against the cdylib built alongside this test.
#[test]
fn c_program_links_and_runs() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = [deps.clone(), deps.parent().unwrap().to_path_buf()]
        .into_iter()
        .find(|d| d.join("libladi_flood_ffi.so").exists());
    let Some(lib_dir) = lib_dir else {
        eprintln!("cdylib not found next to {}; skipping", deps.display());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let exe = dir.path().join("smoke");
    let Ok(out) = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(header().parent().unwrap())
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .args(["-lladi_flood_ffi", "-o"])
        .arg(&exe)
        .output()
    else {
        eprintln!("cc not available; skipping");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "exit {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "2 1 1 1 0.6000 1");
}
