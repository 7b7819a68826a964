#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use ladi_flood::catalog::{CatalogRecord, CuratedIndex, IndexEntry, Label, Provenance};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ladi-flood"));
    cmd.env_remove("LADI_CACHE_DIR").env("RUST_LOG", "warn");
    cmd
}

pub fn run_cli(args: &[&str]) -> Output {
    bin().args(args).output().expect("run ladi-flood")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Index with `flood` positives followed by `nonflood` negatives.
pub fn synthetic_index(flood: usize, nonflood: usize) -> CuratedIndex {
    let entries = (0..flood + nonflood)
        .map(|i| {
            let label = if i < flood { Label::Flood } else { Label::NonFlood };
            let damage = if label == Label::Flood { "flood/water" } else { "rubble" };
            IndexEntry {
                record: CatalogRecord {
                    image_id: format!("img{i:06}"),
                    url: format!("s3://bucket/img{i:06}.jpg"),
                    damage_labels: [damage.to_string()].into(),
                    infrastructure_labels: Default::default(),
                },
                label,
            }
        })
        .collect();
    CuratedIndex {
        entries,
        provenance: Provenance::default(),
    }
}
