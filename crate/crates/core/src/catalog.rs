//! Annotation ingestion, cleaning and the curated flood index.
//!
//! Raw annotation tables carry one row per (image, category, label) triple.
//! Cleaning drops incomplete rows and exact duplicates, grouping collects the
//! damage and infrastructure labels of each image, and the binary flood label
//! is derived from the damage labels alone.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// First line of every curated index file.
pub const INDEX_VERSION_HEADER: &str = "# ladi-flood curated index v1";
/// Column names of a curated index, in file order.
pub const INDEX_COLUMNS: [&str; 5] = [
    "image_id",
    "url",
    "binary_label",
    "damage_labels",
    "infrastructure_labels",
];
const LABEL_SEPARATOR: char = '|';

pub const DAMAGE_CATEGORY: &str = "damage";
pub const INFRASTRUCTURE_CATEGORY: &str = "infrastructure";
const NONE_LABEL: &str = "none";
const FLOOD_SUBSTRING: &str = "flood";

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("{path}: missing required column \"{column}\"")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: row {row}: {reason}")]
    ParseError {
        path: PathBuf,
        row: usize,
        reason: String,
    },
    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),
    #[error("{path}: unrecognized annotation format (expected .csv or .jsonl)")]
    UnknownFormat { path: PathBuf },
    #[error("image {image_id}: conflicting urls \"{first}\" and \"{second}\"")]
    ConflictingUrl {
        image_id: String,
        first: String,
        second: String,
    },
    #[error("image {0}: record has no damage labels")]
    NoDamageLabels(String),
    #[error("{path}: schema mismatch: expected \"{expected}\", found \"{found}\"")]
    SchemaMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CatalogError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        CatalogError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Input table encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnotationFormat {
    Csv,
    Jsonl,
}

impl AnnotationFormat {
    /// Guess the format from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(AnnotationFormat::Csv),
            "jsonl" | "ndjson" => Some(AnnotationFormat::Jsonl),
            _ => None,
        }
    }
}

/// One annotation row after string normalization.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawAnnotation {
    pub image_id: String,
    pub url: String,
    pub category: String,
    pub label: String,
    pub annotator: String,
}

impl RawAnnotation {
    pub fn new(image_id: &str, url: &str, category: &str, label: &str, annotator: &str) -> Self {
        RawAnnotation {
            image_id: image_id.trim().to_string(),
            url: url.trim().to_string(),
            category: normalize_token(category),
            label: normalize_token(label),
            annotator: normalize_token(annotator),
        }
    }

    pub fn is_human(&self) -> bool {
        self.annotator == "human"
    }
}

fn normalize_token(s: &str) -> String {
    s.trim().to_lowercase()
}

/// A resource locator is either `scheme://rest` or a plain filesystem path.
pub fn is_valid_locator(url: &str) -> bool {
    if url.is_empty() || url.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return false;
    }
    match url.split_once("://") {
        Some((scheme, rest)) => {
            !scheme.is_empty()
                && scheme
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
                && scheme.starts_with(|c: char| c.is_ascii_alphabetic())
                && !rest.is_empty()
        }
        None => true,
    }
}

/// Counters describing what cleaning and curation removed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningStats {
    pub rows_read: usize,
    pub machine_rows_skipped: usize,
    pub missing_removed: usize,
    pub invalid_url_removed: usize,
    pub duplicates_removed: usize,
    pub conflicting_url_images: usize,
    pub no_damage_images: usize,
}

impl CleaningStats {
    pub fn is_zero_drop(&self) -> bool {
        self.machine_rows_skipped == 0
            && self.missing_removed == 0
            && self.invalid_url_removed == 0
            && self.duplicates_removed == 0
            && self.conflicting_url_images == 0
            && self.no_damage_images == 0
    }
}

/// Parsed rows of a table, keyed by lower-cased column name.
struct Table {
    /// Header columns; `None` for self-describing JSON lines.
    columns: Option<Vec<String>>,
    rows: Vec<HashMap<String, String>>,
}

fn read_table(path: &Path, format: AnnotationFormat, required: &[&str]) -> Result<Table, CatalogError> {
    let text = fs::read_to_string(path).map_err(|e| CatalogError::io(path, e))?;
    if text.trim().is_empty() {
        return Err(CatalogError::EmptyFile(path.to_path_buf()));
    }
    let (columns, rows) = match format {
        AnnotationFormat::Csv => {
            let (columns, rows) = read_csv_rows(path, &text)?;
            (Some(columns), rows)
        }
        AnnotationFormat::Jsonl => (None, read_jsonl_rows(path, &text)?),
    };
    if format == AnnotationFormat::Jsonl {
        for (i, row) in rows.iter().enumerate() {
            for column in required {
                if !row.contains_key(*column) {
                    return Err(CatalogError::ParseError {
                        path: path.to_path_buf(),
                        row: i + 1,
                        reason: format!("missing field \"{column}\""),
                    });
                }
            }
        }
    }
    Ok(Table { columns, rows })
}

type CsvRows = (Vec<String>, Vec<HashMap<String, String>>);

fn read_csv_rows(path: &Path, text: &str) -> Result<CsvRows, CatalogError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CatalogError::ParseError {
            path: path.to_path_buf(),
            row: 0,
            reason: e.to_string(),
        })?
        .iter()
        .map(normalize_token)
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CatalogError::ParseError {
            path: path.to_path_buf(),
            row: i + 1,
            reason: e.to_string(),
        })?;
        let row = headers
            .iter()
            .cloned()
            .zip(record.iter().map(str::to_string))
            .collect();
        rows.push(row);
    }
    Ok((headers, rows))
}

fn read_jsonl_rows(path: &Path, text: &str) -> Result<Vec<HashMap<String, String>>, CatalogError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| CatalogError::ParseError {
                path: path.to_path_buf(),
                row: i + 1,
                reason: e.to_string(),
            })?;
        let object = value.as_object().ok_or_else(|| CatalogError::ParseError {
            path: path.to_path_buf(),
            row: i + 1,
            reason: "expected a JSON object".into(),
        })?;
        let mut row = HashMap::new();
        for (key, value) in object {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Null => String::new(),
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => {
                    return Err(CatalogError::ParseError {
                        path: path.to_path_buf(),
                        row: i + 1,
                        reason: format!("field \"{key}\" is not a scalar: {other}"),
                    })
                }
            };
            row.insert(normalize_token(key), text);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn check_columns(path: &Path, table: &Table, required: &[&str]) -> Result<(), CatalogError> {
    let Some(columns) = &table.columns else {
        return Ok(());
    };
    match required.iter().find(|c| !columns.iter().any(|h| h == *c)) {
        Some(column) => Err(CatalogError::MissingColumn {
            path: path.to_path_buf(),
            column: column.to_string(),
        }),
        None => Ok(()),
    }
}

fn data_rows(table: Table) -> impl Iterator<Item = HashMap<String, String>> {
    table.rows.into_iter()
}

/// Load an annotation table with columns `image_id,url,category,label` and
/// an optional `annotator` column (absent means human).
pub fn load_annotations(path: &Path, format: AnnotationFormat) -> Result<Vec<RawAnnotation>, CatalogError> {
    const REQUIRED: [&str; 4] = ["image_id", "url", "category", "label"];
    let table = read_table(path, format, &REQUIRED)?;
    check_columns(path, &table, &REQUIRED)?;
    let rows: Vec<RawAnnotation> = data_rows(table)
        .map(|row| {
            RawAnnotation::new(
                &row["image_id"],
                &row["url"],
                &row["category"],
                &row["label"],
                row.get("annotator").map(String::as_str).unwrap_or("human"),
            )
        })
        .collect();
    log::info!("{}: read {} annotation rows", path.display(), rows.len());
    Ok(rows)
}

/// Load a label table without urls and join it against a metadata table
/// mapping `image_id` to `url`. Labels without a metadata entry get an empty
/// url and are dropped later by cleaning.
pub fn load_annotations_with_metadata(
    labels_path: &Path,
    labels_format: AnnotationFormat,
    metadata_path: &Path,
    metadata_format: AnnotationFormat,
) -> Result<Vec<RawAnnotation>, CatalogError> {
    const META: [&str; 2] = ["image_id", "url"];
    const LABELS: [&str; 3] = ["image_id", "category", "label"];

    let meta = read_table(metadata_path, metadata_format, &META)?;
    check_columns(metadata_path, &meta, &META)?;
    let mut urls: HashMap<String, String> = HashMap::new();
    for row in data_rows(meta) {
        urls.entry(row["image_id"].trim().to_string())
            .or_insert_with(|| row["url"].trim().to_string());
    }

    let labels = read_table(labels_path, labels_format, &LABELS)?;
    check_columns(labels_path, &labels, &LABELS)?;
    let rows: Vec<RawAnnotation> = data_rows(labels)
        .map(|row| {
            let image_id = row["image_id"].trim();
            let url = row
                .get("url")
                .filter(|u| !u.trim().is_empty())
                .map(String::as_str)
                .or_else(|| urls.get(image_id).map(String::as_str))
                .unwrap_or("");
            RawAnnotation::new(
                image_id,
                url,
                &row["category"],
                &row["label"],
                row.get("annotator").map(String::as_str).unwrap_or("human"),
            )
        })
        .collect();
    log::info!(
        "{}: read {} label rows joined against {} metadata entries",
        labels_path.display(),
        rows.len(),
        urls.len()
    );
    Ok(rows)
}

/// Keep only human annotations unless `include_machine` is set.
pub fn filter_annotators(rows: Vec<RawAnnotation>, include_machine: bool) -> (Vec<RawAnnotation>, usize) {
    if include_machine {
        return (rows, 0);
    }
    let before = rows.len();
    let kept: Vec<_> = rows.into_iter().filter(RawAnnotation::is_human).collect();
    let skipped = before - kept.len();
    (kept, skipped)
}

/// Drop incomplete rows and collapse exact (image_id, category, label)
/// duplicates, keeping the first occurrence.
pub fn clean_annotations(rows: Vec<RawAnnotation>) -> (Vec<RawAnnotation>, CleaningStats) {
    let mut stats = CleaningStats {
        rows_read: rows.len(),
        ..Default::default()
    };
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    let mut kept = Vec::with_capacity(rows.len());
    for row in rows {
        if row.image_id.is_empty() || row.url.is_empty() || row.label.is_empty() {
            stats.missing_removed += 1;
            continue;
        }
        if !is_valid_locator(&row.url) {
            stats.invalid_url_removed += 1;
            continue;
        }
        let key = (row.image_id.clone(), row.category.clone(), row.label.clone());
        if !seen.insert(key) {
            stats.duplicates_removed += 1;
            continue;
        }
        kept.push(row);
    }
    (kept, stats)
}

/// All annotations of one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub image_id: String,
    pub url: String,
    pub damage_labels: BTreeSet<String>,
    pub infrastructure_labels: BTreeSet<String>,
}

/// Output of [`build_catalog`]: the grouped records plus every image that was
/// dropped because its rows disagreed on the url.
#[derive(Debug, Default)]
pub struct CatalogBuild {
    pub records: Vec<CatalogRecord>,
    pub conflicts: Vec<CatalogError>,
}

/// Group cleaned rows by image. Infrastructure "none" labels are discarded and
/// images whose rows carry more than one url are dropped and reported.
pub fn build_catalog(rows: &[RawAnnotation]) -> CatalogBuild {
    let mut grouped: BTreeMap<&str, CatalogRecord> = BTreeMap::new();
    let mut conflicted: BTreeMap<&str, CatalogError> = BTreeMap::new();
    for row in rows {
        if conflicted.contains_key(row.image_id.as_str()) {
            continue;
        }
        let record = grouped
            .entry(row.image_id.as_str())
            .or_insert_with(|| CatalogRecord {
                image_id: row.image_id.clone(),
                url: row.url.clone(),
                damage_labels: BTreeSet::new(),
                infrastructure_labels: BTreeSet::new(),
            });
        if record.url != row.url {
            let error = CatalogError::ConflictingUrl {
                image_id: row.image_id.clone(),
                first: record.url.clone(),
                second: row.url.clone(),
            };
            log::warn!("{error}; record dropped");
            grouped.remove(row.image_id.as_str());
            conflicted.insert(row.image_id.as_str(), error);
            continue;
        }
        match row.category.as_str() {
            DAMAGE_CATEGORY => {
                record.damage_labels.insert(row.label.clone());
            }
            INFRASTRUCTURE_CATEGORY if row.label != NONE_LABEL => {
                record.infrastructure_labels.insert(row.label.clone());
            }
            _ => {}
        }
    }
    CatalogBuild {
        records: grouped.into_values().collect(),
        conflicts: conflicted.into_values().collect(),
    }
}

/// Binary flood label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    NonFlood = 0,
    Flood = 1,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: i64) -> Option<Self> {
        match i {
            0 => Some(Label::NonFlood),
            1 => Some(Label::Flood),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::NonFlood => "non-flood",
            Label::Flood => "flood",
        }
    }
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        label.as_u8()
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Label::from_index(v as i64).ok_or_else(|| format!("label must be 0 or 1, got {v}"))
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_u8())
    }
}

/// 1 iff any damage label contains "flood", ignoring case.
pub fn derive_flood_label(record: &CatalogRecord) -> Result<Label, CatalogError> {
    if record.damage_labels.is_empty() {
        return Err(CatalogError::NoDamageLabels(record.image_id.clone()));
    }
    let flood = record
        .damage_labels
        .iter()
        .any(|l| l.to_lowercase().contains(FLOOD_SUBSTRING));
    Ok(if flood { Label::Flood } else { Label::NonFlood })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub record: CatalogRecord,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sources: Vec<String>,
    pub stats: CleaningStats,
}

/// Curated, deduplicated and labelled records sorted by image id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CuratedIndex {
    pub entries: Vec<IndexEntry>,
    pub provenance: Provenance,
}

impl CuratedIndex {
    /// Derive labels for `records`, excluding records without damage labels.
    pub fn from_records(records: Vec<CatalogRecord>, mut provenance: Provenance) -> Self {
        let mut entries = Vec::with_capacity(records.len());
        for record in records {
            match derive_flood_label(&record) {
                Ok(label) => entries.push(IndexEntry { record, label }),
                Err(_) => provenance.stats.no_damage_images += 1,
            }
        }
        entries.sort_by(|a, b| a.record.image_id.cmp(&b.record.image_id));
        CuratedIndex { entries, provenance }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, label: Label) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn get(&self, image_id: &str) -> Option<&IndexEntry> {
        self.entries
            .binary_search_by(|e| e.record.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Run filter, clean, group and derive over loaded rows.
pub fn curate(rows: Vec<RawAnnotation>, include_machine: bool, sources: Vec<String>) -> CuratedIndex {
    let (rows, machine_skipped) = filter_annotators(rows, include_machine);
    let (rows, mut stats) = clean_annotations(rows);
    stats.rows_read += machine_skipped;
    stats.machine_rows_skipped = machine_skipped;
    let build = build_catalog(&rows);
    stats.conflicting_url_images = build.conflicts.len();
    CuratedIndex::from_records(build.records, Provenance { sources, stats })
}

/// Split urls by label; every entry lands in exactly one list.
pub fn partition_urls(index: &CuratedIndex) -> (Vec<String>, Vec<String>) {
    let (flood, nonflood): (Vec<&IndexEntry>, Vec<&IndexEntry>) =
        index.entries.iter().partition(|e| e.label == Label::Flood);
    (
        flood.into_iter().map(|e| e.record.url.clone()).collect(),
        nonflood.into_iter().map(|e| e.record.url.clone()).collect(),
    )
}

/// Path of the JSON cleaning summary written next to an index file.
pub fn stats_path(index_path: &Path) -> PathBuf {
    let mut name = index_path.as_os_str().to_owned();
    name.push(".stats.json");
    PathBuf::from(name)
}

fn join_labels(labels: &BTreeSet<String>) -> String {
    labels
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(&LABEL_SEPARATOR.to_string())
}

fn split_labels(field: &str) -> BTreeSet<String> {
    field
        .split(LABEL_SEPARATOR)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Write the index and its JSON provenance summary.
pub fn write_index(index: &CuratedIndex, path: &Path) -> Result<(), CatalogError> {
    let file = File::create(path).map_err(|e| CatalogError::io(path, e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{INDEX_VERSION_HEADER}").map_err(|e| CatalogError::io(path, e))?;
    {
        let mut writer = csv::WriterBuilder::new().from_writer(&mut out);
        let io = |e: csv::Error| CatalogError::io(path, e.into());
        writer.write_record(INDEX_COLUMNS).map_err(io)?;
        for entry in &index.entries {
            let label = entry.label.as_u8().to_string();
            writer
                .write_record([
                    entry.record.image_id.as_str(),
                    entry.record.url.as_str(),
                    label.as_str(),
                    join_labels(&entry.record.damage_labels).as_str(),
                    join_labels(&entry.record.infrastructure_labels).as_str(),
                ])
                .map_err(io)?;
        }
        writer.flush().map_err(|e| CatalogError::io(path, e))?;
    }
    out.flush().map_err(|e| CatalogError::io(path, e))?;

    let summary = stats_path(path);
    let json = serde_json::to_string_pretty(&index.provenance).expect("provenance serializes");
    fs::write(&summary, json + "\n").map_err(|e| CatalogError::io(&summary, e))?;
    Ok(())
}

/// Read an index written by [`write_index`].
pub fn read_index(path: &Path) -> Result<CuratedIndex, CatalogError> {
    let file = File::open(path).map_err(|e| CatalogError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader
        .read_line(&mut header)
        .map_err(|e| CatalogError::io(path, e))?;
    let header = header.trim_end_matches(['\r', '\n']);
    if header != INDEX_VERSION_HEADER {
        return Err(CatalogError::SchemaMismatch {
            path: path.to_path_buf(),
            expected: INDEX_VERSION_HEADER.to_string(),
            found: header.to_string(),
        });
    }

    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let columns: Vec<String> = csv_reader
        .headers()
        .map_err(|e| CatalogError::ParseError {
            path: path.to_path_buf(),
            row: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if columns != INDEX_COLUMNS {
        return Err(CatalogError::SchemaMismatch {
            path: path.to_path_buf(),
            expected: INDEX_COLUMNS.join(","),
            found: columns.join(","),
        });
    }

    let mut entries = Vec::new();
    for (i, record) in csv_reader.records().enumerate() {
        let parse_err = |reason: String| CatalogError::ParseError {
            path: path.to_path_buf(),
            row: i + 2,
            reason,
        };
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        let label = match &record[2] {
            "0" => Label::NonFlood,
            "1" => Label::Flood,
            other => return Err(parse_err(format!("binary_label must be 0 or 1, got {other:?}"))),
        };
        entries.push(IndexEntry {
            record: CatalogRecord {
                image_id: record[0].to_string(),
                url: record[1].to_string(),
                damage_labels: split_labels(&record[3]),
                infrastructure_labels: split_labels(&record[4]),
            },
            label,
        });
    }

    let summary = stats_path(path);
    let provenance = match fs::read_to_string(&summary) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| CatalogError::ParseError {
            path: summary.clone(),
            row: 0,
            reason: e.to_string(),
        })?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            log::warn!("{}: no provenance summary, counters reset", summary.display());
            Provenance::default()
        }
        Err(e) => return Err(CatalogError::io(&summary, e)),
    };
    Ok(CuratedIndex { entries, provenance })
}
