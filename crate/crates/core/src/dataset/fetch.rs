//! Content-addressed image cache in front of local files and HTTPS fetches.
//!
//! Layout: `<cache_dir>/<first two hex digits>/<sha256(url)>.img`, plus a
//! `manifest.tsv` mapping digest to url.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Duration;

use sha2::{Digest, Sha256};

use super::{DatasetError, LabeledSample, RgbImage};

/// Environment variable overriding the default cache location.
pub const CACHE_ENV_VAR: &str = "LADI_CACHE_DIR";
const MANIFEST: &str = "manifest.tsv";

pub struct ImageCache {
    dir: PathBuf,
    offline: bool,
    hits: AtomicUsize,
    misses: AtomicUsize,
    manifest_lock: Mutex<()>,
    client: OnceLock<reqwest::blocking::Client>,
}

impl std::fmt::Debug for ImageCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ImageCache")
            .field("dir", &self.dir)
            .field("offline", &self.offline)
            .field("hits", &self.hits())
            .field("misses", &self.misses())
            .finish()
    }
}

/// Map object-store urls onto plain HTTPS resources.
pub fn resolve_url(url: &str) -> String {
    match url.strip_prefix("s3://") {
        Some(rest) => match rest.split_once('/') {
            Some((bucket, key)) => format!("https://{bucket}.s3.amazonaws.com/{key}"),
            None => format!("https://{rest}.s3.amazonaws.com/"),
        },
        None => url.to_string(),
    }
}

fn local_path(url: &str) -> Option<&Path> {
    if let Some(rest) = url.strip_prefix("file://") {
        return Some(Path::new(rest));
    }
    if url.contains("://") {
        None
    } else {
        Some(Path::new(url))
    }
}

impl ImageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ImageCache {
            dir: dir.into(),
            offline: false,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            manifest_lock: Mutex::new(()),
            client: OnceLock::new(),
        }
    }

    /// Cache rooted at `$LADI_CACHE_DIR` when set, else `default_dir`.
    pub fn from_env_or(default_dir: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV_VAR) {
            Some(dir) if !dir.is_empty() => ImageCache::new(dir),
            _ => ImageCache::new(default_dir),
        }
    }

    /// Refuse network access; only cached or local images resolve.
    pub fn offline(mut self, offline: bool) -> Self {
        self.offline = offline;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn digest(url: &str) -> String {
        hex::encode(Sha256::digest(url.as_bytes()))
    }

    pub fn entry_path(&self, url: &str) -> PathBuf {
        let digest = Self::digest(url);
        self.dir.join(&digest[..2]).join(format!("{digest}.img"))
    }

    fn io(path: &Path, source: std::io::Error) -> DatasetError {
        DatasetError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Raw bytes for `url`, from the cache when present.
    pub fn bytes(&self, url: &str) -> Result<Vec<u8>, DatasetError> {
        let entry = self.entry_path(url);
        if let Ok(bytes) = fs::read(&entry) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(bytes);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let bytes = match local_path(url) {
            Some(path) => fs::read(path).map_err(|e| DatasetError::FetchError {
                url: url.to_string(),
                status: e.to_string(),
            })?,
            None => self.download(url)?,
        };
        self.store(url, &entry, &bytes)?;
        Ok(bytes)
    }

    fn download(&self, url: &str) -> Result<Vec<u8>, DatasetError> {
        let fail = |status: String| DatasetError::FetchError {
            url: url.to_string(),
            status,
        };
        if self.offline {
            return Err(fail("not cached and offline mode is on".into()));
        }
        let client = self.client.get_or_init(|| {
            reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client")
        });
        let response = client
            .get(resolve_url(url))
            .send()
            .map_err(|e| fail(e.to_string()))?;
        let status = response.status();
        if !status.is_success() {
            return Err(fail(status.to_string()));
        }
        response
            .bytes()
            .map(|b| b.to_vec())
            .map_err(|e| fail(e.to_string()))
    }

    fn store(&self, url: &str, entry: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
        let parent = entry.parent().expect("entry has a shard directory");
        fs::create_dir_all(parent).map_err(|e| Self::io(parent, e))?;
        let tmp = entry.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Self::io(&tmp, e))?;
        fs::rename(&tmp, entry).map_err(|e| Self::io(entry, e))?;

        let _guard = self.manifest_lock.lock().unwrap_or_else(|p| p.into_inner());
        let manifest = self.dir.join(MANIFEST);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&manifest)
            .map_err(|e| Self::io(&manifest, e))?;
        writeln!(file, "{}\t{}", Self::digest(url), url).map_err(|e| Self::io(&manifest, e))
    }
}

/// Fetch and decode one sample's image as RGB.
pub fn fetch_image(sample: &LabeledSample, cache: &ImageCache) -> Result<RgbImage, DatasetError> {
    let bytes = cache.bytes(&sample.url)?;
    image::load_from_memory(&bytes)
        .map(|img| img.to_rgb8())
        .map_err(|e| DatasetError::DecodeError {
            url: sample.url.clone(),
            reason: e.to_string(),
        })
}

/// Fetch many samples with at most `parallelism` concurrent workers. Results
/// come back in input order; each failure is reported for its own sample.
pub fn fetch_all<T, F>(
    samples: &[LabeledSample],
    cache: &ImageCache,
    parallelism: usize,
    map: F,
) -> Vec<Result<T, DatasetError>>
where
    T: Send,
    F: Fn(RgbImage) -> Result<T, DatasetError> + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<T, DatasetError>>>> =
        samples.iter().map(|_| Mutex::new(None)).collect();
    let workers = parallelism.clamp(1, samples.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= samples.len() {
                    break;
                }
                let result = fetch_image(&samples[i], cache).and_then(&map);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("every slot filled"))
        .collect()
}
