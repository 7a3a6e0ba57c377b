//! Download helper for the canonical MNIST IDX files.
//!
//! Each file is fetched as `<base>/<name>.gz`, decompressed and checked
//! against the SHA-256 of the uncompressed canonical file before it is moved
//! into place. Files that are already present with the right digest are left
//! alone.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

pub const DEFAULT_BASE_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";

#[derive(Debug, Error)]
pub enum FetchError {
    #[error("download of {url} failed: {message}")]
    Http { url: String, message: String },
    #[error("cannot decompress {url}: {source}")]
    Decompress {
        url: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch for {name}: expected {expected}, got {actual}")]
    Checksum {
        name: String,
        expected: String,
        actual: String,
    },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One file to fetch and the digest of its uncompressed contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFile {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Downloaded,
    AlreadyPresent,
}

pub fn mnist_files() -> Vec<RemoteFile> {
    [
        (TRAIN_IMAGES, "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
        (TRAIN_LABELS, "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
        (TEST_IMAGES, "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
        (TEST_LABELS, "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
    ]
    .into_iter()
    .map(|(name, sha256)| RemoteFile {
        name: name.to_string(),
        sha256: sha256.to_string(),
    })
    .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn download(url: &str) -> Result<Vec<u8>, FetchError> {
    let http = |message: String| FetchError::Http {
        url: url.to_string(),
        message,
    };
    let response = ureq::get(url).call().map_err(|e| http(e.to_string()))?;
    let mut body = Vec::new();
    response
        .into_body()
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| http(e.to_string()))?;
    Ok(body)
}

/// Gunzips `body`, or returns it unchanged when it is not gzip data.
fn gunzip(url: &str, body: Vec<u8>) -> Result<Vec<u8>, FetchError> {
    if !body.starts_with(&[0x1f, 0x8b]) {
        return Ok(body);
    }
    let mut out = Vec::new();
    MultiGzDecoder::new(&body[..])
        .read_to_end(&mut out)
        .map_err(|source| FetchError::Decompress {
            url: url.to_string(),
            source,
        })?;
    Ok(out)
}

/// Fetches every file of `files` into `out_dir`, verifying digests.
pub fn fetch_files(base_url: &str, files: &[RemoteFile], out_dir: &Path) -> Result<Vec<Outcome>, FetchError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FetchError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let base = base_url.trim_end_matches('/');
    let mut outcomes = Vec::with_capacity(files.len());
    for file in files {
        let target = out_dir.join(&file.name);
        if let Ok(existing) = std::fs::read(&target) {
            if sha256_hex(&existing) == file.sha256 {
                outcomes.push(Outcome::AlreadyPresent);
                continue;
            }
        }
        let url = format!("{base}/{}.gz", file.name);
        let bytes = gunzip(&url, download(&url)?)?;
        let actual = sha256_hex(&bytes);
        if actual != file.sha256 {
            return Err(FetchError::Checksum {
                name: file.name.clone(),
                expected: file.sha256.clone(),
                actual,
            });
        }
        let partial = out_dir.join(format!("{}.part", file.name));
        std::fs::write(&partial, &bytes).map_err(io(&partial))?;
        std::fs::rename(&partial, &target).map_err(io(&target))?;
        outcomes.push(Outcome::Downloaded);
    }
    Ok(outcomes)
}

pub fn fetch_mnist(base_url: &str, out_dir: &Path) -> Result<Vec<Outcome>, FetchError> {
    fetch_files(base_url, &mnist_files(), out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;

    /// Serves `routes` over plain HTTP for `requests` connections.
    fn serve(routes: Vec<(String, Vec<u8>)>, requests: usize) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            for stream in listener.incoming().take(requests) {
                let mut stream = stream.unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request = String::new();
                reader.read_line(&mut request).unwrap();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                }
                let path = request.split_whitespace().nth(1).unwrap_or("").to_string();
                let (status, body) = match routes.iter().find(|(p, _)| *p == path) {
                    Some((_, b)) => ("200 OK", b.clone()),
                    None => ("404 Not Found", b"missing".to_vec()),
                };
                let head = format!(
                    "HTTP/1.1 {status}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                    body.len()
                );
                stream.write_all(head.as_bytes()).unwrap();
                stream.write_all(&body).unwrap();
            }
        });
        format!("http://{addr}")
    }

    fn gz(bytes: &[u8]) -> Vec<u8> {
        let mut e = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
        e.write_all(bytes).unwrap();
        e.finish().unwrap()
    }

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn downloads_verifies_and_skips_present_files() {
        let content = b"idx payload".to_vec();
        let files = vec![RemoteFile {
            name: "labels".into(),
            sha256: sha256_hex(&content),
        }];
        let base = serve(vec![("/labels.gz".into(), gz(&content))], 1);
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(fetch_files(&base, &files, dir.path()).unwrap(), vec![Outcome::Downloaded]);
        assert_eq!(std::fs::read(dir.path().join("labels")).unwrap(), content);
        // the server is gone; a second call must not need it
        assert_eq!(fetch_files(&base, &files, dir.path()).unwrap(), vec![Outcome::AlreadyPresent]);
    }

    #[test]
    fn checksum_mismatch_leaves_nothing_behind() {
        let files = vec![RemoteFile {
            name: "images".into(),
            sha256: "00".repeat(32),
        }];
        let base = serve(vec![("/images.gz".into(), gz(b"tampered"))], 1);
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_files(&base, &files, dir.path()).unwrap_err();
        assert!(matches!(err, FetchError::Checksum { .. }), "{err}");
        assert!(!dir.path().join("images").exists());
    }

    #[test]
    fn http_errors_are_reported() {
        let files = vec![RemoteFile {
            name: "absent".into(),
            sha256: String::new(),
        }];
        let base = serve(Vec::new(), 1);
        let dir = tempfile::tempdir().unwrap();
        let err = fetch_files(&base, &files, dir.path()).unwrap_err();
        assert!(matches!(err, FetchError::Http { .. }), "{err}");
    }
}
