//! Path-structured demo storage served under `/storage`.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use http::header::{AUTHORIZATION, WWW_AUTHENTICATE};
use http::{Method, StatusCode};
use parking_lot::RwLock;
use serde::Serialize;

use super::{Guard, GuardRequest, GuardStatus};
use crate::authz::ResourcePath;
use crate::http::{json_response, HttpRequest, HttpResponse, Service};

pub const STORAGE_PREFIX: &str = "/storage";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StorageError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0} conflicts with an existing entry")]
    Conflict(String),
    #[error("storage I/O error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    File(Vec<u8>),
    Collection(Vec<String>),
}

pub trait StorageBackend: Send + Sync {
    fn read(&self, path: &ResourcePath) -> Result<Entry, StorageError>;
    /// Writes a file, creating missing parent collections.
    fn write(&self, path: &ResourcePath, data: Vec<u8>) -> Result<(), StorageError>;
    fn create_collection(&self, path: &ResourcePath) -> Result<(), StorageError>;
}

#[derive(Debug, Clone)]
enum Node {
    File(Vec<u8>),
    Collection,
}

/// In-memory tree. Writes replace whole files; last writer wins.
#[derive(Debug)]
pub struct MemoryBackend {
    nodes: RwLock<BTreeMap<ResourcePath, Node>>,
}

impl Default for MemoryBackend {
    fn default() -> Self {
        let mut nodes = BTreeMap::new();
        nodes.insert(ResourcePath::root(), Node::Collection);
        Self {
            nodes: RwLock::new(nodes),
        }
    }
}

impl MemoryBackend {
    pub fn new() -> Self {
        Self::default()
    }

    fn ensure_parents(
        nodes: &mut BTreeMap<ResourcePath, Node>,
        path: &ResourcePath,
    ) -> Result<(), StorageError> {
        let mut ancestors = Vec::new();
        let mut cur = path.parent();
        while let Some(p) = cur {
            cur = p.parent();
            ancestors.push(p);
        }
        for a in ancestors.into_iter().rev() {
            match nodes.get(&a) {
                Some(Node::Collection) => {}
                Some(Node::File(_)) => return Err(StorageError::Conflict(a.to_string())),
                None => {
                    nodes.insert(a, Node::Collection);
                }
            }
        }
        Ok(())
    }
}

impl StorageBackend for MemoryBackend {
    fn read(&self, path: &ResourcePath) -> Result<Entry, StorageError> {
        let nodes = self.nodes.read();
        match nodes.get(path) {
            Some(Node::File(data)) => Ok(Entry::File(data.clone())),
            Some(Node::Collection) => Ok(Entry::Collection(
                nodes
                    .keys()
                    .filter(|k| k.parent().as_ref() == Some(path))
                    .filter_map(|k| k.segments().last().cloned())
                    .collect(),
            )),
            None => Err(StorageError::NotFound(path.to_string())),
        }
    }

    fn write(&self, path: &ResourcePath, data: Vec<u8>) -> Result<(), StorageError> {
        let mut nodes = self.nodes.write();
        if matches!(nodes.get(path), Some(Node::Collection)) {
            return Err(StorageError::Conflict(path.to_string()));
        }
        Self::ensure_parents(&mut nodes, path)?;
        nodes.insert(path.clone(), Node::File(data));
        Ok(())
    }

    fn create_collection(&self, path: &ResourcePath) -> Result<(), StorageError> {
        let mut nodes = self.nodes.write();
        if nodes.contains_key(path) {
            return Err(StorageError::Conflict(path.to_string()));
        }
        Self::ensure_parents(&mut nodes, path)?;
        nodes.insert(path.clone(), Node::Collection);
        Ok(())
    }
}

/// A tree rooted at a local directory. Resource paths never contain `.` or
/// `..` segments, so they cannot escape the root.
#[derive(Debug)]
pub struct DirectoryBackend {
    root: PathBuf,
}

impl DirectoryBackend {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, StorageError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| StorageError::Io(e.to_string()))?;
        Ok(Self { root })
    }

    fn local(&self, path: &ResourcePath) -> PathBuf {
        path.segments().iter().fold(self.root.clone(), |p, s| p.join(s))
    }
}

fn io_error(path: &ResourcePath, e: std::io::Error) -> StorageError {
    match e.kind() {
        std::io::ErrorKind::NotFound => StorageError::NotFound(path.to_string()),
        std::io::ErrorKind::AlreadyExists => StorageError::Conflict(path.to_string()),
        _ => StorageError::Io(e.to_string()),
    }
}

impl StorageBackend for DirectoryBackend {
    fn read(&self, path: &ResourcePath) -> Result<Entry, StorageError> {
        let local = self.local(path);
        let meta = std::fs::metadata(&local).map_err(|e| io_error(path, e))?;
        if meta.is_dir() {
            let mut names: Vec<String> = std::fs::read_dir(&local)
                .map_err(|e| io_error(path, e))?
                .filter_map(|e| e.ok()?.file_name().into_string().ok())
                .filter(|n| !n.starts_with(".tmp"))
                .collect();
            names.sort();
            Ok(Entry::Collection(names))
        } else {
            std::fs::read(&local)
                .map(Entry::File)
                .map_err(|e| io_error(path, e))
        }
    }

    fn write(&self, path: &ResourcePath, data: Vec<u8>) -> Result<(), StorageError> {
        let local = self.local(path);
        if local.is_dir() {
            return Err(StorageError::Conflict(path.to_string()));
        }
        let parent = local.parent().expect("non-root path has a parent");
        std::fs::create_dir_all(parent).map_err(|_| StorageError::Conflict(path.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| io_error(path, e))?;
        std::io::Write::write_all(&mut tmp, &data).map_err(|e| io_error(path, e))?;
        tmp.persist(&local).map_err(|e| io_error(path, e.error))?;
        Ok(())
    }

    fn create_collection(&self, path: &ResourcePath) -> Result<(), StorageError> {
        let local = self.local(path);
        if local.exists() {
            return Err(StorageError::Conflict(path.to_string()));
        }
        std::fs::create_dir_all(&local).map_err(|e| io_error(path, e))
    }
}

#[derive(Serialize)]
struct Denial<'a> {
    error: &'a str,
    error_description: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    trace: Option<&'a [String]>,
}

/// The guarded storage API.
pub struct StorageService {
    guard: Guard,
    backend: Arc<dyn StorageBackend>,
}

impl StorageService {
    pub fn new(guard: Guard, backend: Arc<dyn StorageBackend>) -> Self {
        Self { guard, backend }
    }

    pub fn guard(&self) -> &Guard {
        &self.guard
    }

    pub fn backend(&self) -> &Arc<dyn StorageBackend> {
        &self.backend
    }
}

fn storage_path(uri_path: &str) -> Option<String> {
    let rest = uri_path.strip_prefix(STORAGE_PREFIX)?;
    match rest {
        "" | "/" => Some("/".into()),
        r if r.starts_with('/') => Some(r.to_string()),
        _ => None,
    }
}

impl Service for StorageService {
    fn handle(&self, request: HttpRequest) -> HttpResponse {
        let Some(path) = storage_path(request.uri().path()) else {
            return json_response(StatusCode::NOT_FOUND, &serde_json::json!({"error": "not_found"}));
        };
        let outcome = self.guard.guard(GuardRequest {
            method: request.method().as_str(),
            path: &path,
            authorization: request.headers().get(AUTHORIZATION).and_then(|v| v.to_str().ok()),
        });
        if outcome.status != GuardStatus::Allowed {
            let error = match outcome.status {
                GuardStatus::Unauthenticated => "invalid_token",
                GuardStatus::Forbidden => "insufficient_scope",
                _ => "invalid_request",
            };
            let mut resp = json_response(
                outcome.status.http_status(),
                &Denial {
                    error,
                    error_description: outcome.reason.as_deref(),
                    trace: outcome.decision.as_ref().map(|d| d.trace.as_slice()),
                },
            );
            if let Some(ch) = outcome.challenge.as_deref().and_then(|c| c.parse().ok()) {
                resp.headers_mut().insert(WWW_AUTHENTICATE, ch);
            }
            return resp;
        }
        let rpath = ResourcePath::parse(&path).expect("guard accepted the path");
        let result = match *request.method() {
            Method::GET | Method::HEAD => self.backend.read(&rpath).map(|entry| match entry {
                Entry::File(data) => http::Response::builder()
                    .status(StatusCode::OK)
                    .header(http::header::CONTENT_TYPE, "application/octet-stream")
                    .body(if request.method() == Method::HEAD {
                        Vec::new()
                    } else {
                        data
                    })
                    .expect("valid response"),
                Entry::Collection(children) => json_response(StatusCode::OK, &children),
            }),
            Method::PUT => self
                .backend
                .write(&rpath, request.into_body())
                .map(|()| json_response(StatusCode::CREATED, &serde_json::json!({"path": path}))),
            ref m if m.as_str() == "MKCOL" => self
                .backend
                .create_collection(&rpath)
                .map(|()| json_response(StatusCode::CREATED, &serde_json::json!({"path": path}))),
            _ => {
                return json_response(
                    StatusCode::METHOD_NOT_ALLOWED,
                    &serde_json::json!({"error": "method_not_allowed"}),
                )
            }
        };
        result.unwrap_or_else(|e| {
            let status = match e {
                StorageError::NotFound(_) => StatusCode::NOT_FOUND,
                StorageError::Conflict(_) => StatusCode::CONFLICT,
                StorageError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            };
            json_response(status, &serde_json::json!({"error": e.to_string()}))
        })
    }
}
