//! Authorization codes and refresh-token records.
//!
//! Every mutation runs under one lock, so consuming a code or rotating a
//! refresh handle is atomic: of several concurrent attempts on the same
//! handle exactly one succeeds. With a backing file the whole state is
//! rewritten (temp file + rename) after each mutation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::authz::Capability;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorizationCode {
    pub code: String,
    pub client_id: String,
    pub redirect_uri: String,
    pub username: String,
    pub scopes: Vec<Capability>,
    pub auth_time: i64,
    pub expires_at: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefreshTokenRecord {
    pub handle: String,
    pub client_id: String,
    pub subject: String,
    /// Username for user grants, so refreshed tokens keep the user's groups.
    pub username: Option<String>,
    pub granted_scopes: Vec<Capability>,
    pub auth_time: Option<i64>,
    pub issued_at: i64,
    pub expires_at: i64,
    pub revoked: bool,
}

impl RefreshTokenRecord {
    pub fn is_live(&self, now: i64) -> bool {
        !self.revoked && now < self.expires_at
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("grant store I/O on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("grant store file {path} is corrupt: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeRedemption {
    Unknown,
    AlreadyUsed,
    Expired,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefreshRejection {
    Unknown,
    Revoked,
    Expired,
    WrongClient,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct State {
    codes: BTreeMap<String, AuthorizationCode>,
    /// Redeemed codes and their original expiry, kept until that expiry.
    consumed: BTreeMap<String, i64>,
    refresh: BTreeMap<String, RefreshTokenRecord>,
}

impl State {
    fn prune(&mut self, now: i64) {
        self.codes.retain(|_, c| c.expires_at > now);
        self.consumed.retain(|_, exp| *exp > now);
        self.refresh.retain(|_, r| r.expires_at > now);
    }
}

#[derive(Debug)]
pub struct GrantStore {
    state: Mutex<State>,
    path: Option<PathBuf>,
}

impl GrantStore {
    pub fn in_memory() -> Self {
        Self {
            state: Mutex::new(State::default()),
            path: None,
        }
    }

    /// Opens (or creates on first write) a snapshot file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let path = path.into();
        let state = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| StoreError::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => State::default(),
            Err(e) => {
                return Err(StoreError::Io {
                    path,
                    reason: e.to_string(),
                })
            }
        };
        Ok(Self {
            state: Mutex::new(state),
            path: Some(path),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn persist(&self, state: &State) -> Result<(), StoreError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let io = |e: std::io::Error| StoreError::Io {
            path: path.clone(),
            reason: e.to_string(),
        };
        let dir = path
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
        tmp.write_all(&serde_json::to_vec(state).expect("store state serializes"))
            .map_err(io)?;
        tmp.as_file().sync_all().map_err(io)?;
        tmp.persist(path).map_err(|e| io(e.error))?;
        Ok(())
    }

    fn mutate<T>(&self, now: i64, f: impl FnOnce(&mut State) -> T) -> Result<T, StoreError> {
        let mut state = self.state.lock();
        state.prune(now);
        let out = f(&mut state);
        self.persist(&state)?;
        Ok(out)
    }

    pub fn put_code(&self, code: AuthorizationCode, now: i64) -> Result<(), StoreError> {
        self.mutate(now, |s| {
            s.codes.insert(code.code.clone(), code);
        })
    }

    /// Single-use redemption: the first call returns the code, every later
    /// one fails.
    pub fn redeem_code(
        &self,
        code: &str,
        now: i64,
    ) -> Result<Result<AuthorizationCode, CodeRedemption>, StoreError> {
        let mut state = self.state.lock();
        if state.consumed.contains_key(code) {
            return Ok(Err(CodeRedemption::AlreadyUsed));
        }
        let Some(record) = state.codes.remove(code) else {
            return Ok(Err(CodeRedemption::Unknown));
        };
        state.consumed.insert(record.code.clone(), record.expires_at);
        state.prune(now);
        self.persist(&state)?;
        if now >= record.expires_at {
            return Ok(Err(CodeRedemption::Expired));
        }
        Ok(Ok(record))
    }

    pub fn put_refresh(&self, record: RefreshTokenRecord, now: i64) -> Result<(), StoreError> {
        self.mutate(now, |s| {
            s.refresh.insert(record.handle.clone(), record);
        })
    }

    pub fn refresh_record(&self, handle: &str) -> Option<RefreshTokenRecord> {
        self.state.lock().refresh.get(handle).cloned()
    }

    /// Checks that `handle` is live and bound to `client_id`.
    pub fn check_refresh(
        &self,
        handle: &str,
        client_id: &str,
        now: i64,
    ) -> Result<RefreshTokenRecord, RefreshRejection> {
        let state = self.state.lock();
        let record = state.refresh.get(handle).ok_or(RefreshRejection::Unknown)?;
        if record.client_id != client_id {
            Err(RefreshRejection::WrongClient)
        } else if record.revoked {
            Err(RefreshRejection::Revoked)
        } else if now >= record.expires_at {
            Err(RefreshRejection::Expired)
        } else {
            Ok(record.clone())
        }
    }

    /// Revokes `old` and stores `replacement` in one step, provided `old`
    /// is still live and bound to the replacement's client.
    pub fn rotate_refresh(
        &self,
        old: &str,
        replacement: RefreshTokenRecord,
        now: i64,
    ) -> Result<Result<(), RefreshRejection>, StoreError> {
        let mut state = self.state.lock();
        let Some(record) = state.refresh.get_mut(old) else {
            return Ok(Err(RefreshRejection::Unknown));
        };
        if record.client_id != replacement.client_id {
            return Ok(Err(RefreshRejection::WrongClient));
        }
        if record.revoked {
            return Ok(Err(RefreshRejection::Revoked));
        }
        if now >= record.expires_at {
            return Ok(Err(RefreshRejection::Expired));
        }
        record.revoked = true;
        state.refresh.insert(replacement.handle.clone(), replacement);
        state.prune(now);
        self.persist(&state)?;
        Ok(Ok(()))
    }

    pub fn live_refresh_handles(&self, client_id: &str, subject: &str, now: i64) -> Vec<String> {
        self.state
            .lock()
            .refresh
            .values()
            .filter(|r| r.client_id == client_id && r.subject == subject && r.is_live(now))
            .map(|r| r.handle.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Barrier};

    fn code(c: &str, expires_at: i64) -> AuthorizationCode {
        AuthorizationCode {
            code: c.into(),
            client_id: "client".into(),
            redirect_uri: "https://client.test/cb".into(),
            username: "alice".into(),
            scopes: vec![],
            auth_time: 0,
            expires_at,
        }
    }

    fn refresh(handle: &str) -> RefreshTokenRecord {
        RefreshTokenRecord {
            handle: handle.into(),
            client_id: "client".into(),
            subject: "sub".into(),
            username: Some("alice".into()),
            granted_scopes: vec![],
            auth_time: Some(0),
            issued_at: 0,
            expires_at: 100,
            revoked: false,
        }
    }

    #[test]
    fn codes_are_single_use() {
        let store = GrantStore::in_memory();
        store.put_code(code("c1", 60), 0).unwrap();
        assert!(store.redeem_code("c1", 10).unwrap().is_ok());
        assert_eq!(
            store.redeem_code("c1", 11).unwrap(),
            Err(CodeRedemption::AlreadyUsed)
        );
        assert_eq!(
            store.redeem_code("nope", 11).unwrap(),
            Err(CodeRedemption::Unknown)
        );
        store.put_code(code("c2", 60), 0).unwrap();
        assert_eq!(store.redeem_code("c2", 60).unwrap(), Err(CodeRedemption::Expired));
    }

    #[test]
    fn rotation_revokes_the_old_handle() {
        let store = GrantStore::in_memory();
        store.put_refresh(refresh("a"), 0).unwrap();
        store.rotate_refresh("a", refresh("b"), 1).unwrap().unwrap();
        assert_eq!(
            store.check_refresh("a", "client", 2),
            Err(RefreshRejection::Revoked)
        );
        assert!(store.check_refresh("b", "client", 2).is_ok());
        assert_eq!(
            store.check_refresh("b", "other", 2),
            Err(RefreshRejection::WrongClient)
        );
        assert_eq!(
            store.check_refresh("b", "client", 100),
            Err(RefreshRejection::Expired)
        );
        assert_eq!(
            store.live_refresh_handles("client", "sub", 2),
            vec!["b".to_string()]
        );
        assert_eq!(
            store.rotate_refresh("a", refresh("c"), 3).unwrap(),
            Err(RefreshRejection::Revoked)
        );
    }

    #[test]
    fn concurrent_rotation_has_one_winner() {
        let store = Arc::new(GrantStore::in_memory());
        store.put_refresh(refresh("root"), 0).unwrap();
        let n = 16;
        let barrier = Arc::new(Barrier::new(n));
        let handles: Vec<_> = (0..n)
            .map(|i| {
                let (store, barrier) = (store.clone(), barrier.clone());
                std::thread::spawn(move || {
                    barrier.wait();
                    store
                        .rotate_refresh("root", refresh(&format!("r{i}")), 1)
                        .unwrap()
                        .is_ok()
                })
            })
            .collect();
        let wins = handles
            .into_iter()
            .map(|h| h.join().unwrap())
            .filter(|w| *w)
            .count();
        assert_eq!(wins, 1);
        assert_eq!(store.live_refresh_handles("client", "sub", 1).len(), 1);
    }

    #[test]
    fn file_store_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grants.json");
        {
            let store = GrantStore::open(&path).unwrap();
            store.put_refresh(refresh("a"), 0).unwrap();
            store.put_code(code("c", 60), 0).unwrap();
            store.redeem_code("c", 1).unwrap().unwrap();
        }
        let store = GrantStore::open(&path).unwrap();
        assert!(store.check_refresh("a", "client", 1).is_ok());
        assert_eq!(
            store.redeem_code("c", 2).unwrap(),
            Err(CodeRedemption::AlreadyUsed)
        );
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(GrantStore::open(&path), Err(StoreError::Corrupt { .. })));
    }
}
