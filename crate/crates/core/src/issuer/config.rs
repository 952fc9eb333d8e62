use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use argon2::password_hash::{PasswordHash, PasswordHasher, PasswordVerifier, SaltString};
use argon2::Argon2;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::authz::{parse_scope, Capability, GroupName};
use crate::token::{is_acceptable_issuer_url, KeyPair};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrantType {
    AuthorizationCode,
    ClientCredentials,
    RefreshToken,
    TokenExchange,
}

impl GrantType {
    pub const ALL: [GrantType; 4] = [
        GrantType::AuthorizationCode,
        GrantType::ClientCredentials,
        GrantType::RefreshToken,
        GrantType::TokenExchange,
    ];

    /// The `grant_type` value used on the wire.
    pub fn wire_name(self) -> &'static str {
        match self {
            GrantType::AuthorizationCode => "authorization_code",
            GrantType::ClientCredentials => "client_credentials",
            GrantType::RefreshToken => "refresh_token",
            GrantType::TokenExchange => "urn:ietf:params:oauth:grant-type:token-exchange",
        }
    }

    pub fn from_wire(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.wire_name() == name)
    }
}

/// A secret that stays out of `Debug` output.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Secret(String);

impl Secret {
    pub fn new(value: impl Into<String>) -> Self {
        Self(value.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientRegistration {
    pub client_id: String,
    pub client_secret: Secret,
    pub allowed_grants: BTreeSet<GrantType>,
    pub allowed_scopes: Vec<Capability>,
    pub redirect_uris: Vec<String>,
    pub default_audiences: Vec<String>,
}

impl ClientRegistration {
    pub fn allows(&self, grant: GrantType) -> bool {
        self.allowed_grants.contains(&grant)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub username: String,
    /// PHC-format argon2 hash.
    pub password_hash: String,
    pub subject: String,
    pub groups: Vec<GroupName>,
    pub assurance: Vec<String>,
    pub acr: Option<String>,
    pub name: Option<String>,
    pub email: Option<String>,
}

impl UserRecord {
    pub fn verify_password(&self, password: &str) -> bool {
        PasswordHash::new(&self.password_hash)
            .map(|h| Argon2::default().verify_password(password.as_bytes(), &h).is_ok())
            .unwrap_or(false)
    }
}

pub fn hash_password<R: RngCore + CryptoRng>(password: &str, rng: &mut R) -> String {
    let salt = SaltString::generate(rng);
    Argon2::default()
        .hash_password(password.as_bytes(), &salt)
        .expect("argon2 with default parameters cannot fail")
        .to_string()
}

/// The stable subject for `username` at `issuer`: a name-based UUID.
pub fn derive_subject(issuer: &str, username: &str) -> String {
    let name = format!("{}#{username}", issuer.trim_end_matches('/'));
    Uuid::new_v5(&Uuid::NAMESPACE_URL, name.as_bytes()).to_string()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lifetimes {
    pub access_token_secs: i64,
    pub id_token_secs: i64,
    pub refresh_token_secs: i64,
    pub code_secs: i64,
}

impl Default for Lifetimes {
    fn default() -> Self {
        Self {
            access_token_secs: 1200,
            id_token_secs: 600,
            refresh_token_secs: 12 * 60 * 60,
            code_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub client_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_secret: Option<Secret>,
    /// Environment variable holding the secret, preferred over inline values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_secret_env: Option<String>,
    pub allowed_grants: Vec<GrantType>,
    #[serde(default)]
    pub allowed_scopes: Vec<String>,
    #[serde(default)]
    pub redirect_uris: Vec<String>,
    #[serde(default)]
    pub default_audiences: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserConfig {
    pub username: String,
    /// Plain password, hashed at load time. Test deployments only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password: Option<Secret>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub password_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[serde(default)]
    pub groups: Vec<String>,
    #[serde(default)]
    pub assurance: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub email: Option<String>,
}

/// Issuer configuration file (TOML).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssuerConfig {
    /// External base URL; also the `iss` of every token.
    pub issuer: String,
    /// PKCS#8 PEM files. The first signs; the rest stay published.
    #[serde(default)]
    pub signing_keys: Vec<PathBuf>,
    #[serde(default)]
    pub lifetimes: Lifetimes,
    /// Audiences a token-exchange request may ask for.
    #[serde(default)]
    pub exchange_audiences: Vec<String>,
    /// Grant store snapshot file. In-memory when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_path: Option<PathBuf>,
    #[serde(default)]
    pub clients: Vec<ClientConfig>,
    #[serde(default)]
    pub users: Vec<UserConfig>,
}

impl IssuerConfig {
    pub fn new(issuer: impl Into<String>) -> Self {
        Self {
            issuer: issuer.into(),
            signing_keys: Vec::new(),
            lifetimes: Lifetimes::default(),
            exchange_audiences: Vec::new(),
            store_path: None,
            clients: Vec::new(),
            users: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| invalid(e.to_string()))
    }

    /// Reads a config file. Relative key and store paths resolve against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in config.signing_keys.iter_mut().chain(config.store_path.iter_mut()) {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(config)
    }

    pub fn load_signing_keys(&self) -> Result<Vec<KeyPair>, ConfigError> {
        self.signing_keys
            .iter()
            .map(|path| {
                let pem = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                KeyPair::from_pkcs8_pem(&pem).map_err(|e| invalid(format!("{}: {e}", path.display())))
            })
            .collect()
    }

    pub(crate) fn resolve_clients(&self) -> Result<BTreeMap<String, ClientRegistration>, ConfigError> {
        let mut out = BTreeMap::new();
        for c in &self.clients {
            let secret = match (&c.client_secret_env, &c.client_secret) {
                (Some(var), _) => Secret::new(std::env::var(var).map_err(|_| {
                    invalid(format!(
                        "client {}: environment variable {var} is not set",
                        c.client_id
                    ))
                })?),
                (None, Some(s)) => s.clone(),
                (None, None) => return Err(invalid(format!("client {} has no secret", c.client_id))),
            };
            let allowed_scopes = parse_scope(&c.allowed_scopes.join(" "))
                .map_err(|e| invalid(format!("client {}: {e}", c.client_id)))?;
            for uri in &c.redirect_uris {
                url::Url::parse(uri)
                    .map_err(|_| invalid(format!("client {}: bad redirect URI {uri:?}", c.client_id)))?;
            }
            let reg = ClientRegistration {
                client_id: c.client_id.clone(),
                client_secret: secret,
                allowed_grants: c.allowed_grants.iter().copied().collect(),
                allowed_scopes,
                redirect_uris: c.redirect_uris.clone(),
                default_audiences: c.default_audiences.clone(),
            };
            if out.insert(c.client_id.clone(), reg).is_some() {
                return Err(invalid(format!("duplicate client_id {}", c.client_id)));
            }
        }
        Ok(out)
    }

    pub(crate) fn resolve_users<R: RngCore + CryptoRng>(
        &self,
        rng: &mut R,
    ) -> Result<BTreeMap<String, UserRecord>, ConfigError> {
        let mut out = BTreeMap::new();
        for u in &self.users {
            let password_hash = match (&u.password_hash, &u.password) {
                (Some(h), _) => {
                    PasswordHash::new(h)
                        .map_err(|e| invalid(format!("user {}: bad password hash: {e}", u.username)))?;
                    h.clone()
                }
                (None, Some(p)) => hash_password(p.expose(), rng),
                (None, None) => return Err(invalid(format!("user {} has no password", u.username))),
            };
            let groups = u
                .groups
                .iter()
                .map(|g| GroupName::parse(g))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| invalid(format!("user {}: {e}", u.username)))?;
            for a in &u.assurance {
                url::Url::parse(a)
                    .map_err(|_| invalid(format!("user {}: assurance {a:?} is not a URI", u.username)))?;
            }
            let record = UserRecord {
                username: u.username.clone(),
                password_hash,
                subject: u
                    .subject
                    .clone()
                    .unwrap_or_else(|| derive_subject(&self.issuer, &u.username)),
                groups,
                assurance: u.assurance.clone(),
                acr: u.acr.clone(),
                name: u.name.clone(),
                email: u.email.clone(),
            };
            if out.insert(u.username.clone(), record).is_some() {
                return Err(invalid(format!("duplicate username {}", u.username)));
            }
        }
        Ok(out)
    }

    pub(crate) fn check(&self) -> Result<(), ConfigError> {
        if !is_acceptable_issuer_url(&self.issuer) {
            return Err(invalid(format!(
                "issuer {:?} must be an absolute https URL",
                self.issuer
            )));
        }
        let l = &self.lifetimes;
        if [
            l.access_token_secs,
            l.id_token_secs,
            l.refresh_token_secs,
            l.code_secs,
        ]
        .iter()
        .any(|&s| s <= 0)
        {
            return Err(invalid("lifetimes must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const SAMPLE: &str = r#"
        issuer = "https://issuer.test"
        exchange_audiences = ["https://fts.test"]

        [lifetimes]
        access_token_secs = 300

        [[clients]]
        client_id = "rucio"
        client_secret = "s3cret"
        allowed_grants = ["authorization_code", "refresh_token", "token_exchange"]
        allowed_scopes = ["storage.read:/", "storage.write:/data"]
        redirect_uris = ["https://rucio.test/cb"]
        default_audiences = ["https://rucio.test"]

        [[users]]
        username = "alice"
        password = "wonderland"
        groups = ["/wlcg"]
    "#;

    #[test]
    fn parse_and_resolve() {
        let config = IssuerConfig::from_toml(SAMPLE).unwrap();
        config.check().unwrap();
        assert_eq!(config.lifetimes.access_token_secs, 300);
        assert_eq!(config.lifetimes.id_token_secs, 600);
        let clients = config.resolve_clients().unwrap();
        assert_eq!(clients["rucio"].allowed_scopes.len(), 2);
        assert!(clients["rucio"].allows(GrantType::TokenExchange));
        assert!(!clients["rucio"].allows(GrantType::ClientCredentials));
        let users = config.resolve_users(&mut ChaCha20Rng::seed_from_u64(0)).unwrap();
        let alice = &users["alice"];
        assert!(alice.password_hash.starts_with("$argon2"));
        assert!(alice.verify_password("wonderland"));
        assert!(!alice.verify_password("looking-glass"));
        assert_eq!(alice.subject, derive_subject("https://issuer.test/", "alice"));
    }

    #[test]
    fn rejects_bad_config() {
        let unknown_grant = SAMPLE.replace("\"token_exchange\"", "\"implicit\"");
        assert!(IssuerConfig::from_toml(&unknown_grant).is_err());
        let bad_scope = SAMPLE.replace("storage.write:/data", "storage.write:data");
        assert!(IssuerConfig::from_toml(&bad_scope)
            .unwrap()
            .resolve_clients()
            .is_err());
        let mut dup = IssuerConfig::from_toml(SAMPLE).unwrap();
        dup.clients.push(dup.clients[0].clone());
        assert!(dup.resolve_clients().is_err());
        let mut http = IssuerConfig::from_toml(SAMPLE).unwrap();
        http.issuer = "http://issuer.test".into();
        assert!(http.check().is_err());
    }

    #[test]
    fn secret_debug_is_redacted() {
        assert_eq!(format!("{:?}", Secret::new("hunter2")), "Secret(***)");
    }

    #[test]
    fn grant_wire_names_round_trip() {
        for g in GrantType::ALL {
            assert_eq!(GrantType::from_wire(g.wire_name()), Some(g));
        }
        assert_eq!(GrantType::from_wire("password"), None);
    }
}
