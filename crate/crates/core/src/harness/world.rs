//! The actors a scenario runs against: one issuer, several guarded storage
//! endpoints and OAuth clients, all wired through a [`Network`].

use std::collections::BTreeMap;
use std::sync::Arc;

use http::header::{AUTHORIZATION, LOCATION};
use http::StatusCode;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::StepContext;
use crate::authz::{AuthzPolicy, ResourcePath};
use crate::clock::{Clock, VirtualClock};
use crate::guard::{Guard, GuardConfig, MemoryBackend, StorageBackend, StorageService, STORAGE_PREFIX};
use crate::http::{
    basic_authorization, encode_form, form_post, HttpFetcher, HttpResponse, Loopback, Service, TransportError,
};
use crate::issuer::{GrantStore, Issuer, IssuerConfig, OAuthErrorBody, TokenResponse};
use crate::token::{Algorithm, KeyPair};
use crate::trust::TrustStore;

/// Seed for key material and issuer randomness.
pub const SEED: u64 = 0x00c0_ffee;
const START: i64 = 1_700_000_000;

/// A transport on which named services can be mounted.
pub trait Network: HttpFetcher {
    /// Reserves a base URL for the service called `name`.
    fn endpoint(&self, name: &str) -> Result<String, TransportError>;
    fn mount(&self, base_url: &str, service: Arc<dyn Service>) -> Result<(), TransportError>;
}

impl Network for Loopback {
    fn endpoint(&self, name: &str) -> Result<String, TransportError> {
        Ok(format!("https://{name}.test"))
    }

    fn mount(&self, base_url: &str, service: Arc<dyn Service>) -> Result<(), TransportError> {
        Loopback::mount(self, base_url, service)
    }
}

struct Dyn(Arc<dyn Network>);

impl HttpFetcher for Dyn {
    fn fetch(&self, request: crate::http::HttpRequest) -> Result<HttpResponse, TransportError> {
        self.0.fetch(request)
    }
}

/// A guarded storage endpoint with its own trust store.
pub struct ResourceNode {
    pub name: String,
    pub url: String,
    pub trust: Arc<TrustStore>,
    pub backend: Arc<MemoryBackend>,
}

pub struct World {
    pub clock: VirtualClock,
    pub network: Arc<dyn Network>,
    pub issuer: Arc<Issuer>,
    resources: BTreeMap<String, ResourceNode>,
    urls: BTreeMap<String, String>,
}

const RESOURCES: [&str; 3] = ["storage", "source", "dest"];

fn issuer_config(urls: &BTreeMap<String, String>) -> IssuerConfig {
    let u = |n: &str| urls[n].as_str();
    IssuerConfig::from_toml(&format!(
        r#"
        issuer = "{issuer}"
        exchange_audiences = ["{fts}", "{source}", "{dest}"]

        [[clients]]
        client_id = "portal"
        client_secret = "portal-secret"
        allowed_grants = ["authorization_code", "refresh_token"]
        allowed_scopes = ["storage.read:/", "storage.write:/home", "storage.create:/home"]
        redirect_uris = ["{portal}/callback"]
        default_audiences = ["{storage}"]

        [[clients]]
        client_id = "rucio"
        client_secret = "rucio-secret"
        allowed_grants = ["authorization_code", "refresh_token", "client_credentials", "token_exchange"]
        allowed_scopes = ["storage.read:/data", "storage.write:/data", "storage.create:/data"]
        redirect_uris = ["{rucio}/callback"]
        default_audiences = ["{rucio}"]

        [[clients]]
        client_id = "fts"
        client_secret = "fts-secret"
        allowed_grants = ["token_exchange"]
        allowed_scopes = ["storage.read:/data", "storage.write:/data"]

        [[users]]
        username = "alice"
        password = "wonderland"
        groups = ["/wlcg", "/wlcg/ops"]
        assurance = ["https://refeds.org/assurance/IAP/medium"]
        acr = "https://refeds.org/profile/mfa"
        name = "Alice Liddell"
        email = "alice@wlcg.test"
        "#,
        issuer = u("issuer"),
        fts = u("fts"),
        source = u("source"),
        dest = u("dest"),
        storage = u("storage"),
        portal = u("portal"),
        rucio = u("rucio"),
    ))
    .expect("harness issuer configuration is valid")
}

impl World {
    /// A world on a fresh in-process network.
    pub fn loopback() -> Result<Self, String> {
        Self::new(Arc::new(Loopback::new()))
    }

    /// Builds and mounts every actor on `network`. Resources start with
    /// empty trust stores and discover the issuer on first use.
    pub fn new(network: Arc<dyn Network>) -> Result<Self, String> {
        let clock = VirtualClock::new(START);
        let mut urls = BTreeMap::new();
        for name in ["issuer", "portal", "rucio", "fts", "storage", "source", "dest"] {
            urls.insert(
                name.to_string(),
                network.endpoint(name).map_err(|e| e.to_string())?,
            );
        }
        let mut key_rng = ChaCha20Rng::seed_from_u64(SEED);
        let key = KeyPair::generate(Algorithm::ES256, &mut key_rng).map_err(|e| e.to_string())?;
        let issuer = Issuer::new(
            &issuer_config(&urls),
            vec![key],
            GrantStore::in_memory(),
            clock.shared(),
            ChaCha20Rng::seed_from_u64(SEED.wrapping_add(1)),
        )
        .map_err(|e| e.to_string())?;
        let issuer = Arc::new(issuer);
        network
            .mount(&urls["issuer"], issuer.clone())
            .map_err(|e| e.to_string())?;

        let mut resources = BTreeMap::new();
        for name in RESOURCES {
            let url = urls[name].clone();
            let mut config = GuardConfig::new(
                vec![issuer.issuer_url().to_string()],
                vec![url.clone()],
                AuthzPolicy::default(),
            );
            config.allow_http_issuers = issuer.issuer_url().starts_with("http://");
            let trust = Arc::new(TrustStore::new(
                &config.trust_config(),
                Arc::new(Dyn(network.clone())),
                clock.shared(),
            ));
            let guard = Guard::new(config, trust.clone(), clock.shared()).map_err(|e| e.to_string())?;
            let backend = Arc::new(MemoryBackend::new());
            let service = StorageService::new(guard, backend.clone());
            network
                .mount(&url, Arc::new(service))
                .map_err(|e| e.to_string())?;
            resources.insert(
                name.to_string(),
                ResourceNode {
                    name: name.to_string(),
                    url,
                    trust,
                    backend,
                },
            );
        }
        Ok(Self {
            clock,
            network,
            issuer,
            resources,
            urls,
        })
    }

    pub fn url(&self, actor: &str) -> &str {
        &self.urls[actor]
    }

    pub fn resource(&self, name: &str) -> &ResourceNode {
        &self.resources[name]
    }

    /// Trust-anchor network fetches made by each resource so far.
    pub fn fetch_counts(&self) -> BTreeMap<String, u64> {
        self.resources
            .iter()
            .map(|(n, r)| (n.clone(), r.trust.fetch_count()))
            .collect()
    }

    pub fn now(&self) -> i64 {
        self.clock.now()
    }

    /// Places a file directly in a resource's backend.
    pub fn seed_file(&self, resource: &str, path: &str, data: &[u8]) -> Result<(), String> {
        let path = ResourcePath::parse(path).map_err(|e| e.to_string())?;
        self.resource(resource)
            .backend
            .write(&path, data.to_vec())
            .map_err(|e| e.to_string())
    }

    /// Sends a storage request and records it. Returns status and body.
    pub fn storage_call(
        &self,
        ctx: &mut StepContext,
        resource: &str,
        method: &str,
        path: &str,
        token: Option<&str>,
        body: &[u8],
    ) -> Result<(u16, Vec<u8>), String> {
        let url = format!("{}{STORAGE_PREFIX}{path}", self.url(resource));
        let mut builder = http::Request::builder().method(method).uri(&url);
        if let Some(t) = token {
            builder = builder.header(AUTHORIZATION, format!("Bearer {t}"));
        }
        let request = builder.body(body.to_vec()).map_err(|e| e.to_string())?;
        let resp = self.network.fetch(request).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let summary = if resp.status().is_success() {
            format!("{} bytes", resp.body().len())
        } else {
            summarize_error(resp.body())
        };
        let auth = if token.is_some() { " (bearer)" } else { "" };
        ctx.exchange(format!("{method} {url}{auth}"), status, summary);
        Ok((status, resp.into_body()))
    }
}

fn summarize_error(body: &[u8]) -> String {
    match serde_json::from_slice::<OAuthErrorBody>(body) {
        Ok(e) => match e.error_description {
            Some(d) => format!("{}: {d}", e.error),
            None => e.error,
        },
        Err(_) => String::from_utf8_lossy(body).chars().take(120).collect(),
    }
}

/// A refused token request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OAuthFailure {
    pub status: u16,
    pub body: OAuthErrorBody,
}

impl std::fmt::Display for OAuthFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}",
            self.status,
            summarize_error(&serde_json::to_vec(&self.body).unwrap_or_default())
        )
    }
}

/// Talks to the issuer over the network as a registered client.
pub struct OAuthClient<'w> {
    world: &'w World,
    pub client_id: String,
    secret: String,
}

impl<'w> OAuthClient<'w> {
    pub fn new(world: &'w World, client_id: &str, secret: &str) -> Self {
        Self {
            world,
            client_id: client_id.to_string(),
            secret: secret.to_string(),
        }
    }

    pub fn redirect_uri(&self) -> String {
        format!("{}/callback", self.world.url(&self.client_id))
    }

    /// Stub login at the authorization endpoint; returns the code.
    pub fn login(
        &self,
        ctx: &mut StepContext,
        username: &str,
        password: &str,
        scope: &str,
    ) -> Result<String, String> {
        let url = format!("{}/authorize", self.world.issuer.issuer_url());
        let redirect_uri = self.redirect_uri();
        let form = encode_form([
            ("client_id", self.client_id.as_str()),
            ("redirect_uri", redirect_uri.as_str()),
            ("scope", scope),
            ("state", "xyz"),
            ("username", username),
            ("password", password),
        ]);
        let request = form_post(&url, form).map_err(|e| e.to_string())?;
        let resp = self.world.network.fetch(request).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let location = resp
            .headers()
            .get(LOCATION)
            .and_then(|v| v.to_str().ok())
            .map(str::to_string);
        ctx.exchange(
            format!(
                "POST {url} client_id={} username={username} scope={scope:?}",
                self.client_id
            ),
            status,
            match &location {
                Some(_) => "redirect with code".to_string(),
                None => summarize_error(resp.body()),
            },
        );
        ctx.check(
            "login redirects to the client",
            resp.status() == StatusCode::FOUND,
            status,
        );
        let location = location.ok_or("no redirect location")?;
        let target = url::Url::parse(&location).map_err(|e| e.to_string())?;
        ctx.check(
            "redirect targets the registered callback",
            location.starts_with(&redirect_uri),
            "",
        );
        let params: BTreeMap<String, String> = target.query_pairs().into_owned().collect();
        ctx.check(
            "state is echoed",
            params.get("state").map(String::as_str) == Some("xyz"),
            "",
        );
        params
            .get("code")
            .cloned()
            .ok_or_else(|| "redirect carries no code".to_string())
    }

    /// Sends a token request without recording it.
    pub fn send(&self, params: &[(&str, &str)]) -> Result<TokenResponse, OAuthFailure> {
        let url = format!("{}/token", self.world.issuer.issuer_url());
        let transport = |reason: String| OAuthFailure {
            status: 0,
            body: OAuthErrorBody {
                error: "transport_error".into(),
                error_description: Some(reason),
                cause: None,
            },
        };
        let mut request =
            form_post(&url, encode_form(params.iter().copied())).map_err(|e| transport(e.to_string()))?;
        request.headers_mut().insert(
            AUTHORIZATION,
            basic_authorization(&self.client_id, &self.secret)
                .parse()
                .expect("valid header value"),
        );
        let resp = self
            .world
            .network
            .fetch(request)
            .map_err(|e| transport(e.to_string()))?;
        if resp.status().is_success() {
            serde_json::from_slice::<TokenResponse>(resp.body()).map_err(|e| transport(e.to_string()))
        } else {
            Err(OAuthFailure {
                status: resp.status().as_u16(),
                body: serde_json::from_slice(resp.body()).map_err(|e| transport(e.to_string()))?,
            })
        }
    }

    fn token_request(
        &self,
        ctx: &mut StepContext,
        label: &str,
        params: &[(&str, &str)],
    ) -> Result<TokenResponse, OAuthFailure> {
        let url = format!("{}/token", self.world.issuer.issuer_url());
        let result = self.send(params);
        if let Err(f) = &result {
            ctx.set_cause(f.body.cause.clone());
        }
        let status = match &result {
            Ok(_) => 200,
            Err(f) => f.status,
        };
        let summary = match &result {
            Ok(t) => format!(
                "{} expires_in={} scope={:?}{}{}",
                t.token_type,
                t.expires_in,
                t.scope.as_deref().unwrap_or(""),
                if t.id_token.is_some() { " +id_token" } else { "" },
                if t.refresh_token.is_some() {
                    " +refresh_token"
                } else {
                    ""
                },
            ),
            Err(f) => summarize_error(&serde_json::to_vec(&f.body).unwrap_or_default()),
        };
        ctx.exchange(
            format!("POST {url} client_id={} {label}", self.client_id),
            status,
            summary,
        );
        if let Ok(t) = &result {
            ctx.token(&format!("{label} access token"), &t.access_token);
            if let Some(id) = &t.id_token {
                ctx.token(&format!("{label} id token"), id);
            }
        }
        result
    }

    pub fn exchange_code(&self, ctx: &mut StepContext, code: &str) -> Result<TokenResponse, OAuthFailure> {
        let redirect_uri = self.redirect_uri();
        self.token_request(
            ctx,
            "authorization_code",
            &[
                ("grant_type", "authorization_code"),
                ("code", code),
                ("redirect_uri", &redirect_uri),
            ],
        )
    }

    pub fn client_credentials(
        &self,
        ctx: &mut StepContext,
        scope: &str,
    ) -> Result<TokenResponse, OAuthFailure> {
        self.token_request(
            ctx,
            "client_credentials",
            &[("grant_type", "client_credentials"), ("scope", scope)],
        )
    }

    pub fn refresh(&self, ctx: &mut StepContext, handle: &str) -> Result<TokenResponse, OAuthFailure> {
        self.token_request(
            ctx,
            "refresh_token",
            &[("grant_type", "refresh_token"), ("refresh_token", handle)],
        )
    }

    pub fn exchange(
        &self,
        ctx: &mut StepContext,
        subject_token: &str,
        audience: &str,
        scope: &str,
    ) -> Result<TokenResponse, OAuthFailure> {
        self.token_request(
            ctx,
            "token_exchange",
            &[
                ("grant_type", crate::issuer::GrantType::TokenExchange.wire_name()),
                ("subject_token", subject_token),
                ("subject_token_type", crate::issuer::ACCESS_TOKEN_TYPE),
                ("audience", audience),
                ("scope", scope),
            ],
        )
    }
}
