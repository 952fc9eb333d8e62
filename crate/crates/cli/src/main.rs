//! `wlcg`: key generation, token minting and inspection, validation against
//! a live issuer, serving the issuer and resource, and running scenarios.

use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::rngs::OsRng;
use rand::RngCore;
use serde_json::{json, Map, Value};
use tracing_subscriber::filter::LevelFilter;
use wlcg_core::clock::{Clock, SystemClock};
use wlcg_core::guard::{Guard, GuardConfig, GuardOutcome, GuardRequest, GuardStatus, ResourceConfig};
use wlcg_core::harness::{run_scenario, World, SCENARIOS};
use wlcg_core::issuer::{ConfigError, Issuer, IssuerConfig, Lifetimes};
use wlcg_core::token::{
    check_profile_shape, decode, mint_conformant, same_issuer, verify_signature, Algorithm, ClaimSet,
    CompactToken, Header, JwkSet, KeyPair, TokenError, TokenKind, PROFILE_TABLE, STANDARD_OIDC_ROW,
};
use wlcg_core::trust::TrustConfig;
use wlcg_server::{remote_trust_store, resource_service, serve_forever, SocketNetwork};

#[derive(Parser)]
#[command(name = "wlcg", version, about = "WLCG JWT profile tooling")]
struct Cli {
    /// Machine-readable JSON output.
    #[arg(long, global = true)]
    json: bool,
    /// Log requests and key events to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Access,
    Id,
}

impl From<Kind> for TokenKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Access => TokenKind::AccessToken,
            Kind::Id => TokenKind::IdToken,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a signing key pair and print its kid.
    Keygen {
        /// Private key file (PKCS#8 PEM). The public JWK set goes to
        /// `<out>.jwks.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "ES256")]
        alg: String,
    },
    /// Sign a profile-conformant token and print it.
    Mint {
        #[arg(long)]
        key: PathBuf,
        #[arg(long, value_enum, default_value = "access")]
        kind: Kind,
        #[arg(long, env = "WLCG_ISSUER")]
        issuer: String,
        #[arg(long)]
        sub: String,
        #[arg(long, required = true)]
        aud: Vec<String>,
        #[arg(long)]
        scope: Option<String>,
        #[arg(long)]
        group: Vec<String>,
        /// Seconds. Defaults to the issuer default for the kind.
        #[arg(long)]
        lifetime: Option<i64>,
    },
    /// List a token's header, claims and profile conformance.
    Inspect {
        /// Token, `-` for stdin. Falls back to WLCG_TOKEN, then stdin.
        #[arg(env = "WLCG_TOKEN", hide_env_values = true)]
        token: Option<String>,
        #[arg(long, conflicts_with = "token")]
        file: Option<PathBuf>,
        /// Check the signature against keys published by --issuer.
        #[arg(long, requires = "issuer")]
        verify: bool,
        #[arg(long, env = "WLCG_ISSUER")]
        issuer: Option<String>,
    },
    /// Run the resource-side checks for an access token against a live issuer.
    Validate {
        #[arg(env = "WLCG_TOKEN", hide_env_values = true)]
        token: Option<String>,
        #[arg(long, conflicts_with = "token")]
        file: Option<PathBuf>,
        #[arg(long, env = "WLCG_ISSUER")]
        issuer: String,
        #[arg(long, required = true)]
        audience: Vec<String>,
        /// Also authorize this request, e.g. `--method PUT --path /data/f`.
        #[arg(long, requires = "path")]
        method: Option<String>,
        #[arg(long, requires = "method")]
        path: Option<String>,
    },
    /// Serve the token issuer.
    ServeIssuer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
    },
    /// Serve the token-protected storage resource.
    ServeResource {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8081")]
        listen: String,
    },
    /// Run a scenario and write its transcript.
    RunScenario {
        #[arg(long)]
        name: String,
        /// Transcript file (JSON lines). Stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run actors over local sockets instead of in process.
        #[arg(long)]
        sockets: bool,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_max_level(if cli.verbose { LevelFilter::DEBUG } else { LevelFilter::WARN })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wlcg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let json = cli.json;
    match cli.command {
        Command::Keygen { out, alg } => keygen(&out, &alg, json),
        Command::Mint {
            key,
            kind,
            issuer,
            sub,
            aud,
            scope,
            group,
            lifetime,
        } => {
            let key = load_key(&key)?;
            let kind = TokenKind::from(kind);
            let defaults = Lifetimes::default();
            let lifetime = lifetime.unwrap_or(match kind {
                TokenKind::IdToken => defaults.id_token_secs,
                _ => defaults.access_token_secs,
            });
            let mut claims = ClaimSet::new(sub, issuer, aud, SystemClock.now(), lifetime, random_jti());
            claims.scope = scope;
            claims.wlcg_groups = (!group.is_empty()).then_some(group);
            let token = mint_conformant(&claims, kind, &key)?;
            println!("{token}");
            Ok(())
        }
        Command::Inspect {
            token,
            file,
            verify,
            issuer,
        } => inspect(
            &read_token(token, file)?,
            verify.then_some(issuer).flatten(),
            json,
        ),
        Command::Validate {
            token,
            file,
            issuer,
            audience,
            method,
            path,
        } => validate(
            &read_token(token, file)?,
            issuer,
            audience,
            method.zip(path),
            json,
        ),
        Command::ServeIssuer { config, listen } => {
            let config = IssuerConfig::load(&config)?;
            let issuer = Issuer::from_config(&config, SystemClock::shared())?;
            let listener = bind(&listen)?;
            eprintln!("issuer {} listening on {listen}", issuer.issuer_url());
            serve_forever(listener, Arc::new(issuer)).map_err(|e| CliError::Failed(e.to_string()))
        }
        Command::ServeResource { config, listen } => {
            let config = ResourceConfig::load(&config)?;
            let service = resource_service(&config, SystemClock::shared())?;
            let listener = bind(&listen)?;
            eprintln!("resource listening on {listen}");
            serve_forever(listener, Arc::new(service)).map_err(|e| CliError::Failed(e.to_string()))
        }
        Command::RunScenario { name, out, sockets } => scenario(&name, out.as_deref(), sockets, json),
    }
}

fn bind(addr: &str) -> Result<TcpListener, CliError> {
    TcpListener::bind(addr).map_err(|source| CliError::Bind {
        addr: addr.to_string(),
        source,
    })
}

fn random_jti() -> String {
    let mut bytes = [0u8; 16];
    OsRng.fill_bytes(&mut bytes);
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn load_key(path: &Path) -> Result<KeyPair, CliError> {
    let pem = std::fs::read_to_string(path).map_err(io_error(path))?;
    Ok(KeyPair::from_pkcs8_pem(&pem)?)
}

fn create_new(path: &Path, private: bool) -> Result<std::fs::File, CliError> {
    let mut options = OpenOptions::new();
    options.write(true).create_new(true);
    #[cfg(unix)]
    if private {
        use std::os::unix::fs::OpenOptionsExt;
        options.mode(0o600);
    }
    #[cfg(not(unix))]
    let _ = private;
    options.open(path).map_err(io_error(path))
}

fn jwks_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".jwks.json");
    PathBuf::from(name)
}

fn keygen(out: &Path, alg: &str, json: bool) -> Result<(), CliError> {
    let alg = Algorithm::from_name(alg)?;
    let key = KeyPair::generate(alg, &mut OsRng)?;
    let public = jwks_path(out);
    let jwks = serde_json::to_string_pretty(&JwkSet::from_keys([&key.public_key()]))
        .map_err(|e| CliError::Failed(e.to_string()))?;
    create_new(out, true)?
        .write_all(key.to_pkcs8_pem()?.as_bytes())
        .map_err(io_error(out))?;
    create_new(&public, false)?
        .write_all(jwks.as_bytes())
        .map_err(io_error(&public))?;
    if json {
        let report = json!({
            "kid": key.kid(),
            "alg": alg.as_str(),
            "private_key": out,
            "public_jwks": public,
        });
        println!("{report}");
    } else {
        println!("{}", key.kid());
    }
    Ok(())
}

fn read_token(arg: Option<String>, file: Option<PathBuf>) -> Result<String, CliError> {
    let raw = match (arg, file) {
        (_, Some(path)) => std::fs::read_to_string(&path).map_err(io_error(&path))?,
        (Some(t), None) if t != "-" => t,
        _ => {
            let mut s = String::new();
            io::stdin()
                .read_to_string(&mut s)
                .map_err(io_error(Path::new("<stdin>")))?;
            s
        }
    };
    Ok(raw.trim().to_string())
}

fn http_allowed(issuer: &str) -> bool {
    issuer.starts_with("http://")
}

fn header_json(h: &Header) -> Value {
    let mut map = h.other.clone();
    map.insert("alg".into(), json!(h.alg));
    map.insert("kid".into(), json!(h.kid));
    if let Some(t) = &h.typ {
        map.insert("typ".into(), json!(t));
    }
    Value::Object(map)
}

fn signature_status(
    token: &CompactToken,
    header: &Header,
    claims: &ClaimSet,
    issuer: &str,
) -> Result<bool, String> {
    let iss = claims.iss.as_deref().unwrap_or_default();
    if !same_issuer(iss, issuer) {
        return Err(format!("token issuer {iss:?} is not {issuer:?}"));
    }
    let mut trust = TrustConfig::new(vec![issuer.to_string()]);
    trust.allow_http = http_allowed(issuer);
    let key = remote_trust_store(&trust, SystemClock::shared())
        .get_key(iss, &header.kid)
        .map_err(|e| e.to_string())?;
    verify_signature(token, &key).map_err(|e| e.to_string())
}

fn inspect(raw: &str, verify_with: Option<String>, json: bool) -> Result<(), CliError> {
    let token = CompactToken::parse(raw)?;
    let (header, claims) = decode(&token)?;
    let kind = header.kind().unwrap_or(TokenKind::AccessToken);
    let shape = check_profile_shape(&claims, kind);
    let (signature, signature_ok) = match &verify_with {
        None => ("UNVERIFIED".to_string(), true),
        Some(issuer) => match signature_status(&token, &header, &claims, issuer) {
            Ok(true) => ("VERIFIED".to_string(), true),
            Ok(false) => ("INVALID: signature does not verify".to_string(), false),
            Err(e) => (format!("INVALID: {e}"), false),
        },
    };
    let values = claims.to_json();

    if json {
        let report = json!({
            "signature": signature,
            "header": header_json(&header),
            "kind": kind,
            "claims": values,
            "shape": shape,
        });
        println!("{report}");
    } else {
        let mut out = String::new();
        out.push_str(&format!("signature: {signature}\n"));
        out.push_str(&format!(
            "header:    alg={} kid={} typ={}\n",
            header.alg,
            header.kid,
            header.typ.as_deref().unwrap_or("-")
        ));
        out.push_str(&format!("kind:      {}\n\n", kind.label()));
        for rule in PROFILE_TABLE {
            let value = if rule.claim == STANDARD_OIDC_ROW {
                render_map(&claims.oidc_standard)
            } else {
                values.get(rule.claim).map(render).unwrap_or_else(|| "-".into())
            };
            let presence = serde_json::to_value(rule.presence(kind)).unwrap_or_default();
            out.push_str(&format!(
                "{:<24} {:<14} {value}\n",
                rule.claim,
                presence.as_str().unwrap_or_default()
            ));
        }
        for (name, value) in &claims.extra {
            out.push_str(&format!("{name:<24} {:<14} {}\n", "unprofiled", render(value)));
        }
        out.push('\n');
        if shape.conformant() {
            out.push_str(&format!("shape: conformant {}\n", kind.label()));
        } else {
            out.push_str(&format!("shape: {} violation(s)\n", shape.violations.len()));
            for v in &shape.violations {
                out.push_str(&format!("  - {v}\n"));
            }
        }
        for w in &shape.warnings {
            out.push_str(&format!("  warning: {w}\n"));
        }
        print!("{out}");
    }
    if signature_ok {
        Ok(())
    } else {
        Err(CliError::Failed(signature))
    }
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(render).collect::<Vec<_>>().join(", "),
        other => other.to_string(),
    }
}

fn render_map(m: &Map<String, Value>) -> String {
    if m.is_empty() {
        return "-".into();
    }
    m.iter()
        .map(|(k, v)| format!("{k}={}", render(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn validate(
    raw: &str,
    issuer: String,
    audiences: Vec<String>,
    request: Option<(String, String)>,
    json: bool,
) -> Result<(), CliError> {
    let mut config = GuardConfig::new(vec![issuer.clone()], audiences, Default::default());
    config.allow_http_issuers = http_allowed(&issuer);
    let trust = remote_trust_store(&config.trust_config(), SystemClock::shared());
    let guard = Guard::new(config, trust, SystemClock::shared())?;
    let authorization = format!("Bearer {raw}");
    let outcome = match &request {
        Some((method, path)) => guard.guard(GuardRequest {
            method,
            path,
            authorization: Some(&authorization),
        }),
        None => match guard.authenticate(Some(&authorization)) {
            Ok(claims) => GuardOutcome {
                status: GuardStatus::Allowed,
                decision: None,
                challenge: None,
                failed_stage: None,
                reason: None,
                claims: Some(claims),
            },
            Err(outcome) => *outcome,
        },
    };
    if json {
        let mut report = serde_json::to_value(&outcome).map_err(|e| CliError::Failed(e.to_string()))?;
        report["claims"] = outcome
            .claims
            .as_ref()
            .map(|c| Value::Object(c.to_json()))
            .unwrap_or(Value::Null);
        println!("{report}");
    } else {
        let status = outcome.status.http_status();
        match (&outcome.status, &outcome.claims) {
            (GuardStatus::Allowed, Some(c)) => println!(
                "valid ({}): sub={} exp={} scope={}",
                status.as_u16(),
                c.sub.as_deref().unwrap_or("-"),
                c.exp.unwrap_or_default(),
                c.scope.as_deref().unwrap_or("-")
            ),
            _ => println!(
                "rejected ({}) at {}: {}",
                status.as_u16(),
                outcome
                    .failed_stage
                    .map(|s| serde_json::to_value(s)
                        .unwrap_or_default()
                        .as_str()
                        .unwrap_or("-")
                        .to_string())
                    .unwrap_or_else(|| "request".into()),
                outcome.reason.as_deref().unwrap_or("no bearer token")
            ),
        }
    }
    if outcome.allowed() {
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "token rejected with {}",
            outcome.status.http_status()
        )))
    }
}

fn scenario(name: &str, out: Option<&Path>, sockets: bool, json: bool) -> Result<(), CliError> {
    if !SCENARIOS.contains(&name) {
        return Err(ConfigError::Invalid(format!(
            "unknown scenario {name:?}; available: {}",
            SCENARIOS.join(", ")
        ))
        .into());
    }
    let world = if sockets {
        World::new(Arc::new(SocketNetwork::new()))
    } else {
        World::loopback()
    }
    .map_err(CliError::Failed)?;
    let outcome = run_scenario(name, &world).expect("name checked against SCENARIOS");
    let (transcript, failure) = match outcome {
        Ok(t) => (t, None),
        Err(f) => (f.transcript.clone(), Some(f)),
    };
    let jsonl = transcript.to_jsonl();
    match out {
        Some(path) => std::fs::write(path, &jsonl).map_err(io_error(path))?,
        None => print!("{jsonl}"),
    }
    let summary = match &failure {
        None => format!("scenario {name}: passed ({} steps)", transcript.steps.len()),
        Some(f) => f.to_string(),
    };
    if json && out.is_some() {
        println!(
            "{}",
            json!({"scenario": name, "passed": failure.is_none(), "steps": transcript.steps.len(), "summary": summary})
        );
    } else {
        eprintln!("{summary}");
    }
    match failure {
        None => Ok(()),
        Some(f) => Err(CliError::Failed(match &f.cause {
            Some(cause) => format!("{f} [cause {cause}]"),
            None => f.to_string(),
        })),
    }
}
