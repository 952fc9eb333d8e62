use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use http::StatusCode;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::Value;

use wlcg_core::authz::{
    authorize, authorize_capability, authorize_groups, AuthzPolicy, Capability, GroupMatching, GroupName,
    ResourceRequest,
};
use wlcg_core::clock::{Clock, VirtualClock};
use wlcg_core::guard::{Guard, GuardConfig, GuardRequest, GuardStatus};
use wlcg_core::http::{json_response, HttpRequest, HttpResponse, TransportError};
use wlcg_core::token::{
    decode, encode_and_sign, verify_signature, Algorithm, ClaimSet, CompactToken, JwkSet, KeyPair, TokenKind,
};
use wlcg_core::trust::{IssuerMetadata, IssuerTrustAnchor, TrustConfig, TrustStore, DEFAULT_TTL_SECS};

const ISSUER: &str = "https://issuer.test";
const AUD: &str = "https://storage.test";
const NOW: i64 = 1_700_000_000;

fn keys() -> &'static [KeyPair; 2] {
    static KEYS: OnceLock<[KeyPair; 2]> = OnceLock::new();
    KEYS.get_or_init(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        [
            KeyPair::generate(Algorithm::ES256, &mut rng).unwrap(),
            KeyPair::generate(Algorithm::RS256, &mut rng).unwrap(),
        ]
    })
}

fn segment() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "b", "aa", "ab", "ba", "bb"]).prop_map(str::to_string)
}

fn path() -> impl Strategy<Value = String> {
    prop::collection::vec(segment(), 0..4).prop_map(|s| format!("/{}", s.join("/")))
}

fn operation() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["storage.read", "storage.write", "storage.create"]).prop_map(str::to_string)
}

fn capability() -> impl Strategy<Value = Capability> {
    (operation(), prop::option::of(path())).prop_map(|(op, p)| match p {
        Some(p) => Capability::parse(&format!("{op}:{p}")).unwrap(),
        None => Capability::parse(&op).unwrap(),
    })
}

fn request() -> impl Strategy<Value = ResourceRequest> {
    (operation(), path()).prop_map(|(op, p)| ResourceRequest::parse(&op, &p).unwrap())
}

fn group() -> impl Strategy<Value = GroupName> {
    prop::collection::vec(segment(), 1..4)
        .prop_map(|s| GroupName::parse(&format!("/{}", s.join("/"))).unwrap())
}

fn text() -> impl Strategy<Value = String> {
    "[ -~]{1,16}"
}

prop_compose! {
    fn claim_set(kind: TokenKind)(
        sub in text(),
        aud in prop::collection::vec("https://[a-z]{1,8}\\.test", 1..4),
        iat in 1_500_000_000i64..1_900_000_000,
        lifetime in 1i64..100_000,
        jti in "[A-Za-z0-9_-]{4,22}",
        nbf_back in prop::option::of(0i64..300),
        acr in prop::option::of("https://[a-z]{1,8}\\.test/acr"),
        groups in prop::option::of(prop::collection::vec(group(), 0..4)),
        scope in prop::option::of(prop::collection::vec(capability(), 0..4)),
        auth_back in prop::option::of(0i64..3600),
        name in prop::option::of(text()),
    ) -> ClaimSet {
        let mut c = ClaimSet::new(sub, ISSUER, aud, iat, lifetime, jti);
        c.nbf = nbf_back.map(|b| iat - b);
        c.acr = acr;
        c.wlcg_groups = groups.map(|g| g.iter().map(ToString::to_string).collect());
        match kind {
            TokenKind::AccessToken => {
                c.scope = scope.map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
            }
            _ => {
                c.auth_time = auth_back.map(|b| iat - b);
                if let Some(n) = name {
                    c.oidc_standard.insert("name".into(), Value::String(n));
                }
            }
        }
        c
    }
}

fn kind() -> impl Strategy<Value = TokenKind> {
    prop_oneof![Just(TokenKind::AccessToken), Just(TokenKind::IdToken)]
}

fn claims_and_kind() -> impl Strategy<Value = (ClaimSet, TokenKind)> {
    kind().prop_flat_map(|k| (claim_set(k), Just(k)))
}

fn verifies(raw: &str, key: &KeyPair) -> bool {
    CompactToken::parse(raw)
        .ok()
        .is_some_and(|t| matches!(verify_signature(&t, &key.public_key()), Ok(true)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_inverts_encode((claims, kind) in claims_and_kind(), rsa in any::<bool>()) {
        let key = &keys()[rsa as usize];
        let token = encode_and_sign(&claims, kind, key).unwrap();
        let (header, back) = decode(&token).unwrap();
        prop_assert_eq!(back, claims);
        prop_assert_eq!(header.kind(), Some(kind));
        prop_assert!(verifies(token.as_str(), key));
    }

    #[test]
    fn single_bit_flip_in_payload_or_signature_fails(
        (claims, kind) in claims_and_kind(),
        rsa in any::<bool>(),
        in_signature in any::<bool>(),
        pos in any::<prop::sample::Index>(),
        bit in 0u8..8,
    ) {
        let key = &keys()[rsa as usize];
        let token = encode_and_sign(&claims, kind, key).unwrap();
        let parts: Vec<&str> = token.as_str().split('.').collect();
        let engine = base64::engine::general_purpose::URL_SAFE_NO_PAD;
        use base64::Engine;
        let target = if in_signature { 2 } else { 1 };
        let mut bytes = engine.decode(parts[target]).unwrap();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        let mut parts: Vec<String> = parts.iter().map(|s| s.to_string()).collect();
        parts[target] = engine.encode(&bytes);
        prop_assert!(!verifies(&parts.join("."), key));
    }

    #[test]
    fn algorithms_outside_the_allowlist_are_refused(
        alg in prop_oneof![Just("none".to_string()), Just("HS256".to_string()), "[A-Z]{2}[0-9]{3}"],
        signature in prop::collection::vec(any::<u8>(), 0..80),
    ) {
        prop_assume!(alg != "RS256" && alg != "ES256");
        use base64::Engine;
        let engine = base64::engine::general_purpose::URL_SAFE_NO_PAD;
        let key = &keys()[0];
        let honest = encode_and_sign(&ClaimSet::new("u", ISSUER, vec![AUD.into()], NOW, 60, "j"), TokenKind::AccessToken, key).unwrap();
        let payload = honest.as_str().split('.').nth(1).unwrap();
        let header = serde_json::json!({"alg": alg, "typ": "at+jwt", "kid": key.kid()});
        let raw = format!("{}.{payload}.{}", engine.encode(header.to_string()), engine.encode(&signature));
        let token = CompactToken::parse(&raw).unwrap();
        prop_assert!(verify_signature(&token, &key.public_key()).is_err());
    }

    #[test]
    fn adding_a_capability_never_revokes(
        caps in prop::collection::vec(capability(), 0..5),
        extra in capability(),
        req in request(),
    ) {
        let before = authorize_capability(&caps, &req).allowed;
        let mut more = caps.clone();
        more.push(extra);
        let after = authorize_capability(&more, &req).allowed;
        prop_assert!(!before || after);
        // And removal never grants.
        let mut fewer = caps.clone();
        if !fewer.is_empty() {
            fewer.remove(0);
            prop_assert!(!authorize_capability(&fewer, &req).allowed || before);
        }
    }

    #[test]
    fn granting_path_is_a_segment_prefix(cap in capability(), req in request()) {
        if authorize_capability(std::slice::from_ref(&cap), &req).allowed {
            let granted = cap.path.as_ref().map(|p| p.segments().to_vec()).unwrap_or_default();
            prop_assert!(req.path.segments().starts_with(&granted));
            prop_assert_eq!(&cap.operation, &req.operation);
        }
    }

    #[test]
    fn hierarchical_matching_is_a_preorder(a in group(), b in group(), c in group()) {
        let h = |x: &GroupName, y: &GroupName| authorize_groups(std::slice::from_ref(x), y, GroupMatching::Hierarchical).allowed;
        let e = |x: &GroupName, y: &GroupName| authorize_groups(std::slice::from_ref(x), y, GroupMatching::Exact).allowed;
        prop_assert!(h(&a, &a));
        if h(&a, &b) && h(&b, &c) {
            prop_assert!(h(&a, &c));
        }
        if e(&a, &b) {
            prop_assert!(h(&a, &b));
        }
    }

    #[test]
    fn decisions_are_deterministic(
        caps in prop::collection::vec(capability(), 0..4),
        groups in prop::collection::vec(group(), 0..3),
        req in request(),
    ) {
        let mut claims = ClaimSet::new("u", ISSUER, vec![AUD.into()], NOW, 60, "j");
        claims.scope = Some(caps.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
        claims.wlcg_groups = Some(groups.iter().map(ToString::to_string).collect());
        let policy = AuthzPolicy::default();
        let a = authorize(&claims, &req, &policy);
        let b = authorize(&claims, &req, &policy);
        prop_assert_eq!(a.allowed, b.allowed);
        prop_assert_eq!(a.matched_rule, b.matched_rule);
        prop_assert_eq!(a.trace, b.trace);
    }
}

// Trust store properties.

struct Published {
    key: Mutex<KeyPair>,
    fail: AtomicBool,
    clock: VirtualClock,
    fetched_at: Mutex<Vec<i64>>,
}

impl Published {
    fn serve(&self, request: HttpRequest) -> Result<HttpResponse, TransportError> {
        self.fetched_at.lock().unwrap().push(self.clock.now());
        if self.fail.load(Ordering::SeqCst) {
            return Err(TransportError::Failed {
                url: request.uri().to_string(),
                reason: "scripted outage".into(),
            });
        }
        Ok(match request.uri().path() {
            "/.well-known/openid-configuration" => json_response(
                StatusCode::OK,
                &IssuerMetadata {
                    issuer: ISSUER.into(),
                    jwks_uri: format!("{ISSUER}/jwks"),
                    token_endpoint: format!("{ISSUER}/token"),
                    authorization_endpoint: None,
                    grant_types_supported: vec![],
                },
            ),
            "/jwks" => json_response(
                StatusCode::OK,
                &JwkSet::from_keys([&self.key.lock().unwrap().public_key()]),
            ),
            _ => json_response(StatusCode::NOT_FOUND, &Value::Null),
        })
    }
}

fn published(seed: u64) -> (Arc<Published>, Arc<TrustStore>) {
    let clock = VirtualClock::new(NOW);
    let p = Arc::new(Published {
        key: Mutex::new(KeyPair::generate(Algorithm::ES256, &mut ChaCha20Rng::seed_from_u64(seed)).unwrap()),
        fail: AtomicBool::new(false),
        clock: clock.clone(),
        fetched_at: Mutex::new(Vec::new()),
    });
    let server = p.clone();
    let store = Arc::new(TrustStore::new(
        &TrustConfig::new(vec![ISSUER.into()]),
        Arc::new(move |r: HttpRequest| server.serve(r)),
        clock.shared(),
    ));
    (p, store)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fetches_per_ttl_window_are_bounded(steps in prop::collection::vec(0i64..(DEFAULT_TTL_SECS as i64 / 3), 1..40)) {
        let (p, store) = published(1);
        let kid = p.key.lock().unwrap().kid().to_string();
        for step in steps {
            p.clock.advance(step);
            let key = store.get_key(ISSUER, &kid).unwrap();
            // The cached key is the one most recently published.
            prop_assert_eq!(key, p.key.lock().unwrap().public_key());
        }
        let times = p.fetched_at.lock().unwrap().clone();
        let ttl = DEFAULT_TTL_SECS as i64;
        for &start in &times {
            let in_window = times.iter().filter(|&&t| t >= start && t < start + ttl).count();
            prop_assert!(in_window <= 2, "{} fetches within one ttl of {}", in_window, start);
        }
    }

    #[test]
    fn failures_are_never_cached(outages in prop::collection::vec(any::<bool>(), 1..12)) {
        let (p, store) = published(2);
        let kid = p.key.lock().unwrap().kid().to_string();
        let mut cached = false;
        for down in outages {
            p.fail.store(down, Ordering::SeqCst);
            let before = p.fetched_at.lock().unwrap().len();
            let result = store.get_key(ISSUER, &kid);
            let after = p.fetched_at.lock().unwrap().len();
            if cached {
                prop_assert!(result.is_ok());
                prop_assert_eq!(before, after);
            } else {
                // Every call without a good anchor goes back to the network.
                prop_assert!(after > before);
                prop_assert_eq!(result.is_ok(), !down);
                cached = !down;
            }
        }
    }
}

// Guard separation over random requests and scopes.

fn preloaded_guard(key: &KeyPair, clock: &VirtualClock) -> Guard {
    let offline = Arc::new(|r: HttpRequest| -> Result<HttpResponse, TransportError> {
        Err(TransportError::NoRoute(r.uri().to_string()))
    });
    let trust = Arc::new(TrustStore::new(
        &TrustConfig::new(vec![ISSUER.into()]),
        offline,
        clock.shared(),
    ));
    trust
        .preload(vec![IssuerTrustAnchor::new(
            IssuerMetadata {
                issuer: ISSUER.into(),
                jwks_uri: format!("{ISSUER}/jwks"),
                token_endpoint: format!("{ISSUER}/token"),
                authorization_endpoint: None,
                grant_types_supported: vec![],
            },
            vec![key.public_key()],
            NOW,
            Duration::from_secs(DEFAULT_TTL_SECS),
        )
        .unwrap()])
        .unwrap();
    Guard::new(
        GuardConfig::new(
            vec![ISSUER.into()],
            vec![AUD.into()],
            AuthzPolicy::capability_only(),
        ),
        trust,
        clock.shared(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn guard_status_depends_only_on_the_failing_layer(
        caps in prop::collection::vec(capability(), 0..4),
        method in prop::sample::select(vec!["GET", "HEAD", "PUT", "MKCOL"]),
        path in path(),
        expired in any::<bool>(),
    ) {
        let key = &keys()[0];
        let clock = VirtualClock::new(NOW + 10);
        let guard = preloaded_guard(key, &clock);
        let mut claims = ClaimSet::new("u", ISSUER, vec![AUD.into()], NOW, 600, "j");
        claims.scope = Some(caps.iter().map(ToString::to_string).collect::<Vec<_>>().join(" "));
        if expired {
            clock.advance(10_000);
        }
        let token = encode_and_sign(&claims, TokenKind::AccessToken, key).unwrap();
        let outcome = guard.guard(GuardRequest {
            method,
            path: &path,
            authorization: Some(&format!("Bearer {token}")),
        });
        let op = match method {
            "GET" | "HEAD" => "storage.read",
            "PUT" => "storage.write",
            _ => "storage.create",
        };
        let req = ResourceRequest::parse(op, &path).unwrap();
        let expected = if expired {
            GuardStatus::Unauthenticated
        } else if caps.iter().any(|c| c.permits(&req)) {
            GuardStatus::Allowed
        } else {
            GuardStatus::Forbidden
        };
        prop_assert_eq!(outcome.status, expected);
    }
}
