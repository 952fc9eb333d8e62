use std::sync::Arc;

use http::header::{AUTHORIZATION, LOCATION};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::*;
use crate::clock::{Clock, VirtualClock};
use crate::http::{basic_authorization, encode_form, form_post, parse_form, HttpFetcher, Loopback};
use crate::token::{check_profile_shape, decode, Algorithm};

const ISSUER: &str = "https://issuer.test";
const REDIRECT: &str = "https://rucio.test/cb";

fn config() -> IssuerConfig {
    IssuerConfig::from_toml(
        r#"
        issuer = "https://issuer.test"
        exchange_audiences = ["https://fts.test", "https://dest.test"]

        [[clients]]
        client_id = "rucio"
        client_secret = "rucio-secret"
        allowed_grants = ["authorization_code", "refresh_token", "token_exchange"]
        allowed_scopes = ["storage.read:/", "storage.write:/data", "storage.create:/data"]
        redirect_uris = ["https://rucio.test/cb"]
        default_audiences = ["https://rucio.test"]

        [[clients]]
        client_id = "fts"
        client_secret = "fts-secret"
        allowed_grants = ["client_credentials", "token_exchange"]
        allowed_scopes = ["storage.read:/", "storage.write:/data"]
        default_audiences = ["https://fts.test"]

        [[users]]
        username = "alice"
        password = "wonderland"
        groups = ["/wlcg", "/wlcg/ops"]
        assurance = ["https://refeds.org/assurance/IAP/medium"]
        name = "Alice"
        "#,
    )
    .unwrap()
}

struct Fixture {
    clock: VirtualClock,
    issuer: Arc<Issuer>,
}

fn fixture() -> Fixture {
    let clock = VirtualClock::new(1_700_000_000);
    let mut rng = ChaCha20Rng::seed_from_u64(42);
    let key = KeyPair::generate(Algorithm::ES256, &mut rng).unwrap();
    let issuer = Issuer::new(&config(), vec![key], GrantStore::in_memory(), clock.shared(), rng).unwrap();
    Fixture {
        clock,
        issuer: Arc::new(issuer),
    }
}

fn rucio() -> ClientCredentials {
    ClientCredentials::new("rucio", "rucio-secret")
}

fn fts() -> ClientCredentials {
    ClientCredentials::new("fts", "fts-secret")
}

fn login(issuer: &Issuer, scope: Option<&str>) -> TokenResponse {
    let code = issuer
        .authorize(&AuthorizeRequest {
            client_id: "rucio".into(),
            redirect_uri: REDIRECT.into(),
            scope: scope.map(str::to_string),
            username: "alice".into(),
            password: Secret::new("wonderland"),
        })
        .unwrap();
    issuer.exchange_code(&rucio(), &code, Some(REDIRECT)).unwrap()
}

fn claims(token: &CompactToken) -> ClaimSet {
    decode(token).unwrap().1
}

fn caps(s: &str) -> Vec<Capability> {
    parse_scope(s).unwrap()
}

fn is_attenuation(child: &str, parent: &str) -> bool {
    caps(child).iter().all(|c| covered(c, &caps(parent)))
}

#[test]
fn code_flow_issues_three_conformant_tokens() {
    let f = fixture();
    let resp = login(
        &f.issuer,
        Some("openid offline_access storage.read:/ storage.write:/data/x compute.create"),
    );
    let access = claims(&resp.access_token);
    let id = claims(resp.id_token.as_ref().unwrap());
    assert!(resp.refresh_token.is_some());
    assert!(check_profile_shape(&access, TokenKind::AccessToken).conformant());
    assert!(check_profile_shape(&id, TokenKind::IdToken).conformant());
    assert_eq!(
        access.scope.as_deref(),
        Some("storage.read:/ storage.write:/data/x")
    );
    assert_eq!(access.groups(), ["/wlcg", "/wlcg/ops"]);
    assert_eq!(access.audiences(), ["https://rucio.test"]);
    assert!(access.auth_time.is_none());
    assert!(id.auth_time.is_some());
    assert_eq!(id.audiences(), ["rucio"]);
    assert_eq!(id.oidc_standard["name"], "Alice");
    assert_eq!(id.sub, access.sub);
    assert_eq!(
        access.sub.as_deref(),
        Some(derive_subject(ISSUER, "alice").as_str())
    );
    assert_eq!(resp.expires_in, access.exp.unwrap() - access.iat.unwrap());
}

#[test]
fn authorize_errors() {
    let f = fixture();
    let mut req = AuthorizeRequest {
        client_id: "rucio".into(),
        redirect_uri: "https://evil.test/cb".into(),
        scope: None,
        username: "alice".into(),
        password: Secret::new("wonderland"),
    };
    assert!(matches!(
        f.issuer.authorize(&req),
        Err(IssuerError::RedirectMismatch(_))
    ));
    req.redirect_uri = REDIRECT.into();
    req.password = Secret::new("wrong");
    assert_eq!(f.issuer.authorize(&req), Err(IssuerError::BadCredentials));
    req.username = "mallory".into();
    assert_eq!(f.issuer.authorize(&req), Err(IssuerError::BadCredentials));
    req.client_id = "nobody".into();
    assert!(matches!(
        f.issuer.authorize(&req),
        Err(IssuerError::UnknownClient(_))
    ));
    req.client_id = "fts".into();
    assert!(matches!(
        f.issuer.authorize(&req),
        Err(IssuerError::UnauthorizedClient(_))
    ));
}

#[test]
fn codes_are_single_use_and_short_lived() {
    let f = fixture();
    let req = AuthorizeRequest {
        client_id: "rucio".into(),
        redirect_uri: REDIRECT.into(),
        scope: None,
        username: "alice".into(),
        password: Secret::new("wonderland"),
    };
    let code = f.issuer.authorize(&req).unwrap();
    f.issuer.exchange_code(&rucio(), &code, None).unwrap();
    assert!(matches!(
        f.issuer.exchange_code(&rucio(), &code, None),
        Err(IssuerError::InvalidGrant(_))
    ));
    let code = f.issuer.authorize(&req).unwrap();
    f.clock.advance(60);
    assert!(matches!(
        f.issuer.exchange_code(&rucio(), &code, None),
        Err(IssuerError::InvalidGrant(_))
    ));
    let code = f.issuer.authorize(&req).unwrap();
    assert_eq!(
        f.issuer
            .exchange_code(&ClientCredentials::new("rucio", "guess"), &code, None),
        Err(IssuerError::InvalidClient)
    );
}

#[test]
fn client_credentials_grant() {
    let f = fixture();
    let resp = f
        .issuer
        .client_credentials(&fts(), Some("storage.read:/a"))
        .unwrap();
    assert!(resp.id_token.is_none() && resp.refresh_token.is_none());
    let c = claims(&resp.access_token);
    assert_eq!(c.sub.as_deref(), Some("fts"));
    assert_eq!(c.scope.as_deref(), Some("storage.read:/a"));
    assert!(matches!(
        f.issuer.client_credentials(&fts(), Some("storage.write:/")),
        Err(IssuerError::ScopeNotAllowed(_))
    ));
    assert!(matches!(
        f.issuer.client_credentials(&rucio(), None),
        Err(IssuerError::UnauthorizedClient(GrantType::ClientCredentials))
    ));
}

#[test]
fn refresh_rotates_and_attenuates() {
    let f = fixture();
    let first = login(&f.issuer, Some("storage.read:/ storage.write:/data"));
    let handle = first.refresh_token.clone().unwrap();
    f.clock.advance(1300);
    let second = f.issuer.refresh(&rucio(), &handle, None).unwrap();
    let (a, b) = (claims(&first.access_token), claims(&second.access_token));
    assert!(b.exp.unwrap() > f.clock.now());
    assert_eq!(a.sub, b.sub);
    assert_eq!(a.scope, b.scope);
    assert_eq!(a.groups(), b.groups());
    let rotated = second.refresh_token.clone().unwrap();
    assert_ne!(rotated, handle);
    assert!(matches!(
        f.issuer.refresh(&rucio(), &handle, None),
        Err(IssuerError::InvalidGrant(_))
    ));
    assert!(matches!(
        f.issuer.refresh(&rucio(), &rotated, Some("storage.write:/")),
        Err(IssuerError::ScopeBroadening(_))
    ));
    let narrowed = f
        .issuer
        .refresh(&rucio(), &rotated, Some("storage.write:/data/run1"))
        .unwrap();
    assert_eq!(
        claims(&narrowed.access_token).scope.as_deref(),
        Some("storage.write:/data/run1")
    );
    // The grant itself is not narrowed by a narrowed access token.
    let again = f
        .issuer
        .refresh(&rucio(), narrowed.refresh_token.as_ref().unwrap(), None)
        .unwrap();
    assert_eq!(claims(&again.access_token).scope, a.scope);
    assert_eq!(
        f.issuer
            .store()
            .live_refresh_handles("rucio", a.sub.as_deref().unwrap(), f.clock.now()),
        vec![again.refresh_token.unwrap()]
    );
}

#[test]
fn refresh_handle_expires() {
    let f = fixture();
    let handle = login(&f.issuer, None).refresh_token.unwrap();
    f.clock.advance(12 * 3600);
    assert!(matches!(
        f.issuer.refresh(&rucio(), &handle, None),
        Err(IssuerError::InvalidGrant(_))
    ));
}

#[test]
fn exchange_preserves_subject_and_caps_lifetime() {
    let f = fixture();
    let user = login(&f.issuer, Some("storage.read:/ storage.write:/data"));
    let parent = claims(&user.access_token);
    f.clock.advance(1000);
    let resp = f
        .issuer
        .exchange(
            &rucio(),
            user.access_token.as_str(),
            "https://fts.test",
            Some("storage.write:/data/f"),
        )
        .unwrap();
    let child = claims(&resp.access_token);
    assert_eq!(child.sub, parent.sub);
    assert_eq!(child.audiences(), ["https://fts.test"]);
    assert_eq!(child.scope.as_deref(), Some("storage.write:/data/f"));
    assert_eq!(child.groups(), parent.groups());
    assert_eq!(child.exp, parent.exp);
    assert_eq!(resp.expires_in, child.exp.unwrap() - child.iat.unwrap());
    assert_eq!(resp.issued_token_type.as_deref(), Some(ACCESS_TOKEN_TYPE));
    assert!(resp.refresh_token.is_none());
    assert!(check_profile_shape(&child, TokenKind::AccessToken).conformant());

    // Omitted scope: everything the parent has that the client may hold.
    let all = f
        .issuer
        .exchange(&fts(), user.access_token.as_str(), "https://dest.test", None)
        .unwrap();
    assert_eq!(claims(&all.access_token).scope, parent.scope);
}

#[test]
fn exchange_errors() {
    let f = fixture();
    let user = login(&f.issuer, Some("storage.write:/data"));
    let t = user.access_token.as_str();
    assert!(matches!(
        f.issuer
            .exchange(&rucio(), t, "https://fts.test", Some("storage.write:/")),
        Err(IssuerError::ScopeBroadening(_))
    ));
    assert!(matches!(
        f.issuer
            .exchange(&rucio(), t, "https://fts.test", Some("storage.read:/data")),
        Err(IssuerError::ScopeBroadening(_))
    ));
    assert!(matches!(
        f.issuer.exchange(&rucio(), t, "https://elsewhere.test", None),
        Err(IssuerError::AudienceNotPermitted(_))
    ));
    assert!(matches!(
        f.issuer.exchange(&rucio(), "not.a.jwt", "https://fts.test", None),
        Err(IssuerError::InvalidSubjectToken(_))
    ));
    let id = user.id_token.unwrap();
    assert!(matches!(
        f.issuer.exchange(&rucio(), id.as_str(), "https://fts.test", None),
        Err(IssuerError::InvalidSubjectToken(_))
    ));
    let mut forged = t.to_string();
    forged.pop();
    forged.push(if t.ends_with('A') { 'B' } else { 'A' });
    assert!(matches!(
        f.issuer.exchange(&rucio(), &forged, "https://fts.test", None),
        Err(IssuerError::InvalidSubjectToken(_))
    ));
    assert!(matches!(
        f.issuer.token(
            &rucio(),
            TokenGrant::TokenExchange {
                subject_token: t.into(),
                audience: None,
                scope: None
            }
        ),
        Err(IssuerError::InvalidRequest(_))
    ));
    f.clock.advance(1200);
    assert!(matches!(
        f.issuer.exchange(&rucio(), t, "https://fts.test", None),
        Err(IssuerError::InvalidSubjectToken(_))
    ));
}

#[test]
fn metadata_and_rotation() {
    let f = fixture();
    let md = f.issuer.metadata();
    assert_eq!(md.issuer, ISSUER);
    assert_eq!(md.grant_types_supported.len(), 4);
    let old_kid = f.issuer.active_kid();
    let token = login(&f.issuer, None).access_token;
    let next = KeyPair::generate(Algorithm::ES256, &mut ChaCha20Rng::seed_from_u64(99)).unwrap();
    f.issuer.rotate_key(next);
    assert_ne!(f.issuer.active_kid(), old_kid);
    let kids = |i: &Issuer| -> Vec<String> {
        i.jwks()
            .verification_keys()
            .unwrap()
            .iter()
            .map(|k| k.kid().to_string())
            .collect()
    };
    assert!(kids(&f.issuer).contains(&old_kid));
    assert!(f.issuer.verify_own_token(token.as_str()).is_ok());
    f.clock.advance(1200 + 60);
    assert!(!kids(&f.issuer).contains(&old_kid));
}

fn post_token(net: &Loopback, auth: Option<&str>, pairs: &[(&str, &str)]) -> (u16, serde_json::Value) {
    let mut req = form_post(&format!("{ISSUER}/token"), encode_form(pairs.iter().copied())).unwrap();
    if let Some(a) = auth {
        req.headers_mut().insert(AUTHORIZATION, a.parse().unwrap());
    }
    let resp = net.fetch(req).unwrap();
    (
        resp.status().as_u16(),
        serde_json::from_slice(resp.body()).unwrap(),
    )
}

#[test]
fn http_endpoints() {
    let f = fixture();
    let net = Loopback::new();
    net.mount(ISSUER, f.issuer.clone()).unwrap();

    let md: serde_json::Value = serde_json::from_slice(
        net.get(&format!("{ISSUER}/.well-known/openid-configuration"))
            .unwrap()
            .body(),
    )
    .unwrap();
    assert_eq!(md["issuer"], ISSUER);
    let rfc = net
        .get(&format!("{ISSUER}/.well-known/oauth-authorization-server"))
        .unwrap();
    assert_eq!(rfc.status(), 200);
    let jwks: serde_json::Value =
        serde_json::from_slice(net.get(&format!("{ISSUER}/jwks")).unwrap().body()).unwrap();
    assert_eq!(jwks["keys"].as_array().unwrap().len(), 1);

    let query = encode_form([
        ("client_id", "rucio"),
        ("redirect_uri", REDIRECT),
        ("username", "alice"),
        ("password", "wonderland"),
        ("state", "xyz"),
    ]);
    let resp = net
        .get(&format!(
            "{ISSUER}/authorize?{}",
            String::from_utf8(query).unwrap()
        ))
        .unwrap();
    assert_eq!(resp.status(), 302);
    let location = url::Url::parse(resp.headers()[LOCATION].to_str().unwrap()).unwrap();
    let q = parse_form(location.query().unwrap().as_bytes());
    assert_eq!(q["state"], "xyz");

    let basic = basic_authorization("rucio", "rucio-secret");
    let (status, body) = post_token(
        &net,
        Some(&basic),
        &[
            ("grant_type", "authorization_code"),
            ("code", &q["code"]),
            ("redirect_uri", REDIRECT),
        ],
    );
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["token_type"], "Bearer");
    let access = body["access_token"].as_str().unwrap().to_string();
    let refresh = body["refresh_token"].as_str().unwrap().to_string();

    let (status, body) = post_token(
        &net,
        None,
        &[
            ("grant_type", "refresh_token"),
            ("refresh_token", &refresh),
            ("client_id", "rucio"),
            ("client_secret", "rucio-secret"),
        ],
    );
    assert_eq!(status, 200, "{body}");

    type Case<'a> = (Option<&'a str>, Vec<(&'a str, &'a str)>, u16, &'a str);
    let cases: Vec<Case> = vec![
        (
            None,
            vec![("grant_type", "client_credentials")],
            401,
            "invalid_client",
        ),
        (
            Some("Basic Zm9vOmJhcg=="),
            vec![("grant_type", "client_credentials")],
            401,
            "invalid_client",
        ),
        (
            Some(&basic),
            vec![("grant_type", "password")],
            400,
            "unsupported_grant_type",
        ),
        (Some(&basic), vec![], 400, "invalid_request"),
        (
            Some(&basic),
            vec![("grant_type", "client_credentials")],
            400,
            "unauthorized_client",
        ),
        (
            Some(&basic),
            vec![("grant_type", "refresh_token"), ("refresh_token", &refresh)],
            400,
            "invalid_grant",
        ),
        (
            Some(&basic),
            vec![
                ("grant_type", "authorization_code"),
                ("code", "x"),
                ("client_secret", "rucio-secret"),
            ],
            400,
            "invalid_request",
        ),
        (
            Some(&basic),
            vec![
                ("grant_type", GrantType::TokenExchange.wire_name()),
                ("subject_token", &access),
                ("audience", "https://fts.test"),
                ("scope", "storage.write:/"),
            ],
            400,
            "invalid_scope",
        ),
        (
            Some(&basic),
            vec![
                ("grant_type", GrantType::TokenExchange.wire_name()),
                ("subject_token", &access),
                ("audience", "https://nowhere.test"),
            ],
            400,
            "invalid_target",
        ),
        (
            Some(&basic),
            vec![
                ("grant_type", GrantType::TokenExchange.wire_name()),
                ("subject_token", "garbage"),
                ("audience", "https://fts.test"),
            ],
            400,
            "invalid_request",
        ),
    ];
    for (auth, pairs, status, code) in cases {
        let (got, body) = post_token(&net, auth, &pairs);
        assert_eq!(
            (got, body["error"].as_str().unwrap()),
            (status, code),
            "{pairs:?}: {body}"
        );
    }

    let (status, body) = post_token(
        &net,
        Some(&basic),
        &[
            ("grant_type", GrantType::TokenExchange.wire_name()),
            ("subject_token", &access),
            ("subject_token_type", ACCESS_TOKEN_TYPE),
            ("audience", "https://fts.test"),
        ],
    );
    assert_eq!(status, 200, "{body}");
    assert_eq!(body["issued_token_type"], ACCESS_TOKEN_TYPE);

    assert_eq!(net.get(&format!("{ISSUER}/token")).unwrap().status(), 405);
    assert_eq!(net.get(&format!("{ISSUER}/nope")).unwrap().status(), 404);
}

#[test]
fn issuer_with_path_routes_both_discovery_forms() {
    let mut cfg = config();
    cfg.issuer = "https://iam.test/realm".into();
    let key = KeyPair::generate(Algorithm::ES256, &mut ChaCha20Rng::seed_from_u64(1)).unwrap();
    let issuer = Issuer::new(
        &cfg,
        vec![key],
        GrantStore::in_memory(),
        VirtualClock::new(0).shared(),
        ChaCha20Rng::seed_from_u64(2),
    )
    .unwrap();
    let net = Loopback::new();
    net.mount("https://iam.test", Arc::new(issuer)).unwrap();
    let md = crate::trust::discover("https://iam.test/realm", &net, false).unwrap();
    assert_eq!(md.jwks_uri, "https://iam.test/realm/jwks");
    let resp = net
        .get("https://iam.test/.well-known/oauth-authorization-server/realm")
        .unwrap();
    assert_eq!(resp.status(), 200);
    assert_eq!(net.get(&md.jwks_uri).unwrap().status(), 200);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    const ENTRIES: [&str; 8] = [
        "storage.read:/",
        "storage.read:/data",
        "storage.write:/data",
        "storage.write:/data/a",
        "storage.write:/",
        "storage.create:/data",
        "storage.read:/other",
        "compute.create",
    ];

    fn scope_strategy() -> impl Strategy<Value = String> {
        proptest::sample::subsequence(ENTRIES.to_vec(), 1..=4).prop_map(|v| v.join(" "))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn exchange_and_refresh_never_broaden(
            login_scope in scope_strategy(),
            exchange_scope in scope_strategy(),
            refresh_scope in scope_strategy(),
        ) {
            let f = fixture();
            let user = login(&f.issuer, Some(&login_scope));
            let parent = claims(&user.access_token).scope.unwrap_or_default();
            match f.issuer.exchange(&rucio(), user.access_token.as_str(), "https://fts.test", Some(&exchange_scope)) {
                Ok(resp) => {
                    let child = claims(&resp.access_token);
                    prop_assert!(is_attenuation(child.scope.as_deref().unwrap_or(""), &parent));
                    prop_assert!(child.exp <= claims(&user.access_token).exp);
                }
                Err(IssuerError::ScopeBroadening(_)) | Err(IssuerError::ScopeNotAllowed(_)) => {
                    prop_assert!(!is_attenuation(&exchange_scope, &parent) || !is_attenuation(&exchange_scope, "storage.read:/ storage.write:/data storage.create:/data"));
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            match f.issuer.refresh(&rucio(), user.refresh_token.as_ref().unwrap(), Some(&refresh_scope)) {
                Ok(resp) => {
                    let child = claims(&resp.access_token);
                    prop_assert!(is_attenuation(child.scope.as_deref().unwrap_or(""), &parent));
                    prop_assert_eq!(child.sub, claims(&user.access_token).sub);
                }
                Err(IssuerError::ScopeBroadening(_)) => prop_assert!(!is_attenuation(&refresh_scope, &parent)),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn subject_survives_any_chain_of_refresh_and_exchange(ops in proptest::collection::vec(0u8..3, 1..8)) {
            let f = fixture();
            let user = login(&f.issuer, Some("openid offline_access storage.read:/ storage.write:/data"));
            let sub = claims(&user.access_token).sub;
            let mut handle = user.refresh_token.clone().unwrap();
            let mut access = user.access_token.clone();
            for op in ops {
                f.clock.advance(30);
                let resp = match op {
                    0 => {
                        let r = f.issuer.refresh(&rucio(), &handle, None).unwrap();
                        handle = r.refresh_token.clone().unwrap();
                        r
                    }
                    1 => f.issuer.exchange(&rucio(), access.as_str(), "https://fts.test", Some("storage.read:/")).unwrap(),
                    _ => f.issuer.exchange(&fts(), access.as_str(), "https://dest.test", None).unwrap(),
                };
                prop_assert_eq!(&claims(&resp.access_token).sub, &sub);
                if op == 0 {
                    access = resp.access_token;
                }
            }
        }

        #[test]
        fn a_code_redeems_at_most_once(attempts in 2usize..5) {
            let f = fixture();
            let code = f.issuer
                .authorize(&AuthorizeRequest {
                    client_id: "rucio".into(),
                    redirect_uri: REDIRECT.into(),
                    scope: None,
                    username: "alice".into(),
                    password: Secret::new("wonderland"),
                })
                .unwrap();
            let wins = (0..attempts)
                .filter(|_| f.issuer.exchange_code(&rucio(), &code, Some(REDIRECT)).is_ok())
                .count();
            prop_assert_eq!(wins, 1);
        }
    }
}
