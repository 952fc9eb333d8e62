use std::net::TcpListener;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use wlcg_core::clock::SystemClock;
use wlcg_core::harness::{run_delegation_chain_on, run_figure3_on, DelegationVariant, World};
use wlcg_core::http::HttpFetcher;
use wlcg_core::issuer::{GrantStore, Issuer, IssuerConfig};
use wlcg_core::token::{Algorithm, KeyPair};
use wlcg_core::trust::IssuerMetadata;
use wlcg_server::{HttpClient, ServerHandle, SocketNetwork};

#[test]
fn six_step_flow_over_real_sockets() {
    let world = World::new(Arc::new(SocketNetwork::new())).unwrap();
    assert!(world.url("issuer").starts_with("http://127.0.0.1:"));
    let transcript = run_figure3_on(&world).unwrap_or_else(|f| panic!("{f}"));
    assert_eq!(transcript.steps.len(), 6);
    assert!(transcript.passed());
    assert_eq!(transcript.max_fetches("storage"), 2);
}

#[test]
fn delegation_over_real_sockets() {
    let world = World::new(Arc::new(SocketNetwork::new())).unwrap();
    let transcript =
        run_delegation_chain_on(&world, DelegationVariant::UserDelegated).unwrap_or_else(|f| panic!("{f}"));
    assert!(transcript.passed());
}

#[test]
fn served_issuer_answers_discovery() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let key = KeyPair::generate(Algorithm::ES256, &mut rng).unwrap();
    let issuer = Issuer::new(
        &IssuerConfig::new(&base),
        vec![key],
        GrantStore::in_memory(),
        SystemClock::shared(),
        rng,
    )
    .unwrap();
    let server = ServerHandle::spawn(listener, Arc::new(issuer)).unwrap();
    let client = HttpClient::default();

    let response = client
        .get(&format!("{base}/.well-known/openid-configuration"))
        .unwrap();
    assert_eq!(response.status(), 200);
    let metadata: IssuerMetadata = serde_json::from_slice(response.body()).unwrap();
    assert_eq!(metadata.issuer, base);
    assert_eq!(metadata.jwks_uri, format!("{base}/jwks"));

    let jwks = client.get(&metadata.jwks_uri).unwrap();
    let keys: serde_json::Value = serde_json::from_slice(jwks.body()).unwrap();
    assert_eq!(keys["keys"].as_array().unwrap().len(), 1);

    let missing = client.get(&format!("{base}/nowhere")).unwrap();
    assert_eq!(missing.status(), 404);
    server.shutdown().unwrap();
    assert!(client.get(&format!("{base}/jwks")).is_err());
}

#[test]
fn client_returns_redirects_unfollowed() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let redirect = |_req| wlcg_core::http::redirect("http://127.0.0.1:1/elsewhere");
    struct Fixed<F>(F);
    impl<F: Fn(wlcg_core::http::HttpRequest) -> wlcg_core::http::HttpResponse + Send + Sync>
        wlcg_core::http::Service for Fixed<F>
    {
        fn handle(&self, r: wlcg_core::http::HttpRequest) -> wlcg_core::http::HttpResponse {
            (self.0)(r)
        }
    }
    let _server = ServerHandle::spawn(listener, Arc::new(Fixed(redirect))).unwrap();
    let response = HttpClient::default().get(&format!("{base}/x")).unwrap();
    assert_eq!(response.status(), 302);
    assert_eq!(response.headers()["location"], "http://127.0.0.1:1/elsewhere");
}
