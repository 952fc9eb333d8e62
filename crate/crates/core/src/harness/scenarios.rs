use std::sync::Barrier;

use super::world::OAuthFailure;
use super::{OAuthClient, Run, Scenario, ScenarioFailure, StepContext, Transcript, World};
use crate::authz::{parse_scope, scope_is_attenuation, Capability};
use crate::issuer::TokenResponse;
use crate::token::{decode, ClaimSet, CompactToken};

/// Names accepted by [`run_scenario`].
pub const SCENARIOS: [&str; 5] = [
    "figure3",
    "delegation-user",
    "delegation-admin",
    "delegation-broadening",
    "refresh-long-lived",
];

/// Number of expiry-and-refresh cycles in the long-lived job.
pub const REFRESH_CYCLES: usize = 5;

const PORTAL_SCOPE: &str = "openid offline_access storage.read:/home storage.write:/home/alice";
const SKEW: i64 = 60;
const STRESS_THREADS: usize = 8;

type Outcome = Result<Transcript, Box<ScenarioFailure>>;

fn setup_failure(scenario: &str, detail: String) -> Box<ScenarioFailure> {
    Box::new(ScenarioFailure {
        scenario: scenario.to_string(),
        step: 0,
        assertion: "world setup".into(),
        detail: Some(detail),
        cause: None,
        transcript: Transcript {
            scenario: scenario.to_string(),
            steps: Vec::new(),
        },
    })
}

fn on_loopback(name: &str, f: impl FnOnce(&World) -> Outcome) -> Outcome {
    let world = World::loopback().map_err(|e| setup_failure(name, e))?;
    f(&world)
}

/// Runs the named scenario on `world`; `None` for an unknown name.
pub fn run_scenario(name: &str, world: &World) -> Option<Outcome> {
    Some(match name {
        "figure3" => run_figure3_on(world),
        "delegation-user" => run_delegation_chain_on(world, DelegationVariant::UserDelegated),
        "delegation-admin" => run_delegation_chain_on(world, DelegationVariant::AdminCredential),
        "delegation-broadening" => run_delegation_chain_on(world, DelegationVariant::BroadeningAttempt),
        "refresh-long-lived" => run_refresh_long_lived_on(world),
        _ => return None,
    })
}

fn refused(f: OAuthFailure) -> String {
    f.to_string()
}

fn claims_of(token: &CompactToken) -> Result<ClaimSet, String> {
    decode(token).map(|(_, c)| c).map_err(|e| e.to_string())
}

fn caps_of(claims: &ClaimSet) -> Vec<Capability> {
    claims
        .scope
        .as_deref()
        .and_then(|s| parse_scope(s).ok())
        .unwrap_or_default()
}

fn expires_at(claims: &ClaimSet) -> i64 {
    claims.exp.unwrap_or(i64::MIN)
}

/// Moves the clock just past the token's expiry plus validator skew.
fn expire(world: &World, claims: &ClaimSet) {
    let target = expires_at(claims) + SKEW + 1;
    if target > world.now() {
        world.clock.set(target);
    }
}

pub fn run_figure3() -> Outcome {
    on_loopback("figure3", run_figure3_on)
}

/// Login, code exchange, resource access, cached trust, expiry and refresh,
/// reuse.
pub fn run_figure3_on(world: &World) -> Outcome {
    let scenario = Scenario::new(
        "figure3",
        &["user", "client", "resource"],
        &[
            (
                "user",
                "log in at the issuer through the client",
                "authorization code delivered to the client",
            ),
            (
                "client",
                "redeem the code at the token endpoint",
                "ID, access and refresh tokens",
            ),
            ("client", "write a file with the access token", "allowed"),
            (
                "resource",
                "validate a second request from cached trust roots",
                "allowed with no new trust fetches",
            ),
            (
                "client",
                "retry after access-token expiry, then refresh",
                "401, then a new access token",
            ),
            ("client", "reuse the new access token", "allowed"),
        ],
    )
    .expect("script names declared actors");
    let mut run = Run::new(scenario, world);
    let portal = OAuthClient::new(world, "portal", "portal-secret");
    let path = "/home/alice/results.dat";

    let code = run.step(|ctx, _| portal.login(ctx, "alice", "wonderland", PORTAL_SCOPE))?;

    let (tokens, access) = run.step(|ctx, w| {
        let tokens = portal.exchange_code(ctx, &code).map_err(refused)?;
        let access = claims_of(&tokens.access_token)?;
        ctx.check("ID token issued", tokens.id_token.is_some(), "");
        ctx.check("refresh token issued", tokens.refresh_token.is_some(), "");
        if let Some(id) = &tokens.id_token {
            let id = claims_of(id)?;
            ctx.check("ID and access tokens share sub", id.sub == access.sub, "");
        }
        let aud = access.aud.clone().unwrap_or_default();
        ctx.check(
            "access token is addressed to the resource",
            aud.iter().any(|a| a == w.url("storage")),
            format!("{aud:?}"),
        );
        Ok((tokens, access))
    })?;

    run.step(|ctx, w| {
        let (status, _) = w.storage_call(
            ctx,
            "storage",
            "PUT",
            path,
            Some(tokens.access_token.as_str()),
            b"run 1",
        )?;
        ctx.check("write allowed", status == 201, status);
        let fetches = w.fetch_counts()["storage"];
        ctx.check(
            "trust roots fetched once (metadata and keys)",
            fetches == 2,
            fetches,
        );
        Ok(())
    })?;

    run.step(|ctx, w| {
        let before = w.fetch_counts()["storage"];
        let (status, body) = w.storage_call(
            ctx,
            "storage",
            "GET",
            path,
            Some(tokens.access_token.as_str()),
            b"",
        )?;
        ctx.check("read allowed", status == 200, status);
        ctx.check("content round-trips", body == b"run 1", "");
        let after = w.fetch_counts()["storage"];
        ctx.check(
            "no trust fetch for a cached issuer",
            after == before,
            format!("{before} -> {after}"),
        );
        Ok(())
    })?;

    let renewed = run.step(|ctx, w| {
        expire(w, &access);
        let (status, _) = w.storage_call(
            ctx,
            "storage",
            "GET",
            path,
            Some(tokens.access_token.as_str()),
            b"",
        )?;
        ctx.check("expired token rejected with 401", status == 401, status);
        let handle = tokens.refresh_token.clone().ok_or("no refresh token")?;
        let renewed = portal.refresh(ctx, &handle).map_err(refused)?;
        let claims = claims_of(&renewed.access_token)?;
        ctx.check("new access token is valid now", expires_at(&claims) > w.now(), "");
        ctx.check("sub unchanged across refresh", claims.sub == access.sub, "");
        ctx.check(
            "refresh handle rotated",
            renewed.refresh_token.as_ref().is_some_and(|h| *h != handle),
            "",
        );
        Ok(renewed)
    })?;

    run.step(|ctx, w| {
        let token = renewed.access_token.as_str();
        let (status, body) = w.storage_call(ctx, "storage", "GET", path, Some(token), b"")?;
        ctx.check(
            "read with the new token allowed",
            status == 200 && body == b"run 1",
            status,
        );
        let (status, _) = w.storage_call(ctx, "storage", "PUT", path, Some(token), b"run 2")?;
        ctx.check("write with the new token allowed", status == 201, status);
        let fetches = w.fetch_counts()["storage"];
        ctx.check(
            "at most two trust fetches in the whole run",
            fetches <= 2,
            fetches,
        );
        Ok(())
    })?;

    Ok(run.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelegationVariant {
    /// The chain starts from a token issued for a user.
    UserDelegated,
    /// The chain starts from the orchestrator's own client-credential token.
    AdminCredential,
    /// As `UserDelegated`, but the transfer service asks for more than it holds.
    BroadeningAttempt,
}

impl DelegationVariant {
    pub fn scenario_name(self) -> &'static str {
        match self {
            DelegationVariant::UserDelegated => "delegation-user",
            DelegationVariant::AdminCredential => "delegation-admin",
            DelegationVariant::BroadeningAttempt => "delegation-broadening",
        }
    }
}

pub fn run_delegation_chain(variant: DelegationVariant) -> Outcome {
    on_loopback(variant.scenario_name(), |w| run_delegation_chain_on(w, variant))
}

/// Checks one hop: attenuation, subject, audience and lifetime cap.
fn check_hop(ctx: &mut StepContext, hop: &str, parent: &ClaimSet, child: &ClaimSet, audience: &str) {
    ctx.check(
        format!("{hop}: scope is an attenuation of the parent"),
        scope_is_attenuation(&caps_of(child), &caps_of(parent)),
        format!("{:?} within {:?}", child.scope, parent.scope),
    );
    ctx.check(format!("{hop}: sub preserved"), child.sub == parent.sub, "");
    ctx.check(
        format!("{hop}: audience narrowed to {audience}"),
        child.aud.as_deref() == Some(&[audience.to_string()][..]),
        format!("{:?}", child.aud),
    );
    ctx.check(
        format!("{hop}: lifetime capped by the parent"),
        expires_at(child) <= expires_at(parent),
        format!("{} <= {}", expires_at(child), expires_at(parent)),
    );
}

/// Orchestrator to transfer service to two storage endpoints.
pub fn run_delegation_chain_on(world: &World, variant: DelegationVariant) -> Outcome {
    let first = match variant {
        DelegationVariant::AdminCredential => (
            "rucio",
            "obtain its own client-credential token",
            "access token for the orchestrator",
        ),
        _ => (
            "user",
            "log in through the orchestrator and redeem the code",
            "access token for the orchestrator",
        ),
    };
    let hop2 = match variant {
        DelegationVariant::BroadeningAttempt => (
            "fts",
            "exchange for source and destination tokens, asking for write on all of /data",
            "attenuated tokens",
        ),
        _ => (
            "fts",
            "exchange for source (read) and destination (write) tokens",
            "attenuated tokens",
        ),
    };
    let scenario = Scenario::new(
        variant.scenario_name(),
        &["user", "rucio", "fts", "source", "dest"],
        &[
            first,
            (
                "rucio",
                "exchange for a transfer-service token",
                "attenuated token for the transfer service",
            ),
            hop2,
            (
                "fts",
                "read from the source and write to the destination",
                "both allowed",
            ),
            (
                "source",
                "refuse tokens addressed elsewhere",
                "401 for every misaddressed token",
            ),
        ],
    )
    .expect("script names declared actors");
    let mut run = Run::new(scenario, world);
    let rucio = OAuthClient::new(world, "rucio", "rucio-secret");
    let fts = OAuthClient::new(world, "fts", "fts-secret");
    world
        .seed_file("source", "/data/in/file.root", b"physics")
        .map_err(|e| setup_failure(variant.scenario_name(), e))?;

    let root = run.step(|ctx, _| {
        let tokens = match variant {
            DelegationVariant::AdminCredential => rucio
                .client_credentials(ctx, "storage.read:/data storage.write:/data storage.create:/data")
                .map_err(refused)?,
            _ => {
                let code = rucio.login(
                    ctx,
                    "alice",
                    "wonderland",
                    "openid storage.read:/data storage.write:/data",
                )?;
                rucio.exchange_code(ctx, &code).map_err(refused)?
            }
        };
        Ok(tokens.access_token)
    })?;
    let root_claims = claims_of(&root).map_err(|e| setup_failure(variant.scenario_name(), e))?;

    let hop1 = run.step(|ctx, w| {
        let fts_aud = w.url("fts");
        let t = rucio
            .exchange(
                ctx,
                root.as_str(),
                fts_aud,
                "storage.read:/data/in storage.write:/data/out",
            )
            .map_err(refused)?;
        let claims = claims_of(&t.access_token)?;
        check_hop(ctx, "hop 1", &root_claims, &claims, fts_aud);
        Ok((t.access_token, claims))
    })?;

    // The transfer is queued for a while before the service picks it up.
    world.clock.advance(300);

    let (src, dst) = run.step(|ctx, w| {
        let (src_aud, dst_aud) = (w.url("source"), w.url("dest"));
        let write_scope = match variant {
            DelegationVariant::BroadeningAttempt => "storage.write:/data",
            _ => "storage.write:/data/out",
        };
        let src = fts
            .exchange(ctx, hop1.0.as_str(), src_aud, "storage.read:/data/in")
            .map_err(refused)?;
        let dst = fts
            .exchange(ctx, hop1.0.as_str(), dst_aud, write_scope)
            .map_err(refused)?;
        let (sc, dc) = (claims_of(&src.access_token)?, claims_of(&dst.access_token)?);
        check_hop(ctx, "hop 2 (source)", &hop1.1, &sc, src_aud);
        check_hop(ctx, "hop 2 (destination)", &hop1.1, &dc, dst_aud);
        ctx.check(
            "hop 2 lifetime reaches the parent's cap",
            expires_at(&sc) == expires_at(&hop1.1),
            format!("{} vs {}", expires_at(&sc), expires_at(&hop1.1)),
        );
        ctx.check(
            "sub identical across the whole chain",
            sc.sub == root_claims.sub && dc.sub == root_claims.sub,
            "",
        );
        Ok((src.access_token, dst.access_token))
    })?;

    run.step(|ctx, w| {
        let (status, body) = w.storage_call(
            ctx,
            "source",
            "GET",
            "/data/in/file.root",
            Some(src.as_str()),
            b"",
        )?;
        ctx.check("source read allowed", status == 200, status);
        let (status, _) = w.storage_call(
            ctx,
            "dest",
            "PUT",
            "/data/out/file.root",
            Some(dst.as_str()),
            &body,
        )?;
        ctx.check("destination write allowed", status == 201, status);
        let (status, copied) =
            w.storage_call(ctx, "dest", "GET", "/data/out/file.root", Some(dst.as_str()), b"")?;
        ctx.check(
            "read on the write-only destination token forbidden",
            status == 403,
            status,
        );
        ctx.check(
            "nothing leaked from the denied read",
            copied.len() < body.len() || status != 200,
            "",
        );
        Ok(())
    })?;

    run.step(|ctx, w| {
        let cases = [
            ("source", dst.as_str(), "destination token at the source"),
            ("dest", src.as_str(), "source token at the destination"),
            ("source", hop1.0.as_str(), "transfer-service token at the source"),
            ("source", root.as_str(), "orchestrator token at the source"),
        ];
        for (resource, token, what) in cases {
            let (status, _) = w.storage_call(ctx, resource, "GET", "/data/in/file.root", Some(token), b"")?;
            ctx.check(format!("{what} rejected with 401"), status == 401, status);
        }
        Ok(())
    })?;

    Ok(run.finish())
}

pub fn run_refresh_long_lived() -> Outcome {
    on_loopback("refresh-long-lived", run_refresh_long_lived_on)
}

/// A job outliving many access tokens, bridged by rotating refreshes.
pub fn run_refresh_long_lived_on(world: &World) -> Outcome {
    let mut script = vec![(
        "client".to_string(),
        "log in and redeem the code".to_string(),
        "access and refresh tokens".to_string(),
    )];
    for i in 1..=REFRESH_CYCLES {
        script.push((
            "client".into(),
            format!("cycle {i}: outlive the access token, refresh, resume"),
            "401 before refresh, success after; old handle dead".into(),
        ));
    }
    script.push((
        "client".into(),
        format!("{STRESS_THREADS} concurrent refreshes with one handle"),
        "exactly one succeeds".into(),
    ));
    script.push((
        "resource".into(),
        "summarize the job".into(),
        "no failed calls after refresh; at most two trust fetches".into(),
    ));
    let script_refs: Vec<(&str, &str, &str)> = script
        .iter()
        .map(|(a, b, c)| (a.as_str(), b.as_str(), c.as_str()))
        .collect();
    let scenario = Scenario::new("refresh-long-lived", &["client", "resource"], &script_refs)
        .expect("script names declared actors");
    let mut run = Run::new(scenario, world);
    let portal = OAuthClient::new(world, "portal", "portal-secret");
    let path = "/home/alice/job.log";

    let (mut current, subject) = run.step(|ctx, w| {
        let code = portal.login(ctx, "alice", "wonderland", PORTAL_SCOPE)?;
        let tokens = portal.exchange_code(ctx, &code).map_err(refused)?;
        ctx.check("refresh token issued", tokens.refresh_token.is_some(), "");
        let (status, _) = w.storage_call(
            ctx,
            "storage",
            "PUT",
            path,
            Some(tokens.access_token.as_str()),
            b"start",
        )?;
        ctx.check("initial write allowed", status == 201, status);
        let sub = claims_of(&tokens.access_token)?.sub.unwrap_or_default();
        Ok((tokens, sub))
    })?;

    let mut retired: Vec<String> = Vec::new();
    let mut refreshes = 0;
    for cycle in 1..=REFRESH_CYCLES {
        current = run.step(|ctx, w| {
            expire(w, &claims_of(&current.access_token)?);
            let (status, _) = w.storage_call(
                ctx,
                "storage",
                "GET",
                path,
                Some(current.access_token.as_str()),
                b"",
            )?;
            ctx.check("expired token rejected with 401", status == 401, status);
            let handle = current.refresh_token.clone().ok_or("no refresh token held")?;
            let next: TokenResponse = portal.refresh(ctx, &handle).map_err(refused)?;
            refreshes += 1;
            let new_handle = next.refresh_token.clone().ok_or("refresh returned no handle")?;
            ctx.check("handle rotated", new_handle != handle, "");
            retired.push(handle.clone());

            let (status, _) = w.storage_call(
                ctx,
                "storage",
                "PUT",
                path,
                Some(next.access_token.as_str()),
                format!("cycle {cycle}").as_bytes(),
            )?;
            ctx.check("resource call after refresh succeeds", status == 201, status);

            let replay = portal.refresh(ctx, &handle);
            ctx.check(
                "replaying the rotated handle is invalid_grant",
                matches!(&replay, Err(f) if f.body.error == "invalid_grant"),
                "",
            );
            let now = w.now();
            let dead = retired
                .iter()
                .all(|h| w.issuer.store().check_refresh(h, "portal", now).is_err());
            ctx.check("every rotated-out handle is dead", dead, "");
            let live = w.issuer.store().live_refresh_handles("portal", &subject, now);
            ctx.check(
                "exactly one live handle",
                live.len() == 1 && live[0] == new_handle,
                live.len(),
            );
            Ok(next)
        })?;
    }

    current = run.step(|ctx, w| {
        let handle = current.refresh_token.clone().ok_or("no refresh token held")?;
        let barrier = Barrier::new(STRESS_THREADS);
        let results: Vec<Result<TokenResponse, OAuthFailure>> = std::thread::scope(|s| {
            let workers: Vec<_> = (0..STRESS_THREADS)
                .map(|_| {
                    s.spawn(|| {
                        barrier.wait();
                        portal.send(&[("grant_type", "refresh_token"), ("refresh_token", &handle)])
                    })
                })
                .collect();
            workers
                .into_iter()
                .map(|h| h.join().expect("refresh worker"))
                .collect()
        });
        let winners: Vec<&TokenResponse> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
        let losers = results
            .iter()
            .filter(|r| matches!(r, Err(f) if f.body.error == "invalid_grant"))
            .count();
        ctx.exchange(
            format!(
                "{STRESS_THREADS} x POST {}/token refresh_token",
                w.issuer.issuer_url()
            ),
            200,
            format!("{} succeeded, {losers} invalid_grant", winners.len()),
        );
        ctx.check(
            "exactly one concurrent refresh wins",
            winners.len() == 1,
            winners.len(),
        );
        ctx.check(
            "all others get invalid_grant",
            losers == STRESS_THREADS - 1,
            losers,
        );
        let winner = (*winners.first().ok_or("no refresh succeeded")?).clone();
        refreshes += 1;
        retired.push(handle);
        let live = w.issuer.store().live_refresh_handles("portal", &subject, w.now());
        ctx.check("still exactly one live handle", live.len() == 1, live.len());
        Ok(winner)
    })?;

    run.step(|ctx, w| {
        let (status, body) = w.storage_call(
            ctx,
            "storage",
            "GET",
            path,
            Some(current.access_token.as_str()),
            b"",
        )?;
        ctx.check("job output readable with the final token", status == 200, status);
        ctx.check(
            "last cycle's write is visible",
            body == format!("cycle {REFRESH_CYCLES}").as_bytes(),
            String::from_utf8_lossy(&body),
        );
        ctx.check("refresh count", refreshes == REFRESH_CYCLES + 1, refreshes);
        let fetches = w.fetch_counts()["storage"];
        ctx.check("at most two trust fetches over the job", fetches <= 2, fetches);
        Ok(())
    })?;

    Ok(run.finish())
}
