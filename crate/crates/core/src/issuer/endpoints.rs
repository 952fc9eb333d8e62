//! HTTP routing for the issuer.

use std::collections::BTreeMap;

use http::header::{AUTHORIZATION, WWW_AUTHENTICATE};
use http::{Method, StatusCode};

use super::GrantType;
use super::{AuthorizeRequest, ClientCredentials, Issuer, IssuerError, Secret, TokenGrant};
use crate::http::{
    json_response, parse_basic_authorization, parse_form, redirect, request_params, HttpRequest,
    HttpResponse, Service,
};

pub const ACCESS_TOKEN_TYPE: &str = "urn:ietf:params:oauth:token-type:access_token";
pub const JWT_TOKEN_TYPE: &str = "urn:ietf:params:oauth:token-type:jwt";

fn error_response(err: &IssuerError) -> HttpResponse {
    let mut resp = json_response(err.status(), &err.to_body());
    if err.status() == StatusCode::UNAUTHORIZED {
        resp.headers_mut().insert(
            WWW_AUTHENTICATE,
            http::HeaderValue::from_static("Basic realm=\"token\""),
        );
    }
    resp
}

fn method_not_allowed() -> HttpResponse {
    json_response(
        StatusCode::METHOD_NOT_ALLOWED,
        &serde_json::json!({"error": "invalid_request", "error_description": "method not allowed"}),
    )
}

fn required(params: &BTreeMap<String, String>, name: &str) -> Result<String, IssuerError> {
    params
        .get(name)
        .filter(|v| !v.is_empty())
        .cloned()
        .ok_or_else(|| IssuerError::InvalidRequest(format!("missing parameter {name}")))
}

fn client_credentials(
    request: &HttpRequest,
    params: &BTreeMap<String, String>,
) -> Result<ClientCredentials, IssuerError> {
    let header = request
        .headers()
        .get(AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(parse_basic_authorization);
    let in_body = params.contains_key("client_secret");
    match (header, in_body) {
        (Some(_), true) => Err(IssuerError::InvalidRequest(
            "more than one client authentication method".into(),
        )),
        (Some((id, secret)), false) => Ok(ClientCredentials::new(id, secret)),
        (None, true) => Ok(ClientCredentials {
            client_id: required(params, "client_id")?,
            client_secret: Secret::new(params["client_secret"].clone()),
        }),
        (None, false) => Err(IssuerError::InvalidClient),
    }
}

fn token_grant(params: &BTreeMap<String, String>) -> Result<TokenGrant, IssuerError> {
    let raw = required(params, "grant_type")?;
    let grant = GrantType::from_wire(&raw).ok_or(IssuerError::UnsupportedGrantType(raw))?;
    let opt = |name: &str| params.get(name).cloned();
    Ok(match grant {
        GrantType::AuthorizationCode => TokenGrant::AuthorizationCode {
            code: required(params, "code")?,
            redirect_uri: opt("redirect_uri"),
        },
        GrantType::ClientCredentials => TokenGrant::ClientCredentials { scope: opt("scope") },
        GrantType::RefreshToken => TokenGrant::RefreshToken {
            refresh_token: required(params, "refresh_token")?,
            scope: opt("scope"),
        },
        GrantType::TokenExchange => {
            if let Some(t) = params.get("subject_token_type") {
                if t != ACCESS_TOKEN_TYPE && t != JWT_TOKEN_TYPE {
                    return Err(IssuerError::InvalidRequest(format!(
                        "unsupported subject_token_type {t:?}"
                    )));
                }
            }
            TokenGrant::TokenExchange {
                subject_token: required(params, "subject_token")?,
                audience: opt("audience"),
                scope: opt("scope"),
            }
        }
    })
}

impl Issuer {
    fn base_path(&self) -> String {
        url::Url::parse(self.issuer_url())
            .map(|u| u.path().trim_end_matches('/').to_string())
            .unwrap_or_default()
    }

    fn handle_token(&self, request: &HttpRequest) -> HttpResponse {
        let params = parse_form(request.body());
        let result = client_credentials(request, &params)
            .and_then(|creds| Ok((creds, token_grant(&params)?)))
            .and_then(|(creds, grant)| self.token(&creds, grant));
        match result {
            Ok(resp) => json_response(StatusCode::OK, &resp),
            Err(err) => {
                tracing::debug!(error = %err, "token request refused");
                error_response(&err)
            }
        }
    }

    fn handle_authorize(&self, request: &HttpRequest) -> HttpResponse {
        let params = request_params(request);
        let result = (|| {
            let req = AuthorizeRequest {
                client_id: required(&params, "client_id")?,
                redirect_uri: required(&params, "redirect_uri")?,
                scope: params.get("scope").cloned(),
                username: required(&params, "username")?,
                password: Secret::new(params.get("password").cloned().unwrap_or_default()),
            };
            let code = self.authorize(&req)?;
            Ok::<_, IssuerError>((req.redirect_uri, code))
        })();
        match result {
            Ok((redirect_uri, code)) => {
                let mut target = url::Url::parse(&redirect_uri).expect("registered URIs parse");
                {
                    let mut q = target.query_pairs_mut();
                    q.append_pair("code", &code);
                    if let Some(state) = params.get("state") {
                        q.append_pair("state", state);
                    }
                }
                redirect(target.as_str())
            }
            Err(err) => error_response(&err),
        }
    }
}

impl Service for Issuer {
    fn handle(&self, request: HttpRequest) -> HttpResponse {
        let base = self.base_path();
        let path = request.uri().path();
        let route = path.strip_prefix(base.as_str()).unwrap_or("");
        let is_get = request.method() == Method::GET;
        let rfc8414 = format!("/.well-known/oauth-authorization-server{base}");
        if path == rfc8414 || route == "/.well-known/openid-configuration" {
            return if is_get {
                json_response(StatusCode::OK, &self.metadata())
            } else {
                method_not_allowed()
            };
        }
        match route {
            "/jwks" if is_get => json_response(StatusCode::OK, &self.jwks()),
            "/authorize" if is_get || request.method() == Method::POST => self.handle_authorize(&request),
            "/token" if request.method() == Method::POST => self.handle_token(&request),
            "/jwks" | "/authorize" | "/token" => method_not_allowed(),
            _ => json_response(
                StatusCode::NOT_FOUND,
                &serde_json::json!({"error": "not_found", "error_description": path}),
            ),
        }
    }
}
