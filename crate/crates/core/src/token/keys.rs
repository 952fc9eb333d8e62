//! Signing keys, verification keys and their JWK forms.

use std::fmt;

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine;
use p256::ecdsa::signature::{Signer, Verifier};
use p256::pkcs8::{DecodePrivateKey, EncodePrivateKey, LineEnding};
use rand::{CryptoRng, RngCore};
use rsa::signature::SignatureEncoding;
use rsa::traits::PublicKeyParts;
use rsa::{BigUint, RsaPrivateKey, RsaPublicKey};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::TokenError;

const RSA_BITS: usize = 2048;

/// The signature algorithms tokens may be signed with. Nothing else,
/// including `none`, is ever accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    RS256,
    ES256,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::RS256 => "RS256",
            Algorithm::ES256 => "ES256",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, TokenError> {
        match name {
            "RS256" => Ok(Algorithm::RS256),
            "ES256" => Ok(Algorithm::ES256),
            other => Err(TokenError::UnsupportedAlgorithm(other.to_string())),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = TokenError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::from_name(s)
    }
}

#[derive(Clone)]
enum PrivateMaterial {
    Rsa(Box<RsaPrivateKey>),
    Ec(p256::ecdsa::SigningKey),
}

#[derive(Debug, Clone, PartialEq)]
enum PublicMaterial {
    Rsa(RsaPublicKey),
    Ec(p256::ecdsa::VerifyingKey),
}

/// A private signing key. The kid is the RFC 7638 thumbprint of the public
/// half, so it is stable across reloads of the same key file.
#[derive(Clone)]
pub struct KeyPair {
    kid: String,
    algorithm: Algorithm,
    material: PrivateMaterial,
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("kid", &self.kid)
            .field("algorithm", &self.algorithm)
            .finish_non_exhaustive()
    }
}

impl KeyPair {
    pub fn generate<R: RngCore + CryptoRng>(algorithm: Algorithm, rng: &mut R) -> Result<Self, TokenError> {
        let material = match algorithm {
            Algorithm::RS256 => PrivateMaterial::Rsa(Box::new(
                RsaPrivateKey::new(rng, RSA_BITS).map_err(|e| TokenError::Key(e.to_string()))?,
            )),
            Algorithm::ES256 => PrivateMaterial::Ec(p256::ecdsa::SigningKey::random(rng)),
        };
        Ok(Self::from_material(material))
    }

    fn from_material(material: PrivateMaterial) -> Self {
        let algorithm = match material {
            PrivateMaterial::Rsa(_) => Algorithm::RS256,
            PrivateMaterial::Ec(_) => Algorithm::ES256,
        };
        let mut pair = Self {
            kid: String::new(),
            algorithm,
            material,
        };
        pair.kid = pair.public_key_untagged().thumbprint();
        pair
    }

    /// Loads a PKCS#8 PEM private key (RSA or P-256).
    pub fn from_pkcs8_pem(pem: &str) -> Result<Self, TokenError> {
        if let Ok(rsa) = RsaPrivateKey::from_pkcs8_pem(pem) {
            return Ok(Self::from_material(PrivateMaterial::Rsa(Box::new(rsa))));
        }
        p256::ecdsa::SigningKey::from_pkcs8_pem(pem)
            .map(|k| Self::from_material(PrivateMaterial::Ec(k)))
            .map_err(|e| TokenError::Key(format!("not an RSA or P-256 PKCS#8 key: {e}")))
    }

    pub fn to_pkcs8_pem(&self) -> Result<String, TokenError> {
        let pem = match &self.material {
            PrivateMaterial::Rsa(k) => k.to_pkcs8_pem(LineEnding::LF),
            PrivateMaterial::Ec(k) => k.to_pkcs8_pem(LineEnding::LF),
        }
        .map_err(|e| TokenError::Key(e.to_string()))?;
        Ok(pem.to_string())
    }

    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    fn public_key_untagged(&self) -> VerificationKey {
        let material = match &self.material {
            PrivateMaterial::Rsa(k) => PublicMaterial::Rsa(k.to_public_key()),
            PrivateMaterial::Ec(k) => PublicMaterial::Ec(*k.verifying_key()),
        };
        VerificationKey {
            kid: self.kid.clone(),
            algorithm: self.algorithm,
            material,
        }
    }

    pub fn public_key(&self) -> VerificationKey {
        self.public_key_untagged()
    }

    pub(crate) fn sign(&self, message: &[u8]) -> Vec<u8> {
        match &self.material {
            PrivateMaterial::Rsa(k) => {
                let signer = rsa::pkcs1v15::SigningKey::<Sha256>::new((**k).clone());
                signer.sign(message).to_vec()
            }
            PrivateMaterial::Ec(k) => {
                let sig: p256::ecdsa::Signature = k.sign(message);
                sig.to_bytes().to_vec()
            }
        }
    }
}

/// A public key able to check token signatures.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationKey {
    kid: String,
    algorithm: Algorithm,
    material: PublicMaterial,
}

impl VerificationKey {
    pub fn kid(&self) -> &str {
        &self.kid
    }

    pub fn algorithm(&self) -> Algorithm {
        self.algorithm
    }

    /// Returns a copy carrying a different kid.
    pub fn with_kid(mut self, kid: impl Into<String>) -> Self {
        self.kid = kid.into();
        self
    }

    pub(crate) fn verify(&self, message: &[u8], signature: &[u8]) -> bool {
        match &self.material {
            PublicMaterial::Rsa(k) => {
                let verifier = rsa::pkcs1v15::VerifyingKey::<Sha256>::new(k.clone());
                rsa::pkcs1v15::Signature::try_from(signature)
                    .map(|sig| verifier.verify(message, &sig).is_ok())
                    .unwrap_or(false)
            }
            PublicMaterial::Ec(k) => p256::ecdsa::Signature::from_slice(signature)
                .map(|sig| k.verify(message, &sig).is_ok())
                .unwrap_or(false),
        }
    }

    fn thumbprint_input(&self) -> String {
        // RFC 7638: required members only, lexicographic order, no whitespace.
        match &self.material {
            PublicMaterial::Rsa(k) => format!(
                r#"{{"e":"{}","kty":"RSA","n":"{}"}}"#,
                b64(&k.e().to_bytes_be()),
                b64(&k.n().to_bytes_be())
            ),
            PublicMaterial::Ec(k) => {
                let (x, y) = ec_coordinates(k);
                format!(r#"{{"crv":"P-256","kty":"EC","x":"{x}","y":"{y}"}}"#)
            }
        }
    }

    pub fn thumbprint(&self) -> String {
        b64(&Sha256::digest(self.thumbprint_input().as_bytes()))
    }

    pub fn to_jwk(&self) -> Jwk {
        let mut jwk = Jwk {
            kid: Some(self.kid.clone()),
            alg: Some(self.algorithm.as_str().to_string()),
            key_use: Some("sig".into()),
            ..Jwk::default()
        };
        match &self.material {
            PublicMaterial::Rsa(k) => {
                jwk.kty = "RSA".into();
                jwk.n = Some(b64(&k.n().to_bytes_be()));
                jwk.e = Some(b64(&k.e().to_bytes_be()));
            }
            PublicMaterial::Ec(k) => {
                let (x, y) = ec_coordinates(k);
                jwk.kty = "EC".into();
                jwk.crv = Some("P-256".into());
                jwk.x = Some(x);
                jwk.y = Some(y);
            }
        }
        jwk
    }

    /// Builds a key from a JWK. A missing `kid` is replaced by the thumbprint;
    /// a present `alg` must agree with the key type.
    pub fn from_jwk(jwk: &Jwk) -> Result<Self, TokenError> {
        let bad = |what: &str| TokenError::Key(format!("invalid JWK: {what}"));
        let (algorithm, material) = match jwk.kty.as_str() {
            "RSA" => {
                let n = unb64(jwk.n.as_deref().ok_or_else(|| bad("missing n"))?)?;
                let e = unb64(jwk.e.as_deref().ok_or_else(|| bad("missing e"))?)?;
                let key = RsaPublicKey::new(BigUint::from_bytes_be(&n), BigUint::from_bytes_be(&e))
                    .map_err(|e| bad(&e.to_string()))?;
                (Algorithm::RS256, PublicMaterial::Rsa(key))
            }
            "EC" => {
                if jwk.crv.as_deref() != Some("P-256") {
                    return Err(TokenError::UnsupportedAlgorithm(format!(
                        "EC curve {:?}",
                        jwk.crv
                    )));
                }
                let x = unb64(jwk.x.as_deref().ok_or_else(|| bad("missing x"))?)?;
                let y = unb64(jwk.y.as_deref().ok_or_else(|| bad("missing y"))?)?;
                if x.len() != 32 || y.len() != 32 {
                    return Err(bad("P-256 coordinates must be 32 bytes"));
                }
                let coord = |v: Vec<u8>| {
                    p256::FieldBytes::from(<[u8; 32]>::try_from(v.as_slice()).expect("checked length"))
                };
                let point = p256::EncodedPoint::from_affine_coordinates(&coord(x), &coord(y), false);
                let key =
                    p256::ecdsa::VerifyingKey::from_encoded_point(&point).map_err(|e| bad(&e.to_string()))?;
                (Algorithm::ES256, PublicMaterial::Ec(key))
            }
            other => return Err(TokenError::UnsupportedAlgorithm(format!("kty {other}"))),
        };
        if let Some(alg) = &jwk.alg {
            if Algorithm::from_name(alg)? != algorithm {
                return Err(bad("alg does not match key type"));
            }
        }
        let mut key = VerificationKey {
            kid: String::new(),
            algorithm,
            material,
        };
        key.kid = match &jwk.kid {
            Some(kid) => kid.clone(),
            None => key.thumbprint(),
        };
        Ok(key)
    }
}

fn ec_coordinates(k: &p256::ecdsa::VerifyingKey) -> (String, String) {
    let point = k.to_encoded_point(false);
    (
        b64(point.x().expect("uncompressed point has x")),
        b64(point.y().expect("uncompressed point has y")),
    )
}

pub(crate) fn b64(bytes: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(bytes)
}

pub(crate) fn unb64(text: &str) -> Result<Vec<u8>, TokenError> {
    URL_SAFE_NO_PAD
        .decode(text)
        .map_err(|e| TokenError::Malformed(format!("base64url: {e}")))
}

/// A single JSON Web Key (public members only).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Jwk {
    pub kty: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kid: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alg: Option<String>,
    #[serde(rename = "use", skip_serializing_if = "Option::is_none")]
    pub key_use: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub e: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crv: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub y: Option<String>,
}

/// The `{"keys": [...]}` document served at a JWKS endpoint.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JwkSet {
    pub keys: Vec<Value>,
}

impl JwkSet {
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a VerificationKey>) -> Self {
        Self {
            keys: keys
                .into_iter()
                .map(|k| serde_json::to_value(k.to_jwk()).expect("JWK serializes"))
                .collect(),
        }
    }

    /// Parses every usable signing key. Entries of other types or with
    /// unsupported algorithms are skipped; duplicate kids are an error.
    pub fn verification_keys(&self) -> Result<Vec<VerificationKey>, TokenError> {
        let mut out: Vec<VerificationKey> = Vec::new();
        for raw in &self.keys {
            let Ok(jwk) = serde_json::from_value::<Jwk>(raw.clone()) else {
                continue;
            };
            if jwk.key_use.as_deref().is_some_and(|u| u != "sig") {
                continue;
            }
            let key = match VerificationKey::from_jwk(&jwk) {
                Ok(key) => key,
                Err(TokenError::UnsupportedAlgorithm(alg)) => {
                    tracing::debug!(%alg, "skipping JWK with unsupported algorithm");
                    continue;
                }
                Err(e) => return Err(e),
            };
            if out.iter().any(|k| k.kid == key.kid) {
                return Err(TokenError::Key(format!("duplicate kid {:?} in key set", key.kid)));
            }
            out.push(key);
        }
        Ok(out)
    }
}
