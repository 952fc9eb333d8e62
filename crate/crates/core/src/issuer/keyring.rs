use crate::token::{KeyPair, VerificationKey};

/// The active signing key plus retired keys that must stay published until
/// every token they signed has expired.
#[derive(Debug)]
pub struct KeyRing {
    active: KeyPair,
    retired: Vec<(VerificationKey, i64)>,
}

impl KeyRing {
    pub fn new(active: KeyPair) -> Self {
        Self {
            active,
            retired: Vec::new(),
        }
    }

    /// `extra` keys are published indefinitely but never sign.
    pub fn with_published(active: KeyPair, extra: impl IntoIterator<Item = VerificationKey>) -> Self {
        Self {
            active,
            retired: extra.into_iter().map(|k| (k, i64::MAX)).collect(),
        }
    }

    pub fn active(&self) -> &KeyPair {
        &self.active
    }

    /// Makes `next` the signing key. The previous key stays published until
    /// `retain_until`.
    pub fn rotate(&mut self, next: KeyPair, retain_until: i64) {
        let previous = std::mem::replace(&mut self.active, next);
        self.retired.retain(|(k, _)| k.kid() != self.active.kid());
        self.retired.push((previous.public_key(), retain_until));
    }

    pub fn published(&self, now: i64) -> Vec<VerificationKey> {
        let mut keys = vec![self.active.public_key()];
        for (key, until) in &self.retired {
            if now < *until && !keys.iter().any(|k| k.kid() == key.kid()) {
                keys.push(key.clone());
            }
        }
        keys
    }

    pub fn lookup(&self, kid: &str, now: i64) -> Option<VerificationKey> {
        self.published(now).into_iter().find(|k| k.kid() == kid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::Algorithm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn retired_key_published_until_retention_ends() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = KeyPair::generate(Algorithm::ES256, &mut rng).unwrap();
        let b = KeyPair::generate(Algorithm::ES256, &mut rng).unwrap();
        let (a_kid, b_kid) = (a.kid().to_string(), b.kid().to_string());
        let mut ring = KeyRing::new(a);
        ring.rotate(b, 100);
        assert_eq!(ring.active().kid(), b_kid);
        let kids: Vec<_> = ring.published(99).iter().map(|k| k.kid().to_string()).collect();
        assert_eq!(kids, vec![b_kid.clone(), a_kid.clone()]);
        assert!(ring.lookup(&a_kid, 99).is_some());
        assert!(ring.lookup(&a_kid, 100).is_none());
        assert_eq!(ring.published(100).len(), 1);
    }
}
