pub mod authz;
pub mod clock;
pub mod guard;
pub mod harness;
pub mod http;
pub mod issuer;
pub mod token;
pub mod trust;
