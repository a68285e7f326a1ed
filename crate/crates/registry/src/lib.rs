//! Exchange point for safety specs and behavior-tree documents: an
//! immutable, digest-checked file store, its HTTP service and a client.

mod client;
mod server;
mod store;

pub use client::{Client, ClientError};
pub use server::{router, serve, ConflictBody, ErrorBody, ServerHandle, DIGEST_HEADER, PUBLISHER_HEADER};
pub use store::{
    check_name, check_version, sha256_hex, validate_payload, AuditFinding, AuditReport, Kind, Published, QueryEntry,
    Record, RecordMeta, Store, StoreError,
};
