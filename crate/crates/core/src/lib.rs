//! Building-energy telemetry for school facilities.
pub mod analytics;
pub mod engagement;
pub mod ingest;
pub mod model;
pub mod notify;
pub mod platform;
pub mod rules;
pub mod sim;
pub mod store;
