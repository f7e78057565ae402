//! HTTP service and command-line front end for the air quality pipeline.
//!
//! One process hosts every edge cloud and the remote store. Samples posted
//! to the service are routed to the edge owning their location; closed
//! slots are shipped to the store as batches, spooled to disk and fused.

pub mod cli;
pub mod config;
pub mod http;
pub mod state;

pub use config::ServiceConfig;
pub use state::Service;
