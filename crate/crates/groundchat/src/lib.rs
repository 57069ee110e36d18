//! Chat service and command line around `groundchat-core`.

pub mod api;
pub mod commands;
pub mod error;
pub mod service;
pub mod session;
pub mod store;
