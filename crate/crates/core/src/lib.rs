//! Core engine for progressive DPSIR taxonomy mining.

pub mod circular;
pub mod clock;
pub mod cluster;
pub mod corpus;
pub mod engine;
pub mod fixtures;
pub mod gateway;
pub mod layout;
pub mod par;
pub mod pipeline;
pub mod store;
pub mod taxonomy;
pub mod uncertainty;
