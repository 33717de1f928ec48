pub mod cli;
pub mod donation;
pub mod engine;
pub mod governance;
pub mod ingestion;
pub mod metrics;
pub mod model;
pub mod pricing;
pub mod quantity;
pub mod trading;
