pub mod dataset;
pub mod inject;
pub mod metrics;
pub mod pipeline;
pub mod report;
