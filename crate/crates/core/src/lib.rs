pub mod bridge;
pub mod captioner;
pub mod corpus;
pub mod jointspace;
pub mod metrics;
pub mod numerics;
