pub mod bench;
pub mod charts;
pub mod diagnose;
pub mod metrics;
pub mod retrieval;

pub use bench::{efficiency_benchmark, BenchMode, BenchProtocol, LatencyReport};
pub use diagnose::{expert_activation_profile, routing_balance, trajectory_similarity, ActivationProfile, TrajectoryReport};
pub use metrics::{hit_at_1, ndcg_at_k, RetrievalPool};
pub use retrieval::{evaluate_retrieval, RetrievalReport};
