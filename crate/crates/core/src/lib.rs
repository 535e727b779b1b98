//! Workflow offloading over opportunistic networks, simulated.
//!
//! Clients submit chains of tasks; workers announce what they can run, pick
//! the next worker just in time (or follow a fixed assignment), and hand the
//! work on as bundles over a store-carry-forward network.

pub mod announce;
pub mod assignment;
pub mod bundle;
pub mod client;
pub mod harness;
pub mod metrics;
pub mod output;
pub mod sim;
pub mod scenario;
pub mod simnet;
pub mod worker;
pub mod workflow;

pub use announce::{CapabilityVector, OfferDatabase, ServiceOffer};
pub use assignment::{RatingWeights, Strategy};
pub use bundle::{Bundle, BundleKind, NodeAddress, WorkflowId};
pub use metrics::{ExperimentReport, FinalState, TaskPhases, WorkflowRecord};
pub use simnet::{LinkModel, Position};
pub use worker::{ErrorClass, ServiceDefinition, SyntheticProfile, WorkerError};
pub use workflow::{WorkflowDescription, WorkflowPlan};
