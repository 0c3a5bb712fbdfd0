//! Deterministic discrete-event simulation of collaborative training over
//! slow, lossy links with peer churn.

pub mod demo;
pub mod engine;
pub mod metrics;
pub mod net;
pub mod scenario;

pub use demo::{train_demo, DemoConfig, DemoReport};
pub use engine::{simulate, Captures, MemberCapture, Outcome, RoundCapture, SimError, SimOptions, SimResult};
pub use metrics::{RoundMetrics, SimMetrics, CSV_HEADER};
pub use net::{delivery_time, transfer_seconds, Delivery, Link, NetError, Network};
pub use scenario::{ChurnKind, ChurnSpec, CodecKind, PeerSpec, RoundPoint, Scenario, ScenarioError};
