//! Annotation service: hands statement forms to annotators, records their
//! judgments and exports the resulting bandit log.

pub mod http;
pub mod store;

pub use http::{router, serve, SharedStore};
pub use store::{Clock, Export, FormPayload, FormStore, ManualClock, Receipt, StoreConfig, StoreError, SystemClock, TimingSummary};
