pub mod doorsim;
pub mod grad;
pub mod helpgate;
pub mod net;
pub mod returns;
pub mod trajlog;

pub use doorsim::{DoorWorldConfig, ExpertConfig, NoisyExpert, Policy, ScriptedExpert};
pub use helpgate::{ConfusionMatrix, GateConfig, GateSignal, Metrics, SweepResult};
pub use net::{InputSpec, Model, ModelConfig, TrainConfig, TrainMode};
pub use returns::{DistanceMetric, DistanceStats, LabeledDataset, ReturnConfig};
pub use trajlog::{Action, Dataset, FailureMode, Observation, ObservationSpec, Outcome, Provenance, Trajectory};
