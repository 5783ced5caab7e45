//! Relational databases as full-resolution heterogeneous graphs, with a
//! gated node/edge role network and functional-dependency regularisation.

pub mod tensor;
pub mod rdb;
pub mod schemagraph;
pub mod sampler;
pub mod model;
pub mod fdreg;
pub mod trainer;
pub mod synth;

pub use fdreg::{FdConfig, FdRegularizer};
pub use model::{GatedModel, GateMode, ModelConfig, RoleMode};
pub use rdb::{ingest_bundle, load_task, write_bundle, write_task, RelationalDatabase, Schema, TaskSpec, TaskType};
pub use schemagraph::{build_schema_graph, construct_reg, invert_reg, RelationalEntityGraph};
pub use synth::{Generated, SynthSpec};
pub use tensor::{ParamStore, Tape, Tensor};
pub use trainer::{load_checkpoint, read_gate_file, TrainConfig, TrainError, TrainOutcome, Trainer, Workspace};
