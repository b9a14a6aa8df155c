//! Network, parameters, autodiff and optimization.

pub mod checkpoint;
pub mod graph;
pub mod heads;
pub mod net;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, NodeId};
pub use heads::{decode_detections, AnchorGrid, DetOutputs, SegLogits};
pub use net::{forward, infer, EmaTeacher, NetSpec, ParamStore};
pub use optim::{poly_lr, Sgd, SgdConfig};
pub use tensor::{Scalar, Tensor};
