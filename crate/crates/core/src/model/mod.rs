//! Parameter storage, composite architectures and checkpoints.

pub mod checkpoint;
mod composite;
mod init;
mod store;

pub use checkpoint::{Archive, Record};
pub use composite::{
    Architecture, CompositeModel, LayerPlan, Layout, SharedDepth, Slot, SlotKind,
    StandaloneModel, Submodel, Which,
};
pub use init::{init_tensor, unscoped};
pub use store::{Ownership, ParamEntry, ParameterStore};
