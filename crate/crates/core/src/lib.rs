//! Self-stabilizing multivalued consensus, its non-stabilizing baseline,
//! total-order broadcast and state-machine replication built on it, and a
//! deterministic simulator to exercise all of them under crashes, lossy
//! channels and arbitrary state corruption.

pub mod bc;
pub mod invariants;
pub mod mrt;
pub mod mv;
pub mod node;
pub mod rsm;
pub mod sim;
pub mod to_urb;
pub mod types;
pub mod urb;
pub mod wire;

pub use bc::{BcKey, BcObject, IdealBc};
pub use mv::{MvObject, MvSlot, Variant};
pub use types::{ConsensusResult, Message, MessageKind, ProcSet, ProcessId, ReadyVector, Stream, UrbPayload, Value};
pub use urb::{TxDescriptor, UrbService};
