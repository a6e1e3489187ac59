//! Everything between a reducer asking for rows and a mapper answering.
//!
//! [`messages`] defines `GetRows` and its framed wire form, [`discovery`]
//! the membership directory with delayed visibility, [`sim`] a seeded lossy
//! network for the deterministic harness and [`live`] a small TCP transport
//! carrying the same frames between processes.

pub mod discovery;
pub mod live;
pub mod messages;
pub mod sim;

pub use discovery::{Address, Discovery, Endpoint, WorkerKind};
pub use messages::{Frame, GetRowsError, GetRowsRequest, GetRowsResponse, RpcError, NOTHING_COMMITTED};
pub use sim::{Delivery, NetConfig, SimNetwork};
