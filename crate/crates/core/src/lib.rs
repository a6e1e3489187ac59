//! Streaming map/reduce shuffle stage.
//!
//! Mappers read one input partition each, keep a rolling window of mapped
//! batches in memory and serve them to reducers over a pull-based `GetRows`
//! call. Reducers commit the effect of each pulled batch together with their
//! own progress markers in a single transaction, which makes delivery
//! exactly-once without persisting the shuffled rows themselves. Only small
//! meta-state rows (indexes and continuation tokens) ever hit storage.
//!
//! Module map:
//!
//! * [`row`]: typed rows, rowsets and their canonical binary encoding.
//! * [`store`]: embedded transactional store (sorted and ordered tables).
//! * [`input`]: partition readers with continuation tokens.
//! * [`mapper`]: mapper runtime (window, buckets, `GetRows`, trimming).
//! * [`reducer`]: reducer runtime (fetch round, reduce, atomic commit).
//! * [`transport`]: `GetRows` messages, wire framing, discovery and the
//!   simulated network fabric.

pub mod control;
pub mod input;
pub mod mapper;
pub mod reducer;
pub mod row;
pub mod store;
pub mod transport;

mod clock;
mod guid;

pub use clock::{Clock, ManualClock, SystemClock};
pub use guid::Guid;
