//! Run many replicas of a record-processing program across LAN hosts.
//!
//! Replicas see one shared data storage: their reads and writes are
//! intercepted by a [`wrapper`] and served by the [`record_server`], while the
//! [`scheduler`] launches, suspends, activates and migrates replicas as host
//! CPU availability changes. [`taskmap`] turns a makefile into a task tree
//! for coarse-grained allocation, and [`sim`] runs the whole system on a
//! simulated LAN.

pub mod protocol;
pub mod record_server;
pub mod wrapper;
pub mod workload;
pub mod taskmap;
pub mod scheduler;
pub mod sim;
#[cfg(feature = "cli")]
pub mod cli;
