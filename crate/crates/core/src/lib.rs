//! Dataset-to-accelerator toolchain for level-based flow soft sensors.
//!
//! The pipeline runs: flume data ([`hydrosim`], [`dataset`]) → float MLP
//! ([`mlp`]) → int8 integer-only model ([`quant`]) → cycle-level accelerator
//! emulation ([`emu`]) → VHDL bundle and golden vectors ([`rtlgen`]) →
//! resource and energy estimates ([`costmodel`]). [`pipeline`] strings the
//! stages together behind the `forge` command line.

pub mod artifact;
pub mod costmodel;
pub mod dataset;
pub mod emu;
pub mod error;
pub mod hydrosim;
pub mod mlp;
pub mod pipeline;
pub mod quant;
pub mod rtlgen;

pub use error::{Error, Result};
