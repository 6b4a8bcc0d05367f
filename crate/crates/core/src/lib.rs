//! Link-level simulation of a compact full-duplex 2x2 MIMO OFDM radio pair.

pub mod budget;
pub mod canceler;
pub mod channel;
pub mod detector;
pub mod dsp;
pub mod error;
pub mod grid;
pub mod link;
pub mod measure;
pub mod params;
pub mod sync;

pub use error::{Error, Result};
pub use params::SystemParams;
