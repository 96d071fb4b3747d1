//! Room-equalization modelling and low-frequency compensation for simulated
//! room impulse responses, plus the far-field augmentation pipeline that
//! consumes them.
//!
//! The pipeline runs at a canonical 16 kHz:
//!
//! 1. [`spectral`] measures 8-point sub-band EQ vectors from impulse responses.
//! 2. [`eq_model`] fits a Gaussian mixture over the 7 free EQ dimensions and
//!    samples new targets from it.
//! 3. [`fir_design`] turns a gain difference into a 511-tap linear-phase FIR.
//! 4. [`compensate`] applies that filter to simulated IRs (from [`room_sim`]
//!    or any other simulator).
//! 5. [`augment`] convolves clean speech with IRs, aligns the direct path and
//!    mixes noise at a target SNR.
//!
//! [`dataset`] keeps manifests and splits reproducible; every random draw is
//! derived from a master seed through [`seed::item_seed`].

pub mod audio_io;
pub mod augment;
pub mod compensate;
pub mod conv;
pub mod dataset;
pub mod eq_model;
pub mod eq_table;
mod error;
pub mod fir_design;
pub mod room_sim;
pub mod seed;
pub mod spectral;

pub use audio_io::{AudioBuffer, SampleFormat};
pub use error::{Error, Result};
pub use spectral::{ImpulseResponse, SpectrumDb, SubBandEq};

/// Sample rate every analysis and design stage assumes.
pub const CANONICAL_RATE: u32 = 16_000;
