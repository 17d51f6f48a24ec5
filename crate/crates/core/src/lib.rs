//! Learned compress-and-forward relaying for the Gaussian primitive diamond
//! relay channel, with exact quadrature evaluation of every learned quantity.

pub mod bounds;
pub mod channel;
pub mod constellation;
pub mod demodulator;
pub mod error;
pub mod exact_eval;
pub mod info;
pub mod experiment;
pub mod nn;
pub mod plot;
pub mod relay_codec;
pub mod trainer;

pub use constellation::{Constellation, Modulation};
pub use error::{Error, Result};
