//! Residual spatial attention network for binary vessel segmentation.
//!
//! The crate is self-contained: a small NHWC tensor type with reverse-mode
//! autodiff ([`autodiff`]), the network building blocks ([`nn`]), the
//! encoder-decoder assembly and its ablation variants ([`net`]), training
//! ([`train`]), evaluation ([`metrics`]) and the data pipeline ([`data`]).

pub mod autodiff;
pub mod check;
pub mod checkpoint;
pub mod data;
pub mod element;
pub mod error;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Padding, Var};
pub use element::Element;
pub use error::{Error, Result};
pub use net::{Network, NetworkConfig, Variant};
pub use nn::{DropBlockConfig, Mode};
pub use tensor::Tensor;
