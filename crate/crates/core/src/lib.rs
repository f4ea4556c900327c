//! VAANet: visual-audio attention networks for video emotion recognition.
//!
//! Numerics and autodiff ([`numerics`]), residual backbones ([`backbone`]),
//! attention sub-networks ([`attention`]), the full model ([`model`]),
//! losses ([`loss`]), MFCC audio features ([`audio`]), video data
//! ([`data`]) and the training / evaluation harness ([`harness`]).

pub mod attention;
pub mod audio;
pub mod backbone;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod par;
pub mod params;

pub use error::{Error, Result};
