//! Desk-scale workbench for vision-to-action tracking with a two-motor
//! continuum endoscope.
//!
//! The crate covers the whole pipeline: a bending-kinematics simulator and
//! renderer ([`sim`]), automated labeling with an oracle controller
//! ([`annotate`]), the `[x,y,w,h]a` output language ([`format`]), verifiable
//! rewards ([`rewards`]), a small autoregressive token policy with exact
//! gradients ([`policy`]), supervised and group-relative reinforcement
//! training ([`trainer`]) and closed-loop evaluation ([`eval`]).

pub mod action;
pub mod annotate;
pub mod bbox;
pub mod error;
pub mod eval;
pub mod format;
pub mod rewards;
pub mod policy;
pub mod scenes;
pub mod seed;
pub mod sim;
pub mod trainer;

pub use action::Action;
pub use bbox::BBox;
pub use error::{Error, Result};
