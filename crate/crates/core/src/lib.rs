//! Kinetostatic analysis of five-bar and serial manipulators, with force
//! rendering laws and iso-conditioning atlases.

pub mod atlas;
pub mod conditioning;
pub mod error;
pub mod fivebar;
pub mod forcefield;
pub mod minimize;
pub mod model;
pub mod protocol;
pub mod serialchain;
pub mod session;
pub mod verify;

pub use error::{Error, Result};
