//! NV-centre electron spin coupled to a first-shell ¹³C nucleus: exact
//! spectra, hyperfine tensor analysis and fitting.

pub mod error;
pub mod fit;
pub mod io;
pub mod spectra;
pub mod spin;
pub mod tensor;

pub use error::{Error, Result};
