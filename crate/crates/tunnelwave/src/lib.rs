//! Tunnel radio-propagation toolkit.
//!
//! The crate has two halves that meet in the dataset layer:
//!
//! * a split-step spectral parabolic-equation solver ([`pwe`]) that marches a
//!   transverse complex field along a tunnel whose cross-section comes from
//!   [`geometry`], emitting received-signal-strength (RSS) slices on paired
//!   coarse (3.2λ) and fine (0.4λ) transverse meshes, and
//! * a small differentiable tensor engine ([`tensor`]) plus the recurrent
//!   back-projection super-resolution network ([`prbpn`]) that reconstructs
//!   the fine-mesh slices from windows of coarse ones, trained by [`train`]
//!   and scored by [`metrics`].
//!
//! [`dataset`] enumerates simulation parameter grids, produces normalized
//! coarse/fine pairs and persists them in the `RSSV1` binary format. The
//! `tunnelwave` binary exposes the whole pipeline on the command line; see
//! [`cli`].

pub mod cli;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod prbpn;
pub mod pwe;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::Error;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;

/// Convenience result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
