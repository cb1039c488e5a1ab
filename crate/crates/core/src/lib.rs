//! Controlled non-local continuity equations on discrete measures.
//!
//! Measures are finite weighted point clouds ([`measures`]). Distances between
//! them are exact Wasserstein-1 values from a network simplex solver
//! ([`transport`]). Interaction kernels and hypothesis probes live in
//! [`dynamics`]. Controlled particle dynamics, trajectory bundles and a priori
//! bounds are in [`inclusion`], convexified dynamics and chattering in
//! [`relaxation`], state-constrained optimal control in [`mayer`], and the
//! leader–follower evacuation scenario in [`evac`].
//!
//! ```
//! use wassinc::measures::DiscreteMeasure;
//! use wassinc::transport::w1_distance;
//!
//! let a = DiscreteMeasure::dirac(vec![0.0, 0.0]).unwrap();
//! let b = DiscreteMeasure::dirac(vec![3.0, 4.0]).unwrap();
//! assert_eq!(w1_distance(&a, &b).unwrap(), 5.0);
//! ```

pub mod dynamics;
pub mod evac;
pub mod inclusion;
pub mod io;
pub mod mayer;
pub mod measures;
pub mod relaxation;
pub mod transport;

use thiserror::Error;

/// Any error raised by this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Measure(#[from] measures::MeasureError),
    #[error(transparent)]
    Transport(#[from] transport::TransportError),
    #[error(transparent)]
    Kernel(#[from] dynamics::KernelError),
    #[error(transparent)]
    Field(#[from] dynamics::FieldError),
    #[error(transparent)]
    Solve(#[from] inclusion::SolveError),
    #[error(transparent)]
    Relaxation(#[from] relaxation::RelaxationError),
    #[error(transparent)]
    Mayer(#[from] mayer::MayerError),
    #[error(transparent)]
    Evac(#[from] evac::EvacError),
    #[error(transparent)]
    Io(#[from] io::IoError),
}

impl Error {
    /// True for bad inputs (configs, files, parameters) as opposed to numerical failures.
    pub fn is_validation(&self) -> bool {
        use inclusion::SolveError as S;
        match self {
            Error::Solve(S::NonFinite { .. } | S::NonFiniteAux { .. }) => false,
            Error::Transport(transport::TransportError::NoConvergence(_) | transport::TransportError::Infeasible(_)) => false,
            Error::Mayer(mayer::MayerError::NoCandidate(_)) => false,
            Error::Mayer(mayer::MayerError::Solve(S::NonFinite { .. } | S::NonFiniteAux { .. })) => false,
            Error::Relaxation(relaxation::RelaxationError::Solve(S::NonFinite { .. } | S::NonFiniteAux { .. })) => false,
            _ => true,
        }
    }
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/measures.md")]
    mod measures {}
    #[doc = include_str!("../../../book/src/transport.md")]
    mod transport {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/inclusion.md")]
    mod inclusion {}
    #[doc = include_str!("../../../book/src/relaxation.md")]
    mod relaxation {}
    #[doc = include_str!("../../../book/src/mayer.md")]
    mod mayer {}
    #[doc = include_str!("../../../book/src/evac.md")]
    mod evac {}
}
