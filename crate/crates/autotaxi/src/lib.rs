pub mod conflict;
pub mod dynamics;
pub mod error;
pub mod mpc;
pub mod qp;
pub mod sim;
pub mod trajectory;

pub use error::{Error, Result};

// Book chapters, compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dynamics.md")]
    mod dynamics {}
    #[doc = include_str!("../../../book/src/conflicts.md")]
    mod conflicts {}
    #[doc = include_str!("../../../book/src/trajectories.md")]
    mod trajectories {}
    #[doc = include_str!("../../../book/src/qp.md")]
    mod qp {}
    #[doc = include_str!("../../../book/src/mpc.md")]
    mod mpc {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
}
