//! Identifiability analysis for bifactor, extended bifactor and two-tier
//! latent variable models with linear or probit links.

// Negated float comparisons are deliberate here: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod estimate;
pub mod fixtures;
pub mod ident;
pub mod io;
pub mod linalg;
pub mod model;
pub mod moments;
pub mod simulate;
pub mod structure;

pub use model::{Link, LoadingStructure, ModelError, ModelKind, ModelParams, UnrestrictedRhoParams};
pub use io::AnyParams;

#[cfg(doctest)]
mod booktest {
    macro_rules! booktest {
        ($i:ident) => {
            #[doc = include_str!(concat!("../../../book/src/", stringify!($i), ".md"))]
            mod $i {}
        };
    }
    booktest!(introduction);
    booktest!(models);
    booktest!(identifiability);
    booktest!(certificates);
    booktest!(moments);
    booktest!(fitting);
    booktest!(cli);
}
