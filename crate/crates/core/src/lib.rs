pub mod autodiff;
pub mod contrastive;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod meta;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
