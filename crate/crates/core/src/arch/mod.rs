//! Restormer-style building blocks driven by flat parameter vectors.

mod block;
mod layout;

pub use block::{
    gdfn_forward, mdta_forward, resample_down, resample_up, skip_fuse, transformer_block_forward,
    LN_EPS, NORMALIZE_EPS,
};
pub use layout::*;
