//! Digit data: IDX ingestion, preprocessing to `3 x 32 x 32` in `[-1, 1]`, and
//! synthetic shifted target domains.

mod dataset;
pub mod idx;
pub mod shift;

pub use dataset::{bilinear_resize, load_idx, LabeledDataset};
pub use shift::{
    apply_shift, channel_variance, colored_background, make_eval_suite, mean_l2_distortion, ShiftFamily, ShiftSpec,
    MAX_SEVERITY,
};
