//! Hyper-parameterised restoration: the degradation-aware classifier, the
//! per-block selectors and weight boxes, and the full U-shaped model.

mod dac;
mod desc;
mod model;
mod select;

pub use dac::{dac_backbone_step, dac_forward, dac_widths, DacParams, DacStage, DacStageVars, DacVars, DAC_STAGES};
pub use desc::{hyperize, parse_split, restormer_desc, ArchDesc, Role, StageDesc};
pub use model::{BlockId, HairModel, ModelConfig, ModelOutput, IMAGE_CHANNELS};
pub use select::{
    hsn_select, hypertrans_forward, hypertrans_forward_selected, init_fcnn, weightbox_mix, FcnnVars, Giv,
    HyperTransBlock, SelectingVector, WeightBox,
};
