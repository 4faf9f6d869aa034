//! The SqueezeNet backbone with a pooled two-layer classification head.
//!
//! Layers are split into four learning-rate groups:
//!
//! | group | layers                                |
//! |-------|---------------------------------------|
//! | 1     | conv1, maxpool1, fire1                |
//! | 2     | fire2, fire3, maxpool2, fire4         |
//! | 3     | fire5, fire6, fire7, maxpool3         |
//! | 4     | fire8 and the whole head              |

mod checkpoint;
mod network;
mod params;
mod spec;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, FLAG_OPTIMIZER_STATE};
pub use network::{ForwardPass, Init, Mode, SqueezeNet};
pub use params::{Param, ParamRole, ParamStore};
pub use spec::{FireSpec, HeadSpec, LayerSpec, NetworkSpec, CRC_CLASS_NAMES, NUM_GROUPS};
