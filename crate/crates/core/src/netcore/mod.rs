//! The fully-convolutional network: backbone pyramid, per-location heads,
//! mask branch, and the dynamic mask head.

mod detect;
mod layers;
mod mask_head;
mod model;
mod params;
mod targets;

pub use detect::{decode_box, nms, upsample_threshold, DetectConfig, Detection};
pub use layers::{Conv2d, ConvBlock, FeatureMap, GroupNorm};
pub use mask_head::{concat_channels, mask_head, mask_head_backward, rel_coords, DynamicFilterLayout, MaskFeature};
pub(crate) use mask_head::sigmoid;
pub use model::{
    normalize, normalize_backward, FrameGrads, FrameOutput, LevelGrads, LevelOutput, Location, NetConfig, Network,
    BOX_RAW_CLAMP, MASK_STRIDE, STRIDES,
};
pub use params::{ModelParams, ParamLayout, ParamSpec, Slot};
pub use targets::{assign_targets, downsample_mask, Positive, Targets};
