//! Network specs, receptive-field geometry, parameter counting and model assembly.

mod assemble;
mod bilinear;
mod checkpoint;
mod count;
mod geometry;
mod model;
mod spec;

pub use assemble::{assemble, Variant};
pub use bilinear::{bilinear_deconv_kernel, bilinear_kernel_size, bilinear_profile};
pub use checkpoint::{checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint};
pub use count::{conv_has_bias, count_params, ParamConvention};
pub use geometry::{
    analyze_geometry, geometry_csv, geometry_rows, Geometry, GeometryRow, GeometryTable,
};
pub use model::{instantiate, BnMoments, BnState, Model, Param, ParamGroup, NEW_LAYER_STD};
pub use spec::{
    context_block_name, context_network_spec, mini_backbone_spec, vgg16_spec, BranchSpec,
    ContextNetConfig, HeadSpec, LayerKind, LayerSpec, NetworkSpec, Role, SkipEdge,
};
