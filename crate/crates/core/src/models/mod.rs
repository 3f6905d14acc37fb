//! Model descriptors, presets and the executor that runs them.

mod descriptor;
mod network;
mod presets;

pub use descriptor::{Layer, LayerKind, ModelDescriptor, ModuleTag, Shape3};
pub use network::{ForwardOptions, ForwardTrace, GateTrace, Network, ParamKey, SiteQuantizer};
pub use presets::{build_edsr, build_model, ModelSize, Preset, DIV2K_RGB_MEAN};
