//! Straight-line layer stacks: definition, full-precision and simulated
//! quantized forward passes, reverse-mode token gradients, and file I/O.

mod backward;
mod calibset;
mod checkpoint;
mod forward;
mod layer;

pub use backward::{backward_from_trace, backward_token_grads, layer_backward, GradTrace, ProxyLoss};
pub use calibset::{CalibSet, Modality, CALIBSET_MAGIC};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    apply_layer, apply_layer_quant, forward_fp, forward_quant, quantized_linear, quantized_linear_prepared,
    quantized_weight, ForwardTrace,
};
pub use layer::{Activation, LayerKind, LayerSpec, LayerStack};
