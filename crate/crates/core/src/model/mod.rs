//! The causal self-attention recommender and its next-item objective.

mod checkpoint;
mod config;
mod forward;
mod loss;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{SasrecConfig, LAYER_NORM_EPS};
pub use forward::{encode, forward, score, Weights, ATTENTION_MASK_VALUE};
pub use loss::{bce_graph, bce_loss, bce_loss_and_grad, loss_and_grad, loss_value};
pub use params::{
    check_layout, init, param_layout, truncated_normal, INIT_STD, ITEM_TABLE, POS_TABLE,
};
