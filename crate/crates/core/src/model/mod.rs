//! The trajectory model: prefix encoder, token embedding, hub-augmented
//! transformer backbone, affine parameter head and the exact latent decoder.

mod config;
mod forward;
pub(crate) mod params;


pub use config::ModelConfig;
pub use forward::{
    backbone_forward, decode, encode_prefix, flows_from_head, forward, param_head, predict_trajectory,
    rbf_time_features, summarize, tokenize_embed, Adapter, BackboneOutput, Bound, ForwardOutput, Latent,
};
pub use params::{attn_site, init_params, load_checkpoint, save_checkpoint, ParamStore, MODEL_FORMAT};
