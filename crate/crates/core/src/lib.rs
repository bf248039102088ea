//! Layout-controlled text-to-image diffusion at desk scale.
//!
//! Semantic maps become per-token layout control maps of exact class
//! coverage, which are fused into every cross-attention block with a
//! timestep-adaptive weight. Training adds a semantic-alignment penalty and
//! a layout-free prior-preservation term to the denoising loss.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod evaluation;
pub mod experiment;
pub mod fusion_attention;
pub mod image;
pub mod layout_control;
pub mod losses;
pub mod pnm;
pub mod semantic_map;
pub mod synth_data;
pub mod text_semantics;
