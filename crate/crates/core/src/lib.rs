//! Audio-driven universal Gaussian head avatar pipeline.
//!
//! The crate is organized around the stages of the system:
//!
//! * [`scene`] — Gaussian clouds, guide meshes, cameras, UV anchoring.
//! * [`render`] — differentiable splatting (tiled fast path + brute-force
//!   reference oracle + analytic gradients).
//! * [`uhap`] — the universal head avatar prior (expression VAE, identity
//!   table, neutral/guide/Gaussian decoders, training objective).
//! * [`mono`] — the monocular expression encoder.
//! * [`audio`] — mel features, audio-to-lip module, expression-code
//!   diffusion with windowed long-sequence sampling.
//! * [`personalize`] — two-stage few-shot adaptation to a new identity.
//! * [`synthdata`] — procedural synthetic dataset generator with exact
//!   ground truth for every supervision signal.
//! * [`pipeline`] — config, checkpoints, metrics, CLI stage orchestration.
//! * [`tensor`] — the small reverse-mode autodiff engine the models run on.

pub mod audio;
pub mod mono;
pub mod nn;
pub mod personalize;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod synthdata;
pub mod tensor;
pub mod uhap;
