//! Reference-based sketch extraction by mixing self-attention inside a
//! latent diffusion model.

pub mod attnbank;
pub mod backend;
pub mod ddim;
pub mod image;
pub mod mixer;
pub mod contour;
pub mod rcd;
pub mod scene;
pub mod metrics;
pub mod pipeline;
pub mod config;
