//! Gaussian masked autoencoders: a ViT encoder over visible patches, a
//! query-token decoder that predicts 3D Gaussians, and a differentiable
//! splatting renderer that turns them back into pixels.

pub mod canvas;
pub mod gaussian;
pub mod render;
pub mod vit;
pub mod train;
pub mod zeroshot;
pub mod io;
pub mod gradcheck;
