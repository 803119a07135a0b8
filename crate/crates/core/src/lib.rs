//! Shapes as diffeomorphic deformations of a learned implicit template.
//!
//! Each shape owns a [`field::Triplane`] whose features a shared
//! [`field::VelocityDecoder`] turns into a velocity field. Integrating that
//! field ([`flow`]) maps instance space onto the template, whose signed
//! distance is a [`field::TemplateSdf`]. Running the flow backwards carries the
//! template mesh onto the instance with its connectivity untouched. New
//! triplanes, and so new shapes with the template's topology, are sampled
//! from a denoising diffusion model ([`diffusion`]).

pub mod error;
pub mod evalgen;
pub mod field;
pub mod flow;
pub mod geometry;
pub mod diffusion;
pub mod nets;
pub mod training;

pub use error::{Error, Result};
