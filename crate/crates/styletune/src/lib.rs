//! Desk-scale style-based GAN fine-tuning laboratory.
//!
//! Implements a small skip-architecture generator, freeze plans (FreezeSG /
//! FreezeG / FreezeD), a per-resolution structure loss, layer swapping
//! between checkpoints, latent-direction extrapolation, and the pretrain /
//! fine-tune loops that tie them together. See the crate examples for
//! runnable entry points into each capability.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod generator;
pub mod latent;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod swap;
pub mod train;
pub mod diag;
pub mod discriminator;
pub mod error;
pub mod freeze;
pub mod tensor;

pub use error::{Error, Result};
