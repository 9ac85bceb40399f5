//! Dual-arm motion-flow pipeline.
//!
//! The crate is organized as a stack: [`tensor`] and [`optim`] provide a
//! minimal reverse-mode autodiff substrate, [`scene`] generates synthetic
//! tabletop demonstrations with ground-truth object flows, [`sfdnet`] learns
//! a two-stream latent-diffusion flow predictor with shared weights across
//! streams, [`lift3d`] maps 2D flows into world-frame trajectories,
//! [`allocator`] segments and schedules those trajectories onto two arms,
//! and [`dualsim`] executes schedules in a deterministic kinematic world.
//! [`pipeline`] wires the stages together for the `sfd` binary.

pub mod allocator;
pub mod config;
pub mod dualsim;
pub mod lift3d;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scene;
pub mod sfdnet;
pub mod tensor;
