//! Desk-scale pipeline that distills semantic knowledge from a small frozen
//! language model into bird's-eye-view (BEV) scene representations.
//!
//! Everything in this crate is a pure, deterministic function of explicit
//! seeds and configs: a reverse-mode autodiff engine over flat `f64` buffers,
//! a synthetic driving world, QA generation, a tiny decoder-only teacher,
//! BEV/per-view encoders with a projector head, the training stages that tie
//! them together, text/trajectory metrics, and closed-loop scenario scoring.
//!
//! The crate is `no_std`-compatible (requires `alloc`); all IO lives in the
//! companion `bevlm` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod closedloop;
pub mod digest;
pub mod distill;
pub mod encoders;
pub mod lm;
pub mod math;
pub mod metrics;
pub mod model;
pub mod obb;
pub mod optim;
pub mod oracles;
pub mod projector;
pub mod qa;
pub mod rng;
pub mod sector;
pub mod tensor;
pub mod world;
