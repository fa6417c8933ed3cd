//! Loss-interpolation data mixing lab.
//!
//! A small, fully deterministic playground for studying mixed-sample data
//! augmentation on object detection: a tape-based autodiff engine, a
//! synthetic scene generator, input/label mixing strategies, a miniature
//! two-stage detector, COCO-style AP evaluation, and a mean-teacher
//! domain adaptation loop, all tied together by a training harness.

pub mod autodiff;
pub mod config;
pub mod detector;
pub mod eval;
pub mod harness;
pub mod loss;
pub mod mix;
pub mod report;
pub mod rng;
pub mod scene;
pub mod teacher;
pub mod tensor;
