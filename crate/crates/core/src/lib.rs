//! Vehicle/text matching on synthetic aerial chips.
//!
//! The crate trains a small convolutional visual encoder jointly with a
//! bag-of-words text encoder; the fused features answer yes/no queries of the
//! form "is this chip a `<color> <vehicle>`". It ships with a deterministic
//! synthetic chip generator, the training/evaluation experiments (seen-class,
//! leave-one-class-out, 2-d embedding export), and a standalone SSD-style
//! multibox detection loss built on the same differentiation tape.

pub mod chipgen;
pub mod experiments;
pub mod layers;
pub mod model;
pub mod multibox;
pub mod seeding;
pub mod tensor;
pub mod text;
