//! Runs the guide's code blocks as doc-tests. Each chapter is its own
//! module so a failure points at the chapter it came from.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/rendering.md")]
pub mod rendering {}
#[doc = include_str!("../../../book/src/densification.md")]
pub mod densification {}
#[doc = include_str!("../../../book/src/epipolar.md")]
pub mod epipolar {}
#[doc = include_str!("../../../book/src/planes.md")]
pub mod planes {}
#[doc = include_str!("../../../book/src/losses.md")]
pub mod losses {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
