//! The codec graph, frame and sequence coding, and the container format.

pub mod bitstream;
pub mod model;
pub mod pipeline;

pub use bitstream::{Container, FramePayloads, FrameType, Header};
pub use model::{Group, Prior, SlimVcModel, HYPER_STRIDE, LATENT_STRIDE};
pub use pipeline::{
    decode_frame, decode_sequence, encode_frame, encode_sequence, EncodedFrame, EncodedSequence,
    FrameMetrics, FrameReport, FrameState,
};
