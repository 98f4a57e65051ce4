//! Shared fixtures for the benchmarks in `benches/`.

use objprop_core::{encode_frame, standard_suite, EncoderConfig, FeatureGrid, Suite};

/// A small standard-suite slice: the first `videos` videos of seed 7.
pub fn suite(videos: usize) -> Suite {
    let mut s = standard_suite(7).expect("standard suite");
    s.videos.truncate(videos);
    s.detections.truncate(videos);
    s
}

/// Encoded features of the first two frames of the first video.
pub fn frame_pair(suite: &Suite) -> (FeatureGrid, FeatureGrid) {
    let cfg = EncoderConfig::default();
    let frames = &suite.videos[0].frames;
    (
        encode_frame(&frames[1], &cfg).expect("encode"),
        encode_frame(&frames[0], &cfg).expect("encode"),
    )
}
