//! Scene-text captioning: caption images that contain written words, choosing
//! an anchor word, grouping related words around it, and rewriting a global
//! visual caption into one refined caption per anchor.

pub mod ancm;
pub mod anpm;
pub mod cli;
pub mod fusion;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod scene;
pub mod trainer;
pub mod vocab;
