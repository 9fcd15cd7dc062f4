//! Synthetic paired text images: glyph atlas, renderer, corpora and dataset
//! directories.

pub mod atlas;
pub mod corpus;
pub mod dataset;
pub mod render;

pub use atlas::GlyphAtlas;
pub use corpus::{read_tsv, toy_corpus, Corpus, SentencePair};
pub use dataset::{build_dataset, read_split, ManifestRecord, SynthConfig, SynthSummary};
pub use render::{render, synth_pair, BBox, RenderSpec, RenderedSample, RigidTransform, TextBox};
