//! Synthetic shape scenes with exact boxes, the stand-in embedder, and the
//! on-disk corpus format.

pub mod embed;
pub mod manifest;
pub mod render;

pub use embed::{Embedder, ServiceEmbedder, StubEmbedder, STUB_DIM};
pub use manifest::{
    build_dataset, reembed, CorpusKind, DatasetConfig, EmbeddingRef, Manifest, ObjectEntry,
    ObjectRecord, SceneRecord,
};
pub use render::{
    bbox_coverage, check_scene, crop, decode_latent, encode_latent, gen_scene, gen_scene_with,
    render, BBox, ObjectPlan, SceneObject, SceneSpec,
};
