//! Synthetic scene world: categories, scene templates, panoptic grids,
//! referring expressions, and dataset persistence.

mod dataset;
mod grid;
mod io;
mod refs;
mod scene;
mod vocab;

use thiserror::Error;

pub use dataset::{
    build_dataset, Dataset, DatasetSummary, Sample, SplitName, SplitSummary, WeightedTemplate, WorldConfig,
    MIN_TARGET_VISIBILITY,
};
pub use grid::{BBox, Grid};
pub use io::{
    load_dataset, load_dataset_with_vocabulary, load_meta, save_dataset, DatasetMeta, GridRecord, SampleRecord,
    FORMAT_NAME, FORMAT_VERSION,
};
pub use refs::{generate_references, DatasetMode, Description, Location, RefExpression, References};
pub use scene::{generate_scene, GroupSizeLaw, Instance, InstanceId, Scene, SceneTemplate, NO_INSTANCE};
pub use vocab::{
    Category, CategoryId, CategoryVocabulary, ColorAttr, Group, Kind, FUNCTION_WORDS, LOCATION_WORDS,
};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("generation failed for template `{template}`: {msg}")]
    Generation { template: String, msg: String },
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("version error: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
