//! Synthetic person re-identification corpus: procedural identities,
//! renderer, captions and continuations, on-disk datasets, and statistics.

pub mod captions;
pub mod dataset;
pub mod identity;
pub mod ppm;
pub mod render;
pub mod stats;

pub use captions::{
    build_dialogue, continuation_for, gen_caption, gen_continuation, parse_caption, word_count,
    DialogueMode, BASELINE_PROMPTS, MAX_CONTINUATION_WORDS,
};
pub use dataset::{
    build_dataset, continuations_from_file, load_dataset, make_dialogue_sample, DataConfig,
    Dataset, DialogueSample, ImageRecord,
};
pub use identity::{IdentitySpec, ATTRIBUTE_SPACE, BAGS, BUILDS, HATS, HUES};
pub use ppm::{read_ppm, write_ppm};
pub use render::{image_rng, render_person, DomainStyle, IMG_C, IMG_H, IMG_W, PIXELS_PER_IMAGE};
pub use stats::{dataset_stats, reference_benchmark, DatasetStats, REFERENCE_BENCHMARKS};
