//! Dataset statistics, plus the published benchmark sizes the synthetic
//! corpus miniaturizes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::synthdata::dataset::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub query_ids: usize,
    pub gallery_ids: usize,
    pub train_ids: usize,
    pub query_images: usize,
    pub gallery_images: usize,
    pub train_images: usize,
    pub cameras: usize,
}

impl DatasetStats {
    /// Stats of the concatenation of two corpora with disjoint identity and
    /// camera spaces: every field adds.
    pub fn plus(&self, other: &DatasetStats) -> DatasetStats {
        DatasetStats {
            query_ids: self.query_ids + other.query_ids,
            gallery_ids: self.gallery_ids + other.gallery_ids,
            train_ids: self.train_ids + other.train_ids,
            query_images: self.query_images + other.query_images,
            gallery_images: self.gallery_images + other.gallery_images,
            train_images: self.train_images + other.train_images,
            cameras: self.cameras + other.cameras,
        }
    }
}

/// Sizes of the four standard person re-identification benchmarks.
pub const REFERENCE_BENCHMARKS: [(&str, DatasetStats); 4] = [
    (
        "MSMT17",
        DatasetStats {
            query_ids: 3060,
            gallery_ids: 3060,
            train_ids: 1041,
            query_images: 11659,
            gallery_images: 82161,
            train_images: 32621,
            cameras: 15,
        },
    ),
    (
        "Market1501",
        DatasetStats {
            query_ids: 750,
            gallery_ids: 750,
            train_ids: 751,
            query_images: 3368,
            gallery_images: 19732,
            train_images: 12936,
            cameras: 6,
        },
    ),
    (
        "DukeMTMC",
        DatasetStats {
            query_ids: 702,
            gallery_ids: 702,
            train_ids: 702,
            query_images: 2228,
            gallery_images: 17661,
            train_images: 16522,
            cameras: 8,
        },
    ),
    (
        "CUHK03-NP",
        DatasetStats {
            query_ids: 700,
            gallery_ids: 700,
            train_ids: 767,
            query_images: 1400,
            gallery_images: 5332,
            train_images: 7365,
            cameras: 2,
        },
    ),
];

pub fn reference_benchmark(name: &str) -> Option<&'static DatasetStats> {
    REFERENCE_BENCHMARKS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| s)
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let distinct_ids = |recs: &[crate::synthdata::dataset::ImageRecord]| {
        recs.iter().map(|r| r.label).collect::<BTreeSet<_>>().len()
    };
    DatasetStats {
        query_ids: distinct_ids(&ds.query),
        gallery_ids: distinct_ids(&ds.gallery),
        train_ids: distinct_ids(&ds.train),
        query_images: ds.query.len(),
        gallery_images: ds.gallery.len(),
        train_images: ds.train.len(),
        cameras: ds.config.cams,
    }
}
