//! Dataset construction, serialization, and loading.
//!
//! A dataset is a directory of PPM files plus `manifest.json`. Identities are
//! split into a train set and a disjoint eval set; eval images are further
//! split into query and gallery such that every query has at least one
//! same-identity gallery image under a different camera. Pixels always flow
//! through the files on disk, so training and evaluation see exactly what an
//! external viewer of the PPMs would.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::captions::{continuation_for, gen_caption, word_count, DialogueMode};
use crate::synthdata::captions::{build_dialogue, MAX_CONTINUATION_WORDS};
use crate::synthdata::identity::{IdentitySpec, ATTRIBUTE_SPACE};
use crate::synthdata::ppm::{read_ppm, write_ppm};
use crate::synthdata::render::{image_rng, render_person, DomainStyle, IMG_H, IMG_W};
use crate::tokenizer::DialogueTurn;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_ids: usize,
    pub eval_ids: usize,
    pub imgs_per_id: usize,
    pub cams: usize,
    pub style: DomainStyle,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_ids: 100,
            eval_ids: 50,
            imgs_per_id: 8,
            cams: 4,
            style: DomainStyle::A,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_ids == 0 || self.eval_ids == 0 {
            return Err(Error::Data("need at least one train and one eval identity".into()));
        }
        if self.train_ids + self.eval_ids > ATTRIBUTE_SPACE {
            return Err(Error::Data(format!(
                "{} identities requested, attribute space holds {}",
                self.train_ids + self.eval_ids,
                ATTRIBUTE_SPACE
            )));
        }
        if self.imgs_per_id < 2 {
            return Err(Error::Data("imgs_per_id must be at least 2".into()));
        }
        if self.cams < 2 {
            return Err(Error::Data("cross-camera evaluation needs at least 2 cameras".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    /// Path relative to the dataset root.
    pub file: String,
    /// Dataset-local identity label; train labels precede eval labels.
    pub label: usize,
    pub cam: usize,
    /// Position in the global attribute space, for regeneration.
    pub combo: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: DataConfig,
    identities: Vec<IdentitySpec>,
    train: Vec<ImageRecord>,
    query: Vec<ImageRecord>,
    gallery: Vec<ImageRecord>,
    captions: BTreeMap<usize, String>,
    continuations: BTreeMap<usize, String>,
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub config: DataConfig,
    pub identities: Vec<IdentitySpec>,
    pub train: Vec<ImageRecord>,
    pub query: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
    pub captions: BTreeMap<usize, String>,
    pub continuations: BTreeMap<usize, String>,
}

impl Dataset {
    pub fn load_pixels(&self, rec: &ImageRecord) -> Result<Vec<f64>> {
        let (px, w, h) = read_ppm(&self.root.join(&rec.file))?;
        if (w, h) != (IMG_W, IMG_H) {
            return Err(Error::Data(format!(
                "{}: expected {IMG_W}x{IMG_H}, found {w}x{h}",
                rec.file
            )));
        }
        Ok(px)
    }

    pub fn caption(&self, label: usize) -> Result<&str> {
        self.captions
            .get(&label)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                what: "caption label",
                index: label,
                size: self.identities.len(),
            })
    }

    pub fn continuation(&self, label: usize) -> Result<&str> {
        self.continuations
            .get(&label)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                what: "continuation label",
                index: label,
                size: self.identities.len(),
            })
    }

    pub fn num_train_classes(&self) -> usize {
        self.config.train_ids
    }
}

/// An image paired with its training conversation.
#[derive(Debug, Clone)]
pub struct DialogueSample {
    pub record: ImageRecord,
    pub turns: Vec<DialogueTurn>,
}

/// Build the conversation for one training image under the given recipe mode.
pub fn make_dialogue_sample(
    dataset: &Dataset,
    record: &ImageRecord,
    mode: DialogueMode,
    rng: &mut ChaCha8Rng,
) -> Result<DialogueSample> {
    let caption = dataset.caption(record.label)?;
    let continuation = dataset.continuation(record.label)?;
    let turn = build_dialogue(caption, continuation, mode, rng)?;
    Ok(DialogueSample {
        record: record.clone(),
        turns: vec![turn],
    })
}

fn split_seed(config: &DataConfig) -> u64 {
    // distinct identity draws per (seed, domain)
    let tag = match config.style {
        DomainStyle::A => 0x41,
        DomainStyle::B => 0x42,
    };
    config.seed ^ (tag << 48)
}

/// Generate a dataset under `root`, writing one PPM per image plus a
/// manifest. An external caption → continuation map, when given, overrides
/// the template continuations.
pub fn build_dataset(
    config: &DataConfig,
    root: &Path,
    external: Option<&BTreeMap<String, String>>,
) -> Result<Dataset> {
    config.validate()?;
    let total_ids = config.train_ids + config.eval_ids;

    let mut id_rng = ChaCha8Rng::seed_from_u64(split_seed(config));
    let mut combos: Vec<usize> = sample(&mut id_rng, ATTRIBUTE_SPACE, total_ids).into_vec();
    combos.sort_unstable();
    let identities: Vec<IdentitySpec> = combos
        .iter()
        .enumerate()
        .map(|(label, &combo)| IdentitySpec::from_combo(label, combo))
        .collect::<Result<_>>()?;

    let mut captions = BTreeMap::new();
    let mut continuations = BTreeMap::new();
    for spec in &identities {
        let cap = gen_caption(spec);
        let cont = continuation_for(&cap, external)?;
        if word_count(&cont) >= MAX_CONTINUATION_WORDS {
            return Err(Error::Data(format!(
                "continuation for identity {} exceeds word limit",
                spec.id
            )));
        }
        captions.insert(spec.id, cap);
        continuations.insert(spec.id, cont);
    }

    for sub in ["train", "query", "gallery"] {
        fs::create_dir_all(root.join(sub))?;
    }

    let mut train = Vec::new();
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    // queries take the first image indices so every eval identity keeps at
    // least one gallery image, and camera = index % cams guarantees a
    // cross-camera match for each query
    let query_count = 2.min(config.imgs_per_id - 1);

    for spec in &identities {
        let is_train = spec.id < config.train_ids;
        for idx in 0..config.imgs_per_id {
            let cam = idx % config.cams;
            let split = if is_train {
                "train"
            } else if idx < query_count {
                "query"
            } else {
                "gallery"
            };
            let file = format!("{split}/{:04}_c{cam}_{idx:02}.ppm", spec.id);
            let mut rng = image_rng(config.seed, config.style, spec.combo(), cam, idx);
            let px = render_person(spec, cam, config.cams, config.style, &mut rng);
            write_ppm(&root.join(&file), &px, IMG_W, IMG_H)?;
            let rec = ImageRecord {
                file,
                label: spec.id,
                cam,
                combo: spec.combo(),
            };
            match split {
                "train" => train.push(rec),
                "query" => query.push(rec),
                _ => gallery.push(rec),
            }
        }
    }

    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        config: *config,
        identities: identities.clone(),
        train: train.clone(),
        query: query.clone(),
        gallery: gallery.clone(),
        captions: captions.clone(),
        continuations: continuations.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(root.join("manifest.json"), json)?;

    Ok(Dataset {
        root: root.to_path_buf(),
        config: *config,
        identities,
        train,
        query,
        gallery,
        captions,
        continuations,
    })
}

/// Load a dataset directory written by `build_dataset`, verifying that every
/// listed image file exists.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(root.join("manifest.json"))
        .map_err(|e| Error::Data(format!("{}: {e}", root.join("manifest.json").display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::Data(format!(
            "manifest version {} unsupported",
            m.format_version
        )));
    }
    m.config.validate()?;
    for rec in m.train.iter().chain(&m.query).chain(&m.gallery) {
        let p = root.join(&rec.file);
        if !p.is_file() {
            return Err(Error::Data(format!("missing image file {}", p.display())));
        }
        if rec.label >= m.identities.len() {
            return Err(Error::IndexOutOfRange {
                what: "record label",
                index: rec.label,
                size: m.identities.len(),
            });
        }
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        config: m.config,
        identities: m.identities,
        train: m.train,
        query: m.query,
        gallery: m.gallery,
        captions: m.captions,
        continuations: m.continuations,
    })
}

/// Read an external caption → continuation JSON map.
pub fn continuations_from_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}
