use std::collections::HashSet;
use std::sync::Arc;

use ndarray::{Array4, Axis};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::split::DatasetSplit;
use crate::error::{BmlError, Result};

/// N-way K-shot task shape with Q queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self> {
        let spec = Self { n_way, k_shot, q_query };
        spec.validate()?;
        Ok(spec)
    }

    /// Default training batch: 15 classes, one shot and six queries each.
    pub fn training_default() -> Self {
        Self { n_way: 15, k_shot: 1, q_query: 6 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return Err(BmlError::invalid(format!(
                "episode spec fields must be >= 1, got {}-way {}-shot {}-query",
                self.n_way, self.k_shot, self.q_query
            )));
        }
        Ok(())
    }

    pub fn images_per_episode(&self) -> usize {
        self.n_way * (self.k_shot + self.q_query)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeItem {
    pub image: Arc<Image>,
    pub image_id: String,
    pub local_label: usize,
    /// Class index within the source split.
    pub global_label: usize,
    /// Position of the image inside its class list.
    pub image_index: usize,
}

/// One sampled task. Support and query are grouped by local label in
/// ascending order.
#[derive(Debug, Clone)]
pub struct Episode {
    pub spec: EpisodeSpec,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
    /// `class_map[local_label]` is the split class index.
    pub class_map: Vec<usize>,
}

impl Episode {
    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|i| i.local_label).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|i| i.local_label).collect()
    }

    pub fn support_images(&self) -> Result<Array4<f32>> {
        stack_images(self.support.iter().map(|i| i.image.as_ref()))
    }

    pub fn query_images(&self) -> Result<Array4<f32>> {
        stack_images(self.query.iter().map(|i| i.image.as_ref()))
    }

    /// Every item, support first.
    pub fn items(&self) -> impl Iterator<Item = &EpisodeItem> {
        self.support.iter().chain(&self.query)
    }

    pub fn validate(&self) -> Result<()> {
        let EpisodeSpec { n_way, k_shot, q_query } = self.spec;
        let fail = |msg: String| Err(BmlError::invalid(format!("episode invariant: {msg}")));
        if self.support.len() != n_way * k_shot {
            return fail(format!("|support| = {} != {}", self.support.len(), n_way * k_shot));
        }
        if self.query.len() != n_way * q_query {
            return fail(format!("|query| = {} != {}", self.query.len(), n_way * q_query));
        }
        if self.class_map.len() != n_way || self.class_map.iter().collect::<HashSet<_>>().len() != n_way {
            return fail("class map is not a bijection onto N distinct classes".into());
        }
        for (side, items, per) in [("support", &self.support, k_shot), ("query", &self.query, q_query)] {
            let mut counts = vec![0usize; n_way];
            for item in items {
                if item.local_label >= n_way {
                    return fail(format!("{side} label {} out of range", item.local_label));
                }
                if self.class_map[item.local_label] != item.global_label {
                    return fail(format!("{side} item {} disagrees with class map", item.image_id));
                }
                counts[item.local_label] += 1;
            }
            if counts.iter().any(|&c| c != per) {
                return fail(format!("{side} labels do not cover [0, N) evenly: {counts:?}"));
            }
        }
        let support_keys: HashSet<_> = self.support.iter().map(|i| (i.global_label, i.image_index)).collect();
        if support_keys.len() != self.support.len() {
            return fail("duplicate support image".into());
        }
        let mut query_keys = HashSet::new();
        for item in &self.query {
            let key = (item.global_label, item.image_index);
            if support_keys.contains(&key) || !query_keys.insert(key) {
                return fail(format!("image {} reused", item.image_id));
            }
        }
        Ok(())
    }
}

/// Stacks `[h, w, 3]` images into a `[batch, h, w, 3]` array.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<Array4<f32>> {
    let views: Vec<_> = images.into_iter().map(|i| i.view()).collect();
    if views.is_empty() {
        return Err(BmlError::invalid("cannot stack an empty image list"));
    }
    ndarray::stack(Axis(0), &views).map_err(|e| BmlError::shape(format!("images differ in shape: {e}")))
}

/// Samples an N-way K-shot episode. Classes are drawn without replacement,
/// then K+Q distinct images per class; the first K become support.
///
/// Every class in the split must hold at least K+Q images, so whether a split
/// can serve a spec does not depend on the seed.
pub fn sample_episode(split: &DatasetSplit, spec: EpisodeSpec, rng_seed: u64) -> Result<Episode> {
    spec.validate()?;
    if split.num_classes() < spec.n_way {
        return Err(BmlError::TooFewClasses {
            needed: spec.n_way,
            available: split.num_classes(),
        });
    }
    let per_class = spec.k_shot + spec.q_query;
    if let Some((class, imgs)) = split.classes.iter().zip(&split.images).find(|(_, imgs)| imgs.len() < per_class) {
        return Err(BmlError::TooFewImages {
            class: class.clone(),
            needed: per_class,
            available: imgs.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let class_map = index::sample(&mut rng, split.num_classes(), spec.n_way).into_vec();
    let mut support = Vec::with_capacity(spec.n_way * spec.k_shot);
    let mut query = Vec::with_capacity(spec.n_way * spec.q_query);
    for (local, &class) in class_map.iter().enumerate() {
        let imgs = &split.images[class];
        let picks = index::sample(&mut rng, imgs.len(), per_class);
        for (j, idx) in picks.iter().enumerate() {
            let item = EpisodeItem {
                image: Arc::clone(&imgs[idx].pixels),
                image_id: imgs[idx].id.clone(),
                local_label: local,
                global_label: class,
                image_index: idx,
            };
            if j < spec.k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        spec,
        support,
        query,
        class_map,
    })
}

/// One training batch drawn from the base split. Same contract as
/// [`sample_episode`]; `global_label` indexes the base classes and feeds the
/// point-wise classifier.
pub fn sample_training_batch(base: &DatasetSplit, train_spec: EpisodeSpec, rng_seed: u64) -> Result<Episode> {
    sample_episode(base, train_spec, rng_seed)
}

/// Training steps per epoch: enough batches to cover the base split once.
pub fn episodes_per_epoch(base_images: usize, spec: EpisodeSpec) -> usize {
    base_images.div_ceil(spec.images_per_episode()).max(1)
}
