use std::collections::BTreeMap;

use super::{DatasetItem, Domain};
use crate::error::{Error, Result};
use crate::ndcore::Rng;

/// Indices into the sampler's item slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quadruplet {
    pub anchor_sketch: usize,
    pub positive_photo: usize,
    pub negative_photo: usize,
    pub negative_sketch: usize,
}

impl Quadruplet {
    /// Slots in the fixed order anchor, positive, negative photo, negative sketch.
    pub fn slots(&self) -> [usize; 4] {
        [
            self.anchor_sketch,
            self.positive_photo,
            self.negative_photo,
            self.negative_sketch,
        ]
    }

    pub fn check(&self, items: &[DatasetItem]) -> Result<()> {
        let [a, p, np, ns] = self.slots().map(|i| &items[i]);
        let ok = a.domain == Domain::Sketch
            && p.domain == Domain::Photo
            && np.domain == Domain::Photo
            && ns.domain == Domain::Sketch
            && a.class_id == p.class_id
            && np.class_id != a.class_id
            && ns.class_id != a.class_id;
        if ok {
            Ok(())
        } else {
            Err(Error::Sampling(format!(
                "invalid quadruplet ({}, {}, {}, {})",
                a.id, p.id, np.id, ns.id
            )))
        }
    }
}

struct ClassPool {
    sketches: Vec<usize>,
    photos: Vec<usize>,
}

/// Draws domain-balanced quadruplets: anchor class uniform over the classes
/// present, each negative class uniform over the others (drawn
/// independently), items uniform within their class and domain, with
/// replacement.
pub struct QuadrupletSampler<'a> {
    items: &'a [DatasetItem],
    classes: Vec<usize>,
    pools: Vec<ClassPool>,
}

impl<'a> QuadrupletSampler<'a> {
    pub fn new(items: &'a [DatasetItem]) -> Result<Self> {
        let mut by_class: BTreeMap<usize, ClassPool> = BTreeMap::new();
        for (idx, item) in items.iter().enumerate() {
            let pool = by_class.entry(item.class_id).or_insert_with(|| ClassPool {
                sketches: Vec::new(),
                photos: Vec::new(),
            });
            match item.domain {
                Domain::Sketch => pool.sketches.push(idx),
                Domain::Photo => pool.photos.push(idx),
            }
        }
        if by_class.len() < 2 {
            return Err(Error::Sampling(format!(
                "need at least 2 classes to sample negatives, found {}",
                by_class.len()
            )));
        }
        for (class_id, pool) in &by_class {
            if pool.sketches.is_empty() || pool.photos.is_empty() {
                return Err(Error::Sampling(format!(
                    "class {class_id} needs at least one sketch and one photo"
                )));
            }
        }
        let (classes, pools) = by_class.into_iter().unzip();
        Ok(QuadrupletSampler {
            items,
            classes,
            pools,
        })
    }

    pub fn items(&self) -> &'a [DatasetItem] {
        self.items
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn sketch_count(&self) -> usize {
        self.pools.iter().map(|p| p.sketches.len()).sum()
    }

    fn other_class(&self, anchor: usize, rng: &mut Rng) -> usize {
        let j = rng.below(self.classes.len() - 1);
        if j >= anchor {
            j + 1
        } else {
            j
        }
    }

    fn pick(rng: &mut Rng, from: &[usize]) -> usize {
        from[rng.below(from.len())]
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Quadruplet {
        let anchor = rng.below(self.classes.len());
        let neg_photo = self.other_class(anchor, rng);
        let neg_sketch = self.other_class(anchor, rng);
        Quadruplet {
            anchor_sketch: Self::pick(rng, &self.pools[anchor].sketches),
            positive_photo: Self::pick(rng, &self.pools[anchor].photos),
            negative_photo: Self::pick(rng, &self.pools[neg_photo].photos),
            negative_sketch: Self::pick(rng, &self.pools[neg_sketch].sketches),
        }
    }

    pub fn sample_batch(&self, batch_quads: usize, rng: &mut Rng) -> Result<Vec<Quadruplet>> {
        if batch_quads == 0 {
            return Err(Error::Argument("batch_quads must be at least 1".into()));
        }
        Ok((0..batch_quads).map(|_| self.sample_one(rng)).collect())
    }
}
