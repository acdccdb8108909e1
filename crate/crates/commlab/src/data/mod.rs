//! Datasets with a controlled cross-class overlap ratio.
//!
//! A labeled source dataset is split per class; each class donates a
//! validation slice (first extraction) and an overlap slice (second
//! extraction). Agent `i` then trains on what remains of class `i` plus
//! the overlap slices of every other class, so a target fraction `p` of
//! unfamiliar material appears in each agent's training set.
//!
//! Items carry stable integer ids so disjointness between validation and
//! training sets is checkable.

pub mod idx;
pub mod synth;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One sample: pixel values in `[0, 1]`, a class label, and a stable id.
#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u64,
    pub pixels: Vec<f64>,
    pub label: usize,
}

/// A labeled dataset over `num_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub items: Vec<Item>,
    pub num_classes: usize,
    pub input_dim: usize,
}

impl LabeledDataset {
    pub fn new(items: Vec<Item>, num_classes: usize) -> Result<Self> {
        let input_dim = items.first().map_or(0, |i| i.pixels.len());
        for item in &items {
            if item.label >= num_classes {
                return Err(Error::config(format!(
                    "label {} out of range for {} classes",
                    item.label, num_classes
                )));
            }
            if item.pixels.len() != input_dim {
                return Err(Error::shape(format!(
                    "item {} has {} pixels, expected {input_dim}",
                    item.id,
                    item.pixels.len()
                )));
            }
            if item.pixels.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::config(format!(
                    "item {} has pixel values outside [0, 1]",
                    item.id
                )));
            }
        }
        Ok(Self {
            items,
            num_classes,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Per-class sample counts realizing a target overlap ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapPlan {
    /// Class (and agent) count.
    pub m: usize,
    /// Target overlap ratio.
    pub p: f64,
    /// Items moved to the shared validation set per class.
    pub n_val_per_class: usize,
    /// Items moved to the overlap pool per class (second extraction).
    pub second_extraction: usize,
    /// Per-class size remaining after the first extraction.
    pub train_pool: usize,
}

impl OverlapPlan {
    /// Builds a plan for a dataset with the given per-class size.
    ///
    /// For unequal class sizes the smallest class bounds the counts so
    /// every class can honor the same extractions.
    pub fn new(ds: &LabeledDataset, p: f64, val_fraction: f64) -> Result<Self> {
        if ds.num_classes < 2 {
            return Err(Error::config("overlap plans need at least 2 classes"));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!(
                "overlap ratio must lie in [0, 1), got {p}"
            )));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::config(format!(
                "validation fraction must lie in [0, 1), got {val_fraction}"
            )));
        }
        let class_sizes = class_sizes(ds)?;
        let min_class = *class_sizes.iter().min().expect("non-empty");
        let n_val_per_class = ((min_class as f64) * val_fraction).floor() as usize;
        let train_pool = min_class - n_val_per_class;
        if train_pool == 0 {
            return Err(Error::config("no training items left after validation split"));
        }
        let second_extraction = overlap_count(train_pool, ds.num_classes, p)?;
        Ok(Self {
            m: ds.num_classes,
            p,
            n_val_per_class,
            second_extraction,
            train_pool,
        })
    }

    /// The ratio actually realized by the integer second extraction.
    pub fn realized_ratio(&self) -> f64 {
        realized_ratio(self.train_pool, self.m, self.second_extraction)
    }
}

/// Solves the overlap equation
/// `m*s / (P_train + (m-1)*s) = p` for the integer second-extraction
/// count, rounding down so the realized ratio never exceeds the target.
pub fn overlap_count(train_pool: usize, m: usize, p: f64) -> Result<usize> {
    if m < 2 {
        return Err(Error::config(format!("overlap needs m >= 2, got {m}")));
    }
    if train_pool == 0 {
        return Err(Error::config("empty training pool"));
    }
    if p == 0.0 {
        return Ok(0);
    }
    let denom = m as f64 - p * (m as f64 - 1.0);
    if denom <= 0.0 {
        return Err(Error::config(format!(
            "overlap ratio {p} is infeasible for {m} classes"
        )));
    }
    Ok((p * train_pool as f64 / denom).floor() as usize)
}

/// The overlap-equation left-hand side for an integer extraction count.
pub fn realized_ratio(train_pool: usize, m: usize, s: usize) -> f64 {
    (m as f64 * s as f64) / (train_pool as f64 + (m as f64 - 1.0) * s as f64)
}

/// Per-agent training sets plus the shared validation set.
#[derive(Debug, Clone)]
pub struct AgentDatasets {
    pub train_sets: Vec<LabeledDataset>,
    pub val_set: LabeledDataset,
}

/// Splits a dataset into its classes, preserving within-class order.
///
/// Every class in `0..num_classes` must be populated; the overlap
/// equation is undefined over empty classes.
pub fn partition_by_class(ds: &LabeledDataset) -> Result<Vec<Vec<&Item>>> {
    let mut classes: Vec<Vec<&Item>> = vec![Vec::new(); ds.num_classes];
    for item in &ds.items {
        classes[item.label].push(item);
    }
    if let Some(empty) = classes.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class {empty} has no items")));
    }
    Ok(classes)
}

fn class_sizes(ds: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(partition_by_class(ds)?.iter().map(Vec::len).collect())
}

/// Builds the per-agent training sets and the shared validation set.
///
/// Per class: `n_val_per_class` items go to the validation set, the next
/// `s` items go to the overlap pool, and the rest stay with the class's
/// own agent. Each agent's training set is its own remainder plus every
/// other class's overlap pool. Sampling is without replacement from a
/// seeded shuffle.
pub fn build_agent_datasets(
    ds: &LabeledDataset,
    plan: &OverlapPlan,
    rng: &mut ChaCha8Rng,
) -> Result<AgentDatasets> {
    if plan.m != ds.num_classes {
        return Err(Error::config(format!(
            "plan is for {} classes but dataset has {}",
            plan.m, ds.num_classes
        )));
    }
    let classes = partition_by_class(ds)?;
    let needed = plan.n_val_per_class + plan.second_extraction + 1;
    for (label, class) in classes.iter().enumerate() {
        if class.len() < needed {
            return Err(Error::config(format!(
                "class {label} has {} items, needs at least {needed} \
                 (validation {} + overlap {} + 1)",
                class.len(),
                plan.n_val_per_class,
                plan.second_extraction
            )));
        }
    }

    let mut val_items = Vec::new();
    let mut own: Vec<Vec<Item>> = Vec::with_capacity(plan.m);
    let mut overlap: Vec<Vec<Item>> = Vec::with_capacity(plan.m);
    for class in &classes {
        let mut shuffled: Vec<&Item> = class.clone();
        shuffled.shuffle(rng);
        let (val, rest) = shuffled.split_at(plan.n_val_per_class);
        let (second, remainder) = rest.split_at(plan.second_extraction);
        val_items.extend(val.iter().map(|i| (*i).clone()));
        overlap.push(second.iter().map(|i| (*i).clone()).collect());
        own.push(remainder.iter().map(|i| (*i).clone()).collect());
    }

    let mut train_sets = Vec::with_capacity(plan.m);
    for i in 0..plan.m {
        let mut items = own[i].clone();
        for (j, pool) in overlap.iter().enumerate() {
            if j != i {
                items.extend(pool.iter().cloned());
            }
        }
        train_sets.push(LabeledDataset::new(items, ds.num_classes)?);
    }
    Ok(AgentDatasets {
        train_sets,
        val_set: LabeledDataset::new(val_items, ds.num_classes)?,
    })
}

/// Splits off a shared validation set (a seeded per-class fraction) and
/// returns `(train, validation)`. Used by protocols whose agents all see
/// the same training data.
pub fn split_validation(
    ds: &LabeledDataset,
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!(
            "validation fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let classes = partition_by_class(ds)?;
    let mut train_items = Vec::new();
    let mut val_items = Vec::new();
    for class in &classes {
        let n_val = ((class.len() as f64) * val_fraction).floor().max(1.0) as usize;
        if n_val >= class.len() {
            return Err(Error::config(format!(
                "class with {} items cannot donate {n_val} validation items",
                class.len()
            )));
        }
        let mut shuffled: Vec<&Item> = class.clone();
        shuffled.shuffle(rng);
        let (val, train) = shuffled.split_at(n_val);
        val_items.extend(val.iter().map(|i| (*i).clone()));
        train_items.extend(train.iter().map(|i| (*i).clone()));
    }
    Ok((
        LabeledDataset::new(train_items, ds.num_classes)?,
        LabeledDataset::new(val_items, ds.num_classes)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use std::collections::HashSet;

    fn toy_dataset(m: usize, per_class: usize) -> LabeledDataset {
        let mut items = Vec::new();
        let mut id = 0;
        for label in 0..m {
            for _ in 0..per_class {
                items.push(Item {
                    id,
                    pixels: vec![label as f64 / m as f64; 4],
                    label,
                });
                id += 1;
            }
        }
        LabeledDataset::new(items, m).unwrap()
    }

    #[test]
    fn partition_splits_labels() {
        let ds = LabeledDataset::new(
            vec![
                Item { id: 0, pixels: vec![0.0], label: 0 },
                Item { id: 1, pixels: vec![0.0], label: 1 },
                Item { id: 2, pixels: vec![0.0], label: 0 },
                Item { id: 3, pixels: vec![0.0], label: 1 },
            ],
            2,
        )
        .unwrap();
        let classes = partition_by_class(&ds).unwrap();
        assert_eq!(classes[0].len(), 2);
        assert_eq!(classes[1].len(), 2);
        let union: usize = classes.iter().map(Vec::len).sum();
        assert_eq!(union, ds.len());
    }

    #[test]
    fn partition_single_class() {
        let ds = LabeledDataset::new(
            vec![Item { id: 0, pixels: vec![0.5], label: 0 }],
            1,
        )
        .unwrap();
        assert_eq!(partition_by_class(&ds).unwrap().len(), 1);
    }

    #[test]
    fn partition_rejects_empty_class() {
        let ds = LabeledDataset::new(
            vec![Item { id: 0, pixels: vec![0.5], label: 0 }],
            2,
        )
        .unwrap();
        assert!(matches!(partition_by_class(&ds), Err(Error::Config(_))));
    }

    #[test]
    fn overlap_count_zero_ratio() {
        assert_eq!(overlap_count(1000, 4, 0.0).unwrap(), 0);
    }

    #[test]
    fn overlap_count_mnist_scale_case() {
        // m=10, p=0.1, P=5000: exact 500/9.1 = 54.945..., floored to 54;
        // realized 540/5486.
        let s = overlap_count(5000, 10, 0.1).unwrap();
        assert_eq!(s, 54);
        let ratio = realized_ratio(5000, 10, s);
        assert!((ratio - 540.0 / 5486.0).abs() < 1e-12);
    }

    #[test]
    fn overlap_count_five_class_case() {
        // m=5, p=0.5, P=1000: exact 500/3 = 166.66..., floored to 166.
        assert_eq!(overlap_count(1000, 5, 0.5).unwrap(), 166);
    }

    #[test]
    fn zero_overlap_keeps_classes_pure() {
        let ds = toy_dataset(3, 20);
        let plan = OverlapPlan::new(&ds, 0.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sets = build_agent_datasets(&ds, &plan, &mut rng).unwrap();
        for (i, ts) in sets.train_sets.iter().enumerate() {
            assert!(ts.items.iter().all(|item| item.label == i));
        }
    }

    #[test]
    fn each_train_set_gets_s_items_per_other_class() {
        let ds = toy_dataset(2, 40);
        let mut plan = OverlapPlan::new(&ds, 0.1, 0.1).unwrap();
        plan.second_extraction = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sets = build_agent_datasets(&ds, &plan, &mut rng).unwrap();
        for (i, ts) in sets.train_sets.iter().enumerate() {
            let foreign = ts.items.iter().filter(|it| it.label != i).count();
            assert_eq!(foreign, 3);
        }
    }

    #[test]
    fn validation_disjoint_from_training_by_id() {
        let ds = toy_dataset(4, 30);
        let plan = OverlapPlan::new(&ds, 0.2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = build_agent_datasets(&ds, &plan, &mut rng).unwrap();
        let val_ids: HashSet<u64> = sets.val_set.items.iter().map(|i| i.id).collect();
        for ts in &sets.train_sets {
            let ids: HashSet<u64> = ts.items.iter().map(|i| i.id).collect();
            assert_eq!(ids.len(), ts.len(), "duplicate ids within a train set");
            assert!(val_ids.is_disjoint(&ids));
        }
    }

    #[test]
    fn build_is_deterministic_in_seed() {
        let ds = toy_dataset(3, 25);
        let plan = OverlapPlan::new(&ds, 0.3, 0.1).unwrap();
        let a = build_agent_datasets(&ds, &plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = build_agent_datasets(&ds, &plan, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (x, y) in a.train_sets.iter().zip(&b.train_sets) {
            assert_eq!(x.items, y.items);
        }
        assert_eq!(a.val_set.items, b.val_set.items);
    }

    #[test]
    fn equal_class_sizes_give_equal_train_sets() {
        let ds = toy_dataset(4, 30);
        let plan = OverlapPlan::new(&ds, 0.2, 0.1).unwrap();
        let sets =
            build_agent_datasets(&ds, &plan, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let first = sets.train_sets[0].len();
        assert!(sets.train_sets.iter().all(|t| t.len() == first));
    }

    #[test]
    fn split_validation_is_disjoint_and_exhaustive() {
        let ds = toy_dataset(3, 20);
        let (train, val) =
            split_validation(&ds, 0.1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(train.len() + val.len(), ds.len());
        let val_ids: HashSet<u64> = val.items.iter().map(|i| i.id).collect();
        assert!(train.items.iter().all(|i| !val_ids.contains(&i.id)));
        assert_eq!(val.len(), 6); // 2 per class
    }

    #[test]
    fn insufficient_class_size_names_the_class() {
        let ds = toy_dataset(2, 5);
        let mut plan = OverlapPlan::new(&ds, 0.0, 0.2).unwrap();
        plan.second_extraction = 10;
        let err = build_agent_datasets(&ds, &plan, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }
}
