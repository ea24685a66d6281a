//! Generalization splits over the catalog.
//!
//! Three levels of difficulty at evaluation time:
//! - seen: training classes, training instances, fresh scenes;
//! - intra: training classes, but instances held out of every training scene;
//! - inter: whole classes never present in any training scene.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::catalog::{Catalog, ObjectSpec};

/// Which pool an episode draws its target from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    /// Training corpus episode.
    Train,
    /// Evaluation on training classes and instances, new scenes.
    Seen,
    /// Evaluation on held-out instances of training classes.
    Intra,
    /// Evaluation on held-out classes.
    Inter,
}

impl SplitTag {
    pub const ALL: [SplitTag; 4] = [SplitTag::Train, SplitTag::Seen, SplitTag::Intra, SplitTag::Inter];

    pub fn as_str(&self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Seen => "seen",
            SplitTag::Intra => "intra",
            SplitTag::Inter => "inter",
        }
    }

    pub fn from_str(s: &str) -> Option<SplitTag> {
        SplitTag::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

/// Frozen assignment of classes and instances to splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    /// Classes allowed in training scenes. Includes the intra classes.
    pub train_classes: Vec<String>,
    /// Subset of `train_classes` whose held instances never train.
    pub intra_classes: Vec<String>,
    /// Classes disjoint from `train_classes`, never seen in training.
    pub inter_classes: Vec<String>,
    /// Instance ids excluded from every training scene.
    pub held_instances: Vec<String>,
}

impl SplitAssignment {
    pub fn validate(&self, catalog: &Catalog) -> Result<()> {
        let all: BTreeSet<String> = catalog.class_names().into_iter().collect();
        let train: BTreeSet<&String> = self.train_classes.iter().collect();
        let inter: BTreeSet<&String> = self.inter_classes.iter().collect();
        for c in train.iter().chain(inter.iter()) {
            if !all.contains(*c) {
                return Err(Error::invalid(format!("split references unknown class {c}")));
            }
        }
        if train.intersection(&inter).next().is_some() {
            return Err(Error::invalid("train and inter classes overlap"));
        }
        if train.len() + inter.len() != all.len() {
            return Err(Error::invalid("splits must cover every catalog class"));
        }
        for c in &self.intra_classes {
            if !train.contains(c) {
                return Err(Error::invalid(format!("intra class {c} is not a train class")));
            }
        }
        for id in &self.held_instances {
            let Some(o) = catalog.instance(id) else {
                return Err(Error::invalid(format!("held instance {id} not in catalog")));
            };
            if !self.intra_classes.contains(&o.class_name) {
                return Err(Error::invalid(format!(
                    "held instance {id} belongs to non-intra class {}",
                    o.class_name
                )));
            }
        }
        for c in &self.intra_classes {
            let held = self
                .held_instances
                .iter()
                .filter(|id| catalog.instance(id).map(|o| &o.class_name) == Some(c))
                .count();
            let total = catalog.instances_of(c).len();
            if held == 0 || held >= total {
                return Err(Error::invalid(format!(
                    "intra class {c} must hold out some but not all instances ({held}/{total})"
                )));
            }
        }
        Ok(())
    }

    /// Classes an episode with this tag may target.
    pub fn class_pool(&self, tag: SplitTag) -> &[String] {
        match tag {
            SplitTag::Train | SplitTag::Seen => &self.train_classes,
            SplitTag::Intra => &self.intra_classes,
            SplitTag::Inter => &self.inter_classes,
        }
    }

    /// Instances of `class_name` an episode with this tag may use.
    pub fn instance_pool<'a>(&self, catalog: &'a Catalog, tag: SplitTag, class_name: &str) -> Vec<&'a ObjectSpec> {
        let held: BTreeSet<&String> = self.held_instances.iter().collect();
        catalog
            .instances_of(class_name)
            .into_iter()
            .filter(|o| match tag {
                SplitTag::Train | SplitTag::Seen => !held.contains(&o.instance_id),
                SplitTag::Intra => held.contains(&o.instance_id),
                SplitTag::Inter => true,
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("split serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SplitAssignment> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(path, format!("split parse failed: {e}")))
    }
}

/// Draws a split assignment: `inter_count` whole classes held out, plus
/// `intra_count` training classes that hide `held_per_class` instances each.
pub fn make_splits(
    catalog: &Catalog,
    inter_count: usize,
    intra_count: usize,
    held_per_class: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let classes = catalog.class_names();
    if inter_count + intra_count > classes.len() || inter_count >= classes.len() {
        return Err(Error::invalid(format!(
            "cannot hold out {inter_count} inter + {intra_count} intra of {} classes",
            classes.len()
        )));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x53504c495453));
    let mut shuffled = classes.clone();
    shuffled.shuffle(&mut rng);
    let inter_classes: Vec<String> = shuffled[..inter_count].to_vec();
    let mut train_classes: Vec<String> = shuffled[inter_count..].to_vec();
    train_classes.sort();
    let mut pool = train_classes.clone();
    pool.shuffle(&mut rng);
    let intra_classes: Vec<String> = pool[..intra_count].to_vec();
    let mut held_instances = Vec::new();
    for c in &intra_classes {
        let instances = catalog.instances_of(c);
        if held_per_class >= instances.len() {
            return Err(Error::invalid(format!(
                "cannot hold {held_per_class} of {} instances in class {c}",
                instances.len()
            )));
        }
        let mut ids: Vec<String> = instances.iter().map(|o| o.instance_id.clone()).collect();
        ids.shuffle(&mut rng);
        held_instances.extend(ids.into_iter().take(held_per_class));
    }
    held_instances.sort();
    let mut inter_sorted = inter_classes;
    inter_sorted.sort();
    let mut intra_sorted = intra_classes;
    intra_sorted.sort();
    let out = SplitAssignment {
        train_classes,
        intra_classes: intra_sorted,
        inter_classes: inter_sorted,
        held_instances,
    };
    out.validate(catalog)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_classes() {
        let cat = Catalog::desk();
        let s = make_splits(&cat, 4, 4, 2, 11).unwrap();
        assert_eq!(s.train_classes.len(), 16);
        assert_eq!(s.inter_classes.len(), 4);
        assert_eq!(s.intra_classes.len(), 4);
        assert_eq!(s.held_instances.len(), 8);
        s.validate(&cat).unwrap();
        for c in &s.inter_classes {
            assert!(!s.train_classes.contains(c));
        }
        for c in &s.intra_classes {
            assert!(s.train_classes.contains(c));
        }
    }

    #[test]
    fn instance_pools_are_disjoint_where_required() {
        let cat = Catalog::desk();
        let s = make_splits(&cat, 4, 4, 2, 3).unwrap();
        for c in &s.intra_classes {
            let train: BTreeSet<String> = s
                .instance_pool(&cat, SplitTag::Train, c)
                .iter()
                .map(|o| o.instance_id.clone())
                .collect();
            let intra: BTreeSet<String> = s
                .instance_pool(&cat, SplitTag::Intra, c)
                .iter()
                .map(|o| o.instance_id.clone())
                .collect();
            assert_eq!(train.len(), 4);
            assert_eq!(intra.len(), 2);
            assert!(train.intersection(&intra).next().is_none());
        }
        for c in &s.inter_classes {
            assert_eq!(s.instance_pool(&cat, SplitTag::Inter, c).len(), 6);
        }
    }

    #[test]
    fn splits_deterministic_and_seed_sensitive() {
        let cat = Catalog::desk();
        let a = make_splits(&cat, 4, 4, 2, 7).unwrap();
        let b = make_splits(&cat, 4, 4, 2, 7).unwrap();
        assert_eq!(a, b);
        let c = make_splits(&cat, 4, 4, 2, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn splits_reject_excess_holdout() {
        let cat = Catalog::desk();
        assert!(make_splits(&cat, 20, 0, 2, 1).is_err());
        assert!(make_splits(&cat, 4, 4, 6, 1).is_err());
    }

    #[test]
    fn splits_roundtrip_json() {
        let cat = Catalog::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.json");
        let s = make_splits(&cat, 4, 4, 2, 7).unwrap();
        s.save(&path).unwrap();
        assert_eq!(SplitAssignment::load(&path).unwrap(), s);
    }

    #[test]
    fn split_tag_names_roundtrip() {
        for t in SplitTag::ALL {
            assert_eq!(SplitTag::from_str(t.as_str()), Some(t));
        }
        assert_eq!(SplitTag::from_str("bogus"), None);
    }
}
