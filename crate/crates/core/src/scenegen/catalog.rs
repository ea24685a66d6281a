//! Object catalog for the tabletop environment.
//!
//! A class is a (color, shape) pair; each class has several instances that
//! vary in diameter and shade. Colors are chosen far apart so a color
//! centroid unambiguously locates an object in a rendered image.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible object diameter in world units.
pub const MIN_DIAMETER: f64 = 4.0;
/// Largest admissible object diameter in world units.
pub const MAX_DIAMETER: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [
        ShapeKind::Disc,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.iter().copied().find(|s| s.name() == name)
    }
}

/// Base object colors. Pairwise far apart in RGB so the centroid oracle and
/// the distinct-color scene constraint are meaningful.
pub const COLOR_FAMILIES: [(&str, [f64; 3]); 5] = [
    ("red", [0.90, 0.10, 0.10]),
    ("green", [0.10, 0.80, 0.15]),
    ("blue", [0.15, 0.25, 0.92]),
    ("yellow", [0.92, 0.82, 0.08]),
    ("purple", [0.65, 0.12, 0.85]),
];

/// Diameter variants per class.
pub const SIZE_WORDS: [(&str, f64); 3] = [("small", 9.0), ("medium", 12.0), ("large", 15.0)];

/// Brightness variants per class; the factor scales the family color.
pub const SHADE_WORDS: [(&str, f64); 2] = [("bright", 1.0), ("dark", 0.78)];

/// Destination zone colors, distinct from every object family.
pub const ZONE_COLORS: [(&str, [f64; 3]); 3] = [
    ("gray", [0.55, 0.55, 0.58]),
    ("white", [0.93, 0.93, 0.93]),
    ("brown", [0.40, 0.26, 0.13]),
];

/// Table background color.
pub const BACKGROUND_RGB: [f64; 3] = [0.12, 0.12, 0.14];

pub fn zone_rgb(name: &str) -> Option<[f64; 3]> {
    ZONE_COLORS.iter().find(|(n, _)| *n == name).map(|(_, c)| *c)
}

/// A concrete placeable object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    /// Unique within a catalog, e.g. `red_disc_medium_bright`.
    pub instance_id: String,
    /// Class key, e.g. `red disc`. Shared across instances.
    pub class_name: String,
    pub shape: ShapeKind,
    pub color_name: String,
    /// Shaded fill color.
    pub rgb: [f64; 3],
    pub diameter: f64,
    pub size_word: String,
    pub shade_word: String,
}

impl ObjectSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_DIAMETER..=MAX_DIAMETER).contains(&self.diameter) {
            return Err(Error::invalid(format!(
                "object {} has diameter {} outside [{MIN_DIAMETER}, {MAX_DIAMETER}]",
                self.instance_id, self.diameter
            )));
        }
        if self.instance_id.is_empty() || self.class_name.is_empty() {
            return Err(Error::invalid("object ids must be non-empty"));
        }
        for c in self.rgb {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!(
                    "object {} has rgb component {c} outside [0, 1]",
                    self.instance_id
                )));
            }
        }
        Ok(())
    }
}

/// Fixed inventory of objects, grouped into classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Catalog {
    pub objects: Vec<ObjectSpec>,
}

impl Catalog {
    /// Validates every object and the uniqueness of instance ids.
    pub fn new(objects: Vec<ObjectSpec>) -> Result<Catalog> {
        if objects.is_empty() {
            return Err(Error::invalid("catalog must not be empty"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &objects {
            o.validate()?;
            if !seen.insert(o.instance_id.clone()) {
                return Err(Error::invalid(format!(
                    "duplicate instance id {}",
                    o.instance_id
                )));
            }
        }
        Ok(Catalog { objects })
    }

    /// The full desk inventory: 5 colors x 4 shapes = 20 classes, each with
    /// 3 sizes x 2 shades = 6 instances.
    pub fn desk() -> Catalog {
        let mut objects = Vec::new();
        for (color_name, base) in COLOR_FAMILIES {
            for shape in ShapeKind::ALL {
                for (size_word, diameter) in SIZE_WORDS {
                    for (shade_word, factor) in SHADE_WORDS {
                        let rgb = [base[0] * factor, base[1] * factor, base[2] * factor];
                        objects.push(ObjectSpec {
                            instance_id: format!(
                                "{color_name}_{}_{size_word}_{shade_word}",
                                shape.name()
                            ),
                            class_name: format!("{color_name} {}", shape.name()),
                            shape,
                            color_name: color_name.to_string(),
                            rgb,
                            diameter,
                            size_word: size_word.to_string(),
                            shade_word: shade_word.to_string(),
                        });
                    }
                }
            }
        }
        Catalog::new(objects).expect("desk catalog is valid by construction")
    }

    /// Class names in catalog order, deduplicated.
    pub fn class_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.class_name) {
                out.push(o.class_name.clone());
            }
        }
        out
    }

    pub fn instances_of(&self, class_name: &str) -> Vec<&ObjectSpec> {
        self.objects.iter().filter(|o| o.class_name == class_name).collect()
    }

    pub fn instance(&self, instance_id: &str) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| o.instance_id == instance_id)
    }

    /// Classes grouped by color, preserving catalog order inside each group.
    pub fn classes_by_color(&self) -> BTreeMap<String, Vec<String>> {
        let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for o in &self.objects {
            let entry = map.entry(o.color_name.clone()).or_default();
            if !entry.contains(&o.class_name) {
                entry.push(o.class_name.clone());
            }
        }
        map
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("catalog serialization failed: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Catalog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: Catalog = serde_json::from_str(&text)
            .map_err(|e| Error::corrupt(path, format!("catalog parse failed: {e}")))?;
        Catalog::new(raw.objects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_catalog_shape() {
        let cat = Catalog::desk();
        assert_eq!(cat.objects.len(), 120);
        assert_eq!(cat.class_names().len(), 20);
        for class in cat.class_names() {
            assert_eq!(cat.instances_of(&class).len(), 6, "class {class}");
        }
        let by_color = cat.classes_by_color();
        assert_eq!(by_color.len(), 5);
        for (_, classes) in by_color {
            assert_eq!(classes.len(), 4);
        }
    }

    #[test]
    fn desk_diameters_in_bounds() {
        for o in &Catalog::desk().objects {
            assert!(o.diameter >= MIN_DIAMETER && o.diameter <= MAX_DIAMETER);
        }
    }

    #[test]
    fn catalog_rejects_out_of_range_diameter() {
        let mut objects = Catalog::desk().objects;
        objects[0].diameter = 41.0;
        assert!(Catalog::new(objects).is_err());

        let mut objects = Catalog::desk().objects;
        objects[5].diameter = 3.0;
        assert!(Catalog::new(objects).is_err());
    }

    #[test]
    fn catalog_rejects_duplicate_ids() {
        let mut objects = Catalog::desk().objects;
        let dup = objects[0].clone();
        objects.push(dup);
        assert!(Catalog::new(objects).is_err());
    }

    #[test]
    fn color_families_pairwise_far_apart() {
        // The centroid oracle needs every family (at either shade) to be far
        // from every other family, and from the zone colors and background.
        let mut palettes: Vec<[f64; 3]> = Vec::new();
        for (_, base) in COLOR_FAMILIES {
            for (_, f) in SHADE_WORDS {
                palettes.push([base[0] * f, base[1] * f, base[2] * f]);
            }
        }
        let mut others: Vec<[f64; 3]> = ZONE_COLORS.iter().map(|(_, c)| *c).collect();
        others.push(BACKGROUND_RGB);
        let dist = |a: [f64; 3], b: [f64; 3]| {
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        for i in 0..palettes.len() {
            for j in 0..palettes.len() {
                // Shades of the same family (j == i +/- 1 within a pair) are
                // allowed to be close; distinct families must stay apart.
                if i / 2 == j / 2 {
                    continue;
                }
                assert!(
                    dist(palettes[i], palettes[j]) > 0.32,
                    "families {i} and {j} too close"
                );
            }
        }
        for p in &palettes {
            for o in &others {
                assert!(dist(*p, *o) > 0.32, "object color too close to zone/background");
            }
        }
    }

    #[test]
    fn catalog_roundtrips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("catalog.json");
        let cat = Catalog::desk();
        cat.save(&path).unwrap();
        let back = Catalog::load(&path).unwrap();
        assert_eq!(cat.objects, back.objects);
    }
}
