//! Procedural tabletop environment.
//!
//! Generates the full training and evaluation corpus: an object catalog,
//! generalization splits, scene layouts, deterministic renders, templated
//! instructions, and scripted pick-and-place annotations.

pub mod catalog;
pub mod episode;
pub mod instruction;
pub mod regions;
pub mod render;
pub mod splits;

pub use catalog::{Catalog, ObjectSpec, ShapeKind};
pub use episode::{generate_episode, Episode, EpisodeMeta, SceneGenConfig, TaskKind};
pub use instruction::{make_instruction, parse_instruction, InstructionStyle, ParsedInstruction};
pub use regions::{partition_regions, Rect, Region};
pub use render::{grasp_point, mask_bbox, render_placements_mask, render_scene, ImageU8, Placement, Scene, Zone};
pub use splits::{make_splits, SplitAssignment, SplitTag};
