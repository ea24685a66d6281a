//! Episode synthesis: scripted packing tasks on procedurally laid-out desks.
//!
//! An episode is one start/goal image pair plus a language instruction and a
//! scripted pick-and-place annotation. Packing tasks come in two flavors:
//! sequential (several differently colored targets, one moved per episode)
//! and group (every instance of one class moved at once).
//!
//! Scenes keep one object per partition leaf outside the zone, so objects
//! never overlap on the table; the instructed target is drawn last, so it is
//! never occluded in the goal image.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{PixelPose, SE2Action};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::catalog::{Catalog, ObjectSpec, ZONE_COLORS};
use crate::scenegen::instruction::{make_instruction, InstructionStyle};
use crate::scenegen::regions::{partition_regions, Rect, Region};
use crate::scenegen::render::{grasp_point, mask_bbox, render_placements_mask, render_scene, ImageU8, Placement, Scene, Zone};
use crate::scenegen::splits::{SplitAssignment, SplitTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Multiple distinct-color targets; the episode moves target `step_index`
    /// with targets `0..step_index` already packed.
    PackingSeq,
    /// All instances of one class move into the zone in a single transition.
    PackingGrp,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::PackingSeq, TaskKind::PackingGrp];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::PackingSeq => "packing_seq",
            TaskKind::PackingGrp => "packing_grp",
        }
    }

    pub fn from_str(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|t| t.as_str() == s)
    }
}

/// Knobs for scene synthesis. Defaults produce 64x64 desks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGenConfig {
    pub image_size: usize,
    /// Partition leaf count; one leaf hosts the zone, the rest host objects.
    pub n_regions: usize,
    /// Zone side bounds in pixels.
    pub zone_min: f64,
    pub zone_max: f64,
    pub distractors_min: usize,
    pub distractors_max: usize,
    /// Sequential task length bounds.
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    /// Group task instance count bounds.
    pub grp_count_min: usize,
    pub grp_count_max: usize,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        SceneGenConfig {
            image_size: 64,
            n_regions: 7,
            zone_min: 14.0,
            zone_max: 24.0,
            distractors_min: 1,
            distractors_max: 2,
            seq_len_min: 2,
            seq_len_max: 3,
            grp_count_min: 2,
            grp_count_max: 3,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::invalid("image_size must be at least 32"));
        }
        if self.n_regions < 2 {
            return Err(Error::invalid("n_regions must leave room for objects"));
        }
        if self.zone_min < 8.0 || self.zone_max < self.zone_min {
            return Err(Error::invalid("zone bounds out of order"));
        }
        if self.seq_len_min == 0 || self.seq_len_max < self.seq_len_min {
            return Err(Error::invalid("sequence length bounds out of order"));
        }
        if self.grp_count_min == 0 || self.grp_count_max < self.grp_count_min {
            return Err(Error::invalid("group count bounds out of order"));
        }
        if self.distractors_max < self.distractors_min {
            return Err(Error::invalid("distractor bounds out of order"));
        }
        let needed = self.seq_len_max.max(self.grp_count_max) + self.distractors_max;
        if self.n_regions < needed + 1 {
            return Err(Error::invalid(format!(
                "n_regions {} cannot host up to {needed} table objects plus the zone",
                self.n_regions
            )));
        }
        Ok(())
    }
}

/// Everything about an episode except the rendered pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: String,
    pub task: TaskKind,
    pub split: SplitTag,
    pub seed: u64,
    /// Position of this transition in the scripted task.
    pub step_index: usize,
    pub step_count: usize,
    pub instruction_style: InstructionStyle,
    pub zone: Zone,
    pub workspace: Rect,
    pub target_class: String,
    /// Instance ids the instruction refers to (several for group tasks).
    pub target_instance_ids: Vec<String>,
    pub target_rgb: [f64; 3],
    /// Union bounding box of the targets in the start image, normalized
    /// (x, y, w, h).
    pub target_bbox: [f64; 4],
    pub start_placements: Vec<Placement>,
    pub goal_placements: Vec<Placement>,
}

/// One supervised transition.
#[derive(Debug, Clone)]
pub struct Episode {
    pub id: String,
    pub start: ImageU8,
    pub goal: ImageU8,
    pub instruction: String,
    pub action: SE2Action,
    pub meta: EpisodeMeta,
}

impl Episode {
    /// Placements the instruction refers to, in start-scene poses.
    pub fn target_start_placements(&self) -> Vec<Placement> {
        self.meta
            .start_placements
            .iter()
            .filter(|p| self.meta.target_instance_ids.contains(&p.object.instance_id))
            .cloned()
            .collect()
    }
}

const QUARTER_ROTS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];

/// Rotation the gripper applies so the object lands axis-aligned.
fn place_rotation(start_rot: f64) -> u32 {
    ((360.0 - start_rot) % 360.0).round() as u32 % 360
}

fn pixel_pose(x: f64, y: f64, theta_deg: u32, size: usize) -> PixelPose {
    let clamp = |v: f64| (v.floor().max(0.0) as usize).min(size - 1);
    PixelPose { u: clamp(y), v: clamp(x), theta_deg }
}

struct ZonePick {
    zone: Zone,
    /// Indices of leaves still free for objects.
    free: Vec<usize>,
}

fn pick_zone(leaves: &[Region], cfg: &SceneGenConfig, rng: &mut ChaCha8Rng) -> Result<ZonePick> {
    let mut best = 0;
    for (i, l) in leaves.iter().enumerate() {
        if l.bounds.min_side() > leaves[best].bounds.min_side() {
            best = i;
        }
    }
    let leaf = leaves[best].bounds;
    let w = (leaf.width() - 2.0).min(cfg.zone_max);
    let h = (leaf.height() - 2.0).min(cfg.zone_max);
    if w < cfg.zone_min || h < cfg.zone_min {
        return Err(Error::invalid("best leaf too small for a zone"));
    }
    let (cx, cy) = leaf.center();
    let rect = Rect::new(cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5)?;
    let (color_name, rgb) = *ZONE_COLORS.as_slice().choose(rng).expect("non-empty");
    let free = (0..leaves.len()).filter(|i| *i != best).collect();
    Ok(ZonePick {
        zone: Zone { rect, color_name: color_name.to_string(), rgb },
        free,
    })
}

/// Slot centers inside the zone for packed objects. The first two slots are
/// always diagonal corners so the two largest packed objects stay far apart.
fn zone_slots(zone: &Rect, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let (w, h) = (zone.width(), zone.height());
    let corners = [
        (zone.x0 + w * 0.25, zone.y0 + h * 0.25),
        (zone.x0 + w * 0.75, zone.y0 + h * 0.25),
        (zone.x0 + w * 0.75, zone.y0 + h * 0.75),
        (zone.x0 + w * 0.25, zone.y0 + h * 0.75),
    ];
    let c0 = rng.gen_range(0..4usize);
    let mut order = vec![c0, (c0 + 2) % 4];
    let mut rest = vec![(c0 + 1) % 4, (c0 + 3) % 4];
    rest.shuffle(rng);
    order.extend(rest);
    order
        .into_iter()
        .map(|i| {
            let (x, y) = corners[i];
            (x + rng.gen_range(-1.0..=1.0), y + rng.gen_range(-1.0..=1.0))
        })
        .collect()
}

/// Assigns each diameter a free leaf it fully fits in and a jittered center.
/// Fails (for retry) when some object fits no remaining leaf.
fn assign_leaves(
    leaves: &[Region],
    free: &[usize],
    diameters: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(f64, f64)>> {
    let mut pool: Vec<usize> = free.to_vec();
    pool.shuffle(rng);
    let mut order: Vec<usize> = (0..diameters.len()).collect();
    order.sort_by(|a, b| diameters[*b].partial_cmp(&diameters[*a]).unwrap());
    let mut out = vec![(0.0, 0.0); diameters.len()];
    for obj in order {
        let d = diameters[obj];
        let Some(slot) = pool.iter().position(|i| leaves[*i].bounds.min_side() >= d + 2.0) else {
            return Err(Error::invalid("no leaf large enough for object"));
        };
        let leaf = leaves[pool.remove(slot)].bounds;
        let inner = leaf.shrink(d * 0.5 + 1.0)?;
        let x = rng.gen_range(inner.x0..inner.x1);
        let y = rng.gen_range(inner.y0..inner.y1);
        out[obj] = (x, y);
    }
    Ok(out)
}

/// Prefers instances that comfortably share the zone; falls back to the whole
/// pool when the split leaves no small instance.
fn choose_target_instance<'a>(pool: &[&'a ObjectSpec], rng: &mut ChaCha8Rng) -> &'a ObjectSpec {
    let small: Vec<&&ObjectSpec> = pool.iter().filter(|o| o.diameter <= 12.5).collect();
    if small.is_empty() {
        pool.choose(rng).expect("non-empty pool")
    } else {
        *small.choose(rng).expect("non-empty")
    }
}

struct TaskDraft {
    /// One entry per scripted step, in packing order.
    targets: Vec<ObjectSpec>,
    /// Step executed by this episode.
    step_index: usize,
    distractors: Vec<ObjectSpec>,
    plural: bool,
}

fn draft_task(
    task: TaskKind,
    catalog: &Catalog,
    splits: &SplitAssignment,
    tag: SplitTag,
    cfg: &SceneGenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TaskDraft> {
    let by_color = catalog.classes_by_color();
    let target_pool = splits.class_pool(tag);
    let mut colors: Vec<&String> = by_color.keys().collect();
    colors.shuffle(rng);

    let class_in = |color: &str, pool: &[String]| -> Vec<String> {
        by_color[color].iter().filter(|c| pool.contains(c)).cloned().collect()
    };

    let mut targets = Vec::new();
    let mut used_colors: Vec<String> = Vec::new();
    match task {
        TaskKind::PackingSeq => {
            let want = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
            for color in &colors {
                if targets.len() == want {
                    break;
                }
                let classes = class_in(color, target_pool);
                if classes.is_empty() {
                    continue;
                }
                let class = classes.choose(rng).expect("non-empty").clone();
                let pool = splits.instance_pool(catalog, tag, &class);
                if pool.is_empty() {
                    continue;
                }
                targets.push(choose_target_instance(&pool, rng).clone());
                used_colors.push(color.to_string());
            }
            if targets.is_empty() {
                return Err(Error::invalid("no target classes available for split"));
            }
        }
        TaskKind::PackingGrp => {
            let class = target_pool
                .choose(rng)
                .ok_or_else(|| Error::invalid("no target classes available for split"))?;
            let pool = splits.instance_pool(catalog, tag, class);
            if pool.is_empty() {
                return Err(Error::invalid("no target instances available for split"));
            }
            let spec = choose_target_instance(&pool, rng).clone();
            let count = rng.gen_range(cfg.grp_count_min..=cfg.grp_count_max);
            used_colors.push(spec.color_name.clone());
            targets = vec![spec; count];
        }
    }

    // Distractors always come from training classes so the training corpus
    // never leaks held-out classes; their colors stay distinct from targets
    // and from each other so name-only instructions are unambiguous.
    let mut distractors = Vec::new();
    let want_d = rng.gen_range(cfg.distractors_min..=cfg.distractors_max);
    for color in &colors {
        if distractors.len() == want_d {
            break;
        }
        if used_colors.iter().any(|c| c == *color) {
            continue;
        }
        let classes = class_in(color, &splits.train_classes);
        if classes.is_empty() {
            continue;
        }
        let class = classes.choose(rng).expect("non-empty").clone();
        let pool = splits.instance_pool(catalog, SplitTag::Train, &class);
        if pool.is_empty() {
            continue;
        }
        distractors.push((*pool.choose(rng).expect("non-empty")).clone());
        used_colors.push(color.to_string());
    }

    let step_index = match task {
        TaskKind::PackingSeq => rng.gen_range(0..targets.len()),
        TaskKind::PackingGrp => 0,
    };
    Ok(TaskDraft {
        targets,
        step_index,
        distractors,
        plural: task == TaskKind::PackingGrp,
    })
}

fn try_generate(
    task: TaskKind,
    catalog: &Catalog,
    splits: &SplitAssignment,
    tag: SplitTag,
    cfg: &SceneGenConfig,
    id: &str,
    seed: u64,
    attempt_seed: u64,
) -> Result<Episode> {
    let size = cfg.image_size;
    let ws = Rect::new(0.0, 0.0, size as f64, size as f64)?;
    let mut rng = rng_from_seed(attempt_seed);
    let leaves = partition_regions(ws, cfg.n_regions, rng.gen())?;
    let ZonePick { zone, free } = pick_zone(&leaves, cfg, &mut rng)?;
    let slots = zone_slots(&zone.rect, &mut rng);
    let draft = draft_task(task, catalog, splits, tag, cfg, &mut rng)?;
    let j = draft.step_index;

    // Table residents at start: distractors, targets not yet packed.
    let mut table_objs: Vec<&ObjectSpec> = draft.distractors.iter().collect();
    let pending: Vec<usize> = match task {
        TaskKind::PackingSeq => (j..draft.targets.len()).collect(),
        TaskKind::PackingGrp => (0..draft.targets.len()).collect(),
    };
    for k in &pending {
        table_objs.push(&draft.targets[*k]);
    }
    let diameters: Vec<f64> = table_objs.iter().map(|o| o.diameter).collect();
    let table_pos = assign_leaves(&leaves, &free, &diameters, &mut rng)?;

    let mut rots: Vec<f64> = Vec::new();
    for _ in 0..table_objs.len() {
        rots.push(*QUARTER_ROTS.as_slice().choose(&mut rng).expect("non-empty"));
    }
    if task == TaskKind::PackingGrp {
        // Identical copies share one start rotation so a single scripted
        // rotation packs them all.
        let shared = rots[draft.distractors.len()];
        for r in rots.iter_mut().skip(draft.distractors.len()) {
            *r = shared;
        }
    }

    // Painter order: distractors, already-packed targets, pending targets
    // other than the instructed ones, instructed targets last.
    let mk = |o: &ObjectSpec, x: f64, y: f64, rot: f64| Placement {
        object: o.clone(),
        x,
        y,
        rot_deg: rot,
    };
    let mut start_placements = Vec::new();
    let mut goal_placements = Vec::new();
    for (i, d) in draft.distractors.iter().enumerate() {
        let (x, y) = table_pos[i];
        start_placements.push(mk(d, x, y, rots[i]));
        goal_placements.push(mk(d, x, y, rots[i]));
    }
    if task == TaskKind::PackingSeq {
        for k in 0..j {
            let (sx, sy) = slots[k];
            start_placements.push(mk(&draft.targets[k], sx, sy, 0.0));
            goal_placements.push(mk(&draft.targets[k], sx, sy, 0.0));
        }
        for (pi, k) in pending.iter().enumerate().skip(1) {
            let ti = draft.distractors.len() + pi;
            let (x, y) = table_pos[ti];
            start_placements.push(mk(&draft.targets[*k], x, y, rots[ti]));
            goal_placements.push(mk(&draft.targets[*k], x, y, rots[ti]));
        }
    }

    // Instructed targets: at their leaves in the start scene, at zone slots
    // in the goal scene.
    let instructed: Vec<usize> = match task {
        TaskKind::PackingSeq => vec![j],
        TaskKind::PackingGrp => pending.clone(),
    };
    let mut instructed_start = Vec::new();
    let mut instructed_goal = Vec::new();
    for k in &instructed {
        let pi = pending.iter().position(|p| p == k).expect("instructed is pending");
        let ti = draft.distractors.len() + pi;
        let (x, y) = table_pos[ti];
        let (sx, sy) = slots[*k];
        instructed_start.push(mk(&draft.targets[*k], x, y, rots[ti]));
        instructed_goal.push(mk(&draft.targets[*k], sx, sy, 0.0));
    }
    start_placements.extend(instructed_start.clone());
    goal_placements.extend(instructed_goal);

    let start = render_scene(&Scene {
        height: size,
        width: size,
        zone: zone.clone(),
        placements: start_placements.clone(),
    })?;
    let goal = render_scene(&Scene {
        height: size,
        width: size,
        zone: zone.clone(),
        placements: goal_placements.clone(),
    })?;

    let style = if rng.gen::<bool>() {
        InstructionStyle::NameOnly
    } else {
        InstructionStyle::Description
    };
    let spec = &draft.targets[instructed[0]];
    let instruction = make_instruction(spec, draft.plural, &zone, style);

    let first = &instructed_start[0];
    let (gx, gy) = grasp_point(first);
    let (px, py) = slots[instructed[0]];
    let action = SE2Action {
        pick: pixel_pose(gx, gy, 0, size),
        place: pixel_pose(px, py, place_rotation(first.rot_deg), size),
    };
    action.validate(size, size)?;

    let target_mask = render_placements_mask(&instructed_start, size, size);
    let target_bbox = mask_bbox(&target_mask)
        .ok_or_else(|| Error::invalid("instructed target rendered no pixels"))?;

    let step_count = match task {
        TaskKind::PackingSeq => draft.targets.len(),
        // The whole group moves in one scripted transition.
        TaskKind::PackingGrp => 1,
    };
    let meta = EpisodeMeta {
        id: id.to_string(),
        task,
        split: tag,
        seed,
        step_index: j,
        step_count,
        instruction_style: style,
        zone,
        workspace: ws,
        target_class: spec.class_name.clone(),
        target_instance_ids: instructed_start
            .iter()
            .map(|p| p.object.instance_id.clone())
            .collect(),
        target_rgb: spec.rgb,
        target_bbox,
        start_placements,
        goal_placements,
    };
    Ok(Episode { id: id.to_string(), start, goal, instruction, action, meta })
}

const MAX_ATTEMPTS: u64 = 16;

/// Generates one episode deterministically from `seed`. Layout draws that
/// fail geometric constraints retry with derived seeds, so the function is a
/// pure function of its arguments.
pub fn generate_episode(
    task: TaskKind,
    catalog: &Catalog,
    splits: &SplitAssignment,
    tag: SplitTag,
    cfg: &SceneGenConfig,
    seed: u64,
) -> Result<Episode> {
    cfg.validate()?;
    splits.validate(catalog)?;
    let id = format!("ep_{seed:016x}");
    let mut last = None;
    for attempt in 0..MAX_ATTEMPTS {
        let s = derive_seed(seed, 0xe50_0000 + attempt);
        match try_generate(task, catalog, splits, tag, cfg, &id, seed, s) {
            Ok(ep) => return Ok(ep),
            Err(e) => last = Some(e),
        }
    }
    Err(Error::invalid(format!(
        "episode generation failed after {MAX_ATTEMPTS} attempts: {}",
        last.expect("at least one attempt ran")
    )))
}
