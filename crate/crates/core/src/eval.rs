//! Reconstruction metrics, the manipulation benchmark, and the mask-ratio
//! ablation. Everything here is deterministic given a model, a dataset, and
//! the options, so reports can be diffed byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_json, write_png, Corpus};
use crate::encoders::{EncoderConfig, TextConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::grid::PatchGrid;
use crate::heads::{
    extract_se2, iou, BoundingBox, PixelPose, SE2Action, ROTATION_BINS, ROTATION_BIN_DEG,
};
use crate::mask::MaskSpec;
use crate::model::FusionConfig;
use crate::real::Real;
use crate::scenegen::{render_placements_mask, Episode, ImageU8, SplitTag};
use crate::training::checkpoint::config_hash;
use crate::training::{
    finetune_affordance, sha256_file, train_pretext, AffordanceModel, StepLog, TrainConfig,
};

/// Peak signal-to-noise ratio in dB over unit-range images. A perfect
/// reconstruction has no finite dB value, so that case is a distinct variant
/// instead of a sentinel float that would poison averages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Finite(f64),
    Infinite,
}

impl Psnr {
    pub fn from_mse(mse: f64) -> Psnr {
        if mse <= 0.0 {
            Psnr::Infinite
        } else {
            Psnr::Finite(10.0 * (1.0 / mse).log10())
        }
    }

    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Finite(x) => Some(*x),
            Psnr::Infinite => None,
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Finite(x) => ser.serialize_f64(*x),
            Psnr::Infinite => ser.serialize_str("infinity"),
        }
    }
}

impl<'de> Deserialize<'de> for Psnr {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(de)? {
            Raw::Num(x) => Ok(Psnr::Finite(x)),
            Raw::Text(s) if s == "infinity" => Ok(Psnr::Infinite),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
        }
    }
}

/// Reconstruction error of a predicted goal image against the real one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    /// Mean squared error over every pixel channel.
    pub mse_all: f64,
    /// Mean squared error over pixels of masked patches only; 0.0 when the
    /// mask is empty.
    pub mse_masked: f64,
    /// Computed from `mse_all`.
    pub psnr: Psnr,
}

pub fn reconstruction_metrics<F: Real>(
    pred: &Array3<F>,
    target: &Array3<F>,
    mask: &MaskSpec,
    grid: &PatchGrid,
) -> Result<ReconStats> {
    let want = (grid.image_height, grid.image_width, 3);
    if pred.dim() != want || target.dim() != want {
        return Err(Error::mismatch(format!(
            "images {:?} / {:?} do not match the {want:?} grid",
            pred.dim(),
            target.dim()
        )));
    }

    let mut sum_all = 0.0;
    for (p, t) in pred.iter().zip(target.iter()) {
        let d = p.as_f64() - t.as_f64();
        sum_all += d * d;
    }
    let mse_all = sum_all / pred.len() as f64;

    let p = grid.patch_size;
    let mut sum_masked = 0.0;
    for &token in mask.masked_indices() {
        let (row, col) = grid.token_position(token);
        for y in row * p..(row + 1) * p {
            for x in col * p..(col + 1) * p {
                for c in 0..3 {
                    let d = pred[[y, x, c]].as_f64() - target[[y, x, c]].as_f64();
                    sum_masked += d * d;
                }
            }
        }
    }
    let masked_px = mask.masked_len() * p * p * 3;
    let mse_masked = if masked_px == 0 { 0.0 } else { sum_masked / masked_px as f64 };

    Ok(ReconStats { mse_all, mse_masked, psnr: Psnr::from_mse(mse_all) })
}

/// Pass bands for scoring a predicted action against the annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessThresholds {
    /// Allowed circular distance between predicted and annotated rotation.
    pub rot_tol_deg: u32,
}

impl Default for SuccessThresholds {
    fn default() -> Self {
        SuccessThresholds { rot_tol_deg: ROTATION_BIN_DEG }
    }
}

/// Outcome of one scored action. `success` is the conjunction of the parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessFlags {
    /// Pick pixel lands on a target object (re-rendered start-pose mask).
    pub pick_ok: bool,
    /// Place pixel center lands inside the goal zone rectangle.
    pub place_ok: bool,
    /// Pick and place rotations within tolerance of the annotation.
    pub rot_ok: bool,
    pub success: bool,
}

fn circ_dist_deg(a: u32, b: u32) -> u32 {
    let d = (a as i64 - b as i64).rem_euclid(360) as u32;
    d.min(360 - d)
}

pub fn manipulation_success(
    pred: &SE2Action,
    ep: &Episode,
    th: &SuccessThresholds,
) -> Result<SuccessFlags> {
    let (h, w) = (ep.start.height, ep.start.width);
    pred.validate(h, w)?;

    let targets = ep.target_start_placements();
    let target_mask = render_placements_mask(&targets, h, w);
    let pick_ok = target_mask[[pred.pick.u, pred.pick.v]];

    let zone = &ep.meta.zone.rect;
    let place_ok = zone.contains(pred.place.v as f64 + 0.5, pred.place.u as f64 + 0.5);

    let rot_ok = circ_dist_deg(pred.place.theta_deg, ep.action.place.theta_deg) <= th.rot_tol_deg
        && circ_dist_deg(pred.pick.theta_deg, ep.action.pick.theta_deg) <= th.rot_tol_deg;

    let success = pick_ok && place_ok && rot_ok;
    Ok(SuccessFlags { pick_ok, place_ok, rot_ok, success })
}

/// Replays the annotated action; calibrates the benchmark ceiling.
pub fn oracle_policy(ep: &Episode) -> SE2Action {
    ep.action
}

/// Uniform pixels and rotation bins; calibrates the benchmark floor.
pub fn random_policy(ep: &Episode, rng: &mut ChaCha8Rng) -> SE2Action {
    let pose = |rng: &mut ChaCha8Rng| PixelPose {
        u: rng.gen_range(0..ep.start.height),
        v: rng.gen_range(0..ep.start.width),
        theta_deg: rng.gen_range(0..ROTATION_BINS as u32) * ROTATION_BIN_DEG,
    };
    SE2Action { pick: pose(rng), place: pose(rng) }
}

/// Success rates over a set of scored episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub n: usize,
    pub pick: f64,
    pub place: f64,
    pub rot: f64,
    pub success: f64,
}

fn rates_of<'a, I: Iterator<Item = &'a SuccessFlags>>(flags: I) -> Rates {
    let mut r = Rates { n: 0, pick: 0.0, place: 0.0, rot: 0.0, success: 0.0 };
    for f in flags {
        r.n += 1;
        r.pick += f.pick_ok as usize as f64;
        r.place += f.place_ok as usize as f64;
        r.rot += f.rot_ok as usize as f64;
        r.success += f.success as usize as f64;
    }
    if r.n > 0 {
        let inv = 1.0 / r.n as f64;
        r.pick *= inv;
        r.place *= inv;
        r.rot *= inv;
        r.success *= inv;
    }
    r
}

/// Per-episode benchmark outcome, kept verbatim so aggregate rates can be
/// audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub id: String,
    pub split: SplitTag,
    pub task: String,
    pub pred: SE2Action,
    pub flags: SuccessFlags,
    pub recon: ReconStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: SplitTag,
    pub rates: Rates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Hash of the model configuration, matching the checkpoint header.
    pub config_hash: String,
    /// Digest of the checkpoint file when one was supplied.
    pub checkpoint_sha256: Option<String>,
    pub thresholds: SuccessThresholds,
    pub splits: Vec<SplitRow>,
    pub per_task: BTreeMap<String, Rates>,
    pub overall: Rates,
    /// Mean per-episode reconstruction error; psnr recomputed from the mean.
    pub recon: ReconStats,
    /// Sorted by episode id.
    pub records: Vec<EpisodeRecord>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        if self.overall.n != self.records.len() {
            return Err(Error::mismatch(format!(
                "report covers {} episodes but holds {} records",
                self.overall.n,
                self.records.len()
            )));
        }
        let split_n: usize = self.splits.iter().map(|s| s.rates.n).sum();
        if split_n != self.records.len() {
            return Err(Error::mismatch("split rows do not partition the records"));
        }
        let all = self
            .splits
            .iter()
            .map(|s| s.rates)
            .chain(self.per_task.values().copied())
            .chain([self.overall]);
        for r in all {
            for v in [r.pick, r.place, r.rot, r.success] {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::numeric(format!("rate {v} escapes [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    /// Splits to score; duplicates collapse, order is kept.
    pub splits: Vec<SplitTag>,
    /// Scoring threads. Output is identical for any worker count.
    pub workers: usize,
    pub thresholds: SuccessThresholds,
    /// Hashed into the report for provenance when present.
    pub checkpoint: Option<PathBuf>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            splits: vec![SplitTag::Seen, SplitTag::Intra, SplitTag::Inter],
            workers: 1,
            thresholds: SuccessThresholds::default(),
            checkpoint: None,
        }
    }
}

fn score_episodes<F: Real>(
    am: &AffordanceModel<F>,
    vocab: &Vocabulary,
    eps: &[(SplitTag, &Episode)],
    th: &SuccessThresholds,
    workers: usize,
) -> Result<Vec<EpisodeRecord>> {
    let max_len = am.model.text_config().max_len;
    let grid = *am.model.grid();
    let score_one = |tag: SplitTag, ep: &Episode| -> Result<EpisodeRecord> {
        let ids = vocab.encode(&ep.instruction, max_len)?;
        let start = ep.start.to_array::<F>();
        let (maps, out) = am.infer(&start, &ids)?;
        let pred = extract_se2(&maps);
        let flags = manipulation_success(&pred, ep, th)?;
        let goal = ep.goal.to_array::<F>();
        let recon = reconstruction_metrics(&out.goal.image, &goal, &MaskSpec::full(&grid), &grid)?;
        Ok(EpisodeRecord {
            id: ep.id.clone(),
            split: tag,
            task: ep.meta.task.as_str().to_string(),
            pred,
            flags,
            recon,
        })
    };

    let workers = workers.clamp(1, eps.len().max(1));
    if workers == 1 {
        return eps.iter().map(|&(tag, ep)| score_one(tag, ep)).collect();
    }
    std::thread::scope(|s| {
        let score_one = &score_one;
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<Vec<(usize, EpisodeRecord)>> {
                    eps.iter()
                        .enumerate()
                        .skip(w)
                        .step_by(workers)
                        .map(|(i, &(tag, ep))| Ok((i, score_one(tag, ep)?)))
                        .collect()
                })
            })
            .collect();
        let mut indexed = Vec::with_capacity(eps.len());
        for h in handles {
            indexed.extend(h.join().expect("scoring thread panicked")?);
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, r)| r).collect())
    })
}

fn aggregate_report(
    mut records: Vec<EpisodeRecord>,
    split_order: &[SplitTag],
    th: &SuccessThresholds,
    config_hash: String,
    checkpoint_sha256: Option<String>,
) -> EvalReport {
    records.sort_by(|a, b| a.id.cmp(&b.id));

    let splits = split_order
        .iter()
        .map(|&tag| SplitRow {
            split: tag,
            rates: rates_of(records.iter().filter(|r| r.split == tag).map(|r| &r.flags)),
        })
        .collect();

    let mut per_task: BTreeMap<String, Rates> = BTreeMap::new();
    let tasks: BTreeSet<&str> = records.iter().map(|r| r.task.as_str()).collect();
    for task in tasks {
        let rates = rates_of(records.iter().filter(|r| r.task == task).map(|r| &r.flags));
        per_task.insert(task.to_string(), rates);
    }

    let overall = rates_of(records.iter().map(|r| &r.flags));
    let n = records.len().max(1) as f64;
    let mse_all = records.iter().map(|r| r.recon.mse_all).sum::<f64>() / n;
    let mse_masked = records.iter().map(|r| r.recon.mse_masked).sum::<f64>() / n;
    let recon = ReconStats { mse_all, mse_masked, psnr: Psnr::from_mse(mse_all) };

    EvalReport {
        config_hash,
        checkpoint_sha256,
        thresholds: *th,
        splits,
        per_task,
        overall,
        recon,
        records,
    }
}

/// Scores an affordance model over the requested corpus splits. The report
/// depends only on the model, the corpus, and the options.
pub fn run_benchmark<F: Real>(
    am: &AffordanceModel<F>,
    vocab: &Vocabulary,
    corpus: &Corpus,
    opts: &BenchmarkOptions,
) -> Result<EvalReport> {
    if opts.splits.is_empty() {
        let available: Vec<&str> = SplitTag::ALL.iter().map(|t| t.as_str()).collect();
        return Err(Error::invalid(format!(
            "no splits requested; available: {}",
            available.join(", ")
        )));
    }
    let mut order: Vec<SplitTag> = Vec::new();
    for &tag in &opts.splits {
        if !order.contains(&tag) {
            order.push(tag);
        }
    }

    let mut pairs: Vec<(SplitTag, &Episode)> = Vec::new();
    for &tag in &order {
        let eps = corpus.with_tag(tag);
        if eps.is_empty() {
            return Err(Error::invalid(format!("corpus has no {} episodes", tag.as_str())));
        }
        pairs.extend(eps.into_iter().map(|e| (tag, e)));
    }

    if vocab.id() != am.model.vocabulary_id() {
        return Err(Error::mismatch(format!(
            "vocabulary {} does not match the model's {}",
            vocab.id(),
            am.model.vocabulary_id()
        )));
    }

    let records = score_episodes(am, vocab, &pairs, &opts.thresholds, opts.workers)?;
    let hash = config_hash(
        &am.model.encoder_config(),
        &am.model.text_config(),
        &am.model.fusion_config(),
        am.model.vocab_size(),
    );
    let ckpt = match &opts.checkpoint {
        Some(p) => Some(sha256_file(p)?),
        None => None,
    };
    let report = aggregate_report(records, &order, &opts.thresholds, hash, ckpt);
    report.validate()?;
    Ok(report)
}

/// IoU threshold for counting a referring-expression box as grounded.
pub const GROUNDING_IOU: f64 = 0.25;

/// Fraction of (prediction, annotation) pairs whose IoU clears `thresh`.
pub fn grounding_accuracy(pairs: &[(BoundingBox, BoundingBox)], thresh: f64) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(p, t)| iou(p, t) >= thresh).count();
    hits as f64 / pairs.len() as f64
}

/// Annotated target box of an episode as a box value.
pub fn episode_bbox(ep: &Episode) -> BoundingBox {
    let [x, y, w, h] = ep.meta.target_bbox;
    BoundingBox { x, y, w, h }
}

/// RGB radius used to pick out target-colored pixels in a predicted goal.
pub const CENTROID_RGB_TOL: f64 = 0.30;

/// Centroid (row, col) of pixels within `tol` Euclidean RGB distance of
/// `rgb`, pixel-center convention. None when nothing matches.
pub fn color_centroid<F: Real>(image: &Array3<F>, rgb: [f64; 3], tol: f64) -> Option<(f64, f64)> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return None;
    }
    let (mut n, mut su, mut sv) = (0usize, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut d2 = 0.0;
            for ch in 0..3 {
                let d = image[[y, x, ch]].as_f64() - rgb[ch];
                d2 += d * d;
            }
            if d2.sqrt() <= tol {
                n += 1;
                su += y as f64 + 0.5;
                sv += x as f64 + 0.5;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((su / n as f64, sv / n as f64))
    }
}

/// Whether the centroid of target-colored pixels in a predicted goal image
/// falls inside the episode's zone. A missing centroid counts as a miss.
pub fn centroid_in_zone<F: Real>(pred_goal: &Array3<F>, ep: &Episode, tol: f64) -> bool {
    match color_centroid(pred_goal, ep.meta.target_rgb, tol) {
        Some((u, v)) => ep.meta.zone.rect.contains(v, u),
        None => false,
    }
}

/// Success rates at matching mask ratios from the original study of this
/// recipe, overlaid on the sweep plot for orientation.
pub const REFERENCE_MASK_SWEEP: [(f64, f64); 5] =
    [(0.75, 0.66), (0.85, 0.69), (0.90, 0.79), (0.95, 0.83), (1.00, 0.63)];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Goal mask ratios to sweep, each in [0, 1], no duplicates.
    pub ratios: Vec<f64>,
    /// Shared by every ratio so runs differ only in the mask.
    pub pretext: TrainConfig,
    pub finetune: TrainConfig,
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub fusion: FusionConfig,
    pub thresholds: SuccessThresholds,
    /// Where per-ratio checkpoints go; the report output dir when absent.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub pretext_final_loss: f64,
    pub rates: Rates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Copy of [`REFERENCE_MASK_SWEEP`].
    pub reference: Vec<(f64, f64)>,
    pub table_path: PathBuf,
    pub plot_path: PathBuf,
}

/// Pretrains, fine-tunes, and scores one model per mask ratio, then writes
/// `ablation.json` and `ablation.png` under `out_dir`. All runs share the
/// configured seeds, so the ratio is the only varying factor.
pub fn run_mask_ratio_ablation<F: Real>(
    pretrain_eps: &[&Episode],
    finetune_eps: &[&Episode],
    eval_eps: &[&Episode],
    vocab: &Vocabulary,
    cfg: &AblationConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&StepLog),
) -> Result<AblationReport> {
    if cfg.ratios.is_empty() {
        return Err(Error::invalid("ablation needs at least one mask ratio"));
    }
    let mut ratios = cfg.ratios.clone();
    ratios.sort_by(f64::total_cmp);
    for pair in ratios.windows(2) {
        if pair[0] == pair[1] {
            return Err(Error::invalid(format!("duplicate mask ratio {}", pair[0])));
        }
    }
    for &r in &ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!("mask ratio {r} outside [0, 1]")));
        }
    }
    if eval_eps.is_empty() {
        return Err(Error::invalid("ablation needs at least one eval episode"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_dir = cfg.checkpoint_dir.as_deref().unwrap_or(out_dir);
    std::fs::create_dir_all(ckpt_dir).map_err(|e| Error::io(ckpt_dir, e))?;

    let mut rows = Vec::new();
    for &ratio in &ratios {
        let tag = format!("{:03}", (ratio * 100.0).round() as u32);
        let mut pcfg = cfg.pretext;
        pcfg.mask_ratio = ratio;
        let pre_path = ckpt_dir.join(format!("pretext_r{tag}.ckpt"));
        let (model, pre_out) = train_pretext::<F>(
            pretrain_eps,
            vocab,
            cfg.encoder,
            cfg.text,
            cfg.fusion,
            &pcfg,
            &pre_path,
            log,
        )?;
        let ft_path = ckpt_dir.join(format!("affordance_r{tag}.ckpt"));
        let (am, _) = finetune_affordance(finetune_eps, vocab, model, &cfg.finetune, &ft_path, log)?;
        let pairs: Vec<(SplitTag, &Episode)> =
            eval_eps.iter().map(|e| (e.meta.split, *e)).collect();
        let records = score_episodes(&am, vocab, &pairs, &cfg.thresholds, 1)?;
        let rates = rates_of(records.iter().map(|r| &r.flags));
        rows.push(AblationRow { ratio, pretext_final_loss: pre_out.final_loss, rates });
    }

    let report = AblationReport {
        rows,
        reference: REFERENCE_MASK_SWEEP.to_vec(),
        table_path: out_dir.join("ablation.json"),
        plot_path: out_dir.join("ablation.png"),
    };
    write_json(&report.table_path, &report)?;
    write_png(&report.plot_path, &draw_sweep_plot(&report.rows, &report.reference))?;
    Ok(report)
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 360;
const PLOT_MARGIN: (usize, usize, usize, usize) = (20, 20, 45, 50);

/// Success vs mask ratio, measured curve over the reference curve. The plot
/// is schematic (no text labels); `ablation.json` is the precise artifact.
fn draw_sweep_plot(rows: &[AblationRow], reference: &[(f64, f64)]) -> ImageU8 {
    let (top, right, bottom, left) = PLOT_MARGIN;
    let mut img = ImageU8 { height: PLOT_H, width: PLOT_W, data: vec![255; PLOT_H * PLOT_W * 3] };

    let mut xs: Vec<f64> = rows.iter().map(|r| r.ratio).collect();
    xs.extend(reference.iter().map(|&(x, _)| x));
    let xmin = xs.iter().copied().fold(0.70, f64::min);
    let xmax = xs.iter().copied().fold(1.00, f64::max);

    let x0 = left as f64;
    let x1 = (PLOT_W - right) as f64;
    let y0 = (PLOT_H - bottom) as f64;
    let y1 = top as f64;
    let to_px = |rx: f64, ry: f64| -> (f64, f64) {
        let fx = (rx - xmin) / (xmax - xmin);
        (x0 + fx * (x1 - x0), y0 + ry.clamp(0.0, 1.0) * (y1 - y0))
    };

    let grid_rgb = [220, 220, 220];
    let axis_rgb = [60, 60, 60];
    for k in 0..=4 {
        let (ax, ay) = to_px(xmin, k as f64 * 0.25);
        let (bx, _) = to_px(xmax, 0.0);
        draw_line(&mut img, ax, ay, bx, ay, grid_rgb);
    }
    let mut tick = (xmin * 20.0).ceil() / 20.0;
    while tick <= xmax + 1e-9 {
        let (tx, ty) = to_px(tick, 0.0);
        draw_line(&mut img, tx, ty, tx, ty + 5.0, axis_rgb);
        tick += 0.05;
    }
    draw_line(&mut img, x0, y0, x1, y0, axis_rgb);
    draw_line(&mut img, x0, y0, x0, y1, axis_rgb);

    let ref_rgb = [150, 150, 150];
    let run_rgb = [31, 119, 180];
    draw_series(&mut img, reference, to_px, ref_rgb);
    let measured: Vec<(f64, f64)> = rows.iter().map(|r| (r.ratio, r.rates.success)).collect();
    draw_series(&mut img, &measured, to_px, run_rgb);
    img
}

fn draw_series(
    img: &mut ImageU8,
    points: &[(f64, f64)],
    to_px: impl Fn(f64, f64) -> (f64, f64),
    rgb: [u8; 3],
) {
    let px: Vec<(f64, f64)> = points.iter().map(|&(x, y)| to_px(x, y)).collect();
    for pair in px.windows(2) {
        draw_line(img, pair[0].0, pair[0].1, pair[1].0, pair[1].1, rgb);
    }
    for &(cx, cy) in &px {
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                put_px(img, cx as i64 + dx, cy as i64 + dy, rgb);
            }
        }
    }
}

fn put_px(img: &mut ImageU8, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        img.set(y as usize, x as usize, rgb);
    }
}

fn draw_line(img: &mut ImageU8, ax: f64, ay: f64, bx: f64, by: f64, rgb: [u8; 3]) {
    let steps = (bx - ax).abs().max((by - ay).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put_px(img, (ax + t * (bx - ax)).round() as i64, (ay + t * (by - ay)).round() as i64, rgb);
    }
}

/// Scans a corpus for split leakage: inter-split class names or held-out
/// instance ids appearing anywhere in a training episode (placements,
/// targets, or instruction text), and episode ids shared across splits.
pub fn check_split_hygiene(corpus: &Corpus) -> Result<()> {
    let inter: BTreeSet<&String> = corpus.splits.inter_classes.iter().collect();
    let held: BTreeSet<&String> = corpus.splits.held_instances.iter().collect();
    let mut violations: Vec<String> = Vec::new();

    let mut seen_ids: BTreeMap<&str, SplitTag> = BTreeMap::new();
    for ep in &corpus.episodes {
        if let Some(prev) = seen_ids.insert(ep.id.as_str(), ep.meta.split) {
            violations.push(format!("episode id {} appears in {} and {}", ep.id, prev.as_str(), ep.meta.split.as_str()));
        }
    }

    for ep in corpus.with_tag(SplitTag::Train) {
        let placements = ep.meta.start_placements.iter().chain(&ep.meta.goal_placements);
        for p in placements {
            if inter.contains(&p.object.class_name) {
                violations.push(format!(
                    "train episode {} places inter-split class {}",
                    ep.id, p.object.class_name
                ));
            }
            if held.contains(&p.object.instance_id) {
                violations.push(format!(
                    "train episode {} places held instance {}",
                    ep.id, p.object.instance_id
                ));
            }
        }
        if inter.contains(&ep.meta.target_class) {
            violations.push(format!(
                "train episode {} targets inter-split class {}",
                ep.id, ep.meta.target_class
            ));
        }
        for id in &ep.meta.target_instance_ids {
            if held.contains(id) {
                violations.push(format!("train episode {} targets held instance {id}", ep.id));
            }
        }
        for class in &corpus.splits.inter_classes {
            if ep.instruction.contains(class.as_str()) {
                violations.push(format!(
                    "train episode {} instruction mentions inter-split class {class}",
                    ep.id
                ));
            }
        }
    }

    if violations.is_empty() {
        return Ok(());
    }
    violations.truncate(10);
    Err(Error::invalid(format!("split hygiene violated: {}", violations.join("; "))))
}
