//! Corpus persistence and batch scheduling.
//!
//! An episode directory holds `start.png`, `goal.png`, `instruction.txt`,
//! `action.json`, and `meta.json`. A corpus root holds episode directories
//! plus `index.json`, `catalog.json`, `splits.json`, and `config.json`.
//! Generation is a pure function of the base seed, so regenerating a corpus
//! reproduces every file byte for byte regardless of worker count.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::{PixelPose, SE2Action};
use crate::rng::{derive_seed, rng_from_seed};
use crate::scenegen::{
    generate_episode, Catalog, Episode, EpisodeMeta, ImageU8, SceneGenConfig, SplitAssignment,
    SplitTag, TaskKind,
};

pub const INDEX_FILE: &str = "index.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const CONFIG_FILE: &str = "config.json";

pub fn write_png(path: &Path, img: &ImageU8) -> Result<()> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::invalid("image buffer does not match dimensions"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_png(path: &Path) -> Result<ImageU8> {
    let img = image::open(path)
        .map_err(|e| Error::corrupt(path, format!("png decode failed: {e}")))?
        .to_rgb8();
    ImageU8::from_raw(img.height() as usize, img.width() as usize, img.into_raw())
}

/// On-disk action encoding: `{"pick": [u, v, theta], "place": [u, v, theta]}`.
#[derive(Serialize, Deserialize)]
struct ActionFile {
    pick: [u64; 3],
    place: [u64; 3],
}

impl ActionFile {
    fn from_action(a: &SE2Action) -> ActionFile {
        let t = |p: &PixelPose| [p.u as u64, p.v as u64, p.theta_deg as u64];
        ActionFile { pick: t(&a.pick), place: t(&a.place) }
    }

    fn into_action(self) -> SE2Action {
        let t = |p: [u64; 3]| PixelPose {
            u: p[0] as usize,
            v: p[1] as usize,
            theta_deg: p[2] as u32,
        };
        SE2Action { pick: t(self.pick), place: t(self.place) }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::corrupt(path, format!("json parse failed: {e}")))
}

/// Writes one episode directory under `root`.
pub fn save_episode(root: &Path, ep: &Episode) -> Result<()> {
    let dir = root.join(&ep.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_png(&dir.join("start.png"), &ep.start)?;
    write_png(&dir.join("goal.png"), &ep.goal)?;
    let ins = dir.join("instruction.txt");
    std::fs::write(&ins, format!("{}\n", ep.instruction)).map_err(|e| Error::io(&ins, e))?;
    write_json(&dir.join("action.json"), &ActionFile::from_action(&ep.action))?;
    write_json(&dir.join("meta.json"), &ep.meta)?;
    Ok(())
}

/// Reads one episode directory back.
pub fn load_episode(root: &Path, id: &str) -> Result<Episode> {
    let dir = root.join(id);
    let meta: EpisodeMeta = read_json(&dir.join("meta.json"))?;
    if meta.id != id {
        return Err(Error::corrupt(&dir, format!("meta id {} does not match directory {id}", meta.id)));
    }
    let start = read_png(&dir.join("start.png"))?;
    let goal = read_png(&dir.join("goal.png"))?;
    let ins = dir.join("instruction.txt");
    let instruction = std::fs::read_to_string(&ins)
        .map_err(|e| Error::io(&ins, e))?
        .trim_end()
        .to_string();
    let action: ActionFile = read_json(&dir.join("action.json"))?;
    Ok(Episode {
        id: id.to_string(),
        start,
        goal,
        instruction,
        action: action.into_action(),
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub task: TaskKind,
    pub split: SplitTag,
}

/// Episode listing in generation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub episodes: Vec<IndexEntry>,
}

impl DatasetIndex {
    pub fn ids_with_tag(&self, tag: SplitTag) -> Vec<&str> {
        self.episodes
            .iter()
            .filter(|e| e.split == tag)
            .map(|e| e.id.as_str())
            .collect()
    }
}

/// Generation request and provenance, stored as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub scene: SceneGenConfig,
    pub base_seed: u64,
    /// (split, episode count) segments in generation order.
    pub counts: Vec<(SplitTag, usize)>,
}

/// Generates `counts` episodes per split under `root`. Episode `i` (global
/// order) always uses seed `derive_seed(base_seed, i)` and alternates tasks
/// unless `task` pins one, so output bytes do not depend on `workers`.
pub fn generate_corpus(
    root: &Path,
    catalog: &Catalog,
    splits: &SplitAssignment,
    cfg: &SceneGenConfig,
    counts: &[(SplitTag, usize)],
    task: Option<TaskKind>,
    base_seed: u64,
    workers: usize,
) -> Result<DatasetIndex> {
    cfg.validate()?;
    splits.validate(catalog)?;
    if counts.iter().map(|(_, n)| n).sum::<usize>() == 0 {
        return Err(Error::invalid("corpus must contain at least one episode"));
    }
    let workers = workers.max(1);
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut jobs: Vec<(usize, SplitTag)> = Vec::new();
    for (tag, n) in counts {
        for _ in 0..*n {
            jobs.push((jobs.len(), *tag));
        }
    }

    let task_of = |i: usize| task.unwrap_or(TaskKind::ALL[i % TaskKind::ALL.len()]);
    let results: Vec<Result<IndexEntry>> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for w in 0..workers {
            let jobs = &jobs;
            handles.push(scope.spawn(move || {
                let mut out = Vec::new();
                for (i, tag) in jobs.iter().skip(w).step_by(workers) {
                    let seed = derive_seed(base_seed, *i as u64);
                    let ep = generate_episode(task_of(*i), catalog, splits, *tag, cfg, seed)
                        .and_then(|ep| save_episode(root, &ep).map(|()| ep));
                    out.push((
                        *i,
                        ep.map(|ep| IndexEntry { id: ep.id, task: task_of(*i), split: *tag }),
                    ));
                }
                out
            }));
        }
        let mut all: Vec<(usize, Result<IndexEntry>)> = Vec::new();
        for h in handles {
            all.extend(h.join().expect("corpus worker panicked"));
        }
        all.sort_by_key(|(i, _)| *i);
        all.into_iter().map(|(_, r)| r).collect()
    });

    let mut episodes = Vec::with_capacity(results.len());
    for r in results {
        episodes.push(r?);
    }
    let ids: BTreeSet<&String> = episodes.iter().map(|e| &e.id).collect();
    if ids.len() != episodes.len() {
        return Err(Error::invalid("seed collision produced duplicate episode ids"));
    }
    let index = DatasetIndex { episodes };
    write_json(&root.join(INDEX_FILE), &index)?;
    catalog.save(&root.join(CATALOG_FILE))?;
    splits.save(&root.join(SPLITS_FILE))?;
    write_json(
        &root.join(CONFIG_FILE),
        &CorpusConfig { scene: cfg.clone(), base_seed, counts: counts.to_vec() },
    )?;
    Ok(index)
}

/// A corpus loaded into memory.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub episodes: Vec<Episode>,
    pub index: DatasetIndex,
    pub catalog: Catalog,
    pub splits: SplitAssignment,
    pub config: CorpusConfig,
}

impl Corpus {
    pub fn with_tag(&self, tag: SplitTag) -> Vec<&Episode> {
        self.episodes.iter().filter(|e| e.meta.split == tag).collect()
    }

    pub fn instructions(&self) -> Vec<&str> {
        self.episodes.iter().map(|e| e.instruction.as_str()).collect()
    }
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let index: DatasetIndex = read_json(&root.join(INDEX_FILE))?;
    let catalog = Catalog::load(&root.join(CATALOG_FILE))?;
    let splits = SplitAssignment::load(&root.join(SPLITS_FILE))?;
    let config: CorpusConfig = read_json(&root.join(CONFIG_FILE))?;
    let mut episodes = Vec::with_capacity(index.episodes.len());
    for entry in &index.episodes {
        let ep = load_episode(root, &entry.id)?;
        if ep.meta.split != entry.split || ep.meta.task != entry.task {
            return Err(Error::corrupt(
                root,
                format!("episode {} disagrees with index tags", entry.id),
            ));
        }
        episodes.push(ep);
    }
    Ok(Corpus { episodes, index, catalog, splits, config })
}

/// Deterministic epoch shuffling: step `s` of a run consumes samples
/// `s*batch .. (s+1)*batch` of the concatenated per-epoch permutations.
pub struct BatchSchedule {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

fn epoch_permutation(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut perm: Vec<usize> = (0..len).collect();
    let mut rng = rng_from_seed(derive_seed(seed, 0xbac0_0000 + epoch as u64));
    perm.shuffle(&mut rng);
    perm
}

impl BatchSchedule {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<BatchSchedule> {
        if len == 0 || batch == 0 {
            return Err(Error::invalid("batch schedule needs non-empty data and batch"));
        }
        Ok(BatchSchedule { len, batch, seed, epoch: 0, perm: epoch_permutation(len, seed, 0) })
    }

    /// Dataset indices for one optimization step.
    pub fn indices(&mut self, step: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        for k in 0..self.batch {
            let g = step * self.batch + k;
            let (epoch, pos) = (g / self.len, g % self.len);
            if epoch != self.epoch {
                self.epoch = epoch;
                self.perm = epoch_permutation(self.len, self.seed, epoch);
            }
            out.push(self.perm[pos]);
        }
        out
    }
}

/// Recursively compares two directory trees byte for byte.
pub fn dirs_identical(a: &Path, b: &Path) -> Result<bool> {
    let list = |p: &Path| -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let mut stack = vec![p.to_path_buf()];
        while let Some(d) = stack.pop() {
            for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
                let entry = entry.map_err(|e| Error::io(&d, e))?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path.strip_prefix(p).expect("under root").to_path_buf());
                }
            }
        }
        out.sort();
        Ok(out)
    };
    let (fa, fb) = (list(a)?, list(b)?);
    if fa != fb {
        return Ok(false);
    }
    for rel in fa {
        let (pa, pb) = (a.join(&rel), b.join(&rel));
        let ba = std::fs::read(&pa).map_err(|e| Error::io(&pa, e))?;
        let bb = std::fs::read(&pb).map_err(|e| Error::io(&pb, e))?;
        if ba != bb {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::make_splits;

    fn fixtures() -> (Catalog, SplitAssignment, SceneGenConfig) {
        let cat = Catalog::desk();
        let splits = make_splits(&cat, 4, 4, 2, 11).unwrap();
        (cat, splits, SceneGenConfig::default())
    }

    #[test]
    fn episode_roundtrips_through_disk() {
        let (cat, splits, cfg) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        for task in TaskKind::ALL {
            let ep = generate_episode(task, &cat, &splits, SplitTag::Train, &cfg, 99).unwrap();
            save_episode(dir.path(), &ep).unwrap();
            let back = load_episode(dir.path(), &ep.id).unwrap();
            assert_eq!(ep.start, back.start);
            assert_eq!(ep.goal, back.goal);
            assert_eq!(ep.instruction, back.instruction);
            assert_eq!(ep.action, back.action);
            assert_eq!(ep.meta, back.meta);
        }
    }

    #[test]
    fn corpus_generation_writes_index_and_loads_back() {
        let (cat, splits, cfg) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let counts = [(SplitTag::Train, 6), (SplitTag::Intra, 2), (SplitTag::Inter, 2)];
        let index = generate_corpus(dir.path(), &cat, &splits, &cfg, &counts, None, 7, 1).unwrap();
        assert_eq!(index.episodes.len(), 10);
        assert_eq!(index.ids_with_tag(SplitTag::Train).len(), 6);
        assert_eq!(index.ids_with_tag(SplitTag::Inter).len(), 2);
        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.episodes.len(), 10);
        assert_eq!(corpus.with_tag(SplitTag::Intra).len(), 2);
        assert_eq!(corpus.config.base_seed, 7);
        // Tasks alternate in generation order.
        assert_eq!(corpus.index.episodes[0].task, TaskKind::PackingSeq);
        assert_eq!(corpus.index.episodes[1].task, TaskKind::PackingGrp);
    }

    #[test]
    fn pinned_task_overrides_alternation() {
        let (cat, splits, cfg) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let counts = [(SplitTag::Train, 3)];
        let index = generate_corpus(
            dir.path(),
            &cat,
            &splits,
            &cfg,
            &counts,
            Some(TaskKind::PackingGrp),
            7,
            1,
        )
        .unwrap();
        assert!(index.episodes.iter().all(|e| e.task == TaskKind::PackingGrp));
        let corpus = load_corpus(dir.path()).unwrap();
        assert!(corpus.episodes.iter().all(|e| e.meta.task == TaskKind::PackingGrp));
    }

    #[test]
    fn corpus_regeneration_is_byte_identical_across_workers() {
        let (cat, splits, cfg) = fixtures();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let counts = [(SplitTag::Train, 5), (SplitTag::Seen, 2)];
        generate_corpus(a.path(), &cat, &splits, &cfg, &counts, None, 31, 1).unwrap();
        generate_corpus(b.path(), &cat, &splits, &cfg, &counts, None, 31, 3).unwrap();
        assert!(dirs_identical(a.path(), b.path()).unwrap());
        let c = tempfile::tempdir().unwrap();
        generate_corpus(c.path(), &cat, &splits, &cfg, &counts, None, 32, 1).unwrap();
        assert!(!dirs_identical(a.path(), c.path()).unwrap());
    }

    #[test]
    fn load_rejects_tampered_corpus() {
        let (cat, splits, cfg) = fixtures();
        let dir = tempfile::tempdir().unwrap();
        let counts = [(SplitTag::Train, 2)];
        let index = generate_corpus(dir.path(), &cat, &splits, &cfg, &counts, None, 3, 1).unwrap();
        let id = &index.episodes[0].id;
        let png = dir.path().join(id).join("start.png");
        std::fs::write(&png, b"not a png").unwrap();
        assert!(load_corpus(dir.path()).is_err());
        std::fs::remove_file(&png).unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn batch_schedule_covers_each_epoch_once() {
        let mut sched = BatchSchedule::new(10, 4, 5).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        // 5 steps x 4 = 20 samples = exactly 2 epochs.
        for step in 0..5 {
            seen.extend(sched.indices(step));
        }
        let epoch1: Vec<usize> = seen[..10].to_vec();
        let epoch2: Vec<usize> = seen[10..].to_vec();
        let mut s1 = epoch1.clone();
        s1.sort();
        let mut s2 = epoch2.clone();
        s2.sort();
        assert_eq!(s1, (0..10).collect::<Vec<_>>());
        assert_eq!(s2, (0..10).collect::<Vec<_>>());
        assert_ne!(epoch1, epoch2, "epochs should reshuffle");

        let mut again = BatchSchedule::new(10, 4, 5).unwrap();
        let mut replay: Vec<usize> = Vec::new();
        for step in 0..5 {
            replay.extend(again.indices(step));
        }
        assert_eq!(seen, replay);
    }

    #[test]
    fn batch_schedule_rejects_empty() {
        assert!(BatchSchedule::new(0, 4, 1).is_err());
        assert!(BatchSchedule::new(4, 0, 1).is_err());
    }
}
