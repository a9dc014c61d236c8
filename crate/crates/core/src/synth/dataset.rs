//! Windowing, map-based splits, normalization and the on-disk dataset
//! layout.
//!
//! Windows are stored raw (float32-representable) and normalized on the
//! way into a model with per-dimension statistics of the training split.

use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::episode::{generate_episode, BehaviourMode, Episode, EpisodeConfig};
use super::geometry::WorldMap;
use super::labels::{label_window, Manoeuvre, WindowLabel};
use crate::blob;
use crate::error::{ensure, Error, Result};

pub const DATASET_FORMAT: &str = "discvae-dataset/1";

/// Per-dimension mean and standard deviation of each modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub command_mean: Vec<f64>,
    pub command_std: Vec<f64>,
    pub range_mean: Vec<f64>,
    pub range_std: Vec<f64>,
}

impl NormStats {
    pub fn identity(beams: usize) -> Self {
        NormStats {
            command_mean: vec![0.0; 2],
            command_std: vec![1.0; 2],
            range_mean: vec![0.0; beams],
            range_std: vec![1.0; beams],
        }
    }

    fn from_windows(commands: &Array3<f64>, ranges: &Array3<f64>) -> Self {
        let stat = |a: &Array3<f64>| {
            let d = a.dim().2;
            let flat = a.to_shape((a.len() / d, d)).expect("contiguous").to_owned();
            let mean = flat.mean_axis(Axis(0)).expect("non-empty");
            let std = flat.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-3));
            (mean.to_vec(), std.to_vec())
        };
        let (command_mean, command_std) = stat(commands);
        let (range_mean, range_std) = stat(ranges);
        NormStats {
            command_mean,
            command_std,
            range_mean,
            range_std,
        }
    }

    pub fn normalize_commands(&self, raw: &mut Array2<f64>) {
        normalize(raw, &self.command_mean, &self.command_std);
    }

    pub fn normalize_ranges(&self, raw: &mut Array2<f64>) {
        normalize(raw, &self.range_mean, &self.range_std);
    }

    /// Maps a normalized command row back to `(v, ω)`.
    pub fn denormalize_command(&self, row: &[f64]) -> (f64, f64) {
        (
            row[0] * self.command_std[0] + self.command_mean[0],
            row[1] * self.command_std[1] + self.command_mean[1],
        )
    }

    pub fn denormalize_ranges(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.range_std.iter().zip(&self.range_mean))
            .map(|(v, (s, m))| v * s + m)
            .collect()
    }
}

fn normalize(raw: &mut Array2<f64>, mean: &[f64], std: &[f64]) {
    for mut row in raw.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub episode: u32,
    pub map: u8,
    pub mode: BehaviourMode,
    pub start: u32,
    pub has_future: bool,
}

/// Per-timestep model input: one `n × d` matrix per tick and modality,
/// already normalized.
#[derive(Debug, Clone)]
pub struct Frames {
    pub commands: Vec<Array2<f64>>,
    pub ranges: Vec<Array2<f64>>,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.commands.first().map_or(0, |c| c.nrows())
    }

    pub fn beams(&self) -> usize {
        self.ranges.first().map_or(0, |r| r.ncols())
    }

    /// The first `t` ticks.
    pub fn prefix(&self, t: usize) -> Frames {
        Frames {
            commands: self.commands[..t].to_vec(),
            ranges: self.ranges[..t].to_vec(),
        }
    }

    pub fn reversed(&self) -> Frames {
        Frames {
            commands: self.commands.iter().rev().cloned().collect(),
            ranges: self.ranges.iter().rev().cloned().collect(),
        }
    }
}

/// A collection of labelled windows `x_{1..T} = (a_t, l_t)` plus, when
/// the episode ran long enough, the ticks that follow each window.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub t_len: usize,
    pub beams: usize,
    pub horizon: usize,
    /// Raw commands, `N × T × 2`.
    pub commands: Array3<f64>,
    /// Raw ranges, `N × T × B`.
    pub ranges: Array3<f64>,
    /// Raw continuation commands, `N × horizon × 2` (zero when absent).
    pub future_commands: Array3<f64>,
    pub future_ranges: Array3<f64>,
    pub labels: Vec<WindowLabel>,
    pub origins: Vec<WindowOrigin>,
    pub stats: NormStats,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.labels.iter().map(WindowLabel::class_id).collect()
    }

    pub fn modes(&self) -> Vec<usize> {
        self.origins.iter().map(|o| o.mode.index()).collect()
    }

    pub fn manoeuvres(&self) -> Vec<Manoeuvre> {
        self.labels.iter().map(|l| l.manoeuvre).collect()
    }

    /// Indices of windows with a recorded continuation.
    pub fn with_future(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.origins[i].has_future).collect()
    }

    fn gather(&self, cmd: &Array3<f64>, rng_: &Array3<f64>, indices: &[usize], ticks: usize) -> Frames {
        let mut commands = Vec::with_capacity(ticks);
        let mut ranges = Vec::with_capacity(ticks);
        for t in 0..ticks {
            let mut c = Array2::zeros((indices.len(), 2));
            let mut r = Array2::zeros((indices.len(), self.beams));
            for (row, &i) in indices.iter().enumerate() {
                c.row_mut(row).assign(&cmd.slice(s![i, t, ..]));
                r.row_mut(row).assign(&rng_.slice(s![i, t, ..]));
            }
            self.stats.normalize_commands(&mut c);
            self.stats.normalize_ranges(&mut r);
            commands.push(c);
            ranges.push(r);
        }
        Frames { commands, ranges }
    }

    /// Normalized frames of the selected windows.
    pub fn frames(&self, indices: &[usize]) -> Frames {
        self.gather(&self.commands, &self.ranges, indices, self.t_len)
    }

    /// Normalized continuation frames of the selected windows.
    pub fn future_frames(&self, indices: &[usize]) -> Frames {
        self.gather(&self.future_commands, &self.future_ranges, indices, self.horizon)
    }

    pub fn all_frames(&self) -> Frames {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.frames(&idx)
    }

    pub fn select(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch {
            t_len: self.t_len,
            beams: self.beams,
            horizon: self.horizon,
            commands: self.commands.select(Axis(0), indices),
            ranges: self.ranges.select(Axis(0), indices),
            future_commands: self.future_commands.select(Axis(0), indices),
            future_ranges: self.future_ranges.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            origins: indices.iter().map(|&i| self.origins[i]).collect(),
            stats: self.stats.clone(),
        }
    }

    /// Consecutive index chunks of at most `size` windows.
    pub fn chunks(&self, size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub beams: usize,
    pub t_len: usize,
    pub stride: usize,
    pub horizon: usize,
    pub episode_ticks: usize,
    pub max_range: f64,
    /// Episodes generated in maps 1, 2 and 3.
    pub episodes_per_map: [usize; 3],
    /// Every n-th episode of maps 1–2 goes to validation.
    pub validation_every: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            beams: super::geometry::DEFAULT_BEAMS,
            t_len: 20,
            stride: 5,
            horizon: 10,
            episode_ticks: 40,
            max_range: super::geometry::SENSOR_MAX_RANGE,
            episodes_per_map: [375, 375, 150],
            validation_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: SequenceBatch,
    pub validation: SequenceBatch,
    pub test: SequenceBatch,
}

impl Dataset {
    pub fn stats(&self) -> &NormStats {
        &self.train.stats
    }
}

/// Number of windows an episode of `len` ticks yields.
pub fn windows_per_episode(len: usize, t_len: usize, stride: usize) -> usize {
    if len < t_len {
        0
    } else {
        (len - t_len) / stride + 1
    }
}

/// Mode weights per map: map 3 favours reversing out of tight spaces.
fn mode_weights(map_id: u8) -> [f64; 6] {
    match map_id {
        3 => [2.0, 1.0, 1.0, 3.0, 1.5, 1.5],
        _ => [1.0; 6],
    }
}

fn pick_mode<R: Rng + ?Sized>(map_id: u8, rng: &mut R) -> BehaviourMode {
    let w = mode_weights(map_id);
    let total: f64 = w.iter().sum();
    let mut u = rng.random_range(0.0..total);
    for (i, wi) in w.iter().enumerate() {
        if u < *wi {
            return BehaviourMode::ALL[i];
        }
        u -= wi;
    }
    BehaviourMode::ALL[5]
}

/// Simulates all episodes of the configuration. Each episode draws from
/// its own random stream so episodes are independent of one another.
pub fn generate_episodes(cfg: &DatasetConfig) -> Result<Vec<Episode>> {
    let ep_cfg = EpisodeConfig {
        ticks: cfg.episode_ticks,
        beams: cfg.beams,
        max_range: cfg.max_range,
    };
    let mut episodes = Vec::new();
    let mut id: u32 = 0;
    for (m, &count) in cfg.episodes_per_map.iter().enumerate() {
        let map = WorldMap::by_id(m as u8 + 1)?;
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(id as u64);
            let mode = pick_mode(map.id, &mut rng);
            let mut attempt = generate_episode(id, &map, mode, &ep_cfg, &mut rng);
            for _ in 0..4 {
                if attempt.is_ok() {
                    break;
                }
                attempt = generate_episode(id, &map, mode, &ep_cfg, &mut rng);
            }
            episodes.push(attempt?);
            id += 1;
        }
    }
    Ok(episodes)
}

struct RawWindows {
    commands: Vec<f64>,
    ranges: Vec<f64>,
    future_commands: Vec<f64>,
    future_ranges: Vec<f64>,
    labels: Vec<WindowLabel>,
    origins: Vec<WindowOrigin>,
}

impl RawWindows {
    fn new() -> Self {
        RawWindows {
            commands: vec![],
            ranges: vec![],
            future_commands: vec![],
            future_ranges: vec![],
            labels: vec![],
            origins: vec![],
        }
    }

    fn push_episode(&mut self, ep: &Episode, t_len: usize, stride: usize, horizon: usize, beams: usize) {
        let q = |v: f64| v as f32 as f64;
        let n = windows_per_episode(ep.len(), t_len, stride);
        for w in 0..n {
            let start = w * stride;
            let end = start + t_len;
            for t in start..end {
                self.commands.extend([q(ep.commands[t].0), q(ep.commands[t].1)]);
                self.ranges.extend(ep.ranges[t].iter().map(|&r| q(r)));
            }
            let has_future = end + horizon <= ep.len();
            for t in end..end + horizon {
                if has_future {
                    self.future_commands.extend([q(ep.commands[t].0), q(ep.commands[t].1)]);
                    self.future_ranges.extend(ep.ranges[t].iter().map(|&r| q(r)));
                } else {
                    self.future_commands.extend([0.0, 0.0]);
                    self.future_ranges.extend(std::iter::repeat_n(0.0, beams));
                }
            }
            let cmds: Vec<(f64, f64)> = ep.commands[start..end].iter().map(|&(v, w)| (q(v), q(w))).collect();
            let scans: Vec<Vec<f64>> = ep.ranges[start..end]
                .iter()
                .map(|s| s.iter().map(|&r| q(r)).collect())
                .collect();
            self.labels.push(label_window(&cmds, &scans));
            self.origins.push(WindowOrigin {
                episode: ep.id,
                map: ep.map_id,
                mode: ep.mode,
                start: start as u32,
                has_future,
            });
        }
    }

    fn into_batch(self, t_len: usize, beams: usize, horizon: usize) -> SequenceBatch {
        let n = self.labels.len();
        SequenceBatch {
            t_len,
            beams,
            horizon,
            commands: Array3::from_shape_vec((n, t_len, 2), self.commands).expect("window shape"),
            ranges: Array3::from_shape_vec((n, t_len, beams), self.ranges).expect("window shape"),
            future_commands: Array3::from_shape_vec((n, horizon, 2), self.future_commands).expect("future shape"),
            future_ranges: Array3::from_shape_vec((n, horizon, beams), self.future_ranges).expect("future shape"),
            labels: self.labels,
            origins: self.origins,
            stats: NormStats::identity(beams),
        }
    }
}

/// Cuts episodes into windows. Map 3 goes to test; maps 1–2 are split by
/// episode into train and validation. Statistics come from train only.
pub fn window_dataset(episodes: &[Episode], cfg: &DatasetConfig) -> Result<Dataset> {
    ensure!(cfg.stride >= 1, "stride must be at least 1");
    ensure!(cfg.t_len >= 1, "window length must be at least 1");
    ensure!(cfg.validation_every >= 2, "validation_every must be at least 2");
    let (mut train, mut val, mut test) = (RawWindows::new(), RawWindows::new(), RawWindows::new());
    let mut seen = 0usize;
    for ep in episodes {
        ensure!(
            ep.ranges.iter().all(|r| r.len() == cfg.beams),
            "episode {} has scans of the wrong width",
            ep.id
        );
        let target = if ep.map_id == 3 {
            &mut test
        } else {
            seen += 1;
            if seen % cfg.validation_every == 0 {
                &mut val
            } else {
                &mut train
            }
        };
        target.push_episode(ep, cfg.t_len, cfg.stride, cfg.horizon, cfg.beams);
    }
    let mut train = train.into_batch(cfg.t_len, cfg.beams, cfg.horizon);
    let mut validation = val.into_batch(cfg.t_len, cfg.beams, cfg.horizon);
    let mut test = test.into_batch(cfg.t_len, cfg.beams, cfg.horizon);
    ensure!(!train.is_empty(), "no training windows");
    let stats = NormStats::from_windows(&train.commands, &train.ranges);
    train.stats = stats.clone();
    validation.stats = stats.clone();
    test.stats = stats;
    Ok(Dataset {
        config: cfg.clone(),
        train,
        validation,
        test,
    })
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    let episodes = generate_episodes(cfg)?;
    window_dataset(&episodes, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SplitManifest {
    windows: usize,
    maps: Vec<u8>,
    commands: [usize; 3],
    ranges: [usize; 3],
    future_commands: [usize; 3],
    future_ranges: [usize; 3],
    labels: [usize; 2],
    origin: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub generator_seed: u64,
    pub t_len: usize,
    pub beams: usize,
    pub horizon: usize,
    pub config: DatasetConfig,
    pub stats: NormStats,
    splits: std::collections::BTreeMap<String, SplitManifest>,
}

pub const SPLITS: [&str; 3] = ["train", "validation", "test"];

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&SequenceBatch> {
        match name {
            "train" => Some(&self.train),
            "validation" => Some(&self.validation),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    /// Writes `manifest.json` plus one directory of blobs per split.
    pub fn save(&self, dir: &Path) -> Result<()> {
        blob::create_dir(dir)?;
        let mut splits = std::collections::BTreeMap::new();
        for name in SPLITS {
            let b = self.split(name).expect("known split");
            let sd = dir.join(name);
            blob::create_dir(&sd)?;
            let n = b.len();
            blob::write_f32(&sd.join("commands.f32"), b.commands.iter().copied())?;
            blob::write_f32(&sd.join("ranges.f32"), b.ranges.iter().copied())?;
            blob::write_f32(&sd.join("future_commands.f32"), b.future_commands.iter().copied())?;
            blob::write_f32(&sd.join("future_ranges.f32"), b.future_ranges.iter().copied())?;
            blob::write_i32(
                &sd.join("labels.i32"),
                b.labels
                    .iter()
                    .flat_map(|l| [l.class_id() as i32, l.manoeuvre.index() as i32, l.narrow as i32]),
            )?;
            blob::write_i32(
                &sd.join("origin.i32"),
                b.origins.iter().flat_map(|o| {
                    [
                        o.episode as i32,
                        o.map as i32,
                        o.mode.index() as i32,
                        o.start as i32,
                        o.has_future as i32,
                    ]
                }),
            )?;
            let mut maps: Vec<u8> = b.origins.iter().map(|o| o.map).collect();
            maps.sort_unstable();
            maps.dedup();
            splits.insert(
                name.to_string(),
                SplitManifest {
                    windows: n,
                    maps,
                    commands: [n, b.t_len, 2],
                    ranges: [n, b.t_len, b.beams],
                    future_commands: [n, b.horizon, 2],
                    future_ranges: [n, b.horizon, b.beams],
                    labels: [n, 3],
                    origin: [n, 5],
                },
            );
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            generator_seed: self.config.seed,
            t_len: self.config.t_len,
            beams: self.config.beams,
            horizon: self.config.horizon,
            config: self.config.clone(),
            stats: self.train.stats.clone(),
            splits,
        };
        blob::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = blob::read_json(&dir.join("manifest.json"))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::format("dataset manifest", format!("unknown format {}", manifest.format)));
        }
        let (t, b, h) = (manifest.t_len, manifest.beams, manifest.horizon);
        let mut out = Vec::new();
        for name in SPLITS {
            let sm = manifest
                .splits
                .get(name)
                .ok_or_else(|| Error::format("dataset manifest", format!("missing split {name}")))?;
            let sd = dir.join(name);
            let n = sm.windows;
            let arr = |file: &str, ticks: usize, d: usize| -> Result<Array3<f64>> {
                let v = blob::read_f32(&sd.join(file), n * ticks * d)?;
                Array3::from_shape_vec((n, ticks, d), v).map_err(|e| Error::format(file, e))
            };
            let labels_raw = blob::read_i32(&sd.join("labels.i32"), n * 3)?;
            let origin_raw = blob::read_i32(&sd.join("origin.i32"), n * 5)?;
            let labels = labels_raw
                .chunks_exact(3)
                .map(|c| {
                    WindowLabel::from_class_id(c[0] as usize)
                        .ok_or_else(|| Error::format("labels.i32", format!("bad class {}", c[0])))
                })
                .collect::<Result<Vec<_>>>()?;
            let origins = origin_raw
                .chunks_exact(5)
                .map(|c| {
                    Ok(WindowOrigin {
                        episode: c[0] as u32,
                        map: c[1] as u8,
                        mode: BehaviourMode::from_index(c[2] as usize)
                            .ok_or_else(|| Error::format("origin.i32", format!("bad mode {}", c[2])))?,
                        start: c[3] as u32,
                        has_future: c[4] != 0,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(SequenceBatch {
                t_len: t,
                beams: b,
                horizon: h,
                commands: arr("commands.f32", t, 2)?,
                ranges: arr("ranges.f32", t, b)?,
                future_commands: arr("future_commands.f32", h, 2)?,
                future_ranges: arr("future_ranges.f32", h, b)?,
                labels,
                origins,
                stats: manifest.stats.clone(),
            });
        }
        let test = out.pop().expect("three splits");
        let validation = out.pop().expect("three splits");
        let train = out.pop().expect("three splits");
        Ok(Dataset {
            config: manifest.config,
            train,
            validation,
            test,
        })
    }
}
