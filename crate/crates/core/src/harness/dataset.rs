//! Behavior-cloning dataset: expert demonstration frames collected over the
//! configured routes and seeds, in a versioned binary container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic            8 bytes  "DVDRDST1"
//! config_hash     32 bytes
//! schema_version   u32 (= 1)
//! obs_channels     u32 · obs_size u32 · horizon u32 ·
//! waypoint_interval u32 · collect_stride u32
//! episode_count    u32
//! episodes         route name (u32+utf8) · seed u64 ·
//!                  frame offset u64 · frame count u64
//! frame_count      u64
//! frames           u32 length-prefixed:
//!   episode u32 · sim step u32 · obs u8×(C·S·S) · speed f64 · command u8 ·
//!   goal 2×f64 · expert action 3×f64 · waypoint deltas 2T×f64 ·
//!   expert target speed f64 · expert value f64
//! ```
//!
//! Observation channels are occupancy rasters with values exactly 0 or 1,
//! stored as one byte per cell (`v·255` rounded); decoding divides by 255,
//! which reproduces the rendered values exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::RunConfig;
use crate::error::{Error, Result};
use crate::model::{Measurements, NavCommand, Observation};
use crate::sim::{run_episode, score, EpisodeOptions, EpisodeRecord, ExpertPolicy};
use crate::types::{ControlAction, Trajectory};

const DATASET_MAGIC: &[u8; 8] = b"DVDRDST1";
const SCHEMA_VERSION: u32 = 1;

/// One stored demonstration frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub episode: u32,
    /// Sim step index within the episode (multiples of `collect_stride`).
    pub step: u32,
    pub observation: Observation,
    pub meas: Measurements,
    pub expert_action: ControlAction,
    pub expert_trajectory: Trajectory,
    pub expert_target_speed: f64,
    pub expert_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeEntry {
    pub route: String,
    pub seed: u64,
    pub frame_offset: u64,
    pub frame_count: u64,
}

/// Demonstration dataset with its provenance header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config_hash: [u8; 32],
    pub obs_channels: u32,
    pub obs_size: u32,
    pub horizon: u32,
    pub waypoint_interval: u32,
    pub collect_stride: u32,
    pub episodes: Vec<EpisodeEntry>,
    pub frames: Vec<Frame>,
}

/// Result of a collection run.
pub struct CollectOutcome {
    pub dataset: Dataset,
    pub expert_ds_mean: f64,
    pub expert_below_floor: bool,
    pub episode_records: Vec<EpisodeRecord>,
}

/// Roll the expert over every configured route and seed, subsampling steps
/// into dataset frames.
pub fn collect(config: &RunConfig) -> Result<CollectOutcome> {
    let worlds = config.load_routes()?;
    let mut frames: Vec<Frame> = Vec::new();
    let mut episodes = Vec::new();
    let mut records = Vec::new();
    for world in &worlds {
        for seed_idx in 0..config.collect_seeds {
            let seed = config.seed ^ (seed_idx.wrapping_mul(0x9E37_79B9));
            let mut policy = ExpertPolicy::new(config.waypoint_interval, config.model.obs_size);
            let opts = EpisodeOptions {
                record_observations: true,
                waypoint_interval: config.waypoint_interval,
            };
            let record = run_episode(world, seed, &mut policy, &opts, None)?;
            let offset = frames.len() as u64;
            for (k, step_rec) in record.steps.iter().enumerate() {
                if k % config.collect_stride != 0 {
                    continue;
                }
                let obs = step_rec
                    .observation
                    .clone()
                    .ok_or_else(|| Error::Dataset("collection lost an observation".into()))?;
                frames.push(Frame {
                    episode: episodes.len() as u32,
                    step: k as u32,
                    observation: obs,
                    meas: step_rec.meas,
                    expert_action: step_rec.expert_action,
                    expert_trajectory: step_rec.expert_trajectory.clone(),
                    expert_target_speed: step_rec.expert_target_speed,
                    expert_value: step_rec.expert_value,
                });
            }
            episodes.push(EpisodeEntry {
                route: world.name.clone(),
                seed,
                frame_offset: offset,
                frame_count: frames.len() as u64 - offset,
            });
            // evaluation records do not need the bulky observations
            let mut slim = record;
            for s in &mut slim.steps {
                s.observation = None;
            }
            records.push(slim);
        }
    }
    let bench = score(&records, &config.penalties)?;
    Ok(CollectOutcome {
        dataset: Dataset {
            config_hash: config.hash(),
            obs_channels: config.model.obs_channels as u32,
            obs_size: config.model.obs_size as u32,
            horizon: config.model.horizon as u32,
            waypoint_interval: config.waypoint_interval as u32,
            collect_stride: config.collect_stride as u32,
            episodes,
            frames,
        },
        expert_ds_mean: bench.ds_mean,
        expert_below_floor: bench.ds_mean < config.expert_ds_floor,
        episode_records: records,
    })
}

impl Dataset {
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(DATASET_MAGIC)?;
        out.write_all(&self.config_hash)?;
        for v in [
            SCHEMA_VERSION,
            self.obs_channels,
            self.obs_size,
            self.horizon,
            self.waypoint_interval,
            self.collect_stride,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&(self.episodes.len() as u32).to_le_bytes())?;
        for ep in &self.episodes {
            let name = ep.route.as_bytes();
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&ep.seed.to_le_bytes())?;
            out.write_all(&ep.frame_offset.to_le_bytes())?;
            out.write_all(&ep.frame_count.to_le_bytes())?;
        }
        out.write_all(&(self.frames.len() as u64).to_le_bytes())?;
        for frame in &self.frames {
            let mut buf: Vec<u8> = Vec::with_capacity(
                16 + self.obs_channels as usize * (self.obs_size as usize).pow(2),
            );
            buf.extend_from_slice(&frame.episode.to_le_bytes());
            buf.extend_from_slice(&frame.step.to_le_bytes());
            for &v in frame.observation.data() {
                buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            buf.extend_from_slice(&frame.meas.speed.to_le_bytes());
            buf.push(frame.meas.command as u8);
            buf.extend_from_slice(&frame.meas.goal[0].to_le_bytes());
            buf.extend_from_slice(&frame.meas.goal[1].to_le_bytes());
            for v in [
                frame.expert_action.steer,
                frame.expert_action.throttle,
                frame.expert_action.brake,
            ] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let deltas = frame.expert_trajectory.deltas();
            if deltas.len() != self.horizon as usize {
                return Err(Error::Dataset(format!(
                    "frame trajectory horizon {} does not match header {}",
                    deltas.len(),
                    self.horizon
                )));
            }
            for d in deltas {
                buf.extend_from_slice(&d[0].to_le_bytes());
                buf.extend_from_slice(&d[1].to_le_bytes());
            }
            buf.extend_from_slice(&frame.expert_target_speed.to_le_bytes());
            buf.extend_from_slice(&frame.expert_value.to_le_bytes());
            out.write_all(&(buf.len() as u32).to_le_bytes())?;
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Dataset> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Dataset("bad magic, not a dataset".into()));
        }
        let mut config_hash = [0u8; 32];
        input.read_exact(&mut config_hash)?;
        let version = read_u32(&mut input)?;
        if version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported dataset schema {version} (expected {SCHEMA_VERSION})"
            )));
        }
        let obs_channels = read_u32(&mut input)?;
        let obs_size = read_u32(&mut input)?;
        let horizon = read_u32(&mut input)?;
        let waypoint_interval = read_u32(&mut input)?;
        let collect_stride = read_u32(&mut input)?;
        let n_episodes = read_u32(&mut input)? as usize;
        let mut episodes = Vec::with_capacity(n_episodes);
        for _ in 0..n_episodes {
            let name_len = read_u32(&mut input)? as usize;
            let mut name = vec![0u8; name_len];
            input.read_exact(&mut name)?;
            episodes.push(EpisodeEntry {
                route: String::from_utf8(name)
                    .map_err(|_| Error::Dataset("non-utf8 route name".into()))?,
                seed: read_u64(&mut input)?,
                frame_offset: read_u64(&mut input)?,
                frame_count: read_u64(&mut input)?,
            });
        }
        let frame_count = read_u64(&mut input)? as usize;
        let obs_len = (obs_channels * obs_size * obs_size) as usize;
        let mut frames = Vec::with_capacity(frame_count);
        for _ in 0..frame_count {
            let len = read_u32(&mut input)? as usize;
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            let mut pos = 0usize;
            let take_u32 = |buf: &[u8], pos: &mut usize| -> Result<u32> {
                let b: [u8; 4] = buf
                    .get(*pos..*pos + 4)
                    .ok_or_else(|| Error::Dataset("truncated frame".into()))?
                    .try_into()
                    .expect("len 4");
                *pos += 4;
                Ok(u32::from_le_bytes(b))
            };
            let take_f64 = |buf: &[u8], pos: &mut usize| -> Result<f64> {
                let b: [u8; 8] = buf
                    .get(*pos..*pos + 8)
                    .ok_or_else(|| Error::Dataset("truncated frame".into()))?
                    .try_into()
                    .expect("len 8");
                *pos += 8;
                Ok(f64::from_le_bytes(b))
            };
            let episode = take_u32(&buf, &mut pos)?;
            let step = take_u32(&buf, &mut pos)?;
            let raw = buf
                .get(pos..pos + obs_len)
                .ok_or_else(|| Error::Dataset("truncated observation".into()))?;
            pos += obs_len;
            let observation = Observation::new(
                obs_channels as usize,
                obs_size as usize,
                raw.iter().map(|&b| b as f64 / 255.0).collect(),
            )?;
            let speed = take_f64(&buf, &mut pos)?;
            let command = NavCommand::from_index(
                *buf.get(pos).ok_or_else(|| Error::Dataset("truncated frame".into()))?,
            )?;
            pos += 1;
            let goal = [take_f64(&buf, &mut pos)?, take_f64(&buf, &mut pos)?];
            let expert_action = ControlAction {
                steer: take_f64(&buf, &mut pos)?,
                throttle: take_f64(&buf, &mut pos)?,
                brake: take_f64(&buf, &mut pos)?,
            };
            let mut deltas = Vec::with_capacity(horizon as usize);
            for _ in 0..horizon {
                deltas.push([take_f64(&buf, &mut pos)?, take_f64(&buf, &mut pos)?]);
            }
            frames.push(Frame {
                episode,
                step,
                observation,
                meas: Measurements { speed, command, goal },
                expert_action,
                expert_trajectory: Trajectory::from_deltas(deltas),
                expert_target_speed: take_f64(&buf, &mut pos)?,
                expert_value: take_f64(&buf, &mut pos)?,
            });
        }
        Ok(Dataset {
            config_hash,
            obs_channels,
            obs_size,
            horizon,
            waypoint_interval,
            collect_stride,
            episodes,
            frames,
        })
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write(&mut buf)?;
        std::io::Write::flush(&mut buf)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Indices of frames with full future-label coverage: the trainable
    /// samples. A frame needs `horizon` future frames at waypoint-interval
    /// spacing within its own episode.
    pub fn trainable_indices(&self) -> Vec<usize> {
        let per_sample = self.waypoint_interval / self.collect_stride;
        let mut out = Vec::new();
        for ep in &self.episodes {
            let start = ep.frame_offset as usize;
            let end = start + ep.frame_count as usize;
            for i in start..end {
                let last = i + per_sample as usize * self.horizon as usize;
                if last < end {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Frame indices supplying the future action labels for sample `i`:
    /// steps t + k·waypoint_interval for k = 1..=horizon.
    pub fn future_label_indices(&self, i: usize) -> Vec<usize> {
        let per = (self.waypoint_interval / self.collect_stride) as usize;
        (1..=self.horizon as usize).map(|k| i + k * per).collect()
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_config() -> RunConfig {
        RunConfig {
            routes: vec!["builtin:straight_clear".into()],
            collect_seeds: 1,
            model: ModelConfig { obs_size: 16, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn collect_roundtrip_and_counts() {
        let cfg = tiny_config();
        let outcome = collect(&cfg).unwrap();
        let ds = &outcome.dataset;
        assert_eq!(ds.episodes.len(), 1);
        assert!(ds.frames.len() > 50, "got {} frames", ds.frames.len());
        assert_eq!(ds.frames.len() as u64, ds.episodes[0].frame_count);
        assert!(outcome.expert_ds_mean >= 95.0);
        assert!(!outcome.expert_below_floor);

        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = Dataset::read(&buf[..]).unwrap();
        assert_eq!(*ds, back, "lossless decode");
    }

    #[test]
    fn collection_is_deterministic() {
        let cfg = tiny_config();
        let a = collect(&cfg).unwrap();
        let b = collect(&cfg).unwrap();
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        a.dataset.write(&mut buf_a).unwrap();
        b.dataset.write(&mut buf_b).unwrap();
        assert_eq!(buf_a, buf_b, "byte-identical datasets");
    }

    #[test]
    fn trainable_indices_have_future_coverage() {
        let cfg = tiny_config();
        let ds = collect(&cfg).unwrap().dataset;
        let idx = ds.trainable_indices();
        assert!(!idx.is_empty());
        let per = (ds.waypoint_interval / ds.collect_stride) as usize;
        for &i in &idx {
            for (k, j) in ds.future_label_indices(i).into_iter().enumerate() {
                assert_eq!(ds.frames[j].episode, ds.frames[i].episode);
                assert_eq!(
                    ds.frames[j].step,
                    ds.frames[i].step + ((k + 1) * per * ds.collect_stride as usize) as u32
                );
            }
        }
        // frames near the episode end are excluded
        assert!(idx.len() < ds.frames.len());
    }

    #[test]
    fn frame_schema_arithmetic() {
        // 1 route × 1 seed, stride 5: frames = ceil(steps/5)
        let cfg = tiny_config();
        let outcome = collect(&cfg).unwrap();
        let steps = outcome.episode_records[0].steps.len();
        let expect = steps.div_ceil(5);
        assert_eq!(outcome.dataset.frames.len(), expect);
    }
}
