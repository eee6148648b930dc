//! Episode logs and their serialization: a length-prefixed binary frame
//! format for lossless storage, plus a lossy CSV export of per-step scalars
//! for plotting.
//!
//! Binary layout (all integers little-endian, floats IEEE-754 bits):
//!
//! ```text
//! magic            8 bytes  "DVDREPR1"
//! config_hash     32 bytes
//! world_name       u32 length + utf-8 bytes
//! seed             u64
//! dt               f64
//! termination      u8      (0 complete, 1 timeout, 2 deviation, 3 blocked)
//! completion       f64
//! distance_km      f64
//! duration         f64
//! step_count       u64
//! steps            step_count frames, each u32 length-prefixed:
//!   time f64 · ego (x y yaw v) 4×f64 · speed f64 · command u8 ·
//!   goal 2×f64 · expert action 3×f64 · expert waypoint deltas u32 + 2T×f64 ·
//!   expert target speed f64 · expert value f64 · policy action 3×f64 ·
//!   obs flag u8 [· channels u32 · size u32 · C·S·S×f64]
//! infraction_count u32
//! infractions      kind u8 · time f64 · position 2×f64
//! ```

use std::io::{Read, Write};
use std::path::Path;


use super::infractions::{InfractionEvent, InfractionKind};
use super::{EgoState, Termination};
use crate::error::{Error, Result};
use crate::model::{Measurements, NavCommand, Observation};
use crate::types::{ControlAction, Trajectory};

const RECORD_MAGIC: &[u8; 8] = b"DVDREPR1";

/// One simulation step of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub ego: EgoState,
    pub meas: Measurements,
    pub expert_action: ControlAction,
    pub expert_trajectory: Trajectory,
    pub expert_target_speed: f64,
    pub expert_value: f64,
    pub policy_action: ControlAction,
    /// Present only when the episode was recorded with observations.
    pub observation: Option<Observation>,
}

/// Complete log of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub world_name: String,
    pub seed: u64,
    pub dt: f64,
    pub termination: Termination,
    /// Route completion fraction in [0, 1].
    pub completion: f64,
    pub distance_km: f64,
    pub duration: f64,
    pub infractions: Vec<InfractionEvent>,
    pub steps: Vec<StepRecord>,
}

fn termination_code(t: Termination) -> u8 {
    match t {
        Termination::RouteComplete => 0,
        Termination::Timeout => 1,
        Termination::RouteDeviation => 2,
        Termination::Blocked => 3,
    }
}

fn termination_from(code: u8) -> Result<Termination> {
    Ok(match code {
        0 => Termination::RouteComplete,
        1 => Termination::Timeout,
        2 => Termination::RouteDeviation,
        3 => Termination::Blocked,
        _ => return Err(Error::Dataset(format!("bad termination code {code}"))),
    })
}

fn infraction_code(k: InfractionKind) -> u8 {
    InfractionKind::ALL.iter().position(|&x| x == k).expect("kind in table") as u8
}

fn infraction_from(code: u8) -> Result<InfractionKind> {
    InfractionKind::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| Error::Dataset(format!("bad infraction code {code}")))
}

struct FrameWriter {
    buf: Vec<u8>,
}

impl FrameWriter {
    fn new() -> Self {
        FrameWriter { buf: Vec::with_capacity(256) }
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn action(&mut self, a: &ControlAction) {
        self.f64(a.steer);
        self.f64(a.throttle);
        self.f64(a.brake);
    }
}

struct FrameReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> FrameReader<'a> {
    fn f64(&mut self) -> Result<f64> {
        let b: [u8; 8] = self
            .buf
            .get(self.pos..self.pos + 8)
            .ok_or_else(|| Error::Dataset("truncated frame".into()))?
            .try_into()
            .expect("slice length 8");
        self.pos += 8;
        Ok(f64::from_le_bytes(b))
    }

    fn u8(&mut self) -> Result<u8> {
        let v = *self
            .buf
            .get(self.pos)
            .ok_or_else(|| Error::Dataset("truncated frame".into()))?;
        self.pos += 1;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        let b: [u8; 4] = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| Error::Dataset("truncated frame".into()))?
            .try_into()
            .expect("slice length 4");
        self.pos += 4;
        Ok(u32::from_le_bytes(b))
    }

    fn action(&mut self) -> Result<ControlAction> {
        Ok(ControlAction { steer: self.f64()?, throttle: self.f64()?, brake: self.f64()? })
    }
}

impl EpisodeRecord {
    pub fn write<W: Write>(&self, mut out: W, config_hash: &[u8; 32]) -> Result<()> {
        out.write_all(RECORD_MAGIC)?;
        out.write_all(config_hash)?;
        let name = self.world_name.as_bytes();
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name)?;
        out.write_all(&self.seed.to_le_bytes())?;
        out.write_all(&self.dt.to_le_bytes())?;
        out.write_all(&[termination_code(self.termination)])?;
        out.write_all(&self.completion.to_le_bytes())?;
        out.write_all(&self.distance_km.to_le_bytes())?;
        out.write_all(&self.duration.to_le_bytes())?;
        out.write_all(&(self.steps.len() as u64).to_le_bytes())?;
        for step in &self.steps {
            let mut frame = FrameWriter::new();
            frame.f64(step.time);
            frame.f64(step.ego.x);
            frame.f64(step.ego.y);
            frame.f64(step.ego.yaw);
            frame.f64(step.ego.v);
            frame.f64(step.meas.speed);
            frame.u8(step.meas.command as u8);
            frame.f64(step.meas.goal[0]);
            frame.f64(step.meas.goal[1]);
            frame.action(&step.expert_action);
            let deltas = step.expert_trajectory.deltas();
            frame.u32(deltas.len() as u32);
            for d in deltas {
                frame.f64(d[0]);
                frame.f64(d[1]);
            }
            frame.f64(step.expert_target_speed);
            frame.f64(step.expert_value);
            frame.action(&step.policy_action);
            match &step.observation {
                Some(obs) => {
                    frame.u8(1);
                    frame.u32(obs.channels() as u32);
                    frame.u32(obs.size() as u32);
                    for &v in obs.data() {
                        frame.f64(v);
                    }
                }
                None => frame.u8(0),
            }
            out.write_all(&(frame.buf.len() as u32).to_le_bytes())?;
            out.write_all(&frame.buf)?;
        }
        out.write_all(&(self.infractions.len() as u32).to_le_bytes())?;
        for e in &self.infractions {
            out.write_all(&[infraction_code(e.kind)])?;
            out.write_all(&e.time.to_le_bytes())?;
            out.write_all(&e.position[0].to_le_bytes())?;
            out.write_all(&e.position[1].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<(EpisodeRecord, [u8; 32])> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != RECORD_MAGIC {
            return Err(Error::Dataset("bad magic, not an episode record".into()));
        }
        let mut hash = [0u8; 32];
        input.read_exact(&mut hash)?;
        let name_len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let world_name = String::from_utf8(name)
            .map_err(|_| Error::Dataset("non-utf8 world name".into()))?;
        let seed = read_u64(&mut input)?;
        let dt = read_f64(&mut input)?;
        let mut code = [0u8; 1];
        input.read_exact(&mut code)?;
        let termination = termination_from(code[0])?;
        let completion = read_f64(&mut input)?;
        let distance_km = read_f64(&mut input)?;
        let duration = read_f64(&mut input)?;
        let step_count = read_u64(&mut input)? as usize;
        let mut steps = Vec::with_capacity(step_count);
        for _ in 0..step_count {
            let frame_len = read_u32(&mut input)? as usize;
            let mut buf = vec![0u8; frame_len];
            input.read_exact(&mut buf)?;
            let mut r = FrameReader { buf: &buf, pos: 0 };
            let time = r.f64()?;
            let ego = EgoState { x: r.f64()?, y: r.f64()?, yaw: r.f64()?, v: r.f64()? };
            let speed = r.f64()?;
            let command = NavCommand::from_index(r.u8()?)?;
            let goal = [r.f64()?, r.f64()?];
            let expert_action = r.action()?;
            let n_deltas = r.u32()? as usize;
            let mut deltas = Vec::with_capacity(n_deltas);
            for _ in 0..n_deltas {
                deltas.push([r.f64()?, r.f64()?]);
            }
            let expert_target_speed = r.f64()?;
            let expert_value = r.f64()?;
            let policy_action = r.action()?;
            let observation = if r.u8()? == 1 {
                let channels = r.u32()? as usize;
                let size = r.u32()? as usize;
                let mut data = Vec::with_capacity(channels * size * size);
                for _ in 0..channels * size * size {
                    data.push(r.f64()?);
                }
                Some(Observation::new(channels, size, data)?)
            } else {
                None
            };
            steps.push(StepRecord {
                time,
                ego,
                meas: Measurements { speed, command, goal },
                expert_action,
                expert_trajectory: Trajectory::from_deltas(deltas),
                expert_target_speed,
                expert_value,
                policy_action,
                observation,
            });
        }
        let n_inf = read_u32(&mut input)? as usize;
        let mut infractions = Vec::with_capacity(n_inf);
        for _ in 0..n_inf {
            let mut kind = [0u8; 1];
            input.read_exact(&mut kind)?;
            infractions.push(InfractionEvent {
                kind: infraction_from(kind[0])?,
                time: read_f64(&mut input)?,
                position: [read_f64(&mut input)?, read_f64(&mut input)?],
            });
        }
        Ok((
            EpisodeRecord {
                world_name,
                seed,
                dt,
                termination,
                completion,
                distance_km,
                duration,
                infractions,
                steps,
            },
            hash,
        ))
    }

    pub fn write_file(&self, path: &Path, config_hash: &[u8; 32]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write(&mut buf, config_hash)?;
        buf.flush()?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<(EpisodeRecord, [u8; 32])> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    /// Lossy per-step scalar export for plotting.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "time,x,y,yaw,v,steer,throttle,brake,expert_steer,expert_throttle,expert_brake,command,expert_target_speed,expert_value"
        )?;
        for s in &self.steps {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                s.time,
                s.ego.x,
                s.ego.y,
                s.ego.yaw,
                s.ego.v,
                s.policy_action.steer,
                s.policy_action.throttle,
                s.policy_action.brake,
                s.expert_action.steer,
                s.expert_action.throttle,
                s.expert_action.brake,
                s.meas.command as u8,
                s.expert_target_speed,
                s.expert_value
            )?;
        }
        Ok(())
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

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record(with_obs: bool) -> EpisodeRecord {
        let obs = if with_obs {
            let mut o = Observation::zeros(2, 4);
            o.set(1, 2, 3, 0.5);
            Some(o)
        } else {
            None
        };
        EpisodeRecord {
            world_name: "sample".into(),
            seed: 42,
            dt: 0.05,
            termination: Termination::Timeout,
            completion: 0.75,
            distance_km: 0.0421,
            duration: 40.0,
            infractions: vec![InfractionEvent {
                kind: InfractionKind::RedLight,
                time: 3.2,
                position: [30.0, 0.1],
            }],
            steps: vec![StepRecord {
                time: 0.0,
                ego: EgoState { x: 1.0, y: -0.5, yaw: 0.1, v: 2.0 },
                meas: Measurements {
                    speed: 2.0,
                    command: NavCommand::Left,
                    goal: [9.0, 1.5],
                },
                expert_action: ControlAction::clamped(0.1, 0.4, 0.0),
                expert_trajectory: Trajectory::from_deltas(vec![[1.0, 0.1]; 4]),
                expert_target_speed: 4.5,
                expert_value: 0.8,
                policy_action: ControlAction::clamped(-0.2, 0.0, 0.3),
                observation: obs,
            }],
        }
    }

    #[test]
    fn binary_roundtrip_is_lossless() {
        for with_obs in [false, true] {
            let rec = sample_record(with_obs);
            let hash = [9u8; 32];
            let mut buf = Vec::new();
            rec.write(&mut buf, &hash).unwrap();
            let (back, h) = EpisodeRecord::read(&buf[..]).unwrap();
            assert_eq!(h, hash);
            assert_eq!(rec, back);
        }
    }

    #[test]
    fn rejects_corrupt_magic() {
        let rec = sample_record(false);
        let mut buf = Vec::new();
        rec.write(&mut buf, &[0u8; 32]).unwrap();
        buf[3] ^= 0xFF;
        assert!(EpisodeRecord::read(&buf[..]).is_err());
    }

    #[test]
    fn csv_export_has_documented_header() {
        let rec = sample_record(false);
        let mut buf = Vec::new();
        rec.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "time,x,y,yaw,v,steer,throttle,brake,expert_steer,expert_throttle,expert_brake,command,expert_target_speed,expert_value"
        );
        assert_eq!(lines.count(), 1);
    }
}
