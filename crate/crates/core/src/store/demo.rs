//! `HSDM1` demonstration files.
//!
//! Body layout:
//!
//! ```text
//! u32-prefixed JSON {task, label}, u64 seed, f64 noise
//! u32 N, then per trajectory:
//!     u32-prefixed JSON task spec, u32 T, then per step:
//!         u32 task token, u32 n_obs, per obs token (u32 slot, u32 len, f32 features)
//!         u32 len, f32 state; u32 len, f32 action; u8 gripper_change
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ObsToken, TokenSequence};
use crate::simenv::{DemoSet, Step, TaskSpec, Trajectory};

use super::binary::{shape, Reader, Writer};

pub const DEMO_MAGIC: &[u8; 5] = b"HSDM1";

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskSpec,
    label: String,
}

fn json<T: Serialize>(x: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(x).map_err(|e| Error::Contract(format!("demo header: {e}")))
}

fn unjson<T: for<'de> Deserialize<'de>>(b: &[u8]) -> Result<T> {
    serde_json::from_slice(b).map_err(|e| shape(format!("demo header: {e}")))
}

fn floats(w: &mut Writer, xs: &[f32]) -> Result<()> {
    w.u32(xs.len())?;
    w.f32s(xs);
    Ok(())
}

fn read_floats(r: &mut Reader) -> Result<Vec<f32>> {
    let n = r.u32()?;
    r.f32s(n)
}

pub fn encode_demos(demos: &DemoSet) -> Result<Vec<u8>> {
    let mut w = Writer::new(DEMO_MAGIC);
    w.bytes(&json(&Header {
        task: demos.task.clone(),
        label: demos.label.clone(),
    })?)?;
    w.u64(demos.seed);
    w.f64s(&[demos.noise]);
    w.u32(demos.trajectories.len())?;
    for traj in &demos.trajectories {
        w.bytes(&json(&traj.task)?)?;
        w.u32(traj.steps.len())?;
        for step in &traj.steps {
            w.u32(step.seq.task)?;
            w.u32(step.seq.obs.len())?;
            for o in &step.seq.obs {
                w.u32(o.slot)?;
                floats(&mut w, &o.features)?;
            }
            floats(&mut w, &step.seq.state)?;
            floats(&mut w, &step.action)?;
            w.u8(step.gripper_change as u8);
        }
    }
    Ok(w.finish())
}

pub fn decode_demos(bytes: &[u8]) -> Result<DemoSet> {
    let mut r = Reader::open(bytes, DEMO_MAGIC, "demo set")?;
    let header: Header = unjson(&r.bytes()?)?;
    let seed = r.u64()?;
    let noise = r.f64s(1)?[0];
    let n = r.u32()?;
    let mut trajectories = Vec::new();
    for _ in 0..n {
        let task: TaskSpec = unjson(&r.bytes()?)?;
        let t = r.u32()?;
        let mut steps = Vec::new();
        for _ in 0..t {
            let task_token = r.u32()?;
            let n_obs = r.u32()?;
            let mut obs = Vec::new();
            for _ in 0..n_obs {
                let slot = r.u32()?;
                obs.push(ObsToken {
                    slot,
                    features: read_floats(&mut r)?,
                });
            }
            let state = read_floats(&mut r)?;
            let action = read_floats(&mut r)?;
            let gripper_change = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(shape(format!("gripper flag byte {b}"))),
            };
            steps.push(Step {
                seq: TokenSequence {
                    task: task_token,
                    obs,
                    state,
                },
                action,
                gripper_change,
            });
        }
        trajectories.push(Trajectory { task, steps });
    }
    r.done()?;
    Ok(DemoSet {
        task: header.task,
        label: header.label,
        seed,
        noise,
        trajectories,
    })
}

pub fn write_demos(path: impl AsRef<Path>, demos: &DemoSet) -> Result<()> {
    std::fs::write(path, encode_demos(demos)?)?;
    Ok(())
}

pub fn read_demos(path: impl AsRef<Path>) -> Result<DemoSet> {
    decode_demos(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::FormatErrorKind;
    use crate::simenv::{gen_demos, Color, TaskKind};

    #[test]
    fn generated_demos_round_trip() {
        let task = TaskSpec::new(TaskKind::Push(Color::Blue), 1).unwrap();
        let d = gen_demos(&task, 2, 0.1, 3).unwrap();
        let bytes = encode_demos(&d).unwrap();
        let back = decode_demos(&bytes).unwrap();
        assert_eq!(back, d);
        assert_eq!(encode_demos(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0x40;
        assert!(matches!(
            decode_demos(&bad),
            Err(Error::Format {
                kind: FormatErrorKind::Checksum,
                ..
            })
        ));
    }
}
