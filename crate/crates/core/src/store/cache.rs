//! `HSAC1` activation-cache files.
//!
//! Body layout, all little-endian:
//!
//! ```text
//! u32 L, u32 H, u32 d_head, u32 d_action, u8 token, u32 stride
//! u32 n_traj, then per trajectory: u32 id, u32 count, count × u32 t
//! f32 actions[n_rows × d_action]
//! f64 running_std[L × H]
//! f32 values[L × H × n_rows × d_head]   head-major, then row, then dim
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::policy::TapToken;
use crate::selector::{ActivationCache, RowKey};

use super::binary::{shape, Reader, Writer};

pub const CACHE_MAGIC: &[u8; 5] = b"HSAC1";

fn token_code(t: TapToken) -> u8 {
    match t {
        TapToken::State => 0,
        TapToken::LastObs => 1,
    }
}

pub fn encode_cache(cache: &ActivationCache) -> Result<Vec<u8>> {
    if cache.n_trajs() < 2 {
        return Err(Error::Contract(format!(
            "refusing to write a cache with {} trajectories (need at least 2)",
            cache.n_trajs()
        )));
    }
    let mut w = Writer::new(CACHE_MAGIC);
    w.u32(cache.n_layers)?;
    w.u32(cache.n_heads)?;
    w.u32(cache.d_head)?;
    w.u32(cache.d_action)?;
    w.u8(token_code(cache.token));
    w.u32(cache.stride)?;

    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for k in &cache.keys {
        match groups.last_mut() {
            Some((id, ts)) if *id == k.traj => ts.push(k.t),
            _ => groups.push((k.traj, vec![k.t])),
        }
    }
    w.u32(groups.len())?;
    for (id, ts) in &groups {
        w.u32(*id)?;
        w.u32(ts.len())?;
        for &t in ts {
            w.u32(t)?;
        }
    }
    w.f32s(&cache.actions);
    w.f64s(&cache.running_std);
    w.f32s(&cache.values);
    Ok(w.finish())
}

pub fn decode_cache(bytes: &[u8]) -> Result<ActivationCache> {
    let mut r = Reader::open(bytes, CACHE_MAGIC, "activation cache")?;
    let n_layers = r.u32()?;
    let n_heads = r.u32()?;
    let d_head = r.u32()?;
    let d_action = r.u32()?;
    let token = match r.u8()? {
        0 => TapToken::State,
        1 => TapToken::LastObs,
        other => return Err(shape(format!("unknown extraction token code {other}"))),
    };
    let stride = r.u32()?;
    let n_traj = r.u32()?;
    let mut keys = Vec::new();
    for _ in 0..n_traj {
        let traj = r.u32()?;
        let count = r.u32()?;
        for _ in 0..count {
            keys.push(RowKey { traj, t: r.u32()? });
        }
    }
    let n = keys.len();
    let n_head_total = n_layers
        .checked_mul(n_heads)
        .ok_or_else(|| shape("cache head count overflows"))?;
    let actions = r.f32s(n.saturating_mul(d_action))?;
    let running_std = r.f64s(n_head_total)?;
    let values = r.f32s(n_head_total.saturating_mul(n).saturating_mul(d_head))?;
    r.done()?;
    let cache = ActivationCache {
        n_layers,
        n_heads,
        d_head,
        d_action,
        token,
        stride,
        keys,
        actions,
        values,
        running_std,
    };
    cache.check().map_err(|e| shape(e.to_string()))?;
    if stride == 0 {
        return Err(shape("cache keyframe stride is zero"));
    }
    Ok(cache)
}

pub fn write_cache(path: impl AsRef<Path>, cache: &ActivationCache) -> Result<()> {
    std::fs::write(path, encode_cache(cache)?)?;
    Ok(())
}

pub fn read_cache(path: impl AsRef<Path>) -> Result<ActivationCache> {
    decode_cache(&std::fs::read(path)?)
}

/// Number of stored activation values, in millions.
pub fn cache_size_report(cache: &ActivationCache) -> f64 {
    (cache.n_rows() * cache.n_head_total() * cache.d_head()) as f64 / 1e6
}
