//! Episode and dataset containers.
//!
//! Binary episode, version 1 (little-endian):
//!
//! ```text
//! "LWEP" u16:version
//! cfg:   u32 grid, u32 frames, u32 n_sprites, u8 action_mode, i32 action_range,
//!        f64 distractor_rate, u32 sprite_min, u32 sprite_max, f64 momentum,
//!        u32 camera_margin
//! u64 seed
//! f64 frames[frames][grid*grid]     row-major
//! f64 actions[frames-1][action_dim]
//! u8  valid[frames-1]
//! i32 states[frames][4]             agent_x, agent_y, cam_x, cam_y
//! ```
//!
//! A dataset is `"LWDS" u16:version u32:count` followed by `count` episodes,
//! each prefixed with its byte length as `u64`.
//!
//! The text dump is line-oriented and lossless: every float is written in
//! shortest round-trip decimal form.

use std::fmt::Write as _;

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{malformed, Error, Result};
use crate::worldgen::{ActionMode, Episode, WorldCfg, WorldState};

pub const EPISODE_MAGIC: &[u8; 4] = b"LWEP";
pub const DATASET_MAGIC: &[u8; 4] = b"LWDS";
pub const EPISODE_VERSION: u16 = 1;
pub const DATASET_VERSION: u16 = 1;
const TEXT_HEADER: &str = "lamward-episode v1";

fn write_cfg(w: &mut ByteWriter, c: &WorldCfg) {
    w.u32(c.grid as u32);
    w.u32(c.frames as u32);
    w.u32(c.n_sprites as u32);
    w.u8(c.action_mode.code());
    w.i32(c.action_range);
    w.f64(c.distractor_rate);
    w.u32(c.sprite_min as u32);
    w.u32(c.sprite_max as u32);
    w.f64(c.momentum);
    w.u32(c.camera_margin as u32);
}

fn read_cfg(r: &mut ByteReader) -> Result<WorldCfg> {
    let grid = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let n_sprites = r.u32()? as usize;
    let mode = r.u8()?;
    let action_mode =
        ActionMode::from_code(mode).ok_or_else(|| malformed("episode", format!("action mode {mode}")))?;
    let cfg = WorldCfg {
        grid,
        frames,
        n_sprites,
        action_mode,
        action_range: r.i32()?,
        distractor_rate: r.f64()?,
        sprite_min: r.u32()? as usize,
        sprite_max: r.u32()? as usize,
        momentum: r.f64()?,
        camera_margin: r.u32()? as usize,
    };
    cfg.validate()
        .map_err(|e| malformed("episode", format!("cfg: {e}")))?;
    Ok(cfg)
}

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(EPISODE_MAGIC);
    w.u16(EPISODE_VERSION);
    write_cfg(&mut w, &ep.cfg);
    w.u64(ep.seed);
    for f in &ep.frames {
        w.f64s(f);
    }
    for a in &ep.actions {
        w.f64s(a);
    }
    for v in &ep.valid {
        w.u8(u8::from(*v));
    }
    for s in &ep.states {
        w.i32(s.agent_x);
        w.i32(s.agent_y);
        w.i32(s.cam_x);
        w.i32(s.cam_y);
    }
    w.finish()
}

fn read_episode(r: &mut ByteReader) -> Result<Episode> {
    r.expect_magic(EPISODE_MAGIC)?;
    r.expect_version(EPISODE_VERSION)?;
    let cfg = read_cfg(r)?;
    let seed = r.u64()?;
    let t = cfg.frames;
    let px = cfg.pixels();
    let ad = cfg.action_dim();
    let body = t * px * 8 + (t - 1) * ad * 8 + (t - 1) + t * 16;
    if r.remaining() < body {
        return Err(malformed(
            "episode",
            format!("body needs {body} bytes, {} available", r.remaining()),
        ));
    }
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        let f = r.f64s(px)?;
        if f.iter().any(|x| !x.is_finite()) {
            return Err(malformed("episode", "non-finite pixel"));
        }
        frames.push(f);
    }
    let mut actions = Vec::with_capacity(t - 1);
    for _ in 0..t - 1 {
        let a = r.f64s(ad)?;
        if a.iter().any(|x| !x.is_finite()) {
            return Err(malformed("episode", "non-finite action"));
        }
        actions.push(a);
    }
    let mut valid = Vec::with_capacity(t - 1);
    for _ in 0..t - 1 {
        valid.push(match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(malformed("episode", format!("valid flag {b}"))),
        });
    }
    let mut states = Vec::with_capacity(t);
    for _ in 0..t {
        states.push(WorldState {
            agent_x: r.i32()?,
            agent_y: r.i32()?,
            cam_x: r.i32()?,
            cam_y: r.i32()?,
        });
    }
    Ok(Episode {
        cfg,
        seed,
        frames,
        actions,
        valid,
        states,
    })
}

pub fn decode_episode(bytes: &[u8]) -> Result<Episode> {
    let mut r = ByteReader::new(bytes, "episode");
    let ep = read_episode(&mut r)?;
    r.finish()?;
    Ok(ep)
}

pub fn encode_dataset(episodes: &[Episode]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u32(episodes.len() as u32);
    for ep in episodes {
        let b = encode_episode(ep);
        w.u64(b.len() as u64);
        w.bytes(&b);
    }
    w.finish()
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Episode>> {
    let mut r = ByteReader::new(bytes, "dataset");
    r.expect_magic(DATASET_MAGIC)?;
    r.expect_version(DATASET_VERSION)?;
    let n = r.u32()? as usize;
    // Every episode needs at least its 8-byte length prefix.
    if n > r.remaining() / 8 {
        return Err(malformed("dataset", format!("count {n} exceeds input size")));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let len = r.u64()?;
        let len = usize::try_from(len).map_err(|_| malformed("dataset", "length overflow"))?;
        let chunk = r.take(len)?;
        let ep = decode_episode(chunk).map_err(|e| match e {
            Error::BadMagic { .. } | Error::Version { .. } => e,
            other => malformed("dataset", format!("episode {i}: {other}")),
        })?;
        if let Some(first) = out.first() {
            let first: &Episode = first;
            if first.cfg != ep.cfg {
                return Err(malformed("dataset", format!("episode {i} cfg differs")));
            }
        }
        out.push(ep);
    }
    r.finish()?;
    Ok(out)
}

fn join(xs: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x:?}").unwrap();
    }
    s
}

pub fn episode_to_text(ep: &Episode) -> String {
    let c = &ep.cfg;
    let mut s = String::new();
    writeln!(s, "{TEXT_HEADER}").unwrap();
    writeln!(
        s,
        "cfg grid={} frames={} n_sprites={} action_mode={} action_range={} distractor_rate={:?} sprite_min={} sprite_max={} momentum={:?} camera_margin={}",
        c.grid,
        c.frames,
        c.n_sprites,
        c.action_mode.code(),
        c.action_range,
        c.distractor_rate,
        c.sprite_min,
        c.sprite_max,
        c.momentum,
        c.camera_margin
    )
    .unwrap();
    writeln!(s, "seed {}", ep.seed).unwrap();
    for (t, f) in ep.frames.iter().enumerate() {
        writeln!(s, "frame {t} {}", join(f)).unwrap();
    }
    for (t, a) in ep.actions.iter().enumerate() {
        writeln!(s, "action {t} {} {}", u8::from(ep.valid[t]), join(a)).unwrap();
    }
    for (t, st) in ep.states.iter().enumerate() {
        writeln!(
            s,
            "state {t} {} {} {} {}",
            st.agent_x, st.agent_y, st.cam_x, st.cam_y
        )
        .unwrap();
    }
    s
}

fn text_err(detail: impl Into<String>) -> Error {
    malformed("episode text", detail)
}

fn parse_num<T: std::str::FromStr>(tok: &str) -> Result<T> {
    tok.parse().map_err(|_| text_err(format!("bad number {tok:?}")))
}

pub fn episode_from_text(text: &str) -> Result<Episode> {
    let mut lines = text.lines();
    if lines.next() != Some(TEXT_HEADER) {
        return Err(Error::BadMagic { kind: "episode text" });
    }
    let cfg_line = lines.next().ok_or_else(|| text_err("missing cfg"))?;
    let mut toks = cfg_line.split_whitespace();
    if toks.next() != Some("cfg") {
        return Err(text_err("expected cfg line"));
    }
    let mut cfg = WorldCfg::default();
    let mut seen = 0;
    for kv in toks {
        let (k, v) = kv.split_once('=').ok_or_else(|| text_err(format!("bad cfg token {kv:?}")))?;
        match k {
            "grid" => cfg.grid = parse_num(v)?,
            "frames" => cfg.frames = parse_num(v)?,
            "n_sprites" => cfg.n_sprites = parse_num(v)?,
            "action_mode" => {
                cfg.action_mode = ActionMode::from_code(parse_num(v)?)
                    .ok_or_else(|| text_err("bad action mode"))?
            }
            "action_range" => cfg.action_range = parse_num(v)?,
            "distractor_rate" => cfg.distractor_rate = parse_num(v)?,
            "sprite_min" => cfg.sprite_min = parse_num(v)?,
            "sprite_max" => cfg.sprite_max = parse_num(v)?,
            "momentum" => cfg.momentum = parse_num(v)?,
            "camera_margin" => cfg.camera_margin = parse_num(v)?,
            _ => return Err(text_err(format!("unknown cfg key {k:?}"))),
        }
        seen += 1;
    }
    if seen != 10 {
        return Err(text_err("cfg line must list all 10 fields"));
    }
    cfg.validate().map_err(|e| text_err(format!("cfg: {e}")))?;
    let seed_line = lines.next().ok_or_else(|| text_err("missing seed"))?;
    let seed = match seed_line.split_once(' ') {
        Some(("seed", v)) => parse_num(v)?,
        _ => return Err(text_err("expected seed line")),
    };
    let t = cfg.frames;
    let mut frames = Vec::with_capacity(t);
    let mut actions = Vec::with_capacity(t - 1);
    let mut valid = Vec::with_capacity(t - 1);
    let mut states = Vec::with_capacity(t);
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let mut toks = line.split_whitespace();
        let tag = toks.next().unwrap_or_default();
        let idx: usize = parse_num(toks.next().ok_or_else(|| text_err("missing index"))?)?;
        match tag {
            "frame" => {
                if idx != frames.len() || idx >= t {
                    return Err(text_err(format!("frame index {idx} out of order")));
                }
                let f: Vec<f64> = toks.map(parse_num).collect::<Result<_>>()?;
                if f.len() != cfg.pixels() || f.iter().any(|x| !x.is_finite()) {
                    return Err(text_err(format!("frame {idx} has bad pixels")));
                }
                frames.push(f);
            }
            "action" => {
                if idx != actions.len() || idx + 1 >= t {
                    return Err(text_err(format!("action index {idx} out of order")));
                }
                let v = match toks.next() {
                    Some("0") => false,
                    Some("1") => true,
                    _ => return Err(text_err("bad valid flag")),
                };
                let a: Vec<f64> = toks.map(parse_num).collect::<Result<_>>()?;
                if a.len() != cfg.action_dim() || a.iter().any(|x| !x.is_finite()) {
                    return Err(text_err(format!("action {idx} has bad values")));
                }
                valid.push(v);
                actions.push(a);
            }
            "state" => {
                if idx != states.len() || idx >= t {
                    return Err(text_err(format!("state index {idx} out of order")));
                }
                let v: Vec<i32> = toks.map(parse_num).collect::<Result<_>>()?;
                let [ax, ay, cx, cy] = v[..] else {
                    return Err(text_err("state needs 4 integers"));
                };
                states.push(WorldState {
                    agent_x: ax,
                    agent_y: ay,
                    cam_x: cx,
                    cam_y: cy,
                });
            }
            other => return Err(text_err(format!("unknown line tag {other:?}"))),
        }
    }
    let ep = Episode {
        cfg,
        seed,
        frames,
        actions,
        valid,
        states,
    };
    ep.check().map_err(|_| text_err("incomplete episode"))?;
    Ok(ep)
}
