//! Procedural sprite worlds with ground-truth actions.
//!
//! A world is a grayscale `grid × grid` view. The agent sprite is drawn in
//! view coordinates and moved by the agent half of the action; background
//! sprites (and, when the camera can pan, a faint static texture) live on a
//! larger canvas seen through a camera window moved by the camera half.
//! Positions clamp at the borders and the stored action is the displacement
//! that was actually realized, so every noiseless transition is explained
//! exactly by its label. Distractors replace single pixels with a uniform
//! random intensity for one frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Frame = Vec<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    AgentDisplacement,
    CameraPan,
    Both,
}

impl ActionMode {
    pub fn action_dim(self) -> usize {
        match self {
            ActionMode::AgentDisplacement | ActionMode::CameraPan => 2,
            ActionMode::Both => 4,
        }
    }

    fn moves_agent(self) -> bool {
        !matches!(self, ActionMode::CameraPan)
    }

    fn moves_camera(self) -> bool {
        !matches!(self, ActionMode::AgentDisplacement)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ActionMode::AgentDisplacement => 0,
            ActionMode::CameraPan => 1,
            ActionMode::Both => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(ActionMode::AgentDisplacement),
            1 => Some(ActionMode::CameraPan),
            2 => Some(ActionMode::Both),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldCfg {
    pub grid: usize,
    pub frames: usize,
    pub n_sprites: usize,
    pub action_mode: ActionMode,
    /// Largest per-step displacement, in pixels, along each axis.
    pub action_range: i32,
    pub distractor_rate: f64,
    pub sprite_min: usize,
    pub sprite_max: usize,
    /// Probability the policy repeats its previous intended action.
    pub momentum: f64,
    /// Extra canvas on each side reachable by camera panning.
    pub camera_margin: usize,
}

impl Default for WorldCfg {
    fn default() -> Self {
        Self {
            grid: 16,
            frames: 16,
            n_sprites: 4,
            action_mode: ActionMode::AgentDisplacement,
            action_range: 1,
            distractor_rate: 0.02,
            sprite_min: 4,
            sprite_max: 6,
            momentum: 0.7,
            camera_margin: 4,
        }
    }
}

impl WorldCfg {
    pub const MAX_GRID: usize = 256;
    pub const MAX_FRAMES: usize = 4096;

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid == 0 || self.grid > Self::MAX_GRID {
            return bad(format!("grid {} outside 1..={}", self.grid, Self::MAX_GRID));
        }
        if self.frames < 2 || self.frames > Self::MAX_FRAMES {
            return bad(format!("frames {} outside 2..={}", self.frames, Self::MAX_FRAMES));
        }
        if self.n_sprites == 0 || self.n_sprites > 64 {
            return bad(format!("n_sprites {} outside 1..=64", self.n_sprites));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad(format!("distractor_rate {} outside [0, 1]", self.distractor_rate));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if self.sprite_min == 0 || self.sprite_min > self.sprite_max || self.sprite_max > self.grid {
            return bad(format!(
                "sprite size range {}..={} must fit in grid {}",
                self.sprite_min, self.sprite_max, self.grid
            ));
        }
        if self.action_range < 0 || self.action_range as usize >= self.grid {
            return bad(format!("action_range {} invalid for grid {}", self.action_range, self.grid));
        }
        if self.camera_margin > Self::MAX_GRID {
            return bad(format!("camera_margin {} too large", self.camera_margin));
        }
        Ok(())
    }

    pub fn action_dim(&self) -> usize {
        self.action_mode.action_dim()
    }

    pub fn pixels(&self) -> usize {
        self.grid * self.grid
    }

    fn canvas(&self) -> usize {
        self.grid + 2 * self.camera_margin
    }

    fn camera_max(&self) -> i32 {
        if self.action_mode.moves_camera() {
            2 * self.camera_margin as i32
        } else {
            0
        }
    }

    /// Every integer action on the `[-range, range]` lattice.
    pub fn action_grid(&self) -> Vec<Vec<f64>> {
        let r = self.action_range;
        let dim = self.action_dim();
        let side = (2 * r + 1) as usize;
        let total = side.pow(dim as u32);
        (0..total)
            .map(|mut code| {
                (0..dim)
                    .map(|_| {
                        let v = (code % side) as i32 - r;
                        code /= side;
                        v as f64
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sprite {
    pub x: i32,
    pub y: i32,
    pub size: i32,
    pub intensity: f64,
}

/// Static layout of one world: agent sprite shape and background sprites.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub agent_size: i32,
    pub agent_intensity: f64,
    pub background: Vec<Sprite>,
    /// Canvas-sized static texture; empty when the camera never pans.
    pub texture: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct WorldState {
    pub agent_x: i32,
    pub agent_y: i32,
    pub cam_x: i32,
    pub cam_y: i32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub cfg: WorldCfg,
    pub seed: u64,
    pub frames: Vec<Frame>,
    pub actions: Vec<Vec<f64>>,
    /// False for transitions with no true action (scene cuts).
    pub valid: Vec<bool>,
    pub states: Vec<WorldState>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        self.cfg.validate()?;
        let t = self.cfg.frames;
        let px = self.cfg.pixels();
        let a = self.cfg.action_dim();
        let ok = self.frames.len() == t
            && self.frames.iter().all(|f| f.len() == px)
            && self.actions.len() == t - 1
            && self.actions.iter().all(|x| x.len() == a)
            && self.valid.len() == t - 1
            && self.states.len() == t;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("episode shape does not match its cfg".into()))
        }
    }
}

impl Scene {
    pub fn generate(cfg: &WorldCfg, seed: u64) -> Scene {
        let mut rng = Rng::new(seed, "worldgen/scene");
        let span = (cfg.sprite_max - cfg.sprite_min + 1) as usize;
        let agent_size = (cfg.sprite_min + rng.below(span)) as i32;
        let canvas = cfg.canvas() as i32;
        let background = (1..cfg.n_sprites)
            .map(|_| {
                let size = (cfg.sprite_min + rng.below(span)) as i32;
                let room = (canvas - size + 1).max(1) as usize;
                Sprite {
                    x: rng.below(room) as i32,
                    y: rng.below(room) as i32,
                    size,
                    intensity: rng.uniform_range(0.3, 0.7),
                }
            })
            .collect();
        let texture = if cfg.action_mode.moves_camera() {
            let n = cfg.canvas() * cfg.canvas();
            (0..n).map(|_| 0.15 * rng.uniform()).collect()
        } else {
            Vec::new()
        };
        Scene {
            agent_size,
            agent_intensity: 1.0,
            background,
            texture,
        }
    }

    fn initial_state(&self, cfg: &WorldCfg, rng: &mut Rng) -> WorldState {
        let room = (cfg.grid as i32 - self.agent_size + 1).max(1) as usize;
        let cam = cfg.camera_margin as i32;
        WorldState {
            agent_x: rng.below(room) as i32,
            agent_y: rng.below(room) as i32,
            cam_x: cam,
            cam_y: cam,
        }
    }
}

/// Noiseless render of `state`.
pub fn render_clean(cfg: &WorldCfg, scene: &Scene, state: &WorldState) -> Frame {
    let g = cfg.grid as i32;
    let canvas = cfg.canvas() as i32;
    let mut f = vec![0.0; cfg.pixels()];
    if !scene.texture.is_empty() {
        for vy in 0..g {
            for vx in 0..g {
                let (wx, wy) = (vx + state.cam_x, vy + state.cam_y);
                if (0..canvas).contains(&wx) && (0..canvas).contains(&wy) {
                    f[(vy * g + vx) as usize] = scene.texture[(wy * canvas + wx) as usize];
                }
            }
        }
    }
    for s in &scene.background {
        fill_rect(&mut f, g, s.x - state.cam_x, s.y - state.cam_y, s.size, s.intensity);
    }
    fill_rect(
        &mut f,
        g,
        state.agent_x,
        state.agent_y,
        scene.agent_size,
        scene.agent_intensity,
    );
    f
}

fn fill_rect(f: &mut [f64], g: i32, x: i32, y: i32, size: i32, v: f64) {
    for yy in y.max(0)..(y + size).min(g) {
        for xx in x.max(0)..(x + size).min(g) {
            f[(yy * g + xx) as usize] = v;
        }
    }
}

fn add_distractors(cfg: &WorldCfg, frame: &mut Frame, rng: &mut Rng) {
    if cfg.distractor_rate <= 0.0 {
        return;
    }
    for px in frame.iter_mut() {
        if rng.bernoulli(cfg.distractor_rate) {
            *px = rng.uniform();
        }
    }
}

/// Advance `state` by `action`, clamping at borders. Returns the new state and
/// the displacement actually realized.
pub fn step_state(
    cfg: &WorldCfg,
    scene: &Scene,
    state: &WorldState,
    action: &[f64],
) -> (WorldState, Vec<f64>) {
    let mut next = *state;
    let mut realized = Vec::with_capacity(action.len());
    let mut i = 0;
    if cfg.action_mode.moves_agent() {
        let hi = cfg.grid as i32 - scene.agent_size;
        let (dx, dy) = (action[i].round() as i32, action[i + 1].round() as i32);
        next.agent_x = (state.agent_x + dx).clamp(0, hi.max(0));
        next.agent_y = (state.agent_y + dy).clamp(0, hi.max(0));
        realized.push((next.agent_x - state.agent_x) as f64);
        realized.push((next.agent_y - state.agent_y) as f64);
        i += 2;
    }
    if cfg.action_mode.moves_camera() {
        let hi = cfg.camera_max();
        let (dx, dy) = (action[i].round() as i32, action[i + 1].round() as i32);
        next.cam_x = (state.cam_x + dx).clamp(0, hi);
        next.cam_y = (state.cam_y + dy).clamp(0, hi);
        realized.push((next.cam_x - state.cam_x) as f64);
        realized.push((next.cam_y - state.cam_y) as f64);
    }
    (next, realized)
}

/// Roll a scene forward from `init` under a fixed action script. Distractor
/// noise is drawn from `noise` when given.
pub fn simulate(
    cfg: &WorldCfg,
    scene: &Scene,
    init: WorldState,
    script: &[Vec<f64>],
    seed: u64,
    mut noise: Option<&mut Rng>,
) -> Episode {
    let mut states = vec![init];
    let mut actions = Vec::with_capacity(script.len());
    for a in script {
        let (next, realized) = step_state(cfg, scene, states.last().unwrap(), a);
        states.push(next);
        actions.push(realized);
    }
    let frames = states
        .iter()
        .map(|s| {
            let mut f = render_clean(cfg, scene, s);
            if let Some(rng) = noise.as_deref_mut() {
                add_distractors(cfg, &mut f, rng);
            }
            f
        })
        .collect();
    Episode {
        cfg: cfg.clone(),
        seed,
        frames,
        valid: vec![true; actions.len()],
        actions,
        states,
    }
}

fn policy_script(cfg: &WorldCfg, rng: &mut Rng) -> Vec<Vec<f64>> {
    let r = cfg.action_range;
    let side = (2 * r + 1) as usize;
    let dim = cfg.action_dim();
    let draw = |rng: &mut Rng| -> Vec<f64> {
        (0..dim).map(|_| (rng.below(side) as i32 - r) as f64).collect()
    };
    let mut intent = draw(rng);
    let mut script = Vec::with_capacity(cfg.frames - 1);
    for _ in 0..cfg.frames - 1 {
        script.push(intent.clone());
        if !rng.bernoulli(cfg.momentum) {
            intent = draw(rng);
        }
    }
    script
}

/// Generate one episode. Pure in `(cfg, seed)`.
pub fn make_episode(cfg: &WorldCfg, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let scene = Scene::generate(cfg, seed);
    let mut rng = Rng::new(seed, "worldgen/policy");
    let init = scene.initial_state(cfg, &mut rng);
    let script = policy_script(cfg, &mut rng);
    let mut noise = Rng::new(seed, "worldgen/distractors");
    Ok(simulate(cfg, &scene, init, &script, seed, Some(&mut noise)))
}

pub fn make_dataset(cfg: &WorldCfg, seed: u64, n: usize) -> Result<Vec<Episode>> {
    let mut rng = Rng::new(seed, "worldgen/dataset");
    (0..n).map(|_| make_episode(cfg, rng.next_u64())).collect()
}

/// `a.frames[..k] ++ b.frames[k..]`. Transitions from the cut onward have no
/// true action and are marked invalid, unless `b` is `a` itself.
pub fn stitch_scene_cut(a: &Episode, b: &Episode, k: usize) -> Result<Episode> {
    a.check()?;
    b.check()?;
    let t = a.cfg.frames;
    if a.cfg.grid != b.cfg.grid
        || a.cfg.frames != b.cfg.frames
        || a.cfg.action_dim() != b.cfg.action_dim()
    {
        return Err(Error::Config("stitch: episodes have different shapes".into()));
    }
    if k == 0 || k >= t {
        return Err(Error::Config(format!("stitch: cut index {k} outside 1..={}", t - 1)));
    }
    if a == b {
        return Ok(a.clone());
    }
    let mut out = a.clone();
    for i in k..t {
        out.frames[i] = b.frames[i].clone();
        out.states[i] = b.states[i];
    }
    for i in (k - 1)..(t - 1) {
        out.actions[i] = b.actions[i].clone();
        out.valid[i] = false;
    }
    Ok(out)
}

/// Two independent episodes of the same cfg from distinct sub-seeds.
pub fn make_cycle_pair(cfg: &WorldCfg, seed: u64) -> Result<(Episode, Episode)> {
    let mut rng = Rng::new(seed, "worldgen/cycle-pair");
    let a = make_episode(cfg, rng.next_u64())?;
    let b = make_episode(cfg, rng.next_u64())?;
    Ok((a, b))
}

/// Replay `source`'s actions from `target`'s initial state and scene, without
/// distractors. The ground-truth outcome of transferring actions A → B.
pub fn transfer_actions(source: &Episode, target: &Episode) -> Episode {
    let scene = Scene::generate(&target.cfg, target.seed);
    simulate(&target.cfg, &scene, target.states[0], &source.actions, target.seed, None)
}

/// Exhaustive search over the integer action lattice for the action whose
/// noiseless render of `state` equals `next`.
pub fn recover_action(
    cfg: &WorldCfg,
    scene: &Scene,
    state: &WorldState,
    next: &[f64],
) -> Option<Vec<f64>> {
    let mut found: Option<Vec<f64>> = None;
    let mut seen_states = Vec::new();
    for a in cfg.action_grid() {
        let (s, realized) = step_state(cfg, scene, state, &a);
        if seen_states.contains(&s) {
            continue;
        }
        seen_states.push(s);
        if render_clean(cfg, scene, &s) == next {
            if found.is_some() {
                return None;
            }
            found = Some(realized);
        }
    }
    found
}
