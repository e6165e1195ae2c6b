//! Collision-free demonstration datasets.
//!
//! Demonstrations are planner routes through a chain of uniformly random
//! goal cells. Each leg is planned with Dijkstra over randomly weighted free
//! cells (so different homotopy classes appear between the same pair),
//! shortcut-smoothed under a clearance margin, and resampled at constant
//! speed. Long routes are then cut into overlapping length-`T` windows.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maze::{check_collision, Cell, MazeMap, MultiGoalTask};
use crate::trajectory::{distance, Trajectory};

pub const DEFAULT_HORIZON: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub horizon: usize,
    /// Distance travelled per state, in cells.
    pub speed: f64,
    /// Offset between consecutive windows cut from one route, in states.
    pub stride: usize,
    /// Minimum wall clearance kept by shortcut smoothing, in cells.
    pub clearance: f64,
    /// Upper bound of the uniform extra cost added to each cell per query.
    pub cost_jitter: f64,
    /// States per continuous route before a new random start is drawn.
    pub route_states: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            horizon: DEFAULT_HORIZON,
            speed: 0.1,
            stride: 8,
            clearance: 0.3,
            cost_jitter: 1.0,
            route_states: 512,
        }
    }
}

impl DemoConfig {
    /// Start-to-goal windows: fast enough that every route fits the horizon.
    pub fn goal_reaching() -> Self {
        Self { speed: 0.25, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoDataset {
    pub trajectories: Vec<Trajectory<f64>>,
    pub map_id: String,
    pub seed: u64,
    /// Number of distinct route states the windows were cut from.
    pub route_states: usize,
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    cell: Cell,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Cheapest 4-connected route where entering a cell costs `cell_cost`.
pub fn plan_route(map: &MazeMap, from: Cell, to: Cell, cell_cost: &[f64]) -> Option<Vec<Cell>> {
    let idx = |(c, r): Cell| r * map.width + c;
    let mut best = vec![f64::INFINITY; map.walls.len()];
    let mut parent: Vec<Option<Cell>> = vec![None; map.walls.len()];
    let mut heap = BinaryHeap::new();
    best[idx(from)] = 0.0;
    heap.push(Frontier { cost: 0.0, cell: from });
    while let Some(Frontier { cost, cell }) = heap.pop() {
        if cell == to {
            let mut path = vec![to];
            let mut cur = to;
            while let Some(p) = parent[idx(cur)] {
                path.push(p);
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        if cost > best[idx(cell)] {
            continue;
        }
        for n in map.free_neighbors(cell) {
            let c = cost + cell_cost[idx(n)];
            if c < best[idx(n)] {
                best[idx(n)] = c;
                parent[idx(n)] = Some(cell);
                heap.push(Frontier { cost: c, cell: n });
            }
        }
    }
    None
}

/// Greedy shortcutting: from each kept waypoint jump to the farthest later
/// waypoint reachable by a straight segment with `margin` wall clearance.
pub fn shortcut(map: &MazeMap, waypoints: &[[f64; 2]], margin: f64) -> Vec<[f64; 2]> {
    if waypoints.len() <= 2 {
        return waypoints.to_vec();
    }
    let spacing = map.cell_size / 20.0;
    let mut out = vec![waypoints[0]];
    let mut i = 0;
    while i + 1 < waypoints.len() {
        let mut j = i + 1;
        for k in (i + 2..waypoints.len()).rev() {
            if map.segment_clear(waypoints[i], waypoints[k], margin, spacing) {
                j = k;
                break;
            }
        }
        out.push(waypoints[j]);
        i = j;
    }
    out
}

/// Samples a polyline every `step` units of arc length, starting at its
/// first vertex. The final vertex is included only if it falls on the grid.
pub fn resample_constant_speed(poly: &[[f64; 2]], step: f64, max_states: usize) -> Vec<[f64; 2]> {
    let mut out = vec![poly[0]];
    let mut carry = 0.0;
    for w in poly.windows(2) {
        let len = distance(w[0], w[1]);
        if len == 0.0 {
            continue;
        }
        let mut s = step - carry;
        while s <= len && out.len() < max_states {
            let t = s / len;
            out.push([w[0][0] + (w[1][0] - w[0][0]) * t, w[0][1] + (w[1][1] - w[0][1]) * t]);
            s += step;
        }
        carry = len - (s - step);
        if out.len() >= max_states {
            break;
        }
    }
    out
}

fn random_costs(map: &MazeMap, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..map.walls.len()).map(|_| 1.0 + rng.random::<f64>() * jitter).collect()
}

fn route_leg(map: &MazeMap, from: Cell, to: Cell, cfg: &DemoConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let costs = random_costs(map, cfg.cost_jitter, rng);
    let cells = plan_route(map, from, to, &costs).expect("free space is connected");
    let centers: Vec<[f64; 2]> = cells.iter().map(|&c| map.cell_center(c)).collect();
    shortcut(map, &centers, cfg.clearance * map.cell_size)
}

/// Chain of random goals from a random free cell in `free`, resampled to
/// `states` states.
pub fn random_route(map: &MazeMap, free: &[Cell], states: usize, cfg: &DemoConfig, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    let step = cfg.speed * map.cell_size;
    let mut cell = free[rng.random_range(0..free.len())];
    let mut poly = vec![map.cell_center(cell)];
    let mut length = 0.0;
    while length < step * states as f64 + map.cell_size {
        let mut goal = cell;
        while goal == cell {
            goal = free[rng.random_range(0..free.len())];
        }
        let leg = route_leg(map, cell, goal, cfg, rng);
        for w in leg.windows(2) {
            length += distance(w[0], w[1]);
        }
        poly.extend_from_slice(&leg[1..]);
        cell = goal;
    }
    resample_constant_speed(&poly, step, states)
}

/// Generates at least `num_steps` route states on `map` and cuts them into
/// horizon-length windows. Deterministic in `seed`.
pub fn generate_demos(map: &MazeMap, num_steps: usize, seed: u64, cfg: &DemoConfig) -> Result<DemoDataset> {
    let free = map.free_cells();
    if free.len() < 2 {
        return Err(Error::TooFewFreeCells(free.len()));
    }
    if num_steps < cfg.horizon || cfg.horizon < 2 || cfg.stride == 0 {
        return Err(Error::InvalidInput(format!(
            "need num_steps >= horizon >= 2, got num_steps={num_steps}, horizon={}",
            cfg.horizon
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_route = cfg.route_states.max(cfg.horizon);
    let mut trajectories = Vec::new();
    let mut total = 0;
    while total < num_steps {
        let states = per_route.min((num_steps - total).max(cfg.horizon));
        let route = random_route(map, &free, states, cfg, &mut rng);
        total += route.len();
        let mut start = 0;
        while start + cfg.horizon <= route.len() {
            let window = Trajectory { states: route[start..start + cfg.horizon].to_vec() };
            debug_assert!(!check_collision(&window, map));
            trajectories.push(window);
            start += cfg.stride;
        }
    }
    Ok(DemoDataset { trajectories, map_id: map.id.clone(), seed, route_states: total })
}

/// Demonstrations from the task's common start to each goal in turn; the
/// state holds at the goal once reached.
pub fn generate_goal_demos(task: &MultiGoalTask, count: usize, seed: u64, cfg: &DemoConfig) -> Result<DemoDataset> {
    let map = &task.map;
    if count == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start_cell = map.cell_of(task.start).ok_or_else(|| Error::InvalidInput("start off grid".into()))?;
    let step = cfg.speed * map.cell_size;
    let jitter = 0.15 * map.cell_size;
    let mut trajectories = Vec::with_capacity(count);
    while trajectories.len() < count {
        let goal = &task.goals[trajectories.len() % task.goals.len()];
        let goal_cell = map.cell_of(goal.center).expect("goal on grid");
        let costs = random_costs(map, cfg.cost_jitter, &mut rng);
        let cells = plan_route(map, start_cell, goal_cell, &costs).expect("goals reachable");
        let mut pts: Vec<[f64; 2]> = cells.iter().map(|&c| map.cell_center(c)).collect();
        let n = pts.len();
        pts[0] = [task.start[0] + rng.random_range(-jitter..jitter), task.start[1] + rng.random_range(-jitter..jitter)];
        pts[n - 1] = [goal.center[0] + rng.random_range(-jitter..jitter), goal.center[1] + rng.random_range(-jitter..jitter)];
        let smooth = shortcut(map, &pts, cfg.clearance * map.cell_size);
        let mut states = resample_constant_speed(&smooth, step, cfg.horizon);
        let end = *smooth.last().unwrap();
        while states.len() < cfg.horizon {
            states.push(end);
        }
        let traj = Trajectory { states };
        if !check_collision(&traj, map) {
            trajectories.push(traj);
        }
    }
    let route_states = count * cfg.horizon;
    Ok(DemoDataset { trajectories, map_id: map.id.clone(), seed, route_states })
}

#[derive(Serialize, Deserialize)]
struct JsonLine {
    states: Vec<[f64; 2]>,
    map_id: String,
}

const PACKED_MAGIC: &[u8; 4] = b"TRJ1";

impl DemoDataset {
    pub fn horizon(&self) -> usize {
        self.trajectories.first().map_or(0, Trajectory::horizon)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.trajectories {
            let line = JsonLine { states: t.states.clone(), map_id: self.map_id.clone() };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, seed: u64) -> Result<Self> {
        let mut trajectories = Vec::new();
        let mut map_id = String::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonLine = serde_json::from_str(&line)?;
            map_id = rec.map_id;
            trajectories.push(Trajectory::new(rec.states)?);
        }
        let route_states = trajectories.iter().map(Trajectory::horizon).sum();
        Ok(Self { trajectories, map_id, seed, route_states })
    }

    /// Packed layout: magic `TRJ1`, `u32` horizon, `u32` count, then
    /// `count * horizon * 2` little-endian `f32` coordinates.
    pub fn write_packed<W: Write>(&self, mut w: W) -> Result<()> {
        let horizon = self.horizon();
        w.write_all(PACKED_MAGIC)?;
        w.write_all(&(horizon as u32).to_le_bytes())?;
        w.write_all(&(self.trajectories.len() as u32).to_le_bytes())?;
        for t in &self.trajectories {
            if t.horizon() != horizon {
                return Err(Error::DimensionMismatch { expected: horizon, got: t.horizon() });
            }
            for s in &t.states {
                w.write_all(&(s[0] as f32).to_le_bytes())?;
                w.write_all(&(s[1] as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_packed<R: Read>(mut r: R, map_id: &str, seed: u64) -> Result<Self> {
        let mut head = [0u8; 12];
        r.read_exact(&mut head)?;
        if &head[..4] != PACKED_MAGIC {
            return Err(Error::Parse("bad packed dataset magic".into()));
        }
        let horizon = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        let mut buf = vec![0u8; horizon * 8];
        let mut trajectories = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let states = buf
                .chunks_exact(8)
                .map(|c| {
                    let x = f32::from_le_bytes(c[..4].try_into().unwrap());
                    let y = f32::from_le_bytes(c[4..].try_into().unwrap());
                    [x as f64, y as f64]
                })
                .collect();
            trajectories.push(Trajectory::new(states)?);
        }
        Ok(Self { trajectories, map_id: map_id.to_string(), seed, route_states: count * horizon })
    }

    /// SHA-256 over the map id and every coordinate's `f64` bit pattern.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.map_id.as_bytes());
        for t in &self.trajectories {
            for s in &t.states {
                h.update(s[0].to_le_bytes());
                h.update(s[1].to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}
