//! Occupancy-grid mazes, collision checking and goal regions.
//!
//! Cell `(col, row)` covers `[col * cell_size, (col + 1) * cell_size) x
//! [row * cell_size, (row + 1) * cell_size)` in workspace units; row 0 is the
//! first row of the text asset.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::{distance, Bounds, State, Trajectory};

const LARGE_MAZE: &str = include_str!("../assets/maze_large.txt");
const FORK_MAZE: &str = include_str!("../assets/maze_fork.txt");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeMap {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major, `true` = wall.
    pub walls: Vec<bool>,
    pub cell_size: f64,
}

pub type Cell = (usize, usize);

impl MazeMap {
    /// Parses the text asset: `cell_size=<float>` on the first line, then one
    /// row per line with `#` for walls and `.` for free cells.
    pub fn parse(id: &str, text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim_end).filter(|l| !l.is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty maze asset".into()))?;
        let cell_size: f64 = header
            .strip_prefix("cell_size=")
            .ok_or_else(|| Error::Parse(format!("expected cell_size header, got {header:?}")))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("bad cell_size: {e}")))?;
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::Parse(format!("cell_size must be positive, got {cell_size}")));
        }
        let mut walls = Vec::new();
        let mut width = None;
        let mut height = 0;
        for line in lines {
            let row: Vec<bool> = line
                .chars()
                .map(|c| match c {
                    '#' => Ok(true),
                    '.' => Ok(false),
                    other => Err(Error::Parse(format!("unexpected character {other:?}"))),
                })
                .collect::<Result<_>>()?;
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::Parse(format!("row {height} has {} cells, expected {w}", row.len())))
                }
                _ => {}
            }
            walls.extend(row);
            height += 1;
        }
        let width = width.unwrap_or(0);
        Self::new(id, width, height, walls, cell_size)
    }

    pub fn new(id: &str, width: usize, height: usize, walls: Vec<bool>, cell_size: f64) -> Result<Self> {
        if width < 2 || height < 2 || walls.len() != width * height {
            return Err(Error::Parse(format!("grid must be at least 2x2, got {width}x{height}")));
        }
        let map = Self { id: id.to_string(), width, height, walls, cell_size };
        for col in 0..width {
            for row in 0..height {
                let border = col == 0 || row == 0 || col == width - 1 || row == height - 1;
                if border && !map.is_wall_cell((col, row)) {
                    return Err(Error::Parse(format!("border cell ({col}, {row}) must be a wall")));
                }
            }
        }
        Ok(map)
    }

    /// The 12x9 benchmark maze with multiple routes between most cell pairs.
    pub fn benchmark() -> Self {
        Self::parse("maze-large", LARGE_MAZE).expect("bundled asset is valid")
    }

    /// The same grid at a different scale.
    pub fn with_cell_size(&self, cell_size: f64) -> Result<Self> {
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::InvalidInput(format!("cell_size must be positive, got {cell_size}")));
        }
        Ok(Self { cell_size, ..self.clone() })
    }

    pub fn to_asset(&self) -> String {
        let mut out = String::new();
        writeln!(out, "cell_size={}", self.cell_size).unwrap();
        for row in 0..self.height {
            for col in 0..self.width {
                out.push(if self.is_wall_cell((col, row)) { '#' } else { '.' });
            }
            out.push('\n');
        }
        out
    }

    pub fn bounds(&self) -> Bounds {
        Bounds {
            lo: [0.0, 0.0],
            hi: [self.width as f64 * self.cell_size, self.height as f64 * self.cell_size],
        }
    }

    pub fn is_wall_cell(&self, (col, row): Cell) -> bool {
        self.walls[row * self.width + col]
    }

    pub fn cell_of(&self, p: [f64; 2]) -> Option<Cell> {
        let col = (p[0] / self.cell_size).floor();
        let row = (p[1] / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((col as usize, row as usize))
    }

    /// Points outside the grid count as walls.
    pub fn is_wall_at(&self, p: [f64; 2]) -> bool {
        !p[0].is_finite() || !p[1].is_finite() || self.cell_of(p).is_none_or(|c| self.is_wall_cell(c))
    }

    pub fn cell_center(&self, (col, row): Cell) -> [f64; 2] {
        [(col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size]
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.height)
            .flat_map(|row| (0..self.width).map(move |col| (col, row)))
            .filter(|&c| !self.is_wall_cell(c))
            .collect()
    }

    pub fn free_neighbors(&self, (col, row): Cell) -> impl Iterator<Item = Cell> + '_ {
        let cand = [
            (col.wrapping_sub(1), row),
            (col + 1, row),
            (col, row.wrapping_sub(1)),
            (col, row + 1),
        ];
        cand.into_iter()
            .filter(move |&(c, r)| c < self.width && r < self.height && !self.is_wall_cell((c, r)))
    }

    /// Distance from `p` to the nearest wall cell (0 inside a wall).
    pub fn wall_distance(&self, p: [f64; 2]) -> f64 {
        if self.is_wall_at(p) {
            return 0.0;
        }
        let (col, row) = self.cell_of(p).expect("free point lies on the grid");
        let mut best = f64::INFINITY;
        let reach = 2usize;
        for r in row.saturating_sub(reach)..=(row + reach).min(self.height - 1) {
            for c in col.saturating_sub(reach)..=(col + reach).min(self.width - 1) {
                if !self.is_wall_cell((c, r)) {
                    continue;
                }
                let x0 = c as f64 * self.cell_size;
                let y0 = r as f64 * self.cell_size;
                let dx = (x0 - p[0]).max(0.0).max(p[0] - (x0 + self.cell_size));
                let dy = (y0 - p[1]).max(0.0).max(p[1] - (y0 + self.cell_size));
                best = best.min((dx * dx + dy * dy).sqrt());
            }
        }
        best
    }

    /// True iff every point on segment `a -> b`, sampled at `spacing`, keeps
    /// at least `margin` from the walls.
    pub fn segment_clear(&self, a: [f64; 2], b: [f64; 2], margin: f64, spacing: f64) -> bool {
        let len = distance(a, b);
        let n = (len / spacing).ceil().max(1.0) as usize;
        (0..=n).all(|k| {
            let t = k as f64 / n as f64;
            let p = [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
            if margin > 0.0 {
                self.wall_distance(p) >= margin
            } else {
                !self.is_wall_at(p)
            }
        })
    }
}

/// True iff any state, or any point on the straight segments between
/// consecutive states, lies inside a wall cell.
///
/// Segments are clipped against every wall cell they can touch, so the
/// result is exact rather than limited by a sampling interval.
pub fn check_collision<S: Scalar>(traj: &Trajectory<S>, map: &MazeMap) -> bool {
    let pts: Vec<[f64; 2]> =
        traj.states.iter().map(|s| [s[0].to_f64_lossy(), s[1].to_f64_lossy()]).collect();
    if pts.iter().any(|&p| map.is_wall_at(p)) {
        return true;
    }
    pts.windows(2).any(|w| map.segment_hits_wall(w[0], w[1]))
}

impl MazeMap {
    /// Exact segment test against the wall cells (closed boxes) overlapping
    /// the segment's bounding box.
    pub fn segment_hits_wall(&self, a: [f64; 2], b: [f64; 2]) -> bool {
        if self.is_wall_at(a) || self.is_wall_at(b) {
            return true;
        }
        let cs = self.cell_size;
        let span = |lo: f64, hi: f64, n: usize| {
            let first = ((lo / cs).floor() as isize - 1).max(0) as usize;
            let last = ((hi / cs).floor() as isize + 1).min(n as isize - 1) as usize;
            first..=last
        };
        for row in span(a[1].min(b[1]), a[1].max(b[1]), self.height) {
            for col in span(a[0].min(b[0]), a[0].max(b[0]), self.width) {
                if !self.is_wall_cell((col, row)) {
                    continue;
                }
                let lo = [col as f64 * cs, row as f64 * cs];
                let hi = [lo[0] + cs, lo[1] + cs];
                if let Some((t0, t1)) = clip_segment(a, b, lo, hi) {
                    if t1 > t0 {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Liang-Barsky clip of `a + t (b - a)`, `t in [0, 1]`, against a box.
fn clip_segment(a: [f64; 2], b: [f64; 2], lo: [f64; 2], hi: [f64; 2]) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for d in 0..2 {
        let delta = b[d] - a[d];
        if delta == 0.0 {
            if a[d] < lo[d] || a[d] > hi[d] {
                return None;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo[d] - a[d]) / delta, (hi[d] - a[d]) / delta);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// A disc-shaped target region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalRegion {
    pub center: [f64; 2],
    pub radius: f64,
}

impl GoalRegion {
    pub fn contains<S: Scalar>(&self, s: State<S>) -> bool {
        distance([s[0].to_f64_lossy(), s[1].to_f64_lossy()], self.center) <= self.radius
    }
}

/// Index of the first goal region the trajectory enters, scanning states in
/// time order.
pub fn task_label<S: Scalar>(traj: &Trajectory<S>, goals: &[GoalRegion]) -> Option<usize> {
    traj.states.iter().find_map(|&s| goals.iter().position(|g| g.contains(s)))
}

/// Discrete-choice maze: three disjoint goal regions reachable from a
/// common start through separate corridors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGoalTask {
    pub map: MazeMap,
    pub start: [f64; 2],
    pub goals: Vec<GoalRegion>,
}

impl MultiGoalTask {
    pub fn fork() -> Self {
        let map = MazeMap::parse("maze-fork", FORK_MAZE).expect("bundled asset is valid");
        let cs = map.cell_size;
        let start = map.cell_center((5, 7));
        let radius = 0.45 * cs;
        let goals = [(1, 1), (5, 1), (9, 1)]
            .into_iter()
            .map(|c| GoalRegion { center: map.cell_center(c), radius })
            .collect();
        Self { map, start, goals }
    }

    /// The same task with the maze rescaled to `cell_size`.
    pub fn with_cell_size(&self, cell_size: f64) -> Result<Self> {
        let map = self.map.with_cell_size(cell_size)?;
        let k = cell_size / self.map.cell_size;
        let scale = |p: [f64; 2]| [p[0] * k, p[1] * k];
        let goals = self.goals.iter().map(|g| GoalRegion { center: scale(g.center), radius: g.radius * k }).collect();
        Ok(Self { map, start: scale(self.start), goals })
    }
}
