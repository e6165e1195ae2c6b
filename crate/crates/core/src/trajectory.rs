//! Fixed-horizon 2D trajectories and the workspace normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A planar state `(x, y)` in workspace units.
pub type State<S> = [S; 2];

/// A sequence of `T` planar states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S> {
    pub states: Vec<State<S>>,
}

impl<S: Scalar> Trajectory<S> {
    pub fn new(states: Vec<State<S>>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidInput("trajectory must contain at least one state".into()));
        }
        if states.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("trajectory coordinates must be finite".into()));
        }
        Ok(Self { states })
    }

    /// Builds a trajectory from an interleaved `x0, y0, x1, y1, ...` buffer.
    pub fn from_flat(flat: &[S]) -> Self {
        debug_assert!(flat.len().is_multiple_of(2));
        Self { states: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect() }
    }

    pub fn to_flat(&self) -> Vec<S> {
        self.states.iter().flat_map(|s| [s[0], s[1]]).collect()
    }

    /// The stationary trajectory that stays at `state` for `horizon` steps.
    pub fn constant(state: State<S>, horizon: usize) -> Self {
        Self { states: vec![state; horizon] }
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    pub fn first(&self) -> State<S> {
        self.states[0]
    }

    pub fn last(&self) -> State<S> {
        self.states[self.states.len() - 1]
    }

    pub fn cast<U: Scalar>(&self) -> Trajectory<U> {
        Trajectory {
            states: self
                .states
                .iter()
                .map(|s| [U::of(s[0].to_f64_lossy()), U::of(s[1].to_f64_lossy())])
                .collect(),
        }
    }
}

pub fn distance<S: Scalar>(a: State<S>, b: State<S>) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

/// Axis-aligned workspace box; maps workspace coordinates to `[-1, 1]` per
/// dimension and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
}

impl Bounds {
    pub fn new(lo: [f64; 2], hi: [f64; 2]) -> Result<Self> {
        if !(lo[0] < hi[0] && lo[1] < hi[1]) || lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("degenerate bounds {lo:?}..{hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// Bounds whose normalized form is the identity map.
    pub fn unit() -> Self {
        Self { lo: [-1.0, -1.0], hi: [1.0, 1.0] }
    }

    /// Workspace units per normalized unit along each axis.
    pub fn half_extent(&self) -> [f64; 2] {
        [(self.hi[0] - self.lo[0]) * 0.5, (self.hi[1] - self.lo[1]) * 0.5]
    }

    pub fn center(&self) -> [f64; 2] {
        [(self.hi[0] + self.lo[0]) * 0.5, (self.hi[1] + self.lo[1]) * 0.5]
    }

    pub fn contains<S: Scalar>(&self, s: State<S>) -> bool {
        (0..2).all(|d| {
            let v = s[d].to_f64_lossy();
            v >= self.lo[d] && v <= self.hi[d]
        })
    }

    pub fn clamp<S: Scalar>(&self, s: State<S>) -> State<S> {
        [
            s[0].max(S::of(self.lo[0])).min(S::of(self.hi[0])),
            s[1].max(S::of(self.lo[1])).min(S::of(self.hi[1])),
        ]
    }

    pub fn normalize_state<S: Scalar>(&self, s: State<S>) -> State<S> {
        let c = self.center();
        let h = self.half_extent();
        [(s[0] - S::of(c[0])) / S::of(h[0]), (s[1] - S::of(c[1])) / S::of(h[1])]
    }

    pub fn denormalize_state<S: Scalar>(&self, s: State<S>) -> State<S> {
        let c = self.center();
        let h = self.half_extent();
        [s[0] * S::of(h[0]) + S::of(c[0]), s[1] * S::of(h[1]) + S::of(c[1])]
    }

    pub fn normalize<S: Scalar>(&self, traj: &Trajectory<S>) -> Trajectory<S> {
        Trajectory { states: traj.states.iter().map(|&s| self.normalize_state(s)).collect() }
    }

    pub fn denormalize<S: Scalar>(&self, traj: &Trajectory<S>) -> Trajectory<S> {
        Trajectory { states: traj.states.iter().map(|&s| self.denormalize_state(s)).collect() }
    }

    /// Normalizes an interleaved buffer in place.
    pub fn normalize_flat<S: Scalar>(&self, flat: &mut [S]) {
        for c in flat.chunks_exact_mut(2) {
            let n = self.normalize_state([c[0], c[1]]);
            c[0] = n[0];
            c[1] = n[1];
        }
    }

    pub fn denormalize_flat<S: Scalar>(&self, flat: &mut [S]) {
        for c in flat.chunks_exact_mut(2) {
            let n = self.denormalize_state([c[0], c[1]]);
            c[0] = n[0];
            c[1] = n[1];
        }
    }

    /// Chain rule for a workspace-space gradient: `d/dnorm = d/dws * half_extent`.
    pub fn gradient_to_normalized<S: Scalar>(&self, grad: &mut [S]) {
        let h = self.half_extent();
        for c in grad.chunks_exact_mut(2) {
            c[0] *= S::of(h[0]);
            c[1] *= S::of(h[1]);
        }
    }
}
