//! Interaction inputs and the alignment costs they induce.
//!
//! A point goal scores the mean distance of all states to the goal; a sketch
//! scores the summed per-step distance to the sketch resampled to the
//! trajectory horizon. A nudge is not a cost at all: it is an overwrite of
//! the trajectory prefix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::trajectory::{distance, Bounds, State, Trajectory};

/// A user interaction in workspace coordinates (wire format of the service).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Interaction {
    Point { z: [f64; 2] },
    Sketch { points: Vec<[f64; 2]> },
    Nudge { prefix: Vec<[f64; 2]> },
}

impl Interaction {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Point { .. } => "point",
            Self::Sketch { .. } => "sketch",
            Self::Nudge { .. } => "nudge",
        }
    }

    fn points(&self) -> &[[f64; 2]] {
        match self {
            Self::Point { z } => std::slice::from_ref(z),
            Self::Sketch { points } => points,
            Self::Nudge { prefix } => prefix,
        }
    }

    /// Checks finiteness, workspace bounds and the per-kind length rules.
    pub fn validate(&self, bounds: &Bounds) -> Result<()> {
        let pts = self.points();
        if let Some(p) = pts.iter().find(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidInput(format!("non-finite coordinate {p:?}")));
        }
        if let Some(p) = pts.iter().find(|p| !bounds.contains(**p)) {
            return Err(Error::InvalidInput(format!("coordinate {p:?} outside the workspace")));
        }
        match self {
            Self::Sketch { points } if points.len() < 2 => {
                Err(Error::InvalidInput("a sketch needs at least two points".into()))
            }
            Self::Sketch { points } if arc_length(points) == 0.0 => {
                Err(Error::InvalidInput("sketch has zero arc length".into()))
            }
            Self::Nudge { prefix } if prefix.is_empty() => {
                Err(Error::InvalidInput("a nudge needs at least one state".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `(1/T) sum_t |s_t - z|`.
pub fn point_cost<S: Scalar>(traj: &Trajectory<S>, z: State<S>) -> S {
    let sum: S = traj.states.iter().map(|&s| distance(s, z)).sum();
    sum / S::of(traj.horizon() as f64)
}

/// Smallest distance of any state to `z`. Evaluation only; its gradient is
/// a single-state spike and is never used for guidance.
pub fn point_min_distance<S: Scalar>(traj: &Trajectory<S>, z: State<S>) -> S {
    traj.states.iter().map(|&s| distance(s, z)).fold(S::infinity(), S::min)
}

/// `sum_t |s_t - target_t|`.
pub fn sketch_cost<S: Scalar>(traj: &Trajectory<S>, target: &Trajectory<S>) -> Result<S> {
    if traj.horizon() != target.horizon() {
        return Err(Error::DimensionMismatch { expected: target.horizon(), got: traj.horizon() });
    }
    Ok(traj.states.iter().zip(&target.states).map(|(&s, &t)| distance(s, t)).sum())
}

fn arc_length(points: &[[f64; 2]]) -> f64 {
    points.windows(2).map(|w| distance(w[0], w[1])).sum()
}

/// Resamples a polyline to `horizon` points equally spaced in arc length.
/// Both endpoints are kept exactly.
pub fn resample_sketch<S: Scalar>(points: &[State<S>], horizon: usize) -> Result<Trajectory<S>> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("a sketch needs at least two points".into()));
    }
    if horizon < 2 {
        return Err(Error::InvalidInput("horizon must be at least 2".into()));
    }
    let pts: Vec<[f64; 2]> = points.iter().map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()]).collect();
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + distance(w[0], w[1]));
    }
    let total = *cum.last().unwrap();
    if total == 0.0 {
        return Err(Error::InvalidInput("sketch has zero arc length".into()));
    }
    let mut out = Vec::with_capacity(horizon);
    let mut seg = 0;
    for k in 0..horizon {
        if k == 0 {
            out.push(points[0]);
            continue;
        }
        if k == horizon - 1 {
            out.push(points[points.len() - 1]);
            continue;
        }
        let s = total * k as f64 / (horizon - 1) as f64;
        while seg + 2 < cum.len() && cum[seg + 1] < s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let u = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (pts[seg], pts[seg + 1]);
        out.push([S::of(a[0] + u * (b[0] - a[0])), S::of(a[1] + u * (b[1] - a[1]))]);
    }
    Ok(Trajectory { states: out })
}

/// An energy over trajectories that samplers can steer along.
pub trait AlignmentCost<S: Scalar>: Sync {
    /// Cost in workspace units.
    fn cost(&self, traj: &Trajectory<S>) -> Result<S>;

    /// Gradient with respect to the workspace coordinates, flattened.
    fn gradient(&self, traj: &Trajectory<S>) -> Result<Vec<S>>;

    /// The trajectory-shaped target used to bias the initial noise.
    fn target(&self, horizon: usize) -> Result<Trajectory<S>>;
}

/// Point goal or resampled sketch.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective<S> {
    Point(State<S>),
    Sketch(Trajectory<S>),
}

impl<S: Scalar> Objective<S> {
    pub fn from_interaction(interaction: &Interaction, horizon: usize) -> Result<Self> {
        match interaction {
            Interaction::Point { z } => Ok(Self::Point([S::of(z[0]), S::of(z[1])])),
            Interaction::Sketch { points } => {
                let pts: Vec<State<S>> = points.iter().map(|p| [S::of(p[0]), S::of(p[1])]).collect();
                Ok(Self::Sketch(resample_sketch(&pts, horizon)?))
            }
            Interaction::Nudge { .. } => Err(Error::UnsupportedObjective("nudge")),
        }
    }

    /// Mean per-state distance to the target, comparable across kinds.
    pub fn mean_distance(&self, traj: &Trajectory<S>) -> Result<S> {
        Ok(match self {
            Self::Point(z) => point_cost(traj, *z),
            Self::Sketch(t) => sketch_cost(traj, t)? / S::of(traj.horizon() as f64),
        })
    }
}

/// `d|s - t|/ds`, zero at coincidence.
fn unit_toward<S: Scalar>(s: State<S>, t: State<S>) -> State<S> {
    let d = distance(s, t);
    if d == S::zero() {
        [S::zero(), S::zero()]
    } else {
        [(s[0] - t[0]) / d, (s[1] - t[1]) / d]
    }
}

impl<S: Scalar> AlignmentCost<S> for Objective<S> {
    fn cost(&self, traj: &Trajectory<S>) -> Result<S> {
        match self {
            Self::Point(z) => Ok(point_cost(traj, *z)),
            Self::Sketch(t) => sketch_cost(traj, t),
        }
    }

    fn gradient(&self, traj: &Trajectory<S>) -> Result<Vec<S>> {
        match self {
            Self::Point(z) => {
                let inv = S::one() / S::of(traj.horizon() as f64);
                Ok(traj.states.iter().flat_map(|&s| unit_toward(s, *z).map(|g| g * inv)).collect())
            }
            Self::Sketch(t) => {
                if traj.horizon() != t.horizon() {
                    return Err(Error::DimensionMismatch { expected: t.horizon(), got: traj.horizon() });
                }
                Ok(traj.states.iter().zip(&t.states).flat_map(|(&s, &g)| unit_toward(s, g)).collect())
            }
        }
    }

    fn target(&self, horizon: usize) -> Result<Trajectory<S>> {
        match self {
            Self::Point(z) => Ok(Trajectory::constant(*z, horizon)),
            Self::Sketch(t) if t.horizon() == horizon => Ok(t.clone()),
            Self::Sketch(t) => Err(Error::DimensionMismatch { expected: horizon, got: t.horizon() }),
        }
    }
}

/// Gradient of the objective an interaction induces. Nudges have none.
pub fn cost_gradient<S: Scalar>(traj: &Trajectory<S>, interaction: &Interaction) -> Result<Vec<S>> {
    Objective::from_interaction(interaction, traj.horizon())?.gradient(traj)
}

/// Overwrites the first `k` states with the nudge prefix.
pub fn apply_nudge<S: Scalar>(traj: &Trajectory<S>, prefix: &[State<S>]) -> Result<Trajectory<S>> {
    if prefix.len() > traj.horizon() {
        return Err(Error::InvalidInput(format!(
            "nudge of length {} exceeds horizon {}",
            prefix.len(),
            traj.horizon()
        )));
    }
    let mut states = prefix.to_vec();
    states.extend_from_slice(&traj.states[prefix.len()..]);
    Ok(Trajectory { states })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(pts: &[[f64; 2]]) -> Trajectory<f64> {
        Trajectory::new(pts.to_vec()).unwrap()
    }

    #[test]
    fn point_cost_examples() {
        assert_eq!(point_cost(&traj(&[[1.0, 2.0]; 5]), [1.0, 2.0]), 0.0);
        assert_eq!(point_cost(&traj(&[[1.0, 0.0], [3.0, 0.0]]), [0.0, 0.0]), 2.0);
    }

    #[test]
    fn sketch_cost_examples() {
        let target = traj(&[[0.5, 0.5]; 64]);
        assert_eq!(sketch_cost(&target, &target).unwrap(), 0.0);
        let shifted = traj(&[[0.6, 0.5]; 64]);
        assert!((sketch_cost(&shifted, &target).unwrap() - 6.4).abs() < 1e-12);
        assert!(sketch_cost(&traj(&[[0.0, 0.0]; 3]), &target).is_err());
    }

    #[test]
    fn resample_midpoint_and_identity() {
        let r = resample_sketch(&[[0.0, 0.0], [1.0, 0.0]], 3).unwrap();
        assert_eq!(r.states, vec![[0.0, 0.0], [0.5, 0.0], [1.0, 0.0]]);
        let uniform: Vec<[f64; 2]> = (0..64).map(|k| [k as f64 * 0.1, 1.0]).collect();
        let r = resample_sketch(&uniform, 64).unwrap();
        for (a, b) in r.states.iter().zip(&uniform) {
            assert!(distance(*a, *b) < 1e-9);
        }
        assert!(resample_sketch(&[[1.0, 1.0], [1.0, 1.0]], 8).is_err());
        assert!(resample_sketch(&[[1.0, 1.0]], 8).is_err());
    }

    #[test]
    fn gradient_examples() {
        // Point: single state at distance d gives the unit vector scaled by 1/T.
        let t = traj(&[[3.0, 4.0], [0.0, 0.0]]);
        let g = Objective::Point([0.0, 0.0]).gradient(&t).unwrap();
        assert_eq!(g, vec![0.3, 0.4, 0.0, 0.0]);
        let target = traj(&[[1.0, 1.0], [2.0, 2.0]]);
        let g = Objective::Sketch(target.clone()).gradient(&target).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(matches!(
            cost_gradient(&t, &Interaction::Nudge { prefix: vec![[0.0, 0.0]] }),
            Err(Error::UnsupportedObjective(_))
        ));
    }

    #[test]
    fn nudge_examples() {
        let t = traj(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]);
        let full = [[5.0, 5.0], [6.0, 6.0], [7.0, 7.0]];
        assert_eq!(apply_nudge(&t, &full).unwrap().states, full.to_vec());
        let one = apply_nudge(&t, &[[9.0, 9.0]]).unwrap();
        assert_eq!(one.states, vec![[9.0, 9.0], [1.0, 1.0], [2.0, 2.0]]);
        assert!(apply_nudge(&t, &[[0.0, 0.0]; 4]).is_err());
    }

    #[test]
    fn wire_format() {
        let p: Interaction = serde_json::from_str(r#"{"kind":"point","z":[1.0,2.0]}"#).unwrap();
        assert_eq!(p, Interaction::Point { z: [1.0, 2.0] });
        let s = Interaction::Sketch { points: vec![[0.0, 0.0], [1.0, 1.0]] };
        assert_eq!(serde_json::to_string(&s).unwrap(), r#"{"kind":"sketch","points":[[0.0,0.0],[1.0,1.0]]}"#);
        let n: Interaction = serde_json::from_str(r#"{"kind":"nudge","prefix":[[0.5,0.5]]}"#).unwrap();
        assert_eq!(n.kind(), "nudge");
    }

    #[test]
    fn validation() {
        let b = Bounds::new([0.0, 0.0], [1.0, 1.0]).unwrap();
        assert!(Interaction::Point { z: [0.5, 0.5] }.validate(&b).is_ok());
        assert!(Interaction::Point { z: [1.5, 0.5] }.validate(&b).is_err());
        assert!(Interaction::Point { z: [f64::NAN, 0.5] }.validate(&b).is_err());
        assert!(Interaction::Sketch { points: vec![[0.2, 0.2]; 3] }.validate(&b).is_err());
        assert!(Interaction::Nudge { prefix: vec![] }.validate(&b).is_err());
    }

    fn arb_traj(n: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), n)
    }

    proptest! {
        #[test]
        fn costs_are_translation_equivariant(a in arb_traj(16), b in arb_traj(16), z in prop::array::uniform2(-5.0..5.0f64), d in prop::array::uniform2(-3.0..3.0f64)) {
            let (ta, tb) = (traj(&a), traj(&b));
            let shift = |t: &Trajectory<f64>| traj(&t.states.iter().map(|s| [s[0] + d[0], s[1] + d[1]]).collect::<Vec<_>>());
            let c0 = sketch_cost(&ta, &tb).unwrap();
            let c1 = sketch_cost(&shift(&ta), &shift(&tb)).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-9);
            let p0 = point_cost(&ta, z);
            let p1 = point_cost(&shift(&ta), [z[0] + d[0], z[1] + d[1]]);
            prop_assert!((p0 - p1).abs() < 1e-9);
            prop_assert!(c0 >= 0.0 && p0 >= 0.0);
        }

        #[test]
        fn resampling_is_idempotent_on_uniform_polylines(turns in prop::collection::vec(-1.5..1.5f64, 63), step in 0.01..0.2f64) {
            // A polyline with equal segment lengths is a fixed point of the resampler.
            let mut heading = 0.0f64;
            let mut pts = vec![[0.0, 0.0]];
            for t in &turns {
                heading += t;
                let p: [f64; 2] = *pts.last().unwrap();
                pts.push([p[0] + step * heading.cos(), p[1] + step * heading.sin()]);
            }
            let once = resample_sketch(&pts, 64).unwrap();
            for (a, b) in once.states.iter().zip(&pts) {
                prop_assert!(distance(*a, *b) < 1e-6);
            }
            let twice = resample_sketch(&once.states, 64).unwrap();
            for (a, b) in once.states.iter().zip(&twice.states) {
                prop_assert!(distance(*a, *b) < 1e-6);
            }
        }

        #[test]
        fn resampling_keeps_endpoints(pts in prop::collection::vec(prop::array::uniform2(-5.0..5.0f64), 2..12), h in 2usize..80) {
            prop_assume!(arc_length(&pts) > 1e-3);
            let once = resample_sketch(&pts, h).unwrap();
            prop_assert_eq!(once.horizon(), h);
            prop_assert_eq!(once.states[0], pts[0]);
            prop_assert_eq!(once.last(), pts[pts.len() - 1]);
        }

        #[test]
        fn nudge_suffix_is_untouched(a in arb_traj(12), k in 1usize..12) {
            let t = traj(&a);
            let prefix = vec![[0.25, -0.25]; k];
            let out = apply_nudge(&t, &prefix).unwrap();
            prop_assert_eq!(&out.states[k..], &t.states[k..]);
            prop_assert_eq!(&out.states[..k], &prefix[..]);
        }
    }
}
