//! Per-connection state and request preparation, independent of transport.

use serde_json::Value;
use steer_core::diffusion::DiffusionPolicy;
use steer_core::maze::MazeMap;
use steer_core::objectives::{Interaction, Objective};
use steer_core::steering::{steer, GuidanceConfig, Method, Observer, Request, SteeredBatch};
use steer_core::trajectory::Bounds;

use crate::protocol::ErrorCode;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub tick_hz: f64,
    /// Sampler settings used where a steer request leaves fields out.
    pub defaults: GuidanceConfig,
    /// OP prefix length taken from the start of a sketch.
    pub sketch_nudge_states: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            tick_hz: 7.0,
            defaults: GuidanceConfig::new(Method::Ss).with_beta(60.0).with_mcmc(4),
            sketch_nudge_states: 16,
        }
    }
}

/// Position along the trajectory being executed.
#[derive(Debug, Clone, PartialEq)]
pub struct Cursor {
    pub plan: Vec<[f64; 2]>,
    pub t: usize,
}

#[derive(Debug, Clone)]
pub struct Session {
    pub id: u64,
    pub policy_id: String,
    /// Condition state for the next request.
    pub cond: [f64; 2],
    pub last_interaction: Option<Interaction>,
    seed_counter: u64,
    pub batch: Option<SteeredBatch<f32>>,
    pub cursor: Option<Cursor>,
}

impl Session {
    pub fn new(id: u64, policy_id: String, cond: [f64; 2], seed: u64) -> Self {
        Self { id, policy_id, cond, last_interaction: None, seed_counter: seed, batch: None, cursor: None }
    }

    /// Returns the current counter and advances it.
    pub fn next_seed(&mut self) -> u64 {
        let s = self.seed_counter;
        self.seed_counter += 1;
        s
    }

    pub fn seed_counter(&self) -> u64 {
        self.seed_counter
    }

    pub fn reset(&mut self, state: [f64; 2], seed: u64) {
        self.cond = state;
        self.seed_counter = seed;
        self.last_interaction = None;
        self.batch = None;
        self.cursor = None;
    }
}

pub type Rejection = (ErrorCode, String);

/// A validated request, ready to run off the protocol path.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerJob {
    pub cond: [f32; 2],
    pub objective: Option<Objective<f32>>,
    pub nudge: Option<Vec<[f32; 2]>>,
    pub config: GuidanceConfig,
}

impl SteerJob {
    pub fn run(
        &self,
        policy: &DiffusionPolicy<f32>,
        map: &MazeMap,
        observer: &mut dyn Observer<f32>,
    ) -> steer_core::Result<SteeredBatch<f32>> {
        let req = Request {
            cond: self.cond,
            objective: self.objective.as_ref().map(|o| o as _),
            nudge: self.nudge.as_deref(),
            map: Some(map),
        };
        steer(policy, &req, &self.config, observer)
    }
}

/// Service defaults with the client's fields laid over them.
pub fn merge_config(defaults: &GuidanceConfig, patch: Option<&Value>) -> Result<(GuidanceConfig, bool), Rejection> {
    let mut base = serde_json::to_value(defaults).expect("config serializes");
    let mut explicit_seed = false;
    match patch {
        None | Some(Value::Null) => {}
        Some(Value::Object(fields)) => {
            for (k, v) in fields {
                explicit_seed |= k == "seed";
                base[k] = v.clone();
            }
        }
        Some(other) => return Err((ErrorCode::InvalidConfig, format!("config must be an object, got {other}"))),
    }
    let cfg = serde_json::from_value(base).map_err(|e| (ErrorCode::InvalidConfig, e.to_string()))?;
    Ok((cfg, explicit_seed))
}

fn f32_path(p: &[[f64; 2]]) -> Vec<[f32; 2]> {
    p.iter().map(|s| [s[0] as f32, s[1] as f32]).collect()
}

/// Validates a steer request against the session and policy. Advances the
/// seed counter on success.
pub fn prepare_steer(
    session: &mut Session,
    interaction: &Interaction,
    patch: Option<&Value>,
    svc: &ServiceConfig,
    bounds: &Bounds,
    horizon: usize,
    inference_steps: usize,
) -> Result<SteerJob, Rejection> {
    let (mut config, explicit_seed) = merge_config(&svc.defaults, patch)?;
    config.validate(inference_steps).map_err(|e| (ErrorCode::InvalidConfig, e.to_string()))?;
    interaction.validate(bounds).map_err(|e| (ErrorCode::InvalidInteraction, e.to_string()))?;
    let method = config.method;
    let (objective, nudge) = match interaction {
        Interaction::Nudge { prefix } => {
            if method != Method::Op {
                return Err((ErrorCode::InvalidRequest, "nudge requires op".into()));
            }
            if prefix.len() > horizon {
                return Err((ErrorCode::InvalidInteraction, format!("nudge longer than the horizon {horizon}")));
            }
            (None, Some(f32_path(prefix)))
        }
        _ => {
            let o = Objective::<f32>::from_interaction(interaction, horizon)
                .map_err(|e| (ErrorCode::InvalidInteraction, e.to_string()))?;
            let nudge = match (&o, method) {
                (Objective::Sketch(t), Method::Op) => Some(t.states[..svc.sketch_nudge_states.clamp(1, horizon)].to_vec()),
                (Objective::Point(_), Method::Op) => {
                    return Err((ErrorCode::InvalidRequest, "op requires a nudge or sketch".into()))
                }
                _ => None,
            };
            (Some(o), nudge)
        }
    };
    let seed = session.next_seed();
    if !explicit_seed {
        config.seed = seed;
    }
    session.last_interaction = Some(interaction.clone());
    let cond = [session.cond[0] as f32, session.cond[1] as f32];
    Ok(SteerJob { cond, objective, nudge, config })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds() -> Bounds {
        Bounds::new([0.0, 0.0], [4.0, 3.0]).unwrap()
    }

    fn prep(s: &mut Session, i: &Interaction, patch: Value) -> Result<SteerJob, Rejection> {
        prepare_steer(s, i, Some(&patch), &ServiceConfig::default(), &bounds(), 16, 10)
    }

    #[test]
    fn seeds_increase_and_explicit_seed_wins() {
        let mut s = Session::new(0, "p".into(), [1.0, 1.0], 5);
        let point = Interaction::Point { z: [2.0, 2.0] };
        let a = prep(&mut s, &point, serde_json::json!({})).unwrap();
        let b = prep(&mut s, &point, serde_json::json!({"method": "gd", "beta": 3})).unwrap();
        assert_eq!((a.config.seed, b.config.seed), (5, 6));
        assert_eq!(b.config.method, Method::Gd);
        let c = prep(&mut s, &point, serde_json::json!({"seed": 99})).unwrap();
        assert_eq!(c.config.seed, 99);
        assert_eq!(s.seed_counter(), 8);
        // Defaults survive a partial patch.
        assert_eq!(a.config.mcmc_steps, 4);
    }

    #[test]
    fn rejections() {
        let mut s = Session::new(0, "p".into(), [1.0, 1.0], 0);
        let nudge = Interaction::Nudge { prefix: vec![[1.0, 1.0], [1.5, 1.0]] };
        let (code, detail) = prep(&mut s, &nudge, serde_json::json!({"method": "ss"})).unwrap_err();
        assert_eq!((code, detail.as_str()), (ErrorCode::InvalidRequest, "nudge requires op"));
        assert!(prep(&mut s, &nudge, serde_json::json!({"method": "op"})).unwrap().nudge.is_some());
        let out = Interaction::Point { z: [9.0, 1.0] };
        assert_eq!(prep(&mut s, &out, serde_json::json!({})).unwrap_err().0, ErrorCode::InvalidInteraction);
        let point = Interaction::Point { z: [2.0, 1.0] };
        assert_eq!(prep(&mut s, &point, serde_json::json!({"method": "op"})).unwrap_err().0, ErrorCode::InvalidRequest);
        assert_eq!(prep(&mut s, &point, serde_json::json!({"mcmc_steps": 0})).unwrap_err().0, ErrorCode::InvalidConfig);
        assert_eq!(prep(&mut s, &point, serde_json::json!([1])).unwrap_err().0, ErrorCode::InvalidConfig);
        // Only the accepted request advanced the counter.
        assert_eq!(s.seed_counter(), 1);
    }

    #[test]
    fn sketch_gives_op_a_prefix() {
        let mut s = Session::new(0, "p".into(), [1.0, 1.0], 0);
        let sketch = Interaction::Sketch { points: vec![[1.0, 1.0], [3.0, 1.0]] };
        let job = prep(&mut s, &sketch, serde_json::json!({"method": "op"})).unwrap();
        assert_eq!(job.nudge.unwrap().len(), 16);
        assert!(matches!(job.objective, Some(Objective::Sketch(_))));
    }
}
