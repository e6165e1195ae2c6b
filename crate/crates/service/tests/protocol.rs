use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use futures_util::{SinkExt, StreamExt};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use steer_core::diffusion::{DiffusionPolicy, PolicyConfig};
use steer_core::maze::MazeMap;
use steer_service::protocol::ServerMessage;
use steer_service::{router, Service, ServiceConfig};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};
use tower::ServiceExt;

const ROOM: &str = "cell_size=1\n########\n#......#\n#......#\n#......#\n#......#\n#......#\n#......#\n########\n";
const HORIZON: usize = 32;

fn service(tick_hz: f64) -> Arc<Service> {
    let map = MazeMap::parse("room", ROOM).unwrap();
    let mut cfg = PolicyConfig::for_bounds(map.bounds(), HORIZON);
    cfg.hidden = vec![32, 32];
    let mut policy = DiffusionPolicy::<f32>::new(cfg, 3).unwrap();
    // A zero head predicts the workspace center, so every sample stays in the room.
    policy.net.zero_output_layer();
    let config = ServiceConfig { tick_hz, ..ServiceConfig::default() };
    Arc::new(Service::new(policy, map, "test".into(), config, [4.0, 4.0]).unwrap())
}

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

async fn connect(svc: Arc<Service>) -> Ws {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(svc)).await.unwrap() });
    let (ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    ws
}

async fn send(ws: &mut Ws, v: Value) {
    ws.send(Message::Text(v.to_string().into())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(t.as_str()).unwrap();
        }
    }
}

/// Reads frames until a batch or error for `id` arrives.
async fn until_result(ws: &mut Ws, id: i64) -> (Vec<ServerMessage>, ServerMessage) {
    let mut seen = Vec::new();
    loop {
        let m = recv(ws).await;
        let done = matches!(&m, ServerMessage::Batch { .. } | ServerMessage::Error { .. }) && m.id() == &Some(json!(id));
        if done {
            return (seen, m);
        }
        seen.push(m);
    }
}

fn steer(id: i64, interaction: Value, config: Value) -> Value {
    json!({"type": "steer", "id": id, "interaction": interaction, "config": config})
}

fn point(z: [f64; 2]) -> Value {
    json!({"kind": "point", "z": z})
}

async fn reset(ws: &mut Ws, id: i64, seed: u64) {
    send(ws, json!({"type": "reset", "id": id, "state": [4.0, 4.0], "seed": seed})).await;
    let m = recv(ws).await;
    assert!(matches!(m, ServerMessage::Tick { t: 0, .. }), "{m:?}");
    assert_eq!(m.id(), &Some(json!(id)));
}

fn error_code(m: &ServerMessage) -> &str {
    match m {
        ServerMessage::Error { code, .. } => code,
        other => panic!("expected an error, got {other:?}"),
    }
}

#[tokio::test]
async fn map_and_health() {
    let svc = service(7.0);
    let app = router(svc.clone());
    let res = app.clone().oneshot(Request::get("/map").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    let body = res.into_body().collect().await.unwrap().to_bytes();
    let back = MazeMap::parse("room", std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(back, svc.map);
    let res = app.oneshot(Request::get("/health").body(Body::empty()).unwrap()).await.unwrap();
    let body = res.into_body().collect().await.unwrap().to_bytes();
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["checkpoint"], "test");
    assert_eq!(v["horizon"], HORIZON);
    assert_eq!(v["tick_hz"], 7.0);
}

#[tokio::test]
async fn point_request_streams_every_step_then_a_batch() {
    let mut ws = connect(service(7.0)).await;
    reset(&mut ws, 0, 1).await;
    send(&mut ws, steer(1, point([2.0, 2.0]), json!({"method": "ss", "beta": 60, "batch": 8}))).await;
    let (frames, result) = until_result(&mut ws, 1).await;
    let steps: Vec<usize> = frames
        .iter()
        .map(|f| match f {
            ServerMessage::Snapshot { step, trajectories, id } => {
                assert_eq!(id, &Some(json!(1)));
                assert_eq!(trajectories.len(), 8);
                *step
            }
            other => panic!("unexpected {other:?}"),
        })
        .collect();
    assert_eq!(steps, (0..10).collect::<Vec<_>>());
    let ServerMessage::Batch { trajectories, costs, ranking, seed, .. } = result else { panic!("{result:?}") };
    assert_eq!(trajectories.len(), 8);
    assert!(trajectories.iter().all(|t| t.len() == HORIZON));
    assert!(costs.iter().all(Option::is_some));
    let mut r = ranking.clone();
    r.sort_unstable();
    assert_eq!(r, (0..8).collect::<Vec<_>>());
    assert_eq!(seed, 1);
}

#[tokio::test]
async fn request_errors() {
    let mut ws = connect(service(7.0)).await;
    let nudge = json!({"kind": "nudge", "prefix": [[4.0, 4.0], [4.2, 4.0]]});
    send(&mut ws, steer(1, nudge, json!({"method": "ss"}))).await;
    let m = recv(&mut ws).await;
    assert_eq!(error_code(&m), "invalid_request");
    assert!(matches!(&m, ServerMessage::Error { detail, .. } if detail == "nudge requires op"));
    assert_eq!(m.id(), &Some(json!(1)));

    send(&mut ws, json!({"type": "execute", "id": 2, "index": 0})).await;
    assert_eq!(error_code(&recv(&mut ws).await), "no_batch");

    send(&mut ws, steer(3, point([40.0, 2.0]), json!({}))).await;
    assert_eq!(error_code(&recv(&mut ws).await), "invalid_interaction");

    send(&mut ws, steer(4, point([2.0, 2.0]), json!({"method": "warp"}))).await;
    assert_eq!(error_code(&recv(&mut ws).await), "invalid_config");

    send(&mut ws, json!({"type": "fly", "id": 5})).await;
    let m = recv(&mut ws).await;
    assert_eq!(error_code(&m), "bad_message");
    assert_eq!(m.id(), &Some(json!(5)));

    send(&mut ws, steer(6, point([2.0, 2.0]), json!({"method": "rs", "batch": 4}))).await;
    until_result(&mut ws, 6).await;
    send(&mut ws, json!({"type": "execute", "id": 7, "index": 4})).await;
    assert_eq!(error_code(&recv(&mut ws).await), "index_out_of_range");
}

#[tokio::test]
async fn newer_request_cancels_the_running_one() {
    let mut ws = connect(service(7.0)).await;
    send(&mut ws, steer(1, point([2.0, 2.0]), json!({"method": "ss", "batch": 20000, "mcmc_steps": 8}))).await;
    send(&mut ws, steer(2, point([6.0, 6.0]), json!({"method": "rs", "batch": 4}))).await;
    let mut cancelled = false;
    loop {
        let m = recv(&mut ws).await;
        match &m {
            ServerMessage::Error { code, .. } if m.id() == &Some(json!(1)) => {
                assert_eq!(code, "cancelled");
                cancelled = true;
            }
            ServerMessage::Batch { trajectories, .. } => {
                assert_eq!(m.id(), &Some(json!(2)), "the superseded request must not complete");
                assert_eq!(trajectories.len(), 4);
                break;
            }
            ServerMessage::Snapshot { .. } => assert!(!cancelled || m.id() == &Some(json!(2))),
            other => panic!("unexpected {other:?}"),
        }
    }
    assert!(cancelled, "the cancellation notice precedes the newer batch");
}

#[tokio::test]
async fn execute_walks_the_plan_and_nudge_replans_from_the_current_state() {
    let mut ws = connect(service(200.0)).await;
    reset(&mut ws, 0, 3).await;
    send(&mut ws, steer(1, point([2.0, 2.0]), json!({"method": "rs", "batch": 4}))).await;
    let (_, batch) = until_result(&mut ws, 1).await;
    let ServerMessage::Batch { trajectories, collisions, .. } = batch else { panic!() };
    let k = collisions.iter().position(|c| !c).expect("a free member");
    send(&mut ws, json!({"type": "execute", "id": 2, "index": k})).await;
    for t in 0..HORIZON {
        let m = recv(&mut ws).await;
        let ServerMessage::Tick { id, state, t: tt, collision } = m else { panic!("{m:?}") };
        assert_eq!((id, tt), (Some(json!(2)), t));
        assert_eq!(state, trajectories[k][t]);
        assert!(!collision);
    }

    // Execute again and nudge part way through.
    send(&mut ws, json!({"type": "execute", "id": 3, "index": k})).await;
    let mut at = [0.0; 2];
    for t in 0..=20 {
        let ServerMessage::Tick { state, .. } = recv(&mut ws).await else { panic!() };
        assert_eq!(state, trajectories[k][t]);
        at = state;
    }
    let prefix = vec![at, [at[0] + 0.2, at[1]], [at[0] + 0.4, at[1] + 0.1]];
    send(&mut ws, json!({"type": "nudge_live", "id": 4, "prefix": prefix})).await;
    let (frames, result) = until_result(&mut ws, 4).await;
    assert!(frames.iter().all(|f| f.id() == &Some(json!(3)) || matches!(f, ServerMessage::Snapshot { .. })));
    let ServerMessage::Batch { trajectories: plans, executed, .. } = result else { panic!("{result:?}") };
    let plan = &plans[executed];
    for (s, p) in plan.iter().zip(&prefix) {
        assert!((s[0] - p[0]).abs() < 1e-5 && (s[1] - p[1]).abs() < 1e-5, "{s:?} vs {p:?}");
    }
    for t in 0..HORIZON {
        let ServerMessage::Tick { id, t: tt, state, .. } = recv(&mut ws).await else { panic!() };
        assert_eq!((id, tt), (Some(json!(4)), t));
        assert_eq!(state, plan[t]);
    }
}

#[tokio::test]
async fn ticks_keep_the_configured_cadence() {
    let mut ws = connect(service(7.0)).await;
    send(&mut ws, steer(1, point([2.0, 2.0]), json!({"method": "rs", "batch": 2}))).await;
    until_result(&mut ws, 1).await;
    send(&mut ws, json!({"type": "execute", "id": 2, "index": 0})).await;
    recv(&mut ws).await;
    let start = Instant::now();
    let n = 15;
    for _ in 0..n {
        assert!(matches!(recv(&mut ws).await, ServerMessage::Tick { .. }));
    }
    let hz = n as f64 / start.elapsed().as_secs_f64();
    assert!((hz - 7.0).abs() <= 0.7, "tick rate {hz:.2} Hz");
}

async fn scripted(seed: u64) -> Vec<ServerMessage> {
    let mut ws = connect(service(7.0)).await;
    reset(&mut ws, 0, seed).await;
    let mut out = Vec::new();
    let sketch = json!({"kind": "sketch", "points": [[2.0, 2.0], [6.0, 2.0], [6.0, 6.0]]});
    for (id, msg) in [
        (1, steer(1, point([2.0, 6.0]), json!({"method": "ss", "batch": 6}))),
        (2, steer(2, sketch.clone(), json!({"method": "gd", "beta": 20, "batch": 6}))),
        (3, steer(3, sketch, json!({"method": "bi", "batch": 6}))),
    ] {
        send(&mut ws, msg).await;
        out.push(until_result(&mut ws, id).await.1);
    }
    out
}

#[tokio::test]
async fn fixed_reset_seed_repeats_the_session() {
    let a = scripted(11).await;
    let b = scripted(11).await;
    assert_eq!(a, b);
    let seeds: Vec<u64> = a.iter().map(|m| if let ServerMessage::Batch { seed, .. } = m { *seed } else { panic!("{m:?}") }).collect();
    assert_eq!(seeds, [11, 12, 13]);
    assert_ne!(scripted(12).await[0], a[0]);
}
