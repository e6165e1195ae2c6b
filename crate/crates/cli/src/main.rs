use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};
use steer_bench::config::{load, run_bench, BenchConfig};
use steer_bench::env::{Env, EnvSpec};
use steer_bench::gmm_demo::{run_gmm_demo, GmmDemoConfig};
use steer_bench::pipeline::{dp_checkpoint, load_or_train_vae, train_dp, DpSpec, VaeSpec};
use steer_core::checkpoint::Checkpoint;
use steer_core::steering::Method;
use steer_service::{Service, ServiceConfig};

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "steer", about = "Inference-time steering of trajectory diffusion policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate demonstrations and train a policy.
    Train {
        #[arg(long, default_value = "large")]
        env: String,
        #[arg(long)]
        cell_size: Option<f64>,
        /// `dp` or `vae`.
        #[arg(long, default_value = "dp")]
        policy: String,
        #[arg(long, default_value_t = 50_000)]
        steps: usize,
        #[arg(long, default_value_t = 200_000)]
        demo_states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        /// KL weight of the latent-variable baseline.
        #[arg(long)]
        kl_weight: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the steering benchmark and write a JSON report.
    Bench {
        /// JSON file with a bench config; flags given here override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        ckpt_vae: Option<PathBuf>,
        /// Comma-separated method names.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta_gd: Option<f64>,
        #[arg(long)]
        beta_ss: Option<f64>,
        #[arg(long)]
        mcmc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Two-mode mixture composition demo with an analytic denoiser.
    DemoGmm {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        beta_gd: Option<f64>,
        #[arg(long)]
        beta_ss: Option<f64>,
        #[arg(long)]
        mcmc: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        tick_hz: Option<f64>,
    },
}

fn read_json(path: Option<&Path>) -> AnyResult<Value> {
    match path {
        Some(p) => Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?),
        None => Ok(Value::Object(Map::new())),
    }
}

/// Lays the non-null fields of `flags` over `base`.
fn overlay(mut base: Value, flags: Value) -> Value {
    if let (Value::Object(b), Value::Object(f)) = (&mut base, flags) {
        for (k, v) in f {
            if !v.is_null() {
                b.insert(k, v);
            }
        }
    }
    base
}

struct TrainArgs {
    env: EnvSpec,
    steps: usize,
    demo_states: usize,
    seed: u64,
    lr: Option<f64>,
    kl_weight: Option<f64>,
}

fn train(policy: &str, a: TrainArgs, out: &Path) -> AnyResult<()> {
    let TrainArgs { env, steps, demo_states, seed, lr, kl_weight } = a;
    match policy {
        "dp" => {
            let mut spec = DpSpec::new(env, demo_states, steps, seed);
            if let Some(lr) = lr {
                spec.train.lr = lr;
            }
            let (p, report, data) = train_dp(&spec, |step, loss| eprintln!("step {step:>7}  loss {loss:.5}"))?;
            dp_checkpoint(&p, &spec, &report, &data).save(out)?;
        }
        "vae" => {
            let mut spec = VaeSpec::new(env, demo_states, steps, seed);
            if let Some(lr) = lr {
                spec.train.lr = lr;
            }
            if let Some(w) = kl_weight {
                spec.kl_weight = w;
            }
            // Always retrain: remove any stale file so the cache check cannot skip training.
            let _ = std::fs::remove_file(out);
            load_or_train_vae(out, &spec)?;
        }
        other => return Err(format!("unknown policy {other:?}, expected dp or vae").into()),
    }
    eprintln!("saved {}", out.display());
    Ok(())
}

async fn serve(ckpt: &Path, addr: SocketAddr, tick_hz: Option<f64>) -> AnyResult<()> {
    let loaded = load(ckpt, None)?;
    let hash = Checkpoint::load(ckpt)?.hash();
    let start = match &loaded.env.task {
        Some(task) => task.start,
        None => free_center(&loaded.env),
    };
    let mut config = ServiceConfig::default();
    if let Some(hz) = tick_hz {
        config.tick_hz = hz;
    }
    let svc = Service::new(loaded.dp, loaded.env.map, hash, config, start)?;
    eprintln!("listening on {addr}");
    steer_service::serve(Arc::new(svc), addr).await?;
    Ok(())
}

/// Free cell center closest to the workspace center.
fn free_center(env: &Env) -> [f64; 2] {
    let b = env.map.bounds();
    let c = [(b.lo[0] + b.hi[0]) / 2.0, (b.lo[1] + b.hi[1]) / 2.0];
    let d2 = |p: [f64; 2]| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    env.map.free_cells().into_iter().map(|c| env.map.cell_center(c)).min_by(|a, b| d2(*a).total_cmp(&d2(*b))).unwrap_or(c)
}

fn run(cli: Cli) -> AnyResult<()> {
    match cli.command {
        Command::Train { env, cell_size, policy, steps, demo_states, seed, lr, kl_weight, out } => {
            let args = TrainArgs { env: EnvSpec { name: env, cell_size }, steps, demo_states, seed, lr, kl_weight };
            train(&policy, args, &out)?
        }
        Command::Bench { config, ckpt, ckpt_vae, methods, trials, batch, seed, beta_gd, beta_ss, mcmc, out, csv } => {
            let flags = json!({
                "ckpt": ckpt, "ckpt_vae": ckpt_vae, "methods": methods, "trials": trials, "batch": batch,
                "seed": seed, "beta_gd": beta_gd, "beta_ss": beta_ss, "mcmc": mcmc,
            });
            let cfg: BenchConfig = serde_json::from_value(overlay(read_json(config.as_deref())?, flags))?;
            if cfg.ckpt.as_os_str().is_empty() {
                return Err("no checkpoint: pass --ckpt or set ckpt in the config".into());
            }
            let report = run_bench(&cfg)?;
            std::fs::write(&out, report.to_json()?)?;
            if let Some(csv) = csv {
                std::fs::write(csv, report.to_csv()?)?;
            }
            print!("{}", report.to_table());
        }
        Command::DemoGmm { config, beta_gd, beta_ss, mcmc, seeds, seed, out } => {
            let flags = json!({"beta_gd": beta_gd, "beta_ss": beta_ss, "mcmc": mcmc, "seeds": seeds, "seed": seed});
            let cfg: GmmDemoConfig = serde_json::from_value(overlay(read_json(config.as_deref())?, flags))?;
            let report = run_gmm_demo(&cfg)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
        }
        Command::Serve { ckpt, host, port, tick_hz } => {
            let addr = SocketAddr::new(host, port);
            tokio::runtime::Runtime::new()?.block_on(serve(&ckpt, addr, tick_hz))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let file = json!({"trials": 10, "batch": 4, "seed": 3});
        let merged = overlay(file, json!({"trials": 20, "seed": null}));
        assert_eq!(merged, json!({"trials": 20, "batch": 4, "seed": 3}));
        let cfg: BenchConfig = serde_json::from_value(merged).unwrap();
        assert_eq!((cfg.trials, cfg.batch, cfg.mcmc), (20, 4, 4));
    }

    #[test]
    fn methods_parse_from_flags() {
        let cli = Cli::try_parse_from(["steer", "bench", "--methods", "rs,ss", "--out", "r.json"]).unwrap();
        let Command::Bench { methods, .. } = cli.command else { panic!() };
        assert_eq!(methods, Some(vec![Method::Rs, Method::Ss]));
    }
}
