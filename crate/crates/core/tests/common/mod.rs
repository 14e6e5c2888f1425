#![allow(dead_code)]

use ddkl::engine::{build_agents, Engine, EngineConfig, Variant};
use ddkl::experiment::{prepare, PreparedData, RunConfig};

pub const FIG3_SMALL: &str = include_str!("../../../../configs/fig3_small.cfg");
pub const SINGLE_AGENT: &str = include_str!("../../../../configs/single_agent.cfg");

/// Bundled config with a different seed and batch count.
pub fn config(text: &str, seed: u64, batches: usize) -> RunConfig {
    let mut cfg = RunConfig::parse(text).expect("bundled config parses");
    cfg.seed = seed;
    cfg.batches.max_batches = Some(batches);
    cfg
}

pub fn data(cfg: &RunConfig) -> PreparedData {
    prepare(cfg, None).expect("simulation")
}

/// Fresh, uninitialized engine.
pub fn engine(cfg: &RunConfig, data: &PreparedData, tweak: impl FnOnce(&mut EngineConfig)) -> Engine<f64> {
    let mut ec = cfg.engine_config().expect("engine config");
    tweak(&mut ec);
    let agents = build_agents(&ec, &data.cs).expect("agents");
    Engine::new(ec, cfg.graph().expect("graph"), agents).expect("engine")
}

pub fn with_variant(v: Variant) -> impl FnOnce(&mut EngineConfig) {
    move |c| c.variant = v
}
