use std::path::Path;

use vibekit::config::RunConfig;
use vibekit::flowmatch::{integrate_batch, OdeMethod};
use vibekit::gclfa::{gclfa_attention_with, CoarseSpec, ExecOptions, GridSize, RoPEParams, TokenGrid, WindowSpec};
use vibekit::par::Execution;
use vibekit::toydit::ToyDiT;
use vibekit::{Rng, Tensor};

fn shipped(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(path).unwrap()
}

#[test]
fn shipped_configs_match_the_builtin_presets() {
    assert_eq!(shipped("default.json"), RunConfig::default());
    assert_eq!(shipped("wide.json"), RunConfig::wide_preset());
}

#[test]
fn json_round_trip_preserves_config() {
    let cfg = RunConfig::wide_preset();
    assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
}

#[test]
fn parallel_and_sequential_agree_bitwise() {
    let grid = GridSize::new(12, 10).unwrap();
    let mut rng = Rng::new(11);
    let mut draw = || TokenGrid::new(grid, rng.gaussian([grid.tokens(), 8], 1.0)).unwrap();
    let (q, k, v) = (draw(), draw(), draw());
    let run = |exec| {
        let opts = ExecOptions { exec, record_weights: false };
        gclfa_attention_with(&q, &k, &v, WindowSpec::new(4, 6).unwrap(), CoarseSpec::new(2).unwrap(), RoPEParams::default(), opts)
            .unwrap()
    };
    let (a, b) = (run(Execution::Sequential), run(Execution::Parallel));
    assert_eq!(a.out, b.out);
    assert_eq!(a.maccs, b.maccs);

    let cfg = RunConfig::default();
    let model = ToyDiT::init(cfg.dit(Default::default()), &mut Rng::new(2)).unwrap();
    let mut rng = Rng::new(3);
    let starts: Vec<Tensor> = (0..4).map(|_| rng.gaussian([8, 8], 1.0)).collect();
    let seq = integrate_batch(&model, &starts, 1.0, 4, OdeMethod::Heun, Execution::Sequential).unwrap();
    let par = integrate_batch(&model, &starts, 1.0, 4, OdeMethod::Heun, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}
