// temporary helper — not part of the final repo
use langplan::autodiff::AdamWConfig;
use langplan::bev::GridSpec;
use langplan::harness::{DataConfig, EvalConfig, ExperimentConfig, TrainSettings};
use langplan::planner::ModelConfig;
use langplan::prompt::FieldMask;
use langplan::scene::WorldConfig;

fn main() {
    let desk = ExperimentConfig {
        model: ModelConfig::default(),
        train: TrainSettings {
            steps: 480,
            batch_size: 6,
            optim: AdamWConfig::default(),
            vlp_lr_mult: 4.0,
        },
        data: DataConfig { n_train: 512, n_test: 128, train_seed0: 1000, test_seed0: 999_000 },
        train_world: WorldConfig::city_a(),
        test_world: WorldConfig::city_b(),
        eval: EvalConfig::default(),
    };
    println!("==== desk ====\n{}", desk.to_toml_string().unwrap());

    let grid = GridSpec { extent: (-12.8, 12.8, -12.8, 12.8), resolution: 0.8 };
    let mut smoke_world = WorldConfig::city_a();
    smoke_world.grid = grid;
    smoke_world.agent_count = (1, 3);
    smoke_world.lane_count = (1, 2);
    let smoke = ExperimentConfig {
        model: ModelConfig {
            grid,
            c_feat: 8,
            conv_hidden: 4,
            n_agent_queries: 6,
            n_lane_queries: 2,
            n_layers: 1,
            mlp_hidden: 12,
            mem_pool: 2,
            vlp: Default::default(),
            encoder_backend: "hash-ngram-64".to_string(),
            field_mask: FieldMask::all(),
            weights: Default::default(),
        },
        train: TrainSettings {
            steps: 30,
            batch_size: 4,
            optim: AdamWConfig::default(),
            vlp_lr_mult: 4.0,
        },
        data: DataConfig { n_train: 24, n_test: 8, train_seed0: 0, test_seed0: 9000 },
        train_world: smoke_world.clone(),
        test_world: smoke_world,
        eval: EvalConfig::default(),
    };
    println!("==== smoke ====\n{}", smoke.to_toml_string().unwrap());
}
