// temporary calibration probe — not part of the final repo
use langplan::planner::{LossWeights, ModelConfig, PlannerModel, TrainConfig, VlpSwitches};
use langplan::scene::{make_dataset, WorldConfig};

fn main() {
    let world = WorldConfig::city_a();
    let scenes = make_dataset(&world, 64, 5000).unwrap();
    let rows: usize = 64 + scenes.iter().map(|s| s.agents.len() + s.lanes.len()).sum::<usize>();
    println!("alp rows {rows}");

    for w_enc in [1.0, 4.0] {
        let mut cfg = ModelConfig::default();
        cfg.vlp = VlpSwitches { slp: true, alp: true, detach_alp_encoder: false };
        cfg.weights = LossWeights { enc: w_enc, dec: 1.0 };
        let mut model = PlannerModel::new(cfg, 21).unwrap();
        let mut done = 0usize;
        for stage in [200usize, 200, 400, 400, 400] {
            let tcfg = TrainConfig {
                steps: stage,
                batch_size: 16,
                vlp_lr_mult: 4.0,
                shuffle_seed: 21 + done as u64,
                ..TrainConfig::default()
            };
            model.train(&scenes, &tcfg).unwrap();
            done += stage;
            let (alp, slp) = model.alignment_accuracy(&scenes.iter().collect::<Vec<_>>()).unwrap();
            println!(
                "w_enc {w_enc} steps {done}: alp {:.3} slp {:.3}",
                alp.unwrap(),
                slp.unwrap()
            );
        }
    }
}
