use radcam::config::RunConfig;
use radcam::eval::evaluate;
use radcam::model::SceneParams;
use radcam::synthdata::{generate_dataset, GenConfig};
use radcam::train::{TrainInputs, Trainer};

fn run(name: &str, train_n: usize, epochs: usize, beta: f64) {
    let gen = GenConfig::default();
    let train = generate_dataset(100, train_n, &gen);
    let val = generate_dataset(101, 16, &gen);
    let test = generate_dataset(102, 32, &gen);
    let scene = SceneParams { k: gen.k, kb: gen.kb, cam_height: gen.cam_height };
    let config = RunConfig {
        channels: 16,
        ffn_hidden: 32,
        d_f: 128,
        d_z: 64,
        lstm_hidden: 64,
        epochs,
        batch_size: 4,
        learning_rate: 1e-3,
        lr_halve_every: 8,
        normalize_maps: true,
        beta,
        seed: 0,
        ..RunConfig::default()
    };
    let t0 = std::time::Instant::now();
    let outcome = Trainer {
        config: &config,
        ledger: None,
        best_path: None,
        state_path: None,
        resume_from: None,
        quiet: true,
    }
    .run(&TrainInputs { train: &train, val: &val, scene })
    .unwrap();
    let report = evaluate(&outcome.model, &test, scene, (10.0, 0.25), 7);
    eprintln!(
        "[{name}] {:.0}s rot ratio {:.2} ({:.3} deg), trans ratio {:.2} ({:.2} cm), medians {:?}",
        t0.elapsed().as_secs_f64(),
        report.aggregate.rot_mean_deg / report.aggregate.initial_rot_mean_deg,
        report.aggregate.rot_mean_deg,
        report.aggregate.trans_mean_cm / report.aggregate.initial_trans_mean_cm,
        report.aggregate.trans_mean_cm,
        report.aggregate.iteration_medians,
    );
}

#[test]
fn probe() {
    run("desk-beta01-256x16", 256, 16, 0.1);
}
