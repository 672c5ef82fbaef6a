use pavsod::config::Config;
use pavsod::pipeline::*;
use pavsod::synth::*;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("pavsod_a3_probe");
    let _ = std::fs::remove_dir_all(&dir);
    let base = SceneParams::default();
    // 8 train clips: seeds with even parity under seed*1e6+i.
    let manifest = make_dataset(16, &base, 1, &dir.join("data"), AudioMode::Ambisonic).unwrap();
    println!("train clips: {}", manifest.train().len());
    let cfg = Config::default(); // lr 1e-4, batch 2, 500 steps
    let t0 = Instant::now();
    let out = train::<f32>(&cfg, &manifest, &dir.join("run"), None, true).unwrap();
    println!("trained {} steps in {:?}", out.steps_run, t0.elapsed());
    for (i, line) in out.log.iter().enumerate() {
        if i % 50 == 0 || i + 1 == out.log.len() {
            println!("{line}");
        }
    }
    // Evaluate on the training clips (overfit target).
    let ck = pavsod::checkpoint::Checkpoint::<f32>::load(&out.checkpoint_path).unwrap();
    let (cfg2, ps, model) = restore(&ck).unwrap();
    let entries = manifest.train();
    let clips = load_entries::<f32>(&cfg2, &entries).unwrap();
    let ids: Vec<String> = entries.iter().map(|e| e.dir.display().to_string()).collect();
    let frames = predict_entries(&ps, &model, &clips, &ids).unwrap();
    let report = evaluate_maps(&frames).unwrap();
    println!("train MAE {:.4} Fbeta {:.4}", report.mean_mae, report.mean_fbeta);
}
