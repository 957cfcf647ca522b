//! Drive the command-line interface end to end: write a tiny dataset to
//! disk, save an untrained model as a checkpoint, run `infer` to produce
//! saliency maps, then `eval` to score them against the ground truth.

use swinnet::cli::run_args;
use swinnet::dataio::{save_checkpoint, save_mask_png, Plane};
use swinnet::model::{ModelConfig, SwinNet};
use swinnet::train::model_tensors;

fn main() {
    let dir = std::env::temp_dir().join(format!("swinnet-cli-demo-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // a 2-sample dataset: bright rectangle on dark ground
    let mut entries = Vec::new();
    for i in 0..2 {
        let mut gt = Plane::constant(64, 64, 0.0);
        for r in 10 + 8 * i..40 {
            for c in 16..48 {
                gt.data[r * 64 + c] = 1.0;
            }
        }
        let rgb: Plane = Plane::new(
            64,
            64,
            gt.data.iter().map(|&v| 0.2 + 0.6 * v).collect(),
        )
        .unwrap();
        save_mask_png(&dir.join(format!("rgb{i}.png")), &rgb).unwrap();
        save_mask_png(&dir.join(format!("aux{i}.png")), &rgb).unwrap();
        save_mask_png(&dir.join(format!("gt{i}.png")), &gt).unwrap();
        entries.push(format!(
            r#"{{"id":"s{i}","rgb":"rgb{i}.png","aux":"aux{i}.png","gt":"gt{i}.png"}}"#
        ));
    }
    let manifest = dir.join("data.json");
    std::fs::write(&manifest, format!("[{}]", entries.join(","))).unwrap();

    // save an untrained toy model; `infer` requires a checkpoint
    let cfg = ModelConfig::toy();
    let mut model = SwinNet::<f32>::new(&cfg, 3).unwrap();
    let ckpt = dir.join("model.swnt");
    save_checkpoint(&ckpt, &cfg, &model_tensors(&mut model)).unwrap();

    let preds = dir.join("preds");
    let code = run_args(&[
        "infer",
        "--scale",
        "toy",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "infer failed");

    let report = dir.join("report");
    let code = run_args(&[
        "eval",
        "--pred",
        preds.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "eval failed");

    println!(
        "\nmetrics file:\n{}",
        std::fs::read_to_string(report.join("metrics.txt")).unwrap()
    );
    std::fs::remove_dir_all(&dir).unwrap();
}
