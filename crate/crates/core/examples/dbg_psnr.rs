// probe: per-sequence reconstruction PSNR + fg-IOU for a checkpoint
use objvid::data::{load_sequence, sequence_dir};
use objvid::metrics::fg_iou;
use objvid::model::SceneModel;
use objvid::pipeline::{fit_window, load_checkpoint, psnr, reconstruct_sequence};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = std::path::Path::new(&args[1]);
    let dataset = std::path::Path::new(&args[2]);
    let n: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(4);
    let (mut store, step, cfg) = load_checkpoint(ckpt).unwrap();
    let model = SceneModel::new(cfg.model.clone()).unwrap();
    println!("checkpoint at step {step}");
    let mut mean_psnr = 0.0;
    let mut mean_iou = 0.0;
    for i in 0..n {
        let rec = load_sequence(&sequence_dir(dataset, i)).unwrap();
        let window = fit_window(&rec, model.cfg.frames, 0);
        let pred = reconstruct_sequence(&model, &mut store, &rec);
        let p = psnr(&window.frames.to_f64(), &pred.recon);
        let iou = fg_iou(&pred.masks, &window.masks);
        let pres: Vec<String> = pred.presences.iter().map(|v| format!("{v:.2}")).collect();
        println!("seq {i}: psnr {p:.2} dB, fg_iou {iou:.3}, presences [{}]", pres.join(", "));
        mean_psnr += p / n as f64;
        mean_iou += iou / n as f64;
    }
    println!("mean: psnr {mean_psnr:.2} dB, fg_iou {mean_iou:.3}");
}
