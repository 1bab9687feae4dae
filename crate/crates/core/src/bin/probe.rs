//! Temporary training diagnostics; not part of the shipped interface.

use std::path::Path;

use vtmatch::chipgen::{chip_tensor_values, load_dataset};
use vtmatch::experiments::{evaluate, exhaustive_pairs, training_pairs, TrainConfig};
use vtmatch::model::build_model;
use vtmatch::tensor::{sgd_step, Tape, Tensor};
use vtmatch::text::encode_bow;

fn main() {
    let data = std::env::args().nth(1).unwrap_or("/tmp/c6pilot/data".into());
    let epochs: usize = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(30);
    let dataset = load_dataset(Path::new(&data)).unwrap();
    let mut config = TrainConfig::default();
    config.epochs = epochs;
    let mut model = build_model(config.model.clone()).unwrap();
    let pairs = training_pairs(&dataset, &config).unwrap();
    println!("{} training pairs", pairs.len());

    // Group boundaries in parameters_mut() order: conv pairs, then visual,
    // text stack, fusion, head (weight+bias each).
    let conv_layers = config.model.conv_layer_count();
    let text_layers = config.model.text_dims.len();
    let group_of = |i: usize| -> &'static str {
        let dense0 = 2 * conv_layers;
        if i < 2 * 3 {
            "conv-early"
        } else if i < dense0 {
            "conv-late"
        } else if i < dense0 + 2 {
            "visual-fc"
        } else if i < dense0 + 2 + 2 * text_layers {
            "text-fc"
        } else if i < dense0 + 4 + 2 * text_layers {
            "fusion"
        } else {
            "head"
        }
    };

    let size = dataset.chip_size().unwrap();
    let vocab = model.vocab().clone();
    let batch: Vec<_> = pairs.iter().take(32).collect();
    let mut chip_vals = Vec::new();
    let mut bow_vals = Vec::new();
    let mut labels = Vec::new();
    for p in &batch {
        let chip = &dataset.chips[p.chip];
        chip_vals.extend(chip_tensor_values(&chip.pixels, chip.size));
        bow_vals.extend(encode_bow(&p.query, &vocab).unwrap());
        labels.push(p.label);
    }
    let chips = Tensor::from_values(&[batch.len(), 3, size, size], chip_vals).unwrap();
    let bows = Tensor::from_values(&[batch.len(), vocab.len()], bow_vals).unwrap();

    // One forward/backward at init: per-group gradient and weight norms.
    let mut tape = Tape::new();
    let loss = model.pair_loss(&mut tape, &chips, &bows, &labels).unwrap();
    println!("init batch loss {:.4}", tape.value_data(loss).unwrap()[0]);
    let grads = tape.backward(loss).unwrap();
    let mut norms: Vec<(String, f64, f64, usize)> = Vec::new();
    for (i, p) in model.parameters_mut().into_iter().enumerate() {
        let g = grads.for_tensor(p).unwrap();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let wn = p.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let key = format!("{}", group_of(i));
        match norms.iter_mut().find(|(k, ..)| *k == key) {
            Some(row) => {
                row.1 += gn * gn;
                row.2 += wn * wn;
                row.3 += p.len();
            }
            None => norms.push((key, gn * gn, wn * wn, p.len())),
        }
    }
    println!("group          |grad|      |w|        params   lr*|g|/|w|");
    for (k, g2, w2, n) in &norms {
        let (g, w) = (g2.sqrt(), w2.sqrt());
        println!(
            "{k:<14} {g:<11.4e} {w:<10.4e} {n:<8} {:.3e}",
            0.01 * g / w.max(1e-12)
        );
    }

    // Short training with per-epoch train accuracy on a subsample.
    let t0 = std::time::Instant::now();
    let curve = vtmatch::experiments::train(&mut model, &dataset, &pairs, &config).unwrap();
    println!("trained {} epochs in {:.1}s", curve.len(), t0.elapsed().as_secs_f64());
    for (e, l) in curve.iter().enumerate() {
        if e % 5 == 0 || e + 1 == curve.len() {
            println!("epoch {e}: loss {l:.4}");
        }
    }
    let train_idx = dataset.indices_in(vtmatch::chipgen::Split::Train);
    let test_idx = dataset.indices_in(vtmatch::chipgen::Split::Test);
    let universe = vtmatch::experiments::class_universe(&dataset, &train_idx);
    for (name, idx) in [("train", &train_idx), ("test", &test_idx)] {
        let pairs = exhaustive_pairs(&dataset, idx, &universe, 1).unwrap();
        let rep = evaluate(&mut model, &dataset, &pairs).unwrap();
        let m = rep.overall;
        println!(
            "{name}: acc {:.4} tpr {:.4} tnr {:.4} over {} pairs",
            m.accuracy(),
            m.tpr(),
            m.tnr(),
            m.total()
        );
    }
    let _ = sgd_step; // keep import for quick experiments
}
