//! Acceptance checklist: eight end-to-end checks covering gradient
//! correctness, numeric oracles, the chip generator, desk-scale learning
//! targets, the embedding export, and byte-level CLI determinism.
//!
//! Each check prints exactly one `acceptance N (<label>): PASS/FAIL` line, so
//! `cargo test --test acceptance -- --nocapture` doubles as a checklist.
//! Checks with wall-clock budgets or heavy CPU use share a mutex, keeping the
//! timings honest when the harness runs tests on several threads.

use std::path::Path;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, PoisonError};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use vtmatch::chipgen::{
    classify_color, generate_dataset, load_dataset, mean_paint_color, render_chip_with_geometry,
    silhouette_aspect, ChipSpec, CHIP_SIZE,
};
use vtmatch::experiments::{run_embedding, run_open_set, run_seen_class, TrainConfig};
use vtmatch::model::{build_model, VtmConfig};
use vtmatch::multibox::{
    encode_offsets, multibox_loss_value, BoundingBox, GroundTruth, MultiboxInstance,
};
use vtmatch::tensor::{finite_difference_check, NodeId, Reduction, Tape, Tensor, TensorError};
use vtmatch::text::{all_classes, encode_bow, VehicleType};

static TIMED: Mutex<()> = Mutex::new(());

fn timed_lock() -> MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Prints the single checklist line for a criterion, then enforces it.
fn verdict(number: u32, label: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("acceptance {number} ({label}): {word} — {detail}");
    assert!(pass, "acceptance {number} ({label}): {detail}");
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_values(shape, values).unwrap()
}

/// Values bounded away from zero, so ReLU kinks stay clear of the
/// finite-difference step.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| rng.gen_range(0.2..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::from_values(shape, values).unwrap()
}

/// Distinct values with gaps of at least 0.05, so max-pool winners cannot
/// flip under the finite-difference step.
fn gapped(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
    values.shuffle(rng);
    Tensor::from_values(shape, values).unwrap()
}

#[test]
fn gradient_suite() {
    let _guard = timed_lock();
    const SEEDS: u64 = 20;
    const EPS: f64 = 1e-5;
    const BAR: f64 = 1e-4;
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    let mut worst_op = "none";
    let mut failures: Vec<String> = Vec::new();
    let mut record = |op: &'static str, err: f64, failures: &mut Vec<String>| {
        if err > worst {
            worst = err;
            worst_op = op;
        }
        if !(err < BAR) {
            failures.push(format!("{op}: {err:.3e}"));
        }
    };

    // Elementwise product with a fixed random tensor, then a full sum: gives
    // every output coordinate a distinct upstream gradient.
    let wsum = |tape: &mut Tape, node: NodeId, w: &Tensor| -> Result<NodeId, TensorError> {
        let c = tape.constant(w);
        let m = tape.mul(node, c)?;
        tape.sum(m)
    };

    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Convolution, alternating padding.
        let padding = (seed % 2) as usize;
        let x = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
        let w = uniform(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = uniform(&mut rng, &[4], -0.5, 0.5);
        let side = 4 + 2 * padding;
        let up = uniform(&mut rng, &[2, 4, side, side], -1.0, 1.0);
        let err = finite_difference_check(&[x, w, b], EPS, |tape, ids| {
            let out = tape.conv2d(ids[0], ids[1], ids[2], 1, padding)?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("conv2d", err, &mut failures);

        // Max pooling over gapped values.
        let x = gapped(&mut rng, &[2, 3, 4, 4]);
        let up = uniform(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.maxpool2(ids[0])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("maxpool2", err, &mut failures);

        // ReLU away from the kink.
        let x = signed_away_from_zero(&mut rng, &[3, 7]);
        let up = uniform(&mut rng, &[3, 7], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.relu(ids[0])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("relu", err, &mut failures);

        // Matrix product.
        let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
        let up = uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let err = finite_difference_check(&[a, b], EPS, |tape, ids| {
            let out = tape.matmul(ids[0], ids[1])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("matmul", err, &mut failures);

        // Elementwise add/mul/sub chained so each input feeds several paths.
        let a = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        let b = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        let up = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        let err = finite_difference_check(&[a, b], EPS, |tape, ids| {
            let s = tape.add(ids[0], ids[1])?;
            let m = tape.mul(s, ids[0])?;
            let d = tape.sub(m, ids[1])?;
            wsum(tape, d, &up)
        })
        .unwrap();
        record("add/mul/sub", err, &mut failures);

        // Row tiling (the bias broadcast).
        let x = uniform(&mut rng, &[5], -1.0, 1.0);
        let up = uniform(&mut rng, &[4, 5], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.tile_rows(ids[0], 4)?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("tile_rows", err, &mut failures);

        // Column concatenation (the fusion join).
        let a = uniform(&mut rng, &[3, 2], -1.0, 1.0);
        let b = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let up = uniform(&mut rng, &[3, 6], -1.0, 1.0);
        let err = finite_difference_check(&[a, b], EPS, |tape, ids| {
            let out = tape.concat_cols(ids[0], ids[1])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("concat_cols", err, &mut failures);

        // Row gathering with a repeated row, so gradients must accumulate.
        let x = uniform(&mut rng, &[5, 3], -1.0, 1.0);
        let up = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.gather_rows(ids[0], &[0, 2, 2, 4])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("gather_rows", err, &mut failures);

        // Reshape.
        let x = uniform(&mut rng, &[2, 6], -1.0, 1.0);
        let up = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.reshape(ids[0], &[3, 4])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("reshape", err, &mut failures);

        // Smooth L1 (first derivative is continuous everywhere, including the
        // |t| = 1 joins, so unrestricted inputs are safe).
        let x = uniform(&mut rng, &[4, 4], -2.0, 2.0);
        let up = uniform(&mut rng, &[4, 4], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.smooth_l1(ids[0])?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("smooth_l1", err, &mut failures);

        // Scalar scaling.
        let x = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let up = uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let err = finite_difference_check(&[x], EPS, |tape, ids| {
            let out = tape.scale(ids[0], 0.37)?;
            wsum(tape, out, &up)
        })
        .unwrap();
        record("scale", err, &mut failures);

        // Softmax cross-entropy on the tape, alternating reductions and a
        // three-class head.
        let logits = uniform(&mut rng, &[4, 3], -1.0, 1.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
        let reduction = if seed % 2 == 0 {
            Reduction::Mean
        } else {
            Reduction::Sum
        };
        let err = finite_difference_check(&[logits], EPS, |tape, ids| {
            Ok(tape.softmax_cross_entropy(ids[0], &targets, reduction)?)
        })
        .unwrap();
        record("softmax_cross_entropy", err, &mut failures);

        // The two-class layer wrapper.
        let logits = uniform(&mut rng, &[4, 2], -1.0, 1.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.gen_range(0..2)).collect();
        let err = finite_difference_check(&[logits], EPS, |tape, ids| {
            vtmatch::layers::softmax_cross_entropy(tape, ids[0], &targets)
                .map_err(|_| TensorError::NonFinite("layer wrapper"))
        })
        .unwrap();
        record("two-class wrapper", err, &mut failures);

        // Dense composite: x W + tiled bias, through a ReLU.
        let x = uniform(&mut rng, &[3, 5], -1.0, 1.0);
        let w = uniform(&mut rng, &[5, 4], -1.0, 1.0);
        let b = uniform(&mut rng, &[4], -1.0, 1.0);
        let up = uniform(&mut rng, &[3, 4], -1.0, 1.0);
        let err = finite_difference_check(&[x, w, b], EPS, |tape, ids| {
            let prod = tape.matmul(ids[0], ids[1])?;
            let bias = tape.tile_rows(ids[2], 3)?;
            let pre = tape.add(prod, bias)?;
            let act = tape.relu(pre)?;
            wsum(tape, act, &up)
        })
        .unwrap();
        record("dense composite", err, &mut failures);
    }

    // End-to-end: the pair loss of a micro model, rebuilt from parameter
    // leaves exactly as forward() wires it.
    let classes = all_classes();
    for seed in 0..SEEDS {
        let config = VtmConfig {
            input_size: 8,
            block_depths: vec![vec![3], vec![4]],
            visual_dim: 6,
            text_dims: vec![5, 4],
            fusion_dim: 7,
            seed,
        };
        let mut model = build_model(config.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let chips = uniform(&mut rng, &[2, 3, 8, 8], -1.0, 1.0);
        let vocab = model.vocab().clone();
        let mut bow_values = Vec::new();
        for _ in 0..2 {
            let class = classes[rng.gen_range(0..classes.len())];
            bow_values.extend(encode_bow(&class, &vocab).unwrap());
        }
        let bows = Tensor::from_values(&[2, vocab.len()], bow_values).unwrap();
        let params: Vec<Tensor> = model.parameters_mut().into_iter().map(|t| t.clone()).collect();
        let err = finite_difference_check(&params, EPS, |tape, ids| {
            let mut x = tape.constant(&chips);
            let mut idx = 0;
            for block in &config.block_depths {
                for _ in block {
                    x = tape.conv2d(x, ids[2 * idx], ids[2 * idx + 1], 1, 1)?;
                    x = tape.relu(x)?;
                    idx += 1;
                }
                x = tape.maxpool2(x)?;
            }
            let s = config.input_size >> config.block_depths.len();
            let ch = *config.block_depths.last().unwrap().last().unwrap();
            let flat = tape.reshape(x, &[2, ch * s * s])?;
            let dense = |tape: &mut Tape, x: NodeId, p: usize| -> Result<NodeId, TensorError> {
                let prod = tape.matmul(x, ids[p])?;
                let tiled = tape.tile_rows(ids[p + 1], 2)?;
                tape.add(prod, tiled)
            };
            let mut p = 2 * idx;
            let vis = dense(tape, flat, p)?;
            let vis = tape.relu(vis)?;
            p += 2;
            let mut t = tape.constant(&bows);
            for (i, _) in config.text_dims.iter().enumerate() {
                t = dense(tape, t, p)?;
                if i + 1 != config.text_dims.len() {
                    t = tape.relu(t)?;
                }
                p += 2;
            }
            let fused = tape.concat_cols(vis, t)?;
            let fu = dense(tape, fused, p)?;
            let fu = tape.relu(fu)?;
            p += 2;
            let logits = dense(tape, fu, p)?;
            tape.softmax_cross_entropy(logits, &[1, 0], Reduction::Mean)
        })
        .unwrap();
        record("pair_loss end-to-end", err, &mut failures);
    }

    let secs = started.elapsed().as_secs_f64();
    if secs >= 120.0 {
        failures.push(format!("runtime {secs:.1}s exceeds 120s"));
    }
    verdict(
        1,
        "gradient suite",
        failures.is_empty(),
        &format!(
            "15 checks x {SEEDS} seeds, eps {EPS:.0e}, max rel err {worst:.3e} ({worst_op}), {secs:.1}s{}",
            if failures.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failures.join(", "))
            }
        ),
    );
}

/// Direct six-loop convolution used as the reference implementation.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let (batch, in_ch, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_ch, k) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![0.0; batch * out_ch * out_h * out_w];
    for bi in 0..batch {
        for oc in 0..out_ch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut acc = b.data()[oc];
                    for ic in 0..in_ch {
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh) as isize - padding as isize;
                                let iw = (ow * stride + kw) as isize - padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xi = ((bi * in_ch + ic) * h + ih as usize) * wd + iw as usize;
                                let wi = ((oc * in_ch + ic) * k + kh) * k + kw;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out[((bi * out_ch + oc) * out_h + oh) * out_w + ow] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn convolution_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC04C);
    let mut shapes = 0usize;
    let mut worst: f64 = 0.0;
    while shapes < 60 {
        let batch = rng.gen_range(1..=3);
        let in_ch = rng.gen_range(1..=4);
        let out_ch = rng.gen_range(1..=5);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=3);
        let padding = rng.gen_range(0..=2usize);
        let h = rng.gen_range(3..=9);
        let wd = rng.gen_range(3..=9);
        if h + 2 * padding < k || wd + 2 * padding < k {
            continue;
        }
        // The op requires the stride to tile the padded extent exactly.
        if (h + 2 * padding - k) % stride != 0 || (wd + 2 * padding - k) % stride != 0 {
            continue;
        }
        let x = uniform(&mut rng, &[batch, in_ch, h, wd], -1.0, 1.0);
        let w = uniform(&mut rng, &[out_ch, in_ch, k, k], -1.0, 1.0);
        let b = uniform(&mut rng, &[out_ch], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xn, wn, bn) = {
            let mut reg = |t: &Tensor| tape.constant(t);
            (reg(&x), reg(&w), reg(&b))
        };
        let out = tape.conv2d(xn, wn, bn, stride, padding).unwrap();
        let shape = tape.shape(out).unwrap().to_vec();
        let got = tape.value_data(out).unwrap();
        let want = naive_conv(&x, &w, &b, stride, padding, shape[2], shape[3]);
        assert_eq!(got.len(), want.len());
        for (g, wv) in got.iter().zip(&want) {
            let dev = (g - wv).abs() / wv.abs().max(1.0);
            worst = worst.max(dev);
        }
        shapes += 1;
    }
    verdict(
        2,
        "convolution oracle",
        worst <= 1e-12,
        &format!("{shapes} random shapes, max deviation {worst:.3e} (bar 1e-12)"),
    );
}

/// Independent scalar re-implementation of the detection loss: IoU, the
/// documented matching rules, offset encoding, log-sum-exp cross-entropy and
/// smooth L1, all in plain loops.
fn scalar_detection_loss(instance: &MultiboxInstance) -> Option<f64> {
    let defaults = instance.defaults();
    let gts = instance.ground_truths();
    let conf = instance.conf_logits();
    let loc = instance.loc_preds();
    let classes = conf.shape()[1];
    let threshold = instance.threshold();

    let iou = |a: &BoundingBox, b: &BoundingBox| -> f64 {
        let (al, at, ar, ab) = (
            a.cx() - a.w() / 2.0,
            a.cy() - a.h() / 2.0,
            a.cx() + a.w() / 2.0,
            a.cy() + a.h() / 2.0,
        );
        let (bl, bt, br, bb) = (
            b.cx() - b.w() / 2.0,
            b.cy() - b.h() / 2.0,
            b.cx() + b.w() / 2.0,
            b.cy() + b.h() / 2.0,
        );
        let iw = (ar.min(br) - al.max(bl)).max(0.0);
        let ih = (ab.min(bb) - at.max(bt)).max(0.0);
        let inter = iw * ih;
        let union = a.w() * a.h() + b.w() * b.h() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    };

    // Matching: each ground truth forces its best-IoU default (ties to the
    // lower default index); each default additionally considers its best
    // ground truth when that IoU clears the threshold; the default keeps its
    // highest-IoU candidate, ties to the lower ground-truth index.
    let d = defaults.len();
    let g = gts.len();
    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); d];
    for (gi, gt) in gts.iter().enumerate() {
        let mut best = 0usize;
        for di in 1..d {
            if iou(&defaults[di], gt_box(gt)) > iou(&defaults[best], gt_box(gt)) {
                best = di;
            }
        }
        candidates[best].push(gi);
    }
    for (di, default) in defaults.iter().enumerate() {
        let mut best: Option<usize> = None;
        for gi in 0..g {
            let o = iou(default, gt_box(&gts[gi]));
            if best.map_or(true, |bg| o > iou(default, gt_box(&gts[bg]))) {
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            if iou(default, gt_box(&gts[gi])) >= threshold {
                candidates[di].push(gi);
            }
        }
    }
    let mut assignment: Vec<Option<usize>> = vec![None; d];
    for di in 0..d {
        for &gi in &candidates[di] {
            assignment[di] = match assignment[di] {
                None => Some(gi),
                Some(cur) => {
                    let oi = iou(&defaults[di], gt_box(&gts[gi]));
                    let oc = iou(&defaults[di], gt_box(&gts[cur]));
                    if oi > oc || (oi == oc && gi < cur) {
                        Some(gi)
                    } else {
                        Some(cur)
                    }
                }
            };
        }
    }
    let n = assignment.iter().flatten().count();
    if n == 0 {
        return None;
    }

    let mut l_conf = 0.0;
    for di in 0..d {
        let row = &conf.data()[di * classes..(di + 1) * classes];
        let target = assignment[di].map_or(0, |gi| gts[gi].class_id());
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        l_conf += lse - row[target];
    }

    let mut l_loc = 0.0;
    for di in 0..d {
        if let Some(gi) = assignment[di] {
            let dft = &defaults[di];
            let gt = gt_box(&gts[gi]);
            let enc = [
                (gt.cx() - dft.cx()) / dft.w(),
                (gt.cy() - dft.cy()) / dft.h(),
                (gt.w() / dft.w()).ln(),
                (gt.h() / dft.h()).ln(),
            ];
            for j in 0..4 {
                let t = loc.data()[di * 4 + j] - enc[j];
                l_loc += if t.abs() < 1.0 {
                    0.5 * t * t
                } else {
                    t.abs() - 0.5
                };
            }
        }
    }
    Some((l_conf + l_loc) / n as f64)
}

fn gt_box(gt: &GroundTruth) -> &BoundingBox {
    &gt.bbox
}

#[test]
fn detection_loss_oracle() {
    // Hand-checkable case first: two identical-overlap-free defaults, one
    // ground truth sitting exactly on the first, zero logits over three
    // classes, perfect localization. The confidence term is ln 3 for each of
    // the two defaults; N = 1, so the loss is 2 ln 3.
    let d0 = BoundingBox::new(0.3, 0.3, 0.2, 0.2).unwrap();
    let d1 = BoundingBox::new(0.7, 0.7, 0.2, 0.2).unwrap();
    let gt = GroundTruth::new(BoundingBox::new(0.3, 0.3, 0.2, 0.2).unwrap(), 1).unwrap();
    let offsets = encode_offsets(&d0, &BoundingBox::new(0.3, 0.3, 0.2, 0.2).unwrap());
    assert_eq!(offsets, [0.0, 0.0, 0.0, 0.0]);
    let instance = MultiboxInstance::new(
        vec![d0, d1],
        vec![gt],
        Tensor::zeros(&[2, 3]).unwrap(),
        Tensor::zeros(&[2, 4]).unwrap(),
        0.5,
    )
    .unwrap();
    let hand = multibox_loss_value(&instance).unwrap();
    let expected = 2.0 * 3.0f64.ln();
    let hand_ok = (hand - expected).abs() < 1e-12;

    let mut rng = ChaCha8Rng::seed_from_u64(0xB0C5);
    let mut instances = 0usize;
    let mut worst: f64 = 0.0;
    while instances < 120 {
        let d = rng.gen_range(1..=8);
        let g = rng.gen_range(1..=3);
        let classes = rng.gen_range(2..=5);
        let rand_box = |rng: &mut ChaCha8Rng| {
            BoundingBox::new(
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.15..0.85),
                rng.gen_range(0.05..0.3),
                rng.gen_range(0.05..0.3),
            )
            .unwrap()
        };
        let defaults: Vec<BoundingBox> = (0..d).map(|_| rand_box(&mut rng)).collect();
        let gts: Vec<GroundTruth> = (0..g)
            .map(|_| GroundTruth::new(rand_box(&mut rng), rng.gen_range(1..classes)).unwrap())
            .collect();
        let conf = uniform(&mut rng, &[d, classes], -2.0, 2.0);
        let loc = uniform(&mut rng, &[d, 4], -1.0, 1.0);
        let instance = MultiboxInstance::new(defaults, gts, conf, loc, 0.5).unwrap();
        let want = scalar_detection_loss(&instance).expect("at least one forced match");
        let got = multibox_loss_value(&instance).unwrap();
        worst = worst.max((got - want).abs());
        instances += 1;
    }
    verdict(
        3,
        "detection loss oracle",
        hand_ok && worst <= 1e-10,
        &format!(
            "hand example {hand:.6} (expected 2 ln 3 = {expected:.6}); {instances} random instances, max |Δ| {worst:.3e} (bar 1e-10)"
        ),
    );
}

#[test]
fn dataset_integrity() {
    let _guard = timed_lock();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));

    let started = Instant::now();
    generate_dataset(&a, 100, 0.75, 7).unwrap();
    let gen_secs = started.elapsed().as_secs_f64();
    generate_dataset(&b, 100, 0.75, 7).unwrap();

    let dataset = load_dataset(&a).unwrap();
    assert_eq!(dataset.chips.len(), 1400);

    // Regenerating with the same seed must reproduce every byte.
    let mut identical = std::fs::read(a.join("manifest.jsonl")).unwrap()
        == std::fs::read(b.join("manifest.jsonl")).unwrap();
    for chip in &dataset.chips {
        identical &= std::fs::read(a.join(&chip.record.path)).unwrap()
            == std::fs::read(b.join(&chip.record.path)).unwrap();
    }

    // Label round-trip: the mean paint color must classify back to the
    // labeled color, and the silhouette aspect must separate the two vehicle
    // types at the fixed 2.5 threshold.
    let mut good = 0usize;
    for chip in &dataset.chips {
        let spec = ChipSpec::new(chip.record.class, chip.record.seed, CHIP_SIZE).unwrap();
        let (rendered, geometry) = render_chip_with_geometry(&spec);
        assert_eq!(rendered.pixels, chip.pixels, "{}", chip.record.path);
        let color_ok = mean_paint_color(&rendered, &geometry)
            .map(classify_color)
            .map_or(false, |c| c == chip.record.class.color);
        let type_ok = silhouette_aspect(&geometry.silhouette, CHIP_SIZE).map_or(false, |aspect| {
            let vehicle = if aspect >= 2.5 {
                VehicleType::Truck
            } else {
                VehicleType::Car
            };
            vehicle == chip.record.class.vehicle_type
        });
        good += usize::from(color_ok && type_ok);
    }
    let rate = good as f64 / dataset.chips.len() as f64;

    verdict(
        4,
        "dataset integrity",
        rate >= 0.99 && identical && gen_secs < 60.0,
        &format!(
            "round-trip {good}/1400 ({:.2}%), regeneration byte-identical: {identical}, generation {gen_secs:.1}s (bar: >=99%, identical, <60s)",
            rate * 100.0
        ),
    );
}

#[test]
fn seen_class_learning() {
    let _guard = timed_lock();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let started = Instant::now();
    generate_dataset(&data, 100, 0.75, 0).unwrap();
    let dataset = load_dataset(&data).unwrap();
    let config = TrainConfig::default();
    let outcome = run_seen_class(&dataset, &config).unwrap();
    let mins = started.elapsed().as_secs_f64() / 60.0;
    let m = outcome.test.overall;
    verdict(
        5,
        "seen-class learning",
        m.accuracy() >= 0.90 && m.tpr() >= 0.85 && m.tnr() >= 0.85 && mins < 30.0,
        &format!(
            "test pairs {}: accuracy {:.4}, tpr {:.4}, tnr {:.4} in {mins:.1} min (bars 0.90/0.85/0.85/30 min); final train loss {:.4}",
            m.total(),
            m.accuracy(),
            m.tpr(),
            m.tnr(),
            outcome.curve.last().unwrap()
        ),
    );
}

#[test]
fn open_set_learning() {
    let _guard = timed_lock();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&data, 32, 0.75, 0).unwrap();
    let dataset = load_dataset(&data).unwrap();
    let mut config = TrainConfig::default();
    config.epochs = 15;
    let outcome = run_open_set(&dataset, &config).unwrap();
    assert_eq!(outcome.rows.len(), 14);
    let accuracies: Vec<f64> = outcome
        .rows
        .iter()
        .map(|r| r.held_out_metrics.accuracy())
        .collect();
    let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
    let min = accuracies.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = accuracies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        6,
        "open-set learning",
        mean >= 0.60,
        &format!(
            "mean held-out accuracy {mean:.4} over 14 leave-one-class-out runs (range {min:.2}..{max:.2}, bar 0.60, balanced-pair chance 0.50)"
        ),
    );
}

#[test]
fn embedding_export() {
    let _guard = timed_lock();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&data, 12, 0.75, 0).unwrap();
    let dataset = load_dataset(&data).unwrap();
    let mut config = TrainConfig::default();
    config.epochs = 10;
    config.model.text_dims = vec![32, 2];
    let first = run_embedding(&dataset, &config).unwrap();
    let second = run_embedding(&dataset, &config).unwrap();

    let deterministic = first.points == second.points;
    assert_eq!(first.points.len(), 14);
    let mut distinct = true;
    for i in 0..first.points.len() {
        for j in i + 1..first.points.len() {
            distinct &= first.points[i].1 != first.points[j].1;
        }
    }

    // Linear separability of car vs truck points, logged but not gated: a
    // pocket perceptron over (x, y, 1) features.
    let labeled: Vec<([f64; 3], f64)> = first
        .points
        .iter()
        .map(|(class, p)| {
            let y = match class.vehicle_type {
                VehicleType::Car => -1.0,
                VehicleType::Truck => 1.0,
            };
            ([p[0], p[1], 1.0], y)
        })
        .collect();
    let mut w = [0.0f64; 3];
    let mut separable = false;
    'epochs: for _ in 0..2000 {
        let mut clean = true;
        for (f, y) in &labeled {
            let s = w[0] * f[0] + w[1] * f[1] + w[2] * f[2];
            if s * y <= 0.0 {
                clean = false;
                for k in 0..3 {
                    w[k] += y * f[k];
                }
            }
        }
        if clean {
            separable = true;
            break 'epochs;
        }
    }

    verdict(
        7,
        "embedding export",
        distinct && deterministic,
        &format!(
            "14 two-dimensional points, all distinct: {distinct}, re-run identical: {deterministic}; car/truck linearly separable: {separable} (logged, not gated)"
        ),
    );
}

fn run_cli(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_vtmatch"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "vtmatch {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn cli_determinism() {
    let _guard = timed_lock();
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("train.cfg"), "epochs = 2\n").unwrap();
    std::fs::write(dir.path().join("os.cfg"), "epochs = 1\n").unwrap();
    std::fs::write(dir.path().join("emb.cfg"), "epochs = 1\ntext_dims = 32,2\n").unwrap();

    for run in ["a", "b"] {
        let root = dir.path().join(run);
        std::fs::create_dir(&root).unwrap();
        run_cli(
            &["gen-data", "--out", "data", "--per-class", "4", "--train-fraction", "0.75", "--seed", "9"],
            &root,
        );
        run_cli(
            &["train", "--data", "data", "--config", "../train.cfg", "--out", "model.vtm", "--curve", "curve.csv"],
            &root,
        );
        run_cli(
            &["eval", "--data", "data", "--model", "model.vtm", "--out", "eval.csv"],
            &root,
        );
        run_cli(
            &["openset", "--data", "data", "--config", "../os.cfg", "--out", "os.csv"],
            &root,
        );
        run_cli(
            &["embed", "--data", "data", "--config", "../emb.cfg", "--out", "emb.csv", "--svg", "emb.svg"],
            &root,
        );
    }

    let mut files: Vec<String> = vec![
        "data/manifest.jsonl".into(),
        "model.vtm".into(),
        "model.vtm.config".into(),
        "curve.csv".into(),
        "eval.csv".into(),
        "os.csv".into(),
        "os.cross.csv".into(),
        "emb.csv".into(),
        "emb.svg".into(),
    ];
    let dataset = load_dataset(&dir.path().join("a/data")).unwrap();
    files.extend(dataset.chips.iter().map(|c| format!("data/{}", c.record.path)));

    let mut identical = true;
    for rel in &files {
        let left = std::fs::read(dir.path().join("a").join(rel)).unwrap();
        let right = std::fs::read(dir.path().join("b").join(rel)).unwrap();
        identical &= left == right;
    }
    verdict(
        8,
        "CLI determinism",
        identical,
        &format!(
            "all five subcommands repeated with identical inputs: {} files byte-identical across runs",
            files.len()
        ),
    );
}
