//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_force_hausdorff, enumerated_wilcoxon, mask_from_bits, phantom_exams, phantom_stack, rel_err};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsenet::data::{load_exam, save_exam, Exam};
use rsenet::fuse::{binarize, majority_vote};
use rsenet::metrics::{dice, evaluate_exam_set, format_row, hausdorff_mm, wilcoxon_signed_rank, WilcoxonMethod};
use rsenet::net::{self, build_network, checkpoint, se_block_forward, FeatureMap, SeParams};
use rsenet::phantom::{self, PhantomParams};
use rsenet::train::{build_samples, fit_samples, loss_and_gradient, mean_dice, soft_dice, soft_dice_loss_grad, DicePooling, TrainConfig};
use rsenet::{InputStack, Mask, ModelParams, NetworkConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_stack(h: usize, w: usize, seed: u64) -> InputStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    InputStack {
        height: h,
        width: w,
        channels: (0..3 * h * w).map(|_| rng.random_range(-1.5..1.5)).collect(),
        center_index: 0,
        exam_id: "rand".into(),
    }
}

fn c1_shape_contract() -> Outcome {
    let mut notes = Vec::new();
    for (name, cfg, size) in [("default", NetworkConfig::default(), 224), ("tiny", NetworkConfig::tiny(), 64)] {
        let model = build_network(&cfg, 0).map_err(|e| e.to_string())?;
        let start = Instant::now();
        let p = net::forward(&model, &random_stack(size, size, 1)).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        ensure!((p.height, p.width) == (size, size), "{name}: output {}x{}", p.height, p.width);
        ensure!(p.values.iter().all(|&v| v > 0.0 && v < 1.0), "{name}: value outside (0,1)");
        ensure!(secs < 10.0, "{name}: {secs:.2}s per pass");
        notes.push(format!("{name} {size}x{size} {secs:.3}s"));
    }
    Ok(notes.join(", "))
}

fn c2_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let h = 1e-5;
    let mut worst_loss = 0.0f64;
    for _ in 0..20 {
        let p: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
        let t: Vec<u8> = (0..64).map(|_| rng.random_bool(0.4) as u8).collect();
        let tf: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let (_, g) = soft_dice_loss_grad(&[&p], &[&t], 1.0, DicePooling::Batch).map_err(|e| e.to_string())?;
        for j in 0..64 {
            let (mut a, mut b) = (p.clone(), p.clone());
            a[j] += h;
            b[j] -= h;
            let fd = (soft_dice(&a, &tf, 1.0) - soft_dice(&b, &tf, 1.0)) / (2.0 * h);
            worst_loss = worst_loss.max(rel_err(g[0][j], fd, 1e-12));
        }
    }
    ensure!(worst_loss < 1e-6, "soft Dice gradient rel error {worst_loss:e}");

    let mut model = build_network(&NetworkConfig::tiny(), 21).map_err(|e| e.to_string())?;
    for (_, p) in model.params_mut() {
        if p.shape.len() == 1 {
            p.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    let (stack, mask) = phantom_stack(64, 22);
    let batch = [(&stack, &mask)];
    let cfg = TrainConfig::default();
    let loss = |m: &ModelParams| loss_and_gradient(m, &batch, &cfg).unwrap().0;
    let (_, grads) = loss_and_gradient(&model, &batch, &cfg).map_err(|e| e.to_string())?;
    let grads: Vec<Vec<f64>> = grads.named_params().iter().map(|(_, p)| p.data.clone()).collect();
    let sizes: Vec<usize> = grads.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    let hp = 1e-4;
    let mut worst_param = 0.0f64;
    let samples = 24;
    for _ in 0..samples {
        let mut j = rng.random_range(0..total);
        let g = sizes.iter().position(|&s| if j < s { true } else { j -= s; false }).unwrap();
        let mut m = model.clone();
        m.params_mut()[g].1.data[j] += hp;
        let plus = loss(&m);
        m.params_mut()[g].1.data[j] -= 2.0 * hp;
        let fd = (plus - loss(&m)) / (2.0 * hp);
        worst_param = worst_param.max(rel_err(grads[g][j], fd, 1e-8));
    }
    ensure!(worst_param < 1e-3, "parameter gradient rel error {worst_param:e}");
    Ok(format!("loss grad {worst_loss:.1e}, {samples} parameter scalars {worst_param:.1e}"))
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.random_range(0.05..0.95);
    let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    mask_from_bits(h, w, &bits)
}

fn c3_metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for case in 0..100 {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        let spacing = (rng.random_range(0.5..2.5), rng.random_range(0.5..2.5));
        let got = hausdorff_mm(&a, &b, spacing).map_err(|e| e.to_string())?;
        ensure!(got == brute_force_hausdorff(&a, &b, spacing), "hausdorff case {case}: {got:?}");
        let inter = a.values.iter().zip(&b.values).filter(|(x, y)| **x == 1 && **y == 1).count();
        let (na, nb) = (a.count(), b.count());
        let expected = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        ensure!(dice(&a, &b).map_err(|e| e.to_string())? == expected, "dice case {case}");
    }
    let mut worst = 0.0f64;
    for case in 0..50 {
        let n = rng.random_range(1..=12);
        let d: Vec<f64> = (0..n).map(|_| rng.random_range(-4i32..=4) as f64 * 0.5 + rng.random_range(-1.0..1.0) * rng.random_range(0..2) as f64).collect();
        let Ok(r) = wilcoxon_signed_rank(&d) else {
            return Err(format!("wilcoxon case {case} errored"));
        };
        let (w, p) = enumerated_wilcoxon(&d);
        if r.method == WilcoxonMethod::Exact {
            ensure!(r.w_plus == w, "wilcoxon case {case}: W+ {} vs {w}", r.w_plus);
        }
        worst = worst.max((r.p_two_sided - p).abs());
    }
    ensure!(worst <= 1e-12, "wilcoxon p deviation {worst:e}");
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 4.0, 5.0]).map_err(|e| e.to_string())?;
    ensure!(r.w_plus == 15.0 && (r.p_two_sided - 0.0625).abs() <= 1e-12, "n=5 all positive: W+ {} p {}", r.w_plus, r.p_two_sided);
    Ok(format!("100 mask pairs exact, 50 wilcoxon vectors max |dp| {worst:.1e}"))
}

fn c4_fusion() -> Outcome {
    for bits in 0u32..(1 << 12) {
        let m: Vec<Mask> = (0..3)
            .map(|k| Mask::from_fn(2, 2, |r, c| bits >> (k * 4 + r * 2 + c) & 1 == 1))
            .collect();
        let fused = majority_vote(&m).map_err(|e| e.to_string())?;
        for px in 0..4 {
            let votes = (0..3).filter(|k| bits >> (k * 4 + px) & 1 == 1).count();
            ensure!((fused.values[px] == 1) == (votes >= 2), "pattern {bits:#05x} pixel {px}");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for case in 0..1000 {
        let mut m: Vec<Mask> = (0..3).map(|_| random_mask(&mut rng, 16, 16)).collect();
        let fused = majority_vote(&m).map_err(|e| e.to_string())?;
        let mut shuffled = m.clone();
        shuffled.shuffle(&mut rng);
        ensure!(majority_vote(&shuffled).unwrap() == fused, "permutation case {case}");
        let k = rng.random_range(0..3);
        let px = rng.random_range(0..256);
        m[k].values[px] = 1;
        let grown = majority_vote(&m).unwrap();
        ensure!(fused.values.iter().zip(&grown.values).all(|(a, b)| a <= b), "monotonicity case {case}");
    }
    Ok("4096 patterns, 1000 triples".into())
}

fn c5_se_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut random_map = |c: usize| FeatureMap::from_vec(c, 7, 7, (0..c * 49).map(|_| rng.random_range(-2.0..2.0)).collect());
    let x = random_map(32);
    let y = se_block_forward(&x, &SeParams::zeros(32, 8)).map_err(|e| e.to_string())?;
    ensure!(y.data.iter().zip(&x.data).all(|(a, b)| *a == 0.5 * b), "zero-weight SE is not exactly 0.5x");
    let model = build_network(&NetworkConfig::default(), 51).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for block in &model.blocks {
        let x = random_map(block.se.channels);
        let y = se_block_forward(&x, &block.se).map_err(|e| e.to_string())?;
        for c in 0..x.channels {
            let (xp, yp) = (x.plane(c), y.plane(c));
            let (i0, _) = xp.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap();
            let s = yp[i0] / xp[i0];
            ensure!(s > 0.0 && s < 1.0, "gate {s} outside (0,1)");
            for (a, b) in xp.iter().zip(yp) {
                worst = worst.max(rel_err(s * a, *b, 1e-300));
            }
        }
    }
    ensure!(worst < 1e-6, "channelwise scaling deviation {worst:e}");
    Ok(format!("{} blocks, max rel deviation {worst:.1e}", model.blocks.len()))
}

fn all_slices(exams: &[Exam]) -> Vec<(String, usize)> {
    exams.iter().flat_map(|e| (0..e.len()).map(move |i| (e.id.clone(), i))).collect()
}

fn c6_overfit() -> Outcome {
    let exams = phantom_exams(2, 100, 64, 4);
    let samples = build_samples(&exams, &all_slices(&exams)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: 300,
        learning_rate: 2e-4,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let model = build_network(&NetworkConfig::tiny(), 0).map_err(|e| e.to_string())?;
    let out = fit_samples(model, &samples, &samples, &cfg, |_| {}).map_err(|e| e.to_string())?;
    let d = mean_dice(&out.best, &samples, 0.5).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure!(d >= 0.95, "training Dice {d:.4} after {} epochs", cfg.epochs);
    ensure!(secs <= 600.0, "{secs:.0}s");
    Ok(format!("{} stacks, training Dice {d:.4} (epoch {}), {secs:.0}s", samples.len(), out.best_epoch))
}

struct Generalization {
    test_exams: Vec<Exam>,
    fused: Vec<Vec<Mask>>,
}

fn c7_ensemble(keep: &mut Option<Generalization>) -> Outcome {
    let exams: Vec<Exam> = (0..18u64)
        .map(|i| {
            let mut p = PhantomParams::randomized(64, 64, 1000 + i);
            p.n_slices = 5;
            phantom::generate_phantom_exam(&p).unwrap()
        })
        .collect();
    let (train_ex, rest) = exams.split_at(12);
    let (val_ex, test_ex) = rest.split_at(2);
    let train = build_samples(&exams, &all_slices(train_ex)).map_err(|e| e.to_string())?;
    let val = build_samples(&exams, &all_slices(val_ex)).map_err(|e| e.to_string())?;
    let test = build_samples(&exams, &all_slices(test_ex)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let cfg = TrainConfig {
        epochs: 60,
        ..TrainConfig::default()
    };
    let mut members = Vec::new();
    let mut member_dice = Vec::new();
    for seed in 0..3 {
        let model = build_network(&NetworkConfig::tiny(), seed).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let out = fit_samples(model, &train, &val, &cfg, |_| {}).map_err(|e| e.to_string())?;
        member_dice.push(mean_dice(&out.best, &test, 0.5).map_err(|e| e.to_string())?);
        members.push(out.best);
    }
    let mut fused = Vec::new();
    let mut total = 0.0;
    for (stack, mask) in &test {
        let masks: Vec<Mask> = members.iter().map(|m| binarize(&net::forward(m, stack).unwrap(), 0.5)).collect();
        let f = majority_vote(&masks).map_err(|e| e.to_string())?;
        total += dice(&f, mask).map_err(|e| e.to_string())?;
        fused.push(f);
    }
    let ensemble = total / test.len() as f64;
    let mean = member_dice.iter().sum::<f64>() / 3.0;
    let secs = start.elapsed().as_secs_f64();
    *keep = Some(Generalization {
        test_exams: test_ex.to_vec(),
        fused: fused.chunks(5).map(<[Mask]>::to_vec).collect(),
    });
    let summary = format!(
        "{} train / {} test slices, members {:?}, ensemble {ensemble:.4}, {secs:.0}s",
        train.len(),
        test.len(),
        member_dice.iter().map(|d| (d * 1e4).round() / 1e4).collect::<Vec<_>>()
    );
    ensure!(member_dice.iter().all(|&d| d >= 0.80), "member below 0.80: {summary}");
    ensure!(ensemble >= mean - 0.02, "ensemble below mean - 0.02: {summary}");
    ensure!(secs <= 45.0 * 60.0, "{summary}");
    Ok(summary)
}

fn c8_report(gen: &Option<Generalization>) -> Outcome {
    let exams = match gen {
        Some(g) => g.test_exams.clone(),
        None => phantom_exams(4, 80, 64, 5),
    };
    let refs: Vec<Vec<Mask>> = exams.iter().map(|e| e.masks.clone().unwrap()).collect();
    if let Some(g) = gen {
        let report = evaluate_exam_set(&g.fused, &refs, &exams).map_err(|e| e.to_string())?;
        let labels: Vec<&str> = report.rows().iter().map(|r| r.label.as_str()).collect();
        ensure!(labels == ["base", "middle", "apex", "overall"], "rows {labels:?}");
    }
    let report = evaluate_exam_set(&refs, &refs, &exams).map_err(|e| e.to_string())?;
    let table = report.render_table();
    let lines: Vec<&str> = table.lines().collect();
    ensure!(lines.len() == 5, "table has {} lines", lines.len());
    let header: Vec<&str> = lines[0].split_whitespace().collect();
    ensure!(header == ["DSC", "(%)", "HD", "(mm)", "r", "BA", "Bias", "(%)"], "header {header:?}");
    for (line, label) in lines[1..].iter().zip(["Base", "Middle", "Apex", "Overall"]) {
        let cols: Vec<&str> = line.split_whitespace().collect();
        ensure!(cols.len() == 5 && cols[0] == label, "row {line:?}");
        ensure!(cols[1] == "100.00" && cols[2] == "0.00" && cols[4] == "0.00(0.00)", "row {line:?}");
    }
    let o = &report.overall;
    ensure!(o.wilcoxon_p == Some(1.0), "Wilcoxon p {:?}", o.wilcoxon_p);
    ensure!(o.ba_bias_percent == Some(0.0) && o.ba_sd_percent == Some(0.0), "BA {:?} {:?}", o.ba_bias_percent, o.ba_sd_percent);
    let csv = report.to_csv();
    ensure!(csv.lines().count() == 5, "csv rows");
    Ok(format_row(o).split_whitespace().collect::<Vec<_>>().join(" ") + &format!(" p={:?}", o.wilcoxon_p.unwrap()))
}

fn c9_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut params = PhantomParams::randomized(64, 96, 90);
    params.n_slices = 6;
    let exam = phantom::generate_phantom_exam(&params).map_err(|e| e.to_string())?;
    save_exam(&exam, &dir.path().join("exam")).map_err(|e| e.to_string())?;
    let back = load_exam(&dir.path().join("exam")).map_err(|e| e.to_string())?;
    ensure!(back.slices.len() == exam.slices.len(), "slice count");
    for (a, b) in exam.slices.iter().zip(&back.slices) {
        ensure!(a.raw_samples() == b.raw_samples(), "slice {} differs", a.index);
    }
    let masks = |e: &Exam| e.masks.as_ref().map(|m| m.iter().map(|m| m.values.clone()).collect::<Vec<_>>());
    ensure!(masks(&exam) == masks(&back), "masks differ");

    let samples = build_samples(std::slice::from_ref(&exam), &all_slices(std::slice::from_ref(&exam))).map_err(|e| e.to_string())?;
    let (train, val) = samples.split_at(4);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 2,
        seed: 4,
        ..TrainConfig::default()
    };
    let run = || fit_samples(build_network(&NetworkConfig::tiny(), 3).unwrap(), train, val, &cfg, |_| {}).unwrap();
    let (a, b) = (run(), run());
    for (x, y) in a.history.epochs.iter().zip(&b.history.epochs) {
        ensure!(rel_err(x.train_loss, y.train_loss, 1e-300) < 1e-6, "epoch {} loss {} vs {}", x.epoch, x.train_loss, y.train_loss);
    }
    ensure!(a.history.epochs.len() == 3, "history length");

    let path = dir.path().join("model.ckpt");
    checkpoint::save(&a.final_model, &path).map_err(|e| e.to_string())?;
    let loaded = checkpoint::load(&path).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (stack, _) in &samples {
        let p = net::forward(&a.final_model, stack).map_err(|e| e.to_string())?;
        let q = net::forward(&loaded, stack).map_err(|e| e.to_string())?;
        worst = p.values.iter().zip(&q.values).map(|(x, y)| rel_err(*x, *y, 1e-300)).fold(worst, f64::max);
    }
    ensure!(worst < 1e-6, "checkpoint forward deviation {worst:e}");
    Ok(format!("exam bit-exact, loss curve reproduced, checkpoint forward deviation {worst:.1e}"))
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let mut generalization = None;
    let criteria: Vec<(&str, Box<dyn FnMut() -> Outcome + '_>)> = vec![
        ("shape contract", Box::new(c1_shape_contract)),
        ("gradient fidelity", Box::new(c2_gradients)),
        ("metric oracles", Box::new(c3_metric_oracles)),
        ("fusion truth table", Box::new(c4_fusion)),
        ("SE closed form", Box::new(c5_se_closed_form)),
        ("overfit sanity", Box::new(c6_overfit)),
        ("phantom generalization and ensemble", Box::new(|| c7_ensemble(&mut generalization))),
    ];
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: std::thread::Result<Outcome>| {
        let r = r.unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        match r {
            Ok(msg) => println!("criterion {n} PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n} FAIL {name}: {msg}");
            }
        }
    };
    let mut n = 0;
    for (name, mut f) in criteria {
        n += 1;
        let r = panic::catch_unwind(AssertUnwindSafe(&mut f));
        report(n, name, r);
    }
    report(8, "report fidelity", panic::catch_unwind(AssertUnwindSafe(|| c8_report(&generalization))));
    report(9, "round trips", panic::catch_unwind(c9_round_trips));
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
