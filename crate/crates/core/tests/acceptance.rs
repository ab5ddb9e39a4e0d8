//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and fails if any criterion fails.
//!
//! `WNET_ACCEPTANCE=3,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wnet::data::{generate_synthetic, SyntheticSceneSpec};
use wnet::evaluation::{connected_components, lesion_match, overlap_eta, pixel_metrics, pr_curve};
use wnet::loss::{class_balanced_bce, Reduction};
use wnet::models::{build, count_params_for, is_trainable, shape_trace, Arch, Mode, ModelParams, ModelSpec, Task};
use wnet::preprocess::ImageRecord;
use wnet::tensor::Tensor;
use wnet::training::{
    activation_pattern, adam_step, batch_loss, batch_tensors, cross_validate, evaluate_samples, loss_and_grads, make_folds, prepare_samples,
    sweep_omega, train_records, AdamState, EpochStats, RunConfig,
};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn say(line: &str) {
    // Bypasses the test harness capture so the lines always reach the log.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ---------------------------------------------------------------- 1

/// Output sizes transcribed from the published configuration table, as
/// (layer, channels, side). Upsampling rows list no channel count there.
fn published_table() -> Vec<(String, Option<usize>, usize)> {
    let mut rows: Vec<(String, Option<usize>, usize)> = [
        ("enc.conv1", Some(32), 576),
        ("enc.conv2", Some(32), 576),
        ("enc.pool1", None, 288),
        ("enc.conv3", Some(64), 288),
        ("enc.conv4", Some(64), 288),
        ("enc.pool2", None, 144),
        ("enc.conv5", Some(128), 144),
        ("enc.conv6", Some(128), 144),
        ("enc.pool3", None, 72),
        ("enc.conv7", Some(256), 72),
        ("enc.conv8", Some(256), 72),
    ]
    .into_iter()
    .map(|(n, c, s)| (n.to_string(), c, s))
    .collect();
    for p in ["dec_a", "dec_b"] {
        rows.extend([
            (format!("{p}.up1"), None, 144),
            (format!("{p}.conv1"), Some(128), 144),
            (format!("{p}.conv2"), Some(128), 144),
            (format!("{p}.up2"), None, 288),
            (format!("{p}.conv3"), Some(64), 288),
            (format!("{p}.conv4"), Some(64), 288),
            (format!("{p}.up3"), None, 576),
            (format!("{p}.conv5"), Some(32), 576),
            (format!("{p}.conv6"), Some(32), 576),
            (format!("{p}.conv7"), Some(2), 576),
        ]);
    }
    rows
}

fn criterion_1() -> Outcome {
    let trace = shape_trace(&ModelSpec::new(Arch::Wnet, 576)).map_err(|e| e.to_string())?;
    let got: BTreeMap<&str, &Vec<usize>> = trace.iter().map(|(k, v)| (k.as_str(), v)).collect();
    let table = published_table();
    for (layer, channels, side) in &table {
        let s = got.get(layer.as_str()).ok_or_else(|| format!("{layer} missing from trace"))?;
        check(s.len() == 4 && s[2] == *side && s[3] == *side, || format!("{layer}: {s:?}, want side {side}"))?;
        if let Some(c) = channels {
            check(s[1] == *c, || format!("{layer}: {} channels, want {c}", s[1]))?;
        }
    }
    for head in ["dec_a.out", "dec_b.out"] {
        check(got.get(head) == Some(&&vec![1, 2, 576, 576]), || format!("{head}: {:?}", got.get(head)))?;
    }
    Ok(format!("{} table rows match", table.len()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let w_spec = ModelSpec::new(Arch::Wnet, 576);
    let s_spec = ModelSpec::new(Arch::Snet, 576);
    let w = count_params_for(&w_spec);
    let s = count_params_for(&s_spec);
    let published = (2.9e6, 4.1e6);
    let within = |n: f64, want: f64| (n - want).abs() <= 0.15 * want;
    check(w < 2 * s, || format!("W-net {w} not below two S-nets {}", 2 * s))?;
    check(within(w as f64, published.0), || format!("W-net {w} outside 2.9M +/- 15%"))?;
    check(within(2.0 * s as f64, published.1), || format!("two S-nets {} outside 4.1M +/- 15%", 2 * s))?;
    let norm = |spec: &ModelSpec| {
        let no_norm = ModelSpec {
            normalization: false,
            ..spec.clone()
        };
        count_params_for(spec) - count_params_for(&no_norm)
    };
    Ok(format!(
        "W-net {w}, S-net {s} (x2 = {}); includes {} / {} batch-norm scale+shift, excludes running statistics",
        2 * s,
        norm(&w_spec),
        norm(&s_spec)
    ))
}

// ---------------------------------------------------------------- 3

fn synthetic(n: usize, size: usize, seed: u64) -> Vec<ImageRecord> {
    generate_synthetic(&SyntheticSceneSpec::with_size(size), n, seed).expect("synthetic data")
}

fn criterion_3() -> Outcome {
    let cfg = RunConfig {
        omega: 0.6,
        lambda_od: 0.7,
        lambda_ex: 0.9,
        background_weight: 0.0,
        augment: false,
        ..RunConfig::desk()
    };
    let spec = cfg.model_spec();
    let tasks = spec.tasks();
    let recs = synthetic(1, 64, 11);
    let samples = prepare_samples(&recs, &cfg.preprocess(), &tasks).map_err(|e| e.to_string())?;
    let refs: Vec<_> = samples.iter().collect();
    let (x, labels) = batch_tensors::<f64>(&refs, &tasks).map_err(|e| e.to_string())?;
    let params: ModelParams<f64> = build(&spec, &mut ChaCha8Rng::seed_from_u64(3)).map_err(|e| e.to_string())?;
    let dropout_seed = 17;

    let (_, grads) = loss_and_grads(&mut params.clone(), &spec, &cfg, &x, &labels, Mode::Train, dropout_seed)
        .map_err(|e| e.to_string())?;
    // Leaky ReLU and max pooling are only piecewise smooth, and a step of h
    // moves many of the network's activations across a kink. The perturbed
    // forward passes therefore keep the branch choices of the base point.
    let pattern = activation_pattern(&mut params.clone(), &spec, &cfg, &x, &labels, Mode::Train, dropout_seed)
        .map_err(|e| e.to_string())?;
    let loss_at = |p: &ModelParams<f64>| -> f64 {
        let mut p = p.clone();
        batch_loss(&mut p, &spec, &cfg, &x, &labels, Mode::Train, dropout_seed, Some(&pattern)).expect("forward")
    };

    // A convolution bias feeding a batch-norm layer has an identically zero
    // gradient (the normalisation removes any constant shift), so relative
    // error is undefined there; those are checked against zero instead.
    let normalized_bias = |name: &str| name.ends_with(".bias") && params.get(&name.replace(".bias", ".weight")).is_ok()
        && params.get(&name.replace("conv", "bn").replace(".bias", ".gamma")).is_ok();
    let candidates: Vec<&str> = params
        .names()
        .filter(|n| is_trainable(n) && !normalized_bias(n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut failures = Vec::new();
    for _ in 0..50 {
        let name = candidates[rng.gen_range(0..candidates.len())];
        let idx = rng.gen_range(0..params.get(name).unwrap().numel());
        let shifted = |d: f64| {
            let mut p = params.clone();
            p.get_mut(name).unwrap().data_mut()[idx] += d;
            loss_at(&p)
        };
        // Five-point central stencil.
        let numeric = (8.0 * (shifted(h) - shifted(-h)) - (shifted(2.0 * h) - shifted(-2.0 * h))) / (12.0 * h);
        let analytic = grads.get(name).map_or(0.0, |g| g.data()[idx]);
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale == 0.0 { 0.0 } else { (analytic - numeric).abs() / scale };
        worst = worst.max(rel);
        if !(rel <= 1e-4) {
            failures.push(format!("{name}[{idx}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}"));
        }
    }
    let bias_max = grads
        .iter()
        .filter(|(n, _)| normalized_bias(n))
        .flat_map(|(_, g)| g.data().iter().map(|v| v.abs()))
        .fold(0.0, f64::max);
    check(failures.is_empty(), || failures.join("; "))?;
    check(bias_max < 1e-9, || format!("normalised-conv bias gradient {bias_max:e} not zero"))?;
    Ok(format!("50 parameters, worst relative error {worst:.2e}; max pre-norm bias gradient {bias_max:.1e}"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let recs = synthetic(4, 64, 5);
    let mut notes = Vec::new();
    for (omega, frozen, trained) in [(0.0, "dec_b.", "dec_a."), (1.0, "dec_a.", "dec_b.")] {
        let cfg = RunConfig {
            omega,
            augment: false,
            ..RunConfig::desk()
        };
        let spec = cfg.model_spec();
        let tasks = spec.tasks();
        let samples = prepare_samples(&recs, &cfg.preprocess(), &tasks).map_err(|e| e.to_string())?;
        let mut params: ModelParams<f32> = build(&spec, &mut ChaCha8Rng::seed_from_u64(8)).map_err(|e| e.to_string())?;
        let init = params.clone();
        let mut adam = AdamState::default();
        for step in 0..10 {
            let batch: Vec<_> = samples.iter().cycle().skip(2 * step).take(2).collect();
            let (x, labels) = batch_tensors::<f32>(&batch, &tasks).map_err(|e| e.to_string())?;
            let (_, grads) = loss_and_grads(&mut params, &spec, &cfg, &x, &labels, Mode::Train, step as u64)
                .map_err(|e| e.to_string())?;
            adam_step(&mut params, &grads, &mut adam, &cfg.adam()).map_err(|e| e.to_string())?;
        }
        let mut frozen_n = 0;
        let mut moved = 0;
        for (name, t) in init.iter().filter(|(n, _)| is_trainable(n)) {
            let now = params.get(name).unwrap();
            if name.starts_with(frozen) {
                frozen_n += 1;
                let same = now.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                check(same, || format!("omega={omega}: {name} changed"))?;
            } else if name.starts_with(trained) && now != t {
                moved += 1;
            }
        }
        check(frozen_n > 0 && moved > 0, || format!("omega={omega}: vacuous check ({frozen_n} frozen, {moved} moved)"))?;
        notes.push(format!("omega={omega}: {frozen_n} {frozen}* tensors unchanged"));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut labels = vec![1.0f64; 10];
    labels.extend([0.0; 90]);
    let probs = vec![0.5f64; 100];
    let got = class_balanced_bce(&probs, &labels, 1, 0.7, Reduction::ImageSum).map_err(|e| e.to_string())?;
    let mut oracle = 0.0;
    for (&p, &y) in probs.iter().zip(&labels) {
        oracle += if y == 1.0 { -0.7 * f64::ln(p) } else { -0.3 * f64::ln(1.0 - p) };
    }
    check((got - 23.5670).abs() <= 1e-3, || format!("loss {got}"))?;
    check((oracle - 23.5670).abs() <= 1e-3, || format!("oracle {oracle}"))?;
    check((got - oracle).abs() <= 1e-12, || format!("{got} vs oracle {oracle}"))?;
    Ok(format!("{got:.4} (oracle {oracle:.4})"))
}

// ---------------------------------------------------------------- 6

const SIDE: usize = 32;

fn random_mask(rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut m = vec![false; SIDE * SIDE];
    match rng.gen_range(0..3) {
        0 => {
            let density = rng.gen_range(0.05..0.5);
            m.iter_mut().for_each(|v| *v = rng.gen_bool(density));
        }
        _ => {
            for _ in 0..rng.gen_range(1..12) {
                let (r0, c0) = (rng.gen_range(0..SIDE), rng.gen_range(0..SIDE));
                let (h, w) = (rng.gen_range(1..8), rng.gen_range(1..8));
                for r in r0..(r0 + h).min(SIDE) {
                    for c in c0..(c0 + w).min(SIDE) {
                        m[r * SIDE + c] = true;
                    }
                }
            }
        }
    }
    m
}

fn as_tensor(m: &[bool]) -> Tensor<f32> {
    Tensor::new(vec![SIDE, SIDE], m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Breadth-first flood fill over the 8-neighbourhood.
fn oracle_components(m: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; m.len()];
    let mut out = Vec::new();
    for start in 0..m.len() {
        if !m[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / SIDE) as i64, (i % SIDE) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= SIDE as i64 || nc >= SIDE as i64 {
                        continue;
                    }
                    let j = nr as usize * SIDE + nc as usize;
                    if m[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// (tp, fp, fn, detected) straight from the overlap definition.
fn oracle_lesions(pred: &[bool], gt: &[bool], sigma: f64) -> (u64, u64, u64, u64) {
    let hits = |comp: &Vec<usize>, other: &[bool]| comp.iter().filter(|&&i| other[i]).count() as f64 >= sigma * comp.len() as f64;
    let pc = oracle_components(pred);
    let gc = oracle_components(gt);
    let tp = pc.iter().filter(|c| hits(c, gt)).count() as u64;
    let det = gc.iter().filter(|c| hits(c, pred)).count() as u64;
    (tp, pc.len() as u64 - tp, gc.len() as u64 - det, det)
}

/// Trapezoid area under the curve swept through every distinct score,
/// starting from (recall 0, precision 1).
fn oracle_auc(probs: &[f32], gt: &[bool]) -> f64 {
    let mut ts: Vec<f32> = probs.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let pos = gt.iter().filter(|&&g| g).count() as f64;
    let (mut r0, mut p0, mut area) = (0.0, 1.0, 0.0);
    for t in ts {
        let tp = probs.iter().zip(gt).filter(|(&p, &g)| p >= t && g).count() as f64;
        let all = probs.iter().filter(|&&p| p >= t).count() as f64;
        let (r, p) = (tp / pos, tp / all);
        area += (r - r0) * (p + p0) / 2.0;
        r0 = r;
        p0 = p;
    }
    area
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut auc_cases = 0;
    let mut worst_real: f64 = 0.0;
    for case in 0..200 {
        let pred = random_mask(&mut rng);
        let gt = random_mask(&mut rng);
        let (pt, gtt) = (as_tensor(&pred), as_tensor(&gt));

        let ours = connected_components(&pt).map_err(|e| e.to_string())?;
        let mut ours_c = ours.components.clone();
        ours_c.iter_mut().for_each(|c| c.sort_unstable());
        ours_c.sort();
        let mut want = oracle_components(&pred);
        want.sort();
        check(ours_c == want, || format!("case {case}: components differ"))?;

        let gt_set = connected_components(&gtt).map_err(|e| e.to_string())?;
        let lm = lesion_match(&ours, &gt_set, 0.2).map_err(|e| e.to_string())?;
        let (tp, fp, fn_, det) = oracle_lesions(&pred, &gt, 0.2);
        check((lm.tp, lm.fp, lm.fn_, lm.gt_detected) == (tp, fp, fn_, Some(det)), || {
            format!("case {case}: lesion counts {lm:?} vs ({tp}, {fp}, {fn_}, {det})")
        })?;

        let pm = pixel_metrics(&pt, &gtt).map_err(|e| e.to_string())?;
        let count = |a: bool, b: bool| pred.iter().zip(&gt).filter(|(&p, &g)| p == a && g == b).count() as u64;
        let want_px = (count(true, true), count(true, false), count(false, true), Some(count(false, false)));
        check((pm.tp, pm.fp, pm.fn_, pm.tn) == want_px, || format!("case {case}: pixel counts differ"))?;

        let inter = count(true, true) as f64;
        let union = (count(true, true) + count(true, false) + count(false, true)) as f64;
        if union > 0.0 {
            let eta = overlap_eta(&pt, &gtt).map_err(|e| e.to_string())?;
            let diff = (eta - inter / union).abs();
            worst_real = worst_real.max(diff);
            check(diff <= 1e-10, || format!("case {case}: eta {eta} vs {}", inter / union))?;
        }

        if gt.iter().any(|&g| g) {
            let probs: Vec<f32> = gt
                .iter()
                .map(|&g| {
                    let noise: f32 = rng.gen_range(0.0..0.7);
                    let v = if g { 0.3 + noise } else { noise };
                    (v * 64.0).round() / 64.0
                })
                .collect();
            let probs_t = Tensor::new(vec![SIDE, SIDE], probs.clone()).unwrap();
            let auc = pr_curve(&probs_t, &gtt, None).map_err(|e| e.to_string())?.auc;
            let want = oracle_auc(&probs, &gt);
            let diff = (auc - want).abs();
            worst_real = worst_real.max(diff);
            check(diff <= 1e-10, || format!("case {case}: AUC {auc} vs {want}"))?;
            auc_cases += 1;
        }
    }
    Ok(format!("200 pairs, {auc_cases} with PR AUC; worst real deviation {worst_real:.1e}"))
}

// ---------------------------------------------------------------- 7

fn square(side: usize, r0: usize, c0: usize, k: usize) -> Tensor<f32> {
    Tensor::from_fn(&[side, side], |i| {
        let (r, c) = (i / side, i % side);
        if (r0..r0 + k).contains(&r) && (c0..c0 + k).contains(&c) {
            1.0
        } else {
            0.0
        }
    })
}

fn criterion_7() -> Outcome {
    let a = square(16, 2, 2, 6);
    let shifted = square(16, 2, 5, 6);
    let far = square(16, 10, 10, 4);
    let offset = overlap_eta(&a, &shifted).map_err(|e| e.to_string())?;
    let same = overlap_eta(&a, &a).map_err(|e| e.to_string())?;
    let disjoint = overlap_eta(&a, &far).map_err(|e| e.to_string())?;
    check(offset == 1.0 / 3.0, || format!("offset squares: {offset}"))?;
    check(same == 1.0, || format!("identity: {same}"))?;
    check(disjoint == 0.0, || format!("disjoint: {disjoint}"))?;
    Ok("offset 1/3, identity 1, disjoint 0".into())
}

// ---------------------------------------------------------------- 8 and 10

fn overfit_config() -> RunConfig {
    RunConfig {
        arch: Arch::Wnet,
        input_size: 64,
        epochs: 200,
        batch_size: 2,
        lr: 0.0005,
        adam_beta1: 0.5,
        augment: false,
        seed: 8,
        ..RunConfig::desk()
    }
}

fn overfit_run() -> Result<(Vec<EpochStats>, BTreeMap<Task, f64>, Duration), String> {
    let cfg = overfit_config();
    let recs = synthetic(8, 64, 80);
    let start = Instant::now();
    let out = train_records::<f32>(&cfg, &recs, &[]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let samples = prepare_samples(&recs, &cfg.preprocess(), &out.spec.tasks()).map_err(|e| e.to_string())?;
    let report = evaluate_samples(&out.last, &out.spec, &samples, &cfg, None, false).map_err(|e| e.to_string())?;
    let f1 = report
        .aggregate
        .iter()
        .map(|(t, a)| (*t, a.lesion_rates.f1))
        .collect();
    Ok((out.trace, f1, elapsed))
}

fn criterion_8(first: &mut Option<Vec<EpochStats>>) -> Outcome {
    let (trace, f1, elapsed) = overfit_run()?;
    let l0 = trace.first().map(|s| s.train_loss).unwrap_or(f64::NAN);
    let ln = trace.last().map(|s| s.train_loss).unwrap_or(f64::NAN);
    *first = Some(trace);
    let od = f1.get(&Task::Od).copied().unwrap_or(0.0);
    let ex = f1.get(&Task::Ex).copied().unwrap_or(0.0);
    let detail = format!(
        "lesion F1 OD {od:.4} EX {ex:.4}; loss {l0:.2} -> {ln:.4} ({:.2}%); {:.0} s",
        100.0 * ln / l0,
        elapsed.as_secs_f64()
    );
    check(od >= 0.95 && ex >= 0.95, || detail.clone())?;
    check(ln < 0.1 * l0, || detail.clone())?;
    Ok(detail)
}

fn criterion_10(first: &mut Option<Vec<EpochStats>>) -> Outcome {
    let a = match first.take() {
        Some(t) => t,
        None => overfit_run()?.0,
    };
    let (b, _, _) = overfit_run()?;
    check(a.len() == b.len(), || "trace lengths differ".into())?;
    for (x, y) in a.iter().zip(&b) {
        check(x.train_loss.to_bits() == y.train_loss.to_bits(), || {
            format!("epoch {}: {} vs {}", x.epoch, x.train_loss, y.train_loss)
        })?;
    }
    Ok(format!("{} epoch losses identical", a.len()))
}

// ---------------------------------------------------------------- 9

fn mtl_config() -> RunConfig {
    RunConfig {
        input_size: 32,
        base_channels: 8,
        epochs: 60,
        augment: false,
        seed: 9,
        ..RunConfig::desk()
    }
}

fn criterion_9() -> Outcome {
    let base = mtl_config();
    let recs = synthetic(40, 32, 900);
    let ids: Vec<String> = recs.iter().map(|r| r.id.clone()).collect();
    let plan = make_folds(&ids, 5, base.seed).map_err(|e| e.to_string())?;

    let w = cross_validate::<f32>(&RunConfig { arch: Arch::Wnet, ..base.clone() }, &plan, &recs, None)
        .map_err(|e| e.to_string())?;
    let s = cross_validate::<f32>(
        &RunConfig {
            arch: Arch::Snet,
            task: Task::Ex,
            ..base.clone()
        },
        &plan,
        &recs,
        None,
    )
    .map_err(|e| e.to_string())?;
    let w_ex = w.mean_fold_f1(Task::Ex).unwrap_or(0.0);
    let s_ex = s.mean_fold_f1(Task::Ex).unwrap_or(0.0);

    let grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
    let rows = sweep_omega::<f32>(&RunConfig { arch: Arch::Wnet, ..base }, &plan, &recs, &grid, None)
        .map_err(|e| e.to_string())?;
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.1}:{:.3}/{:.3}", r.omega, r.od_f1, r.ex_f1))
        .collect();
    let best = rows
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.mean_f1.total_cmp(&b.1.mean_f1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap();
    let ends = rows[0].mean_f1.max(rows[rows.len() - 1].mean_f1);
    let detail = format!(
        "EX F1 W-net {:.4} vs S-net {:.4}; sweep omega:OD/EX {}; best omega {}",
        w_ex,
        s_ex,
        table.join(" "),
        rows[best].omega
    );
    check(w_ex >= s_ex - 0.005, || detail.clone())?;
    check(best != 0 && best != rows.len() - 1 && rows[best].mean_f1 > ends, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- harness

#[test]
fn acceptance() {
    let only: Option<BTreeSet<usize>> = std::env::var("WNET_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().map_or(true, |s| s.contains(&n));
    let mut overfit_trace = None;
    let names = [
        "shape fidelity",
        "parameter accounting",
        "gradient correctness",
        "task isolation",
        "loss fixture",
        "metric oracle equivalence",
        "eta fixture",
        "end-to-end overfit",
        "multi-task benefit",
        "determinism",
    ];
    let mut failed = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 => criterion_8(&mut overfit_trace),
            9 => criterion_9(),
            _ => criterion_10(&mut overfit_trace),
        }))
        .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => say(&format!("PASS criterion {n:>2} {name} ({secs:.1} s): {detail}")),
            Err(detail) => {
                say(&format!("FAIL criterion {n:>2} {name} ({secs:.1} s): {detail}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
