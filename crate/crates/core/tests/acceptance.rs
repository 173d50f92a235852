//! Acceptance criteria 1-12. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use rand::Rng;
use tvkit::blocks::{apply_anisotropic, apply_isotropic, CoefficientSet, TaskVector};
use tvkit::data::{generate, kshot, parse_idx_images, parse_idx_labels, TaskSpec};
use tvkit::error::Error;
use tvkit::evalx::{accuracy, disentanglement_matrix, negation_report};
use tvkit::intrinsic::{make_random_basis, make_tv_basis, run_subspace_experiment};
use tvkit::learn::{learn_addition, search_isotropic, tune_negation, Learner, NegationSearch, Objective, TrainConfig};
use tvkit::net::{Logits, Loss};
use tvkit::partition::{apply_partitioned, make_partitions};
use tvkit::select::{select_by_gradient, GradientMode};
use tvkit::suite::{arithmetic_world, transfer_world, World};
use tvkit::tta::{adapt_ufm, sharpen, trusted_from_logits, UfmConfig};
use tvkit::tvck::{self, Container};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- 1, 2

fn gradient_identity() -> Outcome {
    let start = Instant::now();
    let model = small_model();
    let mut r = rng("accept/grad");
    let theta0 = model.init(21);
    let batch = random_batch(5, 3, 10, &mut r);
    let dense = [dense_tv("a", &theta0, 0.3, &mut r), dense_tv("b", &theta0, 0.3, &mut r)];
    let factored = [factored_tv("f", &theta0, 2, 0.4, &mut r), dense_tv("g", &theta0, 0.3, &mut r)];
    let masks = make_partitions(theta0.specs(), 3, 5).unwrap();
    let paths: [(&str, &[TaskVector], bool, bool); 4] =
        [("dense", &dense, false, false), ("factored", &factored, false, false), ("xK", &dense, true, false), ("linearized", &factored, false, true)];
    let mut worst = Vec::new();
    for (name, tvs, partitioned, linearized) in paths {
        let obj = Objective::new(&model, &theta0, tvs, partitioned.then_some(&masks), linearized).unwrap();
        let n = obj.num_coefficients();
        let x: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
        let (_, g) = obj.value_and_grad(&x, &batch, Loss::CrossEntropy).unwrap();
        let mut f = |c: &[f64]| obj.value(c, &batch, Loss::CrossEntropy).unwrap();
        let mut w: f64 = 0.0;
        for _ in 0..24 {
            let i = r.random_range(0..n);
            let fd = central_diff(&mut f, &x, i, 1e-4);
            w = w.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8));
        }
        worst.push((name, w));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, w)| *w <= 1e-4) && secs < 10.0;
    let parts: Vec<String> = worst.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    outcome(pass, format!("worst relative error over 24 coordinates: {}; {secs:.2}s", parts.join(", ")))
}

fn tangent_consistency() -> Outcome {
    let model = small_model();
    let mut r = rng("accept/tangent");
    let theta0 = model.init(22);
    let batch = random_batch(5, 3, 8, &mut r);
    let tvs = [dense_tv("a", &theta0, 0.3, &mut r), factored_tv("b", &theta0, 2, 0.3, &mut r)];

    let zero = CoefficientSet::zeros_for(&tvs, &theta0);
    let lin0 = model.linearized_forward(&theta0, &zero, &tvs, &batch).unwrap();
    let plain = model.forward(&theta0, &batch).unwrap();
    let bitwise = lin0.data.iter().zip(&plain.data).all(|(a, b)| a.to_bits() == b.to_bits());

    let dir = gaussian_like(&theta0, 1.0, &mut r);
    let j = model.jvp(&theta0, &dir, &batch).unwrap();
    let h = 1e-4;
    let shifted = |s: f64| -> Vec<Vec<f64>> {
        theta0.to_f64().iter().zip(dir.to_f64()).map(|(t, d)| t.iter().zip(&d).map(|(a, b)| a + s * b).collect()).collect()
    };
    let fp = model.forward64(&shifted(h), &batch).unwrap();
    let fm = model.forward64(&shifted(-h), &batch).unwrap();
    let jvp_err = j
        .data
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let fd = (fp.data[k] - fm.data[k]) / (2.0 * h);
            (v - fd).abs() / v.abs().max(fd.abs()).max(1e-6)
        })
        .fold(0.0, f64::max);

    // three points along each coefficient are collinear in the tangent model
    let obj = Objective::new(&model, &theta0, &tvs, None, true).unwrap();
    let n = obj.num_coefficients();
    let base: Vec<f64> = (0..n).map(|_| r.random_range(-0.5..0.5)).collect();
    let mut collinear: f64 = 0.0;
    for i in 0..n {
        let at = |t: f64| {
            let mut c = base.clone();
            c[i] += t;
            obj.logits(&c, &batch).unwrap()
        };
        let (a, b, c) = (at(0.0), at(0.7), at(1.4));
        for k in 0..a.data.len() {
            let scale = a.data[k].abs().max(c.data[k].abs()).max(1.0);
            collinear = collinear.max((a.data[k] - 2.0 * b.data[k] + c.data[k]).abs() / scale);
        }
    }
    let pass = bitwise && jvp_err <= 1e-4 && collinear < 1e-6;
    outcome(pass, format!("zero-offset bitwise {bitwise}; JVP error {jvp_err:.1e}; collinearity residual {collinear:.1e}"))
}

// ---------------------------------------------------------------- 3, 4, 6

struct ArithmeticSeed {
    iso: f64,
    aniso: f64,
    addition_time: Duration,
    target_pre: f64,
    target_neg: f64,
    retention_ok: usize,
    retention_min: f64,
    retention_mean: f64,
    tasks: usize,
    xi_learned: f64,
    xi_searched: f64,
}

fn per_tv(c: &CoefficientSet, i: usize) -> CoefficientSet {
    let m = c.num_blocks();
    CoefficientSet {
        tv_ids: vec![c.tv_ids[i].clone()],
        block_names: c.block_names.clone(),
        partitions: 1,
        values: c.values[i * m..(i + 1) * m].to_vec(),
        partition_seed: None,
    }
}

fn arithmetic_seed(w: &World) -> ArithmeticSeed {
    let seed = w.seed;
    let start = Instant::now();
    let iso = search_isotropic(&w.model, &w.theta0, &w.tvs, &w.val_sets()).unwrap();
    let iso_theta = apply_isotropic(&w.theta0, iso.alpha as f32, &w.tvs).unwrap();
    let cfg = TrainConfig { epochs: 20, batch_size: 64, seed, ..TrainConfig::default() };
    let learned = learn_addition(&w.model, &w.theta0, &w.tvs, &w.val_sets(), &cfg).unwrap();
    let aniso_theta = learned.compose(&w.theta0, &w.tvs).unwrap();
    let addition_time = start.elapsed();

    let n = w.tvs.len();
    let iso_c = CoefficientSet::uniform_for(&w.tvs, &w.theta0, iso.alpha as f32);
    let lm: Vec<_> = (0..n).map(|i| (per_tv(&learned.coeffs, i), w.tvs[i].clone())).collect();
    let im: Vec<_> = (0..n).map(|i| (per_tv(&iso_c, i), w.tvs[i].clone())).collect();
    let xi_learned = disentanglement_matrix(&w.model, &w.theta0, &lm, &w.test_sets()).unwrap().mean();
    let xi_searched = disentanglement_matrix(&w.model, &w.theta0, &im, &w.test_sets()).unwrap().mean();

    let (mut pre, mut neg, mut ok, mut min_ret, mut sum_ret) = (0.0, 0.0, 0, f64::INFINITY, 0.0);
    let ncfg = TrainConfig { epochs: 20, batch_size: 32, seed, ..TrainConfig::default() };
    for (tv, task) in w.tvs.iter().zip(&w.tasks) {
        let (rep, _) = tune_negation(&w.model, &w.theta0, tv, &task.val, &w.pretrain.val, &ncfg, &NegationSearch::default()).unwrap();
        let edited = rep.compose(&w.theta0, std::slice::from_ref(tv)).unwrap();
        let r = negation_report(&w.model, &w.theta0, &edited, &task.test, &w.pretrain.test).unwrap();
        pre += r.target_pretrained;
        neg += r.target;
        ok += usize::from(r.pass);
        min_ret = min_ret.min(r.retention);
        sum_ret += r.retention;
    }
    ArithmeticSeed {
        iso: w.mean_test_accuracy(&iso_theta).unwrap(),
        aniso: w.mean_test_accuracy(&aniso_theta).unwrap(),
        addition_time,
        target_pre: pre / n as f64,
        target_neg: neg / n as f64,
        retention_ok: ok,
        retention_min: min_ret,
        retention_mean: sum_ret / n as f64,
        tasks: n,
        xi_learned,
        xi_searched,
    }
}

// ---------------------------------------------------------------- 5, 7, 10

struct TransferSeed {
    random_rel: Vec<f64>,
    tv_rel: Vec<f64>,
    blockwise: f64,
    whole: f64,
    zero_shot_shifted: f64,
    ufm: f64,
}

const DIMS: [usize; 3] = [1, 2, 4];

fn transfer_seed(w: &World) -> TransferSeed {
    let seed = w.seed;
    let tc = TrainConfig { epochs: 20, batch_size: 32, seed, ..TrainConfig::default() };
    let n = w.tasks.len();

    let targets = 4;
    let mut random_rel = vec![0.0; DIMS.len()];
    let mut tv_rel = vec![0.0; DIMS.len()];
    for (k, &d) in DIMS.iter().enumerate() {
        for i in 0..targets {
            let others = w.tvs_without(i);
            let (train, test) = (&w.tasks[i].train, &w.tasks[i].test);
            let rb = make_random_basis(&w.theta0, d, seed);
            random_rel[k] += run_subspace_experiment(&w.model, &w.theta0, &rb, train, test, w.finetuned_acc[i], &tc).unwrap().rel_acc;
            let plan = select_by_gradient(&w.model, &w.theta0, &others, train, d, d, GradientMode::Blockwise).unwrap();
            let tb = make_tv_basis(&others, d, &plan).unwrap();
            tv_rel[k] += run_subspace_experiment(&w.model, &w.theta0, &tb, train, test, w.finetuned_acc[i], &tc).unwrap().rel_acc;
        }
        random_rel[k] /= targets as f64;
        tv_rel[k] /= targets as f64;
    }

    let (mut blockwise, mut whole) = (0.0, 0.0);
    for i in 0..n {
        let others = w.tvs_without(i);
        let shots = kshot(&w.tasks[i], 16, seed).unwrap().batch(&w.tasks[i]);
        for mode in [GradientMode::Blockwise, GradientMode::Whole] {
            let plan = select_by_gradient(&w.model, &w.theta0, &others, &shots, 1, 1, mode).unwrap();
            let mask = plan.trainable_mask(&others, &w.theta0.block_names(), 1).unwrap();
            let rep = Learner::new(&w.model, &w.theta0, &others, &tc).trainable(mask).fit(std::slice::from_ref(&shots)).unwrap();
            let acc = accuracy(&w.model, &rep.compose(&w.theta0, &others).unwrap(), &w.tasks[i].test).unwrap();
            match mode {
                GradientMode::Blockwise => blockwise += acc,
                GradientMode::Whole => whole += acc,
            }
        }
    }

    let (mut zs, mut ufm) = (0.0, 0.0);
    for i in 0..n {
        let others = w.tvs_without(i);
        let shifted = generate(&w.specs[i].shifted(w.config.anchor_scale)).unwrap().test;
        zs += accuracy(&w.model, &w.theta0, &shifted).unwrap();
        let rep = adapt_ufm(&w.model, &w.theta0, &others, &shifted, &tc, &UfmConfig::default()).unwrap();
        ufm += accuracy(&w.model, &rep.learn.compose(&w.theta0, &others).unwrap(), &shifted).unwrap();
    }
    let n = n as f64;
    TransferSeed { random_rel, tv_rel, blockwise: blockwise / n, whole: whole / n, zero_shot_shifted: zs / n, ufm: ufm / n }
}

// ---------------------------------------------------------------- 8, 9

fn lora_equivalence() -> Outcome {
    let model = small_model();
    let mut r = rng("accept/lora");
    let theta0 = model.init(23);
    let batch = random_batch(5, 3, 12, &mut r);
    let factored: Vec<TaskVector> = (0..3).map(|i| factored_tv(&format!("f{i}"), &theta0, 2, 0.4, &mut r)).collect();
    let dense: Vec<TaskVector> = factored.iter().map(|t| TaskVector::dense(t.id.clone(), t.base_fingerprint, t.to_dense())).collect();
    let mut c = CoefficientSet::zeros_for(&factored, &theta0);
    c.values.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    let compose_gap = rel_norm_diff(&apply_anisotropic(&theta0, &c, &factored).unwrap(), &apply_anisotropic(&theta0, &c, &dense).unwrap());

    let x = c.to_f64();
    let (_, gf) = Objective::new(&model, &theta0, &factored, None, false).unwrap().value_and_grad(&x, &batch, Loss::CrossEntropy).unwrap();
    let (_, gd) = Objective::new(&model, &theta0, &dense, None, false).unwrap().value_and_grad(&x, &batch, Loss::CrossEntropy).unwrap();
    let grad_gap = gf.iter().zip(&gd).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-9)).fold(0.0, f64::max);
    outcome(compose_gap <= 1e-5 && grad_gap <= 1e-5, format!("composite relative norm gap {compose_gap:.1e}; gradient gap {grad_gap:.1e}"))
}

fn partition_containment() -> Outcome {
    let model = small_model();
    let mut r = rng("accept/partition");
    let theta0 = model.init(24);
    let tvs = [dense_tv("a", &theta0, 0.3, &mut r), factored_tv("b", &theta0, 2, 0.3, &mut r)];
    let mut c = CoefficientSet::zeros_for(&tvs, &theta0);
    let mut all_bitwise = true;
    let mut masks_ok = true;
    for seed in 0..8u64 {
        c.values.iter_mut().for_each(|v| *v = r.random_range(-2.0..2.0));
        let rep = c.replicate(4, seed).unwrap();
        let masks = make_partitions(theta0.specs(), 4, seed).unwrap();
        all_bitwise &= apply_partitioned(&theta0, &rep, &tvs, &masks).unwrap() == apply_anisotropic(&theta0, &c, &tvs).unwrap();
        for (j, spec) in theta0.specs().iter().enumerate() {
            let a = masks.assignment(j);
            let sizes = masks.sizes(j);
            // one label per element: disjoint by construction, covering if every label is valid
            masks_ok &= a.len() == spec.len() && a.iter().all(|&p| p < 4);
            masks_ok &= sizes.iter().sum::<usize>() == spec.len();
            masks_ok &= sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1;
        }
    }
    outcome(all_bitwise && masks_ok, format!("replicated composites bitwise equal: {all_bitwise}; masks disjoint, covering, balanced: {masks_ok}"))
}

// ---------------------------------------------------------------- 10 (unit part), 11

fn ufm_units() -> (bool, String) {
    let s = sharpen(&[0.64, 0.36]).unwrap();
    let sharpen_ok = (s[0] - 4.0 / 7.0).abs() < 1e-12 && (s[1] - 3.0 / 7.0).abs() < 1e-12;
    let uniform = sharpen(&[0.25; 4]).unwrap();
    let uniform_ok = uniform.iter().all(|v| (v - 0.25).abs() < 1e-15);
    let one_hot = sharpen(&[0.0, 1.0, 0.0]).unwrap() == vec![0.0, 1.0, 0.0];
    let quota = |n: usize| {
        let mut r = rng("accept/trusted");
        let mut l = Logits::zeros(n, 10);
        for i in 0..n {
            for c in 0..10 {
                l.row_mut(i)[c] = r.random_range(-1.0..1.0);
            }
            l.row_mut(i)[i % 10] += 4.0;
        }
        let t = trusted_from_logits(&l, 10, 100).unwrap();
        (0..10).map(|c| t.labels.iter().filter(|&&x| x == c).count()).collect::<Vec<_>>()
    };
    let q1000 = quota(1000).iter().all(|&k| k == 100);
    let q250 = quota(250).iter().all(|&k| k == 25);
    let ok = sharpen_ok && uniform_ok && one_hot && q1000 && q250;
    (ok, format!("sharpen examples {}, trusted 100/class {q1000}, 25/class {q250}", sharpen_ok && uniform_ok && one_hot))
}

fn persistence() -> Outcome {
    let model = small_model();
    let mut r = rng("accept/tvck");
    let theta0 = model.init(25);
    let tv = factored_tv("f", &theta0, 2, 0.3, &mut r);
    let bytes = tvck::to_bytes(&theta0).unwrap();
    let back: tvkit::BlockedTensor = tvck::from_bytes(&bytes).unwrap();
    let tv_bytes = tvck::to_bytes(&tv).unwrap();
    let tv_back: TaskVector = tvck::from_bytes(&tv_bytes).unwrap();
    let round_trip = back == theta0 && tvck::to_bytes(&back).unwrap() == bytes && tv_back == tv && tvck::to_bytes(&tv_back).unwrap() == tv_bytes;

    let mut diagnostics = Vec::new();
    let mut bad = bytes.clone();
    bad[0] = b'Q';
    diagnostics.push((Container::from_bytes(&bad), 0u64));
    let mut bad = bytes.clone();
    bad[4] = 9;
    diagnostics.push((Container::from_bytes(&bad), 4));
    diagnostics.push((Container::from_bytes(&bytes[..12]), 12));
    let cut = &bytes[..bytes.len() - 4];
    diagnostics.push((Container::from_bytes(cut), cut.len() as u64));
    let positional = diagnostics.iter().all(|(res, want)| matches!(res, Err(Error::Format { offset, .. }) if offset == want));
    let mut bad = bytes.clone();
    bad[18] = b'}';
    let json_offset = matches!(Container::from_bytes(&bad), Err(Error::Format { offset, .. }) if offset >= 16);

    let mut img = 0x0000_0803u32.to_be_bytes().to_vec();
    for d in [1u32, 2, 2] {
        img.extend(d.to_be_bytes());
    }
    img.extend([0u8, 51, 255, 102]);
    let mut lab = 0x0000_0801u32.to_be_bytes().to_vec();
    lab.extend(1u32.to_be_bytes());
    lab.push(3);
    let idx = parse_idx_images(&img).ok() == Some((1, 4, vec![0.0, 0.2, 1.0, 0.4])) && parse_idx_labels(&lab).ok() == Some(vec![3]);
    outcome(round_trip && positional && json_offset && idx, format!("round trip {round_trip}; positional diagnostics {}; IDX fixture {idx}", positional && json_offset))
}

// ---------------------------------------------------------------- 12

fn tvkit(dir: &Path, args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tvkit")).current_dir(dir).args(args).env_remove("TVKIT_THREADS").output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = |id: &str, rotation: f64, seed: u64| TaskSpec {
        id: id.into(),
        in_dim: 6,
        num_classes: 4,
        train_per_class: 50,
        val_per_class: 20,
        test_per_class: 50,
        rotation,
        shift: 2.0,
        noise: 0.2,
        domain_shift: 0.0,
        anchor_seed: 2,
        plane_seed: None,
        anchor_scale: 1.0,
        seed,
    };
    std::fs::write(d.join("t0.json"), serde_json::to_string(&spec("t0", 1.0, 3)).unwrap()).unwrap();
    std::fs::write(d.join("t1.json"), serde_json::to_string(&spec("t1", 2.0, 4)).unwrap()).unwrap();
    let commands: Vec<(Vec<&str>, &str)> = vec![
        (vec!["init", "--in-dim", "6", "--classes", "4", "--depth", "2", "--width", "16", "--emb-dim", "8", "--out", "base.tvck"], "base.tvck"),
        (vec!["gen", "--task", "t0.json", "--out", "d0.tvck"], "d0.tvck"),
        (vec!["gen", "--task", "t1.json", "--out", "d1.tvck"], "d1.tvck"),
        (vec!["finetune", "--base", "base.tvck", "--task", "d0.tvck", "--out", "ft0.tvck"], "ft0.tvck"),
        (vec!["finetune", "--base", "base.tvck", "--task", "d1.tvck", "--out", "ft1.tvck"], "ft1.tvck"),
        (vec!["finetune", "--base", "base.tvck", "--task", "d1.tvck", "--lora-rank", "2", "--epochs", "3", "--out", "lora.tvck"], "lora.tvck"),
        (vec!["diff", "--ft", "ft0.tvck", "--base", "base.tvck", "--id", "t0", "--out", "tv0.tvck"], "tv0.tvck"),
        (vec!["diff", "--ft", "ft1.tvck", "--base", "base.tvck", "--id", "t1", "--out", "tv1.tvck"], "tv1.tvck"),
        (vec!["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--out", "add.json"], "add.json"),
        (vec!["learn", "add", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--K", "3", "--budget", "1", "--out", "k3.json"], "k3.json"),
        (vec!["learn", "negate", "--base", "base.tvck", "--tv", "tv0.tvck", "--target", "d0.tvck", "--control", "d1.tvck", "--out", "neg.json"], "neg.json"),
        (vec!["learn", "fewshot", "--base", "base.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--k", "4", "--target-id", "t0", "--out", "few.json"], "few.json"),
        (vec!["learn", "tta-ufm", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--epochs", "2", "--out", "ufm.json"], "ufm.json"),
        (vec!["learn", "tta-entropy", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--epochs", "2", "--out", "ent.json"], "ent.json"),
        (vec!["eval", "acc", "--weights", "add.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--finetuned", "ft0.tvck", "--finetuned", "ft1.tvck", "--out", "acc.csv"], "acc.csv"),
        (vec!["eval", "relacc", "--abs", "70", "--ref", "80", "--out", "rel.json"], "rel.json"),
        (vec!["eval", "negation", "--base", "base.tvck", "--weights", "neg.tvck", "--target", "d0.tvck", "--control", "d1.tvck", "--out", "negation.json"], "negation.json"),
        (vec!["eval", "disentangle", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d0.tvck", "--data", "d1.tvck", "--alpha", "0.5", "--out", "xi.csv"], "xi.csv"),
        (vec!["finetune", "--base", "base.tvck", "--task", "t0.json", "--epochs", "2", "--linearized", "--out", "lin.tvck"], "lin.tvck"),
        (vec!["eval", "intrinsic", "--base", "base.tvck", "--tv", "tv0.tvck", "--tv", "tv1.tvck", "--data", "d1.tvck", "--basis", "taskvector", "--bases", "0", "1", "--seeds", "0", "1", "--ref", "90", "--epochs", "2", "--out", "int.csv"], "int.csv"),
    ];
    for (args, _) in &commands {
        let (code, log) = tvkit(d, args);
        if code != 0 {
            return outcome(false, format!("`tvkit {}` exited {code}: {log}", args.join(" ")));
        }
    }
    let mut failures = Vec::new();
    for (_, out) in &commands {
        let (code, log) = tvkit(d, &["replay", &format!("{out}.manifest.json")]);
        if code != 0 || log.contains("DIFFERS") || !log.contains("identical") {
            failures.push(out.to_string());
        }
    }
    outcome(failures.is_empty(), format!("{} commands replayed, mismatches: {failures:?}", commands.len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let start = Instant::now();
    let (arith, transfer) = std::thread::scope(|s| {
        let a: Vec<_> = SEEDS.iter().map(|&seed| s.spawn(move || arithmetic_seed(&arithmetic_world(seed).unwrap()))).collect();
        let t: Vec<_> = SEEDS.iter().map(|&seed| s.spawn(move || transfer_seed(&transfer_world(seed).unwrap()))).collect();
        (
            a.into_iter().map(|h| h.join().unwrap()).collect::<Vec<ArithmeticSeed>>(),
            t.into_iter().map(|h| h.join().unwrap()).collect::<Vec<TransferSeed>>(),
        )
    });

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    results.push((1, "gradient identity", gradient_identity()));
    results.push((2, "tangent-model consistency", tangent_consistency()));

    let gaps: Vec<f64> = arith.iter().map(|a| a.aniso - a.iso).collect();
    let add_secs: f64 = arith.iter().map(|a| a.addition_time.as_secs_f64()).sum();
    results.push((
        3,
        "task addition",
        outcome(
            mean(&gaps) >= 2.0 && add_secs < 300.0,
            format!(
                "learned {} vs searched {}; gain per seed {} (mean {:.2}); {add_secs:.1}s",
                fmt(&arith.iter().map(|a| a.aniso).collect::<Vec<_>>()),
                fmt(&arith.iter().map(|a| a.iso).collect::<Vec<_>>()),
                fmt(&gaps),
                mean(&gaps)
            ),
        ),
    ));

    let drops: Vec<f64> = arith.iter().map(|a| a.target_pre - a.target_neg).collect();
    let kept: usize = arith.iter().map(|a| a.retention_ok).sum();
    let total: usize = arith.iter().map(|a| a.tasks).sum();
    let retention: Vec<f64> = arith.iter().map(|a| 100.0 * a.retention_mean).collect();
    let min_ret = arith.iter().map(|a| a.retention_min).fold(f64::INFINITY, f64::min);
    results.push((
        4,
        "task negation",
        outcome(
            drops.iter().all(|&d| d >= 20.0) && retention.iter().all(|&r| r >= 95.0),
            format!(
                "target drop per seed {}; control retention per seed {}%; tasks individually >= 95%: {kept}/{total} (lowest {:.1}%)",
                fmt(&drops),
                fmt(&retention),
                100.0 * min_ret
            ),
        ),
    ));

    let rand_mean: Vec<f64> = (0..DIMS.len()).map(|k| mean(&transfer.iter().map(|t| t.random_rel[k]).collect::<Vec<_>>())).collect();
    let tv_mean: Vec<f64> = (0..DIMS.len()).map(|k| mean(&transfer.iter().map(|t| t.tv_rel[k]).collect::<Vec<_>>())).collect();
    results.push((
        5,
        "intrinsic dimensionality",
        outcome(
            tv_mean.iter().zip(&rand_mean).all(|(t, r)| t >= r),
            format!("relative accuracy at d = {DIMS:?}: task-vector bases {} vs random {}", fmt(&tv_mean), fmt(&rand_mean)),
        ),
    ));

    let xl = mean(&arith.iter().map(|a| a.xi_learned).collect::<Vec<_>>());
    let xs = mean(&arith.iter().map(|a| a.xi_searched).collect::<Vec<_>>());
    results.push((6, "disentanglement", outcome(xl <= xs + 0.5, format!("mean error learned {xl:.2}% vs searched {xs:.2}%"))));

    let bw: Vec<f64> = transfer.iter().map(|t| t.blockwise).collect();
    let wh: Vec<f64> = transfer.iter().map(|t| t.whole).collect();
    results.push((
        7,
        "selection",
        outcome(mean(&bw) >= mean(&wh), format!("16-shot accuracy at b=1: blockwise {} (mean {:.2}) vs whole {} (mean {:.2})", fmt(&bw), mean(&bw), fmt(&wh), mean(&wh))),
    ));

    results.push((8, "LoRA equivalence", lora_equivalence()));
    results.push((9, "xK containment", partition_containment()));

    let ufm_gain: Vec<f64> = transfer.iter().map(|t| t.ufm - t.zero_shot_shifted).collect();
    let (units_ok, units) = ufm_units();
    results.push((
        10,
        "UFM adaptation",
        outcome(
            mean(&ufm_gain) >= 2.0 && units_ok,
            format!("gain over zero-shot per seed {} (mean {:.2}); {units}", fmt(&ufm_gain), mean(&ufm_gain)),
        ),
    ));

    results.push((11, "persistence", persistence()));
    results.push((12, "reproducibility", reproducibility()));

    println!();
    let mut failed = 0;
    for (id, name, o) in &results {
        println!("criterion {id:>2} {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
