//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tumornet::augment::{apply_affine, AffineParams, AugmentConfig};
use tumornet::data::{parse_manifest, split, CLASS_NAMES};
use tumornet::gradcheck;
use tumornet::graph::{
    build_classifier, decode_weights, encode_weights, forward_to_endpoint, init_random, TrainablePolicy,
    WeightFileMeta, WeightStore,
};
use tumornet::metrics::f1;
use tumornet::train::{adam_update, fit, AdamConfig, TrainConfig};
use tumornet::{Error, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))
}

fn parameter_accounting() -> Outcome {
    let started = Instant::now();
    let (code, out) = common::cli(&["inspect", "--input-size", "150"]);
    let elapsed = started.elapsed();
    ensure(code == 0, || format!("inspect exited {code}"))?;
    for line in ["Total params: 22,475,427", "Trainable params: 22,454,051", "Non-trainable params: 21,376"] {
        ensure(out.contains(line), || format!("missing `{line}`"))?;
    }
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!("22,475,427 / 22,454,051 / 21,376 in {elapsed:.2?}"))
}

fn shape_anchors() -> Outcome {
    let started = Instant::now();
    let g150 = build_classifier(150, 0.5).map_err(|e| e.to_string())?;
    let g75 = build_classifier(75, 0.5).map_err(|e| e.to_string())?;
    let flat150 = g150.endpoint_shape("flatten").map_err(|e| e.to_string())?.to_vec();
    let flat75 = g75.endpoint_shape("flatten").map_err(|e| e.to_string())?.to_vec();
    ensure(flat150 == [11520], || format!("flatten at 150 is {flat150:?}"))?;
    ensure(flat75 == [1280], || format!("flatten at 75 is {flat75:?}"))?;
    // executed, not just propagated
    let w = init_random(&g150, 0);
    let x = Tensor::zeros(&[1, 150, 150, 3]);
    let mixed8 = forward_to_endpoint(&g150, &w, &x, "mixed8").map_err(|e| e.to_string())?;
    ensure(mixed8.shape() == [1, 3, 3, 1280], || format!("mixed8 is {:?}", mixed8.shape()))?;
    within(started.elapsed(), Duration::from_secs(5))?;
    Ok(format!("flatten 11520 @150, 1280 @75, mixed8 3x3x1280 in {:.2?}", started.elapsed()))
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let reports = gradcheck::run_all(20, 2024).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let mut worst: f64 = 0.0;
    for r in &reports {
        ensure(r.cases >= 20, || format!("{} ran {} cases", r.op, r.cases))?;
        ensure(r.passed(), || format!("{} relative error {:.3e} ({})", r.op, r.max_relative_error, r.worst_case))?;
        worst = worst.max(r.max_relative_error);
    }
    within(elapsed, Duration::from_secs(120))?;
    let ops: Vec<&str> = reports.iter().map(|r| r.op).collect();
    Ok(format!("{} in {elapsed:.2?}, worst relative error {worst:.2e}", ops.join(", ")))
}

fn metric_oracle() -> Outcome {
    let train = f1(0.9816, 0.9755);
    let val = f1(0.9639, 0.9592);
    ensure((train - 97.85).abs() <= 0.01, || format!("train F1 {train}"))?;
    ensure((val - 96.15).abs() <= 0.01, || format!("val F1 {val}"))?;
    Ok(format!("F1 {train:.4} and {val:.4}"))
}

fn oracle_adam(theta: f64, g: f64, m: f64, v: f64, t: i32, lr: f64) -> (f64, f64, f64) {
    let m = 0.9 * m + 0.1 * g;
    let v = 0.999 * v + 0.001 * g * g;
    let mhat = m / (1.0 - 0.9f64.powi(t));
    let vhat = v / (1.0 - 0.999f64.powi(t));
    (theta - lr * mhat / (vhat.sqrt() + 1e-7), m, v)
}

fn adam_first_step() -> Outcome {
    let hp = AdamConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draws = vec![(0.5, 3e-5)];
    // |g| >= 1e-3: below ~1e-4 the epsilon term alone exceeds the 1e-3 slack
    for _ in 0..10_000 {
        let magnitude = 10f64.powf(rng.random_range(-3.0..3.0));
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        draws.push((sign * magnitude, 10f64.powf(rng.random_range(-6.0..-1.0))));
    }
    for &(g, lr) in &draws {
        let (mut th, mut m, mut v) = ([0.25f64], [0.0], [0.0]);
        adam_update(&mut th, &[g], &mut m, &mut v, 1, lr, &hp);
        let delta = (th[0] - 0.25).abs();
        ensure(delta >= lr * (1.0 - 1e-3) && delta <= lr, || format!("g={g} lr={lr}: |dtheta|={delta}"))?;
        ensure((th[0] - 0.25).signum() == -g.signum(), || format!("g={g}: wrong direction"))?;
    }
    for &(g, lr) in draws.iter().take(200) {
        let (mut th, mut m, mut v) = ([-0.7f64], [0.0], [0.0]);
        let mut o = (-0.7, 0.0, 0.0);
        for t in 1..=2 {
            adam_update(&mut th, &[g], &mut m, &mut v, t, lr, &hp);
            o = oracle_adam(o.0, g, o.1, o.2, t as i32, lr);
            ensure((th[0] - o.0).abs() <= 1e-12, || format!("step {t}: {} vs oracle {}", th[0], o.0))?;
        }
    }
    Ok(format!("{} first steps within [lr(1-1e-3), lr]; two-step trace matches oracle", draws.len()))
}

fn overfit_capacity() -> Outcome {
    let started = Instant::now();
    let graph = build_classifier(75, 0.5).map_err(|e| e.to_string())?;
    let mut weights = init_random(&graph, 0);
    let samples = common::synthetic_samples(12, 75, 1);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 32,
        max_epochs: 300,
        patience: 300,
        policy: TrainablePolicy::HeadOnly,
        input_size: 75,
        augmentation: AugmentConfig::identity(),
        deterministic: true,
        ..TrainConfig::default()
    };
    let mut reached: Option<usize> = None;
    let outcome = fit(&graph, &mut weights, &samples, &samples, &cfg, &mut |r| {
        if r.train_accuracy == 1.0 && reached.is_none() {
            reached = Some(r.epoch);
        }
    })
    .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    // 12 samples, batch 32: one optimizer step per epoch
    ensure(outcome.steps == outcome.history.len() as u64, || "unexpected step count".into())?;
    let step = reached.ok_or_else(|| {
        let best = outcome.history.iter().map(|r| r.train_accuracy).fold(0.0, f64::max);
        format!("train accuracy peaked at {best} within {} steps", outcome.steps)
    })?;
    within(elapsed, Duration::from_secs(600))?;
    Ok(format!("train accuracy 1.0 after {step} steps, {} steps in {elapsed:.2?}", outcome.steps))
}

fn augmentation_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cfg = AugmentConfig::default();
    let flip = AffineParams {
        flip: true,
        ..AffineParams::IDENTITY
    };
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..40), rng.random_range(1..40));
        let img = Tensor::from_fn(&[h, w, 3], |_| rng.random_range(-1.0f32..1.0));
        let same = apply_affine(&img, &AffineParams::IDENTITY, &cfg).map_err(|e| e.to_string())?;
        let (aug, _) =
            tumornet::augment::augment_one(&img, &AugmentConfig::identity(), 9, 1, i).map_err(|e| e.to_string())?;
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&same) == bits(&img) && bits(&aug) == bits(&img), || format!("identity changed image {i}"))?;
        let twice = apply_affine(&apply_affine(&img, &flip, &cfg).map_err(|e| e.to_string())?, &flip, &cfg)
            .map_err(|e| e.to_string())?;
        ensure(bits(&twice) == bits(&img), || format!("double flip changed image {i}"))?;
    }
    let img = Tensor::new(vec![3, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    let quarter = AffineParams {
        theta: 90.0,
        ..AffineParams::IDENTITY
    };
    let out = apply_affine(&img, &quarter, &cfg).map_err(|e| e.to_string())?;
    for r in 0..3 {
        for c in 0..3 {
            let (got, want) = (out.data()[r * 3 + c], img.data()[c * 3 + (2 - r)]);
            ensure(got == want, || format!("90 degree output[{r}][{c}] = {got}, expected {want}"))?;
        }
    }
    Ok("identity and double flip bit-exact on 100 images; 90 degree rotation matches permutation".into())
}

fn split_law() -> Outcome {
    let counts = [("glioma", 708), ("meningioma", 1426), ("pituitary", 930)];
    let mut text = String::from("path,label,split\n");
    for (class, n) in counts {
        for i in 0..n {
            text.push_str(&format!("{class}/{i}.png,{class},\n"));
        }
    }
    let ds = parse_manifest(&text, Path::new("images"), Path::new("paper.csv")).map_err(|e| e.to_string())?;
    ensure(ds.len() == 3064, || format!("{} entries", ds.len()))?;
    let s = split(&ds, 0.8, 42, true).map_err(|e| e.to_string())?;
    ensure(s.train.len() == 2450 && s.val.len() == 614, || format!("{}/{}", s.train.len(), s.val.len()))?;
    for (c, (class, n)) in counts.iter().enumerate() {
        let got = s.train.iter().filter(|&&i| ds.entries[i].label == c).count();
        let want = (0.8 * *n as f64).floor() as usize;
        ensure(got == want, || format!("{class}: {got} train, expected {want}"))?;
        ensure(CLASS_NAMES[c] == *class, || "class order".into())?;
    }
    let again = split(&ds, 0.8, 42, true).map_err(|e| e.to_string())?;
    ensure(again == s, || "split differs for the same seed".into())?;
    Ok("2450/614 with per-class 566/1140/744; repeatable".into())
}

fn weight_round_trip() -> Outcome {
    let g = build_classifier(75, 0.5).map_err(|e| e.to_string())?;
    let w = init_random(&g, 13);
    let meta = WeightFileMeta::for_graph(&g);
    let bytes = encode_weights(&w, &meta).map_err(|e| e.to_string())?;
    let back = decode_weights(&g, &bytes).map_err(|e| e.to_string())?;
    let bits = |s: &WeightStore| {
        s.iter()
            .map(|(n, e)| (n.to_string(), e.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    ensure(bits(&back) == bits(&w), || "round trip changed values".into())?;

    let rebuild = |skip: Option<&str>, extra: bool, transpose: Option<&str>| {
        let mut s = WeightStore::new();
        for (name, e) in w.iter() {
            if Some(name) == skip {
                continue;
            }
            let mut t = e.tensor.as_ref().clone();
            if Some(name) == transpose {
                let shape = t.shape().to_vec();
                t = t.reshape(&[shape[1], shape[0]]).unwrap();
            }
            s.insert(name, t, e.trainable);
        }
        if extra {
            s.insert("extra/kernel", Tensor::zeros(&[4]), true);
        }
        decode_weights(&g, &encode_weights(&s, &meta).unwrap())
    };
    let mut names = Vec::new();
    match rebuild(Some("bn_10/beta"), false, None) {
        Err(Error::MissingWeight(n)) if n == "bn_10/beta" => names.push("missing"),
        other => return Err(format!("missing tensor gave {other:?}")),
    }
    match rebuild(None, true, None) {
        Err(Error::ExtraWeight(n)) if n == "extra/kernel" => names.push("extra"),
        other => return Err(format!("extra tensor gave {other:?}")),
    }
    match rebuild(None, false, Some("dense_0/kernel")) {
        Err(Error::WeightShape { name, .. }) if name == "dense_0/kernel" => names.push("shape"),
        other => return Err(format!("shape mismatch gave {other:?}")),
    }
    match decode_weights(&g, &bytes[..bytes.len() - 100]) {
        Err(Error::TruncatedData { .. }) => names.push("truncated"),
        other => return Err(format!("truncated data gave {:?}", other.map(|_| ()))),
    }
    Ok(format!("bit-identical round trip; distinct errors for {}", names.join(", ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let manifest = common::write_png_dataset(dir.path(), 4, 80, 6);
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        "learning_rate = 1e-3\nbatch_size = 4\nmax_epochs = 2\npolicy = \"head_only\"\ninput_size = 75\nseed = 11\ndeterministic = true\n",
    )
    .map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let (code, _) = common::cli(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        ensure(code == 0, || format!("train run {run} exited {code}"))?;
        let read = |f: &str| std::fs::read(out.join(f)).map_err(|e| e.to_string());
        outputs.push((read("run_report.json")?, read("history.csv")?));
    }
    ensure(outputs[0].0 == outputs[1].0, || "run reports differ".into())?;
    ensure(outputs[0].1 == outputs[1].1, || "history CSVs differ".into())?;
    Ok(format!("run report ({} bytes) and history identical across runs with augmentation on", outputs[0].0.len()))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter accounting", parameter_accounting),
        ("shape anchors", shape_anchors),
        ("gradient checks", gradient_checks),
        ("metric oracle", metric_oracle),
        ("adam first-step law", adam_first_step),
        ("overfit capacity", overfit_capacity),
        ("augmentation invariants", augmentation_invariants),
        ("split law", split_law),
        ("weight file round trip", weight_round_trip),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
