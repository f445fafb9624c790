//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any failed.
//!
//! Golden values for the two pipeline analogs live in `tests/golden/`. Set
//! `EBKIT_BLESS=1` to (re)write them from the current run.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::json;

use ebkit::cli;
use ebkit::config::ExperimentConfig;
use ebkit::data::{read_cifar10_binary, Inputs, CIFAR10_RECORD};
use ebkit::earlybird::{detect_offline, DetectorConfig, DetectorState};
use ebkit::model::{Batch, Model, ModelConfig};
use ebkit::pruning::{
    apply_mask, compute_mask, hamming, magnitude_keep, mask_distance, pruned_count, MaskEntry,
    PruneMask, PruneScope,
};
use ebkit::tensor::gradcheck::{check_gradients, Tolerance};
use ebkit::trainer::{
    self, memory_report, percent_change, MemoryReport, Optimizer, OptimizerConfig,
};
use ebkit::{Graph, Result, Tensor, Var};

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

// --- masks -----------------------------------------------------------------

fn random_mask(r: &mut ChaCha20Rng, sizes: &[usize], p: f64) -> PruneMask {
    let entries = sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let values: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
            MaskEntry {
                name: format!("t{i}"),
                shape: vec![n],
                keep: magnitude_keep(&values, pruned_count(p, n)),
            }
        })
        .collect();
    PruneMask::new(p, 0, PruneScope::PerLayer, entries).unwrap()
}

fn metric_space() -> Outcome {
    let t0 = Instant::now();
    let mut r = rng(11);
    for trial in 0..1000 {
        let sizes: Vec<usize> = (0..r.gen_range(1..4))
            .map(|_| r.gen_range(1..200))
            .collect();
        let p = [0.1, 0.3, 0.5][trial % 3];
        let (a, b, c) = (
            random_mask(&mut r, &sizes, p),
            random_mask(&mut r, &sizes, p),
            random_mask(&mut r, &sizes, p),
        );
        let d = |x: &PruneMask, y: &PruneMask| mask_distance(x, y).unwrap().value();
        let h = |x: &PruneMask, y: &PruneMask| hamming(x, y).unwrap();
        ensure(d(&a, &a) == 0.0 && d(&b, &b) == 0.0, || {
            format!("trial {trial}: d(a,a) != 0")
        })?;
        ensure(d(&a, &b).to_bits() == d(&b, &a).to_bits(), || {
            format!("trial {trial}: asymmetric")
        })?;
        ensure(h(&a, &c) <= h(&a, &b) + h(&b, &c), || {
            format!("trial {trial}: triangle violated")
        })?;
        ensure((0.0..=1.0).contains(&d(&a, &c)), || {
            format!("trial {trial}: distance out of range")
        })?;
    }
    let took = t0.elapsed();
    ensure(took < Duration::from_secs(5), || {
        format!("took {}", secs(took))
    })?;
    Ok(format!("1000 triples in {}", secs(took)))
}

fn oracle_keep(values: &[f32], p: f64) -> Vec<u8> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (values[i].abs() as f64, values[j].abs() as f64);
        a.partial_cmp(&b).unwrap().then(i.cmp(&j))
    });
    let mut keep = vec![1u8; values.len()];
    for &i in &order[..(p * values.len() as f64).floor() as usize] {
        keep[i] = 0;
    }
    keep
}

fn mask_oracle() -> Outcome {
    let mut r = rng(12);
    let mut ties = 0;
    for case in 0..200 {
        let n = if case < 10 {
            case + 1
        } else {
            r.gen_range(1..=10_000)
        };
        let tie_heavy = case % 3 == 0;
        let values: Vec<f32> = (0..n)
            .map(|_| {
                if tie_heavy {
                    // A handful of magnitudes with both signs.
                    r.gen_range(-4i32..=4) as f32 * 0.25
                } else {
                    r.gen::<f32>() * 2.0 - 1.0
                }
            })
            .collect();
        ties += tie_heavy as usize;
        let p = [0.0, 0.1, 0.25, 0.3, 0.5, 0.9, 1.0, r.gen::<f64>()][case % 8];
        let got = magnitude_keep(&values, pruned_count(p, n));
        let want = oracle_keep(&values, p);
        ensure(got == want, || {
            format!("case {case}: n={n}, p={p} differs from the sort oracle")
        })?;
    }
    // The same selection through compute_mask on a real model.
    let model = Model::<f32>::build(&ModelConfig::vision(8, 1, 4, 4), 3).unwrap();
    let mask = compute_mask(&model, 0.3, PruneScope::PerLayer).unwrap();
    for e in mask.entries() {
        let w = model.parameter(&e.name).unwrap().tensor.data();
        ensure(e.keep == oracle_keep(w, 0.3), || {
            format!("compute_mask differs on {}", e.name)
        })?;
    }
    Ok(format!(
        "200 tensors ({ties} tie-heavy) + {} model tensors match",
        mask.entries().len()
    ))
}

// --- gradients -------------------------------------------------------------

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
}

fn rand_tensor(r: &mut ChaCha20Rng, shape: Vec<usize>, grad: bool) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect())
        .unwrap()
        .with_requires_grad(grad)
}

/// Loss = sum(out * R) for a fixed random R, so every output element matters.
fn weighted(
    r: &mut ChaCha20Rng,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>> {
    let seed = r.gen::<u64>();
    Box::new(move |g: &mut Graph<f64>, v: &[Var]| {
        let out = op(g, v)?;
        let shape = g.shape(out).to_vec();
        let n = shape.iter().product();
        let mut w = rng(seed);
        let weights = g.constant(shape, (0..n).map(|_| w.gen::<f64>() * 2.0 - 1.0).collect())?;
        let prod = g.mul(out, weights)?;
        g.sum(prod)
    })
}

fn dim(r: &mut ChaCha20Rng) -> usize {
    r.gen_range(1..=4)
}

fn gradient_case(op: &str, r: &mut ChaCha20Rng) -> Case {
    let (m, k, n, b) = (dim(r), dim(r), dim(r), dim(r));
    let t = |r: &mut ChaCha20Rng, s: Vec<usize>| rand_tensor(r, s, true);
    let (inputs, build): (
        Vec<Tensor<f64>>,
        Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
    ) = match op {
        "matmul" => (
            vec![t(r, vec![m, k]), t(r, vec![k, n])],
            weighted(r, |g, v| g.matmul(v[0], v[1])),
        ),
        "batch_matmul" => (
            vec![t(r, vec![b, m, k]), t(r, vec![b, k, n])],
            weighted(r, |g, v| g.batch_matmul(v[0], v[1], false)),
        ),
        "batch_matmul_nt" => (
            vec![t(r, vec![b, m, k]), t(r, vec![b, n, k])],
            weighted(r, |g, v| g.batch_matmul(v[0], v[1], true)),
        ),
        "add" => (
            vec![t(r, vec![m, n]), t(r, vec![m, n])],
            weighted(r, |g, v| g.add(v[0], v[1])),
        ),
        "mul" => (
            vec![t(r, vec![m, n]), t(r, vec![m, n])],
            weighted(r, |g, v| g.mul(v[0], v[1])),
        ),
        "add_bias" => (
            vec![t(r, vec![b, m, n]), t(r, vec![n])],
            weighted(r, |g, v| g.add_bias(v[0], v[1])),
        ),
        "scale" => {
            let c = r.gen::<f64>() * 4.0 - 2.0;
            (
                vec![t(r, vec![m, n])],
                weighted(r, move |g, v| g.scale(v[0], c)),
            )
        }
        "mask_mul" => {
            let f: Vec<f64> = (0..m * n)
                .map(|_| if r.gen::<bool>() { 2.0 } else { 0.0 })
                .collect();
            (
                vec![t(r, vec![m, n])],
                weighted(r, move |g, v| g.mask_mul(v[0], f.clone())),
            )
        }
        "sum" => (vec![t(r, vec![m, n])], weighted(r, |g, v| g.sum(v[0]))),
        "relu" => {
            // Keep inputs away from the kink.
            let mut x = t(r, vec![m, n]);
            for v in x.data_mut() {
                *v = v.signum() * (v.abs() + 0.05);
            }
            (vec![x], weighted(r, |g, v| g.relu(v[0])))
        }
        "gelu" => (vec![t(r, vec![m, n])], weighted(r, |g, v| g.gelu(v[0]))),
        "softmax" => {
            let axis = r.gen_range(0..3);
            (
                vec![t(r, vec![b, m + 1, n + 1])],
                weighted(r, move |g, v| g.softmax(v[0], axis)),
            )
        }
        "causal_softmax" => (
            vec![t(r, vec![b, n + 1, n + 1])],
            weighted(r, |g, v| g.causal_softmax(v[0])),
        ),
        "layer_norm" => (
            vec![t(r, vec![m, n + 1]), t(r, vec![n + 1]), t(r, vec![n + 1])],
            weighted(r, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        "embedding" => {
            let ids: Vec<usize> = (0..m + 2).map(|_| r.gen_range(0..k + 1)).collect();
            (
                vec![t(r, vec![k + 1, n])],
                weighted(r, move |g, v| g.embedding(v[0], &ids)),
            )
        }
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| r.gen_range(0..n + 1)).collect();
            (
                vec![t(r, vec![m, n + 1])],
                weighted(r, move |g, v| g.cross_entropy(v[0], &targets)),
            )
        }
        "reshape" => (
            vec![t(r, vec![m, n])],
            weighted(r, move |g, v| g.reshape(v[0], vec![n, m])),
        ),
        "permute_0213" => (
            vec![t(r, vec![b, m, k, n])],
            weighted(r, |g, v| g.permute_0213(v[0])),
        ),
        "gather_rows" => {
            let rows: Vec<usize> = (0..k + 1).map(|_| r.gen_range(0..m)).collect();
            (
                vec![t(r, vec![m, n])],
                weighted(r, move |g, v| g.gather_rows(v[0], &rows)),
            )
        }
        "prepend_token" => (
            vec![t(r, vec![b, m, n]), t(r, vec![n])],
            weighted(r, |g, v| g.prepend_token(v[0], v[1])),
        ),
        _ => unreachable!("unknown op {op}"),
    };
    Case { inputs, build }
}

const GRAD_OPS: [&str; 20] = [
    "matmul",
    "batch_matmul",
    "batch_matmul_nt",
    "add",
    "mul",
    "add_bias",
    "scale",
    "mask_mul",
    "sum",
    "relu",
    "gelu",
    "softmax",
    "causal_softmax",
    "layer_norm",
    "embedding",
    "cross_entropy",
    "reshape",
    "permute_0213",
    "gather_rows",
    "prepend_token",
];

fn gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (oi, op) in GRAD_OPS.iter().enumerate() {
        let mut r = rng(1000 + oi as u64);
        for instance in 0..50 {
            let case = gradient_case(op, &mut r);
            let report = check_gradients(&case.inputs, &case.build, Tolerance::default())
                .map_err(|e| format!("{op} #{instance}: {e}"))?;
            ensure(report.passed(), || {
                format!("{op} #{instance}: {:?}", report.mismatches[0])
            })?;
            worst = worst.max(report.max_rel_error);
            checked += report.checked;
        }
    }
    let took = t0.elapsed();
    ensure(took < Duration::from_secs(60), || {
        format!("took {}", secs(took))
    })?;
    Ok(format!(
        "{} ops x 50 instances, {checked} elements, worst rel error {worst:.1e}, {}",
        GRAD_OPS.len(),
        secs(took)
    ))
}

// --- training contracts ----------------------------------------------------

fn frozen_at_zero() -> Outcome {
    let cfg = ExperimentConfig::from_toml_str(&tiny_config("frozen", 20)).unwrap();
    let data = cfg.load_data().unwrap();
    let start = Model::<f32>::build(&cfg.model, 0).unwrap();
    let mut model = start.clone();
    let mask = compute_mask(&model, 0.5, PruneScope::PerLayer).unwrap();
    apply_mask(&mut model, &mask).unwrap();

    // Rewind contract: masked start weights are start ∘ mask, bit for bit.
    for p in model.parameters() {
        let orig = start.parameter(&p.name).unwrap().tensor.data();
        let keep = mask.entry(&p.name).map(|e| e.keep.as_slice());
        for (i, (&w, &o)) in p.tensor.data().iter().zip(orig).enumerate() {
            let expect = match keep {
                Some(k) if k[i] == 0 => 0.0,
                _ => o,
            };
            ensure(w.to_bits() == expect.to_bits(), || {
                format!("{}[{i}] not start * mask", p.name)
            })?;
        }
    }

    let mut opt = Optimizer::new(OptimizerConfig::adamw(0.01));
    let mut zeros_checked = 0;
    for epoch in 1..=20 {
        trainer::train_epoch(&mut model, &data, &mut opt, 16, 0, epoch, "frozen")
            .map_err(|e| e.to_string())?;
        for e in mask.entries() {
            let w = model.parameter(&e.name).unwrap().tensor.data();
            for (i, (&v, &k)) in w.iter().zip(&e.keep).enumerate() {
                if k == 0 {
                    ensure(v.to_bits() == 0, || {
                        format!("epoch {epoch}: {}[{i}] = {v}", e.name)
                    })?;
                    zeros_checked += 1;
                }
            }
        }
    }

    // Forward equivalence: apply_mask on the dense start weights versus
    // zeroing the same positions by hand.
    let mut masked = start.clone();
    apply_mask(&mut masked, &mask).unwrap();
    let mut manual = start.clone();
    for p in manual.parameters_mut() {
        if let Some(e) = mask.entry(&p.name) {
            for (w, &k) in p.tensor.data_mut().iter_mut().zip(&e.keep) {
                if k == 0 {
                    *w = 0.0;
                }
            }
        }
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (batch, _) = data.batch::<f32>(&idx).unwrap();
    let logits = |m: &Model<f32>, b: &Batch<f32>| {
        let mut g = Graph::new();
        let out = m.forward(&mut g, b).unwrap();
        g.value(out.logits)
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    ensure(logits(&masked, &batch) == logits(&manual, &batch), || {
        "masked forward differs from manual zeroing".into()
    })?;
    Ok(format!(
        "20 epochs, {zeros_checked} masked checks exactly 0, rewind and forward bitwise equal"
    ))
}

fn tiny_config(run_id: &str, epochs: usize) -> String {
    format!(
        r#"
run_id = "{run_id}"
model.kind = "encoder_vision"
model.depth = 1
model.d_model = 16
model.n_heads = 2
model.d_ff = 32
model.n_classes = 4
model.image_side = 8
model.channels = 1
model.patch_size = 4
data.source = "synthetic_vision"
data.seed = 3
data.n_train = 128
data.n_val = 64
data.side = 8
data.n_classes = 4
train.mode = "vision_full_train"
train.epochs = {epochs}
train.batch_size = 16
train.seed = 0
train.p = 0.3
train.optimizer.kind = "adamw"
train.optimizer.lr = 0.003
train.detector.epsilon = 0.1
train.detector.max_epochs = {epochs}
"#
    )
}

// --- pipeline analogs ------------------------------------------------------

fn check_golden(name: &str, value: serde_json::Value) -> std::result::Result<(), String> {
    let path = golden_dir().join(name);
    if std::env::var_os("EBKIT_BLESS").is_some() {
        fs::create_dir_all(golden_dir()).unwrap();
        fs::write(&path, serde_json::to_string_pretty(&value).unwrap() + "\n").unwrap();
        return Ok(());
    }
    let text = fs::read_to_string(&path)
        .map_err(|_| format!("golden {name} missing; run with EBKIT_BLESS=1"))?;
    let want: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(want == value, || {
        format!("differs from golden {name}: got {value}")
    })
}

fn run_analog(file: &str) -> std::result::Result<(trainer::RunReport, Duration), String> {
    let cfg = ExperimentConfig::load(&workspace().join("configs").join(file), &[])
        .map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let out = trainer::run_pipeline(&cfg).map_err(|e| e.to_string())?;
    Ok((out.report, t0.elapsed()))
}

fn vision_analog() -> Outcome {
    let (r, took) = run_analog("vision_analog.toml")?;
    let c = &r.config;
    ensure(
        c.train.p == 0.3
            && c.train.detector.epsilon == 0.1
            && c.train.detector.window == 1
            && c.train.epochs == 30,
        || "config drifted from p=0.3, eps=0.1, k=1, 30 epochs".into(),
    )?;
    let e = r.ticket_epoch.ok_or("detector did not fire")?;
    ensure(e < 30, || format!("fired at {e}"))?;
    let d = |epoch: usize| {
        r.distances
            .iter()
            .find(|p| p.epoch == epoch)
            .map(|p| p.distance)
    };
    let (d_e, d_2) = (
        d(e).ok_or("no distance at firing epoch")?,
        d(2).ok_or("no epoch-2 distance")?,
    );
    ensure(d_e < d_2, || {
        format!("distance at {e} ({d_e}) not below epoch 2 ({d_2})")
    })?;
    let (pruned, base) = (r.pruned_accuracy.unwrap(), r.baseline_accuracy.unwrap());
    ensure(pruned >= base - 0.03, || {
        format!("pruned {pruned} < baseline {base} - 0.03")
    })?;
    ensure(took < Duration::from_secs(300), || {
        format!("took {}", secs(took))
    })?;
    check_golden(
        "vision_analog.json",
        json!({
            "ticket_epoch": e,
            "distances": r.distances,
            "baseline_accuracy": base,
            "pruned_accuracy": pruned,
        }),
    )?;
    Ok(format!(
        "ticket at epoch {e} (d={d_e:.4} < d2={d_2:.4}), pruned {pruned:.3} vs baseline {base:.3}, {}",
        secs(took)
    ))
}

fn language_analog() -> Outcome {
    let (r, took) = run_analog("language_analog.toml")?;
    let c = &r.config;
    ensure(
        c.train.detector.epsilon == 0.01 && c.train.detector.window == 1 && c.train.epochs == 15,
        || "config drifted from eps=0.01, k=1, 15 epochs".into(),
    )?;
    ensure(c.pretrained.is_some(), || {
        "no warm-up checkpoint configured".into()
    })?;
    let e = r.ticket_epoch.ok_or("detector did not fire")?;
    ensure(2 * e <= c.train.epochs, || {
        format!("fired at {e}, not in the first half of 15")
    })?;
    ensure(took < Duration::from_secs(300), || {
        format!("took {}", secs(took))
    })?;
    let (pruned, base) = (r.pruned_accuracy.unwrap(), r.baseline_accuracy.unwrap());
    check_golden(
        "language_analog.json",
        json!({
            "ticket_epoch": e,
            "distances": r.distances,
            "baseline_accuracy": base,
            "pruned_accuracy": pruned,
        }),
    )?;
    Ok(format!(
        "ticket at epoch {e} of 15, pruned {pruned:.3} vs baseline {base:.3}, {}",
        secs(took)
    ))
}

fn memory_accounting() -> Outcome {
    let table = format!("{:.1}", percent_change(157.26, 83.61));
    ensure(table == "-46.8", || format!("157.26 -> 83.61 gave {table}"))?;
    let m = MemoryReport::from_counts(1000, &[(1000, 300)], 4);
    ensure(
        m.dense_bytes == 4000 && m.kept_payload_bytes == 2800,
        || format!("{m:?}"),
    )?;
    ensure(m.percent_change == -30.0, || {
        format!("payload change {}", m.percent_change)
    })?;
    let model = Model::<f32>::build(&ModelConfig::vision(8, 1, 4, 4), 0).unwrap();
    let zero = memory_report(
        &model,
        &compute_mask(&model, 0.0, PruneScope::PerLayer).unwrap(),
    );
    ensure(
        zero.percent_change == 0.0 && zero.kept_payload_bytes == zero.dense_bytes,
        || format!("{zero:?}"),
    )?;
    Ok("-46.8% on 157.26 -> 83.61; 4000 -> 2800 bytes = -30%; p=0 -> 0%".into())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = ExperimentConfig::from_toml_str(&tiny_config("det", 4)).unwrap();
    let mut files = Vec::new();
    for root in ["a", "b"] {
        let out = cli::cmd_run(&cfg, &dir.path().join(root), false).map_err(|e| e.to_string())?;
        let read = |f: &str| fs::read(out.dir.join(f)).unwrap();
        files.push((read(cli::REPORT_FILE), read(cli::CURVES_FILE)));
    }
    ensure(files[0].0 == files[1].0, || "report.json differs".into())?;
    ensure(files[0].1 == files[1].1, || "curves.csv differs".into())?;
    Ok(format!(
        "report.json ({} bytes) and curves.csv identical",
        files[0].0.len()
    ))
}

fn cifar_fixture() -> Vec<u8> {
    let mut bytes = Vec::new();
    for (label, salt) in [(7u8, 3usize), (0u8, 101usize)] {
        bytes.push(label);
        bytes.extend((0..3072).map(|i| ((i * 13 + salt) % 256) as u8));
    }
    bytes
}

fn cifar_reader() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("fixture.bin");
    let bytes = cifar_fixture();
    fs::write(&path, &bytes).unwrap();
    let ds = read_cifar10_binary(&path).map_err(|e| e.to_string())?;
    ensure(ds.labels() == [7, 0], || {
        format!("labels {:?}", ds.labels())
    })?;
    let Inputs::Images {
        channels,
        side,
        pixels,
    } = ds.inputs()
    else {
        return Err("not images".into());
    };
    ensure((*channels, *side) == (3, 32), || "wrong geometry".into())?;
    for rec in 0..2 {
        for i in 0..3072 {
            let want = bytes[rec * CIFAR10_RECORD + 1 + i] as f32 / 255.0;
            ensure(pixels[rec * 3072 + i].to_bits() == want.to_bits(), || {
                format!("record {rec} pixel {i}")
            })?;
        }
    }
    let bad = |name: &str, b: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, b).unwrap();
        matches!(read_cifar10_binary(&p), Err(ebkit::Error::Format { .. }))
    };
    ensure(bad("truncated.bin", &bytes[..bytes.len() - 1]), || {
        "truncated file accepted".into()
    })?;
    let mut label10 = bytes.clone();
    label10[CIFAR10_RECORD] = 10;
    ensure(bad("label10.bin", &label10), || "label 10 accepted".into())?;
    ensure(bad("empty.bin", &[]), || "empty file accepted".into())?;
    Ok("2 records bit-exact; truncated, label-10 and empty files rejected".into())
}

/// Masks over 200 elements at p = 0.5 whose consecutive distances are `steps[i] / 100`.
fn masks_with_steps(steps: &[usize]) -> Vec<PruneMask> {
    let mut keep: Vec<u8> = (0..200).map(|i| (i % 2) as u8).collect();
    let mut out = Vec::new();
    let mk = |keep: &[u8], epoch| {
        PruneMask::new(
            0.5,
            epoch,
            PruneScope::PerLayer,
            vec![MaskEntry {
                name: "w".into(),
                shape: vec![200],
                keep: keep.to_vec(),
            }],
        )
        .unwrap()
    };
    out.push(mk(&keep, 1));
    for (i, &j) in steps.iter().enumerate() {
        // Swap j kept/pruned pairs: 2j differing positions out of 200.
        for pair in 0..j {
            keep.swap(2 * pair, 2 * pair + 1);
        }
        out.push(mk(&keep, i + 2));
    }
    out
}

fn detector_equivalence() -> Outcome {
    let mut r = rng(13);
    let mut fired = 0;
    for case in 0..500 {
        let len = r.gen_range(0..25);
        let steps: Vec<usize> = (0..len).map(|_| r.gen_range(0..30)).collect();
        let series: Vec<f64> = steps.iter().map(|&j| j as f64 / 100.0).collect();
        let eps = r.gen_range(1..30) as f64 / 100.0 + 0.005;
        let k = r.gen_range(1..5);
        let max_epochs = len + 1;
        let cfg = DetectorConfig::new(eps, k, max_epochs).unwrap();

        let mut state = DetectorState::new(cfg).unwrap();
        let mut online = None;
        let mut was_found = false;
        for (i, m) in masks_with_steps(&steps).into_iter().enumerate() {
            let epoch = i + 1;
            let out = state
                .observe(epoch, m)
                .map_err(|e| e.to_string())?
                .ticket_epoch();
            ensure(!was_found || out.is_some(), || {
                format!("case {case}: detector un-fired")
            })?;
            was_found = out.is_some();
            if online.is_none() {
                online = out;
            }
            ensure(out.is_none() || out == online, || {
                format!("case {case}: ticket epoch changed")
            })?;
        }
        ensure(state.distances() == series.as_slice(), || {
            format!("case {case}: distances differ from the series")
        })?;
        let offline = detect_offline(&series, &cfg);
        ensure(online == offline, || {
            format!("case {case}: online {online:?} vs offline {offline:?}")
        })?;
        fired += online.is_some() as usize;

        let with = |eps: f64, k: usize| {
            detect_offline(&series, &DetectorConfig::new(eps, k, max_epochs).unwrap())
        };
        let never = usize::MAX;
        let at = |t: Option<usize>| t.unwrap_or(never);
        let higher_eps = with((eps + 0.1).min(0.99), k);
        ensure(at(higher_eps) <= at(offline), || {
            format!("case {case}: raising epsilon delayed the ticket")
        })?;
        let longer = with(eps, k + 1);
        ensure(at(longer) >= at(offline), || {
            format!("case {case}: raising k advanced the ticket")
        })?;
        if let Some(t) = offline {
            let mut extended = series.clone();
            extended.extend((0..5).map(|_| r.gen::<f64>()));
            let c2 = DetectorConfig::new(eps, k, max_epochs + 5).unwrap();
            ensure(detect_offline(&extended, &c2) == Some(t), || {
                format!("case {case}: suffix changed the ticket")
            })?;
        }
    }
    Ok(format!(
        "500 series agree ({fired} fired); epsilon, window and prefix monotone"
    ))
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("metric-space suite", metric_space),
        ("mask oracle", mask_oracle),
        ("gradient suite", gradient_suite),
        ("frozen-at-zero", frozen_at_zero),
        ("vision early-bird analog", vision_analog),
        ("language early-bird analog", language_analog),
        ("memory accounting", memory_accounting),
        ("determinism", determinism),
        ("CIFAR-10 reader", cifar_reader),
        ("detector equivalence", detector_equivalence),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(name, f)| {
                let f = *f;
                s.spawn(move || {
                    std::panic::catch_unwind(f).unwrap_or_else(|_| Err(format!("{name} panicked")))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mut failed = 0;
    for ((name, _), result) in criteria.iter().zip(&results) {
        match result {
            Ok(detail) => println!("[PASS] {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {name}: {detail}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
