//! One line per acceptance criterion. Long MNIST runs are gated behind
//! `TRIAGE_FULL_ACCEPTANCE=1`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::gradcheck::{self, SEEDS};
use common::*;
use rand::Rng;
use triage_core::data::{load_mnist_idx, parse_idx_images, Split, Splits, IDX_LABELS_MAGIC};
use triage_core::layers::Mode;
use triage_core::metrics::{AccuracySeries, Threshold, CONVERGENCE_FRACTION};
use triage_core::model::{ModelSpec, Network, Scope, TapPoint};
use triage_core::optim::Hyperparams;
use triage_core::persistence::{decode, encode};
use triage_core::report::*;
use triage_core::triage::*;
use triage_core::Error;

const GRAD_TOLERANCE: f64 = 1e-6;
const GRAD_BUDGET_S: f64 = 60.0;
const CONV_TOLERANCE: f64 = 1e-5;
const CONV_BUDGET_S: f64 = 60.0;
const FREEZE_EPOCHS: usize = 5;
const MEAN_TOLERANCE: f64 = 1e-6;
const MEAN_PARENTS: u64 = 10;
const STN_TOLERANCE: f64 = 1e-5;
const STN_SAMPLES: usize = 2000;
const STN_EPOCHS: usize = 12;
const STN_REDUCTION: f64 = 0.5;
const STN_BUDGET_S: f64 = 600.0;
const MNIST_TARGET: f64 = 0.985;
const MNIST_EPOCHS: usize = 15;
const MNIST_BUDGET_S: f64 = 3600.0;
const SYNTH_TARGET: f64 = 0.95;
const SYNTH_EPOCHS: usize = 10;
const SYNTH_BUDGET_S: f64 = 300.0;
const TM_MARGIN: f64 = 0.005;
const DIRECTIONAL_SEEDS: u64 = 3;
const DIRECTIONAL_COMP_EPOCHS: usize = 25;
const METRIC_SERIES: usize = 1000;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn full() -> bool {
    std::env::var("TRIAGE_FULL_ACCEPTANCE").is_ok_and(|v| v == "1")
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn mini_vgg(seed: u64) -> Network {
    Network::build(&ModelSpec::mini_vgg([32, 32, 1], 4), seed).unwrap()
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let worst = [
        gradcheck::conv_worst(SEEDS),
        gradcheck::batchnorm_worst(SEEDS, Mode::Train),
        gradcheck::batchnorm_worst(SEEDS, Mode::Eval),
        gradcheck::dense_worst(SEEDS),
        gradcheck::relu_worst(SEEDS),
        gradcheck::maxpool_worst(SEEDS),
        gradcheck::softmax_worst(SEEDS),
        gradcheck::network_worst(SEEDS).0,
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < GRAD_TOLERANCE && secs < GRAD_BUDGET_S,
        format!("worst relative error {worst:.2e} < {GRAD_TOLERANCE:e} over {SEEDS} configs per layer, {secs:.1}s < {GRAD_BUDGET_S}s"),
    )
}

fn conv_oracle() -> Outcome {
    let t = Instant::now();
    let (worst, cases) = conv_oracle_worst();
    let worst = worst.max(conv_oracle_worst_f32());
    let secs = t.elapsed().as_secs_f64();
    verdict(
        worst < CONV_TOLERANCE && secs < CONV_BUDGET_S,
        format!("{cases} shapes, max |diff| {worst:.2e} < {CONV_TOLERANCE:e}, {secs:.1}s"),
    )
}

fn freeze() -> Outcome {
    let splits = synth_splits(256, 64, 21);
    let parent = mini_vgg(21);
    let hyper = Hyperparams::default();
    let mut bad = Vec::new();
    for k in 0..5 {
        let mut child = structural_compress(&parent, k).unwrap();
        init_random(&mut child, k, 3).unwrap();
        let before = snapshot(&child);
        train_compressed(&mut child, TrainScheme::FM, FREEZE_EPOCHS, &splits, &hyper, 5).unwrap();
        let prefix = format!("block{k}.");
        bad.extend(changed(&before, &snapshot(&child)).into_iter().filter(|n| !n.starts_with(&prefix)));

        let mut child = structural_compress(&parent, k).unwrap();
        init_random(&mut child, k, 4).unwrap();
        let before = snapshot(&child);
        init_stn(&mut child, &parent, k, 1, &splits.train, &hyper, 6).unwrap();
        bad.extend(changed(&before, &snapshot(&child)).into_iter().filter(|n| !n.starts_with(&prefix)));
    }
    verdict(
        bad.is_empty(),
        format!("{FREEZE_EPOCHS} FM epochs and STN on every block; tensors changed outside the block: {bad:?}"),
    )
}

fn compression() -> Outcome {
    let parent = mini_vgg(22);
    let mut reductions = Vec::new();
    let mut ok = true;
    for k in 0..5 {
        let c = parent.spec().blocks[k].channels;
        let n = parent.spec().blocks[k].conv_count;
        let expected = (n - 1) * (9 * c * c + c + 2 * c);
        let child = structural_compress(&parent, k).unwrap();
        let got = parent.param_count() - child.param_count();
        ok &= got == expected;
        reductions.push(got);
    }
    verdict(ok, format!("reductions {reductions:?} match closed form for blocks 0..5"))
}

fn mean_parent() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..MEAN_PARENTS {
        let mut parent = mini_vgg(200 + seed);
        let mut r = rng(seed);
        for unit in parent.blocks.iter_mut().flat_map(|b| &mut b.units) {
            for b in unit.conv.bias.data_mut() {
                *b = r.gen_range(-0.5..0.5);
            }
        }
        let k = (seed % 5) as usize;
        let (slice, bias) = brute_force_mean_slice(&parent, k);
        let mut child = structural_compress(&parent, k).unwrap();
        init_mean_parent(&mut child, &parent, k, MeanVariant::GlobalSlice).unwrap();
        let unit = &child.blocks[k].units[0];
        let per_tap = unit.conv.weight.len() / 9;
        for (i, &w) in unit.conv.weight.data().iter().enumerate() {
            worst = worst.max((w as f64 - slice[i / per_tap]).abs());
        }
        for &b in unit.conv.bias.data() {
            worst = worst.max((b as f64 - bias).abs());
        }
    }
    verdict(
        worst < MEAN_TOLERANCE,
        format!("{MEAN_PARENTS} random parents, max |diff| {worst:.2e} < {MEAN_TOLERANCE:e}"),
    )
}

fn stn_fidelity() -> Outcome {
    let splits = synth_splits(64, 128, 23);
    let parent = mini_vgg(23);
    let mut worst = 0.0f64;
    for k in 0..5 {
        let mut child = structural_compress(&parent, k).unwrap();
        init_random(&mut child, k, 8).unwrap();
        let mut opt = Hyperparams::default().optimizer();
        for start in (0..128).step_by(32) {
            let x = splits.val.images.slice_outer(start, 32).unwrap();
            let mut probe = child.clone();
            let s = probe.forward_train_to_tap(&x, k, Scope::Block(k)).unwrap();
            let t = parent.infer_to_tap(&x, TapPoint::post_pool(k)).unwrap();
            let direct = direct_stn_loss(&s, &t);
            let trained = stn_step(&mut child, &parent, k, &x, &mut opt).unwrap();
            worst = worst.max((trained - direct).abs() / direct.max(1.0));
        }
    }

    // a child whose compressed layer emits the teacher's constant output
    let mut teacher = mini_vgg(24);
    let c = teacher.spec().blocks[2].channels;
    let last = teacher.blocks[2].units.last_mut().unwrap();
    last.bn.gamma.fill(0.0);
    last.bn.beta.fill(0.3);
    let mut child = structural_compress(&teacher, 2).unwrap();
    init_random(&mut child, 2, 9).unwrap();
    child.blocks[2].units[0].bn.gamma.fill(0.0);
    child.blocks[2].units[0].bn.beta.fill(0.3);
    let x = splits.val.images.slice_outer(0, 32).unwrap();
    let s = child.forward_train_to_tap(&x, 2, Scope::Block(2)).unwrap();
    let t = teacher.infer_to_tap(&x, TapPoint::post_pool(2)).unwrap();
    let zero = stn_loss(&s, &t).unwrap().0;
    verdict(
        worst < STN_TOLERANCE && zero == 0.0,
        format!("held-out batches: max relative diff {worst:.2e} < {STN_TOLERANCE:e}; matched tap ({c} channels) loss {zero}"),
    )
}

fn stn_signal() -> Outcome {
    let Some(dir) = mnist_dir() else {
        return Outcome::NotRun("MNIST IDX files not found (set MNIST_DIR or run scripts/fetch-mnist.sh)".into());
    };
    let t = Instant::now();
    let splits = Splits::mnist(&dir, 0.0, Some(STN_SAMPLES)).unwrap();
    let spec = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    let hyper = Hyperparams::default();
    let (parent, _) = train_base(&spec, &splits, &hyper, 1, 0).unwrap();
    let block = 2;
    let mut child = structural_compress(&parent, block).unwrap();
    init_random(&mut child, block, 1).unwrap();
    let trace = init_stn(&mut child, &parent, block, STN_EPOCHS, &splits.train, &hyper, 2).unwrap();
    let ratio = trace[STN_EPOCHS] / trace[0];
    let secs = t.elapsed().as_secs_f64();
    verdict(
        ratio <= 1.0 - STN_REDUCTION && secs < STN_BUDGET_S,
        format!(
            "block {block}, {STN_SAMPLES} MNIST samples: loss {:.4} -> {:.4} (ratio {ratio:.3} <= {}), {secs:.0}s < {STN_BUDGET_S}s",
            trace[0],
            trace[STN_EPOCHS],
            1.0 - STN_REDUCTION
        ),
    )
}

fn baseline() -> Outcome {
    let hyper = Hyperparams::default();
    let t = Instant::now();
    let splits = Splits::synthetic(2000, 500, 0, 0.5).unwrap();
    let spec = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    let (_, fit) = train_base(&spec, &splits, &hyper, SYNTH_EPOCHS, 0).unwrap();
    let synth = fit.test_accuracy.max();
    let synth_secs = t.elapsed().as_secs_f64();
    let synth_ok = synth >= SYNTH_TARGET && synth_secs < SYNTH_BUDGET_S;
    let synth_msg = format!(
        "synthetic CI variant {:.2}% >= {}% in {SYNTH_EPOCHS} epochs, {synth_secs:.0}s < {SYNTH_BUDGET_S}s",
        100.0 * synth,
        100.0 * SYNTH_TARGET
    );
    if !full() {
        return verdict(synth_ok, format!("{synth_msg}; full MNIST run gated by TRIAGE_FULL_ACCEPTANCE=1"));
    }
    let Some(dir) = mnist_dir() else {
        return Outcome::Fail(format!("{synth_msg}; MNIST IDX files not found"));
    };
    let t = Instant::now();
    let splits = Splits::mnist(&dir, 0.0, None).unwrap();
    let spec = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    let (_, fit) = train_base(&spec, &splits, &hyper, MNIST_EPOCHS, 0).unwrap();
    let best = fit.test_accuracy.max();
    let secs = t.elapsed().as_secs_f64();
    verdict(
        synth_ok && best >= MNIST_TARGET && secs <= MNIST_BUDGET_S,
        format!(
            "{synth_msg}; MNIST best test {:.2}% >= {}% in {MNIST_EPOCHS} epochs, {secs:.0}s <= {MNIST_BUDGET_S}s",
            100.0 * best,
            100.0 * MNIST_TARGET
        ),
    )
}

fn directional() -> Outcome {
    if !full() {
        return Outcome::NotRun(format!(
            "{DIRECTIONAL_SEEDS} seeds x 30 MNIST cells x {DIRECTIONAL_COMP_EPOCHS} epochs; set TRIAGE_FULL_ACCEPTANCE=1"
        ));
    }
    let Some(dir) = mnist_dir() else {
        return Outcome::Fail("MNIST IDX files not found".into());
    };
    let hyper = Hyperparams::default();
    let splits = Splits::mnist(&dir, 0.0, None).unwrap();
    let spec = ModelSpec::mini_vgg(splits.image_shape(), splits.class_count());
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut failures = Vec::new();
    for seed in 0..DIRECTIONAL_SEEDS {
        let (parent, fit) = train_base(&spec, &splits, &hyper, MNIST_EPOCHS, seed).unwrap();
        let base = fit.val_accuracy.max();
        let config = SuiteConfig {
            comp_epochs: DIRECTIONAL_COMP_EPOCHS,
            seed,
            jobs,
            ..SuiteConfig::default()
        };
        let results = run_triage_suite(&parent, &Grid::full(5), &config, &splits, &hyper).unwrap();
        for block in 0..5 {
            let mean = |scheme: TrainScheme| {
                let v: Vec<f64> = results
                    .iter()
                    .filter(|r| r.config.block_index == block && r.config.train == scheme)
                    .map(|r| r.max_accuracy)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            if mean(TrainScheme::TM) <= mean(TrainScheme::FM) {
                failures.push(format!("seed {seed} block {block}: TM mean <= FM mean"));
            }
        }
        for r in results.iter().filter(|r| r.config.train == TrainScheme::TM) {
            if r.max_accuracy < base - TM_MARGIN {
                failures.push(format!("seed {seed} {}: {:.4} < baseline {base:.4} - {TM_MARGIN}", r.key(), r.max_accuracy));
            }
        }
    }
    verdict(failures.is_empty(), format!("TM > FM per block and TM within {TM_MARGIN} of baseline; violations {failures:?}"))
}

fn metrics_contract() -> Outcome {
    let example = AccuracySeries::new(vec![0.5, 0.9, 0.91, 0.915]).unwrap();
    let worked = example.convergence_epoch(CONVERGENCE_FRACTION);
    let mut r = rng(25);
    let mut violations = 0;
    for _ in 0..METRIC_SERIES {
        let len = r.gen_range(1..40);
        let s = AccuracySeries::new((0..len).map(|_| r.gen_range(0.0..=1.0)).collect()).unwrap();
        let mut fracs: Vec<f64> = (0..8).map(|_| r.gen_range(0.0..=1.0)).collect();
        fracs.sort_by(f64::total_cmp);
        let epochs: Vec<usize> = fracs.iter().map(|&f| s.convergence_epoch(f)).collect();
        violations += epochs.windows(2).filter(|w| w[0] > w[1]).count();
        violations += epochs.iter().filter(|&&e| e > s.argmax() || e >= s.len()).count();
        for mode in [Threshold::Multiplicative, Threshold::Additive] {
            let e = s.convergence_epoch_with(CONVERGENCE_FRACTION, mode);
            violations += usize::from(e > s.argmax());
        }
    }
    verdict(
        worked == 2 && violations == 0,
        format!("worked example -> epoch {worked}; {METRIC_SERIES} random series, {violations} violations"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_triage"))
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    let first_s = first.to_str().unwrap();
    let common = [
        "--dataset", "synth", "--synth-train", "128", "--synth-eval", "64", "--epochs", "2", "--seed", "3", "--jobs", "1",
    ];
    run(&[&["train-base", "--out-dir", first_s], &common[..]].concat());
    run(&[
        &["triage", "--out-dir", first_s, "--blocks", "3", "--init", "stn", "--train", "tm", "--comp-epochs", "2", "--stn-epochs", "1"],
        &common[..],
    ]
    .concat());
    for command in ["train-base", "triage"] {
        let manifest = first.join(format!("manifest-{command}.json"));
        run(&[command, "--manifest", manifest.to_str().unwrap(), "--out-dir", second.to_str().unwrap()]);
    }
    let key = CellKey {
        block: 3,
        init: InitScheme::STN,
        train: TrainScheme::TM,
    };
    let read = |root: &Path| -> ExperimentResult {
        serde_json::from_str(&std::fs::read_to_string(cell_path(&root.join("cells"), key)).unwrap()).unwrap()
    };
    let (a, b) = (read(&first), read(&second));
    let bytes = std::fs::read(first.join("baseline.ckpt")).unwrap();
    let reencoded = encode(&decode(Path::new("baseline.ckpt"), &bytes).unwrap()).unwrap();
    verdict(
        a.max_accuracy.to_bits() == b.max_accuracy.to_bits() && bytes == reencoded,
        format!(
            "manifest rerun max_accuracy {} vs {} (bitwise {}); checkpoint re-encode identical: {}",
            a.max_accuracy,
            b.max_accuracy,
            a.max_accuracy.to_bits() == b.max_accuracy.to_bits(),
            bytes == reencoded
        ),
    )
}

fn formats() -> Outcome {
    use common::idx::{images, labels, valid_pair};
    let dir = tempfile::tempdir().unwrap();
    let (img, lbl) = valid_pair();
    let (a, b) = (dir.path().join("img"), dir.path().join("lbl"));
    std::fs::write(&a, &img).unwrap();
    std::fs::write(&b, &lbl).unwrap();
    let valid = load_mnist_idx(&a, &b, Split::Train).is_ok();
    let x = Path::new("fixture");
    let corruptions = [
        matches!(parse_idx_images(x, &images(IDX_LABELS_MAGIC, [2, 2, 3], &common::idx::PIXELS)), Err(Error::Format { .. })),
        matches!(parse_idx_images(x, &img[..10]), Err(Error::Truncated { .. })),
        matches!(parse_idx_images(x, &img[..img.len() - 1]), Err(Error::Truncated { .. })),
        {
            std::fs::write(&b, labels(IDX_LABELS_MAGIC, 3, &[1, 2, 3])).unwrap();
            matches!(load_mnist_idx(&a, &b, Split::Train), Err(Error::Consistency { .. }))
        },
    ];
    let corrupt_ok = corruptions.iter().filter(|&&c| c).count();

    let net = mini_vgg(26);
    let image = random_tensor::<f32>(&[32, 32, 1], &mut rng(26));
    let pgm_dir = dir.path().join("pgm");
    let (_, paths) = dump_activations(&net, &image, 1, 3, &pgm_dir).unwrap();
    let dims_ok = paths
        .iter()
        .all(|p| matches!(decode_pgm(&std::fs::read(p).unwrap()), Ok((16, 16, _))));

    let grid = Grid::full(5);
    let s = AccuracySeries::new(vec![0.5, 0.7, 0.72]).unwrap();
    let mut table = ResultsTable::new(Baseline {
        accuracy_series: s.clone(),
        test_accuracy_series: s.clone(),
        param_count: net.param_count(),
        wall_time: 0.0,
    });
    for key in grid.cells() {
        table
            .insert(ExperimentResult {
                config: TriageConfig::new(key.block, key.init, key.train, 0),
                accuracy_series: s.clone(),
                test_accuracy_series: s.clone(),
                max_accuracy: s.max(),
                convergence_epoch: 2,
                param_count_child: 0,
                wall_time: 0.0,
                stn_loss: None,
            })
            .unwrap();
    }
    let out = dir.path().join("results");
    let doc = emit_results(&table, &grid, &out, Threshold::Multiplicative).unwrap();
    let csv_rows = csv::Reader::from_path(out.join(RESULTS_CSV)).unwrap().records().count();
    let json_rows = doc.cells.len() + 1;
    verdict(
        valid && corrupt_ok == 4 && dims_ok && csv_rows == grid.len() + 1 && json_rows == grid.len() + 1,
        format!(
            "IDX valid {valid}, corruptions rejected {corrupt_ok}/4; PGM 16x16 {dims_ok}; CSV {csv_rows} / JSON {json_rows} rows for |grid| {}",
            grid.len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 12] = [
        ("gradient correctness", gradients),
        ("convolution oracle", conv_oracle),
        ("freeze soundness", freeze),
        ("compression arithmetic", compression),
        ("mean-parent fidelity", mean_parent),
        ("STN loss fidelity", stn_fidelity),
        ("STN learning signal", stn_signal),
        ("desk-scale baseline", baseline),
        ("TM over FM direction", directional),
        ("metrics contract", metrics_contract),
        ("determinism and persistence", determinism),
        ("formats", formats),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("{tag} [{}] {name}: {detail}", i + 1);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
