//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and fails
//! at the end if any criterion failed.
//!
//! Criteria 6, 7 and 10 train full models (three 30-epoch runs on 400
//! scenes); expect roughly half an hour on one core. Logs and density
//! reports land in the cargo target tmp dir under `acceptance/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stereospike::autodiff::{run_gradcheck_suite, SurrogateConfig, Tape};
use stereospike::events::{read_evt, write_evt, InputChunk};
use stereospike::evalx::DensityReport;
use stereospike::losses::{regression_loss, smoothness_loss, spike_penalty, LossConfig, ResidualMap};
use stereospike::model::{checkpoint, DepthMap, Mode, ModelConfig, StereoSpikeNet};
use stereospike::snn::SpikeTensor;
use stereospike::synthdata::{generate_scene, make_dataset, Dataset, SceneFamily};
use stereospike::train::{constant_baseline_mde, evaluate, run_training, TrainLog, TrainPlan};
use stereospike::{Net, Tensor};

/// Dataset seed for the training criteria; 500 scenes split 400 / 100.
const DATA_SEED: u64 = 1;
const DATA_COUNT: usize = 500;
/// Weight-initialization seed shared by every training run.
const INIT_SEED: u64 = 7;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn emit(id: usize, title: &str, o: &Outcome) {
    let verdict = if o.passed { "PASS" } else { "FAIL" };
    let line = format!("criterion {id:>2} {verdict}  {title}: {}\n", o.detail);
    let mut out = std::io::stdout();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn artifacts() -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn random_chunk(rng: &mut ChaCha8Rng, cfg: &ModelConfig, rate: f64) -> InputChunk {
    let mut c = InputChunk::zeros(cfg.in_channels / 2, cfg.input_height, cfg.input_width, 50_000);
    for v in c.data.iter_mut() {
        if rng.random_bool(rate) {
            *v = rng.random_range(1..4);
        }
    }
    c
}

fn same_bits(a: &DepthMap, b: &DepthMap) -> bool {
    a.valid == b.valid
        && a.depth.len() == b.depth.len()
        && a.depth.iter().zip(&b.depth).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let r32 = run_gradcheck_suite::<f32>(20, 11, 1e-3).unwrap();
    let r64 = run_gradcheck_suite::<f64>(20, 11, 1e-5).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = |r: &[stereospike::autodiff::GradCheckReport]| r.iter().map(|x| x.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<String> = r32
        .iter()
        .map(|r| ("f32", r))
        .chain(r64.iter().map(|r| ("f64", r)))
        .filter(|(_, r)| !r.passed() || r.instances < 20)
        .map(|(p, r)| format!("{p}/{}", r.case.name()))
        .collect();
    outcome(
        failed.is_empty() && secs < 60.0,
        format!(
            "{} cases x 20 instances, worst rel err f32 {:.2e} f64 {:.2e}, {secs:.1}s{}",
            r32.len(),
            worst(&r32),
            worst(&r64),
            if failed.is_empty() { String::new() } else { format!(", failing {}", failed.join(" ")) }
        ),
    )
}

fn surrogate_check<T: stereospike::Scalar>() -> (f64, bool) {
    let alpha = 2.0;
    let n = 10_001;
    let xs: Vec<f64> = (0..n).map(|i| -5.0 + 10.0 * i as f64 / (n - 1) as f64).collect();
    let mut tape = Tape::<T>::new();
    let x = tape.param(Tensor::from_fn(&[n], |i| T::of(xs[i])));
    let s = tape.heaviside_surrogate(x, T::zero(), SurrogateConfig::new(T::of(alpha)).unwrap());
    let binary = tape
        .value(s)
        .data()
        .iter()
        .zip(&xs)
        .all(|(v, &x)| v.as_f64() == if T::of(x) >= T::zero() { 1.0 } else { 0.0 });
    let loss = tape.sum_reduce(s);
    tape.backward(loss).unwrap();
    let grad = tape.grad(x).unwrap();
    let pi = std::f64::consts::PI;
    let err = xs
        .iter()
        .zip(grad)
        .map(|(&x, g)| {
            let xt = T::of(x).as_f64();
            let want = alpha / (2.0 * (1.0 + (pi * alpha * xt / 2.0).powi(2)));
            (g.as_f64() - want).abs()
        })
        .fold(0.0, f64::max);
    (err, binary)
}

fn surrogate() -> Outcome {
    let (e64, b64) = surrogate_check::<f64>();
    let (e32, b32) = surrogate_check::<f32>();
    outcome(
        e64 <= 1e-6 && e32 <= 1e-6 && b64 && b32,
        format!("10001-point grid, max abs err f64 {e64:.1e} f32 {e32:.1e}, forward binary {}", b64 && b32),
    )
}

fn spike_ranges() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = Vec::new();
    let mut seen_max = [0.0f64; 3];
    for pass in 0..100 {
        let mode = if pass % 4 == 3 { Mode::Monocular } else { Mode::Binocular };
        let cfg = ModelConfig { mode, base_channels: 4, ..Default::default() };
        let mut net = Net::new(cfg.clone(), pass as u64).unwrap();
        let rate = rng.random_range(0.02..0.3);
        let right = |rng: &mut ChaCha8Rng| (mode == Mode::Binocular).then(|| random_chunk(rng, &cfg, rate));
        if pass % 2 == 0 {
            // calibrated nets are active in every layer, raw draws exercise saturation
            let probes: Vec<_> = (0..2).map(|_| (random_chunk(&mut rng, &cfg, rate), right(&mut rng))).collect();
            net.calibrate(&probes, Default::default()).unwrap();
        } else {
            for w in net.layers_mut().slots_mut() {
                w.scale_in_place(rng.random_range(0.5f32..4.0));
            }
        }
        let l = random_chunk(&mut rng, &cfg, rate);
        let r = right(&mut rng);
        let (_, trace) = net.forward(&l, r.as_ref()).unwrap();
        for rec in &trace.layers {
            let (limit, slot) = if rec.name == "out_rconv" {
                (4.0, 1)
            } else if rec.name.starts_with("out_add") {
                (3.0, 2)
            } else if rec.name == "out_combined" {
                (if mode == Mode::Binocular { 2.0 } else { 1.0 }, 0)
            } else {
                (1.0, 0)
            };
            for &v in rec.snapshot.data() {
                let v = v as f64;
                if slot > 0 {
                    seen_max[slot] = seen_max[slot].max(v);
                } else if rec.name != "out_combined" {
                    seen_max[0] = seen_max[0].max(v);
                }
                if v.fract() != 0.0 || v < 0.0 || v > limit {
                    violations.push(format!("pass {pass} {} value {v}", rec.name));
                    break;
                }
            }
        }
    }
    outcome(
        violations.is_empty(),
        format!(
            "100 passes, {} violations; max seen IF {} bottleneck {} out_add {}{}",
            violations.len(),
            seen_max[0],
            seen_max[1],
            seen_max[2],
            violations.first().map(|v| format!(", first: {v}")).unwrap_or_default()
        ),
    )
}

fn statelessness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    let mut checked = 0;
    for mode in [Mode::Binocular, Mode::Monocular] {
        let cfg = ModelConfig { mode, ..Default::default() };
        let mut net = Net::new(cfg.clone(), 21).unwrap();
        let chunks: Vec<_> = (0..4)
            .map(|_| {
                let l = random_chunk(&mut rng, &cfg, 0.1);
                let r = (mode == Mode::Binocular).then(|| random_chunk(&mut rng, &cfg, 0.1));
                (l, r)
            })
            .collect();
        net.calibrate(&chunks[..2], Default::default()).unwrap();
        let run = |i: usize| net.forward(&chunks[i].0, chunks[i].1.as_ref()).unwrap().0;
        let first = run(0);
        ok &= same_bits(&first, &run(0));
        for other in 1..4 {
            run(other);
            ok &= same_bits(&first, &run(0));
            checked += 1;
        }
    }
    outcome(ok, format!("repeat and {checked} interleavings across both modes bitwise identical: {ok}"))
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (h, w) = (6, 6);
    let (mut reg_err, mut smooth_err) = (0.0f64, 0.0f64);
    let mut cases = 0;
    while cases < 50 {
        let r: Vec<f64> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let valid: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.7)).collect();
        let n = valid.iter().filter(|&&v| v).count();
        if n == 0 {
            continue;
        }
        cases += 1;
        let mut tape = Tape::<f64>::new();
        let rv = tape.param(Tensor::from_vec(&[1, h, w], r.clone()).unwrap());
        let rm = ResidualMap::new(&tape, rv, valid.clone(), h, w).unwrap();
        let reg = regression_loss(&mut tape, std::slice::from_ref(&rm)).unwrap();
        let smooth = smoothness_loss(&mut tape, std::slice::from_ref(&rm)).unwrap();

        let vals: Vec<f64> = (0..h * w).filter(|&i| valid[i]).map(|i| r[i]).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let mut naive = 0.0;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !valid[i] {
                    continue;
                }
                if x + 1 < w && valid[i + 1] {
                    naive += (r[i + 1] - r[i]).abs();
                }
                if y + 1 < h && valid[i + w] {
                    naive += (r[i + w] - r[i]).abs();
                }
            }
        }
        naive /= n as f64;
        reg_err = reg_err.max((tape.value(reg).data()[0] - var).abs());
        smooth_err = smooth_err.max((tape.value(smooth).data()[0] - naive).abs());
    }

    let mut penalty_exact = true;
    for _ in 0..50 {
        let mut tape = Tape::<f64>::new();
        let mut layers = Vec::new();
        let mut hand = 0.0f64;
        for _ in 0..rng.random_range(1..5) {
            let k = rng.random_range(1..200);
            let max = rng.random_range(1..5u32);
            let vals: Vec<f64> = (0..k).map(|_| rng.random_range(0..=max) as f64).collect();
            let sq: f64 = vals.iter().map(|v| v * v).sum();
            hand += sq * (1.0 / (2 * k) as f64);
            let v = tape.constant(Tensor::from_vec(&[k], vals).unwrap());
            layers.push(SpikeTensor::new(&tape, v, max));
        }
        let p = spike_penalty(&mut tape, &layers).unwrap();
        penalty_exact &= tape.value(p).data()[0] == hand;
    }
    outcome(
        reg_err <= 1e-6 && smooth_err <= 1e-6 && penalty_exact,
        format!(
            "50 masked 6x6 rasters, max abs err regression {reg_err:.1e} smoothness {smooth_err:.1e}; 50 penalty cases exact: {penalty_exact}"
        ),
    )
}

fn zero_input() -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (mode, seed) in [(Mode::Binocular, 1), (Mode::Monocular, 2), (Mode::Binocular, 3)] {
        let cfg = ModelConfig { mode, ..Default::default() };
        let mut net = Net::new(cfg.clone(), seed).unwrap();
        for w in net.layers_mut().slots_mut() {
            w.scale_in_place(10.0);
        }
        let zero = InputChunk::zeros(cfg.in_channels / 2, cfg.input_height, cfg.input_width, 50_000);
        let right = (mode == Mode::Binocular).then(|| zero.clone());
        let (depth, trace) = net.forward(&zero, right.as_ref()).unwrap();
        let active: Vec<&str> = trace.layers.iter().filter(|l| l.density != 0.0).map(|l| l.name.as_str()).collect();
        let rest = cfg.depth.decode(0.0) as f32;
        let flat = depth.depth.iter().all(|&d| d == rest);
        ok &= active.is_empty() && flat;
        if !active.is_empty() {
            detail.push(format!("active {active:?}"));
        }
    }
    outcome(ok, if ok { "every layer silent, prediction = decode(0) everywhere".into() } else { detail.join("; ") })
}

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let family = SceneFamily::default();

    let cfg = ModelConfig::default();
    let net = Net::new(cfg.clone(), 4).unwrap();
    let ckpt = dir.path().join("net.ssk");
    checkpoint::save(&net, &ckpt).unwrap();
    let back: Net = checkpoint::load(&ckpt, Some(&cfg)).unwrap();
    let scene = generate_scene(&family, 77);
    let n = (family.duration_us / family.gt_period_us) as usize;
    let l = stereospike::events::make_chunk(&scene.left, 0, n, family.gt_period_us);
    let r = stereospike::events::make_chunk(&scene.right, 0, n, family.gt_period_us);
    let ckpt_ok = back == net && same_bits(&net.forward(&l, Some(&r)).unwrap().0, &back.forward(&l, Some(&r)).unwrap().0);

    let evt = dir.path().join("left.evt");
    write_evt(&scene.left, &evt).unwrap();
    let evt_ok = read_evt(&evt).unwrap() == scene.left && !scene.left.is_empty();

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    make_dataset(&family, 6, 42, &a).unwrap();
    make_dataset(&family, 6, 42, &b).unwrap();
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let data_ok = names.len() > 1
        && fs::read_dir(&b).unwrap().count() == names.len()
        && names.iter().all(|f| fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap());

    outcome(
        ckpt_ok && evt_ok && data_ok,
        format!("checkpoint forward bitwise {ckpt_ok}, evt identity {evt_ok}, dataset regeneration byte-identical {data_ok} ({} files)", names.len()),
    )
}

struct Trained {
    log: TrainLog<f32>,
    report: DensityReport,
    mde_cm: f64,
}

fn train(dataset: &Dataset, mode: Mode, penalty: bool, tag: &str) -> Trained {
    let cfg = ModelConfig { mode, base_channels: 8, ..Default::default() };
    let mut net = StereoSpikeNet::<f32>::new(cfg, INIT_SEED).unwrap();
    let plan = TrainPlan { spike_penalty_enabled: penalty, seed: INIT_SEED, ..Default::default() };
    let losses = LossConfig::default();
    let t = Instant::now();
    let log = run_training(&mut net, dataset, &plan, &losses, |r| {
        eprintln!(
            "[{tag}] epoch {:>2} {:>6.0}s train mde {:.1} test mde {:.1}",
            r.epoch,
            t.elapsed().as_secs_f64(),
            r.train.mde_cm,
            r.test.mde_cm
        );
    })
    .unwrap();
    let eval = evaluate(&log.best, dataset.test_samples(), &losses, false).unwrap();
    let dir = artifacts();
    fs::write(dir.join(format!("{tag}_train_log.csv")), log.to_csv()).unwrap();
    eval.report.write(&dir, &format!("{tag}_density")).unwrap();
    Trained { mde_cm: eval.stats.mde_cm, report: eval.report, log }
}

fn expected_best(tag: &str) -> Option<f64> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(format!("{tag}_train_log.csv"));
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').nth(1) == Some("test"))
        .filter_map(|l| l.split(',').nth(3)?.parse::<f64>().ok())
        .reduce(f64::min)
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, title: &'static str, o: Outcome| {
        emit(id, title, &o);
        results.push((id, title, o));
    };

    record(1, "gradient suite", gradient_suite());
    record(2, "surrogate correctness", surrogate());
    record(3, "spike-range invariants", spike_ranges());
    record(4, "statelessness", statelessness());
    record(5, "loss oracles", loss_oracles());

    let t = Instant::now();
    let dataset = Dataset::generate(&SceneFamily::default(), DATA_COUNT, DATA_SEED).unwrap();
    assert_eq!((dataset.train.len(), dataset.test.len()), (400, 100));
    let baseline = constant_baseline_mde(&dataset).unwrap();
    eprintln!("dataset generated in {:.0}s, constant baseline {baseline:.2} cm", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let bino = train(&dataset, Mode::Binocular, false, "bino");
    let minutes = t.elapsed().as_secs_f64() / 60.0;
    let expected = expected_best("bino").map_or("none bundled".into(), |e| format!("{e:.2} cm"));
    record(
        6,
        "desk-scale learning",
        outcome(
            bino.mde_cm <= 0.5 * baseline,
            format!(
                "test MDE {:.2} cm vs baseline {baseline:.2} cm (ratio {:.3}, limit 0.5), best epoch {}, {minutes:.1} min, bundled log best {expected}",
                bino.mde_cm,
                bino.mde_cm / baseline,
                bino.log.best_epoch
            ),
        ),
    );

    let pen = train(&dataset, Mode::Binocular, true, "bino_penalty");
    let dec = |r: &DensityReport| r.group("Decoder").unwrap_or(f64::NAN);
    let (d0, d1) = (dec(&bino.report), dec(&pen.report));
    let table = bino.report.side_by_side(&pen.report, ("no penalty", "penalty"));
    fs::write(artifacts().join("density_side_by_side.txt"), &table).unwrap();
    record(
        7,
        "sparsity regularization",
        outcome(
            d1 > 0.0 && d0 / d1 >= 2.0 && pen.mde_cm <= 1.25 * bino.mde_cm,
            format!(
                "decoder mean {:.1}% -> {:.1}% (x{:.2}, need >= 2), MDE {:.2} -> {:.2} cm ({:+.1}%, limit +25%); reports in {}",
                100.0 * d0,
                100.0 * d1,
                d0 / d1,
                bino.mde_cm,
                pen.mde_cm,
                100.0 * (pen.mde_cm / bino.mde_cm - 1.0),
                artifacts().display()
            ),
        ),
    );

    record(8, "zero-input purity", zero_input());
    record(9, "round trips", round_trips());

    let mono = train(&dataset, Mode::Monocular, false, "mono");
    record(
        10,
        "mono/bino parity",
        outcome(
            mono.mde_cm.is_finite() && mono.mde_cm < baseline && bino.mde_cm < baseline,
            format!("mono {:.2} cm, bino {:.2} cm, baseline {baseline:.2} cm", mono.mde_cm, bino.mde_cm),
        ),
    );

    let failed: Vec<String> = results.iter().filter(|r| !r.2.passed).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failed criteria: {}", failed.join(", "));
}
