//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) and then asserts the same condition.
//!
//! The lite end-to-end pipeline is the expensive part: it trains the lite
//! preset twice (once for the headline comparison, once more for the
//! determinism check), which takes tens of minutes on a single core.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use dbp::cli::{self, DataArgs, EvalArgs, GenDataArgs, InferArgs, ProjectArgs, TrainArgs};
use dbp::io::*;
use dbp::metrics::{psnr_masked, MetricsReport};
use dbp::nn::*;
use dbp::phantom::{generate_dataset, PhantomSpec};
use dbp::pipeline::{reconstruct_dbp, INFER_STRIDE};
use dbp::projection::*;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ADJOINT_TOL: f64 = 1e-10;
const DENSE_TOL: f64 = 1e-12;
const GRAD_TOL: f64 = 1e-5;
const GRAD_STEP: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-2;
const FBP_MIN_PSNR: f64 = 25.0;
const PSNR_MARGIN_DB: f64 = 1.0;
const SSIM_MARGIN: f64 = 0.10;
const LOSS_RATIO: f64 = 0.5;
const LATENCY_LIMIT_S: f64 = 1.0;

/// Serializes the heavy and the timing-sensitive tests so the latency
/// measurement never shares the CPU with a training run.
fn exclusive() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{criterion}: {detail}");
}

fn random_vec(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn adjoint_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for n in [8, 16, 64] {
        let geom = ProjectionGeometry::new(n);
        for _ in 0..100 {
            let x = Image::new(n, random_vec(n * n, &mut rng)).unwrap();
            let v = random_vec(geom.channels(), &mut rng);
            let theta = rng.gen_range(-std::f64::consts::TAU..std::f64::consts::TAU);
            let lhs = dot(&project_view(&x, theta, &geom).unwrap(), &v);
            let rhs = dot(x.data(), back_project_view(&v, theta, &geom).unwrap().data());
            worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE));
            trials += 1;
        }
    }

    // dense forward matrix at n = 8 against the back projector's columns
    let n = 8;
    let geom = ProjectionGeometry::new(n);
    let mut dense_worst: f64 = 0.0;
    for theta in [0.0, 0.3, 1.1, std::f64::consts::FRAC_PI_2, 2.6] {
        let mut forward = vec![vec![0.0; n * n]; geom.channels()];
        for p in 0..n * n {
            let mut e = Image::zeros(n);
            e.data_mut()[p] = 1.0;
            for (bin, value) in project_view(&e, theta, &geom).unwrap().into_iter().enumerate() {
                forward[bin][p] = value;
            }
        }
        for (bin, row) in forward.iter().enumerate() {
            let mut e = vec![0.0; geom.channels()];
            e[bin] = 1.0;
            let col = back_project_view(&e, theta, &geom).unwrap();
            for (a, b) in col.data().iter().zip(row) {
                dense_worst = dense_worst.max((a - b).abs());
            }
        }
    }
    verdict(
        "adjoint exactness",
        worst <= ADJOINT_TOL && dense_worst <= DENSE_TOL,
        &format!(
            "{trials} random triples at n=8,16,64, worst relative error {worst:.2e} (limit {ADJOINT_TOL:e}); \
             dense transpose at n=8 worst {dense_worst:.2e} (limit {DENSE_TOL:e})"
        ),
    );
}

/// Worst relative error between `analytic` and central differences of `f`.
fn fd_worst(values: &[f64], analytic: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut v = values.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..v.len() {
        let orig = v[i];
        v[i] = orig + GRAD_STEP;
        let up = f(&v);
        v[i] = orig - GRAD_STEP;
        let down = f(&v);
        v[i] = orig;
        let numeric = (up - down) / (2.0 * GRAD_STEP);
        worst = worst.max((analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(GRAD_FLOOR));
    }
    worst
}

fn tensor(dims: [usize; 4], data: &[f64]) -> Tensor4 {
    Tensor4::new(dims, data.to_vec()).unwrap()
}

#[test]
fn gradient_correctness() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut results = Vec::new();

    let x = tensor([2, 3, 6, 6], &random_vec(216, &mut rng));
    let conv = Conv2d::from_parts(3, 4, random_vec(108, &mut rng), random_vec(4, &mut rng)).unwrap();
    let w = tensor([2, 4, 6, 6], &random_vec(288, &mut rng));
    let g = conv2d_backward(&x, &conv, &w).unwrap();
    results.push((
        "conv",
        fd_worst(x.data(), g.input.data(), |v| dot(conv2d_forward(&tensor(x.dims(), v), &conv).unwrap().data(), w.data()))
            .max(fd_worst(&conv.weight, &g.weight, |v| {
                let c = Conv2d::from_parts(3, 4, v.to_vec(), conv.bias.clone()).unwrap();
                dot(conv2d_forward(&x, &c).unwrap().data(), w.data())
            }))
            .max(fd_worst(&conv.bias, &g.bias, |v| {
                let c = Conv2d::from_parts(3, 4, conv.weight.clone(), v.to_vec()).unwrap();
                dot(conv2d_forward(&x, &c).unwrap().data(), w.data())
            })),
    ));

    let x = tensor([4, 2, 3, 3], &random_vec(72, &mut rng));
    let w = random_vec(72, &mut rng);
    let mut bn = BatchNorm2d::new(2);
    bn.gamma = vec![0.8, -1.2];
    bn.beta = vec![0.1, -0.3];
    batchnorm_forward(&x, &mut bn, Mode::Train).unwrap();
    let g = batchnorm_backward(&x, &bn, &tensor(x.dims(), &w)).unwrap();
    let bn_loss = |input: &Tensor4, layer: &BatchNorm2d| {
        let mut l = layer.clone();
        dot(batchnorm_forward(input, &mut l, Mode::Train).unwrap().data(), &w)
    };
    results.push((
        "batch norm",
        fd_worst(x.data(), g.input.data(), |v| bn_loss(&tensor(x.dims(), v), &bn))
            .max(fd_worst(&bn.gamma, &g.gamma, |v| {
                let mut l = bn.clone();
                l.gamma = v.to_vec();
                bn_loss(&x, &l)
            }))
            .max(fd_worst(&bn.beta, &g.beta, |v| {
                let mut l = bn.clone();
                l.beta = v.to_vec();
                bn_loss(&x, &l)
            })),
    ));

    let data: Vec<f64> = (0..96)
        .map(|_| rng.gen_range(0.01..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let x = tensor([2, 3, 4, 4], &data);
    let w = random_vec(96, &mut rng);
    let g = relu_backward(&x, &tensor(x.dims(), &w)).unwrap();
    results.push(("relu", fd_worst(x.data(), g.data(), |v| dot(relu(&tensor(x.dims(), v)).data(), &w))));

    let p = tensor([3, 1, 4, 4], &random_vec(48, &mut rng));
    let t = tensor([3, 1, 4, 4], &random_vec(48, &mut rng));
    let (_, g) = mse_loss(&p, &t).unwrap();
    results.push(("mse", fd_worst(p.data(), g.data(), |v| mse_loss(&tensor(p.dims(), v), &t).unwrap().0)));

    let mut model = Model::new(Architecture { views: 2, width: 3, depth: 2 }, 11).unwrap();
    let x = tensor([2, 2, 5, 5], &random_vec(100, &mut rng));
    let t = tensor([2, 1, 5, 5], &random_vec(50, &mut rng));
    let (out, tape) = model.forward_train(&x).unwrap();
    let (_, g) = mse_loss(&out, &t).unwrap();
    let (grads, grad_x) = model.backward_with_input(&tape, &g).unwrap();
    let composite_loss = |m: &Model, input: &Tensor4| {
        let mut m = m.clone();
        mse_loss(&m.forward_train(input).unwrap().0, &t).unwrap().0
    };
    let mut worst = fd_worst(x.data(), grad_x.data(), |v| composite_loss(&model, &tensor(x.dims(), v)));
    for (gi, group) in grads.iter().enumerate() {
        let values = model.params()[gi].to_vec();
        worst = worst.max(fd_worst(&values, group, |v| {
            let mut m = model.clone();
            m.params_mut()[gi].copy_from_slice(v);
            composite_loss(&m, &x)
        }));
    }
    results.push(("depth-2 composite", worst));

    let pass = results.iter().all(|(_, e)| *e <= GRAD_TOL);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        "gradient correctness",
        pass,
        &format!("worst relative error per check (limit {GRAD_TOL:e}): {}", detail.join(", ")),
    );
}

#[test]
fn fbp_sanity() {
    let n = 64;
    let geom = ProjectionGeometry::new(n);
    let mask = Image::support_mask(n);
    // seeds 1000.. are disjoint from the 0..99 used by the training pipeline
    let phantoms = generate_dataset(&PhantomSpec::default(), 10, 1000).unwrap();
    let mut dense = Vec::new();
    let mut all_better = true;
    for x in &phantoms {
        let score = |views| {
            let rec = fbp(&radon(x, &uniform_angles(views), &geom).unwrap(), &geom).unwrap();
            psnr_masked(&rec, x, &mask, 1.0).unwrap()
        };
        let (p180, p16) = (score(180), score(16));
        all_better &= p180 > p16;
        dense.push(p180);
    }
    let min = dense.iter().cloned().fold(f64::INFINITY, f64::min);
    verdict(
        "FBP sanity",
        min >= FBP_MIN_PSNR && all_better,
        &format!(
            "180-view masked PSNR min {min:.2} dB over 10 phantoms (limit {FBP_MIN_PSNR}); \
             180 views beat 16 views on every scan: {all_better}"
        ),
    );
}

struct LiteRun {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    report: MetricsReport,
}

fn run_lite_pipeline() -> LiteRun {
    let _guard = exclusive();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("lite");
    let started = Instant::now();
    cli::gen_data(&GenDataArgs {
        out: dir.clone(),
        count: 100,
        size: 64,
        seed: 0,
        grains: "6:14".into(),
    })
    .unwrap();
    cli::project(&ProjectArgs { data: dir.clone(), views: 16 }).unwrap();
    cli::fbp_stage(&DataArgs { data: dir.clone() }).unwrap();
    let model = cli::train_stage(&TrainArgs {
        data: dir.clone(),
        preset: "lite".into(),
        out: None,
        seed: 0,
        train_count: None,
        epochs: None,
        patches_per_scan: None,
    })
    .unwrap();
    cli::infer(&InferArgs {
        model,
        data: dir.clone(),
        tile_stride: INFER_STRIDE,
    })
    .unwrap();
    let report = cli::eval(&EvalArgs {
        data: dir.clone(),
        pred: None,
        report: None,
        export_pgm: false,
    })
    .unwrap();
    let line = format!("lite pipeline finished in {:.0} s\n", started.elapsed().as_secs_f64());
    let _ = std::io::stderr().write_all(line.as_bytes());
    LiteRun { _tmp: tmp, dir, report }
}

fn lite_run() -> &'static LiteRun {
    static RUN: OnceLock<LiteRun> = OnceLock::new();
    RUN.get_or_init(run_lite_pipeline)
}

#[test]
fn main_claim_dbp_beats_fbp() {
    let run = lite_run();
    let fbp = run.report.aggregate("FBP");
    let dbp = run.report.aggregate("DBP");
    let (fp, dp) = (fbp.psnr.unwrap(), dbp.psnr.unwrap());
    let (fs, ds) = (fbp.ssim.unwrap(), dbp.ssim.unwrap());
    assert_eq!((fp.count, dp.count), (20, 20));
    verdict(
        "main claim",
        dp.mean - fp.mean >= PSNR_MARGIN_DB && ds.mean - fs.mean >= SSIM_MARGIN,
        &format!(
            "lite, 20 test scans: PSNR FBP {:.2} vs DBP {:.2} dB (gain {:.2}, need {PSNR_MARGIN_DB}); \
             SSIM FBP {:.3} vs DBP {:.3} (gain {:.3}, need {SSIM_MARGIN})",
            fp.mean,
            dp.mean,
            dp.mean - fp.mean,
            fs.mean,
            ds.mean,
            ds.mean - fs.mean
        ),
    );
}

fn read_log(path: &Path) -> Vec<(usize, f64, f64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn training_health() {
    let run = lite_run();
    let log = read_log(&run.dir.join("train_log.csv"));
    let all_finite = log.iter().all(|(_, lr, loss)| lr.is_finite() && loss.is_finite());
    let first = log.first().unwrap().2;
    let last = log.last().unwrap().2;
    verdict(
        "training health",
        log.len() == 15 && all_finite && last <= LOSS_RATIO * first,
        &format!(
            "{} epochs, epoch-0 loss {first:.4}, final {last:.4} (ratio {:.3}, limit {LOSS_RATIO}); all finite: {all_finite}",
            log.len(),
            last / first
        ),
    );
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| {
            let name = p.file_name().unwrap().to_str().unwrap();
            name == "model.dbpm" || name == "report.csv" || name.starts_with("fbp_") || name.starts_with("dbp_")
        })
        .map(|p| (p.file_name().unwrap().to_str().unwrap().to_string(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn determinism() {
    let first = artifacts(&lite_run().dir);
    let second = run_lite_pipeline();
    let again = artifacts(&second.dir);
    let names = first.len();
    let differing: Vec<&str> = first
        .iter()
        .zip(&again)
        .filter(|(a, b)| a != b)
        .map(|(a, _)| a.0.as_str())
        .collect();
    verdict(
        "determinism",
        names == 202 && first.len() == again.len() && differing.is_empty(),
        &format!("{names} artifacts compared (checkpoint, 100 FBP and 100 DBP reconstructions, report); differing: {differing:?}"),
    );
}

#[test]
fn paper_preset_is_launchable() {
    let guard = exclusive();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().to_path_buf();
    cli::gen_data(&GenDataArgs {
        out: dir.clone(),
        count: 10,
        size: 64,
        seed: 0,
        grains: "6:14".into(),
    })
    .unwrap();
    cli::project(&ProjectArgs { data: dir.clone(), views: 16 }).unwrap();
    cli::fbp_stage(&DataArgs { data: dir.clone() }).unwrap();
    let model = cli::train_stage(&TrainArgs {
        data: dir.clone(),
        preset: "paper".into(),
        out: None,
        seed: 0,
        train_count: None,
        epochs: Some(1),
        patches_per_scan: Some(32),
    })
    .unwrap();
    let (m, meta) = load_checkpoint(&model).unwrap();
    cli::infer(&InferArgs {
        model,
        data: dir.clone(),
        tile_stride: INFER_STRIDE,
    })
    .unwrap();
    let report = cli::eval(&EvalArgs {
        data: dir.clone(),
        pred: None,
        report: None,
        export_pgm: false,
    })
    .unwrap();
    drop(guard);
    let csv = fs::read_to_string(dir.join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let format_ok = lines[0] == "scan,method,psnr_db,ssim"
        && lines.len() == 1 + 4 + 2
        && lines[5].starts_with("# aggregate,FBP,")
        && lines[6].starts_with("# aggregate,DBP,")
        && lines[5].contains(" ± ")
        && csv == report.to_csv();
    verdict(
        "paper preset launchable",
        format_ok && meta.arch.depth == 15 && meta.arch.width == 64 && m.layers().len() == 48,
        &format!("depth {} width {}, report format ok: {format_ok}", meta.arch.depth, meta.arch.width),
    );
}

#[test]
fn inference_latency() {
    let _guard = exclusive();
    let n = 64;
    let geom = ProjectionGeometry::new(n);
    let model = Model::new(Architecture::paper(16), 0).unwrap();
    let x = generate_dataset(&PhantomSpec::default(), 1, 500).unwrap().remove(0);
    let sino = radon(&x, &uniform_angles(16), &geom).unwrap();
    reconstruct_dbp(&sino, &model, &geom).unwrap();
    let mut best = f64::INFINITY;
    for _ in 0..3 {
        let t0 = Instant::now();
        let rec = reconstruct_dbp(&sino, &model, &geom).unwrap();
        best = best.min(t0.elapsed().as_secs_f64());
        assert_eq!(rec.size(), n);
    }
    verdict(
        "inference latency",
        best < LATENCY_LIMIT_S,
        &format!("paper-depth reconstruct_dbp on 64x64, 16 views: best of 3 {best:.3} s (limit {LATENCY_LIMIT_S} s)"),
    );
}

fn outcome<E: std::fmt::Debug>(r: &Result<(), E>) -> String {
    match r {
        Ok(()) => "ok".into(),
        Err(e) => format!("{e:?}"),
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn io_fidelity() {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        ..Config::default()
    });
    let tensors = prop::collection::vec(1usize..6, 1..5).prop_flat_map(|dims| {
        let len: usize = dims.iter().product();
        (Just(dims), prop::collection::vec(any::<f64>(), len))
    });
    let raw = runner.run(&tensors, |(dims, data)| {
        let back = RawTensor::from_bytes(&RawTensor::new(dims.clone(), data.clone()).unwrap().to_bytes()).unwrap();
        prop_assert_eq!(back.dims, dims);
        prop_assert_eq!(bits(&back.data), bits(&data));
        Ok(())
    });

    let grids = (1usize..12, 1usize..8, any::<u64>());
    let typed = runner.run(&grids, |(n, views, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::new(n, random_vec(n * n, &mut rng)).unwrap();
        let img_back = Image::try_from(RawTensor::from_bytes(&RawTensor::from(&img).to_bytes()).unwrap()).unwrap();
        prop_assert_eq!(bits(img_back.data()), bits(img.data()));

        let sino = Sinogram::new(n, uniform_angles(views), random_vec(n * views, &mut rng)).unwrap();
        let bytes = sinogram_to_raw(&sino).unwrap().to_bytes();
        let sino_back = sinogram_from_raw(RawTensor::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(bits(sino_back.data()), bits(sino.data()));
        prop_assert_eq!(bits(sino_back.angles()), bits(sino.angles()));

        let z = BpTensor::new(n, uniform_angles(views), random_vec(views * n * n, &mut rng)).unwrap();
        let bytes = bp_tensor_to_raw(&z).unwrap().to_bytes();
        let z_back = bp_tensor_from_raw(RawTensor::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(bits(z_back.data()), bits(z.data()));
        Ok(())
    });

    let archs = (1usize..5, 1usize..6, 0usize..3, any::<u64>());
    let checkpoints = runner.run(&archs, |(views, width, depth, seed)| {
        let arch = Architecture { views, width, depth };
        let mut model = Model::new(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in model.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                bn.running_mean = random_vec(width, &mut rng);
                bn.running_var = random_vec(width, &mut rng).iter().map(|v| v.abs() + 0.1).collect();
            }
        }
        let meta = CheckpointMeta { arch, size: 64, seed, epochs: 1 };
        let bytes = checkpoint_to_bytes(&model, &meta).unwrap();
        let (back, back_meta) = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert!(back == model);
        prop_assert_eq!(back_meta, meta);
        Ok(())
    });

    verdict(
        "I/O fidelity",
        raw.is_ok() && typed.is_ok() && checkpoints.is_ok(),
        &format!(
            "256 random cases each: raw tensors {}, image/sinogram/bp tensor {}, checkpoints {}",
            outcome(&raw),
            outcome(&typed),
            outcome(&checkpoints)
        ),
    );
}
