//! Acceptance battery. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use crdi::diffusion::{
    ddim_chain, noise_from_score, noise_to, predict_x0, sample_unconditional, score_from_noise,
    NoiseNet,
};
use crdi::metrics::{frechet, mc_ssim, ssim, McDirection};
use crdi::numerics::{gaussian, mlp_backward, mlp_forward, Mlp, RngStream, Tensor};
use crdi::sampler::{generate, GenerationRequest, GuidanceSource, Mode, Start, Tail};
use crdi::schedules::{NoiseSchedule, PerturbationSchedule};
use crdi::sge::{fit_sge, sge_loss, Sge, SgeConfig, SgeSet, SgeStep};
use crdi::workbench::config::ExperimentConfig;
use crdi::workbench::experiment::{
    presets, run_experiment, run_sweep, train_source_stage, SweepCell, MANIFEST_FILE, MODEL_FILE,
};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            verdict(false, format!("panicked: {msg}"))
        }
    }
}

fn rand(st: &mut RngStream, shape: &[usize]) -> Tensor {
    gaussian(st, shape).unwrap()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7)
}

fn gradient_suite() -> Verdict {
    let t0 = Instant::now();
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut st = RngStream::new(11, "acceptance/grad");
    let mut worst: f64 = 0.0;
    let mut probes = 0;

    for _ in 0..120 {
        let d = st.uniform_int(1, 6);
        let t = st.uniform_int(1, 1000);
        let x0 = rand(&mut st, &[d]);
        let eps = rand(&mut st, &[d]);
        let x_t = noise_to(&sched, &x0, t, &eps).unwrap();
        let x_prev = noise_to(&sched, &x0, t - 1, &eps).unwrap();
        let net_eps = rand(&mut st, &[d]);
        let g = rand(&mut st, &[d]).scale(3.0);
        let anchor = rand(&mut st, &[d]);
        let lambda = st.uniform();
        let step = SgeStep {
            schedule: &sched,
            t,
            x0: &x0,
            x_t: &x_t,
            x_prev: &x_prev,
            net_eps: &net_eps,
        };
        let loss = |g: &Tensor| sge_loss(&step, g, Some((&anchor, lambda))).unwrap();
        let analytic = loss(&g).grad;
        let j = st.uniform_int(0, d - 1);
        let h = 1e-4 * g.data()[j].abs().max(1.0);
        let mut up = g.clone();
        up.data_mut()[j] += h;
        let mut down = g.clone();
        down.data_mut()[j] -= h;
        let numeric = (loss(&up).value - loss(&down).value) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[j], numeric));
        probes += 1;
    }

    let widths = [3, 7, 5, 2];
    for trial in 0..4 {
        let net = Mlp::init(&widths, 1.0, &mut RngStream::new(trial, "acceptance/mlp")).unwrap();
        let x = rand(&mut st, &[3]);
        let u = rand(&mut st, &[2]);
        let objective = |m: &Mlp, x: &Tensor| mlp_forward(m, x).unwrap().dot(&u).unwrap();
        let grads = mlp_backward(&net, &x, &u).unwrap();
        for _ in 0..30 {
            let i = st.uniform_int(0, net.param_count() - 1);
            let h = 1e-5;
            let mut up = net.clone();
            up.params_mut()[i] += h;
            let mut down = net.clone();
            down.params_mut()[i] -= h;
            let numeric = (objective(&up, &x) - objective(&down, &x)) / (2.0 * h);
            worst = worst.max(rel_err(grads.params[i], numeric));
            probes += 1;
        }
        for j in 0..3 {
            let h = 1e-5;
            let mut up = x.clone();
            up.data_mut()[j] += h;
            let mut down = x.clone();
            down.data_mut()[j] -= h;
            let numeric = (objective(&net, &up) - objective(&net, &down)) / (2.0 * h);
            worst = worst.max(rel_err(grads.input.data()[j], numeric));
            probes += 1;
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        worst <= 1e-4 && probes >= 100 && elapsed < Duration::from_secs(30),
        format!("{probes} probes, worst relative error {worst:.2e}, {elapsed:.1?}"),
    )
}

fn algebraic_suite() -> Verdict {
    let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut st = RngStream::new(12, "acceptance/algebra");
    let mut round_trip: f64 = 0.0;
    let mut score_trip: f64 = 0.0;
    for t in (1..=1000).step_by(37).chain([1000]) {
        let x0 = rand(&mut st, &[16]);
        let eps = rand(&mut st, &[16]);
        let x_t = noise_to(&sched, &x0, t, &eps).unwrap();
        let back = predict_x0(&sched, &x_t, t, &eps).unwrap();
        round_trip = round_trip.max(back.max_abs_diff(&x0).unwrap());
        let score = score_from_noise(&sched, &eps, t).unwrap();
        let e2 = noise_from_score(&sched, &score, t).unwrap();
        let s2 = score_from_noise(&sched, &e2, t).unwrap();
        score_trip = score_trip
            .max(e2.max_abs_diff(&eps).unwrap())
            .max(s2.max_abs_diff(&score).unwrap());
    }
    let p = PerturbationSchedule::from_fractions(1.0, 0.6, 0.1, 1000).unwrap();
    let gamma_ok = p.gamma(600.0) == 1.0
        && p.gamma(1000.0) == 0.0
        && p.gamma(800.0) == 0.5
        && p.gamma(10.0) == 1.0;
    let variance_exact = (0..=1000).all(|t| sched.alpha_bar(t) + sched.noise_variance(t) == 1.0);
    let root_ulps = (0..=1000)
        .map(|t| ((sched.signal(t).powi(2) + sched.noise(t).powi(2) - 1.0) / f64::EPSILON).abs())
        .fold(0.0, f64::max);
    verdict(
        round_trip <= 1e-10 && score_trip <= 1e-12 && gamma_ok && variance_exact,
        format!(
            "x0 round trip {round_trip:.1e}, score round trip {score_trip:.1e}, gamma exact {gamma_ok}, \
             variances sum to 1 exactly {variance_exact} (squared roots within {root_ulps} ulp)"
        ),
    )
}

/// The sprite source model, trained once and shared by criteria 3 to 7.
struct Fixture {
    base: ExperimentConfig,
    net: NoiseNet,
}

impl Fixture {
    fn new(dir: &Path) -> Self {
        let mut base = ExperimentConfig::sprites();
        let out = train_source_stage(&base).expect("source training");
        let path = dir.join(MODEL_FILE);
        out.net.save(&path).unwrap();
        base.model.checkpoint = Some(path);
        Self { base, net: out.net }
    }

    fn sweep(&self, cfg: ExperimentConfig, out: &Path) -> Vec<SweepCell> {
        let mut cfg = cfg;
        cfg.run.out = Some(out.to_path_buf());
        run_sweep(&cfg).expect("sweep")
    }
}

fn cell<'a>(cells: &'a [SweepCell], axis: &str, value: &str) -> &'a SweepCell {
    cells
        .iter()
        .find(|c| c.axis == axis && c.value == value)
        .unwrap_or_else(|| panic!("missing cell {axis}={value}"))
}

fn reduction_suite(fx: &Fixture) -> Verdict {
    let cfg = &fx.base;
    let sched = cfg.noise_schedule().unwrap();
    let shape = cfg.target.sample_shape();
    let map = cfg.rigidity_map().unwrap();
    let set = SgeSet::new((0..3).map(|i| Sge::zeros(map, &shape, Some(i))).collect()).unwrap();
    let plan = cfg.plan().unwrap();
    let req = GenerationRequest {
        mode: Mode::Generate,
        guidance: GuidanceSource::PerSample,
        start: Start::Prior,
        start_t: cfg.schedule.steps,
        perturbation: Some(cfg.perturbation().unwrap().with_s(0.0)),
        plan: plan.clone(),
        count: 8,
        tail: Tail::Clamp,
        stream: RngStream::new(3, "acceptance/reduction"),
        start_noise: None,
    };
    let targets: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(shape.clone()).unwrap()).collect();
    let guided = generate(&fx.net, &sched, Some(&set), &targets, &req).unwrap();
    let plain = sample_unconditional(&fx.net, &sched, &plan, 8, &req.stream).unwrap();
    let mut bitwise = guided.iter().zip(&plain).all(|(a, b)| a.data() == b.data());
    // the same chain spelled out by hand from the first start state
    let x = gaussian(&mut req.stream.child(0), &[fx.net.dim()]).unwrap();
    let by_hand = ddim_chain(&fx.net, &sched, &plan, &x, cfg.schedule.steps).unwrap();
    bitwise &= by_hand.data() == guided[0].data();

    let before = fx.net.checksum();
    let targets: Vec<Tensor> = (0..2).map(|i| rand(&mut RngStream::new(i, "shots"), &shape)).collect();
    let fit_cfg = SgeConfig {
        iterations: 100,
        ..cfg.sge_config()
    };
    fit_sge(&fx.net, &sched, &targets, map, &fit_cfg, &RngStream::new(0, "acceptance/fit")).unwrap();
    let unchanged = fx.net.checksum() == before;
    verdict(
        bitwise && unchanged,
        format!("zero-SGE chain bit-identical {bitwise}, checksum unchanged {unchanged}"),
    )
}

fn ssim_trend(eta_cells: &[SweepCell], elapsed: Duration) -> Verdict {
    let s = |eta: &str| cell(eta_cells, "eta", eta).report.mean_ssim.unwrap();
    let (s1, s8, s25) = (s("1"), s("8"), s("25"));
    verdict(
        s25 - s1 >= 0.05 && s1 <= s8 && s8 <= s25 && elapsed < Duration::from_secs(300),
        format!("mean SSIM eta 1/8/25 = {s1:.4}/{s8:.4}/{s25:.4}, sweep {elapsed:.1?}"),
    )
}

fn ablation(cells: &[SweepCell]) -> Verdict {
    let full = &cell(cells, "variant", "full").report;
    let no_sge = &cell(cells, "variant", "no-sge").report;
    let no_pert = &cell(cells, "variant", "no-perturbation").report;
    let counts = [full, no_sge, no_pert].iter().all(|r| r.n_generated == 64);
    let fr_ok = full.frechet <= 0.7 * no_sge.frechet;
    let div_ok = no_pert.intra_diversity < full.intra_diversity;
    verdict(
        counts && fr_ok && div_ok,
        format!(
            "Fréchet full {:.3} vs no-sge {:.3} ({:.1}% lower); diversity no-perturbation {:.4} vs full {:.4}",
            full.frechet,
            no_sge.frechet,
            100.0 * (1.0 - full.frechet / no_sge.frechet),
            no_pert.intra_diversity,
            full.intra_diversity
        ),
    )
}

fn diversity_shape(eta_cells: &[SweepCell]) -> Verdict {
    let d = |eta: &str| cell(eta_cells, "eta", eta).report.intra_diversity;
    let interior = ["4", "8", "16"].map(d);
    let best = interior.iter().cloned().fold(f64::MIN, f64::max);
    let last = d("25");
    verdict(
        last <= best,
        format!(
            "diversity eta 1/4/8/16/25 = {:.4}/{:.4}/{:.4}/{:.4}/{last:.4}, best interior {best:.4}",
            d("1"),
            interior[0],
            interior[1],
            interior[2]
        ),
    )
}

fn k_shot(cells: &[SweepCell]) -> Verdict {
    let f = |k: &str| cell(cells, "k", k).report.frechet;
    let (f1, f5, f10) = (f("1"), f("5"), f("10"));
    verdict(
        f1 >= f5 && f5 >= f10,
        format!("Fréchet k 1/5/10 = {f1:.3}/{f5:.3}/{f10:.3}"),
    )
}

fn metric_oracles() -> Verdict {
    let mut st = RngStream::new(13, "acceptance/metrics");
    let a: Vec<Vec<f64>> = (0..10_000).map(|_| vec![st.normal()]).collect();
    let b: Vec<Vec<f64>> = (0..10_000).map(|_| vec![st.normal() + 1.0]).collect();
    let moments = |xs: &[Vec<f64>]| {
        let n = xs.len() as f64;
        let mu = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let var = xs.iter().map(|x| (x[0] - mu).powi(2)).sum::<f64>() / (n - 1.0);
        (mu, var.sqrt())
    };
    let ((ma, sa), (mb, sb)) = (moments(&a), moments(&b));
    let closed = (ma - mb).powi(2) + (sa - sb).powi(2);
    let measured = frechet(&a, &b).unwrap();
    let fr_ok = (measured - closed).abs() <= 0.05 * closed;

    let imgs: Vec<Tensor> = (0..4)
        .map(|i| {
            rand(&mut RngStream::new(i, "acceptance/img"), &[16, 16]).map(|v| (0.5 + 0.2 * v).clamp(0.0, 1.0))
        })
        .collect();
    let mc = mc_ssim(&imgs, &imgs, 1, McDirection::PerTarget, 1.0).unwrap();
    let identity = imgs.iter().all(|x| ssim(x, x, 1.0).unwrap() == 1.0);
    let symmetric = imgs
        .iter()
        .zip(imgs.iter().skip(1))
        .all(|(x, y)| ssim(x, y, 1.0).unwrap() == ssim(y, x, 1.0).unwrap());
    verdict(
        fr_ok && mc == 1.0 && identity && symmetric,
        format!(
            "Fréchet {measured:.5} vs closed form {closed:.5}; mc_ssim {mc}; ssim identity {identity}, symmetry {symmetric}"
        ),
    )
}

/// Every file of a run directory except the manifest, which carries timestamps.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.file_name() != MANIFEST_FILE)
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism(dir: &Path, battery_start: Instant) -> Verdict {
    let mut cfg = ExperimentConfig::ring();
    cfg.run.out = Some(dir.to_path_buf());
    let a = run_experiment(&cfg).expect("first run");
    let first = snapshot(dir);
    let b = run_experiment(&cfg).expect("second run");
    let second = snapshot(dir);
    let manifests = a.without_timestamps() == b.without_timestamps();
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| first.get(*k) != second.get(*k))
        .collect();
    let files = first.len() == second.len() && differing.is_empty();
    let total = battery_start.elapsed();
    verdict(
        manifests && files && total < Duration::from_secs(15 * 60),
        format!(
            "manifests equal {manifests}, {} artifacts bit-identical {files} {differing:?}, battery {total:.1?}",
            first.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut lines: Vec<(&str, Verdict)> = Vec::new();

    lines.push(("1 gradient suite", guarded(gradient_suite)));
    lines.push(("2 algebraic suite", guarded(algebraic_suite)));
    let fixture = catch_unwind(|| Fixture::new(tmp.path()));
    match &fixture {
        Ok(fx) => {
            lines.push(("3 reduction suite", guarded(|| reduction_suite(fx))));
            let eta_start = Instant::now();
            let eta_cells = catch_unwind(AssertUnwindSafe(|| {
                fx.sweep(presets::eta_sweep(&fx.base), &tmp.path().join("eta"))
            }));
            let eta_time = eta_start.elapsed();
            let ablation_cells = catch_unwind(AssertUnwindSafe(|| {
                fx.sweep(presets::ablation(&fx.base), &tmp.path().join("ablation"))
            }));
            let k_cells = catch_unwind(AssertUnwindSafe(|| {
                fx.sweep(presets::k_shot(&fx.base), &tmp.path().join("k"))
            }));
            let failed = || verdict(false, "sweep failed");
            lines.push((
                "4 SSIM trend over eta",
                eta_cells.as_ref().map_or_else(|_| failed(), |c| guarded(|| ssim_trend(c, eta_time))),
            ));
            lines.push((
                "5 ablation",
                ablation_cells.as_ref().map_or_else(|_| failed(), |c| guarded(|| ablation(c))),
            ));
            lines.push((
                "6 diversity over eta",
                eta_cells.as_ref().map_or_else(|_| failed(), |c| guarded(|| diversity_shape(c))),
            ));
            lines.push((
                "7 k-shot Fréchet",
                k_cells.as_ref().map_or_else(|_| failed(), |c| guarded(|| k_shot(c))),
            ));
        }
        Err(_) => {
            for name in ["3 reduction suite", "4 SSIM trend over eta", "5 ablation", "6 diversity over eta", "7 k-shot Fréchet"] {
                lines.push((name, verdict(false, "source model training failed")));
            }
        }
    }
    lines.push(("8 metric oracles", guarded(metric_oracles)));
    lines.push((
        "9 determinism",
        guarded(|| determinism(&tmp.path().join("determinism"), start)),
    ));

    let mut all = true;
    for (name, v) in &lines {
        all &= v.pass;
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("acceptance: {} of {} criteria passed", lines.iter().filter(|(_, v)| v.pass).count(), lines.len());
    if !all {
        std::process::exit(1);
    }
}
