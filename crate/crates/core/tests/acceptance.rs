//! Acceptance suite: runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any criterion fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use genview::adaptive::{self, NoiseSchedule, NoiseStrategy};
use genview::io::{self, NamedTensor, RunConfig};
use genview::losses;
use genview::pipeline;
use genview::quality;
use genview::tensor::{self, Embedding, FeatureMap, Matrix, PcaProjector};
use genview::trainer::{
    gradient_check, train_run, EncoderConfig, ExperimentReport, LossFamily, LossSettings, Nonlinearity, ToyEncoder,
    TrainConfig, WeightingMode,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Marginal checks need well-conditioned kernels: cosine scores over this
/// epsilon keep every logit within [-2, 2].
const SK_EPSILON: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c01_adaptive_level_grid() -> Outcome {
    let mut mismatches = 0;
    for i in 0..=1000u32 {
        let p = f64::from(i) / 1000.0;
        let expected = (100 * (i / 200)).min(400);
        if adaptive::adaptive_noise_level(p).unwrap() != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches on 1001 grid points"))
}

fn c02_noising_moment() -> Outcome {
    let schedule = NoiseSchedule::default();
    let k = 64;
    let draws = 10_000;
    let mut r = rng(2);
    let raw = normal_vec(&mut r, k);
    let n = tensor::norm(&raw);
    let c = Embedding::new(raw.iter().map(|x| x / n).collect()).unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for level in [100u32, 400] {
        let ab = schedule.alpha_bar(level).unwrap();
        let expected = ab + k as f64 * (1.0 - ab);
        let mut noise = rng(1000 + u64::from(level));
        let sq: Vec<f64> = (0..draws)
            .map(|_| {
                let x = adaptive::noisy_embedding(&c, level, &schedule, &mut noise).unwrap();
                tensor::dot(x.as_slice(), x.as_slice())
            })
            .collect();
        let mean = sq.iter().sum::<f64>() / draws as f64;
        let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let z = (mean - expected) / (var / draws as f64).sqrt();
        pass &= z.abs() < 3.0;
        details.push(format!("l={level} z={z:+.2}"));
    }
    outcome(pass, details.join(", "))
}

fn c03_schedule() -> Outcome {
    let (steps, b0, b1) = (1000usize, 1e-4, 0.02);
    let schedule = NoiseSchedule::linear(steps, b0, b1).unwrap();
    let mut worst = 0.0_f64;
    let mut product = 1.0;
    for t in 0..=steps {
        if t > 0 {
            let beta = b0 + (b1 - b0) * (t - 1) as f64 / (steps - 1) as f64;
            product *= 1.0 - beta;
        }
        worst = worst.max((schedule.alpha_bars()[t] - product).abs());
    }
    let decreasing = schedule.alpha_bars().windows(2).all(|w| w[1] < w[0]);
    outcome(
        worst <= 1e-12 && decreasing && schedule.alpha_bars().len() == steps + 1,
        format!("max |abar - oracle| = {worst:.1e}, strictly decreasing = {decreasing}"),
    )
}

fn c04_softmax_weights() -> Outcome {
    let mut r = rng(4);
    let mut failures = Vec::new();
    for case in 0..1000 {
        let n = r.random_range(1..=64);
        let q: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..=2.0)).collect();
        let w = quality::batch_weights(&q).unwrap();
        let w = w.as_slice();
        if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            failures.push(format!("case {case}: sum"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        let wp = quality::batch_weights(&qp).unwrap();
        if perm.iter().zip(wp.as_slice()).any(|(&i, v)| (w[i] - v).abs() > 1e-15) {
            failures.push(format!("case {case}: permutation"));
        }
        let shift = r.random_range(-50.0..50.0);
        let qs: Vec<f64> = q.iter().map(|v| v + shift).collect();
        let ws = quality::batch_weights(&qs).unwrap();
        if w.iter().zip(ws.as_slice()).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push(format!("case {case}: shift"));
        }
        for i in 0..n {
            for j in 0..n {
                if q[i] > q[j] && w[i] <= w[j] {
                    failures.push(format!("case {case}: order"));
                }
            }
        }
    }
    outcome(
        failures.is_empty(),
        format!("1000 batches, {} violations {:?}", failures.len(), failures.first()),
    )
}

fn axis_projector(k: usize) -> PcaProjector {
    let mut c = vec![0.0; k];
    c[0] = 1.0;
    PcaProjector::from_parts(vec![0.0; k], c, 2).unwrap()
}

fn two_token(fg: [f64; 4], bg: [f64; 4]) -> FeatureMap {
    FeatureMap::new(2, 1, 4, fg.into_iter().chain(bg).collect()).unwrap()
}

fn c05_quality_constructions() -> Outcome {
    let proj = axis_projector(4);
    let mut r = rng(5);
    let same = FeatureMap::new(3, 3, 4, normal_vec(&mut r, 36)).unwrap();
    let fitted = tensor::fit_pca_on_maps(&[&same]).unwrap();
    let q0 = quality::pair_quality(&same, &same, &fitted).unwrap().q;
    let q1 = quality::pair_quality(
        &two_token([1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]),
        &two_token([1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0]),
        &proj,
    )
    .unwrap()
    .q;
    let qm1 = quality::pair_quality(
        &two_token([1.0, 0.0, 1.0, 0.0], [-1.0, 0.0, 0.0, 1.0]),
        &two_token([1.0, 0.0, -1.0, 0.0], [-1.0, 0.0, 0.0, 1.0]),
        &proj,
    )
    .unwrap()
    .q;
    let cases_ok = q0.abs() <= 1e-9 && (q1 - 1.0).abs() <= 1e-9 && (qm1 + 1.0).abs() <= 1e-9;

    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let (h, w, k) = (r.random_range(1..8), r.random_range(2..8), r.random_range(1..10));
        let map = FeatureMap::new(h, w, k, normal_vec(&mut r, h * w * k)).unwrap();
        let proj = PcaProjector::from_parts(normal_vec(&mut r, k), normal_vec(&mut r, k), 2).unwrap();
        let (f, b) = quality::foreground_background_maps(&map, &proj).unwrap();
        for (x, y) in f.data().iter().zip(b.data()) {
            worst = worst.max((x + y - 1.0).abs());
        }
    }
    outcome(
        cases_ok && worst <= 1e-12,
        format!("q = ({q0:.1e}, {q1}, {qm1}), max |Mf + Mb - 1| = {worst:.1e}"),
    )
}

fn naive_info_nce(a: &[f64], p: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let d: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
        let nx: f64 = x.iter().map(|u| u * u).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|u| u * u).sum::<f64>().sqrt();
        d / (nx * ny)
    };
    let pos = (cos(a, p) / tau).exp();
    let denom: f64 = pos + negs.iter().map(|n| (cos(a, n) / tau).exp()).sum::<f64>();
    -(pos / denom).ln()
}

fn naive_swav_kl(target: &Matrix, predicted: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..target.rows() {
        let s: f64 = target.row(i).iter().sum();
        for j in 0..target.cols() {
            let t = target.get(i, j) / s;
            if t > 0.0 {
                total += t * (t / predicted.get(i, j)).ln();
            }
        }
    }
    total / target.rows() as f64
}

fn c06_loss_oracles() -> Outcome {
    let mut r = rng(6);
    let mut worst_nce = 0.0_f64;
    let mut worst_kl = 0.0_f64;
    for _ in 0..100 {
        let d = r.random_range(2..16);
        let tau = r.random_range(0.1..1.0);
        let a = normal_vec(&mut r, d);
        let p = normal_vec(&mut r, d);
        let negs: Vec<Vec<f64>> = (0..r.random_range(1..10)).map(|_| normal_vec(&mut r, d)).collect();
        let refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let got = losses::info_nce(&a, &p, &refs, tau).unwrap();
        worst_nce = worst_nce.max((got - naive_info_nce(&a, &p, &negs, tau)).abs());

        let (n, k) = (r.random_range(2..12), r.random_range(2..8));
        let scores = Matrix::new(n, k, normal_vec(&mut r, n * k)).unwrap();
        let logits = Matrix::new(n, k, normal_vec(&mut r, n * k)).unwrap();
        let targets = losses::sinkhorn_knopp(&scores, 0.5, 3).unwrap();
        let predicted = losses::softmax_rows(&logits, 0.1).unwrap();
        let got = losses::swav_kl(&predicted, &targets).unwrap();
        worst_kl = worst_kl.max((got - naive_swav_kl(targets.matrix(), &predicted)).abs());
    }
    let a = normal_vec(&mut r, 8);
    let zero_neg = losses::info_nce(&a, &a.iter().map(|v| 2.0 * v).collect::<Vec<_>>(), &[], 0.2).unwrap();

    // Cosine scores of unit embeddings against unit prototypes.
    let unit_rows = |r: &mut ChaCha8Rng, rows: usize, d: usize| -> Vec<Vec<f64>> {
        (0..rows)
            .map(|_| {
                let v = normal_vec(r, d);
                let n = tensor::norm(&v);
                v.iter().map(|x| x / n).collect()
            })
            .collect()
    };
    let (mut row_err, mut col_err) = (0.0_f64, 0.0_f64);
    for _ in 0..100 {
        let (n, p, d) = (r.random_range(2..33), r.random_range(2..17), 16);
        let z = unit_rows(&mut r, n, d);
        let c = unit_rows(&mut r, p, d);
        let scores = Matrix::new(
            n,
            p,
            z.iter().flat_map(|zi| c.iter().map(|ci| tensor::dot(zi, ci))).collect(),
        )
        .unwrap();
        let sk = losses::sinkhorn_knopp(&scores, SK_EPSILON, 50).unwrap();
        row_err = row_err.max(
            sk.row_sums()
                .iter()
                .map(|s| (s - 1.0 / n as f64).abs())
                .fold(0.0, f64::max),
        );
        col_err = col_err.max(
            sk.col_sums()
                .iter()
                .map(|s| (s - 1.0 / p as f64).abs())
                .fold(0.0, f64::max),
        );
    }
    outcome(
        worst_nce <= 1e-10 && worst_kl <= 1e-10 && zero_neg == 0.0 && row_err <= 1e-9 && col_err <= 1e-6,
        format!(
            "info_nce {worst_nce:.1e}, swav_kl {worst_kl:.1e}, zero-negatives {zero_neg}, sinkhorn rows {row_err:.1e} cols {col_err:.1e}"
        ),
    )
}

fn c07_gradient_checks() -> Outcome {
    let mut r = rng(7);
    let mut worst = 0.0_f64;
    let (mut configs, mut redrawn, mut runs) = (0, 0, 0);
    while configs < 20 {
        let family = if configs % 2 == 0 {
            LossFamily::InfoNce
        } else {
            LossFamily::NegCosine
        };
        let input_dim = r.random_range(3..12);
        let config = EncoderConfig {
            input_dim,
            hidden_dim: r.random_range(2..10),
            embed_dim: r.random_range(2..8),
            predictor: family == LossFamily::NegCosine && configs % 4 == 1,
            prototypes: 0,
            nonlinearity: [Nonlinearity::Tanh, Nonlinearity::Relu, Nonlinearity::Identity][configs % 3],
            init_gain: 1.0,
        };
        let encoder = ToyEncoder::new(&config, &mut r).unwrap();
        let n = r.random_range(2..7);
        let a: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input_dim)).collect();
        let b: Vec<Vec<f64>> = (0..n).map(|_| normal_vec(&mut r, input_dim)).collect();
        let ra: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
        let rb: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
        let settings = LossSettings {
            family,
            ..Default::default()
        };
        let q: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let weighted = quality::batch_weights(&q).unwrap().into_vec();
        let checks: Result<Vec<f64>, _> = [vec![1.0 / n as f64; n], weighted]
            .iter()
            .map(|w| gradient_check(&encoder, &settings, &ra, &rb, w, 1e-5))
            .collect();
        match checks {
            Ok(errors) => {
                worst = errors.iter().fold(worst, |m, e| m.max(*e));
                runs += errors.len();
                configs += 1;
            }
            // A dead ReLU layer maps some input to the zero embedding, which
            // has no defined direction; draw another configuration.
            Err(_) => redrawn += 1,
        }
    }
    outcome(
        worst < 1e-4,
        format!(
            "{runs} checks on {configs} configs ({redrawn} degenerate draws redrawn), max relative error {worst:.2e}"
        ),
    )
}

fn c08_pca_oracle() -> Outcome {
    let mut r = rng(8);
    let mut worst = 1.0_f64;
    for _ in 0..50 {
        let k = r.random_range(2..=8);
        let n = r.random_range(k + 2..60);
        let mix = normal_vec(&mut r, k * k);
        let samples: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let z = normal_vec(&mut r, k);
                (0..k).map(|i| (0..k).map(|j| mix[i * k + j] * z[j]).sum()).collect()
            })
            .collect();
        let fitted = tensor::fit_pca(&samples).unwrap();

        let x = DMatrix::from_fn(n, k, |i, j| samples[i][j]);
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, k, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let top = eig.eigenvalues.imax();
        let v = eig.eigenvectors.column(top);
        let cos: f64 = (0..k).map(|i| v[i] * fitted.component()[i]).sum::<f64>().abs();
        worst = worst.min(cos);
    }
    outcome(worst >= 0.999, format!("min |cos| over 50 datasets = {worst:.6}"))
}

fn arm(strategy: NoiseStrategy, weighting: WeightingMode, alpha: f64) -> TrainConfig {
    let mut config = TrainConfig {
        strategy,
        weighting,
        ..Default::default()
    };
    config.augmentation.drift_kappa = 2.0;
    config.augmentation.alpha = alpha;
    config
}

fn run_arm(config: &TrainConfig) -> Vec<ExperimentReport> {
    SEEDS.iter().map(|&s| train_run(config, s).unwrap()).collect()
}

fn accuracies(reports: &[ExperimentReport]) -> Vec<f64> {
    reports.iter().map(|r| r.probe_accuracy).collect()
}

fn fmt_accs(reports: &[ExperimentReport]) -> String {
    let accs: Vec<String> = accuracies(reports).iter().map(|a| format!("{a:.3}")).collect();
    format!("[{}]", accs.join(" "))
}

fn c09_quality_weighting() -> Outcome {
    let cs400 = NoiseStrategy::Constant(400);
    let uniform = run_arm(&arm(cs400, WeightingMode::Uniform, 1.0));
    let weighted = run_arm(&arm(cs400, WeightingMode::Quality, 1.0));
    let (mu, mq) = (median(accuracies(&uniform)), median(accuracies(&weighted)));
    let mixed: usize = weighted.iter().map(|r| r.pairs.mixed_batches).sum();
    let lower: usize = weighted.iter().map(|r| r.pairs.corrupted_lower_batches).sum();
    let share = lower as f64 / mixed.max(1) as f64;
    outcome(
        mq > mu && mixed > 0 && share >= 0.95,
        format!(
            "median quality {mq:.4} {} vs uniform {mu:.4} {}, corrupted lower in {lower}/{mixed} batches",
            fmt_accs(&weighted),
            fmt_accs(&uniform)
        ),
    )
}

fn c10_strategies() -> Outcome {
    let runs: Vec<(NoiseStrategy, Vec<ExperimentReport>)> = [
        NoiseStrategy::Adaptive,
        NoiseStrategy::Random,
        NoiseStrategy::Constant(400),
    ]
    .into_iter()
    .map(|s| (s, run_arm(&arm(s, WeightingMode::Uniform, 1.0))))
    .collect();
    let med: Vec<f64> = runs.iter().map(|(_, r)| median(accuracies(r))).collect();
    let flip = |r: &[ExperimentReport]| r.iter().map(|x| x.generation.flip_rate).sum::<f64>() / r.len() as f64;
    let (flip_as, flip_cs) = (flip(&runs[0].1), flip(&runs[2].1));
    outcome(
        med[0] >= med[1] && med[0] >= med[2] && flip_as < flip_cs,
        format!(
            "median AS {:.4} RS {:.4} CS(400) {:.4}, flip rate AS {flip_as:.3} vs CS(400) {flip_cs:.3}",
            med[0], med[1], med[2]
        ),
    )
}

fn c11_alpha() -> Outcome {
    let meds: Vec<(f64, f64, String)> = [0.0, 0.5, 1.0]
        .into_iter()
        .map(|alpha| {
            let r = run_arm(&arm(NoiseStrategy::Adaptive, WeightingMode::Quality, alpha));
            (alpha, median(accuracies(&r)), fmt_accs(&r))
        })
        .collect();
    let monotone = meds.windows(2).all(|w| w[1].1 >= w[0].1);
    let detail: Vec<String> = meds.iter().map(|(a, m, s)| format!("alpha {a}: {m:.4} {s}")).collect();
    outcome(monotone, detail.join(", "))
}

fn c12_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let mut files = Vec::new();
    for name in ["a.json", "b.json"] {
        let path = dir.path().join(name);
        let report = pipeline::cmd_train(&config).unwrap();
        io::write_text(&path, &pipeline::report_json(&report)).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let reports_equal = files[0] == files[1];

    let mut r = rng(12);
    let tensors: Vec<NamedTensor> = (0..8)
        .map(|i| {
            let dims = vec![r.random_range(1..5), r.random_range(1..5), r.random_range(1..9)];
            let len = dims.iter().product();
            let data: Vec<f32> = (0..len)
                .map(|_| f32::from_bits(r.random::<u32>() & 0xBF7F_FFFF))
                .collect();
            NamedTensor::new(format!("t{i}"), dims, data).unwrap()
        })
        .collect();
    let path = dir.path().join("round.gvtf");
    io::write_container(&path, &tensors).unwrap();
    let back = io::read_container(&path).unwrap();
    let bits_equal = back.len() == tensors.len()
        && back.iter().zip(&tensors).all(|(x, y)| {
            x.id == y.id
                && x.dims == y.dims
                && x.data
                    .iter()
                    .map(|v| v.to_bits())
                    .eq(y.data.iter().map(|v| v.to_bits()))
        });
    let rewritten = io::encode_container(&back).unwrap() == std::fs::read(&path).unwrap();
    outcome(
        reports_equal && bits_equal && rewritten,
        format!(
            "report files identical = {reports_equal}, container bit-exact = {}",
            bits_equal && rewritten
        ),
    )
}

type Criterion = (usize, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (
            1,
            "adaptive level grid vs integer oracle",
            Duration::from_secs(1),
            c01_adaptive_level_grid,
        ),
        (
            2,
            "noised embedding second moment",
            Duration::from_secs(5),
            c02_noising_moment,
        ),
        (
            3,
            "noise schedule vs cumulative product",
            Duration::from_secs(1),
            c03_schedule,
        ),
        (
            4,
            "softmax weight contract",
            Duration::from_secs(5),
            c04_softmax_weights,
        ),
        (
            5,
            "quality score constructions",
            Duration::from_secs(1),
            c05_quality_constructions,
        ),
        (6, "loss oracles", Duration::from_secs(10), c06_loss_oracles),
        (7, "gradient checks", Duration::from_secs(30), c07_gradient_checks),
        (
            8,
            "PCA vs dense eigendecomposition",
            Duration::from_secs(5),
            c08_pca_oracle,
        ),
        (
            9,
            "quality weighting beats uniform (toy)",
            Duration::from_secs(120),
            c09_quality_weighting,
        ),
        (
            10,
            "adaptive noise selection (toy)",
            Duration::from_secs(180),
            c10_strategies,
        ),
        (
            11,
            "probe accuracy monotone in alpha (toy)",
            Duration::from_secs(120),
            c11_alpha,
        ),
        (
            12,
            "determinism and container round trip",
            Duration::from_secs(30),
            c12_determinism,
        ),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, budget, run) in criteria {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = run();
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= budget;
        println!(
            "criterion {id:>2} {}: {name}: {} ({:.2}s, budget {}s)",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
