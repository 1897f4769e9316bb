use std::collections::BTreeMap;

use clap::ValueEnum;
use pvi_core::expfam::{GaussianDist, MeanParams, NaturalParams};
use pvi_core::models::{self, Dataset, Hyperparams, ModelKind, Row, OBS_LOG_VARIANCE};
use pvi_core::pep::{pep_step, spep_step, PepCfg, SharedSiteState, TiltMethod};
use pvi_core::pvi::{
    global_free_energy, local_free_energy, mirror_step, parallel_fixed_point_step, refine_fixed_point, run,
    stochastic_global_step, sum_sites, LocalOptimizerCfg, PosteriorState, RunCfg, Schedule, Shards,
};
use pvi_core::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::failure::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Suite {
    Properties,
    PepLimit,
    Gradients,
}

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    Line { name, pass, detail }
}

pub fn check(suite: Suite, seed: u64) -> Result<(), Failure> {
    let lines = match suite {
        Suite::Properties => properties(seed)?,
        Suite::PepLimit => pep_limit(seed)?,
        Suite::Gradients => gradients(seed)?,
    };
    let width = lines.iter().map(|l| l.name.len()).max().unwrap_or(0);
    for l in &lines {
        println!(
            "{:<width$}  {}  {}",
            l.name,
            if l.pass { "PASS" } else { "FAIL" },
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        return Err(Failure::CheckFailed(format!("{failed} of {} checks failed", lines.len())));
    }
    Ok(())
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

fn gaussian(r: &mut ChaCha8Rng, dim: usize, mean_sd: f64, var: (f64, f64)) -> NaturalParams {
    let m: Vec<f64> = (0..dim).map(|_| mean_sd * normal(r)).collect();
    let v: Vec<f64> = (0..dim).map(|_| r.random_range(var.0..var.1)).collect();
    NaturalParams::from_mean_var(&m, &v).expect("positive variances")
}

/// A proper site: precision and shift of moderate size.
fn site(r: &mut ChaCha8Rng, dim: usize) -> NaturalParams {
    let e1 = (0..dim).map(|_| normal(r)).collect();
    let e2 = (0..dim).map(|_| -r.random_range(0.1..1.0)).collect();
    NaturalParams::new(e1, e2).expect("finite")
}

fn logistic_data(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Dataset {
    let w: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
    let rows = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
            let a: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let y = if r.random::<f64>() < models::sigmoid(a) { 1.0 } else { 0.0 };
            Row::new(x, y)
        })
        .collect();
    Dataset::new(rows).expect("rows share a dimension")
}

fn regression_data(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Dataset {
    let w: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
    let rows = (0..n)
        .map(|_| {
            let x: Vec<f64> = (0..dim).map(|_| normal(r)).collect();
            let y = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5 * normal(r);
            Row::new(x, y)
        })
        .collect();
    Dataset::new(rows).expect("rows share a dimension")
}

fn targets(r: &mut ChaCha8Rng, n: usize) -> Dataset {
    let mu = normal(r);
    let ys: Vec<f64> = (0..n).map(|_| mu + normal(r)).collect();
    Dataset::from_targets(&ys)
}

fn split(data: &Dataset, k: usize) -> Shards {
    let mut out: Shards = BTreeMap::new();
    for i in 0..k {
        let idx: Vec<usize> = (i..data.len()).step_by(k).collect();
        out.insert(i, data.subset(&idx));
    }
    out
}

fn bits(eta: &NaturalParams) -> Vec<u64> {
    eta.to_flat().iter().map(|x| x.to_bits()).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn properties(s: u64) -> Result<Vec<Line>, Failure> {
    let mut r = seed::rng(s, &[1]);
    let mut out = Vec::new();

    // Every update path keeps posterior == prior + sites, bit for bit.
    let ids = [0, 1, 2, 3];
    let mut state = PosteriorState::init(gaussian(&mut r, 2, 1.0, (0.5, 2.0)), &ids)?;
    let mut bad = 0;
    let ops = 2000;
    for _ in 0..ops {
        let next = match r.random_range(0..3) {
            0 => state.with_site(r.random_range(0..4), site(&mut r, 2)),
            1 => {
                let a = r.random_range(0..4);
                let b = (a + 1 + r.random_range(0..3)) % 4;
                state.with_sites(vec![(a, site(&mut r, 2)), (b, site(&mut r, 2))])
            }
            _ => state.with_prior(gaussian(&mut r, 2, 1.0, (0.5, 2.0))),
        };
        if let Ok(n) = next {
            state = n;
        }
        let resum = sum_sites(state.prior(), state.sites().map(|s| &s.natural))?;
        if bits(&resum) != bits(state.posterior()) {
            bad += 1;
        }
    }
    out.push(line("posterior = prior + sites", bad == 0, format!("{ops} updates, {bad} inconsistent")));

    // Local free energies add up to the global one.
    let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, 0.2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = r.random_range(1..6);
        let data = targets(&mut r, 30);
        let shards = split(&data, k);
        let ids: Vec<usize> = (0..k).collect();
        let mut st = PosteriorState::init(gaussian(&mut r, 2, 1.0, (0.5, 2.0)), &ids)?;
        for i in 0..k {
            st = st.with_site(i, site(&mut r, 2))?;
        }
        let local: f64 = (0..k)
            .map(|i| local_free_energy(&st, i, &shards[&i], &ModelKind::GaussianMean, &eps, 0))
            .sum::<Result<f64, _>>()?;
        let global = global_free_energy(&st, &shards, &ModelKind::GaussianMean, &eps, 0)?;
        worst = worst.max((local - global).abs() / global.abs().max(1.0));
    }
    out.push(line("sum of local energies = global", worst < 1e-10, format!("50 states, worst relative gap {worst:.2e}")));

    // Conjugate fixed points reproduce the exact posterior for any K.
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let s2: f64 = r.random_range(0.3..2.0);
        let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, s2.ln());
        let (m0, v0) = (normal(&mut r), r.random_range(0.5..3.0));
        let prior = NaturalParams::from_mean_var(&[m0], &[v0])?;
        let data = targets(&mut r, 40);
        let sum_y: f64 = data.rows().iter().map(|row| row.target).sum();
        let prec = 1.0 / v0 + data.len() as f64 / s2;
        let exact = NaturalParams::from_mean_var(&[(m0 / v0 + sum_y / s2) / prec], &[1.0 / prec])?;
        for k in [1, 4, 40] {
            let shards = split(&data, k);
            let ids: Vec<usize> = (0..k).collect();
            let cfg = RunCfg {
                optimizer: LocalOptimizerCfg::fixed_point(1.0, 1),
                tolerance: 1e-13,
                ..RunCfg::default()
            };
            let o = run(
                &PosteriorState::init(prior.clone(), &ids)?,
                &shards,
                &ModelKind::GaussianMean,
                &eps,
                &Schedule::RoundRobin { sweeps: 20 },
                &cfg,
            )?;
            worst = worst.max(rel(&o.state.posterior().to_flat(), &exact.to_flat()));
        }
    }
    out.push(line("conjugate PVI = exact posterior", worst < 1e-10, format!("K in {{1, 4, 40}}, worst gap {worst:.2e}")));

    // Parallel steps with one row per shard equal the batch step.
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let data = regression_data(&mut r, 12, 3);
        let eps = Hyperparams::new().with(OBS_LOG_VARIANCE, 0.0);
        let prior = NaturalParams::isotropic(3, 0.0, 1.0)?;
        let (one, many) = (split(&data, 1), split(&data, 12));
        let mut a = PosteriorState::init(prior.clone(), &[0])?;
        let mut b = PosteriorState::init(prior, &(0..12).collect::<Vec<_>>())?;
        for _ in 0..20 {
            a = parallel_fixed_point_step(&a, &one, &ModelKind::LinearRegression, &eps, 0.5, 0)?;
            b = parallel_fixed_point_step(&b, &many, &ModelKind::LinearRegression, &eps, 0.5, 0)?;
            worst = worst.max(rel(&a.posterior().to_flat(), &b.posterior().to_flat()));
        }
    }
    out.push(line("parallel steps: one row per shard = batch", worst < 1e-10, format!("worst gap {worst:.2e}")));

    // The mirror-descent form is the same step as the fixed-point form.
    let model = ModelKind::logistic_quadrature(31);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let data = logistic_data(&mut r, 8, 2);
        let st = PosteriorState::init(gaussian(&mut r, 2, 0.5, (0.5, 2.0)), &[0, 1])?
            .with_sites(vec![(0, site(&mut r, 2).scale(0.3)), (1, site(&mut r, 2))])?;
        let rho = r.random_range(0.1..1.0);
        let (fp, _) = refine_fixed_point(&st, 0, &data, &model, &Hyperparams::new(), &LocalOptimizerCfg::fixed_point(rho, 1), 0)?;
        let md = mirror_step(&st, 0, &data, &model, &Hyperparams::new(), rho, 0)?;
        worst = worst.max(rel(&md.posterior().to_flat(), &fp.posterior().to_flat()));
    }
    out.push(line("mirror step = fixed-point step", worst < 1e-10, format!("50 states, worst gap {worst:.2e}")));

    // Natural and mean parameters invert each other.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let eta = gaussian(&mut r, 3, 3.0, (0.01, 10.0));
        let back = eta.to_mean()?.to_natural()?;
        worst = worst.max(rel(&back.to_flat(), &eta.to_flat()));
    }
    out.push(line("natural <-> mean round trip", worst < 1e-10, format!("1000 draws, worst gap {worst:.2e}")));
    Ok(out)
}

const ALPHAS: [f64; 5] = [4e-2, 2e-2, 1e-2, 5e-3, 2.5e-3];

fn pep_limit(s: u64) -> Result<Vec<Line>, Failure> {
    let mut r = seed::rng(s, &[2]);
    let model = ModelKind::logistic_quadrature(61);
    let eps = Hyperparams::new();
    let mut pep_table = Vec::new();
    let mut spep_table = Vec::new();
    for _ in 0..10 {
        let prior = gaussian(&mut r, 1, 0.5, (0.5, 2.0));
        let n = r.random_range(1..=10);
        let data = logistic_data(&mut r, n, 1);
        let state = PosteriorState::init(prior.clone(), &[0, 1])?
            .with_sites(vec![(0, site(&mut r, 1).scale(0.5)), (1, site(&mut r, 1))])?;
        let rho = 0.5;
        let (fp, _) = refine_fixed_point(&state, 0, &data, &model, &eps, &LocalOptimizerCfg::fixed_point(rho, 1), 0)?;
        let gaps = ALPHAS
            .iter()
            .map(|&alpha| {
                let cfg = PepCfg {
                    method: TiltMethod::Quadrature1D { nodes: 61 },
                    allow_overshoot: true,
                    ..PepCfg::new(alpha, rho)
                };
                Ok(pep_step(&state, 0, &data, &model, &eps, &cfg, 0)?
                    .posterior()
                    .linf_distance(fp.posterior()))
            })
            .collect::<Result<Vec<f64>, Failure>>()?;
        pep_table.push(gaps);

        let groups = r.random_range(2..=6);
        let shared = SharedSiteState::from_site(prior.clone(), site(&mut r, 1).scale(0.3), groups)?;
        let rho = 0.1;
        let sg = stochastic_global_step(shared.q(), &prior, &data, groups, rho, &model, &eps, 0)?;
        let gaps = ALPHAS
            .iter()
            .map(|&alpha| {
                let cfg = PepCfg {
                    allow_overshoot: true,
                    ..PepCfg::new(alpha, rho)
                };
                Ok(spep_step(&shared, &data, &model, &eps, &cfg, 0)?.posterior().linf_distance(&sg))
            })
            .collect::<Result<Vec<f64>, Failure>>()?;
        spep_table.push(gaps);
    }
    // Mean gap per alpha and the ratio between successive halvings.
    let mean = |t: &[Vec<f64>], j: usize| t.iter().map(|g| g[j]).sum::<f64>() / t.len() as f64;
    println!("{:>8}  {:>11}  {:>6}  {:>11}  {:>6}", "alpha", "pep_gap", "ratio", "spep_gap", "ratio");
    for (j, alpha) in ALPHAS.iter().enumerate() {
        let (p, q) = (mean(&pep_table, j), mean(&spep_table, j));
        let ratio = |t: &[Vec<f64>], v: f64| {
            if j == 0 {
                "-".to_string()
            } else {
                format!("{:.3}", v / mean(t, j - 1))
            }
        };
        println!(
            "{alpha:>8}  {p:>11.4e}  {:>6}  {q:>11.4e}  {:>6}",
            ratio(&pep_table, p),
            ratio(&spep_table, q)
        );
    }
    println!();
    let worst = |t: &[Vec<f64>]| {
        t.iter()
            .flat_map(|g| g.windows(2).map(|w| w[1] / w[0]))
            .fold(0.0_f64, f64::max)
    };
    let (wp, ws) = (worst(&pep_table), worst(&spep_table));
    Ok(vec![
        line("pep gap halves with alpha", wp <= 0.6, format!("10 cases, worst ratio {wp:.3} (limit 0.6)")),
        line("spep gap halves with alpha", ws <= 0.6, format!("10 cases, worst ratio {ws:.3} (limit 0.6)")),
    ])
}

fn from_mean_params(mu1: &[f64], mu2: &[f64]) -> Result<GaussianDist, Failure> {
    let mp = MeanParams::new(mu1.to_vec(), mu2.to_vec())?;
    Ok(GaussianDist::new(mp.to_natural()?)?)
}

fn fd_grad(model: &ModelKind, q: &GaussianDist, data: &Dataset, eps: &Hyperparams, seed: u64) -> Result<Vec<f64>, Failure> {
    let mp = q.mean_params();
    let dim = q.dim();
    let mut out = vec![0.0; 2 * dim];
    for which in 0..2 {
        for d in 0..dim {
            let base = if which == 0 { mp.mu1[d] } else { mp.mu2[d] };
            let h = 1e-5 * base.abs().max(1.0);
            let eval = |sign: f64| -> Result<f64, Failure> {
                let (mut mu1, mut mu2) = (mp.mu1.clone(), mp.mu2.clone());
                if which == 0 {
                    mu1[d] += sign * h;
                } else {
                    mu2[d] += sign * h;
                }
                Ok(models::expected_loglik(model, &from_mean_params(&mu1, &mu2)?, data, eps, seed)?)
            };
            out[which * dim + d] = (eval(1.0)? - eval(-1.0)?) / (2.0 * h);
        }
    }
    Ok(out)
}

fn gradients(s: u64) -> Result<Vec<Line>, Failure> {
    let mut r = seed::rng(s, &[3]);
    let mut out = Vec::new();
    let models: [(&'static str, ModelKind); 4] = [
        ("gaussian mean", ModelKind::GaussianMean),
        ("linear regression", ModelKind::LinearRegression),
        ("logistic (quadrature)", ModelKind::logistic_quadrature(31)),
        ("logistic (monte carlo)", ModelKind::logistic(32, 11)),
    ];
    for (name, model) in models {
        let mut worst: f64 = 0.0;
        let mut worst_hyper: f64 = 0.0;
        for case in 0..20u64 {
            let dim = 1 + (case as usize) % 4;
            let q = GaussianDist::new(gaussian(&mut r, dim, 1.0, (0.2, 2.0)))?;
            let (data, eps) = match model {
                ModelKind::GaussianMean => (targets(&mut r, 10), Hyperparams::new().with(OBS_LOG_VARIANCE, r.random_range(-1.0..1.0))),
                ModelKind::LinearRegression => (
                    regression_data(&mut r, 10, dim),
                    Hyperparams::new().with(OBS_LOG_VARIANCE, r.random_range(-1.0..1.0)),
                ),
                ModelKind::LogisticRegression(_) => (logistic_data(&mut r, 10, dim), Hyperparams::new()),
            };
            let g = models::grad_loglik_mean_params(&model, &q, &data, &eps, case)?;
            let fd = fd_grad(&model, &q, &data, &eps, case)?;
            let scale = fd.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1e-12);
            let err = g.to_flat().iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            worst = worst.max(err);
            for name in model.hyper_names() {
                let gh = models::grad_loglik_hyper(&model, &q, &data, &eps, case)?;
                let h = 1e-5;
                let at = |delta: f64| -> Result<f64, Failure> {
                    let mut e = eps.clone();
                    e.set(name, eps.get(name).unwrap_or(0.0) + delta);
                    Ok(models::expected_loglik(&model, &q, &data, &e, case)?)
                };
                let fd = (at(h)? - at(-h)?) / (2.0 * h);
                let an = gh.get(name).unwrap_or(0.0);
                worst_hyper = worst_hyper.max((an - fd).abs() / fd.abs().max(1.0));
            }
        }
        let pass = worst < 1e-6 && worst_hyper < 1e-6;
        let detail = if model.hyper_names().is_empty() {
            format!("20 cases, worst relative error {worst:.2e} (limit 1e-6)")
        } else {
            format!("20 cases, worst relative error {worst:.2e}, hyper {worst_hyper:.2e} (limit 1e-6)")
        };
        out.push(line(name, pass, detail));
    }
    Ok(out)
}
