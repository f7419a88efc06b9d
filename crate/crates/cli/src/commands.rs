use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mevrl_core::analytic::{
    cve_moments_two_gaussians, default_gap_grid, fit_min_bias_kernel, ke_moments_two_gaussians, me_moments_two_gaussians,
    ae_moments_two_gaussians, KernelFamily, MomentPair, TwoGaussianConfig,
};
use mevrl_core::deep::{estimate_bias, train_deep, uniform_start, DeepConfig, DeepVariant, EnsembleNet, EnsembleView};
use mevrl_core::env::{CliffWalking, Environment, MaxBiasMdp};
use mevrl_core::estimators::KernelSpec;
use mevrl_core::rng::{stream_rng, SimRng};
use mevrl_core::sim::{
    default_ads_grid, default_estimators, run_iid_sweep, run_internet_ads, run_noniid_experiment, write_metrics_csv,
    AdsConfig, ArConfig, EstimatorId, IidSweepConfig,
};
use mevrl_core::tabular::{
    train_tabular, train_tabular_summary, write_summary_csv, Algorithm, LearningRate, TabularConfig, TabularLearner,
};
use rayon::prelude::*;
use toml::Value;

use crate::config::{config_err, load_section, parse_assignment, runtime_err, CliError, Section};
use crate::output::{smooth_csv, Output};
use crate::{Command, Common, Overrides};

/// Builds the `algorithm` value from `--algo`, `--alpha` and `--kernel`.
pub fn compose_algorithm(algo: Option<&str>, alpha: Option<f64>, kernel: Option<&str>) -> Result<Option<String>, CliError> {
    let algo = match (algo, alpha, kernel) {
        (None, None, None) => return Ok(None),
        (None, Some(_), None) => "te-q",
        (None, None, Some(_)) => "ke-q",
        (None, Some(_), Some(_)) => return Err(config_err("--alpha and --kernel belong to different algorithms")),
        (Some(a), _, _) => a,
    };
    let norm = algo.to_ascii_lowercase().replace(['-', '_'], "");
    let text = match norm.as_str() {
        "teq" => format!("te-q:{}", alpha.ok_or_else(|| config_err("te-q needs --alpha"))?),
        "keq" => format!("ke-q:{}", kernel.unwrap_or("gaussian:1")),
        _ if alpha.is_some() => return Err(config_err("--alpha only applies to te-q")),
        _ if kernel.is_some() => return Err(config_err("--kernel only applies to ke-q")),
        _ => algo.to_string(),
    };
    let parsed: Algorithm = text.parse().map_err(config_err)?;
    Ok(Some(parsed.to_string()))
}

fn compose_variant(variant: Option<&str>, alpha: Option<f64>, kernel: Option<&str>) -> Result<Option<String>, CliError> {
    let v = match (variant, alpha, kernel) {
        (None, None, None) => return Ok(None),
        (None, Some(_), None) => "te-bdqn",
        (None, None, Some(_)) => "ke-bdqn",
        (None, Some(_), Some(_)) => return Err(config_err("--alpha and --kernel belong to different variants")),
        (Some(v), _, _) => v,
    };
    let text = match v.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
        "tebdqn" => format!("te-bdqn:{}", alpha.ok_or_else(|| config_err("te-bdqn needs --alpha"))?),
        "kebdqn" => format!("ke-bdqn:{}", kernel.unwrap_or("gaussian:1")),
        _ if alpha.is_some() || kernel.is_some() => {
            return Err(config_err("--alpha and --kernel only apply to te-bdqn and ke-bdqn"))
        }
        _ => v.to_string(),
    };
    let parsed: DeepVariant = text.parse().map_err(config_err)?;
    Ok(Some(parsed.to_string()))
}

/// Section built from the config file, `--set` pairs, common flags and the
/// subcommand's own flags, in increasing precedence.
fn section(name: &'static str, common: &Common, flags: Vec<(String, Value)>) -> Result<Section, CliError> {
    let pending = match &common.config {
        Some(path) => load_section(path, name)?,
        None => toml::Table::new(),
    };
    let mut sec = Section::new(name, pending);
    let sets = common.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    sec.apply(sets);
    sec.apply(common.overrides());
    sec.apply(flags);
    Ok(sec)
}

/// Execution and presentation settings present in every section.
struct Context {
    out: PathBuf,
    smooth: f64,
}

impl Context {
    fn take(sec: &mut Section) -> Result<Self, CliError> {
        let default_out = std::env::var("MEVRL_OUT").unwrap_or_else(|_| "out".into());
        let out: String = sec.take("out", default_out)?;
        let jobs: usize = sec.take("jobs", 0usize)?;
        let smooth: f64 = sec.take("smooth", 0.0)?;
        if !(0.0..1.0).contains(&smooth) {
            return Err(config_err("smooth must lie in [0, 1)"));
        }
        // a second build fails harmlessly when the pool already exists
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        Ok(Self { out: PathBuf::from(out), smooth })
    }
}

/// Writes the CSV, its smoothed copy when requested, and the resolved config.
fn emit(ctx: &Context, sec: &Section, csv: &str, keep: &[&str], group: Option<&str>) -> Result<Output, CliError> {
    let out = Output::new(&ctx.out, sec.name())?;
    out.write(&out.csv_path(), csv.as_bytes())?;
    println!("wrote {}", out.csv_path().display());
    if ctx.smooth > 0.0 {
        let path = out.path("-smoothed.csv");
        out.write(&path, smooth_csv(csv, ctx.smooth, keep, group)?.as_bytes())?;
        println!("wrote {}", path.display());
    }
    let resolved = out.write_resolved(sec)?;
    println!("wrote {}", resolved.display());
    Ok(out)
}

fn csv_text(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<String, CliError> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(runtime_err)?;
    String::from_utf8(buf).map_err(runtime_err)
}

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::IidSweep(a) => {
            let mut o = Overrides::default();
            o.strings("estimators", &a.estimators);
            o.floats("means", &a.means);
            o.float("sigma_sq", a.sigma_sq);
            o.uints("sample_sizes", &a.sample_sizes);
            o.floats("gap_grid", &a.gap_grid);
            iid_sweep(section("iid-sweep", &a.common, o.0)?)
        }
        Command::Noniid(a) => {
            let mut o = Overrides::default();
            o.strings("estimators", &a.estimators);
            o.float("rho", a.rho);
            o.float("tau", a.tau);
            o.uint("horizon", a.horizon);
            o.floats("mu", &a.mu);
            o.float("sigma_sq", a.sigma_sq);
            noniid(section("noniid", &a.common, o.0)?)
        }
        Command::Ads(a) => {
            let mut o = Overrides::default();
            o.strings("estimators", &a.estimators);
            o.uint("n_customers", a.n_customers);
            o.uint("n_ads", a.n_ads);
            o.float("mu_hi", a.mu_hi);
            o.flag("grid", a.grid);
            ads(section("ads", &a.common, o.0)?)
        }
        Command::Analytic(a) => {
            let mut o = Overrides::default();
            o.strings("estimators", &a.estimators);
            o.float("mu1", a.mu1);
            o.float("mu2", a.mu2);
            o.float("sigma_sq", a.var);
            o.uint("n1", a.n);
            o.uint("n2", a.n);
            o.uint("n1", a.n1);
            o.uint("n2", a.n2);
            analytic(section("analytic", &a.common, o.0)?)
        }
        Command::FitKernel(a) => {
            let mut o = Overrides::default();
            o.strings("families", &a.families);
            o.float("sigma_sq", a.var);
            o.uint("n1", a.n);
            o.uint("n2", a.n);
            o.floats("gaps", &a.gaps);
            fit_kernel(section("fit-kernel", &a.common, o.0)?)
        }
        Command::SimpleMdp(a) => {
            let mut o = Overrides(a.tabular.overrides()?);
            o.uint("b_actions", a.b_actions);
            simple_mdp(section("simple-mdp", &a.common, o.0)?)
        }
        Command::Cliff(a) => {
            let mut o = Overrides(a.tabular.overrides()?);
            o.uint("width", a.width);
            o.uint("height", a.height);
            cliff(section("cliff", &a.common, o.0)?)
        }
        Command::DeepTrain(a) => {
            let mut o = Overrides::default();
            o.string("variant", compose_variant(a.variant.as_deref(), a.alpha, a.kernel.as_deref())?);
            o.uint("total_steps", a.steps);
            o.uint("heads", a.heads);
            o.float("learning_rate", a.learning_rate);
            o.flag("checkpoint", a.checkpoint);
            deep_train(section("deep-train", &a.common, o.0)?)
        }
        Command::EstimateBias(a) => {
            let mut o = Overrides(a.tabular.overrides()?);
            o.string("env", a.env);
            o.string("checkpoint", a.checkpoint.map(|p| p.display().to_string()));
            o.uint("bias_episodes", a.bias_episodes);
            estimate_bias_cmd(section("estimate-bias", &a.common, o.0)?)
        }
    }
}

fn metric_rows<'a>(
    keys: impl Fn() -> Vec<String> + 'a,
    metrics: &'a [mevrl_core::sim::MetricsRow],
) -> impl Iterator<Item = (Vec<String>, mevrl_core::sim::MetricsRow)> + 'a {
    metrics.iter().map(move |m| (keys(), *m))
}

fn iid_sweep(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let estimators: Vec<EstimatorId> = sec.take("estimators", default_estimators())?;
    let cfg = sec.finish(IidSweepConfig::default())?;
    cfg.validate().map_err(config_err)?;
    let rows = run_iid_sweep(&cfg, &estimators).map_err(runtime_err)?;
    let flat: Vec<_> =
        rows.iter().flat_map(|r| metric_rows(move || vec![r.mu1.to_string(), r.truth.to_string()], &r.metrics)).collect();
    let csv = csv_text(|b| write_metrics_csv(b, &["mu1", "truth"], &flat))?;
    emit(&ctx, &sec, &csv, &["mu1", "truth", "runs"], Some("name")).map(drop)
}

fn noniid(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let estimators: Vec<EstimatorId> = sec.take("estimators", default_estimators())?;
    let cfg = sec.finish(ArConfig::default())?;
    cfg.validate().map_err(config_err)?;
    let res = run_noniid_experiment(&cfg, &estimators).map_err(runtime_err)?;
    for m in &res.metrics {
        println!("{:<16} bias {:>10.6} variance {:>10.6}", m.estimator.to_string(), m.bias, m.variance);
    }
    let flat: Vec<_> = metric_rows(|| vec![cfg.rho.to_string()], &res.metrics).collect();
    let csv = csv_text(|b| write_metrics_csv(b, &["rho"], &flat))?;
    emit(&ctx, &sec, &csv, &[], None).map(drop)
}

fn ads(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let estimators: Vec<EstimatorId> = sec.take("estimators", default_estimators())?;
    let grid: bool = sec.take("grid", false)?;
    let cfg = sec.finish(AdsConfig::default())?;
    let configs = if grid {
        default_ads_grid().into_iter().map(|c| AdsConfig { runs: cfg.runs, seed: cfg.seed, ..c }).collect()
    } else {
        vec![cfg]
    };
    for c in &configs {
        c.validate().map_err(config_err)?;
    }
    let mut flat = Vec::new();
    for c in &configs {
        let row = run_internet_ads(c, &estimators).map_err(runtime_err)?;
        let keys = vec![c.n_customers.to_string(), c.n_ads.to_string(), c.mu_hi.to_string()];
        flat.extend(row.metrics.into_iter().map(|m| (keys.clone(), m)));
    }
    let csv = csv_text(|b| write_metrics_csv(b, &["n_customers", "n_ads", "mu_hi"], &flat))?;
    emit(&ctx, &sec, &csv, &[], None).map(drop)
}

fn base_two_gaussian() -> TwoGaussianConfig {
    TwoGaussianConfig { mu1: 0.0, mu2: 0.0, sigma_sq: 100.0, n1: 100, n2: 100 }
}

fn analytic(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let default_list = vec![
        EstimatorId::Me,
        EstimatorId::Cve,
        EstimatorId::Te { alpha: 0.05 },
        EstimatorId::Te { alpha: 0.1 },
        EstimatorId::Te { alpha: 0.15 },
        EstimatorId::Ke(KernelSpec::GaussianCdf { lambda: 1.0 }),
    ];
    let estimators: Vec<EstimatorId> = sec.take("estimators", default_list)?;
    let cfg = sec.finish(base_two_gaussian())?;
    cfg.validate().map_err(config_err)?;
    let mut csv = String::from("name,expectation,variance,bias,mse\n");
    for id in &estimators {
        let moments: MomentPair = match *id {
            EstimatorId::Me => me_moments_two_gaussians(&cfg),
            EstimatorId::Ae => ae_moments_two_gaussians(&cfg),
            EstimatorId::Cve if cfg.n1 < 2 || cfg.n2 < 2 => {
                eprintln!("CVE skipped: it needs at least two observations per variable");
                continue;
            }
            EstimatorId::Cve => cve_moments_two_gaussians(&cfg),
            EstimatorId::Te { alpha } => ke_moments_two_gaussians(&cfg, KernelSpec::IndicatorAlpha { alpha }),
            EstimatorId::Ke(spec) => ke_moments_two_gaussians(&cfg, spec),
            EstimatorId::De | EstimatorId::We => {
                return Err(config_err(format!("{id} has no closed form here; use ME, AE, CVE, TE or KE")))
            }
        }
        .map_err(runtime_err)?;
        let truth = cfg.true_max();
        println!("{:<16} expectation {:.6} variance {:.6}", id.to_string(), moments.expectation, moments.variance);
        let name = id.to_string();
        let _ = writeln!(
            csv,
            "\"{name}\",{},{},{},{}",
            moments.expectation,
            moments.variance,
            moments.bias(truth),
            moments.mse(truth)
        );
    }
    emit(&ctx, &sec, &csv, &[], None).map(drop)
}

fn fit_kernel(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let families: Vec<String> = sec.take("families", vec!["indicator-alpha".to_string(), "gaussian-cdf".to_string()])?;
    let gaps: Vec<f64> = sec.take("gaps", default_gap_grid())?;
    let base = sec.finish(base_two_gaussian())?;
    base.validate().map_err(config_err)?;
    if gaps.is_empty() || gaps.iter().any(|g| !g.is_finite()) {
        return Err(config_err("gaps must be a non-empty list of finite values"));
    }
    let parsed = families.iter().map(|f| f.parse::<KernelFamily>().map_err(config_err)).collect::<Result<Vec<_>, _>>()?;
    let mut csv = String::from("family,spec,objective\n");
    for (name, family) in families.iter().zip(parsed) {
        let fit = fit_min_bias_kernel(family, &gaps, &base).map_err(runtime_err)?;
        println!("{name:<18} {} objective {:.6e}", fit.spec, fit.objective);
        let _ = writeln!(csv, "{name},{},{}", fit.spec, fit.objective);
    }
    emit(&ctx, &sec, &csv, &[], None).map(drop)
}

/// Runs the tabular learner and emits averages or per-run rows.
fn tabular_output<E: Environment + ?Sized>(
    ctx: &Context,
    sec: &Section,
    env: &E,
    cfg: &TabularConfig,
    runs: usize,
    seed: u64,
    per_run: bool,
) -> Result<Vec<mevrl_core::tabular::EpisodeSummary>, CliError> {
    if per_run {
        let log = train_tabular(env, cfg, runs, seed).map_err(runtime_err)?;
        let csv = csv_text(|b| log.write_csv(b))?;
        emit(ctx, sec, &csv, &["episode", "steps", "first_action"], Some("run"))?;
        Ok(log.summary())
    } else {
        let rows = train_tabular_summary(env, cfg, runs, seed).map_err(runtime_err)?;
        let csv = csv_text(|b| write_summary_csv(b, &rows))?;
        emit(ctx, sec, &csv, &["episode", "runs"], None)?;
        Ok(rows)
    }
}

fn positive_runs(runs: usize) -> Result<usize, CliError> {
    if runs == 0 {
        Err(config_err("runs must be positive"))
    } else {
        Ok(runs)
    }
}

fn simple_mdp(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let runs = positive_runs(sec.take("runs", 10_000usize)?)?;
    let seed: u64 = sec.take("seed", 0u64)?;
    let per_run: bool = sec.take("per_run", false)?;
    let d = MaxBiasMdp::default();
    let env = MaxBiasMdp {
        b_actions: sec.take("b_actions", d.b_actions)?,
        b_reward_mean: sec.take("b_reward_mean", d.b_reward_mean)?,
        b_reward_sd: sec.take("b_reward_sd", d.b_reward_sd)?,
    };
    env.validate().map_err(config_err)?;
    let cfg = sec.finish(TabularConfig::default())?;
    cfg.validate().map_err(config_err)?;
    let rows = tabular_output(&ctx, &sec, &env, &cfg, runs, seed, per_run)?;
    if let Some(last) = rows.last() {
        println!(
            "{}: left fraction {:.4} at episode {}, mean max Q(A) {:.4}",
            cfg.algorithm,
            last.first_action_zero,
            last.episode,
            last.mean_max_q_start
        );
    }
    Ok(())
}

fn cliff_defaults() -> TabularConfig {
    TabularConfig { episodes: 3000, learning_rate: LearningRate::VisitPolynomial, ..TabularConfig::default() }
}

fn take_cliff(sec: &mut Section) -> Result<CliffWalking, CliError> {
    let d = CliffWalking::default();
    let env = CliffWalking { width: sec.take("width", d.width)?, height: sec.take("height", d.height)? };
    env.validate().map_err(config_err)?;
    Ok(env)
}

fn cliff(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let runs = positive_runs(sec.take("runs", 100usize)?)?;
    let seed: u64 = sec.take("seed", 0u64)?;
    let per_run: bool = sec.take("per_run", false)?;
    let env = take_cliff(&mut sec)?;
    let cfg = sec.finish(cliff_defaults())?;
    cfg.validate().map_err(config_err)?;
    let rows = tabular_output(&ctx, &sec, &env, &cfg, runs, seed, per_run)?;
    let tail = &rows[rows.len().saturating_sub(500)..];
    if let Some(last) = rows.last() {
        let mean = tail.iter().map(|r| r.mean_return).sum::<f64>() / tail.len() as f64;
        println!(
            "{}: mean return over the last {} episodes {:.3}, final max Q(S) {:.4}",
            cfg.algorithm,
            tail.len(),
            mean,
            last.mean_max_q_start
        );
    }
    Ok(())
}

fn deep_train(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let runs = positive_runs(sec.take("runs", 1usize)?)?;
    let seed: u64 = sec.take("seed", 0u64)?;
    let variant: DeepVariant = sec.take("variant", DeepVariant::Bdqn)?;
    let checkpoint: bool = sec.take("checkpoint", false)?;
    let env = take_cliff(&mut sec)?;
    let cfg = sec.finish(DeepConfig::default())?;
    cfg.validate().map_err(config_err)?;
    // run r trains with seed + r
    let results: Vec<_> = (0..runs as u64)
        .into_par_iter()
        .map(|r| train_deep(&env, variant, &cfg, seed.wrapping_add(r)))
        .collect::<Result<_, _>>()
        .map_err(runtime_err)?;
    let mut csv = String::from("run,seed,step,eval_return,bias_estimate,alpha,loss\n");
    for (r, run) in results.iter().enumerate() {
        for row in &run.log.rows {
            let alpha = row.alpha.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(
                csv,
                "{r},{},{},{},{},{alpha},{}",
                run.log.seed, row.step, row.eval_return, row.bias_estimate, row.loss
            );
        }
        let last = run.log.rows.last();
        println!(
            "run {r} ({variant}): {} finished episodes, final evaluation return {}, final bias {}",
            run.log.finished_episodes,
            last.map_or(f64::NAN, |x| x.eval_return),
            last.map_or(f64::NAN, |x| x.bias_estimate)
        );
    }
    let out = emit(&ctx, &sec, &csv, &["seed", "step"], Some("run"))?;
    if checkpoint {
        for (r, run) in results.iter().enumerate() {
            let path = out.path(&format!("-run{r}.ckpt"));
            write_checkpoint(&path, &run.net)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn write_checkpoint(path: &Path, net: &EnsembleNet) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| runtime_err(format!("{}: {e}", path.display())))?;
    net.write_checkpoint(std::io::BufWriter::new(file)).map_err(runtime_err)
}

fn estimate_bias_cmd(mut sec: Section) -> Result<(), CliError> {
    let ctx = Context::take(&mut sec)?;
    let runs = positive_runs(sec.take("runs", 100usize)?)?;
    let seed: u64 = sec.take("seed", 0u64)?;
    let env_name: String = sec.take("env", "cliff".to_string())?;
    let checkpoint: String = sec.take("checkpoint", String::new())?;
    let episodes: usize = sec.take("bias_episodes", 10usize)?;
    let max_steps: usize = sec.take("bias_max_steps", 200usize)?;
    if episodes == 0 || max_steps == 0 {
        return Err(config_err("bias_episodes and bias_max_steps must be positive"));
    }
    let cliff_env = take_cliff(&mut sec)?;
    let maxbias = MaxBiasMdp::default();
    let env: &dyn Environment = match env_name.as_str() {
        "cliff" => &cliff_env,
        "maxbias" => &maxbias,
        other => return Err(config_err(format!("unknown env `{other}`; use cliff or maxbias"))),
    };
    let cfg = sec.finish(cliff_defaults())?;
    cfg.validate().map_err(config_err)?;

    let biases: Vec<f64> = if checkpoint.is_empty() {
        (0..runs)
            .into_par_iter()
            .map(|r| -> mevrl_core::error::Result<f64> {
                let mut rng = stream_rng(seed, &[r as u64]);
                let mut learner = TabularLearner::new(env, cfg)?;
                for _ in 0..cfg.episodes {
                    learner.run_episode(&mut rng)?;
                }
                let mut brng = stream_rng(seed, &[r as u64, 1]);
                let mut start = |g: &mut SimRng| uniform_start(env, g);
                estimate_bias(&learner, env, episodes, cfg.gamma, max_steps, &mut start, &mut brng)
            })
            .collect::<Result<_, _>>()
            .map_err(runtime_err)?
    } else {
        if env_name != "cliff" {
            return Err(config_err("checkpoints are evaluated on cliff walking"));
        }
        let file = std::fs::File::open(&checkpoint).map_err(|e| runtime_err(format!("{checkpoint}: {e}")))?;
        let net = EnsembleNet::read_checkpoint(std::io::BufReader::new(file)).map_err(runtime_err)?;
        if net.main().input_dim() != cliff_env.state_count() || net.actions() != cliff_env.max_action_count() {
            return Err(runtime_err("checkpoint does not match the cliff grid"));
        }
        let view = EnsembleView { net: &net, env: &cliff_env };
        let mut rng = stream_rng(seed, &[]);
        let mut start = |g: &mut SimRng| uniform_start(&cliff_env, g);
        vec![estimate_bias(&view, &cliff_env, episodes, cfg.gamma, max_steps, &mut start, &mut rng).map_err(runtime_err)?]
    };
    let mut csv = String::from("run,bias\n");
    for (r, b) in biases.iter().enumerate() {
        let _ = writeln!(csv, "{r},{b}");
    }
    let n = biases.len() as f64;
    let mean = biases.iter().sum::<f64>() / n;
    println!("mean bias {mean:.6} over {} run(s)", biases.len());
    emit(&ctx, &sec, &csv, &["run"], None).map(drop)
}
