mod commands;
mod config;
mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::Value;

#[derive(Parser, Debug)]
#[command(name = "mevrl", version, about = "Estimators of the maximum expected value and the Q-learners built on them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one is also a key of the
/// subcommand's config section.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory [default: $MEVRL_OUT, else ./out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// TOML file with a [<subcommand>] section, or a resolved-config.json.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets a key of the subcommand's section; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Also write an exponentially smoothed copy of the CSV with this weight in [0, 1).
    #[arg(long)]
    smooth: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut o = Overrides::default();
        o.int("seed", self.seed.map(|s| s as i64));
        o.int("runs", self.runs.map(|r| r as i64));
        o.int("jobs", self.jobs.map(|j| j as i64));
        o.string("out", self.out.as_ref().map(|p| p.display().to_string()));
        o.float("smooth", self.smooth);
        o.0
    }
}

#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put(&mut self, key: &str, v: Option<Value>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v));
        }
    }
    fn int(&mut self, key: &str, v: Option<i64>) {
        self.put(key, v.map(Value::Integer));
    }
    fn uint(&mut self, key: &str, v: Option<usize>) {
        self.int(key, v.map(|x| x as i64));
    }
    fn float(&mut self, key: &str, v: Option<f64>) {
        self.put(key, v.map(Value::Float));
    }
    fn string(&mut self, key: &str, v: Option<String>) {
        self.put(key, v.map(Value::String));
    }
    fn flag(&mut self, key: &str, set: bool) {
        if set {
            self.put(key, Some(Value::Boolean(true)));
        }
    }
    fn floats(&mut self, key: &str, v: &Option<Vec<f64>>) {
        self.put(key, v.as_ref().map(|xs| Value::Array(xs.iter().map(|&x| Value::Float(x)).collect())));
    }
    fn uints(&mut self, key: &str, v: &Option<Vec<usize>>) {
        self.put(key, v.as_ref().map(|xs| Value::Array(xs.iter().map(|&x| Value::Integer(x as i64)).collect())));
    }
    fn strings(&mut self, key: &str, v: &Option<Vec<String>>) {
        self.put(key, v.as_ref().map(|xs| Value::Array(xs.iter().cloned().map(Value::String).collect())));
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bias, variance and MSE of the estimators over a grid of the first mean.
    IidSweep(IidSweepArgs),
    /// Estimators applied to exponentially weighted means of AR(1) processes.
    Noniid(NoniidArgs),
    /// Largest click rate among Bernoulli ads.
    Ads(AdsArgs),
    /// Closed-form moments for two Gaussian variables.
    Analytic(AnalyticArgs),
    /// Kernel parameters minimizing the squared bias over a range of gaps.
    FitKernel(FitKernelArgs),
    /// Tabular learners on the maximization-bias MDP.
    SimpleMdp(SimpleMdpArgs),
    /// Tabular learners on cliff walking.
    Cliff(CliffArgs),
    /// Deep learners on one-hot cliff walking.
    DeepTrain(DeepTrainArgs),
    /// Bias of greedy value estimates: trained tabular learners or a deep checkpoint.
    EstimateBias(EstimateBiasArgs),
}

#[derive(Args, Debug)]
struct IidSweepArgs {
    #[command(flatten)]
    common: Common,
    /// Estimators, e.g. me,de,cve,we,te:0.1,ke:gaussian:1.
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    means: Option<Vec<f64>>,
    #[arg(long)]
    sigma_sq: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    sample_sizes: Option<Vec<usize>>,
    /// Values of the first mean.
    #[arg(long, value_delimiter = ',')]
    gap_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct NoniidArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    mu: Option<Vec<f64>>,
    #[arg(long)]
    sigma_sq: Option<f64>,
}

#[derive(Args, Debug)]
struct AdsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long)]
    n_customers: Option<usize>,
    #[arg(long)]
    n_ads: Option<usize>,
    #[arg(long)]
    mu_hi: Option<f64>,
    /// Run the six default configurations instead of a single one.
    #[arg(long)]
    grid: bool,
}

#[derive(Args, Debug)]
struct AnalyticArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    #[arg(long, allow_negative_numbers = true)]
    mu1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    mu2: Option<f64>,
    /// Common variance σ² of both variables.
    #[arg(long)]
    var: Option<f64>,
    /// Sample size of both variables.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
}

#[derive(Args, Debug)]
struct FitKernelArgs {
    #[command(flatten)]
    common: Common,
    /// indicator-alpha, gaussian-cdf or shifted-beta-cdf.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    #[arg(long)]
    var: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    gaps: Option<Vec<f64>>,
}

/// Parameters of the tabular learners.
#[derive(Args, Debug, Clone, Default)]
struct TabularArgs {
    /// q, double-q, te-q, ke-q or we-q.
    #[arg(long)]
    algo: Option<String>,
    /// Significance level of te-q.
    #[arg(long)]
    alpha: Option<f64>,
    /// Kernel of ke-q, e.g. gaussian:1.
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Constant exploration rate.
    #[arg(long, conflicts_with = "anneal")]
    epsilon: Option<f64>,
    /// Exploration rate 1/√n(s).
    #[arg(long)]
    anneal: bool,
    /// Constant learning rate.
    #[arg(long, conflicts_with = "poly")]
    learning_rate: Option<f64>,
    /// Learning rate 0.1·101/(100 + n(s,a)).
    #[arg(long)]
    poly: bool,
    /// Write one row per run and episode instead of cross-run averages.
    #[arg(long)]
    per_run: bool,
}

impl TabularArgs {
    fn overrides(&self) -> Result<Vec<(String, Value)>, config::CliError> {
        let mut o = Overrides::default();
        o.string("algorithm", commands::compose_algorithm(self.algo.as_deref(), self.alpha, self.kernel.as_deref())?);
        o.uint("episodes", self.episodes);
        o.float("gamma", self.gamma);
        o.string("exploration", self.epsilon.map(|e| format!("eps:{e}")));
        if self.anneal {
            o.string("exploration", Some("anneal".into()));
        }
        o.string("learning_rate", self.learning_rate.map(|t| format!("const:{t}")));
        if self.poly {
            o.string("learning_rate", Some("poly".into()));
        }
        o.flag("per_run", self.per_run);
        Ok(o.0)
    }
}

#[derive(Args, Debug)]
struct SimpleMdpArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    tabular: TabularArgs,
    /// Actions available in state B.
    #[arg(long)]
    b_actions: Option<usize>,
}

#[derive(Args, Debug)]
struct CliffArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    tabular: TabularArgs,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct DeepTrainArgs {
    #[command(flatten)]
    common: Common,
    /// dqn, ddqn, bdqn, te-bdqn, ke-bdqn or ada-te-bdqn.
    #[arg(long)]
    variant: Option<String>,
    /// Significance level of te-bdqn.
    #[arg(long)]
    alpha: Option<f64>,
    /// Kernel of ke-bdqn, e.g. gaussian:1.
    #[arg(long)]
    kernel: Option<String>,
    /// Environment steps per run.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Save the final network of every run.
    #[arg(long)]
    checkpoint: bool,
}

#[derive(Args, Debug)]
struct EstimateBiasArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    tabular: TabularArgs,
    /// cliff or maxbias.
    #[arg(long)]
    env: Option<String>,
    /// Deep checkpoint to evaluate on cliff walking instead of training tables.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Greedy episodes per head.
    #[arg(long)]
    bias_episodes: Option<usize>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = commands::dispatch(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
