use std::fmt::{self, Display, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use elpips_core::convnet::{ArchitectureId, WeightContainer};
use elpips_core::corpus::{corpus, CORPUS_NAMES};
use elpips_core::geometry::{
    barycenter, geodesic, spectrum_moments, BarycenterConfig, BarycenterInit, GeodesicConfig, GeodesicInit,
    HessianProbe, SpectrumSummary, DEFAULT_HVP_STEP,
};
use elpips_core::metric::{estimate, DiagonalQuadratic, ImageMetric, MetricConfig, Realization, SquaredL2, L2};
use elpips_core::optimize::{
    anchor_epsilon, attack_a1, attack_a2, noisy_anchor, AttackConfig, AttackResult, ANCHOR_SIGMA, REPORT_SAMPLES,
};
use elpips_core::transforms::{apply_transform, identity_params, transform_for, EnsembleConfig, TransformParams};
use elpips_core::Tensor;

use crate::config::{ConfigFile, Number, Settings};
use crate::error::{CliError, CliResult};
use crate::imageio::{load_image, save_image};
use crate::manifest::{manifest_path, RunManifest};
use crate::parallel::run_indexed;
use crate::weights::{save_weights, weights_or_generated};

#[derive(Parser, Debug)]
#[command(name = "elpips", version, about = "Ensembled perceptual image distance and the experiments around it")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// Settings file of key=value lines (a run manifest works too); flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Weight container; without it, weights are generated from --weights-seed.
    #[arg(long, global = true, value_name = "PATH")]
    pub weights: Option<String>,
    #[arg(long = "weights-seed", global = true, value_name = "S")]
    pub weights_seed: Option<String>,
    /// Architecture of generated weights: vgg16 or tiny.
    #[arg(long, global = true, value_name = "ARCH")]
    pub arch: Option<String>,
    /// l2, plain or elpips (spectrum also takes quadratic).
    #[arg(long, global = true, value_name = "METRIC")]
    pub metric: Option<String>,
    /// Realizations averaged by reported estimates.
    #[arg(long, global = true, value_name = "N")]
    pub samples: Option<String>,
    #[arg(long, global = true, value_name = "S")]
    pub seed: Option<String>,
    /// Comma list of spatial,color,scale,dropout; or all, or off.
    #[arg(long, global = true, value_name = "GROUPS")]
    pub ensemble: Option<String>,
    /// Cycle through K fixed realizations instead of a fresh stream.
    #[arg(long = "fixed-ensemble", global = true, value_name = "K")]
    pub fixed_ensemble: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<String>,
    /// Worker threads for sweeps over images or anchors.
    #[arg(long, global = true, value_name = "J")]
    pub jobs: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Distance between two images, mean ± standard error.
    Distance { a: PathBuf, b: PathBuf },
    /// Adversarial attack a1 (close in the metric, far in pixels) or a2.
    Attack(AttackArgs),
    /// Image minimizing the sum of squared distances to the inputs.
    Barycenter(BarycenterArgs),
    /// Discrete geodesic between two images, written as numbered frames.
    Geodesic(GeodesicArgs),
    /// Local Hessian spectrum of d(x₀, x₀ + v) at each anchor.
    Spectrum(SpectrumArgs),
    /// Write a seeded weight container.
    GenWeights,
    /// Apply one sampled input transformation and dump its parameters.
    Transform(TransformArgs),
    /// Time plain against ensembled single evaluations.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct AttackArgs {
    /// a1 or a2.
    pub kind: String,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    /// Attack every bundled corpus image with the plain and the chosen metric.
    #[arg(long)]
    pub corpus: bool,
    /// Noise level of the anchor image, e.g. 2/255.
    #[arg(long, value_name = "SIGMA")]
    pub sigma: Option<String>,
    /// Use this constraint value instead of the noisy-anchor one.
    #[arg(long, value_name = "EPS")]
    pub eps: Option<String>,
    #[arg(long)]
    pub budget: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// Realizations averaged per gradient step.
    #[arg(long = "step-samples", value_name = "K")]
    pub step_samples: Option<String>,
}

#[derive(Args, Debug)]
pub struct BarycenterArgs {
    #[arg(required = true, num_args = 2..)]
    pub images: Vec<PathBuf>,
    #[arg(long)]
    pub iterations: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// mean or noise.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long = "step-samples", value_name = "K")]
    pub step_samples: Option<String>,
}

#[derive(Args, Debug)]
pub struct GeodesicArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Free frames between the endpoints.
    #[arg(long)]
    pub frames: Option<String>,
    #[arg(long)]
    pub iterations: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    /// noise or crossfade.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long = "step-samples", value_name = "K")]
    pub step_samples: Option<String>,
    #[arg(long = "eval-every", value_name = "STEPS")]
    pub eval_every: Option<String>,
}

#[derive(Args, Debug)]
pub struct SpectrumArgs {
    /// Anchor images; the bundled corpus when omitted.
    pub anchors: Vec<PathBuf>,
    /// Power-iteration budget per extreme eigenvalue.
    #[arg(long)]
    pub iterations: Option<String>,
    /// Rademacher probes for the moments.
    #[arg(long)]
    pub probes: Option<String>,
    /// Finite-difference step of Hessian-vector products.
    #[arg(long)]
    pub step: Option<String>,
    /// Diagonal of the quadratic metric, cycled over pixels (e.g. 1,2,3,4).
    #[arg(long)]
    pub diag: Option<String>,
}

#[derive(Args, Debug)]
pub struct TransformArgs {
    pub image: PathBuf,
    /// Realization index within the seed's stream.
    #[arg(long)]
    pub index: Option<String>,
    /// Use the identity transformation.
    #[arg(long)]
    pub identity: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Square image extent.
    #[arg(long)]
    pub size: Option<String>,
    #[arg(long)]
    pub repeats: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricKind {
    L2,
    Plain,
    Elpips,
    Quadratic,
}

impl FromStr for MetricKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "l2" => Ok(MetricKind::L2),
            "plain" | "lpips" => Ok(MetricKind::Plain),
            "elpips" => Ok(MetricKind::Elpips),
            "quadratic" => Ok(MetricKind::Quadratic),
            _ => Err(format!("unknown metric `{s}` (l2, plain, elpips, quadratic)")),
        }
    }
}

impl Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::L2 => "l2",
            MetricKind::Plain => "plain",
            MetricKind::Elpips => "elpips",
            MetricKind::Quadratic => "quadratic",
        })
    }
}

/// Enabled transformation groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Groups {
    pub spatial: bool,
    pub color: bool,
    pub scale: bool,
    pub dropout: bool,
}

impl FromStr for Groups {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut g = Groups {
            spatial: false,
            color: false,
            scale: false,
            dropout: false,
        };
        match s.trim() {
            "off" | "none" => return Ok(g),
            "all" => return Ok(Groups { spatial: true, color: true, scale: true, dropout: true }),
            _ => {}
        }
        for part in s.split(',').map(str::trim) {
            match part {
                "spatial" => g.spatial = true,
                "color" => g.color = true,
                "scale" => g.scale = true,
                "dropout" => g.dropout = true,
                _ => return Err(format!("unknown ensemble group `{part}` (spatial, color, scale, dropout, all, off)")),
            }
        }
        Ok(g)
    }
}

impl Display for Groups {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.spatial, "spatial"),
            (self.color, "color"),
            (self.scale, "scale"),
            (self.dropout, "dropout"),
        ]
        .into_iter()
        .filter_map(|(on, n)| on.then_some(n))
        .collect();
        if names.is_empty() {
            f.write_str("off")
        } else {
            f.write_str(&names.join(","))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Init<T>(T);

impl FromStr for Init<BarycenterInit> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(Init(BarycenterInit::Mean)),
            "noise" => Ok(Init(BarycenterInit::Noise)),
            _ => Err("expected mean or noise".into()),
        }
    }
}

impl Display for Init<BarycenterInit> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 == BarycenterInit::Mean { "mean" } else { "noise" })
    }
}

impl FromStr for Init<GeodesicInit> {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "noise" => Ok(Init(GeodesicInit::Noise)),
            "crossfade" => Ok(Init(GeodesicInit::Crossfade)),
            _ => Err("expected noise or crossfade".into()),
        }
    }
}

impl Display for Init<GeodesicInit> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(if self.0 == GeodesicInit::Noise { "noise" } else { "crossfade" })
    }
}

/// Line-oriented `key=value` report.
#[derive(Clone, Debug, Default)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

/// Outcome of a command: its report plus whether a numerical flag was
/// raised (non-convergence), which maps to exit code 4.
pub struct Outcome {
    pub report: Report,
    pub flagged: Option<String>,
}

impl Outcome {
    fn ok(report: Report) -> Self {
        Outcome { report, flagged: None }
    }
}

struct Ctx {
    settings: Settings,
    common: Common,
    started: Instant,
}

impl Ctx {
    fn seed(&mut self) -> CliResult<u64> {
        let flag = self.common.seed.clone();
        self.settings.get("seed", flag.as_deref(), 0u64)
    }

    fn samples(&mut self, default: usize) -> CliResult<usize> {
        let flag = self.common.samples.clone();
        let n = self.settings.get("samples", flag.as_deref(), default)?;
        if n == 0 {
            return Err(CliError::Usage("samples must be at least 1".into()));
        }
        Ok(n)
    }

    fn jobs(&mut self) -> CliResult<usize> {
        let flag = self.common.jobs.clone();
        Ok(self.settings.get("jobs", flag.as_deref(), 1usize)?.max(1))
    }

    fn metric_kind(&mut self, default: MetricKind) -> CliResult<MetricKind> {
        let flag = self.common.metric.clone();
        self.settings.get("metric", flag.as_deref(), default)
    }

    fn out(&mut self, default: &str) -> CliResult<PathBuf> {
        let flag = self.common.out.clone();
        Ok(PathBuf::from(self.settings.get("out", flag.as_deref(), default.to_string())?))
    }

    fn out_opt(&mut self) -> CliResult<Option<PathBuf>> {
        let flag = self.common.out.clone();
        Ok(self.settings.get_opt::<String>("out", flag.as_deref())?.map(PathBuf::from))
    }

    fn opt<T: FromStr + Display>(&mut self, key: &str, flag: &Option<String>, default: T) -> CliResult<T>
    where
        T::Err: Display,
    {
        self.settings.get(key, flag.as_deref(), default)
    }

    fn ensemble(&mut self, samples: usize) -> CliResult<EnsembleConfig> {
        let flag = self.common.ensemble.clone();
        let g: Groups = self.settings.get(
            "ensemble",
            flag.as_deref(),
            Groups { spatial: true, color: true, scale: true, dropout: true },
        )?;
        let flag = self.common.fixed_ensemble.clone();
        let fixed: Option<usize> = self.settings.get_opt("fixed-ensemble", flag.as_deref())?;
        let cfg = EnsembleConfig {
            spatial: g.spatial,
            color: g.color,
            scale: g.scale,
            dropout: g.dropout,
            samples,
            fixed_ensemble: fixed,
            ..EnsembleConfig::full()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads or generates the network weights, recording the source.
    fn weights(&mut self, default_arch: ArchitectureId, manifest_inputs: &mut Vec<PathBuf>) -> CliResult<WeightContainer> {
        let flag = self.common.weights.clone();
        let path: Option<String> = self.settings.get_opt("weights", flag.as_deref())?;
        if let Some(p) = &path {
            manifest_inputs.push(PathBuf::from(p));
            return weights_or_generated(Some(Path::new(p)), default_arch, 0);
        }
        let flag = self.common.arch.clone();
        let arch: ArchitectureId = self.settings.get("arch", flag.as_deref(), default_arch)?;
        let flag = self.common.weights_seed.clone();
        let seed: u64 = self.settings.get("weights-seed", flag.as_deref(), 0)?;
        weights_or_generated(None, arch, seed)
    }

    fn manifest(&self, command: &str, inputs: &[PathBuf]) -> CliResult<RunManifest> {
        let mut m = RunManifest::new(command, self.settings.resolved().clone());
        for p in inputs {
            m.add_input(p)?;
        }
        Ok(m)
    }

    fn finish_manifest(&self, mut m: RunManifest, outputs: &[PathBuf], at: &Path) -> CliResult<()> {
        for p in outputs {
            m.add_output(p)?;
        }
        m.add_timing("total", self.started.elapsed());
        m.write(at)
    }
}

/// The metric a command measures with. `squared_l2` selects `‖x − y‖²`
/// for `l2`, as the spectrum needs.
fn build_metric<'w>(
    kind: MetricKind,
    weights: Option<&'w WeightContainer>,
    ensemble: EnsembleConfig,
    squared_l2: bool,
) -> CliResult<Box<dyn ImageMetric + 'w>> {
    let need = || CliError::Usage(format!("metric {kind} needs network weights"));
    Ok(match kind {
        MetricKind::L2 if squared_l2 => Box::new(SquaredL2),
        MetricKind::L2 => Box::new(L2),
        MetricKind::Plain => Box::new(MetricConfig::plain(weights.ok_or_else(need)?)),
        MetricKind::Elpips => Box::new(MetricConfig::new(weights.ok_or_else(need)?, ensemble)),
        MetricKind::Quadratic => return Err(CliError::Usage("the quadratic metric is only available to spectrum".into())),
    })
}

fn needs_weights(kind: MetricKind) -> bool {
    matches!(kind, MetricKind::Plain | MetricKind::Elpips)
}

fn write_report_files(ctx: &Ctx, command: &str, report: &Report, out: &Path, inputs: &[PathBuf]) -> CliResult<()> {
    std::fs::write(out, report.render()).map_err(|e| CliError::io(out, e))?;
    let m = ctx.manifest(command, inputs)?;
    ctx.finish_manifest(m, &[out.to_path_buf()], &manifest_path(out))
}

fn cmd_distance(ctx: &mut Ctx, a: &Path, b: &Path) -> CliResult<Outcome> {
    let seed = ctx.seed()?;
    let kind = ctx.metric_kind(MetricKind::Elpips)?;
    let n = ctx.samples(REPORT_SAMPLES)?;
    let ensemble = ctx.ensemble(n)?;
    let mut inputs = vec![a.to_path_buf(), b.to_path_buf()];
    let weights = if needs_weights(kind) { Some(ctx.weights(ArchitectureId::Vgg16, &mut inputs)?) } else { None };
    let out = ctx.out_opt()?;
    let (x, y) = (load_image(a)?, load_image(b)?);
    let metric = build_metric(kind, weights.as_ref(), ensemble, false)?;
    let d = estimate(metric.as_ref(), &x, &y, seed, n)?;
    if !d.mean.is_finite() {
        return Err(CliError::Numerical("distance is not finite".into()));
    }
    let mut r = Report::default();
    r.push("metric", kind);
    r.push("mean", d.mean);
    r.push("stderr", d.stderr);
    r.push("n", d.n);
    r.push("summary", format!("{:.6} ± {:.6}", d.mean, d.stderr));
    if let Some(out) = out {
        write_report_files(ctx, "distance", &r, &out, &inputs)?;
    }
    Ok(Outcome::ok(r))
}

struct AttackSetup {
    cfg: AttackConfig,
    sigma: f64,
    eps: Option<f64>,
    report_samples: usize,
}

fn attack_setup(ctx: &mut Ctx, args: &AttackArgs, default_step_samples: usize) -> CliResult<AttackSetup> {
    let seed = ctx.seed()?;
    let report_samples = ctx.samples(REPORT_SAMPLES)?;
    let sigma = ctx.opt("sigma", &args.sigma, Number(ANCHOR_SIGMA))?.0;
    let eps = ctx.settings.get_opt::<Number>("eps", args.eps.as_deref())?.map(|n| n.0);
    let defaults = AttackConfig::default();
    let cfg = AttackConfig {
        budget: ctx.opt("budget", &args.budget, defaults.budget)?,
        lr: ctx.opt("lr", &args.lr, Number(defaults.lr))?.0,
        samples_per_step: ctx.opt("step-samples", &args.step_samples, default_step_samples)?,
        seed,
        report_samples,
        ..defaults
    };
    cfg.validate()?;
    if !(sigma > 0.0) {
        return Err(CliError::Usage("sigma must be positive".into()));
    }
    Ok(AttackSetup { cfg, sigma, eps, report_samples })
}

/// One finished attack together with the constraint it ran under.
struct AttackRun {
    result: AttackResult,
    /// Metric distance of the noisy anchor from the source.
    anchor: f64,
    /// The constraint value: a metric bound for a1, a squared L2 radius for a2.
    eps: f64,
    noisy: Tensor,
}

fn run_attack(kind: &str, a: &Tensor, b: Option<&Tensor>, metric: &dyn ImageMetric, s: &AttackSetup) -> CliResult<AttackRun> {
    let (anchor, noisy) = anchor_epsilon(a, s.sigma, metric, s.cfg.seed, s.report_samples)?;
    let (result, eps) = match kind {
        "a1" => {
            let b = b.ok_or_else(|| CliError::Usage("attack a1 needs a target image".into()))?;
            let eps = s.eps.unwrap_or(anchor.mean);
            if !(eps > 0.0) {
                return Err(CliError::Input("anchor distance is zero; the source image may be degenerate".into()));
            }
            (attack_a1(a, b, metric, eps, &s.cfg)?, eps)
        }
        "a2" => {
            let eps = s.eps.unwrap_or_else(|| noisy.sq_dist(a));
            (attack_a2(a, metric, eps, &s.cfg)?, eps)
        }
        other => return Err(CliError::Usage(format!("unknown attack `{other}` (a1 or a2)"))),
    };
    Ok(AttackRun { result, anchor: anchor.mean, eps, noisy })
}

fn push_attack(r: &mut Report, prefix: &str, kind: &str, a: &Tensor, b: Option<&Tensor>, run: &AttackRun) {
    let res = &run.result;
    r.push(format!("{prefix}distance"), res.distance.mean);
    r.push(format!("{prefix}distance_stderr"), res.distance.stderr);
    r.push(format!("{prefix}l2_to_source"), res.l2_to_source);
    r.push(format!("{prefix}eps"), run.eps);
    r.push(format!("{prefix}anchor_distance"), run.anchor);
    if kind == "a1" {
        r.push(format!("{prefix}feasible"), res.feasible);
        r.push(format!("{prefix}escape_ratio"), res.escape_ratio(a, &run.noisy));
        if let Some(b) = b {
            r.push(format!("{prefix}l2_to_target"), res.image.dist(b));
            r.push(format!("{prefix}target_ratio"), res.target_residual_ratio(a, b));
        }
    } else {
        let ratio = if run.anchor > 0.0 { res.distance.mean / run.anchor } else { 0.0 };
        r.push(format!("{prefix}distance_over_anchor"), ratio);
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_attack(ctx: &mut Ctx, args: &AttackArgs) -> CliResult<Outcome> {
    let kind = args.kind.as_str();
    if kind != "a1" && kind != "a2" {
        return Err(CliError::Usage(format!("unknown attack `{kind}` (a1 or a2)")));
    }
    if args.corpus {
        return cmd_attack_corpus(ctx, args);
    }
    let source = args.source.as_ref().ok_or_else(|| CliError::Usage("missing source image".into()))?;
    if kind == "a1" && args.target.is_none() {
        return Err(CliError::Usage("attack a1 needs a target image".into()));
    }
    let setup = attack_setup(ctx, args, 1)?;
    let metric_kind = ctx.metric_kind(MetricKind::Elpips)?;
    let ensemble = ctx.ensemble(1)?;
    let mut inputs = vec![source.clone()];
    inputs.extend(args.target.iter().cloned());
    let weights = if needs_weights(metric_kind) { Some(ctx.weights(ArchitectureId::Tiny, &mut inputs)?) } else { None };
    let out = ctx.out("attack.png")?;
    let a = load_image(source)?;
    let b = args.target.as_deref().map(load_image).transpose()?;
    let metric = build_metric(metric_kind, weights.as_ref(), ensemble, false)?;
    let run = run_attack(kind, &a, b.as_ref(), metric.as_ref(), &setup)?;
    let res = &run.result;

    let mut r = Report::default();
    r.push("attack", kind);
    r.push("metric", metric_kind);
    push_attack(&mut r, "", kind, &a, b.as_ref(), &run);
    save_image(&out, &res.image)?;
    let report_path = with_suffix(&out, ".report");
    let trace_path = with_suffix(&out, ".trace");
    std::fs::write(&report_path, r.render()).map_err(|e| CliError::io(&report_path, e))?;
    let mut trace = String::from("iteration objective distance penalty_weight\n");
    for t in &res.trace {
        let _ = writeln!(trace, "{} {} {} {}", t.iteration, t.objective, t.distance, t.penalty_weight);
    }
    std::fs::write(&trace_path, trace).map_err(|e| CliError::io(&trace_path, e))?;
    let m = ctx.manifest("attack", &inputs)?;
    ctx.finish_manifest(m, &[out.clone(), report_path, trace_path], &manifest_path(&out))?;
    Ok(Outcome::ok(r))
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Mean distance over all corpus pairs.
fn corpus_mean_distance(images: &[Tensor], metric: &dyn ImageMetric, seed: u64, n: usize) -> CliResult<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            total += estimate(metric, &images[i], &images[j], seed, n)?.mean;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Attacks every corpus image under the plain metric and the chosen one.
fn cmd_attack_corpus(ctx: &mut Ctx, args: &AttackArgs) -> CliResult<Outcome> {
    let kind = args.kind.as_str();
    let setup = attack_setup(ctx, args, 16)?;
    let jobs = ctx.jobs()?;
    let metric_kind = ctx.metric_kind(MetricKind::Elpips)?;
    let ensemble = ctx.ensemble(1)?;
    let mut inputs = Vec::new();
    let weights = ctx.weights(ArchitectureId::Tiny, &mut inputs)?;
    let out = ctx.out_opt()?;
    let images = corpus();
    let plain = MetricConfig::plain(&weights);
    let chosen = build_metric(metric_kind, Some(&weights), ensemble, false)?;
    let metrics: [(&str, &dyn ImageMetric); 2] = [("plain", &plain), (kind_label(metric_kind), chosen.as_ref())];
    let plain_setup = AttackSetup {
        cfg: AttackConfig { samples_per_step: 1, ..setup.cfg.clone() },
        ..setup
    };

    let n_img = images.len();
    let results = run_indexed(jobs, 2 * n_img, |job| {
        let (m, i) = (job / n_img, job % n_img);
        let b = &images[(i + 1) % n_img];
        let s = if m == 0 { &plain_setup } else { &setup };
        run_attack(kind, &images[i], Some(b), metrics[m].1, s)
    });
    let normalizers = if kind == "a2" {
        let n = setup.report_samples;
        run_indexed(jobs, 2, |m| corpus_mean_distance(&images, metrics[m].1, setup.cfg.seed, n))
    } else {
        vec![Ok(1.0), Ok(1.0)]
    };

    let mut r = Report::default();
    r.push("attack", kind);
    let mut medians = [0.0; 2];
    let mut outputs = Vec::new();
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut results = results.into_iter();
    for (m, (label, _)) in metrics.iter().enumerate() {
        let norm = normalizers[m].as_ref().map_err(|e| CliError::Input(e.to_string()))?;
        let mut ratios = Vec::new();
        for (i, name) in CORPUS_NAMES.iter().enumerate() {
            let run = results.next().expect("one result per job")?;
            let res = &run.result;
            let prefix = format!("{label}.{name}.");
            push_attack(&mut r, &prefix, kind, &images[i], Some(&images[(i + 1) % n_img]), &run);
            let ratio = if kind == "a1" { res.escape_ratio(&images[i], &run.noisy) } else { res.distance.mean / norm };
            if kind == "a2" {
                r.push(format!("{prefix}distance_over_corpus_mean"), ratio);
            }
            ratios.push(ratio);
            if let Some(dir) = &out {
                let p = dir.join(format!("{name}_{label}.png"));
                save_image(&p, &res.image)?;
                outputs.push(p);
            }
        }
        medians[m] = median(ratios);
        r.push(format!("{label}.median_ratio"), medians[m]);
    }
    r.push("separation", medians[0] / medians[1]);
    if let Some(dir) = &out {
        let report_path = dir.join("report.txt");
        std::fs::write(&report_path, r.render()).map_err(|e| CliError::io(&report_path, e))?;
        outputs.push(report_path);
        let m = ctx.manifest("attack", &inputs)?;
        ctx.finish_manifest(m, &outputs, &dir.join("manifest.txt"))?;
    }
    Ok(Outcome::ok(r))
}

fn kind_label(k: MetricKind) -> &'static str {
    match k {
        MetricKind::L2 => "l2",
        MetricKind::Plain => "plain2",
        MetricKind::Elpips => "elpips",
        MetricKind::Quadratic => "quadratic",
    }
}

fn load_all(paths: &[PathBuf]) -> CliResult<Vec<Tensor>> {
    let images: Vec<Tensor> = paths.iter().map(|p| load_image(p)).collect::<CliResult<_>>()?;
    if let Some(first) = images.first() {
        for (p, t) in paths.iter().zip(&images) {
            if t.shape() != first.shape() {
                return Err(CliError::Input(format!(
                    "{}: extent {:?} differs from {:?}",
                    p.display(),
                    t.shape(),
                    first.shape()
                )));
            }
        }
    }
    Ok(images)
}

fn cmd_barycenter(ctx: &mut Ctx, args: &BarycenterArgs) -> CliResult<Outcome> {
    let defaults = BarycenterConfig::default();
    let cfg = BarycenterConfig {
        iterations: ctx.opt("iterations", &args.iterations, defaults.iterations)?,
        lr: ctx.opt("lr", &args.lr, Number(defaults.lr))?.0,
        samples_per_step: ctx.opt("step-samples", &args.step_samples, defaults.samples_per_step)?,
        seed: ctx.seed()?,
        init: ctx.opt("init", &args.init, Init(defaults.init))?.0,
    };
    let kind = ctx.metric_kind(MetricKind::Elpips)?;
    let ensemble = ctx.ensemble(1)?;
    let mut inputs = args.images.clone();
    let weights = if needs_weights(kind) { Some(ctx.weights(ArchitectureId::Tiny, &mut inputs)?) } else { None };
    let out = ctx.out("barycenter.png")?;
    let images = load_all(&args.images)?;
    let metric = build_metric(kind, weights.as_ref(), ensemble, false)?;
    let res = barycenter(&images, metric.as_ref(), &cfg)?;
    save_image(&out, &res.image)?;
    let trace_path = with_suffix(&out, ".trace");
    let mut trace = String::from("iteration objective\n");
    for (i, v) in res.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i} {v}");
    }
    std::fs::write(&trace_path, trace).map_err(|e| CliError::io(&trace_path, e))?;
    let mut r = Report::default();
    r.push("metric", kind);
    r.push("iterations", cfg.iterations);
    r.push("final_objective", res.trace.last().copied().unwrap_or(0.0));
    r.push("output", out.display());
    let m = ctx.manifest("barycenter", &inputs)?;
    ctx.finish_manifest(m, &[out.clone(), trace_path], &manifest_path(&out))?;
    Ok(Outcome::ok(r))
}

fn cmd_geodesic(ctx: &mut Ctx, args: &GeodesicArgs) -> CliResult<Outcome> {
    let defaults = GeodesicConfig::default();
    let cfg = GeodesicConfig {
        frames: ctx.opt("frames", &args.frames, defaults.frames)?,
        iterations: ctx.opt("iterations", &args.iterations, defaults.iterations)?,
        lr: ctx.opt("lr", &args.lr, Number(defaults.lr))?.0,
        samples_per_step: ctx.opt("step-samples", &args.step_samples, defaults.samples_per_step)?,
        seed: ctx.seed()?,
        init: ctx.opt("init", &args.init, Init(defaults.init))?.0,
        eval_every: ctx.opt("eval-every", &args.eval_every, defaults.eval_every)?,
        eval_samples: defaults.eval_samples,
    };
    if cfg.frames == 0 {
        return Err(CliError::Usage("frames must be at least 1".into()));
    }
    let kind = ctx.metric_kind(MetricKind::Elpips)?;
    let ensemble = ctx.ensemble(1)?;
    let mut inputs = vec![args.a.clone(), args.b.clone()];
    let weights = if needs_weights(kind) { Some(ctx.weights(ArchitectureId::Tiny, &mut inputs)?) } else { None };
    let out = ctx.out("geodesic")?;
    let images = load_all(&[args.a.clone(), args.b.clone()])?;
    let metric = build_metric(kind, weights.as_ref(), ensemble, false)?;
    let res = geodesic(&images[0], &images[1], metric.as_ref(), &cfg)?;

    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let mut outputs = Vec::new();
    for (i, f) in res.frames.iter().enumerate() {
        let p = out.join(format!("frame_{i:03}.png"));
        save_image(&p, f)?;
        outputs.push(p);
    }
    let trace_path = out.join("trace.txt");
    let mut trace = String::from("iteration energy\n");
    for (i, v) in res.trace.iter().enumerate() {
        let _ = writeln!(trace, "{i} {v}");
    }
    trace.push_str("# fixed-seed evaluations: iteration energy\n");
    for (i, v) in &res.evaluations {
        let _ = writeln!(trace, "# {i} {v}");
    }
    std::fs::write(&trace_path, trace).map_err(|e| CliError::io(&trace_path, e))?;
    outputs.push(trace_path);

    let mut r = Report::default();
    r.push("metric", kind);
    r.push("frames", res.frames.len());
    r.push("final_energy", res.trace.last().copied().unwrap_or(0.0));
    if let Some((_, e)) = res.evaluations.last() {
        r.push("evaluated_energy", e);
    }
    r.push("output", out.display());
    let m = ctx.manifest("geodesic", &inputs)?;
    ctx.finish_manifest(m, &outputs, &out.join("manifest.txt"))?;
    Ok(Outcome::ok(r))
}

fn parse_diag(s: &str) -> CliResult<Vec<f32>> {
    let v: Result<Vec<f32>, _> = s.split(',').map(|p| p.trim().parse::<f32>()).collect();
    match v {
        Ok(v) if !v.is_empty() && v.iter().all(|x| x.is_finite() && *x >= 0.0) => Ok(v),
        _ => Err(CliError::Usage(format!("invalid diagonal `{s}`, expected non-negative numbers like 1,2,3,4"))),
    }
}

fn push_summary(r: &mut Report, prefix: &str, s: &SpectrumSummary) {
    r.push(format!("{prefix}lambda_max"), s.lambda_max);
    r.push(format!("{prefix}lambda_min"), s.lambda_min);
    r.push(format!("{prefix}mean"), s.mean);
    r.push(format!("{prefix}variance"), s.variance);
    r.push(format!("{prefix}skewness"), s.skewness);
    r.push(format!("{prefix}kurtosis"), s.kurtosis);
    r.push(format!("{prefix}normalized_lambda_max"), s.normalized_lambda_max);
    r.push(format!("{prefix}normalized_lambda_min"), s.normalized_lambda_min);
    r.push(format!("{prefix}normalized_variance"), s.normalized_variance);
    r.push(format!("{prefix}condition"), s.condition);
    r.push(format!("{prefix}converged"), s.converged);
    r.push(format!("{prefix}variance_flagged"), s.variance_flagged);
}

fn cmd_spectrum(ctx: &mut Ctx, args: &SpectrumArgs) -> CliResult<Outcome> {
    let seed = ctx.seed()?;
    let kind = ctx.metric_kind(MetricKind::Elpips)?;
    let samples = ctx.samples(16)?;
    let ensemble = ctx.ensemble(samples)?;
    let iterations: usize = ctx.opt("iterations", &args.iterations, 100)?;
    let probes: usize = ctx.opt("probes", &args.probes, 16)?;
    let step = ctx.opt("step", &args.step, Number(DEFAULT_HVP_STEP))?.0;
    let diag = match (kind, ctx.settings.get_opt::<String>("diag", args.diag.as_deref())?) {
        (MetricKind::Quadratic, Some(d)) => Some(parse_diag(&d)?),
        (MetricKind::Quadratic, None) => return Err(CliError::Usage("metric quadratic needs --diag".into())),
        _ => None,
    };
    let jobs = ctx.jobs()?;
    let mut inputs = args.anchors.clone();
    let weights = if needs_weights(kind) { Some(ctx.weights(ArchitectureId::Tiny, &mut inputs)?) } else { None };
    let out = ctx.out_opt()?;
    let anchors = if args.anchors.is_empty() { corpus() } else { load_all(&args.anchors)? };
    let summaries = run_indexed(jobs, anchors.len(), |i| -> CliResult<SpectrumSummary> {
        let anchor = &anchors[i];
        let metric: Box<dyn ImageMetric + '_> = match &diag {
            Some(d) => Box::new(DiagonalQuadratic::new(Tensor::from_fn(anchor.shape(), |j| d[j % d.len()]))?),
            None => build_metric(kind, weights.as_ref(), ensemble, true)?,
        };
        let probe = HessianProbe {
            anchor,
            metric: metric.as_ref(),
            step,
            seed: seed.wrapping_add(i as u64),
            samples,
        };
        Ok(spectrum_moments(&probe, iterations, probes)?)
    });
    let mut r = Report::default();
    r.push("metric", kind);
    let mut all = Vec::new();
    for (i, s) in summaries.into_iter().enumerate() {
        let s = s?;
        push_summary(&mut r, &format!("anchor.{i}."), &s);
        all.push(s);
    }
    let avg = |f: fn(&SpectrumSummary) -> f64| all.iter().map(f).sum::<f64>() / all.len() as f64;
    r.push("aggregate.anchors", all.len());
    r.push("aggregate.normalized_lambda_max", avg(|s| s.normalized_lambda_max));
    r.push("aggregate.normalized_lambda_min", avg(|s| s.normalized_lambda_min));
    r.push("aggregate.normalized_variance", avg(|s| s.normalized_variance));
    r.push("aggregate.skewness", avg(|s| s.skewness));
    r.push("aggregate.kurtosis", avg(|s| s.kurtosis));
    r.push("aggregate.condition", avg(|s| s.condition));
    let unconverged = all.iter().filter(|s| !s.converged).count();
    r.push("aggregate.unconverged", unconverged);
    if let Some(out) = out {
        write_report_files(ctx, "spectrum", &r, &out, &inputs)?;
    }
    let flagged = (unconverged > 0).then(|| format!("power iteration did not converge for {unconverged} anchor(s)"));
    Ok(Outcome { report: r, flagged })
}

fn cmd_gen_weights(ctx: &mut Ctx) -> CliResult<Outcome> {
    let flag = ctx.common.arch.clone();
    let arch: ArchitectureId = ctx.settings.get("arch", flag.as_deref(), ArchitectureId::Tiny)?;
    let seed = ctx.seed()?;
    let out = ctx.out("weights.elpw")?;
    let w = elpips_core::convnet::generate_weights(arch, seed);
    save_weights(&w, &out)?;
    let digest = crate::manifest::sha256_file(&out)?;
    let mut r = Report::default();
    r.push("architecture", arch);
    r.push("seed", seed);
    r.push("output", out.display());
    r.push("sha256", digest);
    let m = ctx.manifest("gen-weights", &[])?;
    ctx.finish_manifest(m, std::slice::from_ref(&out), &manifest_path(&out))?;
    Ok(Outcome::ok(r))
}

fn push_params(r: &mut Report, p: &TransformParams) {
    r.push("dx", p.dx);
    r.push("dy", p.dy);
    r.push("flip_x", p.flip_x);
    r.push("flip_y", p.flip_y);
    r.push("swap_xy", p.swap_xy);
    r.push("col_perm", format!("{},{},{}", p.col_perm[0], p.col_perm[1], p.col_perm[2]));
    r.push("brightness", format!("{},{},{}", p.brightness[0], p.brightness[1], p.brightness[2]));
    r.push("scale", p.scale);
    r.push("scale_dx", p.scale_dx);
    r.push("scale_dy", p.scale_dy);
}

fn cmd_transform(ctx: &mut Ctx, args: &TransformArgs) -> CliResult<Outcome> {
    let seed = ctx.seed()?;
    let index: u64 = ctx.opt("index", &args.index, 0)?;
    let ensemble = ctx.ensemble(1)?;
    let out = ctx.out("transformed.png")?;
    let x = load_image(&args.image)?;
    let (h, w, _) = x.hwc()?;
    let params = if args.identity {
        identity_params()
    } else {
        transform_for(seed, index, 0, &ensemble.fitted_to(h, w))
    };
    let y = apply_transform(&x, &params)?;
    save_image(&out, &y)?;
    let mut r = Report::default();
    r.push("identity", args.identity);
    push_params(&mut r, &params);
    let (oh, ow) = params.output_extent(h, w);
    r.push("output_height", oh);
    r.push("output_width", ow);
    let m = ctx.manifest("transform", std::slice::from_ref(&args.image))?;
    ctx.finish_manifest(m, std::slice::from_ref(&out), &manifest_path(&out))?;
    Ok(Outcome::ok(r))
}

/// Mean wall time of single evaluations over realizations `0..repeats`.
pub fn time_evaluations(metric: &dyn ImageMetric, x: &Tensor, y: &Tensor, repeats: usize) -> CliResult<Duration> {
    let mut total = Duration::ZERO;
    for i in 0..repeats {
        let t = Instant::now();
        let d = metric.sample(x, y, Realization::new(0, i as u64))?;
        total += t.elapsed();
        if !d.is_finite() {
            return Err(CliError::Numerical("benchmark distance is not finite".into()));
        }
    }
    Ok(total / repeats.max(1) as u32)
}

fn cmd_bench(ctx: &mut Ctx, args: &BenchArgs) -> CliResult<Outcome> {
    let size: usize = ctx.opt("size", &args.size, 256)?;
    let repeats: usize = ctx.opt("repeats", &args.repeats, 3)?;
    if size < 8 || repeats == 0 {
        return Err(CliError::Usage("size must be at least 8 and repeats at least 1".into()));
    }
    let ensemble = ctx.ensemble(1)?;
    let mut inputs = Vec::new();
    let weights = ctx.weights(ArchitectureId::Vgg16, &mut inputs)?;
    let x = elpips_core::corpus::corpus_image_sized(0, size);
    let y = noisy_anchor(&x, 0.05, 1);
    let plain = MetricConfig::plain(&weights);
    let ens = MetricConfig::new(&weights, ensemble);
    // One untimed evaluation of each to settle allocations.
    time_evaluations(&plain, &x, &y, 1)?;
    let tp = time_evaluations(&plain, &x, &y, repeats)?;
    let te = time_evaluations(&ens, &x, &y, repeats)?;
    let mut r = Report::default();
    r.push("architecture", weights.architecture().id());
    r.push("size", size);
    r.push("repeats", repeats);
    r.push("plain_ms", format!("{:.3}", tp.as_secs_f64() * 1e3));
    r.push("ensembled_ms", format!("{:.3}", te.as_secs_f64() * 1e3));
    r.push("ratio", format!("{:.4}", te.as_secs_f64() / tp.as_secs_f64()));
    Ok(Outcome::ok(r))
}

/// Parses `args`, runs the command, prints its report and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(outcome) => {
            print!("{}", outcome.report.render());
            match outcome.flagged {
                Some(msg) => {
                    eprintln!("elpips: {msg}");
                    4
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("elpips: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> CliResult<Outcome> {
    let config = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut ctx = Ctx {
        settings: Settings::new(config),
        common: cli.common.clone(),
        started: Instant::now(),
    };
    match &cli.command {
        Command::Distance { a, b } => cmd_distance(&mut ctx, a, b),
        Command::Attack(args) => cmd_attack(&mut ctx, args),
        Command::Barycenter(args) => cmd_barycenter(&mut ctx, args),
        Command::Geodesic(args) => cmd_geodesic(&mut ctx, args),
        Command::Spectrum(args) => cmd_spectrum(&mut ctx, args),
        Command::GenWeights => cmd_gen_weights(&mut ctx),
        Command::Transform(args) => cmd_transform(&mut ctx, args),
        Command::Bench(args) => cmd_bench(&mut ctx, args),
    }
}
