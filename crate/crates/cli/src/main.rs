//! `prunelab` command-line interface.
//!
//! Exit status: 0 on success, 1 on usage errors (bad flags, unreadable or
//! invalid config), 2 when a run fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prunelab::harness::{
    emit_csv, emit_heatmap, inspect_checkpoint, load_checkpoint, run_sweep, save_checkpoint,
    Metadata, Metric, SweepConfig,
};
use prunelab::landscape::{cka, lmc, retrain_twins, SampleSet};
use prunelab::optimize::{train, TrainSpec};
use prunelab::prune::{apply_mask, density, prune, PruneSpec, PruneStrategy};
use prunelab::regimes::{
    pipeline_rho_cka, select_model_lmc_cka, select_model_lmc_error, tune_sam_rho, tune_temperature,
    Candidate, CandidateProbe, CandidateSet, LmcProbe, PipelineCandidateProbe, PipelineLmcProbe,
    Selection, Thresholds,
};
use prunelab::{ParamSet, Split};
use serde::Deserialize;

#[derive(Parser, Debug)]
#[command(
    name = "prunelab",
    version,
    about = "Train, prune and diagnose small MLPs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense model and save it as a checkpoint.
    Train(TrainArgs),
    /// Magnitude-prune a checkpoint.
    Prune(PruneArgs),
    /// Retrain two copies of a pruned checkpoint with different SGD noise.
    Retrain(RetrainArgs),
    /// Linear mode connectivity between two checkpoints.
    Lmc(PairArgs),
    /// CKA similarity between two checkpoints.
    Cka(PairArgs),
    /// Run a (temperature x load) sweep.
    Sweep(SweepArgs),
    /// One step of LMC-driven temperature tuning.
    TuneTemp(TuneTempArgs),
    /// Pick a dense model to prune among candidates.
    SelectModel(SelectArgs),
    /// Choose the SAM neighborhood size by pruned-model CKA.
    TuneRho(TuneRhoArgs),
    /// Print a checkpoint's header and mask densities.
    Inspect(InspectArgs),
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config; fields mirror the sweep config. Defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training epochs; defaults to the config's `epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// SAM neighborhood size; 0 means plain SGD.
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Target density; defaults to the config's `target_density`.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum StrategyArg {
    Uniform,
    Global,
}

impl From<StrategyArg> for PruneStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Uniform => PruneStrategy::Uniform,
            StrategyArg::Global => PruneStrategy::Global,
        }
    }
}

#[derive(Args, Debug)]
struct RetrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Pruned checkpoint carrying a mask.
    #[arg(long)]
    input: PathBuf,
    /// Retraining epochs; defaults to the config's `retrain_epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_a: PathBuf,
    #[arg(long)]
    out_b: PathBuf,
}

#[derive(Args, Debug)]
struct PairArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Interpolation grid points, endpoints included.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for one SVG heatmap per metric.
    #[arg(long)]
    svg_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneTempArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Starting temperature; defaults to the coldest configured value.
    #[arg(long)]
    temperature: Option<f64>,
    /// Target density; defaults to the config's `target_density`.
    #[arg(long)]
    density: Option<f64>,
    /// Probe retraining epochs.
    #[arg(long)]
    alpha: Option<usize>,
    /// Skip training and use this LMC value.
    #[arg(long, allow_hyphen_values = true)]
    mock_lmc: Option<f64>,
    /// Lower the temperature one step when the landscape is well connected.
    #[arg(long)]
    decrease: bool,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// TOML fixture with recorded measurements instead of training.
    #[arg(long)]
    fixture: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SelectMethod::Error)]
    method: SelectMethod,
    #[arg(long)]
    alpha: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SelectMethod {
    /// Fall back to lowest probe test error.
    Error,
    /// Fall back to highest probe CKA.
    Cka,
}

#[derive(Args, Debug)]
struct TuneRhoArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated ρ grid.
    #[arg(long, value_delimiter = ',', required = true)]
    rho: Vec<f64>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(prunelab::Error),
}

impl From<prunelab::Error> for CliError {
    fn from(e: prunelab::Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::Train(a) => cmd_train(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Retrain(a) => cmd_retrain(a),
        Command::Lmc(a) => cmd_lmc(a),
        Command::Cka(a) => cmd_cka(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::TuneTemp(a) => cmd_tune_temp(a),
        Command::SelectModel(a) => cmd_select(a),
        Command::TuneRho(a) => cmd_tune_rho(a),
        Command::Inspect(a) => cmd_inspect(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<SweepConfig> {
    let Some(path) = path else {
        return Ok(SweepConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    SweepConfig::from_toml_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
}

fn existing(path: &Path) -> CliResult<&Path> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("no such file: {}", path.display())))
    }
}

fn print_resolved(config: &SweepConfig, seeds: &[u64]) {
    println!("# resolved config");
    print!("{}", config.to_toml_string());
    println!("# seeds = {seeds:?}");
}

fn print_spec(label: &str, spec: &TrainSpec) {
    println!(
        "{label}: epochs={} batch_size={} rho={} lr0={} seed={}",
        spec.epochs,
        spec.batch_size,
        spec.rho(),
        spec.sgd.lr0,
        spec.seed
    );
}

fn usage_check(ok: bool, msg: impl Into<String>) -> CliResult {
    if ok {
        Ok(())
    } else {
        Err(CliError::Usage(msg.into()))
    }
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let mut config = load_config(a.cfg.config.as_deref())?;
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(r) = a.rho {
        config.rho = r;
    }
    let spec = config.base_spec(a.cfg.seed);
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    print_resolved(&config, &[a.cfg.seed]);
    let data: Split<f32> = config.load_data()?;
    let model = config.model_config_for(data.train.dim(), data.train.num_classes(), 0.0)?;
    let init = ParamSet::<f32>::init(&model, a.cfg.seed)?;
    let (params, report) = train(&init, None, &spec, &data)?;
    let meta = Metadata::new(model)
        .with_train(spec)
        .with_note(format!("dataset={}", data.train.name()));
    save_checkpoint(&a.out, &params, None, &meta)?;
    println!(
        "train_error={} test_error={} params={} out={}",
        report.final_train_error,
        report.final_test_error,
        params.param_count(),
        a.out.display()
    );
    Ok(())
}

fn cmd_prune(a: PruneArgs) -> CliResult {
    let config = load_config(a.cfg.config.as_deref())?;
    let spec = PruneSpec {
        strategy: a.strategy.map_or(config.prune_strategy, Into::into),
        target_density: a.density.unwrap_or(config.target_density),
        exclude_output_layer: config.exclude_output_layer,
    };
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    print_resolved(&config, &[a.cfg.seed]);
    let ckpt = load_checkpoint::<f32>(existing(&a.input)?)?;
    let (mask, warnings) = prune(&ckpt.params, &spec)?;
    for w in &warnings {
        eprintln!(
            "warning: layer {} ({} weights) has no kept weights",
            w.layer, w.size
        );
    }
    let pruned = apply_mask(&ckpt.params, &mask)?;
    let mut meta = ckpt.metadata.clone().with_prune(spec.clone());
    meta.note = Some(format!("pruned from {}", a.input.display()));
    save_checkpoint(&a.out, &pruned, Some(&mask), &meta)?;
    println!(
        "strategy={} target_density={} prunable_density={} overall_density={} out={}",
        spec.strategy,
        spec.target_density,
        mask.prunable_density(),
        density(&mask, &pruned)?,
        a.out.display()
    );
    Ok(())
}

fn cmd_retrain(a: RetrainArgs) -> CliResult {
    let mut config = load_config(a.cfg.config.as_deref())?;
    if let Some(e) = a.epochs {
        usage_check(e > 0, "--epochs must be positive")?;
        config.retrain_epochs = e;
    }
    print_resolved(&config, &[a.cfg.seed]);
    let ckpt = load_checkpoint::<f32>(existing(&a.input)?)?;
    let mask = ckpt.mask.as_ref().ok_or_else(|| {
        CliError::Usage(format!(
            "{} carries no mask; prune it first",
            a.input.display()
        ))
    })?;
    let data: Split<f32> = config.load_data()?;
    let twins = config.twin_spec(a.cfg.seed);
    println!("twin_seeds={:?}", twins.seeds);
    let (ta, tb) = retrain_twins(&ckpt.params, mask, &twins, &data)?;
    for (i, twin, path, label) in [(0, &ta, &a.out_a, "a"), (1, &tb, &a.out_b, "b")] {
        let mut meta = ckpt.metadata.clone().with_train(twins.twin_spec(i));
        meta.note = Some(format!("twin {label} of {}", a.input.display()));
        save_checkpoint(path, twin, Some(mask), &meta)?;
        println!(
            "twin_{label}: test_error={} out={}",
            prunelab::classification_error(twin, data.test.features(), data.test.labels())?,
            path.display()
        );
    }
    Ok(())
}

type Pair = (SweepConfig, ParamSet<f32>, ParamSet<f32>, Split<f32>);

fn load_pair(a: &PairArgs) -> CliResult<Pair> {
    let config = load_config(a.cfg.config.as_deref())?;
    print_resolved(&config, &[a.cfg.seed]);
    let pa = load_checkpoint::<f32>(existing(&a.a)?)?.params;
    let pb = load_checkpoint::<f32>(existing(&a.b)?)?.params;
    let data = config.load_data()?;
    Ok((config, pa, pb, data))
}

fn cmd_lmc(a: PairArgs) -> CliResult {
    let (config, pa, pb, data) = load_pair(&a)?;
    let grid = a.grid.unwrap_or(config.grid_points);
    let r = lmc(&pa, &pb, &data.train, grid)?;
    for (t, e) in &r.grid_errors {
        println!("t={t} train_error={e}");
    }
    println!("lmc={} t_star={}", r.value, r.t_star);
    Ok(())
}

fn cmd_cka(a: PairArgs) -> CliResult {
    let (config, pa, pb, data) = load_pair(&a)?;
    let samples = SampleSet::from_train(&data.train, config.cka_sample_seed);
    let r = cka(&pa, &pb, &samples)?;
    println!(
        "cka={} samples={} sample_set={}",
        r.value, r.sample_count, r.sample_set
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let mut config = load_config(Some(&a.config))?;
    if let Some(w) = a.workers {
        config.workers = w;
    }
    print_resolved(&config, &config.seeds);
    let diagram = run_sweep::<f32>(&config)?;
    println!("temperature,load,test_error,normalized_error,lmc,cka,regime,seeds");
    for t in 0..diagram.rows() {
        for l in 0..diagram.cols() {
            let cell = diagram.cell(t, l);
            let fmt = |v: Option<f64>| v.map_or("diverged".to_string(), |v| format!("{v:.4}"));
            println!(
                "{},{},{},{},{},{},{},{}",
                cell.temperature,
                cell.load,
                fmt(cell.test_error()),
                fmt(diagram.normalized_at(t, l)),
                fmt(cell.mean.map(|m| m.lmc)),
                fmt(cell.mean.map(|m| m.cka)),
                cell.regime.map_or("-".to_string(), |r| r.to_string()),
                cell.seed_count()
            );
        }
    }
    if let Some(path) = &a.csv {
        emit_csv(&diagram, path)?;
        println!("csv={}", path.display());
    }
    if let Some(dir) = &a.svg_dir {
        std::fs::create_dir_all(dir).map_err(prunelab::Error::from)?;
        for metric in Metric::ALL {
            let path = dir.join(format!("{}.svg", metric.name()));
            emit_heatmap(&diagram, metric, &path)?;
            println!("svg={}", path.display());
        }
    }
    Ok(())
}

struct FixedLmc(f64);

impl LmcProbe for FixedLmc {
    fn pruned_lmc(&mut self, _spec: &TrainSpec) -> prunelab::Result<f64> {
        Ok(self.0)
    }
}

fn thresholds_with_alpha(config: &SweepConfig, alpha: Option<usize>) -> CliResult<Thresholds> {
    let mut th = config.thresholds();
    if let Some(a) = alpha {
        th.alpha = a;
    }
    th.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(th)
}

fn cmd_tune_temp(a: TuneTempArgs) -> CliResult {
    let config = load_config(a.cfg.config.as_deref())?;
    let th = thresholds_with_alpha(&config, a.alpha)?;
    let temperature = a.temperature.unwrap_or(config.temperature_values[0]);
    let t0 = config
        .dense_spec(temperature, a.cfg.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let target = PruneSpec {
        target_density: a.density.unwrap_or(config.target_density),
        ..config.prune_spec(config.target_density)
    };
    target
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    print_resolved(&config, &[a.cfg.seed]);
    println!(
        "knob={} epsilon={} alpha={} target_density={}",
        config.temperature_knob, th.epsilon, th.alpha, target.target_density
    );
    let tuning = match a.mock_lmc {
        Some(v) => {
            println!("mock_lmc={v}");
            tune_temperature(
                &mut FixedLmc(v),
                &t0,
                config.temperature_knob,
                &th,
                a.decrease,
            )?
        }
        None => {
            let data: Split<f32> = config.load_data()?;
            let model = config.model_config_for(data.train.dim(), data.train.num_classes(), 0.0)?;
            let init = ParamSet::<f32>::init(&model, a.cfg.seed)?;
            let mut probe = PipelineLmcProbe {
                dense_init: &init,
                target: &target,
                data: &data,
                twin_seeds: config.twin_seeds(a.cfg.seed),
                alpha: th.alpha,
                schedule: config.retrain_schedule,
                grid_points: config.grid_points,
                sample_seed: config.cka_sample_seed,
                last: None,
            };
            tune_temperature(&mut probe, &t0, config.temperature_knob, &th, a.decrease)?
        }
    };
    println!("lmc={}", tuning.lmc);
    println!("regime={}", if tuning.regime_i { "I" } else { "II" });
    print_spec("initial", &tuning.initial);
    print_spec("tuned", &tuning.tuned);
    Ok(())
}

/// Recorded measurements standing in for real candidate runs.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SelectFixture {
    dense_test_errors: Vec<f64>,
    /// Pruned LMC per candidate; only the conventional pick's entry is read
    /// unless probing happens.
    pruned_lmcs: Vec<f64>,
    #[serde(default)]
    probe_test_errors: Vec<f64>,
    #[serde(default)]
    probe_ckas: Vec<f64>,
    epsilon: Option<f64>,
}

impl CandidateProbe for SelectFixture {
    fn pruned_lmc(&self, i: usize) -> prunelab::Result<f64> {
        fixture_value(&self.pruned_lmcs, i, "pruned_lmcs")
    }

    fn probe_test_error(&self, i: usize) -> prunelab::Result<f64> {
        fixture_value(&self.probe_test_errors, i, "probe_test_errors")
    }

    fn probe_cka(&self, i: usize) -> prunelab::Result<f64> {
        fixture_value(&self.probe_ckas, i, "probe_ckas")
    }
}

fn fixture_value(values: &[f64], i: usize, name: &str) -> prunelab::Result<f64> {
    values
        .get(i)
        .copied()
        .ok_or_else(|| prunelab::Error::InvalidArgument(format!("fixture has no {name}[{i}]")))
}

fn print_selection(sel: &Selection) {
    println!(
        "conventional={} conventional_lmc={}",
        sel.conventional, sel.conventional_lmc
    );
    if !sel.scores.is_empty() {
        println!("scores={:?}", sel.scores);
    }
    println!("selected={} probes={}", sel.index, sel.probes);
}

fn cmd_select(a: SelectArgs) -> CliResult {
    if let Some(path) = &a.fixture {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read fixture {}: {e}", path.display())))?;
        let fixture: SelectFixture = toml::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid fixture {}: {e}", path.display())))?;
        let mut th = Thresholds::default();
        if let Some(eps) = fixture.epsilon {
            th.epsilon = eps;
        }
        println!(
            "fixture={} method={:?} epsilon={}",
            path.display(),
            a.method,
            th.epsilon
        );
        let sel = match a.method {
            SelectMethod::Error => {
                select_model_lmc_error(&fixture.dense_test_errors, &fixture, &th)?
            }
            SelectMethod::Cka => select_model_lmc_cka(&fixture.dense_test_errors, &fixture, &th)?,
        };
        print_selection(&sel);
        return Ok(());
    }

    // Real mode: one candidate per configured temperature value.
    let config = load_config(a.cfg.config.as_deref())?;
    let th = thresholds_with_alpha(&config, a.alpha)?;
    print_resolved(&config, &[a.cfg.seed]);
    let data: Split<f32> = config.load_data()?;
    let model = config.model_config_for(data.train.dim(), data.train.num_classes(), 0.0)?;
    let init = ParamSet::<f32>::init(&model, a.cfg.seed)?;
    let mut candidates = Vec::new();
    for &t in &config.temperature_values {
        let spec = config.dense_spec(t, a.cfg.seed)?;
        let (params, report) = train(&init, None, &spec, &data)?;
        println!(
            "candidate temperature={t} dense_test_error={}",
            report.final_test_error
        );
        candidates.push(Candidate {
            params,
            spec,
            dense_test_error: report.final_test_error,
        });
    }
    let set = CandidateSet {
        candidates,
        target: config.prune_spec(config.target_density),
    };
    let probe = PipelineCandidateProbe::new(
        &set,
        &data,
        th.alpha,
        config.retrain_schedule,
        config.twin_seeds(a.cfg.seed),
        config.cka_sample_seed,
        config.grid_points,
    )?;
    let errors = set.dense_errors();
    let sel = match a.method {
        SelectMethod::Error => select_model_lmc_error(&errors, &probe, &th)?,
        SelectMethod::Cka => select_model_lmc_cka(&errors, &probe, &th)?,
    };
    print_selection(&sel);
    println!(
        "selected_temperature={} pruned_runs={}",
        config.temperature_values[sel.index],
        probe.runs()
    );
    Ok(())
}

fn cmd_tune_rho(a: TuneRhoArgs) -> CliResult {
    let config = load_config(a.cfg.config.as_deref())?;
    usage_check(
        a.rho.iter().all(|r| r.is_finite() && *r >= 0.0),
        "--rho values must be non-negative",
    )?;
    print_resolved(&config, &[a.cfg.seed]);
    let data: Split<f32> = config.load_data()?;
    let model = config.model_config_for(data.train.dim(), data.train.num_classes(), 0.0)?;
    let init = ParamSet::<f32>::init(&model, a.cfg.seed)?;
    let base = config.base_spec(a.cfg.seed);
    let target = config.prune_spec(config.target_density);
    let twins = config.twin_spec(a.cfg.seed);
    let samples = SampleSet::from_train(&data.train, config.cka_sample_seed);
    let sel = tune_sam_rho(&a.rho, |rho| {
        pipeline_rho_cka(
            &init,
            &base,
            &target,
            &twins,
            &data,
            &samples,
            config.grid_points,
            rho,
        )
    })?;
    for (rho, c) in a.rho.iter().zip(&sel.ckas) {
        match c {
            Some(c) => println!("rho={rho} cka={c}"),
            None => println!("rho={rho} cka=failed"),
        }
    }
    println!("selected_rho={}", sel.rho);
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> CliResult {
    let s = inspect_checkpoint(existing(&a.path)?)?;
    println!("path={}", a.path.display());
    println!("dtype={}", s.metadata.dtype);
    println!("m={}", s.param_count);
    for (i, [o, n]) in s.metadata.layer_shapes.iter().enumerate() {
        println!("layer {i}: weight {o}x{n} bias {o}");
    }
    match (s.prunable_density, s.overall_density) {
        (Some(p), Some(o)) => println!("mask: prunable_density={p} overall_density={o}"),
        _ => println!("mask: none"),
    }
    println!("# metadata");
    print!(
        "{}",
        toml::to_string(&s.metadata)
            .map_err(|e| CliError::Run(prunelab::Error::Config(e.to_string())))?
    );
    Ok(())
}
