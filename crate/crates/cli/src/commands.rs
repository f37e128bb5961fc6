use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::Serialize;

use compdiff_core::composer::{self, ComposeConfig, PicardMode};
use compdiff_core::dataset::{self, ComposeMeta, Dataset, DatasetKind, TEST_SEED_OFFSET};
use compdiff_core::ddpm::ParamKind;
use compdiff_core::grf::GrfParams;
use compdiff_core::heatmap;
use compdiff_core::metrics::{self, ReportRow, RunInfo, CSV_HEADER};
use compdiff_core::schedule::ScheduleParams;
use compdiff_core::systems::SystemParams;
use compdiff_core::{FieldSet, GridSpec, NoiseSchedule, SystemId};
use compdiff_nets::checkpoint;
use compdiff_nets::expert::{DenoiserExpert, FnoPredictor};
use compdiff_nets::fno::FnoConfig;
use compdiff_nets::train::{self, TrainConfig, FNO_IN_CHANNELS, FNO_OUTPUTS};
use compdiff_nets::unet::UNetConfig;

use crate::args::*;
use crate::error::{CliError, Result};
use crate::preset::{Preset, PresetName};

pub fn run(cli: &Cli) -> Result<()> {
    let print = cli.print_config;
    match &cli.command {
        Command::GenerateData(a) => generate(a, print),
        Command::Train(a) => train_cmd(a, print),
        Command::Compose(a) => compose_cmd(a, print),
        Command::Evaluate(a) => evaluate(a, print),
        Command::Plot(a) => plot(a, print),
        Command::SweepLambda(a) => sweep(a, print),
    }
}

fn emit<T: Serialize>(plan: &T) -> Result<()> {
    let text = toml::to_string(plan).map_err(|e| CliError::Usage(format!("cannot render configuration: {e}")))?;
    print!("{text}");
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn incompatible(msg: impl Into<String>) -> CliError {
    CliError::Incompatible(msg.into())
}

#[derive(Serialize)]
struct GeneratePlan {
    system: &'static str,
    kind: KindArg,
    split: Split,
    preset: PresetName,
    n: usize,
    seed: u64,
    out: PathBuf,
    grid: GridSpec,
    grf: GrfParams,
    dynamics: String,
}

fn generate(a: &GenerateArgs, print: bool) -> Result<()> {
    let preset = Preset::get(a.preset);
    let system: SystemId = a.system.into();
    let (nx, nt) = preset.resolution(system);
    let params = SystemParams::default_for(system).with_resolution(a.nx.unwrap_or(nx), a.nt.unwrap_or(nt));
    params.validate()?;
    let seed = match a.split {
        Split::Train => a.seed,
        Split::Test => a
            .seed
            .checked_add(TEST_SEED_OFFSET)
            .ok_or_else(|| CliError::Usage("seed too large for the test split".into()))?,
    };
    let grf = GrfParams::default_for(&params.grid);
    let plan = GeneratePlan {
        system: system.as_str(),
        kind: a.kind,
        split: a.split,
        preset: a.preset,
        n: a.n.unwrap_or(preset.samples),
        seed,
        out: a.out.clone(),
        grid: params.grid,
        grf,
        dynamics: format!("{:?}", params.dynamics),
    };
    if print {
        return emit(&plan);
    }
    let mut ds = match a.kind {
        KindArg::DecoupledU => dataset::generate_decoupled(&params, &grf, 0, plan.n, seed)?,
        KindArg::DecoupledV => dataset::generate_decoupled(&params, &grf, 1, plan.n, seed)?,
        KindArg::Coupled => dataset::generate_coupled(&params, &grf, plan.n, seed)?,
    };
    ensure_parent(&a.out)?;
    ds.save(&a.out)?;
    log::info!(
        "wrote {} samples to {} (payload crc32 {:08x})",
        ds.len(),
        a.out.display(),
        ds.manifest().payload_crc32
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainPlan {
    dataset: PathBuf,
    model: ModelArg,
    preset: PresetName,
    out: PathBuf,
    loss_log: PathBuf,
    train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unet: Option<UNetConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fno: Option<FnoConfig>,
}

fn train_cmd(a: &TrainArgs, print: bool) -> Result<()> {
    let preset = Preset::get(a.preset);
    let mut cfg = preset.train_config();
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.ema_decay = a.ema_decay.unwrap_or(cfg.ema_decay);
    cfg.seed = a.seed;
    cfg.checkpoint_every = a.checkpoint_every;
    cfg.validate()?;

    let ds = dataset::load(&a.dataset)?;
    let grid = ds.manifest().grid;
    let kind = match a.model {
        ModelArg::DdpmEps => Some(ParamKind::Epsilon),
        ModelArg::DdpmV => Some(ParamKind::V),
        ModelArg::Fno => None,
    };
    let mut plan = TrainPlan {
        dataset: a.dataset.clone(),
        model: a.model,
        preset: a.preset,
        out: a.out.clone(),
        loss_log: a.loss_log.clone().unwrap_or_else(|| a.out.with_extension("loss.csv")),
        train: cfg.clone(),
        schedule: None,
        unet: None,
        fno: None,
    };
    match kind {
        Some(kind) => {
            if !matches!(ds.manifest().kind, DatasetKind::DecoupledForField(_)) {
                return Err(incompatible("denoisers train on decoupled datasets"));
            }
            let n_cond = ds.manifest().n_channels().saturating_sub(2);
            let mut ucfg = UNetConfig::new(a.channels.unwrap_or(preset.base_channels), n_cond, kind);
            if a.attention == AttentionArg::All {
                ucfg = ucfg.with_attention_everywhere();
            }
            if a.time_channel {
                ucfg = ucfg.with_time_channel();
            }
            ucfg.validate()?;
            plan.schedule = Some(preset.schedule);
            plan.unet = Some(ucfg);
        }
        None => {
            if ds.manifest().kind != DatasetKind::Coupled {
                return Err(incompatible("the operator baseline trains on coupled datasets"));
            }
            let fcfg = FnoConfig::for_grid(grid.nt, grid.nx, FNO_IN_CHANNELS, FNO_OUTPUTS.len());
            fcfg.validate()?;
            plan.fno = Some(fcfg);
        }
    }
    if print {
        return emit(&plan);
    }

    ensure_parent(&a.out)?;
    let periodic = (cfg.checkpoint_every > 0).then_some(a.out.as_path());
    let (digest, history) = if let Some(ucfg) = &plan.unet {
        let sched = NoiseSchedule::from_params(&preset.schedule)?;
        let tr = train::train_denoiser(&ds, ucfg, &sched, &cfg, periodic)?;
        (tr.save(&a.out)?, tr.history)
    } else {
        let tr = train::train_fno(&ds, &cfg, plan.fno.clone(), periodic)?;
        (tr.save(&a.out)?, tr.history)
    };
    ensure_parent(&plan.loss_log)?;
    std::fs::write(&plan.loss_log, train::loss_csv(&history))?;
    let last = history.last().map_or(f64::NAN, |r| r.ema_loss);
    log::info!("wrote {} (digest {digest}), final smoothed loss {last:.4e}", a.out.display());
    Ok(())
}

/// Denoisers for every field, sorted by field index, plus the IC dataset.
struct Composition {
    experts: Vec<DenoiserExpert>,
    ics: Dataset,
    n: usize,
    system: SystemId,
    grid: GridSpec,
    schedule: ScheduleParams,
}

fn load_composition(o: &ComposeOpts) -> Result<Composition> {
    let mut experts = Vec::with_capacity(o.models.len());
    for path in &o.models {
        let ck = checkpoint::load(path)?;
        if ck.meta.field_index.is_none() {
            return Err(incompatible(format!("{} does not hold a denoiser", path.display())));
        }
        experts.push(DenoiserExpert::from_checkpoint(&ck)?);
    }
    experts.sort_by_key(|e| e.meta().field_index);
    let first = experts.first().ok_or_else(|| CliError::Usage("no models given".into()))?;
    let system = first.system();
    let grid = first.meta().grid;
    let schedule = first.meta().schedule.expect("denoiser checkpoints carry a schedule");
    if experts.len() != system.n_fields() {
        return Err(incompatible(format!(
            "{} needs {} denoisers, got {}",
            system.as_str(),
            system.n_fields(),
            experts.len()
        )));
    }
    for (i, e) in experts.iter().enumerate() {
        if e.meta().field_index != Some(i) {
            return Err(incompatible("need exactly one denoiser per field"));
        }
        if e.system() != system || e.meta().grid != grid {
            return Err(incompatible("denoisers were trained on different systems or grids"));
        }
        if e.meta().schedule != Some(schedule) {
            return Err(incompatible("denoisers use different noise schedules"));
        }
    }
    if let Some(t) = o.steps {
        if t != schedule.steps {
            return Err(incompatible(format!(
                "requested {t} diffusion steps, checkpoints were trained with {}",
                schedule.steps
            )));
        }
    }
    let ics = dataset::load(&o.ics)?;
    if ics.manifest().kind != DatasetKind::Coupled {
        return Err(incompatible("initial conditions must come from a coupled dataset"));
    }
    if ics.manifest().system != system || ics.manifest().grid != grid {
        return Err(incompatible("IC dataset and denoisers disagree on system or grid"));
    }
    let n = o.n.map_or(ics.len(), |n| n.min(ics.len()));
    if n == 0 {
        return Err(CliError::Usage("need at least one initial condition".into()));
    }
    Ok(Composition {
        experts,
        ics,
        n,
        system,
        grid,
        schedule,
    })
}

impl Composition {
    /// Batched channel `c` of the first `n` samples, `(n, nt, nx)`.
    fn stacked(&self, c: usize) -> Array3<f64> {
        let views: Vec<Array2<f64>> = (0..self.n).map(|i| self.ics.channel(i, c)).collect();
        let views: Vec<_> = views.iter().map(|v| v.view()).collect();
        ndarray::stack(Axis(0), &views).expect("samples share a shape")
    }

    fn run(&self, o: &ComposeOpts, lambda: f64) -> Result<(Vec<FieldSet>, ComposeMeta)> {
        let nf = self.experts.len();
        let mut cfg = ComposeConfig::new((self.n, self.grid.nt, self.grid.nx));
        cfg.picard_iters = o.picard;
        cfg.lambda = lambda;
        cfg.seed = o.seed;
        cfg.mode = if o.renoise_picard {
            PicardMode::Renoise
        } else {
            PicardMode::Literal
        };
        cfg.ics = Some((0..nf).map(|f| self.stacked(nf + f).index_axis(Axis(1), 0).to_owned()).collect());
        if o.teacher_forced {
            cfg.teacher = Some((0..nf).map(|f| self.stacked(f)).collect());
        }
        let refs: Vec<&dyn composer::Expert> = self.experts.iter().map(|e| e as &dyn composer::Expert).collect();
        let fields = composer::compose(&refs, &cfg)?;
        let sets = composer::to_field_sets(&fields, self.grid, self.system)?;
        let meta = ComposeMeta {
            lambda,
            picard_iters: o.picard,
            steps: self.schedule.steps,
            seed: o.seed,
            renoise_picard: o.renoise_picard,
            param_kinds: self
                .experts
                .iter()
                .map(|e| composer::Expert::param_kind(e).as_str().to_string())
                .collect(),
            checkpoint_digests: self.experts.iter().map(|e| e.digest().to_string()).collect(),
        };
        Ok((sets, meta))
    }

    fn truth(&self) -> Result<Vec<FieldSet>> {
        Ok((0..self.n).map(|i| self.ics.field_set(i)).collect::<compdiff_core::Result<_>>()?)
    }
}

#[derive(Serialize)]
struct ComposePlan {
    models: Vec<PathBuf>,
    ics: PathBuf,
    n_samples: usize,
    lambdas: Vec<f64>,
    picard_iters: usize,
    steps: usize,
    seed: u64,
    renoise_picard: bool,
    teacher_forced: bool,
    param_kinds: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<PathBuf>,
}

fn compose_plan(c: &Composition, o: &ComposeOpts, lambdas: Vec<f64>) -> ComposePlan {
    ComposePlan {
        models: o.models.clone(),
        ics: o.ics.clone(),
        n_samples: c.n,
        lambdas,
        picard_iters: o.picard,
        steps: c.schedule.steps,
        seed: o.seed,
        renoise_picard: o.renoise_picard,
        teacher_forced: o.teacher_forced,
        param_kinds: c
            .experts
            .iter()
            .map(|e| composer::Expert::param_kind(e).as_str().to_string())
            .collect(),
        out: None,
        report: None,
    }
}

fn compose_cmd(a: &ComposeArgs, print: bool) -> Result<()> {
    let c = load_composition(&a.opts)?;
    if print {
        let mut plan = compose_plan(&c, &a.opts, vec![a.lambda]);
        plan.out = Some(a.out.clone());
        return emit(&plan);
    }
    let (sets, meta) = c.run(&a.opts, a.lambda)?;
    let mut ds = dataset::from_field_sets(&sets, c.ics.manifest().grf, a.opts.seed)?;
    ds.manifest_mut().compose = Some(meta);
    ensure_parent(&a.out)?;
    ds.save(&a.out)?;
    log::info!(
        "wrote {} composed samples to {} (payload crc32 {:08x})",
        ds.len(),
        a.out.display(),
        ds.manifest().payload_crc32
    );
    Ok(())
}

fn method_for(kinds: &[String]) -> Option<Method> {
    let all = |k: ParamKind| kinds.iter().all(|s| s == k.as_str());
    if all(ParamKind::V) {
        Some(Method::ComposeV)
    } else if all(ParamKind::Epsilon) {
        Some(Method::ComposeEps)
    } else {
        None
    }
}

/// Appends rows to a CSV report, writing the header for a new file.
fn append_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let existing = std::fs::read_to_string(path).unwrap_or_default();
    if existing.trim().is_empty() {
        ensure_parent(path)?;
        return Ok(metrics::write_csv(path, rows)?);
    }
    if existing.lines().next() != Some(CSV_HEADER) {
        return Err(incompatible(format!("{} is not a report with the expected header", path.display())));
    }
    let csv = metrics::to_csv(rows);
    let body = csv.split_once('\n').map_or("", |(_, b)| b);
    let mut f = std::fs::OpenOptions::new().append(true).open(path)?;
    if !existing.ends_with('\n') {
        writeln!(f)?;
    }
    f.write_all(body.as_bytes())?;
    Ok(())
}

fn ics_agree(pred: &FieldSet, truth: &FieldSet) -> bool {
    pred.ics().iter().zip(truth.ics()).all(|(p, t)| {
        let scale = 1.0 + t.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        p.iter().zip(t).all(|(a, b)| (a - b).abs() <= 1e-5 * scale)
    })
}

#[derive(Serialize)]
struct EvaluatePlan {
    method: Method,
    test: PathBuf,
    report: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pred: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
}

fn evaluate(a: &EvaluateArgs, print: bool) -> Result<()> {
    let missing = |flag: &str| CliError::Usage(format!("--{flag} is required for method {}", a.method.as_str()));
    match a.method {
        Method::Fno if a.model.is_none() => return Err(missing("model")),
        Method::ComposeEps | Method::ComposeV if a.pred.is_none() => return Err(missing("pred")),
        _ => {}
    }
    if print {
        return emit(&EvaluatePlan {
            method: a.method,
            test: a.test.clone(),
            report: a.report.clone(),
            pred: a.pred.clone(),
            model: a.model.clone(),
            n: a.n,
        });
    }
    let test = dataset::load(&a.test)?;
    if test.manifest().kind != DatasetKind::Coupled {
        return Err(incompatible("the test set must be a coupled dataset"));
    }
    let system = test.manifest().system;
    let grid = test.manifest().grid;
    let limit = |n: usize| a.n.map_or(n, |m| m.min(n));

    let (preds, info) = match (a.method, &a.pred, &a.model) {
        (Method::Fno, _, Some(model)) => {
            let ck = checkpoint::load(model)?;
            let fno = FnoPredictor::from_checkpoint(&ck)?;
            if fno.meta().system != system || fno.meta().grid != grid {
                return Err(incompatible("operator checkpoint and test set disagree on system or grid"));
            }
            let n = limit(test.len());
            let ics: Vec<Array2<f64>> = (0..2)
                .map(|f| {
                    let rows: Vec<_> = (0..n).map(|i| test.channel(i, 2 + f).row(0).to_owned()).collect();
                    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
                    ndarray::stack(Axis(0), &views).expect("ICs share a length")
                })
                .collect();
            let fields = fno.predict(&ics)?;
            let info = RunInfo {
                lambda: None,
                picard_iters: None,
                steps: None,
                seed: Some(fno.meta().seed),
                checkpoint_digest: fno.digest().to_string(),
            };
            (composer::to_field_sets(&fields, grid, system)?, info)
        }
        (_, Some(pred), _) => {
            let pred = dataset::load(pred)?;
            let meta = pred
                .manifest()
                .compose
                .clone()
                .ok_or_else(|| incompatible("prediction dataset was not produced by compose"))?;
            if method_for(&meta.param_kinds) != Some(a.method) {
                return Err(incompatible(format!(
                    "prediction was composed from {:?} denoisers, not {}",
                    meta.param_kinds,
                    a.method.as_str()
                )));
            }
            if pred.manifest().system != system || pred.manifest().grid != grid {
                return Err(incompatible("prediction and test set disagree on system or grid"));
            }
            let n = limit(pred.len());
            if n > test.len() {
                return Err(incompatible("prediction has more samples than the test set"));
            }
            let sets = (0..n).map(|i| pred.field_set(i)).collect::<compdiff_core::Result<Vec<_>>>()?;
            let info = RunInfo {
                lambda: Some(meta.lambda),
                picard_iters: Some(meta.picard_iters),
                steps: Some(meta.steps),
                seed: Some(meta.seed),
                checkpoint_digest: meta.checkpoint_digests.join("+"),
            };
            (sets, info)
        }
        _ => unreachable!("required inputs checked above"),
    };
    let truth = (0..preds.len())
        .map(|i| test.field_set(i))
        .collect::<compdiff_core::Result<Vec<_>>>()?;
    if preds.iter().zip(&truth).any(|(p, t)| !ics_agree(p, t)) {
        return Err(incompatible("predictions start from different initial conditions than the test set"));
    }
    let rows = metrics::evaluate_predictions(a.method.as_str(), &preds, &truth, &info)?;
    append_report(&a.report, &rows)?;
    print!("{}", metrics::render_table(&rows));
    Ok(())
}

#[derive(Serialize)]
struct PlotPlan {
    fields: Vec<PathBuf>,
    out: PathBuf,
    sample: usize,
}

fn plot(a: &PlotArgs, print: bool) -> Result<()> {
    if print {
        return emit(&PlotPlan {
            fields: a.fields.clone(),
            out: a.out.clone(),
            sample: a.sample,
        });
    }
    let mut sets = Vec::with_capacity(a.fields.len());
    for path in &a.fields {
        let ds = dataset::load(path)?;
        if a.sample >= ds.len() {
            return Err(CliError::Usage(format!(
                "sample {} out of range for {} ({} samples)",
                a.sample,
                path.display(),
                ds.len()
            )));
        }
        sets.push(ds.field_set(a.sample)?);
    }
    let refs: Vec<&FieldSet> = sets.iter().collect();
    for p in heatmap::render_heatmaps(&refs, &a.out)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn sweep(a: &SweepArgs, print: bool) -> Result<()> {
    let c = load_composition(&a.opts)?;
    if a.lambdas.is_empty() {
        return Err(CliError::Usage("no lambda values given".into()));
    }
    if print {
        let mut plan = compose_plan(&c, &a.opts, a.lambdas.clone());
        plan.report = Some(a.report.clone());
        return emit(&plan);
    }
    let truth = c.truth()?;
    let mut rows = Vec::new();
    for &lambda in &a.lambdas {
        let (sets, meta) = c.run(&a.opts, lambda)?;
        let method = method_for(&meta.param_kinds).map_or("compose-mixed", |m| m.as_str());
        let info = RunInfo {
            lambda: Some(lambda),
            picard_iters: Some(meta.picard_iters),
            steps: Some(meta.steps),
            seed: Some(meta.seed),
            checkpoint_digest: meta.checkpoint_digests.join("+"),
        };
        rows.extend(metrics::evaluate_predictions(method, &sets, &truth, &info)?);
    }
    append_report(&a.report, &rows)?;
    print!("{}", metrics::render_table(&rows));
    Ok(())
}
