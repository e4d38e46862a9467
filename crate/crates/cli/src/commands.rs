//! The CLI verbs. Each writes its files and a short summary to `out`.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dcvae_core::episodic::{
    apply_absence, episode_seed, evaluate, sample_episode, AbsenceConfig, EvalReport, FeatureBank, Split,
};
use dcvae_core::model::gradcheck::{self, GradcheckConfig, GradcheckReport, LossTerm};
use dcvae_core::model::{
    generate_seeded, load_checkpoint, save_checkpoint, ClassConditions, DcvaeParams, FeatureKind, Group, HyperParams,
    LossTerms, ModelDims,
};
use dcvae_core::training::{ema, finetune, pretrain, TrainLog};

use crate::bankfile::{format_records, load_feature_bank, save_feature_bank, write_text, BankPaths};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::synth::synth_banks;

/// First line of every report CSV.
pub const REPORT_VERSION_LINE: &str = "# dcvae report v1";
pub const EPISODE_HEADER: &str = "episode,accuracy";
pub const SWEEP_HEADER: &str = "experiment,n_way,k_shot,queries_per_class,episodes,synth_count,knn_k,eta_s,eta_v,absence_mode,kinds,lambda_kl,loss_terms,seed,mean,ci95,dis";

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn require_files(paths: &[&Path]) -> Result<(), CliError> {
    match paths.iter().find(|p| !p.exists()) {
        Some(p) => Err(CliError::MissingPath(p.to_path_buf())),
        None => Ok(()),
    }
}

fn load_bank(paths: &BankPaths, split: Split) -> Result<FeatureBank, CliError> {
    require_files(&[&paths.features, &paths.semantics])?;
    load_feature_bank(paths, split)
}

fn load_model(cfg: &RunConfig) -> Result<DcvaeParams, CliError> {
    require_files(&[&cfg.checkpoint])?;
    let ck = load_checkpoint(&cfg.checkpoint).map_err(|e| CliError::Data {
        path: cfg.checkpoint.clone(),
        msg: e.to_string(),
    })?;
    Ok(ck.params)
}

fn write_log(log: &TrainLog, path: &Path) -> Result<(), CliError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_text(path, &String::from_utf8(buf).expect("ascii csv"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn summary_line(report: &EvalReport) -> String {
    format!(
        "{}-way {}-shot: {:.2} ± {:.2} (%)",
        report.echo.n_way, report.echo.k_shot, report.mean, report.ci95
    )
}

/// Per-episode CSV: version line, echoed configuration, then one row per
/// episode.
pub fn episode_csv(report: &EvalReport) -> String {
    let e = &report.echo;
    let mut s = String::new();
    writeln!(s, "{REPORT_VERSION_LINE}").unwrap();
    writeln!(
        s,
        "# n_way={} k_shot={} queries_per_class={} episodes={} synth_count={} knn_k={} eta_s={} eta_v={} absence_mode={} kinds={} lambda_kl={} loss_terms={} seed={}",
        e.n_way, e.k_shot, e.queries_per_class, e.episodes, e.synth_count, e.knn_k, e.eta_s, e.eta_v,
        e.absence_mode, e.kinds, e.lambda_kl, e.loss_terms, e.seed
    )
    .unwrap();
    writeln!(s, "# mean={} ci95={} dis={}", report.mean, report.ci95, fmt_opt(report.dis)).unwrap();
    writeln!(s, "{EPISODE_HEADER}").unwrap();
    for (i, acc) in report.accuracies.iter().enumerate() {
        writeln!(s, "{i},{acc}").unwrap();
    }
    s
}

pub fn sweep_row(experiment: &str, r: &EvalReport) -> String {
    let e = &r.echo;
    format!(
        "{experiment},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        e.n_way,
        e.k_shot,
        e.queries_per_class,
        e.episodes,
        e.synth_count,
        e.knn_k,
        e.eta_s,
        e.eta_v,
        e.absence_mode,
        e.kinds,
        e.lambda_kl,
        e.loss_terms,
        e.seed,
        r.mean,
        r.ci95,
        fmt_opt(r.dis)
    )
}

fn train_fresh(cfg: &RunConfig, bank: &FeatureBank, hp: &HyperParams) -> Result<(DcvaeParams, TrainLog), CliError> {
    let dims = cfg.dims(bank.feature_dim(), bank.semantic_dim());
    let mut params = DcvaeParams::init_seeded(dims, cfg.seed)?;
    let log = pretrain(&mut params, bank, &cfg.pretrain, hp)?;
    Ok((params, log))
}

pub fn cmd_pretrain(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let bank = load_bank(&cfg.train, Split::Train)?;
    let (params, log) = train_fresh(cfg, &bank, &cfg.hyper)?;
    save_checkpoint(&cfg.checkpoint, &params, &cfg.hyper).map_err(|e| CliError::Data {
        path: cfg.checkpoint.clone(),
        msg: e.to_string(),
    })?;
    write_log(&log, &cfg.log)?;
    let totals = log.totals();
    let head = &totals[..totals.len().min(10)];
    let first = head.iter().sum::<f64>() / head.len().max(1) as f64;
    say(
        out,
        &format!(
            "pretrained {} steps: loss {:.4} (first 10 steps) -> {:.4} (moving average); checkpoint {}",
            totals.len(),
            first,
            ema(&totals, 0.05).unwrap_or(f64::NAN),
            cfg.checkpoint.display()
        ),
    )
}

/// Fine-tunes a copy of the checkpoint on the support set of episode 0.
pub fn cmd_finetune(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let bank = load_bank(&cfg.test, Split::Test)?;
    let mut params = load_model(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 0, 0));
    let episode = sample_episode(&bank, cfg.episode, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 0, 1));
    let episode = apply_absence(&episode, &cfg.absence, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, 0, 2));
    let steps = cfg.hyper.finetune_steps(cfg.episode.k_shot);
    let log = finetune(&mut params, &episode.support, steps, &cfg.hyper, &mut rng)?;
    save_checkpoint(&cfg.finetuned, &params, &cfg.hyper).map_err(|e| CliError::Data {
        path: cfg.finetuned.clone(),
        msg: e.to_string(),
    })?;
    write_log(&log, &cfg.log)?;
    let classes: Vec<&str> = episode.classes.iter().map(|&l| bank.class_name(l)).collect();
    say(
        out,
        &format!(
            "fine-tuned on {} support records of [{}]: {} logged updates; checkpoint {}",
            episode.support.len(),
            classes.join(", "),
            log.len(),
            cfg.finetuned.display()
        ),
    )
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write) -> Result<EvalReport, CliError> {
    let bank = load_bank(&cfg.test, Split::Test)?;
    let params = load_model(cfg)?;
    let report = evaluate(&bank, &params, &cfg.hyper, &cfg.eval_config())?;
    write_text(&cfg.report, &episode_csv(&report))?;
    say(out, &summary_line(&report))?;
    Ok(report)
}

/// One point of a sweep: a label plus the settings it changes.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub id: String,
    pub hyper: HyperParams,
    pub absence: AbsenceConfig,
    pub kinds: Vec<FeatureKind>,
    /// Whether the point needs its own pretrained model.
    pub retrain: bool,
}

pub const SWEEP_AXES: [&str; 6] = ["lambda", "k", "n", "absence_grid", "feature_combo", "loss_ablation"];

pub fn default_sweep_values(axis: &str) -> Result<String, CliError> {
    Ok(match axis {
        "lambda" => "0.01,0.1,1,10,100".into(),
        "k" => "1,3,5,7,9".into(),
        "n" => "0,100,200,300,400,500".into(),
        "absence_grid" => {
            let mut cells = Vec::new();
            for v in 0..=5 {
                for s in 0..=(5 - v) {
                    cells.push(format!("{}:{}", s as f64 / 5.0, v as f64 / 5.0));
                }
            }
            cells.join(",")
        }
        "feature_combo" => FeatureKind::combinations()
            .iter()
            .map(|k| FeatureKind::list_label(k))
            .collect::<Vec<_>>()
            .join(","),
        "loss_ablation" => LossTerms::ablation_ladder()
            .iter()
            .map(LossTerms::label)
            .collect::<Vec<_>>()
            .join(","),
        other => return Err(unknown_axis(other)),
    })
}

fn core_msg(e: dcvae_core::Error) -> String {
    match e {
        dcvae_core::Error::Config(m) => m,
        other => other.to_string(),
    }
}

fn unknown_axis(axis: &str) -> CliError {
    CliError::Config(format!("unknown sweep axis `{axis}` (one of {})", SWEEP_AXES.join("|")))
}

/// Parses and validates every point before anything runs.
pub fn sweep_points(cfg: &RunConfig, axis: &str, values: &str) -> Result<Vec<SweepPoint>, CliError> {
    let values = if values.trim().is_empty() {
        default_sweep_values(axis)?
    } else {
        values.to_string()
    };
    let bad = |v: &str, why: String| CliError::Config(format!("sweep {axis} value `{v}`: {why}"));
    let mut points = Vec::new();
    for v in values.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        let mut p = SweepPoint {
            id: format!("{axis}={v}"),
            hyper: cfg.hyper.clone(),
            absence: cfg.absence,
            kinds: cfg.kinds.clone(),
            retrain: false,
        };
        match axis {
            "lambda" => {
                p.hyper.lambda_kl = v.parse().map_err(|e| bad(v, format!("{e}")))?;
                p.retrain = true;
            }
            "k" => p.hyper.knn_k = v.parse().map_err(|e| bad(v, format!("{e}")))?,
            "n" => p.hyper.synth_count = v.parse().map_err(|e| bad(v, format!("{e}")))?,
            "absence_grid" => {
                let (s, vv) = v.split_once(':').ok_or_else(|| bad(v, "expected `eta_s:eta_v`".into()))?;
                p.absence.eta_s = s.parse().map_err(|e| bad(v, format!("{e}")))?;
                p.absence.eta_v = vv.parse().map_err(|e| bad(v, format!("{e}")))?;
                p.absence.validate().map_err(|e| bad(v, core_msg(e)))?;
            }
            "feature_combo" => {
                p.kinds = FeatureKind::parse_list(v).map_err(|e| bad(v, core_msg(e)))?;
            }
            "loss_ablation" => {
                p.hyper.loss_terms = LossTerms::parse(&v.replace('+', ",")).map_err(|e| bad(v, core_msg(e)))?;
                p.retrain = true;
            }
            other => return Err(unknown_axis(other)),
        }
        p.hyper.validate().map_err(|e| bad(v, core_msg(e)))?;
        if p.hyper.synth_count > 0 && p.kinds.is_empty() {
            return Err(bad(v, "feature kinds must be nonempty when n > 0".into()));
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(CliError::Config(format!("sweep {axis} has no values")));
    }
    Ok(points)
}

/// Evaluates every point with the same episode seeds; points that change
/// the training objective are pretrained from scratch on the train bank.
pub fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<EvalReport>, CliError> {
    if cfg.sweep_axis.is_empty() {
        return Err(CliError::Usage("sweep needs an axis (--sweep.axis or --axis)".into()));
    }
    let points = sweep_points(cfg, &cfg.sweep_axis, &cfg.sweep_values)?;
    let test = load_bank(&cfg.test, Split::Test)?;
    let train = if points.iter().any(|p| p.retrain) {
        Some(load_bank(&cfg.train, Split::Train)?)
    } else {
        None
    };
    let shared = if points.iter().all(|p| p.retrain) { None } else { Some(load_model(cfg)?) };

    let mut csv = format!("{REPORT_VERSION_LINE}\n{SWEEP_HEADER}\n");
    let mut reports = Vec::with_capacity(points.len());
    for p in &points {
        let trained;
        let params = match (&train, p.retrain) {
            (Some(bank), true) => {
                trained = train_fresh(cfg, bank, &p.hyper)?.0;
                &trained
            }
            _ => shared.as_ref().expect("loaded when some point reuses the checkpoint"),
        };
        let mut ec = cfg.eval_config();
        ec.absence = p.absence;
        ec.kinds = p.kinds.clone();
        let report = evaluate(&test, params, &p.hyper, &ec)?;
        csv.push_str(&sweep_row(&p.id, &report));
        csv.push('\n');
        say(out, &format!("{}  {}", p.id, summary_line(&report)))?;
        reports.push(report);
    }
    write_text(&cfg.report, &csv)?;
    Ok(reports)
}

/// Synthesizes `hyper.synth_count` features per kind for one class (or every
/// class) of the test bank, conditioned on the class semantics and the
/// prototype of all its features.
pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let bank = load_bank(&cfg.test, Split::Test)?;
    let params = load_model(cfg)?;
    let protos = bank.prototypes();
    let labels = match &cfg.generate_class {
        Some(name) => vec![bank
            .label_of(name)
            .ok_or_else(|| CliError::Config(format!("class `{name}` is not in {}", cfg.test.features.display())))?],
        None => bank.classes().to_vec(),
    };
    let n = cfg.hyper.synth_count;
    let mut text = String::new();
    for label in &labels {
        let cond = ClassConditions {
            semantic: bank.semantic(*label).map(<[f64]>::to_vec),
            visual: protos.get(label).cloned(),
        };
        let seed = episode_seed(cfg.seed, label.0 as usize, 2);
        let name = bank.class_name(*label);
        for set in generate_seeded(&params, &cond, &cfg.kinds, n, seed)? {
            text.push_str(&format_records(set.features.iter_rows().map(|r| (name, r))));
        }
    }
    write_text(&cfg.features_out, &text)?;
    say(
        out,
        &format!(
            "wrote {} features ({} per kind, kinds {}) for {} classes to {}",
            n * cfg.kinds.len() * labels.len(),
            n,
            FeatureKind::list_label(&cfg.kinds),
            labels.len(),
            cfg.features_out.display()
        ),
    )
}

/// Parses `TERM:GROUP`, e.g. `rc:R_s`.
pub fn parse_corruption(spec: &str) -> Result<(LossTerm, Group), CliError> {
    let bad = || CliError::Usage(format!("`{spec}`: expected TERM:GROUP such as `rc:R_s`"));
    let (t, g) = spec.split_once(':').ok_or_else(bad)?;
    let term = LossTerm::ALL.into_iter().find(|x| x.name() == t).ok_or_else(bad)?;
    let group = Group::from_short_name(g).ok_or_else(bad)?;
    Ok((term, group))
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut s = format!("{:<6} {:<5} {:>10} {:>12}  status\n", "term", "group", "rel_err", "max_abs_err");
    for c in &report.cells {
        let err = c.rel_err.map_or_else(|| "n/a".to_string(), |e| format!("{e:.3e}"));
        let status = if c.passed { "ok" } else { "FAIL" };
        writeln!(
            s,
            "{:<6} {:<5} {:>10} {:>12.3e}  {status}",
            c.term.name(),
            c.group.short_name(),
            err,
            c.max_abs_err
        )
        .unwrap();
    }
    s
}

pub fn cmd_gradcheck(
    seed: u64,
    dims: [usize; 3],
    corrupt: Option<(LossTerm, Group)>,
    out: &mut dyn Write,
) -> Result<GradcheckReport, CliError> {
    let [d, s, z] = dims;
    let defaults = GradcheckConfig::default();
    let cfg = GradcheckConfig {
        seed,
        dims: ModelDims::compact(d, s, z, defaults.dims.decoder_hidden),
        corrupt,
        ..defaults
    };
    let report = gradcheck::run(&cfg)?;
    write!(out, "{}", gradcheck_table(&report)).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    say(
        out,
        &format!(
            "{} parameters checked, max relative error {:.3e} (tolerance {:.0e})",
            report.params_checked,
            report.max_rel_err(),
            report.tolerance
        ),
    )?;
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<String> = report
            .cells
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}/{}", c.term.name(), c.group.short_name()))
            .collect();
        Err(CliError::CheckFailed(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

pub fn cmd_synth_bank(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let banks = synth_banks(&cfg.synth)?;
    let dir = &cfg.synth_dir;
    let paths = |split: &str| BankPaths {
        features: dir.join(format!("{split}_features.tsv")),
        semantics: dir.join(format!("{split}_semantics.tsv")),
    };
    save_feature_bank(&banks.train, &paths("train"))?;
    save_feature_bank(&banks.test, &paths("test"))?;
    say(
        out,
        &format!(
            "wrote {} train features ({} classes) and {} test features ({} classes) to {}",
            banks.train.len(),
            banks.train.classes().len(),
            banks.test.len(),
            banks.test.classes().len(),
            dir.display()
        ),
    )
}
