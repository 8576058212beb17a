mod args;
mod error;
mod io;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use iwgvem::adam::AdamConfig;
use iwgvem::gvem::GvemConfig;
use iwgvem::simstudy::{self, CorrelationBand, ItemStructure, Method, StudyOptions};
use iwgvem::{FitConfig, IwConfig, Mode, PromaxConfig, StudyDesign};
use log::info;
use serde::Serialize;

use args::{merge_with_config, Cli, Command, Common, DesignArgs, ElboArgs, FitArgs, StudyArgs, Tuning};
use error::CliError;
use manifest::{checksum, now_unix, RunManifest};

const DEFAULT_SEED: u64 = 1;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Study(a) => cmd_study(a),
        Command::Elbo(a) => cmd_elbo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("iwgvem: {e}");
            e.exit_code()
        }
    }
}

fn setup_threads(common: &Common) -> Result<(), CliError> {
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {t} threads: {e}")))?;
    }
    Ok(())
}

fn out_dir(common: &Common) -> Result<PathBuf, CliError> {
    let dir = common.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    io::ensure_dir(&dir)?;
    Ok(dir)
}

fn fit_config(t: &Tuning, mode: Mode) -> FitConfig {
    let d = FitConfig::default();
    FitConfig {
        mode,
        gvem: GvemConfig {
            tol: t.gvem_tol.unwrap_or(d.gvem.tol),
            max_iter: t.gvem_max_iter.unwrap_or(d.gvem.max_iter),
            mode,
        },
        iw: IwConfig {
            n_outer: t.n_outer.unwrap_or(d.iw.n_outer),
            n_inner: t.n_inner.unwrap_or(d.iw.n_inner),
            ..d.iw
        },
        adam: AdamConfig { ..d.adam },
        iw_tol: t.iw_tol.unwrap_or(d.iw_tol),
        iw_max_iter: t.iw_max_iter.unwrap_or(d.iw_max_iter),
        lr_candidates: t.lr.clone().unwrap_or(d.lr_candidates),
        lr_budget: t.lr_budget.unwrap_or(d.lr_budget),
        redraw_samples: !t.reuse_samples.unwrap_or(false),
        promax: PromaxConfig {
            power: t.promax_power.unwrap_or(d.promax.power),
            ..d.promax
        },
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("configuration types serialize")
}

fn cmd_fit(flags: FitArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a: FitArgs = merge_with_config(&flags, flags.config.as_deref())?;
    setup_threads(&a.common)?;
    let input = a.input.clone().ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let structure_arg = a.structure.clone().ok_or_else(|| CliError::Usage("--structure is required".into()))?;
    let dir = out_dir(&a.common)?;
    let seed = a.common.seed.unwrap_or(DEFAULT_SEED);

    let responses = io::read_responses(&input)?;
    let structure = io::read_structure(&structure_arg, responses.n_items())?;
    let mode = if structure_arg.starts_with("exploratory:") {
        Mode::Exploratory
    } else {
        Mode::Confirmatory
    };
    let cfg = fit_config(&a.tuning, mode);
    info!(
        "fitting {} persons x {} items, K = {} ({mode})",
        responses.n_persons(),
        responses.n_items(),
        structure.n_factors()
    );
    let fit = iwgvem::pipeline::fit(&responses, &structure, &cfg, seed)?;
    let scores = iwgvem::pipeline::score_persons(&responses, &fit.params)?;

    let mut outputs = vec!["loadings.csv", "intercepts.csv", "sigma_theta.csv", "scores.csv", "fit.json"];
    io::write_matrix(&dir.join("loadings.csv"), "item", &fit.params.a)?;
    io::write_intercepts(&dir.join("intercepts.csv"), fit.params.b.as_slice())?;
    io::write_matrix(&dir.join("sigma_theta.csv"), "factor", &fit.params.sigma_theta)?;
    io::write_matrix(&dir.join("scores.csv"), "person", &scores)?;
    if let Some(rot) = &fit.rotation {
        io::write_matrix(&dir.join("rotated_loadings.csv"), "item", &rot.loadings)?;
        io::write_matrix(&dir.join("phi.csv"), "factor", &rot.phi)?;
        outputs.extend(["rotated_loadings.csv", "phi.csv"]);
    }
    let meta = serde_json::json!({
        "mode": mode,
        "n_persons": responses.n_persons(),
        "n_items": responses.n_items(),
        "n_factors": structure.n_factors(),
        "gvem": {
            "iterations": fit.gvem_fit.n_iters,
            "converged": fit.gvem_fit.converged,
            "elbo": fit.gvem_fit.elbo_trace.last(),
        },
        "iw": {
            "iterations": fit.iw_iters,
            "converged": fit.converged,
            "chosen_lr": fit.chosen_lr,
            "lr_scores": fit.lr_selection.as_ref().map(|s| &s.scores),
            "elbo_first": fit.iw_elbo_trace.first(),
            "elbo_last": fit.iw_elbo_trace.last(),
            "elbo_trace": fit.iw_elbo_trace,
        },
        "timings_seconds": fit.timings,
    });
    io::write_json(&dir.join("fit.json"), &meta)?;

    let mut config = to_json(&a);
    config["fit"] = to_json(&cfg);
    RunManifest {
        command: "fit".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config,
        inputs: vec![checksum(&input)?]
            .into_iter()
            .chain((mode == Mode::Confirmatory).then(|| checksum(Path::new(&structure_arg))).transpose()?)
            .collect(),
        outputs: Vec::new(),
        started_unix: started,
        finished_unix: 0.0,
    }
    .finish(&dir, &outputs)
}

fn parse_items(s: &str) -> Result<ItemStructure, CliError> {
    match s {
        "between" => Ok(ItemStructure::Between),
        "within" => Ok(ItemStructure::Within),
        _ => Err(CliError::Usage(format!("item structure must be `between` or `within`, got `{s}`"))),
    }
}

fn parse_correlation(s: &str) -> Result<CorrelationBand, CliError> {
    let bad = || CliError::Usage(format!("correlation must be low, high, r or lo:hi; got `{s}`"));
    match s {
        "low" => Ok(CorrelationBand::LOW),
        "high" => Ok(CorrelationBand::HIGH),
        _ => match s.split_once(':') {
            Some((lo, hi)) => Ok(CorrelationBand {
                lo: lo.parse().map_err(|_| bad())?,
                hi: hi.parse().map_err(|_| bad())?,
            }),
            None => Ok(CorrelationBand::point(s.parse().map_err(|_| bad())?)),
        },
    }
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "confirmatory" => Ok(Mode::Confirmatory),
        "exploratory" => Ok(Mode::Exploratory),
        _ => Err(CliError::Usage(format!("mode must be `confirmatory` or `exploratory`, got `{s}`"))),
    }
}

fn design_from(d: &DesignArgs, defaults: (usize, usize, &str, &str, usize), seed: u64) -> Result<StudyDesign, CliError> {
    let (n, k, items, corr, reps) = defaults;
    let k = d.k.unwrap_or(k);
    let design = StudyDesign {
        j: d.j.unwrap_or(StudyDesign::default_items(k)),
        reps: d.reps.unwrap_or(reps),
        base_seed: seed,
        ..StudyDesign::new(
            d.n.unwrap_or(n),
            k,
            parse_items(d.items.as_deref().unwrap_or(items))?,
            parse_correlation(d.correlation.as_deref().unwrap_or(corr))?,
            parse_mode(d.mode.as_deref().unwrap_or("confirmatory"))?,
        )
    };
    design.validate()?;
    Ok(design)
}

fn cmd_study(flags: StudyArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a: StudyArgs = merge_with_config(&flags, flags.config.as_deref())?;
    let seed = a.common.seed.unwrap_or(DEFAULT_SEED);
    let designs = if a.full_grid.unwrap_or(false) {
        StudyDesign::full_grid(a.design.reps.unwrap_or(100), seed)
    } else {
        vec![design_from(&a.design, (200, 2, "between", "low", 100), seed)?]
    };
    if a.list_cells.unwrap_or(false) {
        println!("n,k,j,structure,correlation,mode,reps");
        for d in &designs {
            println!("{},{},{},{},{},{},{}", d.n, d.k, d.j, d.structure, d.correlation.label(), d.mode, d.reps);
        }
        return Ok(());
    }
    setup_threads(&a.common)?;
    let dir = out_dir(&a.common)?;
    let methods = match &a.methods {
        None => vec![Method::Gvem, Method::IwGvem],
        Some(list) => list
            .iter()
            .map(|m| match m.as_str() {
                "gvem" => Ok(Method::Gvem),
                "iw_gvem" => Ok(Method::IwGvem),
                _ => Err(CliError::Usage(format!("unknown method `{m}` (expected gvem or iw_gvem)"))),
            })
            .collect::<Result<_, _>>()?,
    };
    let mut results = Vec::with_capacity(designs.len());
    for d in &designs {
        info!("study cell n={} k={} {} {} {}", d.n, d.k, d.structure, d.correlation.label(), d.mode);
        let opts = StudyOptions {
            methods: methods.clone(),
            fit: fit_config(&a.tuning, d.mode),
            parallel_replications: !a.sequential.unwrap_or(false),
        };
        results.push(simstudy::run_study(d, &opts)?);
    }
    let timings = a.timings.unwrap_or(false);
    io::write_with(&dir.join("records.csv"), |buf| Ok(simstudy::write_records_csv(&results, buf, timings)?))?;
    io::write_json(&dir.join("summary.json"), &simstudy::summary_json(&results))?;

    let mut config = to_json(&a);
    config["designs"] = to_json(&designs);
    config["fit"] = to_json(&fit_config(&a.tuning, Mode::Confirmatory));
    RunManifest {
        command: "study".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config,
        inputs: Vec::new(),
        outputs: Vec::new(),
        started_unix: started,
        finished_unix: 0.0,
    }
    .finish(&dir, &["records.csv", "summary.json"])
}

fn cmd_elbo(flags: ElboArgs) -> Result<(), CliError> {
    let started = now_unix();
    let a: ElboArgs = merge_with_config(&flags, flags.config.as_deref())?;
    setup_threads(&a.common)?;
    let dir = out_dir(&a.common)?;
    let seed = a.common.seed.unwrap_or(DEFAULT_SEED);
    let design = design_from(&a.design, (200, 2, "within", "low", 20), seed)?;
    let m_grid = a.m_grid.clone().unwrap_or_else(|| vec![5, 10, 50, 100]);
    let n_outer = a.n_outer.unwrap_or(100);
    let table = simstudy::elbo_experiment(&design, &m_grid, n_outer)?;
    io::write_with(&dir.join("elbo.csv"), |buf| Ok(table.write_csv(buf)?))?;
    let summary = serde_json::json!({
        "m_grid": m_grid,
        "n_outer": n_outer,
        "gvem_mean": table.gvem_mean(),
        "iw_means": table.column_means(),
    });
    io::write_json(&dir.join("summary.json"), &summary)?;

    let mut config = to_json(&a);
    config["design"] = to_json(&design);
    config["m_grid"] = to_json(&m_grid);
    config["n_outer"] = to_json(&n_outer);
    RunManifest {
        command: "elbo".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config,
        inputs: Vec::new(),
        outputs: Vec::new(),
        started_unix: started,
        finished_unix: 0.0,
    }
    .finish(&dir, &["elbo.csv", "summary.json"])
}
