use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches, Command};

use patchvlad::commands::{
    build_index_command, eval_command, finetune_command, query_command, render_result, selftest, weigh_command,
    EvalOptions, FinetuneOutputs,
};
use patchvlad::config::{RunConfig, FIELDS};

fn path_arg(name: &'static str, help: &'static str, required: bool) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(clap::value_parser!(PathBuf))
        .required(required)
        .help(help)
}

fn flag(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue).help(help)
}

fn cli() -> Command {
    let defaults = RunConfig::default();
    let mut cmd = Command::new("patchvlad")
        .about("Patch-level VLAD place recognition")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value run configuration; flags below override it"),
        );
    for (key, help) in FIELDS {
        let value = defaults.get(key).unwrap_or_default();
        cmd = cmd.arg(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .global(true)
                .value_name("VALUE")
                .help_heading("Configuration")
                .help(format!("{help} [default: {value}]")),
        );
    }
    cmd.subcommand(
        Command::new("build-index")
            .about("Describe the database split of a manifest and write an index")
            .arg(path_arg("manifest", "dataset manifest", true))
            .arg(path_arg("out", "index file to write", true))
            .arg(path_arg("params", "VLAD parameters; initialized by k-means when absent", false)),
    )
    .subcommand(
        Command::new("finetune")
            .about("Mine keypoint-verified triplets and fine-tune the VLAD parameters")
            .arg(path_arg("manifest", "dataset manifest with keypoint files", true))
            .arg(path_arg("out", "parameter file to write", true))
            .arg(path_arg("params", "starting parameters; initialized by k-means when absent", false))
            .arg(path_arg("trace", "write the mean loss of every epoch, one per line", false))
            .arg(path_arg("triplets", "write the mined triplets", false)),
    )
    .subcommand(
        Command::new("weigh")
            .about("Recompute the rarity weights of an index")
            .arg(path_arg("index", "index to read", true))
            .arg(path_arg("out", "index to write", true))
            .arg(path_arg("dump", "write every patch weight, one per line", false)),
    )
    .subcommand(
        Command::new("query")
            .about("Rank database images for one query feature file")
            .arg(path_arg("index", "index file", true))
            .arg(path_arg("features", "query feature map", true))
            .arg(flag("unweighted", "match on raw patch distances"))
            .arg(
                Arg::new("top")
                    .long("top")
                    .value_name("N")
                    .value_parser(clap::value_parser!(usize))
                    .default_value("10")
                    .help("results to print"),
            ),
    )
    .subcommand(
        Command::new("eval")
            .about("Recall@1/5/10 of the query split of a manifest")
            .arg(path_arg("index", "index file", true))
            .arg(path_arg("manifest", "manifest holding the queries", true))
            .arg(flag("unweighted", "match on raw patch distances"))
            .arg(flag("no-finetune", "rebuild the index with freshly initialized parameters"))
            .arg(path_arg("per-query", "write the top ten of every query", false)),
    )
    .subcommand(
        Command::new("selftest")
            .about("End-to-end check on a small synthetic dataset")
            .arg(path_arg("dir", "working directory; a temporary one when absent", false)),
    )
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for (key, _) in FIELDS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn path<'a>(m: &'a ArgMatches, name: &str) -> Option<&'a Path> {
    m.get_one::<PathBuf>(name).map(PathBuf::as_path)
}

fn required<'a>(m: &'a ArgMatches, name: &str) -> &'a Path {
    path(m, name).expect("clap enforces required arguments")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let cfg = match run_config(sub) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    };
    match name {
        "build-index" => {
            let report = build_index_command(required(sub, "manifest"), path(sub, "params"), required(sub, "out"), &cfg)?;
            println!("{report}");
        }
        "finetune" => {
            let out = FinetuneOutputs {
                params: required(sub, "out"),
                trace: path(sub, "trace"),
                triplets: path(sub, "triplets"),
            };
            let report = finetune_command(required(sub, "manifest"), path(sub, "params"), &out, &cfg)?;
            println!("{report}");
        }
        "weigh" => {
            let report = weigh_command(required(sub, "index"), required(sub, "out"), path(sub, "dump"), &cfg)?;
            println!("{report}");
        }
        "query" => {
            let result = query_command(required(sub, "index"), required(sub, "features"), !sub.get_flag("unweighted"), &cfg)?;
            print!("{}", render_result(&result, *sub.get_one::<usize>("top").unwrap_or(&10)));
        }
        "eval" => {
            let opts = EvalOptions {
                unweighted: sub.get_flag("unweighted"),
                no_finetune: sub.get_flag("no-finetune"),
            };
            let report = eval_command(required(sub, "index"), required(sub, "manifest"), opts, path(sub, "per-query"), &cfg)?;
            println!("queries {}", report.queries);
            print!("{}", report.recall.render());
        }
        "selftest" => {
            let tmp;
            let dir = match path(sub, "dir") {
                Some(d) => {
                    std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
                    d.to_path_buf()
                }
                None => {
                    tmp = tempfile::tempdir()?;
                    tmp.path().to_path_buf()
                }
            };
            for line in selftest(&dir)? {
                println!("{line}");
            }
            println!("selftest passed");
        }
        other => unreachable!("unknown subcommand {other}"),
    }
    Ok(())
}
