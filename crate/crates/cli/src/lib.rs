//! File formats, dataset manifests, run configuration and the subcommands of
//! the `fundus-ssl` tool. All algorithms live in `fundus-ssl-core`.

pub mod commands;
pub mod config;
pub mod imageio;
pub mod manifest;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Arg, ArgAction, ArgMatches};

use crate::config::RunConfig;

pub fn cli() -> clap::Command {
    let mut app = clap::Command::new("fundus-ssl")
        .about("Contrastive pre-training and segmentation of retinal images")
        .subcommand_required(true)
        .arg(
            Arg::new("out")
                .long("out")
                .global(true)
                .value_name("DIR")
                .default_value("runs")
                .help("root under which each run creates its own directory"),
        )
        .arg(
            Arg::new("jobs")
                .long("jobs")
                .global(true)
                .value_name("N")
                .value_parser(clap::value_parser!(usize))
                .help("worker threads for per-image work (default: all cores)"),
        );
    for c in commands::COMMANDS {
        let mut sub = clap::Command::new(c.name)
            .about(c.about)
            .arg(
                Arg::new("config")
                    .long("config")
                    .value_name("FILE")
                    .help("key=value config file"),
            )
            .arg(
                Arg::new("set")
                    .long("set")
                    .value_name("KEY=VALUE")
                    .action(ArgAction::Append)
                    .help("override any config key"),
            );
        for k in c.keys {
            let help = match k.default {
                Some("") => k.help.to_string(),
                Some(d) => format!("{} [default: {d}]", k.help),
                None => format!("{} [required]", k.help),
            };
            sub = sub.arg(
                Arg::new(k.key)
                    .long(k.key.replace('_', "-"))
                    .value_name("VALUE")
                    .help(help),
            );
        }
        if c.keys.iter().any(|k| k.key == "tta") {
            sub = sub.arg(
                Arg::new("no_tta")
                    .long("no-tta")
                    .action(ArgAction::SetTrue)
                    .help("disable flip TTA"),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn overrides(keys: &[config::KeySpec], m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for kv in m.get_many::<String>("set").into_iter().flatten() {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv:?}: expected KEY=VALUE"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    for k in keys {
        if let Some(v) = m.get_one::<String>(k.key) {
            out.push((k.key.to_string(), v.clone()));
        }
    }
    if m.try_get_one::<bool>("no_tta").ok().flatten() == Some(&true) {
        out.push(("tta".into(), "false".into()));
    }
    Ok(out)
}

/// Parses `args` (program name first), runs the subcommand and returns its
/// run directory.
pub fn run<I, T>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = commands::find(name).expect("registered subcommand");
    if let Some(&j) = matches.get_one::<usize>("jobs") {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let file = sub.get_one::<String>("config").map(PathBuf::from);
    let cfg = RunConfig::resolve(name, cmd.keys, file.as_deref(), &overrides(cmd.keys, sub)?)?;
    let out = PathBuf::from(matches.get_one::<String>("out").expect("has default"));
    (cmd.run)(&cfg, &out)
}
