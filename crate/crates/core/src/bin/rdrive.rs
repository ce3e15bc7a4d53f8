//! `rdrive [--config FILE] [--state DIR] [--as GUID] [dfs COMMAND ...]`
//!
//! With a command, runs it once. Without one, reads commands from stdin.
//! The config file may also be named by `RDRIVE_CONFIG`; `--config` wins.

use rdrive::command::{self, exit, CliConfig};
use rdrive::types::Guid;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "usage: rdrive [--config FILE] [--state DIR] [--as GUID] [dfs -OPTION ARGS...]";

fn fail(msg: &str) -> ExitCode {
    eprintln!("rdrive: {msg}\n{USAGE}");
    ExitCode::from(exit::PARSE as u8)
}

fn main() -> ExitCode {
    let mut args = std::env::args().skip(1).peekable();
    let mut config_path = std::env::var_os("RDRIVE_CONFIG").map(PathBuf::from);
    let mut state: Option<PathBuf> = None;
    let mut caller: Option<String> = None;
    while let Some(a) = args.peek() {
        let slot = match a.as_str() {
            "--config" => &mut config_path,
            "--state" => &mut state,
            "--as" => {
                args.next();
                match args.next() {
                    Some(v) => caller = Some(v),
                    None => return fail("--as needs a value"),
                }
                continue;
            }
            "-h" | "--help" => {
                println!("{USAGE}");
                return ExitCode::SUCCESS;
            }
            _ => break,
        };
        args.next();
        match args.next() {
            Some(v) => *slot = Some(PathBuf::from(v)),
            None => return fail("option needs a value"),
        }
    }
    let line: Vec<String> = args.collect();

    let mut config = match &config_path {
        Some(p) => match std::fs::read_to_string(p).map_err(|e| e.to_string()).and_then(|t| {
            CliConfig::from_json(&t).map_err(|e| e.to_string())
        }) {
            Ok(c) => c,
            Err(e) => return fail(&format!("{}: {e}", p.display())),
        },
        None => CliConfig::default(),
    };
    if let Some(g) = caller {
        match Guid::new(g) {
            Ok(g) => config.caller = Some(g),
            Err(e) => return fail(&e.to_string()),
        }
    }
    let state_dir = state.or_else(|| config.state_dir.clone()).unwrap_or_else(|| PathBuf::from(".rdrive"));
    let (engine, caller) = match command::open_engine(&config, &state_dir) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("rdrive: {e}");
            return ExitCode::from(command::exit_code(&e) as u8);
        }
    };

    let run = |text: &str| -> i32 {
        let out = command::execute_line(text, &engine, &caller);
        print!("{}", out.stdout);
        eprint!("{}", out.stderr);
        if let Err(e) = engine.save(&state_dir) {
            eprintln!("rdrive: {e}");
            return exit::IO;
        }
        out.code
    };

    let code = if line.is_empty() {
        let mut last = exit::OK;
        let stdin = std::io::stdin();
        loop {
            eprint!("rdrive> ");
            let _ = std::io::stderr().flush();
            let mut text = String::new();
            match stdin.lock().read_line(&mut text) {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
            match text.trim() {
                "" => continue,
                "exit" | "quit" => break,
                t => last = run(t),
            }
        }
        last
    } else {
        run(&line.join(" "))
    };
    ExitCode::from(code as u8)
}
