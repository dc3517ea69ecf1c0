//! Line-oriented dialogue. Each input line is one user turn: a line with
//! `=` is read as an `aspect=value` assignment, anything else as free text.
//! `quit` or end of input stops.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use reflex_core::backends::{Backends, ToyGenerator};
use reflex_core::store::{now_ms, BlobStore, EventBody, EventLog, SessionHeader};
use reflex_core::toyworld::ToyWorldConfig;
use reflex_core::types::ImagePayload;
use reflex_core::{AspectVector, Engine, RoundRecord, SchemaRegistry, SessionMode, SessionState, UserInput};

use crate::{Ctx, Format};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Toy,
    Remote,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[arg(long, value_enum, default_value_t = Mode::Toy)]
    mode: Mode,
    #[arg(long, default_value = "default")]
    schema: String,
    /// Persona letter passed to remote backends.
    #[arg(long)]
    persona: Option<String>,
    /// Probability that the toy generator ignores a pinned aspect.
    #[arg(long, default_value_t = 0.0)]
    neglect: f64,
    /// Append the session's events to this log; images go to `blobs/` beside it.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_line(schema: &reflex_core::AspectSchema, line: &str) -> Result<UserInput, String> {
    if line.contains('=') {
        AspectVector::parse_assignment(schema, line)
            .map(UserInput::Assignment)
            .map_err(|e| e.to_string())
    } else {
        Ok(UserInput::Text(line.to_string()))
    }
}

fn show(state: &SessionState, r: &RoundRecord, format: Format) -> Result<(), String> {
    match format {
        Format::Json => println!("{}", serde_json::to_string(r).map_err(|e| e.to_string())?),
        Format::Csv => println!("{},{},{},{}", r.round, r.prompt.text.replace(',', ";"), r.ambiguity.chosen, r.question.text),
        Format::Text => {
            println!("[round {}] prompt: {}", r.round, r.prompt.text);
            match &r.image.payload {
                ImagePayload::Toy { vector } => println!("  image:    {}", vector.stacked_text(&state.schema)),
                ImagePayload::Bytes { media_type, data } => println!("  image:    {} bytes of {media_type}", data.len()),
            }
            for (aspect, caption) in &r.captions.captions {
                println!("  {aspect:<12} {caption}");
            }
            println!("  agent: {}", r.question.text);
        }
    }
    Ok(())
}

pub fn run(ctx: &Ctx, args: ChatArgs) -> Result<(), String> {
    let registry = SchemaRegistry::default();
    let schema = registry.get(&args.schema).map_err(|e| e.to_string())?.clone();
    if !(0.0..=1.0).contains(&args.neglect) {
        return Err(format!("--neglect must be in [0, 1], got {}", args.neglect));
    }
    let mut state = SessionState::new(format!("chat-{:016x}", ctx.seed), schema.clone(), ctx.seed);
    state.persona = args.persona.clone();
    let backends = match args.mode {
        Mode::Toy => Backends::toy(ToyGenerator::new(ToyWorldConfig::new(schema.clone()).with_neglect(args.neglect))),
        Mode::Remote => {
            state.mode = SessionMode::Remote;
            let mut cfg = ctx.backend_config()?;
            cfg.persona = args.persona.clone();
            Backends::remote(&cfg).map_err(|e| e.to_string())?
        }
    };
    let engine = Engine::new(backends);

    let mut log = match &args.log {
        Some(path) => {
            let blobs = path.parent().map(|p| BlobStore::new(p.join("blobs")));
            let mut log = EventLog::open(path, state.id.clone(), blobs).map_err(|e| e.to_string())?;
            if log.last_seq() > 0 {
                return Err(format!("{} already holds a session", path.display()));
            }
            log.record(EventBody::SessionCreated(SessionHeader::of(&state)), now_ms())
                .map_err(|e| e.to_string())?;
            Some(log)
        }
        None => None,
    };

    let interactive = ctx.format == Format::Text;
    if interactive {
        let names: Vec<&str> = schema.aspects.iter().map(String::as_str).collect();
        eprintln!("aspects: {}  (type `quit` to stop)", names.join(", "));
    }
    let stdin = std::io::stdin();
    let mut failed = false;
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            eprint!("> ");
            std::io::stderr().flush().ok();
        }
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| e.to_string())?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "quit" || line == "exit" {
            break;
        }
        let input = match parse_line(&schema, line) {
            Ok(input) => input,
            Err(e) => {
                eprintln!("error: {e}");
                failed = true;
                continue;
            }
        };
        match engine.run_round(&state, input) {
            Ok(outcome) => {
                if let Some(log) = log.as_mut() {
                    log.record_all(outcome.events, now_ms()).map_err(|e| e.to_string())?;
                }
                show(&outcome.state, &outcome.record, ctx.format)?;
                state = outcome.state;
            }
            Err(e) => {
                eprintln!("error: {e}");
                failed = true;
            }
        }
    }
    if failed {
        Err("one or more turns failed".into())
    } else {
        Ok(())
    }
}
