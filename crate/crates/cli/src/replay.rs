use std::path::{Path, PathBuf};

use clap::Args;

use reflex_core::store::{read_events, replay, BlobStore};

use crate::{Ctx, Format};

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// Session event log (JSON lines).
    file: PathBuf,
    /// Blob directory for externalized images. Defaults to a `blobs`
    /// directory next to the log or one level up.
    #[arg(long)]
    blobs: Option<PathBuf>,
}

fn find_blobs(log: &Path) -> Option<PathBuf> {
    let parent = log.parent()?;
    [parent.join("blobs"), parent.parent()?.join("blobs")]
        .into_iter()
        .find(|p| p.is_dir())
}

pub fn run(ctx: &Ctx, args: ReplayArgs) -> Result<(), String> {
    if !args.file.exists() {
        return Err(format!("log not found: {}", args.file.display()));
    }
    let blobs = args.blobs.or_else(|| find_blobs(&args.file)).map(BlobStore::new);
    let events = read_events(&args.file, blobs.as_ref()).map_err(|e| e.to_string())?;
    let state = replay(&events).map_err(|e| e.to_string())?;
    match ctx.format {
        Format::Json => {
            let v = serde_json::to_value(&state).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string_pretty(&v).map_err(|e| e.to_string())?);
        }
        Format::Csv => {
            println!("round,prompt,chosen,question");
            for r in &state.rounds {
                println!(
                    "{},{},{},{}",
                    r.round,
                    csv_field(&r.prompt.text),
                    csv_field(&r.ambiguity.chosen),
                    csv_field(&r.question.text)
                );
            }
        }
        Format::Text => {
            println!("session  {}", state.id);
            println!("schema   {}", state.schema.name);
            println!("mode     {:?}", state.mode);
            if let Some(p) = &state.persona {
                println!("persona  {p}");
            }
            println!("events   {}", events.len());
            println!("rounds   {}", state.rounds.len());
            for r in &state.rounds {
                println!("[{}] prompt:   {}", r.round, r.prompt.text);
                if let Some(v) = r.image.toy_vector() {
                    println!("    image:    {}", v.stacked_text(&state.schema));
                }
                println!("    question: {}", r.question.text);
            }
            if state.closed {
                println!("closed");
            }
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
