//! Interactive inspection loop: every entered line becomes the next user
//! sub-turn of one running turn and the decision for the history so far is
//! printed with both simulated futures.

use std::io::{BufRead, Write};

use ptd_core::corpus::{strip_punctuation, tokenize, Action, Speaker, Utterance};

use crate::error::{Error, Result};
use crate::pipeline::Models;

const RESET: &str = ":reset";
const QUIT: &str = ":quit";

fn paint(text: &str, code: &str, color: bool) -> String {
    if color {
        format!("\x1b[{code}m{text}\x1b[0m")
    } else {
        text.to_string()
    }
}

/// Runs until `:quit` or end of input.
pub fn run<R: BufRead, W: Write>(models: &Models, input: R, mut out: W, color: bool) -> Result<()> {
    let write_err = |source| Error::Write {
        path: "<stdout>".into(),
        source,
    };
    let mut history: Vec<Utterance> = Vec::new();
    write!(out, "> ").and_then(|_| out.flush()).map_err(write_err)?;
    for line in input.lines() {
        let line = line.map_err(|source| Error::Read {
            path: "<stdin>".into(),
            source,
        })?;
        match line.trim() {
            QUIT => return Ok(()),
            RESET => {
                history.clear();
                writeln!(out, "history cleared").map_err(write_err)?;
            }
            text => {
                let tokens = strip_punctuation(&tokenize(text));
                if !tokens.is_empty() {
                    let sub = history.len() as u32;
                    history.push(Utterance::new(tokens, 1, sub, Speaker::User));
                    let d = models.infer(&history)?;
                    let label = match d.label {
                        Action::Wait => paint("WAIT", "33;1", color),
                        Action::Answer => paint("ANSWER", "32;1", color),
                    };
                    writeln!(out, "{label}  p_answer={:.3}", d.p_answer).map_err(write_err)?;
                    writeln!(out, "  user next:  {}", d.r_u.join(" ")).map_err(write_err)?;
                    writeln!(out, "  agent next: {}", d.r_a.join(" ")).map_err(write_err)?;
                }
            }
        }
        write!(out, "> ").and_then(|_| out.flush()).map_err(write_err)?;
    }
    Ok(())
}
