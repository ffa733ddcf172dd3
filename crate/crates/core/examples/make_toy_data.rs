//! Writes a synthetic question CSV, its vocabulary and a small pretraining
//! corpus into a directory (default `toy/`).
//!
//! cargo run --example make_toy_data -- toy 2000

use std::fs;
use std::path::PathBuf;

use insincere::data::{synthetic_corpus_text, synthetic_questions, write_dataset};

fn main() -> insincere::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let n: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(2000);
    fs::create_dir_all(&dir)?;

    let (examples, vocab) = synthetic_questions(n, 0.1, 42)?;
    write_dataset(dir.join("train.csv"), &examples)?;
    fs::write(dir.join("vocab.txt"), vocab.to_text())?;
    fs::write(dir.join("corpus.txt"), synthetic_corpus_text(200, 4, 42)?)?;
    println!("wrote {} questions and a {}-token vocabulary to {}", examples.len(), vocab.len(), dir.display());
    Ok(())
}
