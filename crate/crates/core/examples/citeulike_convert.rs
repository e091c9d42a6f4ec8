//! Converts the public CiteULike-a files into the tab-separated inputs read
//! by `vbae`.
//!
//! `cargo run --release --example citeulike_convert -- <src> <dst>`
//!
//! `src` holds `users.dat` (one line per user: a count followed by item ids),
//! `mult.dat` (one line per item: a count followed by `term:count` pairs) and
//! optionally `vocabulary.dat` (one term per line). `dst` receives
//! `interactions.tsv` and `item_tokens.tsv`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

fn lines(path: &Path) -> std::io::Result<Vec<String>> {
    BufReader::new(File::open(path)?).lines().collect()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let [src, dst] = args.as_slice() else {
        return Err("usage: citeulike_convert <src> <dst>".into());
    };
    std::fs::create_dir_all(dst)?;

    let vocab = lines(&src.join("vocabulary.dat")).ok();

    let mut out = BufWriter::new(File::create(dst.join("interactions.tsv"))?);
    let mut n = 0usize;
    for (user, line) in lines(&src.join("users.dat"))?.iter().enumerate() {
        for item in line.split_whitespace().skip(1) {
            writeln!(out, "{user}\t{item}")?;
            n += 1;
        }
    }
    out.flush()?;

    let mut out = BufWriter::new(File::create(dst.join("item_tokens.tsv"))?);
    let items = lines(&src.join("mult.dat"))?;
    for (item, line) in items.iter().enumerate() {
        for pair in line.split_whitespace().skip(1) {
            let (term, count) = pair.split_once(':').ok_or_else(|| format!("item {item}: bad pair {pair:?}"))?;
            let term = match &vocab {
                Some(v) => v.get(term.parse::<usize>()?).map(|s| s.trim()).unwrap_or(term),
                None => term,
            };
            writeln!(out, "{item}\t{term}\t{count}")?;
        }
    }
    out.flush()?;
    println!("{n} interactions, {} items", items.len());
    Ok(())
}
