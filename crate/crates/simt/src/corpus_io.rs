//! Plain-text corpora, Pharaoh alignments and vocabulary files.
//!
//! Sentences are one per line with space-separated tokens. Alignment lines
//! hold space-separated `j-i` pairs, 0-indexed on disk and 1-indexed in
//! memory; an empty line is an empty alignment.

use std::fs;
use std::path::{Path, PathBuf};

use simt_core::data::Corpus;
use simt_core::{AlignmentSet, ParallelSample, TokenSeq, Vocabulary};

use crate::error::{Error, Result};
use crate::files::write_text;

fn read_lines(path: &Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses one Pharaoh line against the sentence lengths.
pub fn parse_alignment(line: &str, source_len: usize, target_len: usize) -> std::result::Result<AlignmentSet, String> {
    let mut h = AlignmentSet::new();
    for pair in line.split_whitespace() {
        let (j, i) = pair
            .split_once('-')
            .ok_or_else(|| format!("malformed alignment pair `{pair}`"))?;
        let j: usize = j.parse().map_err(|_| format!("malformed alignment pair `{pair}`"))?;
        let i: usize = i.parse().map_err(|_| format!("malformed alignment pair `{pair}`"))?;
        if j >= source_len || i >= target_len {
            return Err(format!(
                "alignment pair `{pair}` out of range for lengths {source_len}x{target_len}"
            ));
        }
        h.insert(j + 1, i + 1);
    }
    Ok(h)
}

/// Formats an alignment as 0-indexed `j-i` pairs.
pub fn format_alignment(h: &AlignmentSet) -> String {
    h.iter()
        .map(|(j, i)| format!("{}-{}", j - 1, i - 1))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Reads a parallel corpus; vocabularies are built from the observed tokens
/// in order of first appearance.
pub fn load_corpus(src: &Path, tgt: &Path, align: Option<&Path>) -> Result<Corpus> {
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    let vocab_src = Vocabulary::new(src_lines.iter().flat_map(|l| l.split_whitespace()));
    let vocab_tgt = Vocabulary::new(tgt_lines.iter().flat_map(|l| l.split_whitespace()));
    build(src, tgt, align, src_lines, tgt_lines, vocab_src, vocab_tgt)
}

/// Reads a parallel corpus with fixed vocabularies (unknown tokens map to UNK).
pub fn load_corpus_with(
    src: &Path,
    tgt: &Path,
    align: Option<&Path>,
    vocab_src: &Vocabulary,
    vocab_tgt: &Vocabulary,
) -> Result<Corpus> {
    let src_lines = read_lines(src)?;
    let tgt_lines = read_lines(tgt)?;
    build(
        src,
        tgt,
        align,
        src_lines,
        tgt_lines,
        vocab_src.clone(),
        vocab_tgt.clone(),
    )
}

fn build(
    src: &Path,
    tgt: &Path,
    align: Option<&Path>,
    src_lines: Vec<String>,
    tgt_lines: Vec<String>,
    vocab_src: Vocabulary,
    vocab_tgt: Vocabulary,
) -> Result<Corpus> {
    if src_lines.len() != tgt_lines.len() {
        return Err(format_err(
            tgt,
            tgt_lines.len().min(src_lines.len()) + 1,
            format!(
                "line count mismatch: {} source vs {} target lines",
                src_lines.len(),
                tgt_lines.len()
            ),
        ));
    }
    let align_lines = match align {
        Some(p) => {
            let lines = read_lines(p)?;
            if lines.len() != src_lines.len() {
                return Err(format_err(
                    p,
                    lines.len().min(src_lines.len()) + 1,
                    format!(
                        "line count mismatch: {} alignment vs {} sentence lines",
                        lines.len(),
                        src_lines.len()
                    ),
                ));
            }
            Some((p, lines))
        }
        None => None,
    };
    let mut samples = Vec::with_capacity(src_lines.len());
    for (n, (s, t)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let line = n + 1;
        let source = vocab_src.encode(s);
        let target = vocab_tgt.encode(t);
        if source.is_empty() {
            return Err(format_err(src, line, "empty sentence"));
        }
        if target.is_empty() {
            return Err(format_err(tgt, line, "empty sentence"));
        }
        let alignment = match &align_lines {
            Some((p, lines)) => {
                Some(parse_alignment(&lines[n], source.len(), target.len()).map_err(|m| format_err(p, line, m))?)
            }
            None => None,
        };
        samples.push(ParallelSample::new(source, target, alignment)?);
    }
    Ok(Corpus {
        samples,
        vocab_src,
        vocab_tgt,
    })
}

/// Paths of one split written by [`write_split`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPaths {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub align: PathBuf,
}

impl SplitPaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        SplitPaths {
            src: dir.join(format!("{name}.src")),
            tgt: dir.join(format!("{name}.tgt")),
            align: dir.join(format!("{name}.align")),
        }
    }

    pub fn all(&self) -> [&Path; 3] {
        [&self.src, &self.tgt, &self.align]
    }
}

/// Writes a split; samples without alignments get an empty alignment line.
pub fn write_split(corpus: &Corpus, paths: &SplitPaths) -> Result<()> {
    let mut src = String::new();
    let mut tgt = String::new();
    let mut align = String::new();
    for s in &corpus.samples {
        src.push_str(&corpus.vocab_src.decode(&s.source));
        src.push('\n');
        tgt.push_str(&corpus.vocab_tgt.decode(&s.target));
        tgt.push('\n');
        if let Some(h) = &s.alignment {
            align.push_str(&format_alignment(h));
        }
        align.push('\n');
    }
    write_text(&paths.src, &src)?;
    write_text(&paths.tgt, &tgt)?;
    write_text(&paths.align, &align)
}

/// Content tokens one per line (reserved tokens are implied).
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for tok in &vocab.tokens()[Vocabulary::NUM_RESERVED..] {
        text.push_str(tok);
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let lines = read_lines(path)?;
    for (n, l) in lines.iter().enumerate() {
        if l.is_empty() || l.contains(char::is_whitespace) {
            return Err(format_err(path, n + 1, "vocabulary lines must hold exactly one token"));
        }
    }
    Ok(Vocabulary::new(lines))
}

/// One sentence per line.
pub fn write_sentences(path: &Path, seqs: &[TokenSeq], vocab: &Vocabulary) -> Result<()> {
    let mut text = String::new();
    for s in seqs {
        text.push_str(&vocab.decode(s));
        text.push('\n');
    }
    write_text(path, &text)
}

pub fn read_sentences(path: &Path, vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    Ok(read_lines(path)?.iter().map(|l| vocab.encode(l)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pharaoh_round_trip() {
        let h = parse_alignment("1-0 0-1", 2, 2).unwrap();
        assert!(h.contains(2, 1) && h.contains(1, 2) && h.len() == 2);
        assert_eq!(format_alignment(&h), "0-1 1-0");
        assert!(parse_alignment("5-0", 2, 2).is_err());
        assert!(parse_alignment("0:1", 2, 2).is_err());
        assert!(parse_alignment("", 2, 2).unwrap().is_empty());
    }
}
