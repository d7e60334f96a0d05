use proptest::prelude::*;
use simt::corpus_io::{
    format_alignment, load_corpus, load_corpus_with, parse_alignment, read_sentences, read_vocab, write_sentences,
    write_split, write_vocab, SplitPaths,
};
use simt_core::data::{generate_synthetic, SynthSpec};
use simt_core::AlignmentSet;

fn spec() -> SynthSpec {
    SynthSpec {
        vocab_size: 16,
        length_range: (3, 9),
        corpus_size: 60,
        swap_prob: 0.3,
        long_range_prob: 0.5,
        seed: 11,
    }
}

#[test]
fn synthetic_split_survives_the_text_format() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = generate_synthetic(&spec()).unwrap();
    let paths = SplitPaths::new(dir.path(), "train");
    write_split(&corpus, &paths).unwrap();
    let vs = dir.path().join("vocab.src");
    let vt = dir.path().join("vocab.tgt");
    write_vocab(&vs, &corpus.vocab_src).unwrap();
    write_vocab(&vt, &corpus.vocab_tgt).unwrap();
    let (vs, vt) = (read_vocab(&vs).unwrap(), read_vocab(&vt).unwrap());
    assert_eq!(vs, corpus.vocab_src);
    assert_eq!(vt, corpus.vocab_tgt);
    let back = load_corpus_with(&paths.src, &paths.tgt, Some(&paths.align), &vs, &vt).unwrap();
    assert_eq!(back.samples, corpus.samples);

    let tgt: Vec<_> = corpus.samples.iter().map(|s| s.target.clone()).collect();
    let file = dir.path().join("refs.txt");
    write_sentences(&file, &tgt, &vt).unwrap();
    assert_eq!(read_sentences(&file, &vt).unwrap(), tgt);
}

#[test]
fn observed_vocabulary_and_unknown_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let (src, tgt) = (dir.path().join("a.src"), dir.path().join("a.tgt"));
    std::fs::write(&src, "ich sehe\nich gehe\n").unwrap();
    std::fs::write(&tgt, "i see\ni go\n").unwrap();
    let c = load_corpus(&src, &tgt, None).unwrap();
    assert_eq!(c.vocab_src.decode(&c.samples[1].source), "ich gehe");
    assert!(c.samples.iter().all(|s| s.alignment.is_none()));

    std::fs::write(&src, "ich laufe\n").unwrap();
    std::fs::write(&tgt, "i run\n").unwrap();
    let d = load_corpus_with(&src, &tgt, None, &c.vocab_src, &c.vocab_tgt).unwrap();
    assert_eq!(c.vocab_src.decode(&d.samples[0].source), "ich <unk>");
}

#[test]
fn malformed_inputs_name_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("s"), "a b\nc d\n").unwrap();
    std::fs::write(p("t"), "x y\nz w\n").unwrap();
    std::fs::write(p("al"), "0-0 1-1\n0-0 7-1\n").unwrap();
    let e = load_corpus(&p("s"), &p("t"), Some(&p("al"))).unwrap_err();
    let msg = e.to_string();
    assert!(msg.contains("al") && msg.contains(":2") && msg.contains("7-1"), "{msg}");

    std::fs::write(p("t"), "x y\n").unwrap();
    let msg = load_corpus(&p("s"), &p("t"), None).unwrap_err().to_string();
    assert!(msg.contains("line count mismatch"), "{msg}");

    std::fs::write(p("t"), "x y\n\n").unwrap();
    let msg = load_corpus(&p("s"), &p("t"), None).unwrap_err().to_string();
    assert!(msg.contains("empty sentence"), "{msg}");

    let e = load_corpus(&p("absent"), &p("t"), None).unwrap_err();
    assert_eq!(e.exit_code(), 3);
}

proptest! {
    #[test]
    fn pharaoh_lines_round_trip(
        (j, i, pairs) in (1usize..12, 1usize..12).prop_flat_map(|(j, i)| {
            (Just(j), Just(i), proptest::collection::vec((1..=j, 1..=i), 0..20))
        })
    ) {
        let h = AlignmentSet::from_pairs(pairs.iter().copied(), j, i).unwrap();
        let line = format_alignment(&h);
        prop_assert_eq!(parse_alignment(&line, j, i).unwrap(), h.clone());
        // On disk the pairs are 0-indexed.
        for tok in line.split_whitespace() {
            let (a, b) = tok.split_once('-').unwrap();
            let (a, b): (usize, usize) = (a.parse().unwrap(), b.parse().unwrap());
            prop_assert!(h.contains(a + 1, b + 1));
        }
    }
}
