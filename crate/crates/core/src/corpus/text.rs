//! Rule-based sentence splitting and tokenization over character offsets.

use std::collections::BTreeSet;
use std::ops::Range;

/// Words that end in a period without ending the sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "al", "approx", "ca", "cf", "dr", "e.g", "eq", "fig", "figs", "i.e", "inc", "jr",
    "mr", "mrs", "ms", "no", "nos", "prof", "ref", "refs", "resp", "sr", "st", "vol", "vs",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Token {
    /// Character offsets, half-open.
    pub start: usize,
    pub end: usize,
    pub text: String,
}

fn word_before(chars: &[char], dot: usize) -> String {
    let mut s = dot;
    while s > 0 && !chars[s - 1].is_whitespace() {
        s -= 1;
    }
    chars[s..dot].iter().collect::<String>().to_lowercase()
}

fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let word = word_before(chars, dot);
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    if word.chars().count() == 1 && word.chars().all(char::is_alphabetic) {
        // initials such as "J. Smith"
        return true;
    }
    ABBREVIATIONS.contains(&word)
}

/// Splits `chars` into sentence ranges.
///
/// A sentence ends after `.`, `?` or `!` followed by whitespace, unless the
/// period closes a known abbreviation, the next word starts in lowercase, or
/// the boundary would fall strictly inside a `protected` range. Every offset
/// in `hard_breaks` always ends a sentence. Returned ranges are trimmed of
/// surrounding whitespace and never empty.
pub fn split_sentences(
    chars: &[char],
    protected: &[Range<usize>],
    hard_breaks: &[usize],
) -> Vec<Range<usize>> {
    let inside_protected = |cut: usize| protected.iter().any(|r| r.start < cut && cut < r.end);
    let mut cuts: BTreeSet<usize> = hard_breaks.iter().copied().collect();
    for (i, &c) in chars.iter().enumerate() {
        if !matches!(c, '.' | '?' | '!') {
            continue;
        }
        let cut = i + 1;
        if cut < chars.len() && !chars[cut].is_whitespace() {
            continue;
        }
        let next = chars[cut..].iter().find(|c| !c.is_whitespace());
        if next.is_some_and(|c| c.is_lowercase()) {
            continue;
        }
        if c == '.' && is_abbreviation(chars, i) {
            continue;
        }
        if inside_protected(cut) {
            continue;
        }
        cuts.insert(cut);
    }
    cuts.insert(chars.len());

    let mut out = Vec::new();
    let mut start = 0;
    for cut in cuts {
        let cut = cut.min(chars.len());
        if cut <= start {
            continue;
        }
        let mut s = start;
        let mut e = cut;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push(s..e);
        }
        start = cut;
    }
    out
}

/// Tokenizes `chars[range]`: runs of alphanumerics form words, every other
/// non-space character is its own token, and a token boundary is forced at
/// each offset in `forced`.
pub fn tokenize(chars: &[char], range: Range<usize>, forced: &BTreeSet<usize>) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<usize> = None;
    let flush = |from: usize, to: usize, tokens: &mut Vec<Token>| {
        if from < to {
            tokens.push(Token {
                start: from,
                end: to,
                text: chars[from..to].iter().collect(),
            });
        }
    };
    for i in range.clone() {
        let c = chars[i];
        if forced.contains(&i) {
            if let Some(s) = current.take() {
                flush(s, i, &mut tokens);
            }
        }
        if c.is_whitespace() {
            if let Some(s) = current.take() {
                flush(s, i, &mut tokens);
            }
        } else if c.is_alphanumeric() {
            current.get_or_insert(i);
        } else {
            if let Some(s) = current.take() {
                flush(s, i, &mut tokens);
            }
            flush(i, i + 1, &mut tokens);
        }
    }
    if let Some(s) = current {
        flush(s, range.end, &mut tokens);
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    fn sentences(s: &str) -> Vec<String> {
        let c = chars(s);
        split_sentences(&c, &[], &[])
            .into_iter()
            .map(|r| c[r].iter().collect())
            .collect()
    }

    #[test]
    fn splits_on_terminal_punctuation() {
        assert_eq!(
            sentences("Cats sleep. Dogs bark! Why? Because."),
            ["Cats sleep.", "Dogs bark!", "Why?", "Because."]
        );
    }

    #[test]
    fn abbreviation_and_lowercase_guards() {
        assert_eq!(
            sentences("Seen in rats, e.g. Wistar rats. Dr. Who agreed. It was ca. five."),
            ["Seen in rats, e.g. Wistar rats.", "Dr. Who agreed.", "It was ca. five."]
        );
        assert_eq!(sentences("Values were 5 mg. per day. Next."), ["Values were 5 mg. per day.", "Next."]);
    }

    #[test]
    fn protected_range_blocks_cut() {
        let c = chars("A Bc. Cd e.");
        assert_eq!(split_sentences(&c, &[], &[]), vec![0..5, 6..11]);
        assert_eq!(split_sentences(&c, &[2..7], &[]), vec![0..11]);
    }

    #[test]
    fn hard_break_always_cuts() {
        let c = chars("Title words Abstract starts.");
        assert_eq!(split_sentences(&c, &[], &[11]), vec![0..11, 12..28]);
    }

    #[test]
    fn tokenizer_splits_punctuation_and_forced_offsets() {
        let c = chars("5-FU induced nephrotoxicity.");
        let toks = tokenize(&c, 0..c.len(), &BTreeSet::new());
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["5", "-", "FU", "induced", "nephrotoxicity", "."]);
        let forced = BTreeSet::from([19]);
        let toks = tokenize(&c, 0..c.len(), &forced);
        let texts: Vec<_> = toks.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["5", "-", "FU", "induced", "nephro", "toxicity", "."]);
        assert_eq!((toks[5].start, toks[5].end), (19, 27));
    }
}
