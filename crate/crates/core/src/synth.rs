//! Synthetic scene grammar: vocabularies, prompt interpretation, rendering,
//! the alignment oracle and the line-delimited dataset files.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const NUM_COLORS: usize = 8;
pub const PROMPT_VOCAB: usize = 24;
pub const PROMPT_LEN: usize = 4;
pub const LR_SIDE: usize = 4;
pub const HR_SIDE: usize = 8;
pub const LR_CELLS: usize = LR_SIDE * LR_SIDE;
pub const HR_CELLS: usize = HR_SIDE * HR_SIDE;
pub const FORMAT_VERSION: u32 = 1;

pub const COLOR_NAMES: [&str; NUM_COLORS] = ["red", "orange", "yellow", "green", "blue", "purple", "black", "white"];
pub const WHITE: u8 = 7;

/// Prompt word ids. Dense, starting at 0, fixed forever: the frozen text table
/// and the vocabulary hash in every file depend on them.
pub mod words {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    /// Color words occupy `COLOR_BASE..COLOR_BASE + 8`, in image-token order.
    pub const COLOR_BASE: u32 = 2;
    pub const WARM: u32 = 10;
    pub const COOL: u32 = 11;
    pub const ANY: u32 = 12;
    pub const SOLID: u32 = 13;
    pub const STRIPES: u32 = 14;
    pub const CHECKER: u32 = 15;
    pub const FILLER_BASE: u32 = 16;
}

pub const PROMPT_WORDS: [&str; PROMPT_VOCAB] = [
    "<pad>", "<bos>", "red", "orange", "yellow", "green", "blue", "purple", "black", "white", "warm", "cool", "any",
    "solid", "stripes", "checker", "a", "the", "image", "of", "with", "in", "scene", "pattern",
];

/// Stable digest of both vocabularies, written into every data file header.
pub fn vocab_hash() -> String {
    let mut h = Sha256::new();
    for (i, w) in PROMPT_WORDS.iter().enumerate() {
        h.update(format!("prompt:{i}:{w}\n"));
    }
    for (i, w) in COLOR_NAMES.iter().enumerate() {
        h.update(format!("image:{i}:{w}\n"));
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Solid, Pattern::Stripes, Pattern::Checker];

    pub fn word(self) -> u32 {
        match self {
            Pattern::Solid => words::SOLID,
            Pattern::Stripes => words::STRIPES,
            Pattern::Checker => words::CHECKER,
        }
    }

    fn from_word(w: u32) -> Option<Self> {
        match w {
            words::SOLID => Some(Pattern::Solid),
            words::STRIPES => Some(Pattern::Stripes),
            words::CHECKER => Some(Pattern::Checker),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "stripes",
            Pattern::Checker => "checker",
        }
    }
}

/// Which concrete colors a color-or-class word admits.
pub fn admissible_colors(word: u32) -> Option<Vec<u8>> {
    match word {
        w if (words::COLOR_BASE..words::COLOR_BASE + NUM_COLORS as u32).contains(&w) => {
            Some(vec![(w - words::COLOR_BASE) as u8])
        }
        words::WARM => Some(vec![0, 1, 2]),
        words::COOL => Some(vec![3, 4, 5]),
        words::ANY => Some((0..NUM_COLORS as u8).collect()),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interpretation {
    pub color: u8,
    pub pattern: Pattern,
}

impl fmt::Display for Interpretation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", COLOR_NAMES[self.color as usize], self.pattern.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSpec {
    pub tokens: [u32; PROMPT_LEN],
    pub color_class: Vec<u8>,
    pub pattern: Pattern,
    pub interpretations: Vec<Interpretation>,
}

impl PromptSpec {
    pub fn from_tokens(tokens: [u32; PROMPT_LEN]) -> Result<Self> {
        let interpretations = enumerate_interpretations(&tokens)?;
        let color_class = interpretations.iter().map(|i| i.color).collect();
        Ok(Self { tokens, color_class, pattern: interpretations[0].pattern, interpretations })
    }

    pub fn new(color_word: u32, pattern: Pattern) -> Result<Self> {
        Self::from_tokens([words::BOS, color_word, pattern.word(), words::PAD])
    }

    /// Parses `"<color|warm|cool|any> <solid|stripes|checker>"`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        if parts.len() != 2 {
            return Err(Error::Invalid(format!("prompt {text:?} must be two words: <color-or-class> <pattern>")));
        }
        let lookup = |w: &str, pos: usize| {
            PROMPT_WORDS
                .iter()
                .position(|&p| p == w)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Prompt { position: pos, reason: format!("unknown word {w:?}") })
        };
        Self::from_tokens([words::BOS, lookup(parts[0], 1)?, lookup(parts[1], 2)?, words::PAD])
    }

    pub fn is_ambiguous(&self) -> bool {
        self.interpretations.len() >= 2
    }

    pub fn text(&self) -> String {
        format!("{} {}", PROMPT_WORDS[self.tokens[1] as usize], self.pattern.name())
    }
}

/// One interpretation per admissible color, sorted by color id.
pub fn enumerate_interpretations(tokens: &[u32]) -> Result<Vec<Interpretation>> {
    if tokens.len() != PROMPT_LEN {
        return Err(Error::Prompt {
            position: tokens.len().min(PROMPT_LEN),
            reason: format!("expected {PROMPT_LEN} tokens, got {}", tokens.len()),
        });
    }
    if let Some((pos, &t)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= PROMPT_VOCAB) {
        return Err(Error::Prompt { position: pos, reason: format!("token id {t} outside the prompt vocabulary") });
    }
    if tokens[0] != words::BOS {
        return Err(Error::Prompt { position: 0, reason: "expected <bos>".into() });
    }
    let colors = admissible_colors(tokens[1]).ok_or_else(|| Error::Prompt {
        position: 1,
        reason: format!("{:?} is not a color or class word", PROMPT_WORDS[tokens[1] as usize]),
    })?;
    let pattern = Pattern::from_word(tokens[2]).ok_or_else(|| Error::Prompt {
        position: 2,
        reason: format!("{:?} is not a pattern word", PROMPT_WORDS[tokens[2] as usize]),
    })?;
    if tokens[3] != words::PAD {
        return Err(Error::Prompt { position: 3, reason: "expected <pad>".into() });
    }
    Ok(colors.into_iter().map(|color| Interpretation { color, pattern }).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Resolution {
    Low,
    High,
}

impl Resolution {
    pub fn side(self) -> usize {
        match self {
            Resolution::Low => LR_SIDE,
            Resolution::High => HR_SIDE,
        }
    }

    pub fn cells(self) -> usize {
        self.side() * self.side()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    resolution: Resolution,
    cells: Vec<u8>,
}

impl TokenGrid {
    pub fn new(resolution: Resolution, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != resolution.cells() {
            return Err(Error::shape(format!("{resolution:?} grid"), resolution.cells(), cells.len()));
        }
        if let Some(c) = cells.iter().find(|&&c| c as usize >= NUM_COLORS) {
            return Err(Error::Invalid(format!("image token {c} outside [0, 7]")));
        }
        Ok(Self { resolution, cells })
    }

    pub fn filled(resolution: Resolution, token: u8) -> Self {
        Self { resolution, cells: vec![token; resolution.cells()] }
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn at(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.resolution.side() + col]
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.cells.iter().map(|&c| c as usize).collect()
    }
}

impl fmt::Display for TokenGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = self.resolution.side();
        for r in 0..side {
            let row: Vec<String> = (0..side).map(|c| self.at(r, c).to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

pub fn render_scene(interp: Interpretation) -> TokenGrid {
    let mut cells = Vec::with_capacity(HR_CELLS);
    for r in 0..HR_SIDE {
        for c in 0..HR_SIDE {
            let colored = match interp.pattern {
                Pattern::Solid => true,
                Pattern::Stripes => r % 2 == 0,
                Pattern::Checker => (r + c) % 2 == 0,
            };
            cells.push(if colored { interp.color } else { WHITE });
        }
    }
    TokenGrid { resolution: Resolution::High, cells }
}

/// Majority token of each 2×2 block; ties go to the lowest token id.
pub fn downsample_lr(hr: &TokenGrid) -> Result<TokenGrid> {
    if hr.resolution != Resolution::High {
        return Err(Error::shape("downsample input", "8x8 grid", "4x4 grid"));
    }
    let mut cells = Vec::with_capacity(LR_CELLS);
    for r in 0..LR_SIDE {
        for c in 0..LR_SIDE {
            let mut counts = [0u8; NUM_COLORS];
            for dr in 0..2 {
                for dc in 0..2 {
                    counts[hr.at(2 * r + dr, 2 * c + dc) as usize] += 1;
                }
            }
            let mut best = 0;
            for t in 1..NUM_COLORS {
                if counts[t] > counts[best] {
                    best = t;
                }
            }
            cells.push(best as u8);
        }
    }
    Ok(TokenGrid { resolution: Resolution::Low, cells })
}

/// Fraction of the 64 cells that agree with the rendering of `interp`.
pub fn match_fraction(hr: &TokenGrid, interp: Interpretation) -> f64 {
    let target = render_scene(interp);
    let hits = hr.cells.iter().zip(&target.cells).filter(|(a, b)| a == b).count();
    hits as f64 / HR_CELLS as f64
}

/// Alignment oracle: best cell-match fraction over the prompt's valid
/// interpretations.
pub fn oracle_score(hr: &TokenGrid, prompt: &PromptSpec) -> f64 {
    prompt.interpretations.iter().map(|&i| match_fraction(hr, i)).fold(0.0, f64::max)
}

/// A training/evaluation example in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub prompt: PromptSpec,
    pub interpretation: Interpretation,
    pub lr: TokenGrid,
    pub hr: TokenGrid,
}

impl Example {
    pub fn from_interpretation(prompt: PromptSpec, interpretation: Interpretation) -> Self {
        let hr = render_scene(interpretation);
        let lr = downsample_lr(&hr).expect("rendered grids are 8x8");
        Self { prompt, interpretation, lr, hr }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub format_version: u32,
    pub vocab_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub prompt: [u32; PROMPT_LEN],
    pub lr: Vec<u8>,
    pub hr: Vec<u8>,
    pub interpretation: Interpretation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interpretations: Option<Vec<Interpretation>>,
}

impl Record {
    fn from_example(ex: &Example, with_interpretations: bool) -> Self {
        Self {
            prompt: ex.prompt.tokens,
            lr: ex.lr.cells.clone(),
            hr: ex.hr.cells.clone(),
            interpretation: ex.interpretation,
            interpretations: with_interpretations.then(|| ex.prompt.interpretations.clone()),
        }
    }

    pub fn to_example(&self) -> Result<Example> {
        let prompt = PromptSpec::from_tokens(self.prompt)?;
        if let Some(list) = &self.interpretations {
            if *list != prompt.interpretations {
                return Err(Error::Invalid("interpretation list disagrees with the prompt".into()));
            }
        }
        Ok(Example {
            prompt,
            interpretation: self.interpretation,
            lr: TokenGrid::new(Resolution::Low, self.lr.clone())?,
            hr: TokenGrid::new(Resolution::High, self.hr.clone())?,
        })
    }
}

fn record_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ domain);
    rng.set_stream(index);
    rng
}

const DATASET_DOMAIN: u64 = 0;
const BENCHMARK_DOMAIN: u64 = 0x5eed_ba5e_0000_0000;

fn class_prompt<R: Rng>(rng: &mut R) -> PromptSpec {
    let class = [words::WARM, words::COOL, words::ANY][rng.random_range(0..3)];
    let pattern = Pattern::ALL[rng.random_range(0..3)];
    PromptSpec::new(class, pattern).expect("grammar words are valid")
}

fn sample_record(seed: u64, domain: u64, index: u64, ambiguous: impl FnOnce(&mut ChaCha8Rng) -> bool) -> Example {
    let mut rng = record_rng(seed, domain, index);
    let prompt = if ambiguous(&mut rng) {
        class_prompt(&mut rng)
    } else {
        let color = rng.random_range(0..NUM_COLORS as u32);
        let pattern = Pattern::ALL[rng.random_range(0..3)];
        PromptSpec::new(words::COLOR_BASE + color, pattern).expect("grammar words are valid")
    };
    let interp = prompt.interpretations[rng.random_range(0..prompt.interpretations.len())];
    Example::from_interpretation(prompt, interp)
}

/// `n` examples; record `i` is a pure function of `(seed, i, ambiguous_fraction)`.
pub fn generate_dataset(n: usize, seed: u64, ambiguous_fraction: f64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&ambiguous_fraction) {
        return Err(Error::Invalid(format!("ambiguous_fraction {ambiguous_fraction} outside [0, 1]")));
    }
    Ok((0..n as u64)
        .map(|i| sample_record(seed, DATASET_DOMAIN, i, |rng| rng.random::<f64>() < ambiguous_fraction))
        .collect())
}

pub const DEFAULT_BENCHMARK_SIZE: usize = 200;

/// `n` prompts built from class words, each with at least two interpretations.
pub fn generate_ambiguous_benchmark(n: usize, seed: u64) -> Result<Vec<Example>> {
    if n == 0 {
        return Err(Error::Invalid("benchmark size must be at least 1".into()));
    }
    Ok((0..n as u64).map(|i| sample_record(seed, BENCHMARK_DOMAIN, i, |_| true)).collect())
}

/// Writes the header line followed by one JSON record per line.
pub fn write_records(path: &Path, examples: &[Example], with_interpretations: bool) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = FileHeader { format_version: FORMAT_VERSION, vocab_hash: vocab_hash() };
    let io = |e| Error::io(path, e);
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(io)?;
    for ex in examples {
        let rec = Record::from_example(ex, with_interpretations);
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let parse_err = |line: usize, reason: String| Error::Parse { path: path.to_path_buf(), line, reason };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i + 1;
        if i == 0 {
            let header: FileHeader =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("bad header: {e}")))?;
            if header.format_version != FORMAT_VERSION {
                return Err(parse_err(lineno, format!("unsupported format_version {}", header.format_version)));
            }
            if header.vocab_hash != vocab_hash() {
                return Err(parse_err(lineno, "vocabulary hash mismatch".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        out.push(rec.to_example().map_err(|e| parse_err(lineno, e.to_string()))?);
    }
    if out.is_empty() {
        return Err(parse_err(1, "file holds no records".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn color_word(name: &str) -> u32 {
        words::COLOR_BASE + COLOR_NAMES.iter().position(|&c| c == name).unwrap() as u32
    }

    #[test]
    fn vocabulary_is_dense_and_sized() {
        assert_eq!(PROMPT_WORDS.len(), 24);
        assert_eq!(COLOR_NAMES.len(), 8);
        for (i, c) in COLOR_NAMES.iter().enumerate() {
            assert_eq!(PROMPT_WORDS[words::COLOR_BASE as usize + i], *c);
        }
        assert_eq!(PROMPT_WORDS[words::FILLER_BASE as usize], "a");
        assert_eq!(vocab_hash(), vocab_hash());
    }

    #[test]
    fn interpretations_concrete_and_class() {
        let red = PromptSpec::new(color_word("red"), Pattern::Solid).unwrap();
        assert_eq!(red.interpretations, vec![Interpretation { color: 0, pattern: Pattern::Solid }]);
        assert!(!red.is_ambiguous());

        let warm = PromptSpec::new(words::WARM, Pattern::Stripes).unwrap();
        let colors: Vec<u8> = warm.interpretations.iter().map(|i| i.color).collect();
        assert_eq!(colors, vec![0, 1, 2]);
        assert!(warm.interpretations.iter().all(|i| i.pattern == Pattern::Stripes));

        let cool = PromptSpec::new(words::COOL, Pattern::Solid).unwrap();
        assert_eq!(cool.color_class, vec![3, 4, 5]);
    }

    #[test]
    fn any_checker_enumerates_all_colors() {
        let p = PromptSpec::new(words::ANY, Pattern::Checker).unwrap();
        // brute force: every color id paired with checker
        let expected: Vec<Interpretation> =
            (0..8u8).map(|color| Interpretation { color, pattern: Pattern::Checker }).collect();
        assert_eq!(p.interpretations.len(), 8);
        assert_eq!(p.interpretations, expected);
    }

    #[test]
    fn malformed_prompts_name_position() {
        let err = enumerate_interpretations(&[words::BOS, words::SOLID, words::SOLID, words::PAD]).unwrap_err();
        assert!(matches!(err, Error::Prompt { position: 1, .. }), "{err}");
        let err = enumerate_interpretations(&[words::BOS, words::WARM, words::WARM, words::PAD]).unwrap_err();
        assert!(matches!(err, Error::Prompt { position: 2, .. }));
        let err = enumerate_interpretations(&[words::PAD, words::WARM, words::SOLID, words::PAD]).unwrap_err();
        assert!(matches!(err, Error::Prompt { position: 0, .. }));
        let err = enumerate_interpretations(&[words::BOS, words::WARM, words::SOLID, 99]).unwrap_err();
        assert!(matches!(err, Error::Prompt { position: 3, .. }));
        assert!(matches!(enumerate_interpretations(&[1, 2]), Err(Error::Prompt { .. })));
        assert!(PromptSpec::parse("warm plaid").is_err());
        assert_eq!(PromptSpec::parse("warm stripes").unwrap().text(), "warm stripes");
    }

    #[test]
    fn render_examples() {
        let red = render_scene(Interpretation { color: 0, pattern: Pattern::Solid });
        assert!(red.cells().iter().all(|&c| c == 0));

        let blue = render_scene(Interpretation { color: 4, pattern: Pattern::Stripes });
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(blue.at(r, c), if r % 2 == 0 { 4 } else { WHITE });
            }
        }

        let green = render_scene(Interpretation { color: 3, pattern: Pattern::Checker });
        let mut parity_cells = 0;
        for r in 0..8 {
            for c in 0..8 {
                if (r + c) % 2 == 0 {
                    parity_cells += 1;
                    assert_eq!(green.at(r, c), 3);
                } else {
                    assert_eq!(green.at(r, c), WHITE);
                }
            }
        }
        assert_eq!(parity_cells, 32);
        assert_eq!(green.cells().iter().filter(|&&c| c == 3).count(), 32);
    }

    #[test]
    fn downsample_examples() {
        let red = render_scene(Interpretation { color: 0, pattern: Pattern::Solid });
        assert!(downsample_lr(&red).unwrap().cells().iter().all(|&c| c == 0));
        let blue = render_scene(Interpretation { color: 4, pattern: Pattern::Stripes });
        assert!(downsample_lr(&blue).unwrap().cells().iter().all(|&c| c == 4));
        let green = render_scene(Interpretation { color: 3, pattern: Pattern::Checker });
        assert!(downsample_lr(&green).unwrap().cells().iter().all(|&c| c == 3));
        let lr = downsample_lr(&red).unwrap();
        assert!(matches!(downsample_lr(&lr), Err(Error::Shape { .. })));
    }

    #[test]
    fn oracle_examples() {
        let p = PromptSpec::new(color_word("red"), Pattern::Solid).unwrap();
        let exact = render_scene(p.interpretations[0]);
        assert_eq!(oracle_score(&exact, &p), 1.0);
        let black = TokenGrid::filled(Resolution::High, 6);
        assert_eq!(oracle_score(&black, &p), 0.0);
        let mut cells = vec![6u8; 64];
        for c in cells.iter_mut().take(32) {
            *c = 0;
        }
        let half = TokenGrid::new(Resolution::High, cells).unwrap();
        assert_eq!(oracle_score(&half, &p), 0.5);
    }

    #[test]
    fn cross_pattern_overlap_is_at_most_half() {
        // Brute force over every pair of distinct patterns for each non-white color.
        for color in 0..7u8 {
            for &a in &Pattern::ALL {
                for &b in &Pattern::ALL {
                    if a == b {
                        continue;
                    }
                    let g = render_scene(Interpretation { color, pattern: a });
                    let f = match_fraction(&g, Interpretation { color, pattern: b });
                    assert!(f <= 0.5, "{color} {a:?} vs {b:?}: {f}");
                }
            }
        }
    }

    #[test]
    fn dataset_single_unambiguous() {
        let d = generate_dataset(1, 3, 0.0).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].prompt.interpretations.len(), 1);
    }

    #[test]
    fn dataset_ambiguous_fraction_binomial_bound() {
        let d = generate_dataset(1000, 11, 0.5).unwrap();
        let amb = d.iter().filter(|e| e.prompt.is_ambiguous()).count();
        assert!((400..=600).contains(&amb), "{amb}");
    }

    #[test]
    fn dataset_records_score_one() {
        for ex in generate_dataset(300, 5, 0.5).unwrap() {
            assert_eq!(oracle_score(&ex.hr, &ex.prompt), 1.0);
            assert_eq!(downsample_lr(&ex.hr).unwrap(), ex.lr);
            assert!(ex.prompt.interpretations.contains(&ex.interpretation));
        }
    }

    #[test]
    fn dataset_rejects_bad_arguments() {
        assert!(generate_dataset(0, 1, 0.5).is_err());
        assert!(generate_dataset(5, 1, 1.5).is_err());
        assert!(generate_ambiguous_benchmark(0, 1).is_err());
    }

    #[test]
    fn benchmark_prompts_are_class_prompts() {
        let b = generate_ambiguous_benchmark(DEFAULT_BENCHMARK_SIZE, 9).unwrap();
        assert_eq!(b.len(), 200);
        for ex in &b {
            assert!(ex.prompt.interpretations.len() >= 2);
            assert!([words::WARM, words::COOL, words::ANY].contains(&ex.prompt.tokens[1]));
        }
    }

    #[test]
    fn files_are_deterministic_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        write_records(&a, &generate_dataset(50, 7, 0.3).unwrap(), false).unwrap();
        write_records(&b, &generate_dataset(50, 7, 0.3).unwrap(), false).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_records(&a).unwrap(), generate_dataset(50, 7, 0.3).unwrap());

        let c = dir.path().join("bench.jsonl");
        let d = dir.path().join("bench2.jsonl");
        write_records(&c, &generate_ambiguous_benchmark(10, 4).unwrap(), true).unwrap();
        write_records(&d, &generate_ambiguous_benchmark(10, 4).unwrap(), true).unwrap();
        assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.lines().next().unwrap().contains("\"format_version\":1"));
        assert!(text.lines().nth(1).unwrap().contains("\"interpretations\""));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        write_records(&p, &generate_dataset(3, 1, 0.0).unwrap(), false).unwrap();
        let mut text = std::fs::read_to_string(&p).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&p, text).unwrap();
        match read_records(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        assert!(matches!(read_records(&dir.path().join("missing.jsonl")), Err(Error::Io { .. })));
    }
}
