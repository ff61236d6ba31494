//! Structured pseudo-report grammar over a fixed 512-token vocabulary.
//!
//! Reports are token-id sequences generated from lesion ground truth with
//! style-seeded synonym variation plus distractor sentences about
//! sequences the image model never sees. The grammar is exactly
//! invertible: [`parse_report`] recovers the facts (lesion count,
//! quadrant, size bucket, intensity bucket) that [`render_report`] encoded.

use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::phantom::{Lesion, LesionDescriptor};

pub const VOCAB_SIZE: usize = 512;
pub const MAX_REPORT_LEN: usize = 64;
/// Scaled-down analog of a short-context text encoder's token budget.
pub const SHORT_CONTEXT_LEN: usize = 16;

// Special tokens at fixed ids.
pub const TOK_PAD: u16 = 0;
pub const TOK_CLASS_POS: u16 = 1;
pub const TOK_CLASS_NEG: u16 = 2;
pub const TOK_NEG_FINDING: u16 = 3;
pub const TOK_LESION: u16 = 4;
pub const TOK_PERIOD: u16 = 5;
pub const TOK_COMMA: u16 = 6;

const SPECIAL_WORDS: [&str; 7] = [
    "<pad>",
    "<high-suspicion>",
    "<low-suspicion>",
    "no-suspicious-finding",
    "lesion",
    ".",
    ",",
];

const WORDS: &[&str] = &[
    // impression scaffolding
    "impression", "study", "shows", "demonstrates", "reveals", "one", "two", "three",
    "suspicious", "finding", "findings", "focus", "foci", "within", "the", "gland",
    // location
    "in", "upper", "lower", "left", "right", "zone", "region", "quadrant",
    // size buckets (two synonyms each)
    "small", "tiny", "moderate", "intermediate", "large", "prominent",
    // intensity buckets (two synonyms each)
    "faint", "subtle", "conspicuous", "evident", "bright", "marked",
    // distractor material
    "adc", "dwi", "dce", "series", "sequence", "unremarkable", "stable", "degraded",
    "mild", "benign", "changes", "elsewhere", "noted", "limited", "by", "motion",
];

pub struct Vocab {
    words: Vec<&'static str>,
}

impl Vocab {
    pub fn get() -> &'static Vocab {
        static VOCAB: OnceLock<Vocab> = OnceLock::new();
        VOCAB.get_or_init(|| {
            let mut words: Vec<&'static str> = SPECIAL_WORDS.to_vec();
            words.extend_from_slice(WORDS);
            assert!(words.len() <= VOCAB_SIZE, "vocabulary overflow");
            Vocab { words }
        })
    }

    pub fn id(&self, word: &str) -> u16 {
        self.words
            .iter()
            .position(|w| *w == word)
            .unwrap_or_else(|| panic!("word {word} not in vocabulary")) as u16
    }

    pub fn word(&self, id: u16) -> Result<&'static str> {
        self.words
            .get(id as usize)
            .copied()
            .ok_or(Error::TokenOutOfVocab {
                id,
                size: VOCAB_SIZE,
            })
    }

    pub fn contains_id(&self, id: u16) -> bool {
        (id as usize) < VOCAB_SIZE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum IntensityBucket {
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LesionFacts {
    pub quadrant: Quadrant,
    pub size: SizeBucket,
    pub intensity: IntensityBucket,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFacts {
    pub lesions: Vec<LesionFacts>,
}

impl ReportFacts {
    pub fn lesion_count(&self) -> usize {
        self.lesions.len()
    }
}

/// Radius thresholds for the size buckets (pixels).
pub fn size_bucket(radius: f64) -> SizeBucket {
    if radius < 3.6 {
        SizeBucket::Small
    } else if radius < 4.6 {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Contrast thresholds for the intensity buckets.
pub fn intensity_bucket(contrast: f64) -> IntensityBucket {
    if contrast < 0.33 {
        IntensityBucket::Low
    } else if contrast < 0.42 {
        IntensityBucket::Medium
    } else {
        IntensityBucket::High
    }
}

/// Quadrant relative to the image center.
pub fn quadrant_of(lesion: &Lesion, height: usize, width: usize) -> Quadrant {
    let upper = lesion.y < height as f64 / 2.0;
    let left = lesion.x < width as f64 / 2.0;
    match (upper, left) {
        (true, true) => Quadrant::UpperLeft,
        (true, false) => Quadrant::UpperRight,
        (false, true) => Quadrant::LowerLeft,
        (false, false) => Quadrant::LowerRight,
    }
}

/// Facts the report must encode, in descending-radius order.
pub fn facts_from_truth(truth: &LesionDescriptor, height: usize, width: usize) -> ReportFacts {
    let mut lesions: Vec<&Lesion> = truth.lesions.iter().collect();
    lesions.sort_by(|a, b| b.radius.total_cmp(&a.radius));
    ReportFacts {
        lesions: lesions
            .into_iter()
            .map(|l| LesionFacts {
                quadrant: quadrant_of(l, height, width),
                size: size_bucket(l.radius),
                intensity: intensity_bucket(l.contrast),
            })
            .collect(),
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.gen_range(0..options.len())]
}

const SIZE_SYNONYMS: [(&str, &str); 3] = [("small", "tiny"), ("moderate", "intermediate"), ("large", "prominent")];
const INTENSITY_SYNONYMS: [(&str, &str); 3] =
    [("faint", "subtle"), ("conspicuous", "evident"), ("bright", "marked")];

fn size_words(b: SizeBucket) -> [&'static str; 2] {
    let (a, s) = SIZE_SYNONYMS[b as usize];
    [a, s]
}

fn intensity_words(b: IntensityBucket) -> [&'static str; 2] {
    let (a, s) = INTENSITY_SYNONYMS[b as usize];
    [a, s]
}

/// Render a report for `truth` with style-seeded surface variation.
pub fn render_report(
    truth: &LesionDescriptor,
    style_seed: u64,
    height: usize,
    width: usize,
) -> Vec<u16> {
    let v = Vocab::get();
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let facts = facts_from_truth(truth, height, width);
    let mut toks: Vec<u16> = Vec::new();
    let push = |toks: &mut Vec<u16>, w: &str| toks.push(v.id(w));

    // impression sentence (always first)
    push(&mut toks, "impression");
    let verb = pick(&mut rng, &["shows", "demonstrates", "reveals"]);
    push(&mut toks, verb);
    if facts.lesions.is_empty() {
        toks.push(TOK_NEG_FINDING);
    } else {
        let count_word = ["one", "two", "three"][facts.lesions.len() - 1];
        push(&mut toks, count_word);
        push(&mut toks, "suspicious");
        let noun = if facts.lesions.len() == 1 {
            pick(&mut rng, &["finding", "focus"])
        } else {
            pick(&mut rng, &["findings", "foci"])
        };
        push(&mut toks, noun);
    }
    toks.push(TOK_PERIOD);

    // one clause per lesion, marked by the LESION token
    for lf in &facts.lesions {
        toks.push(TOK_LESION);
        push(&mut toks, pick(&mut rng, &["in", "within"]));
        let (vert, horiz) = match lf.quadrant {
            Quadrant::UpperLeft => ("upper", "left"),
            Quadrant::UpperRight => ("upper", "right"),
            Quadrant::LowerLeft => ("lower", "left"),
            Quadrant::LowerRight => ("lower", "right"),
        };
        push(&mut toks, vert);
        push(&mut toks, horiz);
        push(&mut toks, pick(&mut rng, &["zone", "region", "quadrant"]));
        toks.push(TOK_COMMA);
        push(&mut toks, pick(&mut rng, &size_words(lf.size)));
        toks.push(TOK_COMMA);
        push(&mut toks, pick(&mut rng, &intensity_words(lf.intensity)));
        toks.push(TOK_PERIOD);
    }

    // distractors: text about sequences the image model never sees
    let n_distractors = rng.gen_range(1..=2usize);
    for _ in 0..n_distractors {
        push(&mut toks, pick(&mut rng, &["adc", "dwi", "dce"]));
        push(&mut toks, pick(&mut rng, &["series", "sequence"]));
        push(
            &mut toks,
            pick(&mut rng, &["unremarkable", "stable", "degraded"]),
        );
        toks.push(TOK_PERIOD);
    }

    toks.truncate(MAX_REPORT_LEN);
    toks
}

fn bucket_of_word(word: &str) -> (Option<SizeBucket>, Option<IntensityBucket>) {
    for (i, (a, b)) in SIZE_SYNONYMS.iter().enumerate() {
        if word == *a || word == *b {
            let bucket = [SizeBucket::Small, SizeBucket::Medium, SizeBucket::Large][i];
            return (Some(bucket), None);
        }
    }
    for (i, (a, b)) in INTENSITY_SYNONYMS.iter().enumerate() {
        if word == *a || word == *b {
            let bucket = [
                IntensityBucket::Low,
                IntensityBucket::Medium,
                IntensityBucket::High,
            ][i];
            return (None, Some(bucket));
        }
    }
    (None, None)
}

/// Recover the encoded facts from a rendered report.
pub fn parse_report(tokens: &[u16]) -> Result<ReportFacts> {
    let v = Vocab::get();
    let mut lesions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i] != TOK_LESION {
            i += 1;
            continue;
        }
        let mut vert: Option<bool> = None; // true = upper
        let mut horiz: Option<bool> = None; // true = left
        let mut size: Option<SizeBucket> = None;
        let mut intensity: Option<IntensityBucket> = None;
        i += 1;
        while i < tokens.len() && tokens[i] != TOK_PERIOD {
            let word = v.word(tokens[i])?;
            match word {
                "upper" => vert = Some(true),
                "lower" => vert = Some(false),
                "left" => horiz = Some(true),
                "right" => horiz = Some(false),
                _ => {
                    let (s, it) = bucket_of_word(word);
                    if s.is_some() {
                        size = s;
                    }
                    if it.is_some() {
                        intensity = it;
                    }
                }
            }
            i += 1;
        }
        let (vert, horiz, size, intensity) = match (vert, horiz, size, intensity) {
            (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
            _ => {
                return Err(Error::DataFormat(
                    "lesion clause missing quadrant/size/intensity".to_string(),
                ))
            }
        };
        let quadrant = match (vert, horiz) {
            (true, true) => Quadrant::UpperLeft,
            (true, false) => Quadrant::UpperRight,
            (false, true) => Quadrant::LowerLeft,
            (false, false) => Quadrant::LowerRight,
        };
        lesions.push(LesionFacts {
            quadrant,
            size,
            intensity,
        });
    }
    Ok(ReportFacts { lesions })
}

/// Human-readable form of a token sequence.
pub fn decode_tokens(tokens: &[u16]) -> Result<String> {
    let v = Vocab::get();
    let words: Result<Vec<&str>> = tokens.iter().map(|&t| v.word(t)).collect();
    Ok(words?.join(" "))
}

/// Tokens up to and including the first sentence terminator.
pub fn first_sentence(tokens: &[u16]) -> &[u16] {
    match tokens.iter().position(|&t| t == TOK_PERIOD) {
        Some(i) => &tokens[..=i],
        None => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{Lesion, LesionDescriptor};

    fn lesion(y: f64, x: f64, radius: f64, contrast: f64) -> Lesion {
        Lesion {
            y,
            x,
            z: 0.0,
            radius,
            z_radius: 1.0,
            contrast,
        }
    }

    #[test]
    fn negative_truth_contains_neg_finding() {
        let truth = LesionDescriptor { lesions: vec![] };
        let toks = render_report(&truth, 1, 32, 32);
        assert!(toks.contains(&TOK_NEG_FINDING));
        assert!(!toks.contains(&TOK_LESION));
        assert_eq!(parse_report(&toks).unwrap().lesion_count(), 0);
    }

    #[test]
    fn two_lesions_yield_two_clauses() {
        let truth = LesionDescriptor {
            lesions: vec![lesion(8.0, 8.0, 3.0, 0.3), lesion(24.0, 20.0, 5.0, 0.45)],
        };
        let toks = render_report(&truth, 9, 32, 32);
        assert_eq!(toks.iter().filter(|&&t| t == TOK_LESION).count(), 2);
    }

    #[test]
    fn style_variation_preserves_facts() {
        let truth = LesionDescriptor {
            lesions: vec![lesion(10.0, 22.0, 4.0, 0.38), lesion(20.0, 6.0, 2.9, 0.5)],
        };
        let want = facts_from_truth(&truth, 32, 32);
        let mut surface_forms = std::collections::HashSet::new();
        for style in 0..20u64 {
            let toks = render_report(&truth, style, 32, 32);
            assert_eq!(parse_report(&toks).unwrap(), want, "style {style}");
            surface_forms.insert(toks);
        }
        assert!(surface_forms.len() > 1, "styles never varied the surface");
    }

    #[test]
    fn first_sentence_stops_at_period() {
        let truth = LesionDescriptor {
            lesions: vec![lesion(8.0, 8.0, 3.0, 0.3)],
        };
        let toks = render_report(&truth, 3, 32, 32);
        let head = first_sentence(&toks);
        assert_eq!(*head.last().unwrap(), TOK_PERIOD);
        assert_eq!(head.iter().filter(|&&t| t == TOK_PERIOD).count(), 1);
    }

    #[test]
    fn vocabulary_fits_and_round_trips() {
        let v = Vocab::get();
        assert!(v.words.len() <= VOCAB_SIZE);
        assert_eq!(v.word(TOK_LESION).unwrap(), "lesion");
        assert!(v.word(511).is_err());
    }
}
