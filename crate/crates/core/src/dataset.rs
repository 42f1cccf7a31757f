//! Label schema, record model, synthetic corpus generation, stratified
//! splits and JSONL persistence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{fmt_list, parse_list, parse_value, KvApply};
use crate::eeg::{band_limited_noise, EegRecording, DEFAULT_SAMPLE_RATE};
use crate::error::{DreamError, Result};
use crate::model::{N_EMOTIONS, N_THEMES};

pub const THEMES: [&str; N_THEMES] = [
    "flying",
    "falling",
    "pursuit",
    "loss",
    "social_interaction",
    "water",
    "animals",
    "death",
    "transformation",
    "school",
    "food",
    "travel",
];

pub const EMOTIONS: [&str; N_EMOTIONS] = [
    "joy", "fear", "anxiety", "sadness", "anger", "surprise", "disgust", "calmness",
];

pub fn theme_index(name: &str) -> Option<usize> {
    THEMES.iter().position(|&t| t == name)
}

pub fn emotion_index(name: &str) -> Option<usize> {
    EMOTIONS.iter().position(|&e| e == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DreamType {
    General,
    Lucid,
    Nightmare,
    Recurrent,
    Sparse,
    Surreal,
}

impl DreamType {
    pub const ALL: [DreamType; 6] = [
        DreamType::General,
        DreamType::Lucid,
        DreamType::Nightmare,
        DreamType::Recurrent,
        DreamType::Sparse,
        DreamType::Surreal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DreamType::General => "general",
            DreamType::Lucid => "lucid",
            DreamType::Nightmare => "nightmare",
            DreamType::Recurrent => "recurrent",
            DreamType::Sparse => "sparse",
            DreamType::Surreal => "surreal",
        }
    }
}

/// One annotated narrative. Field order is the on-disk key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DreamRecord {
    pub id: String,
    pub text: String,
    pub themes: Vec<u8>,
    pub emotions: Vec<u8>,
    pub dream_type: DreamType,
    #[serde(default)]
    pub eeg_path: Option<String>,
}

impl DreamRecord {
    /// Gold labels as `emotions ++ themes` in `{0, 1}`.
    pub fn joint_labels(&self) -> Vec<f64> {
        self.emotions
            .iter()
            .chain(&self.themes)
            .map(|&v| f64::from(v))
            .collect()
    }

    fn check_schema(&self) -> std::result::Result<(), String> {
        if self.themes.len() != N_THEMES {
            return Err(format!("expected {N_THEMES} theme entries, found {}", self.themes.len()));
        }
        if self.emotions.len() != N_EMOTIONS {
            return Err(format!(
                "expected {N_EMOTIONS} emotion entries, found {}",
                self.emotions.len()
            ));
        }
        if self.themes.iter().chain(&self.emotions).any(|&v| v > 1) {
            return Err("label entries must be 0 or 1".into());
        }
        Ok(())
    }
}

/// Keywords that signal each theme, in [`THEMES`] order. Every generated
/// narrative mentions at least one of these for each active theme.
pub const THEME_KEYWORDS: [&[&str]; N_THEMES] = [
    &["flying", "soaring", "wings", "hovering"],
    &["falling", "fell", "plunging", "tumbling"],
    &["chased", "pursued", "hunted", "fleeing"],
    &["lost", "missing", "vanished", "gone"],
    &["party", "friends", "crowd", "conversation"],
    &["water", "ocean", "river", "swimming"],
    &["dog", "snake", "wolf", "horse"],
    &["death", "funeral", "dying", "coffin"],
    &["transforming", "morphing", "shapeshifting", "turned"],
    &["school", "exam", "classroom", "teacher"],
    &["food", "eating", "feast", "bread"],
    &["train", "journey", "airport", "traveling"],
];

/// Sentence templates per theme; `{kw}` is replaced by one of the theme's
/// keywords and the surrounding words carry theme context of their own.
const THEME_TEMPLATES: [[&str; 4]; N_THEMES] = [
    [
        "i was {kw} high above the rooftops",
        "{kw} over the clouds felt effortless",
        "the sky opened and i kept {kw} higher",
        "below me the town shrank while {kw}",
    ],
    [
        "i was {kw} from a tall building",
        "the ground rushed up while {kw}",
        "{kw} down an endless dark shaft",
        "the floor gave way and i was {kw}",
    ],
    [
        "i was {kw} by a shadowy figure",
        "footsteps behind me as i was {kw}",
        "{kw} through narrow alleys at night",
        "someone kept me {kw} and running",
    ],
    [
        "my wallet was {kw} and i searched everywhere",
        "i realized my keys were {kw}",
        "searching for something {kw} forever",
        "everything i owned was {kw}",
    ],
    [
        "a {kw} with old classmates laughing",
        "we talked at a {kw} for hours",
        "people gathered in a {kw} around me",
        "my {kw} were chatting and dancing",
    ],
    [
        "waves of {kw} crashed over the deck",
        "i was {kw} deep beneath the surface",
        "the {kw} rose around my knees",
        "a boat drifted on the {kw}",
    ],
    [
        "a huge {kw} stared at me from the trees",
        "the {kw} growled softly in the barn",
        "i fed a {kw} in the meadow",
        "a wild {kw} ran beside me",
    ],
    [
        "a {kw} procession walked past in black",
        "someone was {kw} in a hospital bed",
        "they lowered the {kw} into the grave",
        "mourners gathered around the {kw}",
    ],
    [
        "my hands kept {kw} into claws",
        "i was {kw} into someone else entirely",
        "the bedroom was {kw} into a forest",
        "my body {kw} into smoke",
    ],
    [
        "i forgot the {kw} in my locker",
        "the {kw} bell rang and i was late",
        "a strict {kw} called my name",
        "sitting at a desk in the {kw}",
    ],
    [
        "a table covered with {kw} and cake",
        "i was {kw} soup in a kitchen",
        "the smell of {kw} filled the bakery",
        "we shared a {kw} at a banquet",
    ],
    [
        "i missed my {kw} at the station",
        "a long {kw} across the desert",
        "my luggage disappeared at the {kw}",
        "we were {kw} on a crowded bus",
    ],
];

/// Distractor sentences mention a keyword of an inactive theme in a negated
/// context.
const NEGATED_TEMPLATES: [&str; 4] = [
    "there was no {kw} at all",
    "i was not {kw} this time",
    "nobody mentioned any {kw}",
    "never any {kw} in this one",
];

const FILLER: [&str; 48] = [
    "the", "a", "room", "light", "door", "street", "house", "night", "morning", "window", "walked",
    "looked", "saw", "felt", "strange", "quiet", "bright", "dark", "old", "new", "voice", "sound",
    "colors", "sky", "road", "table", "chair", "mother", "brother", "stranger", "city", "field",
    "slowly", "quickly", "then", "after", "before", "maybe", "somehow", "blue", "red", "green",
    "corner", "hallway", "stairs", "garden", "clock", "mirror",
];

/// Parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub n: usize,
    pub seed: u64,
    pub theme_marginals: [f64; N_THEMES],
    /// `conditional[k][j]`: probability that active theme `k` alone switches
    /// on emotion `j` (combined across themes by noisy-OR).
    pub conditional: [[f64; N_EMOTIONS]; N_THEMES],
    /// Probability of each emotion with no theme active.
    pub emotion_base: [f64; N_EMOTIONS],
    pub eeg_fraction: f64,
    pub mean_words: f64,
    pub sd_words: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Relative amplitude increase of an emotion's marker band.
    pub eeg_emotion_gain: f64,
    pub eeg_channels: usize,
    pub eeg_seconds: f64,
    pub sample_rate: f64,
    /// Probability that a narrative contains one negated mention of an
    /// inactive theme's keyword.
    pub distractor_rate: f64,
    pub dream_type_probs: [f64; 6],
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        let mut conditional = [[0.0; N_EMOTIONS]; N_THEMES];
        // joy, fear, anxiety, sadness, anger, surprise, disgust, calmness
        let table: [(usize, [f64; N_EMOTIONS]); N_THEMES] = [
            (0, [0.80, 0.05, 0.05, 0.0, 0.0, 0.40, 0.0, 0.50]),
            (1, [0.0, 0.50, 0.90, 0.0, 0.0, 0.30, 0.0, 0.0]),
            (2, [0.0, 0.80, 0.40, 0.0, 0.20, 0.0, 0.0, 0.0]),
            (3, [0.0, 0.10, 0.30, 0.80, 0.10, 0.0, 0.0, 0.0]),
            (4, [0.60, 0.0, 0.20, 0.0, 0.20, 0.20, 0.0, 0.30]),
            (5, [0.20, 0.20, 0.0, 0.0, 0.0, 0.10, 0.0, 0.60]),
            (6, [0.20, 0.40, 0.0, 0.0, 0.0, 0.30, 0.10, 0.0]),
            (7, [0.0, 0.50, 0.20, 0.80, 0.0, 0.0, 0.0, 0.0]),
            (8, [0.10, 0.20, 0.0, 0.0, 0.0, 0.70, 0.30, 0.0]),
            (9, [0.0, 0.10, 0.30, 0.0, 0.20, 0.0, 0.0, 0.0]),
            (10, [0.50, 0.0, 0.0, 0.0, 0.0, 0.0, 0.60, 0.30]),
            (11, [0.40, 0.0, 0.10, 0.0, 0.0, 0.40, 0.0, 0.40]),
        ];
        for (k, row) in table {
            conditional[k] = row;
        }
        let mut spec = GeneratorSpec {
            n: 1500,
            seed: 7,
            theme_marginals: [
                0.22, 0.20, 0.25, 0.18, 0.30, 0.20, 0.18, 0.12, 0.15, 0.20, 0.18, 0.22,
            ],
            conditional,
            emotion_base: [0.05; N_EMOTIONS],
            eeg_fraction: 400.0 / 1500.0,
            mean_words: 150.0,
            sd_words: 45.0,
            min_words: 20,
            max_words: 255,
            eeg_emotion_gain: 1.0,
            eeg_channels: 4,
            eeg_seconds: 30.0,
            sample_rate: DEFAULT_SAMPLE_RATE,
            distractor_rate: 0.5,
            dream_type_probs: [1.0 / 6.0; 6],
        };
        spec.plant_correlation(1, 2, 0.9)
            .expect("default falling/anxiety correlation is attainable");
        spec
    }
}

/// Analytic phi coefficient between theme `k` and emotion `j` under
/// independent themes and noisy-OR emotions.
pub fn analytic_phi(spec: &GeneratorSpec, k: usize, j: usize) -> f64 {
    let p_k = spec.theme_marginals[k];
    let others: f64 = (0..N_THEMES)
        .filter(|&t| t != k)
        .map(|t| 1.0 - spec.theme_marginals[t] * spec.conditional[t][j])
        .product();
    let off = (1.0 - spec.emotion_base[j]) * others;
    let a1 = 1.0 - off * (1.0 - spec.conditional[k][j]);
    let a0 = 1.0 - off;
    let p_e = p_k * a1 + (1.0 - p_k) * a0;
    let denom = (p_e * (1.0 - p_e)).sqrt();
    if denom == 0.0 {
        return 0.0;
    }
    (a1 - a0) * (p_k * (1.0 - p_k)).sqrt() / denom
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| -> Result<()> {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(DreamError::config(format!("{name} = {v} is not a probability")))
            }
        };
        for &p in &self.theme_marginals {
            prob("theme marginal", p)?;
        }
        for row in &self.conditional {
            for &p in row {
                prob("theme-emotion conditional", p)?;
            }
        }
        for &p in &self.emotion_base {
            prob("emotion base rate", p)?;
        }
        prob("eeg_fraction", self.eeg_fraction)?;
        prob("distractor_rate", self.distractor_rate)?;
        for &p in &self.dream_type_probs {
            prob("dream type probability", p)?;
        }
        if self.dream_type_probs.iter().sum::<f64>() <= 0.0 {
            return Err(DreamError::config("dream type probabilities sum to zero"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(DreamError::config("word bounds must satisfy 0 < min_words <= max_words"));
        }
        if !(self.sd_words >= 0.0) || !self.mean_words.is_finite() {
            return Err(DreamError::config("narrative length mean/sd invalid"));
        }
        if !(self.eeg_emotion_gain >= 0.0) || self.eeg_channels == 0 || !(self.eeg_seconds > 0.0) {
            return Err(DreamError::config("EEG gain, channels and duration must be positive"));
        }
        if !(self.sample_rate > 2.0 * crate::eeg::PASS_HI) {
            return Err(DreamError::config("EEG sample rate too low for a 12 Hz band"));
        }
        Ok(())
    }

    /// Sets `conditional[theme][emotion]` and rescales the emotion's other
    /// sources so that the analytic phi coefficient equals `r`.
    pub fn plant_correlation(&mut self, theme: usize, emotion: usize, r: f64) -> Result<()> {
        if !(0.0..1.0).contains(&r) {
            return Err(DreamError::config(format!("planted correlation {r} outside [0, 1)")));
        }
        let orig_base = self.emotion_base[emotion];
        let orig: Vec<f64> = (0..N_THEMES).map(|t| self.conditional[t][emotion]).collect();
        let set_scale = |spec: &mut GeneratorSpec, s: f64| {
            spec.emotion_base[emotion] = orig_base * s;
            for t in (0..N_THEMES).filter(|&t| t != theme) {
                spec.conditional[t][emotion] = orig[t] * s;
            }
        };
        self.conditional[theme][emotion] = 1.0;
        set_scale(self, 1.0);
        if analytic_phi(self, theme, emotion) < r {
            set_scale(self, 0.0);
            if analytic_phi(self, theme, emotion) < r {
                return Err(DreamError::config(format!("correlation {r} is not attainable")));
            }
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                set_scale(self, mid);
                if analytic_phi(self, theme, emotion) >= r {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            set_scale(self, lo);
        } else {
            let (mut lo, mut hi) = (0.0, 1.0);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                self.conditional[theme][emotion] = mid;
                if analytic_phi(self, theme, emotion) >= r {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            self.conditional[theme][emotion] = hi;
        }
        Ok(())
    }

    /// Marker cell `(channel, band)` whose power emotion `j` raises.
    pub fn marker_cell(&self, j: usize) -> (usize, usize) {
        (j % self.eeg_channels, j % 3)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n={}", self.n);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "theme_marginals={}", fmt_list(&self.theme_marginals));
        for (k, row) in self.conditional.iter().enumerate() {
            let _ = writeln!(s, "conditional.{}={}", THEMES[k], fmt_list(row));
        }
        let _ = writeln!(s, "emotion_base={}", fmt_list(&self.emotion_base));
        let _ = writeln!(s, "eeg_fraction={}", self.eeg_fraction);
        let _ = writeln!(s, "mean_words={}", self.mean_words);
        let _ = writeln!(s, "sd_words={}", self.sd_words);
        let _ = writeln!(s, "min_words={}", self.min_words);
        let _ = writeln!(s, "max_words={}", self.max_words);
        let _ = writeln!(s, "eeg_emotion_gain={}", self.eeg_emotion_gain);
        let _ = writeln!(s, "eeg_channels={}", self.eeg_channels);
        let _ = writeln!(s, "eeg_seconds={}", self.eeg_seconds);
        let _ = writeln!(s, "sample_rate={}", self.sample_rate);
        let _ = writeln!(s, "distractor_rate={}", self.distractor_rate);
        let _ = writeln!(s, "dream_type_probs={}", fmt_list(&self.dream_type_probs));
        s
    }
}

fn fixed<const N: usize>(key: &str, value: &str) -> Result<[f64; N]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into()
        .map_err(|v: Vec<f64>| DreamError::config(format!("{key} expects {N} values, got {}", v.len())))
}

impl KvApply for GeneratorSpec {
    fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "n" => self.n = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "theme_marginals" => self.theme_marginals = fixed(key, value)?,
            "emotion_base" => self.emotion_base = fixed(key, value)?,
            "eeg_fraction" => self.eeg_fraction = parse_value(key, value)?,
            "mean_words" => self.mean_words = parse_value(key, value)?,
            "sd_words" => self.sd_words = parse_value(key, value)?,
            "min_words" => self.min_words = parse_value(key, value)?,
            "max_words" => self.max_words = parse_value(key, value)?,
            "eeg_emotion_gain" => self.eeg_emotion_gain = parse_value(key, value)?,
            "eeg_channels" => self.eeg_channels = parse_value(key, value)?,
            "eeg_seconds" => self.eeg_seconds = parse_value(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "distractor_rate" => self.distractor_rate = parse_value(key, value)?,
            "dream_type_probs" => self.dream_type_probs = fixed(key, value)?,
            "plant" => {
                // plant=<theme>:<emotion>:<r>
                let parts: Vec<&str> = value.split(':').collect();
                let [t, e, r] = parts[..] else {
                    return Err(DreamError::config(format!("plant expects theme:emotion:r, got {value:?}")));
                };
                let t = theme_index(t).ok_or_else(|| DreamError::config(format!("unknown theme {t:?}")))?;
                let e = emotion_index(e).ok_or_else(|| DreamError::config(format!("unknown emotion {e:?}")))?;
                self.plant_correlation(t, e, parse_value(key, r)?)?;
            }
            _ => {
                let Some(theme) = key.strip_prefix("conditional.") else {
                    return Ok(false);
                };
                let k = theme_index(theme)
                    .ok_or_else(|| DreamError::config(format!("unknown theme {theme:?}")))?;
                self.conditional[k] = fixed(key, value)?;
            }
        }
        Ok(true)
    }
}

/// Generated corpus: records plus the EEG recordings they reference, keyed
/// by record id.
#[derive(Debug, Clone, Default)]
pub struct Generated {
    pub records: Vec<DreamRecord>,
    pub eeg: BTreeMap<String, EegRecording>,
}

fn render_sentence<R: Rng + ?Sized>(rng: &mut R, templates: &[&str], keyword: &str) -> Vec<String> {
    let t = templates[rng.random_range(0..templates.len())];
    t.replace("{kw}", keyword)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Deterministic synthetic corpus drawn from `spec` with a single RNG stream.
pub fn generate(spec: &GeneratorSpec) -> Result<Generated> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let length = Normal::new(spec.mean_words, spec.sd_words.max(1e-12))
        .map_err(|e| DreamError::config(e.to_string()))?;
    let n_eeg = (spec.eeg_fraction * spec.n as f64).round() as usize;
    let mut eeg_slots: Vec<bool> = (0..spec.n).map(|i| i < n_eeg).collect();
    eeg_slots.shuffle(&mut rng);
    let type_total: f64 = spec.dream_type_probs.iter().sum();
    let samples = (spec.eeg_seconds * spec.sample_rate).round() as usize;
    let base_gain = [1.0, 0.8, 0.6];

    let mut out = Generated::default();
    for (i, &has_eeg) in eeg_slots.iter().enumerate() {
        let id = format!("d{i:05}");
        let themes: Vec<u8> = spec
            .theme_marginals
            .iter()
            .map(|&p| u8::from(rng.random::<f64>() < p))
            .collect();
        let emotions: Vec<u8> = (0..N_EMOTIONS)
            .map(|j| {
                let off: f64 = (1.0 - spec.emotion_base[j])
                    * (0..N_THEMES)
                        .filter(|&k| themes[k] == 1)
                        .map(|k| 1.0 - spec.conditional[k][j])
                        .product::<f64>();
                u8::from(rng.random::<f64>() < 1.0 - off)
            })
            .collect();

        let mut u = rng.random::<f64>() * type_total;
        let mut dream_type = DreamType::Surreal;
        for (t, &p) in DreamType::ALL.iter().zip(&spec.dream_type_probs) {
            if u < p {
                dream_type = *t;
                break;
            }
            u -= p;
        }

        let mut sentences: Vec<Vec<String>> = Vec::new();
        for k in (0..N_THEMES).filter(|&k| themes[k] == 1) {
            let kws = THEME_KEYWORDS[k];
            let reps = 1 + usize::from(rng.random::<f64>() < 0.5);
            for _ in 0..reps {
                let kw = kws[rng.random_range(0..kws.len())];
                sentences.push(render_sentence(&mut rng, &THEME_TEMPLATES[k], kw));
            }
        }
        let inactive: Vec<usize> = (0..N_THEMES).filter(|&k| themes[k] == 0).collect();
        if !inactive.is_empty() && rng.random::<f64>() < spec.distractor_rate {
            let k = inactive[rng.random_range(0..inactive.len())];
            let kw = THEME_KEYWORDS[k][rng.random_range(0..THEME_KEYWORDS[k].len())];
            sentences.push(render_sentence(&mut rng, &NEGATED_TEMPLATES, kw));
        }
        let target = (length.sample(&mut rng).round().max(0.0) as usize)
            .clamp(spec.min_words, spec.max_words);
        let mut words_so_far: usize = sentences.iter().map(Vec::len).sum();
        while words_so_far < target {
            let len = rng.random_range(4..=9).min(target - words_so_far);
            let s: Vec<String> = (0..len)
                .map(|_| FILLER[rng.random_range(0..FILLER.len())].to_string())
                .collect();
            words_so_far += s.len();
            sentences.push(s);
        }
        sentences.shuffle(&mut rng);
        let text = sentences
            .iter()
            .map(|s| {
                let mut line = s.join(" ");
                line.push('.');
                line
            })
            .collect::<Vec<_>>()
            .join(" ");

        let eeg_path = if has_eeg {
            let channels: Vec<Vec<f64>> = (0..spec.eeg_channels)
                .map(|c| {
                    let mut gains = base_gain;
                    for (j, _) in emotions.iter().enumerate().filter(|(_, &e)| e == 1) {
                        let (mc, mb) = spec.marker_cell(j);
                        if mc == c {
                            gains[mb] *= 1.0 + spec.eeg_emotion_gain;
                        }
                    }
                    band_limited_noise(&mut rng, samples, spec.sample_rate, gains)
                        .into_iter()
                        .map(|v| v * 10.0)
                        .collect()
                })
                .collect();
            out.eeg
                .insert(id.clone(), EegRecording::new(spec.sample_rate, channels)?);
            Some(format!("{id}.eeg"))
        } else {
            None
        };

        out.records.push(DreamRecord {
            id,
            text,
            themes,
            emotions,
            dream_type,
            eeg_path,
        });
    }
    Ok(out)
}

/// Largest-remainder apportionment of `n` items by `ratios`.
pub fn apportion(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Stratified deterministic split. Records are shuffled within each dream
/// type, ordered by their fractional rank inside the type, and cut at
/// largest-remainder boundaries, so every split sees each type in
/// proportion.
pub fn split(records: &[DreamRecord], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<DreamRecord>, Vec<DreamRecord>, Vec<DreamRecord>)> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DreamError::input(format!("split ratios {r:?} must be probabilities summing to 1")));
    }
    let idx = split_indices(records, &r, seed);
    let take = |ids: &[usize]| ids.iter().map(|&i| records[i].clone()).collect();
    Ok((take(&idx[0]), take(&idx[1]), take(&idx[2])))
}

pub(crate) fn split_indices(records: &[DreamRecord], ratios: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut strata: BTreeMap<DreamType, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata.entry(r.dream_type).or_default().push(i);
    }
    let mut keyed: Vec<(f64, u8, usize)> = Vec::with_capacity(records.len());
    for (t, members) in strata.iter_mut() {
        members.shuffle(&mut rng);
        let m = members.len() as f64;
        for (rank, &i) in members.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / m, *t as u8, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let counts = apportion(records.len(), ratios);
    let mut out = Vec::with_capacity(counts.len());
    let mut start = 0;
    for c in counts {
        out.push(keyed[start..start + c].iter().map(|k| k.2).collect());
        start += c;
    }
    out
}

/// Writes one JSON object per line.
pub fn save(records: &[DreamRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| DreamError::Io(e.into()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<DreamRecord>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DreamRecord = serde_json::from_str(&line).map_err(|e| DreamError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        rec.check_schema().map_err(|msg| DreamError::Schema { line: i + 1, msg })?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes `dataset.jsonl` and one `<id>.eeg` sidecar per EEG recording into
/// `dir`. Returns the dataset path.
pub fn save_generated(data: &Generated, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("dataset.jsonl");
    save(&data.records, &path)?;
    for r in &data.records {
        if let (Some(p), Some(rec)) = (&r.eeg_path, data.eeg.get(&r.id)) {
            rec.save(&dir.join(p))?;
        }
    }
    Ok(path)
}

/// Loads a dataset and every EEG sidecar it references (paths relative to
/// the dataset file).
pub fn load_with_eeg(path: &Path) -> Result<Generated> {
    let records = load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut eeg = BTreeMap::new();
    for r in &records {
        if let Some(p) = &r.eeg_path {
            eeg.insert(r.id.clone(), EegRecording::load(&base.join(p))?);
        }
    }
    Ok(Generated { records, eeg })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorSpec {
        GeneratorSpec {
            n,
            mean_words: 30.0,
            sd_words: 5.0,
            eeg_seconds: 4.0,
            ..GeneratorSpec::default()
        }
    }

    #[test]
    fn empty_spec_generates_nothing() {
        let g = generate(&small(0)).unwrap();
        assert!(g.records.is_empty() && g.eeg.is_empty());
    }

    #[test]
    fn degenerate_conditional_forces_emotion() {
        let mut spec = small(300);
        spec.conditional[1][2] = 1.0;
        let g = generate(&spec).unwrap();
        let falling: Vec<_> = g.records.iter().filter(|r| r.themes[1] == 1).collect();
        assert!(!falling.is_empty());
        assert!(falling.iter().all(|r| r.emotions[2] == 1));
    }

    #[test]
    fn invalid_probabilities_are_rejected() {
        let mut spec = small(5);
        spec.theme_marginals[3] = 1.5;
        assert!(generate(&spec).is_err());
        let mut spec = small(5);
        spec.eeg_fraction = -0.1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn planted_phi_matches_target() {
        let spec = GeneratorSpec::default();
        assert!((analytic_phi(&spec, 1, 2) - 0.9).abs() < 1e-9);
        let mut low = GeneratorSpec::default();
        low.plant_correlation(0, 0, 0.3).unwrap();
        assert!((analytic_phi(&low, 0, 0) - 0.3).abs() < 1e-9);
    }

    #[test]
    fn active_themes_have_keywords() {
        let g = generate(&small(200)).unwrap();
        for r in &g.records {
            let words: Vec<String> = crate::text::words(&r.text).collect();
            for k in (0..N_THEMES).filter(|&k| r.themes[k] == 1) {
                assert!(
                    THEME_KEYWORDS[k].iter().any(|kw| words.iter().any(|w| w == kw)),
                    "{} lacks a {} keyword: {}",
                    r.id,
                    THEMES[k],
                    r.text
                );
            }
        }
    }

    #[test]
    fn apportion_uses_largest_remainder() {
        assert_eq!(apportion(10, &[0.7, 0.2, 0.1]), vec![7, 2, 1]);
        assert_eq!(apportion(1500, &[0.7, 0.2, 0.1]), vec![1050, 300, 150]);
        assert_eq!(apportion(7, &[0.5, 0.5]), vec![4, 3]);
        assert_eq!(apportion(0, &[0.7, 0.2, 0.1]), vec![0, 0, 0]);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let g = generate(&small(10)).unwrap();
        assert!(split(&g.records, (0.7, 0.2, 0.2), 1).is_err());
        let (a, b, c) = split(&g.records, (0.7, 0.2, 0.1), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (7, 2, 1));
    }

    #[test]
    fn schema_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let good = r#"{"id":"a","text":"x","themes":[0,0,0,0,0,0,0,0,0,0,0,0],"emotions":[0,0,0,0,0,0,0,0],"dream_type":"lucid"}"#;
        let short = r#"{"id":"b","text":"x","themes":[0,0,0,0,0,0,0,0,0,0,0],"emotions":[0,0,0,0,0,0,0,0],"dream_type":"lucid"}"#;
        fs::write(&path, format!("{good}\n{short}\n")).unwrap();
        match load(&path) {
            Err(DreamError::Schema { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("11"));
            }
            other => panic!("expected schema error, got {other:?}"),
        }
        fs::write(&path, format!("{good}\n{{not json\n")).unwrap();
        assert!(matches!(load(&path), Err(DreamError::Parse { line: 2, .. })));
        fs::write(&path, format!("{good}\n")).unwrap();
        assert_eq!(load(&path).unwrap()[0].eeg_path, None);
    }

    #[test]
    fn save_uses_fixed_key_order() {
        let g = generate(&small(3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save(&g.records, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        let pos = |k: &str| first.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("id") < pos("text"));
        assert!(pos("text") < pos("themes"));
        assert!(pos("themes") < pos("emotions"));
        assert!(pos("emotions") < pos("dream_type"));
        assert!(pos("dream_type") < pos("eeg_path"));
    }

    #[test]
    fn kv_round_trip() {
        let mut spec = small(42);
        spec.conditional[4][7] = 0.33;
        let mut back = GeneratorSpec::default();
        crate::config::apply_kv_text(&mut back, &spec.to_kv()).unwrap();
        assert_eq!(back, spec);
    }
}
