//! Synthetic long-tailed corpus generation, feature files and manifests.
//!
//! # Feature file (`.lsf`)
//!
//! ```text
//! offset  size        field
//! 0       4           magic "LSF1"
//! 4       1           version (1)
//! 5       4 x 3       L, T, D as little-endian u32
//! 17      4 x L*T*D   f32 little-endian, row-major [L, T, D]
//! ```
//!
//! # Manifest
//!
//! UTF-8 text, one utterance per line, tab-separated:
//!
//! ```text
//! id <TAB> feature_path <TAB> emotion <TAB> gender <TAB> speaker <TAB> tokens
//! ```
//!
//! `feature_path` is relative to the manifest's directory and `tokens` is a
//! space-separated list of token ids (each >= 1). Blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::LayerStack;
use crate::numerics::Tensor;

pub const NUM_EMOTIONS: usize = 8;
/// Anger, happiness, sadness, fear, surprise, contempt, disgust, neutral.
pub const EMOTION_LABELS: [&str; NUM_EMOTIONS] = ["A", "H", "S", "F", "U", "C", "D", "N"];
pub const NUM_GENDERS: usize = 2;

pub const FEATURE_MAGIC: [u8; 4] = *b"LSF1";
pub const FEATURE_VERSION: u8 = 1;
const FEATURE_HEADER_LEN: u64 = 17;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub stack: LayerStack,
    pub emotion: usize,
    pub gender: usize,
    pub speaker: usize,
    /// ASR target; ids start at 1 (0 is the CTC blank).
    pub tokens: Vec<usize>,
}

impl Utterance {
    pub fn validate(&self) -> Result<()> {
        if self.emotion >= NUM_EMOTIONS {
            return Err(Error::LabelOutOfRange {
                what: "emotion",
                value: self.emotion as i64,
                limit: NUM_EMOTIONS,
            });
        }
        if self.gender >= NUM_GENDERS {
            return Err(Error::LabelOutOfRange {
                what: "gender",
                value: self.gender as i64,
                limit: NUM_GENDERS,
            });
        }
        if self.tokens.contains(&0) {
            return Err(Error::LabelOutOfRange {
                what: "token (0 is reserved for blank)",
                value: 0,
                limit: usize::MAX,
            });
        }
        Ok(())
    }
}

/// Long-tailed default: one dominant class, two mid classes and five tail
/// classes, in `EMOTION_LABELS` order.
pub const DEFAULT_CLASS_PROBS: [f64; NUM_EMOTIONS] = [0.12, 0.20, 0.09, 0.01, 0.07, 0.04, 0.02, 0.45];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_utterances: usize,
    pub class_probs: Vec<f64>,
    pub n_speakers: usize,
    /// Highest-numbered speakers reserved for the test split.
    pub test_speakers: usize,
    /// Fraction of the remaining utterances assigned to the dev split.
    pub dev_fraction: f64,
    pub layers: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feat_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    /// Probability that a token comes from its emotion's two-word lexicon
    /// instead of the whole vocabulary.
    pub lexical_bias: f64,
    /// Scale of the acoustic emotion prototypes.
    pub emotion_scale: f64,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_utterances: 2900,
            class_probs: DEFAULT_CLASS_PROBS.to_vec(),
            n_speakers: 48,
            test_speakers: 8,
            dev_fraction: 0.1,
            layers: 4,
            frames_min: 8,
            frames_max: 16,
            feat_dim: 16,
            vocab_size: 16,
            max_tokens: 3,
            lexical_bias: 0.85,
            emotion_scale: 0.3,
            noise_scale: 1.0,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_probs.len() != NUM_EMOTIONS {
            return Err(Error::config(
                "generator.class_probs",
                format!("need {NUM_EMOTIONS} entries, got {}", self.class_probs.len()),
            ));
        }
        if self.class_probs.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::config("generator.class_probs", "entries must be >= 0"));
        }
        let sum: f64 = self.class_probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("generator.class_probs", format!("must sum to 1, got {sum}")));
        }
        let extents = [
            ("generator.n_utterances", self.n_utterances),
            ("generator.n_speakers", self.n_speakers),
            ("generator.layers", self.layers),
            ("generator.frames_min", self.frames_min),
            ("generator.feat_dim", self.feat_dim),
            ("generator.vocab_size", self.vocab_size),
            ("generator.max_tokens", self.max_tokens),
        ];
        for (key, v) in extents {
            if v == 0 {
                return Err(Error::config(key, "must be >= 1"));
            }
        }
        if self.frames_max < self.frames_min {
            return Err(Error::config("generator.frames_max", "must be >= frames_min"));
        }
        if self.frames_min < 2 * self.max_tokens {
            return Err(Error::config(
                "generator.frames_min",
                format!("must be >= 2 * max_tokens = {}", 2 * self.max_tokens),
            ));
        }
        if self.test_speakers >= self.n_speakers {
            return Err(Error::config("generator.test_speakers", "must leave at least one training speaker"));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::config("generator.dev_fraction", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.lexical_bias) {
            return Err(Error::config("generator.lexical_bias", "must lie in [0, 1]"));
        }
        if !(self.emotion_scale >= 0.0) || !self.emotion_scale.is_finite() {
            return Err(Error::config("generator.emotion_scale", "must be >= 0"));
        }
        if !(self.noise_scale >= 0.0) || !self.noise_scale.is_finite() {
            return Err(Error::config("generator.noise_scale", "must be >= 0"));
        }
        Ok(())
    }
}

/// Relative strength of each latent factor across backbone depth, with
/// `x = l / (L - 1)`: speaker and gender peak early, emotion in the middle
/// and lexical content at the top.
#[derive(Debug, Clone, Copy)]
struct LayerProfile {
    emotion: f64,
    gender: f64,
    speaker: f64,
    token: f64,
}

fn layer_profile(l: usize, num_layers: usize) -> LayerProfile {
    let x = if num_layers == 1 {
        0.5
    } else {
        l as f64 / (num_layers - 1) as f64
    };
    LayerProfile {
        emotion: 0.15 + (-((x - 0.45) / 0.3).powi(2)).exp(),
        gender: 1.0 - 0.6 * x,
        speaker: 1.0 - 0.7 * x,
        token: 0.3 + 0.7 * x,
    }
}

struct Latents {
    emotion: Vec<Vec<f64>>,
    /// Gender-specific shift of each emotion prototype.
    emotion_by_gender: Vec<[Vec<f64>; NUM_GENDERS]>,
    gender: [Vec<f64>; NUM_GENDERS],
    speaker: Vec<Vec<f64>>,
    speaker_gender: Vec<usize>,
    token: Vec<Vec<f64>>,
}

fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize, scale: f64) -> Vec<f64> {
    (0..d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect::<Vec<f64>>()
}

impl Latents {
    fn draw(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.feat_dim;
        let emotion = (0..NUM_EMOTIONS).map(|_| gaussian_vec(rng, d, cfg.emotion_scale)).collect();
        let emotion_by_gender = (0..NUM_EMOTIONS)
            .map(|_| {
                let v = gaussian_vec(rng, d, 0.45);
                let neg = v.iter().map(|x| -x).collect();
                [v, neg]
            })
            .collect();
        let gender = [gaussian_vec(rng, d, 0.8), gaussian_vec(rng, d, 0.8)];
        let speaker = (0..cfg.n_speakers).map(|_| gaussian_vec(rng, d, 0.8)).collect();
        let speaker_gender = (0..cfg.n_speakers).map(|k| k % NUM_GENDERS).collect();
        let token = (0..=cfg.vocab_size).map(|_| gaussian_vec(rng, d, 1.0)).collect();
        Latents {
            emotion,
            emotion_by_gender,
            gender,
            speaker,
            speaker_gender,
            token,
        }
    }
}

fn sample_class(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Emotion `e` favours tokens `1 + (2e) mod V` and `1 + (2e + 1) mod V`, so
/// lexical content carries speaker-independent evidence about the label.
fn draw_token(rng: &mut ChaCha8Rng, emotion: usize, cfg: &GeneratorConfig) -> usize {
    if rng.random::<f64>() < cfg.lexical_bias {
        1 + (2 * emotion + rng.random_range(0..2)) % cfg.vocab_size
    } else {
        rng.random_range(1..=cfg.vocab_size)
    }
}

/// Per-frame token id (0 for silence) for `tokens` laid out over `t_len`
/// frames: each token takes a contiguous run, with silent gaps around them.
fn frame_alignment(rng: &mut ChaCha8Rng, tokens: &[usize], t_len: usize) -> Vec<usize> {
    let n = tokens.len();
    // n token runs of >= 1 frame and n + 1 gaps of >= 0 frames; a gap between
    // two tokens gets at least one frame so equal neighbours stay separable.
    let mut runs = vec![1usize; n];
    let mut gaps = vec![0usize; n + 1];
    for g in gaps.iter_mut().take(n).skip(1) {
        *g = 1;
    }
    let used: usize = runs.iter().sum::<usize>() + gaps.iter().sum::<usize>();
    for _ in used..t_len {
        if rng.random::<f64>() < 0.6 {
            let i = rng.random_range(0..n);
            runs[i] += 1;
        } else {
            let i = rng.random_range(0..=n);
            gaps[i] += 1;
        }
    }
    let mut frames = Vec::with_capacity(t_len);
    for i in 0..n {
        frames.extend(std::iter::repeat_n(0, gaps[i]));
        frames.extend(std::iter::repeat_n(tokens[i], runs[i]));
    }
    frames.extend(std::iter::repeat_n(0, gaps[n]));
    frames
}

/// Deterministic synthetic corpus. Each frame of each layer is
/// `a_e(l) * (emotion + gender-specific emotion shift) * intensity
///  + a_g(l) * gender + a_s(l) * speaker + a_w(l) * token(frame) + noise`.
pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<Utterance>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latents = Latents::draw(cfg, &mut rng);
    let (l_n, d) = (cfg.layers, cfg.feat_dim);
    let profiles: Vec<LayerProfile> = (0..l_n).map(|l| layer_profile(l, l_n)).collect();
    let mut out = Vec::with_capacity(cfg.n_utterances);
    for u in 0..cfg.n_utterances {
        let emotion = sample_class(&mut rng, &cfg.class_probs);
        let speaker = rng.random_range(0..cfg.n_speakers);
        let gender = latents.speaker_gender[speaker];
        let n_tok = rng.random_range(1..=cfg.max_tokens);
        let tokens: Vec<usize> = (0..n_tok).map(|_| draw_token(&mut rng, emotion, cfg)).collect();
        let t_len = rng.random_range(cfg.frames_min..=cfg.frames_max);
        let align = frame_alignment(&mut rng, &tokens, t_len);
        let intensity = rng.random_range(0.6..1.4);
        let emo: Vec<f64> = latents.emotion[emotion]
            .iter()
            .zip(&latents.emotion_by_gender[emotion][gender])
            .map(|(a, b)| intensity * (a + b))
            .collect();

        let mut data = Vec::with_capacity(l_n * t_len * d);
        for p in &profiles {
            for &tok in &align {
                for k in 0..d {
                    let clean = p.emotion * emo[k]
                        + p.gender * latents.gender[gender][k]
                        + p.speaker * latents.speaker[speaker][k]
                        + if tok > 0 { p.token * latents.token[tok][k] } else { 0.0 };
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    // stored as f32 on disk; keep the in-memory corpus identical
                    data.push((clean + cfg.noise_scale * noise) as f32 as f64);
                }
            }
        }
        let stack = LayerStack::new(Tensor::new(vec![l_n, t_len, d], data)?)?;
        out.push(Utterance {
            id: format!("utt{u:05}"),
            stack,
            emotion,
            gender,
            speaker,
            tokens,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Speakers `>= n_speakers - test_speakers` go to test; the rest is split
/// randomly into train and dev.
pub fn split_corpus(corpus: Vec<Utterance>, cfg: &GeneratorConfig) -> Splits {
    let first_test = cfg.n_speakers - cfg.test_speakers;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5311_7000_u64);
    let mut splits = Splits::default();
    let mut rest = Vec::new();
    for u in corpus {
        if u.speaker >= first_test {
            splits.test.push(u);
        } else {
            rest.push(u);
        }
    }
    let mut idx: Vec<usize> = (0..rest.len()).collect();
    idx.shuffle(&mut rng);
    let n_dev = (rest.len() as f64 * cfg.dev_fraction).round() as usize;
    let dev: BTreeSet<usize> = idx[..n_dev].iter().copied().collect();
    for (i, u) in rest.into_iter().enumerate() {
        if dev.contains(&i) {
            splits.dev.push(u);
        } else {
            splits.train.push(u);
        }
    }
    splits
}

pub fn class_counts(corpus: &[Utterance]) -> Vec<usize> {
    let mut c = vec![0; NUM_EMOTIONS];
    for u in corpus {
        c[u.emotion] += 1;
    }
    c
}

pub fn encode_features(stack: &LayerStack) -> Vec<u8> {
    let t = stack.tensor();
    let mut buf = Vec::with_capacity(FEATURE_HEADER_LEN as usize + 4 * t.len());
    buf.extend_from_slice(&FEATURE_MAGIC);
    buf.push(FEATURE_VERSION);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<LayerStack> {
    let truncated = |expected: u64| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(FEATURE_HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < FEATURE_HEADER_LEN as usize {
        return Err(truncated(FEATURE_HEADER_LEN));
    }
    if bytes[4] != FEATURE_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: FEATURE_VERSION,
            found: bytes[4],
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().expect("u32")) as u64;
    let (l, t, d) = (dim(0), dim(1), dim(2));
    let expected = FEATURE_HEADER_LEN + 4 * l * t * d;
    if bytes.len() as u64 != expected {
        return Err(truncated(expected));
    }
    let data: Vec<f64> = bytes[FEATURE_HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("f32")) as f64)
        .collect();
    LayerStack::new(Tensor::new(vec![l as usize, t as usize, d as usize], data)?)
}

pub fn write_features(path: &Path, stack: &LayerStack) -> Result<()> {
    fs::write(path, encode_features(stack)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_features(path: &Path) -> Result<LayerStack> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_features(&bytes, path)
}

pub fn manifest_line(u: &Utterance, feature_path: &str) -> String {
    let toks: Vec<String> = u.tokens.iter().map(|t| t.to_string()).collect();
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}",
        u.id,
        feature_path,
        u.emotion,
        u.gender,
        u.speaker,
        toks.join(" ")
    )
}

/// Writes `features/<id>.lsf` under `dir` plus a manifest named `manifest_name`.
pub fn write_split(dir: &Path, manifest_name: &str, utts: &[Utterance]) -> Result<PathBuf> {
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(format!("creating {}", feat_dir.display()), e))?;
    let manifest = dir.join(manifest_name);
    let mut text = String::from("# id\tfeature_path\temotion\tgender\tspeaker\ttokens\n");
    for u in utts {
        let rel = format!("features/{}.lsf", u.id);
        write_features(&dir.join(&rel), &u.stack)?;
        text.push_str(&manifest_line(u, &rel));
        text.push('\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(format!("creating {}", manifest.display()), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", manifest.display()), e))?;
    Ok(manifest)
}

fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: usize,
    name: &str,
    raw: &str,
) -> Result<T> {
    raw.trim().parse().map_err(|_| Error::Manifest {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<Utterance>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let bad = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let emotion: usize = parse_field(path, line, "emotion", fields[2])?;
        let gender: usize = parse_field(path, line, "gender", fields[3])?;
        let speaker: usize = parse_field(path, line, "speaker", fields[4])?;
        let tokens = fields[5]
            .split_whitespace()
            .map(|t| parse_field::<usize>(path, line, "token", t))
            .collect::<Result<Vec<_>>>()?;
        if emotion >= NUM_EMOTIONS {
            return Err(bad(format!("emotion label {emotion} out of range [0, {NUM_EMOTIONS})")));
        }
        if gender >= NUM_GENDERS {
            return Err(bad(format!("gender label {gender} out of range [0, {NUM_GENDERS})")));
        }
        if tokens.contains(&0) {
            return Err(bad("token id 0 is reserved for the CTC blank".into()));
        }
        let feat = base.join(fields[1]);
        if !feat.is_file() {
            return Err(bad(format!("feature file {} not found", feat.display())));
        }
        let stack = read_features(&feat)?;
        out.push(Utterance {
            id: fields[0].to_string(),
            stack,
            emotion,
            gender,
            speaker,
            tokens,
        });
    }
    Ok(out)
}
