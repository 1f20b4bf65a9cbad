//! Deterministic generator of paired two-rate modality streams with
//! controllable per-stream SNR.
//!
//! Every utterance is a pure function of `(spec, split, index)`: the symbol
//! content, the per-frame jitter and the noise draws all come from
//! independently derived substreams, so changing a stream's SNR level leaves
//! the underlying clean content bit-identical.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Noise level for one stream.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Snr {
    Clean,
    Db(f64),
}

impl Snr {
    pub fn label(&self) -> String {
        match self {
            Snr::Clean => "clean".to_string(),
            Snr::Db(v) => {
                if v.fract() == 0.0 {
                    format!("{}dB", *v as i64)
                } else {
                    format!("{v}dB")
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Snr> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("clean") {
            return Ok(Snr::Clean);
        }
        let t = t.trim_end_matches("dB").trim_end_matches("db");
        t.parse::<f64>()
            .map(Snr::Db)
            .map_err(|_| Error::Config(format!("unparseable SNR {s:?}")))
    }
}

/// How a stream's noise level is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SnrSpec {
    Fixed(Snr),
    /// Per-utterance level drawn uniformly from {clean, 10, 5, 0} dB.
    MultiCondition,
}

impl SnrSpec {
    pub fn parse(s: &str) -> Result<SnrSpec> {
        if s.trim().eq_ignore_ascii_case("mc") || s.trim().eq_ignore_ascii_case("multi_condition")
        {
            Ok(SnrSpec::MultiCondition)
        } else {
            Ok(SnrSpec::Fixed(Snr::parse(s)?))
        }
    }
}

/// The multi-condition ladder.
pub const MC_LEVELS: [Snr; 4] = [Snr::Clean, Snr::Db(10.0), Snr::Db(5.0), Snr::Db(0.0)];

/// A noise burst confined to a window of the stream, in time fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurstWindow {
    pub start: f64,
    pub end: f64,
    pub snr: Snr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn tag(&self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    /// Number of data symbols (specials live in the model vocabulary).
    pub symbols: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Audio frames per symbol; four times the video rate.
    pub audio_frames_per_symbol: usize,
    pub video_frames_per_symbol: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Seeds both the fixed prototypes and every per-utterance stream.
    pub seed: u64,
    pub jitter: f64,
    pub audio_snr: SnrSpec,
    pub video_snr: SnrSpec,
    pub audio_burst: Vec<BurstWindow>,
    pub video_burst: Vec<BurstWindow>,
    pub sizes: SplitSizes,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            symbols: 20,
            len_min: 3,
            len_max: 8,
            audio_frames_per_symbol: 8,
            video_frames_per_symbol: 2,
            audio_dim: 16,
            video_dim: 16,
            seed: 1,
            jitter: 0.1,
            audio_snr: SnrSpec::Fixed(Snr::Clean),
            video_snr: SnrSpec::Fixed(Snr::Clean),
            audio_burst: Vec::new(),
            video_burst: Vec::new(),
            sizes: SplitSizes {
                train: 2000,
                dev: 200,
                test: 400,
            },
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.symbols == 0 || self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "bad symbol/length settings: {} symbols, lengths {}..={}",
                self.symbols, self.len_min, self.len_max
            )));
        }
        if self.audio_frames_per_symbol != 4 * self.video_frames_per_symbol {
            return Err(Error::Config(format!(
                "audio frames per symbol ({}) must be 4x video ({})",
                self.audio_frames_per_symbol, self.video_frames_per_symbol
            )));
        }
        validate_burst(&self.audio_burst)?;
        validate_burst(&self.video_burst)?;
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.sizes.train,
            Split::Dev => self.sizes.dev,
            Split::Test => self.sizes.test,
        }
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        let json = serde_json::to_string(self)?;
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        Ok(h.finalize().into())
    }
}

fn validate_burst(schedule: &[BurstWindow]) -> Result<()> {
    let mut sorted: Vec<&BurstWindow> = schedule.iter().collect();
    sorted.sort_by(|a, b| a.start.partial_cmp(&b.start).expect("finite fractions"));
    let mut prev_end = 0.0;
    for w in sorted {
        if !(0.0..=1.0).contains(&w.start) || !(0.0..=1.0).contains(&w.end) || w.start >= w.end {
            return Err(Error::Contract(format!(
                "burst window [{}, {}) outside [0, 1]",
                w.start, w.end
            )));
        }
        if w.start < prev_end {
            return Err(Error::Contract(format!(
                "burst windows overlap at {}",
                w.start
            )));
        }
        if let Snr::Db(v) = w.snr {
            if !v.is_finite() {
                return Err(Error::Contract("burst SNR must be finite".to_string()));
            }
        }
        prev_end = w.end;
    }
    Ok(())
}

/// One modality's feature stream plus what noise was applied to it.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamData {
    /// `[T, D]`
    pub features: Tensor,
    pub applied_snr: Snr,
    pub burst: Vec<BurstWindow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Data-symbol ids in `0..spec.symbols`.
    pub symbols: Vec<u32>,
    pub audio: Option<StreamData>,
    pub video: Option<StreamData>,
}

impl Utterance {
    pub fn audio_stream(&self) -> Option<&StreamData> {
        self.audio.as_ref()
    }

    pub fn video_stream(&self) -> Option<&StreamData> {
        self.video.as_ref()
    }
}

/// Per-symbol prototype vectors, drawn once per spec seed and then fixed.
pub struct Prototypes {
    /// `symbols x audio_dim`
    pub audio: Tensor,
    /// `symbols x video_dim`
    pub video: Tensor,
}

impl Prototypes {
    pub fn new(spec: &CorpusSpec) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(mix(spec.seed, 0x70726f746f));
        let draw = |rng: &mut ChaCha12Rng, rows: usize, cols: usize| {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(vec![rows, cols], data).expect("numel")
        };
        let audio = draw(&mut rng, spec.symbols, spec.audio_dim);
        let video = draw(&mut rng, spec.symbols, spec.video_dim);
        Prototypes { audio, video }
    }
}

/// SplitMix64-style stream derivation.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn utterance_rng(spec: &CorpusSpec, split: Split, index: usize, stream: u64) -> ChaCha12Rng {
    let base = mix(mix(spec.seed, split.tag()), index as u64 + 1);
    ChaCha12Rng::seed_from_u64(mix(base, stream))
}

/// Mean per-coordinate power of a stream.
fn signal_power(features: &Tensor) -> f64 {
    let d = features.data();
    d.iter().map(|&v| v * v).sum::<f64>() / d.len() as f64
}

/// Adds zero-mean white Gaussian noise scaled so that
/// `signal_power / noise_power = 10^(snr_db / 10)`; `Clean` is the identity
/// and consumes no randomness.
pub fn apply_noise(features: &Tensor, snr: Snr, rng: &mut ChaCha12Rng) -> Result<Tensor> {
    match snr {
        Snr::Clean => Ok(features.clone()),
        Snr::Db(db) => {
            if !db.is_finite() {
                return Err(Error::Contract(format!("SNR must be finite, got {db}")));
            }
            let sigma = (signal_power(features) / 10f64.powf(db / 10.0)).sqrt();
            let mut out = features.clone();
            for v in out.data_mut() {
                let n: f64 = rng.sample(StandardNormal);
                *v += sigma * n;
            }
            Ok(out)
        }
    }
}

/// Applies noise only inside the scheduled windows. A frame at index `t` of
/// `T` falls in a window when `start <= t/T < end`, so the degenerate window
/// `(0, 1)` covers every frame and draws noise in the same order as
/// [`apply_noise`]. Noise scale uses the whole stream's clean power.
pub fn apply_burst(
    features: &Tensor,
    schedule: &[BurstWindow],
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    validate_burst(schedule)?;
    if schedule.is_empty() {
        return Ok(features.clone());
    }
    let (t_len, d) = features.dims2()?;
    let power = signal_power(features);
    let mut windows: Vec<&BurstWindow> = schedule.iter().collect();
    windows.sort_by(|a, b| a.start.partial_cmp(&b.start).expect("finite fractions"));
    let mut out = features.clone();
    for w in windows {
        let sigma = match w.snr {
            Snr::Clean => continue,
            Snr::Db(db) => (power / 10f64.powf(db / 10.0)).sqrt(),
        };
        for t in 0..t_len {
            let frac = t as f64 / t_len as f64;
            if frac >= w.start && frac < w.end {
                for v in &mut out.data_mut()[t * d..(t + 1) * d] {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += sigma * n;
                }
            }
        }
    }
    Ok(out)
}

/// Whether an audio frame index lies inside any scheduled burst window.
pub fn frame_in_burst(schedule: &[BurstWindow], frame: usize, total: usize) -> bool {
    let frac = frame as f64 / total as f64;
    schedule.iter().any(|w| frac >= w.start && frac < w.end)
}

fn resolve_snr(spec_snr: SnrSpec, cond_rng: &mut ChaCha12Rng) -> Snr {
    match spec_snr {
        SnrSpec::Fixed(s) => s,
        SnrSpec::MultiCondition => MC_LEVELS[cond_rng.random_range(0..MC_LEVELS.len())],
    }
}

/// Generates one utterance. Identical `(spec, split, index)` produce
/// bit-identical output.
pub fn generate(spec: &CorpusSpec, split: Split, index: usize) -> Result<Utterance> {
    let protos = Prototypes::new(spec);
    generate_with(&protos, spec, split, index)
}

/// Same as [`generate`] but reuses precomputed prototypes.
pub fn generate_with(
    protos: &Prototypes,
    spec: &CorpusSpec,
    split: Split,
    index: usize,
) -> Result<Utterance> {
    spec.validate()?;
    let size = spec.split_size(split);
    if index >= size {
        return Err(Error::Range(format!(
            "index {index} out of range for {} split of {size}",
            split.name()
        )));
    }

    let mut content_rng = utterance_rng(spec, split, index, 1);
    let mut audio_noise_rng = utterance_rng(spec, split, index, 2);
    let mut video_noise_rng = utterance_rng(spec, split, index, 3);
    let mut cond_rng = utterance_rng(spec, split, index, 4);

    let len = content_rng.random_range(spec.len_min..=spec.len_max);
    let symbols: Vec<u32> = (0..len)
        .map(|_| content_rng.random_range(0..spec.symbols as u32))
        .collect();

    let clean_stream = |protos: &Tensor, frames_per_symbol: usize, dim: usize,
                        rng: &mut ChaCha12Rng| {
        let mut data = Vec::with_capacity(len * frames_per_symbol * dim);
        for &s in &symbols {
            let proto = protos.row(s as usize);
            for _ in 0..frames_per_symbol {
                for &p in proto {
                    let n: f64 = rng.sample(StandardNormal);
                    data.push(p + spec.jitter * n);
                }
            }
        }
        Tensor::new(vec![len * frames_per_symbol, dim], data).expect("numel")
    };

    let audio_clean = clean_stream(
        &protos.audio,
        spec.audio_frames_per_symbol,
        spec.audio_dim,
        &mut content_rng,
    );
    let video_clean = clean_stream(
        &protos.video,
        spec.video_frames_per_symbol,
        spec.video_dim,
        &mut content_rng,
    );

    let finish = |clean: Tensor,
                  snr_spec: SnrSpec,
                  burst: &[BurstWindow],
                  cond_rng: &mut ChaCha12Rng,
                  noise_rng: &mut ChaCha12Rng|
     -> Result<StreamData> {
        let snr = resolve_snr(snr_spec, cond_rng);
        let noised = apply_noise(&clean, snr, noise_rng)?;
        let features = apply_burst(&noised, burst, noise_rng)?;
        Ok(StreamData {
            features,
            applied_snr: snr,
            burst: burst.to_vec(),
        })
    };

    let audio = finish(
        audio_clean,
        spec.audio_snr,
        &spec.audio_burst,
        &mut cond_rng,
        &mut audio_noise_rng,
    )?;
    let video = finish(
        video_clean,
        spec.video_snr,
        &spec.video_burst,
        &mut cond_rng,
        &mut video_noise_rng,
    )?;

    Ok(Utterance {
        id: format!("{}-{index:05}", split.name()),
        symbols,
        audio: Some(audio),
        video: Some(video),
    })
}

/// A fully materialized split, optionally backed by an on-disk cache.
pub struct Corpus {
    pub spec: CorpusSpec,
    utterances: BTreeMap<Split, Vec<Utterance>>,
}

impl Corpus {
    /// Generates every split in memory.
    pub fn materialize(spec: &CorpusSpec) -> Result<Self> {
        spec.validate()?;
        let protos = Prototypes::new(spec);
        let mut utterances = BTreeMap::new();
        for split in [Split::Train, Split::Dev, Split::Test] {
            let n = spec.split_size(split);
            let mut v = Vec::with_capacity(n);
            for i in 0..n {
                v.push(generate_with(&protos, spec, split, i)?);
            }
            utterances.insert(split, v);
        }
        Ok(Corpus {
            spec: spec.clone(),
            utterances,
        })
    }

    pub fn split(&self, split: Split) -> &[Utterance] {
        &self.utterances[&split]
    }

    /// Loads splits from `dir` when the cached spec digest matches,
    /// regenerating (and rewriting the cache) otherwise.
    pub fn load_or_materialize(spec: &CorpusSpec, dir: &Path) -> Result<Self> {
        let digest = spec.digest()?;
        let mut utterances = BTreeMap::new();
        let mut all_cached = true;
        for split in [Split::Train, Split::Dev, Split::Test] {
            match read_split_cache(&cache_path(dir, split), &digest) {
                Ok(Some(v)) if v.len() == spec.split_size(split) => {
                    utterances.insert(split, v);
                }
                _ => {
                    all_cached = false;
                    break;
                }
            }
        }
        if all_cached {
            return Ok(Corpus {
                spec: spec.clone(),
                utterances,
            });
        }
        let corpus = Corpus::materialize(spec)?;
        corpus.write_cache(dir)?;
        Ok(corpus)
    }

    pub fn write_cache(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let digest = self.spec.digest()?;
        for (split, utts) in &self.utterances {
            write_split_cache(&cache_path(dir, *split), &digest, utts)?;
        }
        Ok(())
    }
}

fn cache_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.avfcorp", split.name()))
}

const CACHE_MAGIC: &[u8; 8] = b"AVFCORP1";

fn write_stream<W: Write>(w: &mut W, s: &StreamData) -> Result<()> {
    binio::write_string(w, &s.applied_snr.label())?;
    binio::write_u32(w, s.burst.len() as u32)?;
    for b in &s.burst {
        binio::write_f64(w, b.start)?;
        binio::write_f64(w, b.end)?;
        binio::write_string(w, &b.snr.label())?;
    }
    binio::write_tensor(w, &s.features)
}

fn read_stream<R: Read>(r: &mut R) -> Result<StreamData> {
    let applied_snr = Snr::parse(&binio::read_string(r)?)?;
    let nb = binio::read_u32(r)? as usize;
    let mut burst = Vec::with_capacity(nb);
    for _ in 0..nb {
        let start = binio::read_f64(r)?;
        let end = binio::read_f64(r)?;
        let snr = Snr::parse(&binio::read_string(r)?)?;
        burst.push(BurstWindow { start, end, snr });
    }
    let features = binio::read_tensor(r)?;
    Ok(StreamData {
        features,
        applied_snr,
        burst,
    })
}

fn write_split_cache(path: &Path, digest: &[u8; 32], utts: &[Utterance]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CACHE_MAGIC)?;
    w.write_all(digest)?;
    binio::write_u64(&mut w, utts.len() as u64)?;
    for u in utts {
        binio::write_string(&mut w, &u.id)?;
        binio::write_u32(&mut w, u.symbols.len() as u32)?;
        for &s in &u.symbols {
            binio::write_u32(&mut w, s)?;
        }
        for stream in [&u.audio, &u.video] {
            match stream {
                Some(s) => {
                    binio::write_u32(&mut w, 1)?;
                    write_stream(&mut w, s)?;
                }
                None => binio::write_u32(&mut w, 0)?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `Ok(None)` on digest mismatch (regeneration preferred), error on a
/// structurally broken file.
fn read_split_cache(path: &Path, digest: &[u8; 32]) -> Result<Option<Vec<Utterance>>> {
    if !path.exists() {
        return Ok(None);
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Ok(None);
    }
    let mut got = [0u8; 32];
    r.read_exact(&mut got)?;
    if &got != digest {
        return Ok(None);
    }
    let n = binio::read_u64(&mut r)? as usize;
    let mut utts = Vec::with_capacity(n);
    for _ in 0..n {
        let id = binio::read_string(&mut r)?;
        let ns = binio::read_u32(&mut r)? as usize;
        let mut symbols = Vec::with_capacity(ns);
        for _ in 0..ns {
            symbols.push(binio::read_u32(&mut r)?);
        }
        let mut streams = [None, None];
        for slot in &mut streams {
            if binio::read_u32(&mut r)? == 1 {
                *slot = Some(read_stream(&mut r)?);
            }
        }
        let [audio, video] = streams;
        utts.push(Utterance {
            id,
            symbols,
            audio,
            video,
        });
    }
    Ok(Some(utts))
}
