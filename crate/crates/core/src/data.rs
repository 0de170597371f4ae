//! Dataset ingestion, preprocessing (subject averaging, windowing, length
//! filtering, splitting) and the synthetic paired-modality generator.
//!
//! On-disk formats are plain text with a version header line:
//!
//! * manifest: `# mer-manifest v1`, then `key=value` lines (`dataset`, `range`,
//!   `music_hop`, `emotion_hop`, `music_width`) and one
//!   `sample <id> <music-file> <annotation-file>...` line per sample, paths
//!   relative to the manifest's directory;
//! * features: `# mer-features v1 width=<k>`, one comma-separated frame per line;
//! * annotations: `# mer-annotations v1`, one `valence,arousal` pair per line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RandomState, Tensor};

pub const MUSIC_HOP: f64 = 0.96;
pub const EMOTION_HOP: f64 = 0.5;
pub const MUSIC_WIDTH: usize = 128;
pub const MIN_SECONDS: f64 = 7.0;
pub const WINDOW_START: f64 = 15.0;
pub const WINDOW_END: f64 = 45.0;

const MANIFEST_HEADER: &str = "# mer-manifest v1";
const FEATURES_HEADER: &str = "# mer-features v1";
const ANNOTATIONS_HEADER: &str = "# mer-annotations v1";
const TIME_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Fixed 45 s excerpts; windowed to 15–45 s.
    Deam,
    /// Variable-length choruses; first 15 s dropped, then length-filtered.
    Pmemo,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deam" => Ok(Self::Deam),
            "pmemo" => Ok(Self::Pmemo),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!(
                "unknown dataset '{other}' (expected deam, pmemo or synthetic)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Deam => "deam",
            Self::Pmemo => "pmemo",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Declared range of annotation intensities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueRange {
    /// `[-1, 1]`.
    Signed,
    /// `[0, 1]`.
    Unit,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            Self::Signed => (-1.0, 1.0),
            Self::Unit => (0.0, 1.0),
        }
    }

    fn squash(self, x: f64) -> f64 {
        match self {
            Self::Signed => x.tanh(),
            Self::Unit => crate::numerics::ops::sigmoid_scalar(x),
        }
    }
}

impl std::str::FromStr for ValueRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(Self::Signed),
            "unit" => Ok(Self::Unit),
            other => Err(Error::Config(format!(
                "unknown range '{other}' (expected signed or unit)"
            ))),
        }
    }
}

impl std::fmt::Display for ValueRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Signed => "signed",
            Self::Unit => "unit",
        })
    }
}

/// One music sample and its (subject-averaged) valence/arousal sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    /// `T_m × width` acoustic frames.
    pub music: Tensor,
    /// `T_e × 2` rows of `(valence, arousal)`.
    pub emotion: Tensor,
    pub dataset: DatasetKind,
}

impl PairedSample {
    /// Annotated duration in seconds.
    pub fn emotion_seconds(&self) -> f64 {
        self.emotion.rows() as f64 * EMOTION_HOP
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub music: PathBuf,
    pub annotations: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub dataset: DatasetKind,
    pub range: ValueRange,
    pub music_hop: f64,
    pub emotion_hop: f64,
    pub music_width: usize,
    /// Already windowed/filtered; loading skips [`preprocess`].
    pub prepared: bool,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, dataset: DatasetKind, range: ValueRange) -> Self {
        Self {
            root: root.into(),
            dataset,
            range,
            music_hop: MUSIC_HOP,
            emotion_hop: EMOTION_HOP,
            music_width: MUSIC_WIDTH,
            prepared: false,
            entries: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, path, root)
    }

    pub fn parse(text: &str, path: &Path, root: PathBuf) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::parse(
                    path,
                    1,
                    format!("expected header '{MANIFEST_HEADER}'"),
                ))
            }
        }
        let mut m = Self::new(root, DatasetKind::Synthetic, ValueRange::Signed);
        for (i, raw) in lines {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::parse(path, line_no, msg);
            if let Some(rest) = line.strip_prefix("sample ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() < 3 {
                    return Err(bad(
                        "sample line needs an id, a feature file and at least one annotation file"
                            .into(),
                    ));
                }
                m.entries.push(ManifestEntry {
                    id: parts[0].to_string(),
                    music: PathBuf::from(parts[1]),
                    annotations: parts[2..].iter().map(PathBuf::from).collect(),
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| v.parse::<f64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "dataset" => m.dataset = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "range" => m.range = value.parse().map_err(|e: Error| bad(e.to_string()))?,
                "music_hop" => m.music_hop = num(value)?,
                "emotion_hop" => m.emotion_hop = num(value)?,
                "music_width" => {
                    m.music_width = value.parse().map_err(|e| bad(format!("{key}: {e}")))?
                }
                "prepared" => m.prepared = value.parse().map_err(|e| bad(format!("{key}: {e}")))?,
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "dataset={}", self.dataset).unwrap();
        writeln!(s, "range={}", self.range).unwrap();
        writeln!(s, "music_hop={}", self.music_hop).unwrap();
        writeln!(s, "emotion_hop={}", self.emotion_hop).unwrap();
        writeln!(s, "music_width={}", self.music_width).unwrap();
        writeln!(s, "prepared={}", self.prepared).unwrap();
        for e in &self.entries {
            write!(s, "sample {} {}", e.id, e.music.display()).unwrap();
            for a in &e.annotations {
                write!(s, " {}", a.display()).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn parse_rows(text: &str, path: &Path, width: usize, first_line: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, raw) in text.lines().enumerate().skip(1) {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let line_no = i + first_line;
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|e| {
                Error::parse(path, line_no, format!("bad number '{}': {e}", field.trim()))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, line_no, "non-finite value"));
            }
            data.push(v);
            count += 1;
        }
        if count != width {
            return Err(Error::parse(
                path,
                line_no,
                format!("expected {width} values, found {count}"),
            ));
        }
        rows += 1;
    }
    Tensor::matrix(rows, width, data)
}

/// Reads a feature file; every row must have `width` columns.
pub fn read_features(path: &Path, width: usize) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    let declared = header
        .strip_prefix(FEATURES_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("width="))
        .and_then(|w| w.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::parse(
                path,
                1,
                format!("expected header '{FEATURES_HEADER} width=<n>'"),
            )
        })?;
    if declared != width {
        return Err(Error::parse(
            path,
            1,
            format!("declared width {declared}, dataset expects {width}"),
        ));
    }
    parse_rows(&text, path, width, 1)
}

/// Reads one subject's annotation file and checks the declared range.
pub fn read_annotations(path: &Path, range: ValueRange) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.lines().next().map(str::trim) != Some(ANNOTATIONS_HEADER) {
        return Err(Error::parse(
            path,
            1,
            format!("expected header '{ANNOTATIONS_HEADER}'"),
        ));
    }
    let t = parse_rows(&text, path, 2, 1)?;
    let (lo, hi) = range.bounds();
    if let Some(pos) = t.data().iter().position(|v| *v < lo || *v > hi) {
        return Err(Error::parse(
            path,
            pos / 2 + 2,
            format!("value {} outside [{lo}, {hi}]", t.data()[pos]),
        ));
    }
    Ok(t)
}

fn format_rows(header: &str, t: &Tensor) -> String {
    let mut s = String::with_capacity(t.len() * 20);
    s.push_str(header);
    s.push('\n');
    for i in 0..t.rows() {
        for (j, v) in t.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn features_text(t: &Tensor) -> String {
    format_rows(&format!("{FEATURES_HEADER} width={}", t.cols()), t)
}

pub fn annotations_text(t: &Tensor) -> String {
    format_rows(ANNOTATIONS_HEADER, t)
}

/// Elementwise mean over subjects at each time point.
pub fn average_annotations(subjects: &[Tensor]) -> Result<Tensor> {
    let first = subjects
        .first()
        .ok_or_else(|| Error::Alignment("no annotation subjects".into()))?;
    if let Some(bad) = subjects.iter().find(|s| s.shape() != first.shape()) {
        return Err(Error::Alignment(format!(
            "subject sequences differ in shape: {:?} vs {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    let mut acc = vec![0.0; first.len()];
    for s in subjects {
        for (a, v) in acc.iter_mut().zip(s.data()) {
            *a += v;
        }
    }
    let n = subjects.len() as f64;
    for a in &mut acc {
        *a /= n;
    }
    Tensor::new(first.shape().to_vec(), acc)
}

/// Loads every manifest entry in order, averaging annotation subjects.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<PairedSample>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let music = read_features(&manifest.root.join(&e.music), manifest.music_width)?;
            let subjects = e
                .annotations
                .iter()
                .map(|a| read_annotations(&manifest.root.join(a), manifest.range))
                .collect::<Result<Vec<_>>>()?;
            let emotion = average_annotations(&subjects)?;
            Ok(PairedSample {
                id: e.id.clone(),
                music,
                emotion,
                dataset: manifest.dataset,
            })
        })
        .collect()
}

/// Writes samples as a manifest plus one feature and one annotation file each.
pub fn write_dataset(
    dir: &Path,
    samples: &[PairedSample],
    dataset: DatasetKind,
    range: ValueRange,
) -> Result<DatasetManifest> {
    for sub in ["music", "emotion"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut manifest = DatasetManifest::new(dir, dataset, range);
    manifest.prepared = true;
    if let Some(s) = samples.first() {
        manifest.music_width = s.music.cols();
    }
    for s in samples {
        let music = PathBuf::from("music").join(format!("{}.csv", s.id));
        let emotion = PathBuf::from("emotion").join(format!("{}.csv", s.id));
        crate::io::write_atomic(&dir.join(&music), features_text(&s.music).as_bytes())?;
        crate::io::write_atomic(&dir.join(&emotion), annotations_text(&s.emotion).as_bytes())?;
        manifest.entries.push(ManifestEntry {
            id: s.id.clone(),
            music,
            annotations: vec![emotion],
        });
    }
    crate::io::write_atomic(&dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Rows whose frame end time `(t + 1)·hop` lies in `(start, end]`.
fn frame_range(len: usize, hop: f64, start: f64, end: Option<f64>) -> std::ops::Range<usize> {
    let first = (0..len)
        .find(|&t| (t + 1) as f64 * hop > start + TIME_TOL)
        .unwrap_or(len);
    let stop = match end {
        Some(e) => (first..len)
            .find(|&t| (t + 1) as f64 * hop > e + TIME_TOL)
            .unwrap_or(len),
        None => len,
    };
    first..stop
}

fn rows(t: &Tensor, r: std::ops::Range<usize>) -> Tensor {
    let idx: Vec<usize> = r.collect();
    t.select_rows(&idx)
}

/// Keeps the 15–45 s segment of both modalities.
///
/// A frame is kept when its end time lies in `(15, 45]`: emotion rows 30..90
/// (60 frames) and music rows 15..46 (31 frames).
pub fn window_deam(sample: &PairedSample) -> Result<PairedSample> {
    // Every frame ending at or before the window end must be present.
    let covered = |len: usize, hop: f64| len >= (WINDOW_END / hop + TIME_TOL).floor() as usize;
    if !covered(sample.emotion.rows(), EMOTION_HOP) || !covered(sample.music.rows(), MUSIC_HOP) {
        return Err(Error::Coverage(format!(
            "sample {} has {} annotation and {} audio frames; coverage to {WINDOW_END} s needs 90 and 46",
            sample.id,
            sample.emotion.rows(),
            sample.music.rows()
        )));
    }
    let e = frame_range(
        sample.emotion.rows(),
        EMOTION_HOP,
        WINDOW_START,
        Some(WINDOW_END),
    );
    let m = frame_range(
        sample.music.rows(),
        MUSIC_HOP,
        WINDOW_START,
        Some(WINDOW_END),
    );
    Ok(PairedSample {
        emotion: rows(&sample.emotion, e),
        music: rows(&sample.music, m),
        ..sample.clone()
    })
}

/// Drops the first `seconds` of both modalities (same end-time rule as [`window_deam`]).
pub fn trim_leading(sample: &PairedSample, seconds: f64) -> PairedSample {
    let e = frame_range(sample.emotion.rows(), EMOTION_HOP, seconds, None);
    let m = frame_range(sample.music.rows(), MUSIC_HOP, seconds, None);
    PairedSample {
        emotion: rows(&sample.emotion, e),
        music: rows(&sample.music, m),
        ..sample.clone()
    }
}

/// Keeps samples whose annotated duration is at least `min_seconds` (inclusive).
pub fn filter_min_length(samples: Vec<PairedSample>, min_seconds: f64) -> Vec<PairedSample> {
    samples
        .into_iter()
        .filter(|s| s.emotion_seconds() + TIME_TOL >= min_seconds && s.music.rows() > 0)
        .collect()
}

/// Applies the dataset's preprocessing rule.
pub fn preprocess(samples: Vec<PairedSample>, dataset: DatasetKind) -> Result<Vec<PairedSample>> {
    match dataset {
        DatasetKind::Deam => samples.iter().map(window_deam).collect(),
        DatasetKind::Pmemo => Ok(filter_min_length(
            samples
                .iter()
                .map(|s| trim_leading(s, WINDOW_START))
                .collect(),
            MIN_SECONDS,
        )),
        DatasetKind::Synthetic => Ok(samples),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.8,
            seed,
        }
    }

    pub fn train_size(&self, n: usize) -> usize {
        ((self.train_fraction * n as f64) + 1e-9).floor() as usize
    }
}

/// Seeded shuffle, then the first `floor(fraction·n)` samples train.
pub fn split<T: Clone>(samples: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if samples.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    RandomState::new(spec.seed).shuffle(&mut order);
    let cut = spec.train_size(samples.len());
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Parameters of the synthetic paired-modality generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub latent_dim: usize,
    pub noise_scale: f64,
    /// Inclusive range of emotion frame counts.
    pub seq_len: (usize, usize),
    /// Extra music-only factors, unrelated to the emotion.
    pub nuisance_dim: usize,
    pub nuisance_scale: f64,
    pub range: ValueRange,
    pub music_width: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 250,
            latent_dim: 4,
            noise_scale: 0.1,
            seq_len: (10, 20),
            nuisance_dim: 4,
            nuisance_scale: 1.0,
            range: ValueRange::Signed,
            music_width: MUSIC_WIDTH,
        }
    }
}

/// Fixed mixing matrices of the generator, drawn from the seed.
///
/// Music frames are `A z + N u + noise`; emotion frames are
/// `squash(B z + s_t C z + noise)` with `s_t` ramping from −1 to 1, so the
/// sequence's start and end carry all latent factors while its time average
/// is two-dimensional.
#[derive(Clone, Debug)]
pub struct SynthModel {
    pub spec: SynthSpec,
    pub music_mix: Tensor,
    pub nuisance_mix: Tensor,
    pub level: Tensor,
    pub trend: Tensor,
}

fn gaussian_matrix(rng: &mut RandomState, rows: usize, cols: usize, scale: f64) -> Tensor {
    let s = scale / (cols.max(1) as f64).sqrt();
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| s * rng.normal()).collect(),
    )
    .expect("sized")
}

impl SynthModel {
    pub fn new(spec: &SynthSpec, seed: u64) -> Result<Self> {
        if spec.latent_dim == 0 || spec.music_width == 0 {
            return Err(Error::InvalidArgument(
                "latent and music widths must be >= 1".into(),
            ));
        }
        if spec.seq_len.0 == 0 || spec.seq_len.0 > spec.seq_len.1 {
            return Err(Error::InvalidArgument(format!(
                "invalid sequence length range {:?}",
                spec.seq_len
            )));
        }
        if !(spec.noise_scale >= 0.0) || !(spec.nuisance_scale >= 0.0) {
            return Err(Error::InvalidArgument("noise scales must be >= 0".into()));
        }
        let mut rng = RandomState::with_stream(seed, 0);
        let k = spec.latent_dim;
        Ok(Self {
            spec: spec.clone(),
            music_mix: gaussian_matrix(&mut rng, spec.music_width, k, 1.0),
            nuisance_mix: gaussian_matrix(
                &mut rng,
                spec.music_width,
                spec.nuisance_dim,
                spec.nuisance_scale,
            ),
            level: gaussian_matrix(&mut rng, 2, k, 1.0),
            trend: gaussian_matrix(&mut rng, 2, k, 1.0),
        })
    }

    /// One sample for given latent factors; `rng` supplies only the frame noise.
    pub fn sample(
        &self,
        id: String,
        latent: &[f64],
        nuisance: &[f64],
        emotion_frames: usize,
        rng: &mut RandomState,
    ) -> PairedSample {
        let spec = &self.spec;
        let mix = |m: &Tensor, v: &[f64]| -> Vec<f64> {
            (0..m.rows())
                .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
                .collect()
        };
        let music_frames =
            ((emotion_frames as f64 * EMOTION_HOP / MUSIC_HOP).round() as usize).max(1);
        let centre: Vec<f64> = mix(&self.music_mix, latent)
            .iter()
            .zip(mix(&self.nuisance_mix, nuisance))
            .map(|(a, b)| a + b)
            .collect();
        let mut music = Vec::with_capacity(music_frames * spec.music_width);
        for _ in 0..music_frames {
            music.extend(centre.iter().map(|c| c + spec.noise_scale * rng.normal()));
        }
        let level = mix(&self.level, latent);
        let trend = mix(&self.trend, latent);
        let mut emotion = Vec::with_capacity(emotion_frames * 2);
        for t in 0..emotion_frames {
            let s = if emotion_frames > 1 {
                2.0 * t as f64 / (emotion_frames - 1) as f64 - 1.0
            } else {
                0.0
            };
            for c in 0..2 {
                let x = level[c] + s * trend[c] + spec.noise_scale * rng.normal();
                emotion.push(spec.range.squash(x));
            }
        }
        PairedSample {
            id,
            music: Tensor::matrix(music_frames, spec.music_width, music).expect("sized"),
            emotion: Tensor::matrix(emotion_frames, 2, emotion).expect("sized"),
            dataset: DatasetKind::Synthetic,
        }
    }
}

/// Deterministic synthetic dataset; sample `i` depends only on `(seed, i)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Vec<PairedSample>> {
    if spec.n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let model = SynthModel::new(spec, seed)?;
    Ok((0..spec.n)
        .map(|i| {
            let mut rng = RandomState::with_stream(seed, 1 + i as u64);
            let latent: Vec<f64> = (0..spec.latent_dim).map(|_| rng.normal()).collect();
            let nuisance: Vec<f64> = (0..spec.nuisance_dim).map(|_| rng.normal()).collect();
            let len = rng.int_inclusive(spec.seq_len.0, spec.seq_len.1);
            model.sample(format!("s{i:04}"), &latent, &nuisance, len, &mut rng)
        })
        .collect())
}
