//! Episode datasets: parsing, validation, normalization, splitting and action binning.
//!
//! Episode files are UTF-8, one step per line:
//!
//! ```text
//! #dims <d_obs> <d_act>
//! <episode_id>\t<t>\t<o_1,...,o_d>\t<a_1,...,a_k>\t<reward>\t<terminal 0|1>\t<-|discharge|death>
//! ```
//!
//! Steps of an episode are contiguous, numbered from zero, and exactly the last
//! one carries the terminal flag. Other `#` lines are comments.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::textfmt::{FormatError, Provenance, TextReader, TextWriter};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("missing `#dims d_obs d_act` header")]
    MissingHeader,
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: expected {expected} {what} values, found {found}")]
    Dimension {
        line: usize,
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("unterminated episode {0}")]
    Unterminated(u64),
    #[error("line {line}: episode {episode} continues after its terminal step")]
    StepAfterTerminal { line: usize, episode: u64 },
    #[error("line {line}: episode {episode} appears in more than one block")]
    DuplicateEpisode { line: usize, episode: u64 },
    #[error("episodes disagree on dimensions: ({0}, {1}) vs ({2}, {3})")]
    InconsistentDims(usize, usize, usize, usize),
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("action binning needs at least 2 bins per dimension, got {0}")]
    TooFewBins(usize),
    #[error("dataset has no episodes")]
    Empty,
    #[error(transparent)]
    Format(#[from] FormatError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    None,
    Discharge,
    Death,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::None => "-",
            Outcome::Discharge => "discharge",
            Outcome::Death => "death",
        }
    }

    fn parse(s: &str) -> Option<Outcome> {
        match s {
            "-" => Some(Outcome::None),
            "discharge" => Some(Outcome::Discharge),
            "death" => Some(Outcome::Death),
            _ => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub is_terminal: bool,
    /// Only meaningful on the terminal step.
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: u64,
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn outcome(&self) -> Outcome {
        self.steps.last().map(|s| s.outcome).unwrap_or(Outcome::None)
    }

    /// Discounted return from the first step.
    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.steps
            .iter()
            .enumerate()
            .map(|(t, s)| gamma.powi(t as i32) * s.reward)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Development,
    Test,
}

/// Per observation dimension `(min, max)` taken from the development set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationBounds {
    pub ranges: Vec<(f64, f64)>,
}

impl NormalizationBounds {
    pub fn to_text(&self, prov: &Provenance) -> String {
        let mut w = TextWriter::new("astc-normalization", 1);
        prov.write(&mut w);
        let lo: Vec<f64> = self.ranges.iter().map(|r| r.0).collect();
        let hi: Vec<f64> = self.ranges.iter().map(|r| r.1).collect();
        w.vector("min", &lo).vector("max", &hi);
        w.finish()
    }

    pub fn from_text(text: &str) -> Result<(Self, Provenance)> {
        let mut r = TextReader::new(text, "astc-normalization", 1)?;
        let prov = Provenance::read(&mut r)?;
        let lo: Vec<f64> = r.vector("min")?;
        let hi: Vec<f64> = r.vector("max")?;
        if lo.len() != hi.len() {
            return Err(FormatError::Malformed {
                line: 0,
                msg: format!("{} minima but {} maxima", lo.len(), hi.len()),
            }
            .into());
        }
        Ok((
            NormalizationBounds {
                ranges: lo.into_iter().zip(hi).collect(),
            },
            prov,
        ))
    }

    pub fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(&self.ranges)
            .map(|(&x, &(lo, hi))| {
                if hi > lo {
                    ((x - lo) / (hi - lo)).clamp(0.0, 1.0)
                } else {
                    0.5
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub d_obs: usize,
    pub d_act: usize,
    pub normalization: Option<NormalizationBounds>,
    pub split_tag: SplitTag,
}

impl Dataset {
    pub fn new(episodes: Vec<Episode>, d_obs: usize, d_act: usize) -> Self {
        Dataset {
            episodes,
            d_obs,
            d_act,
            normalization: None,
            split_tag: SplitTag::Development,
        }
    }

    pub fn n_steps(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| s.obs.clone()))
            .collect()
    }

    pub fn steps(&self) -> impl Iterator<Item = &EpisodeStep> {
        self.episodes.iter().flat_map(|e| e.steps.iter())
    }
}

/// Validation knobs applied while loading.
#[derive(Debug, Clone, Default)]
pub struct SchemaConfig {
    /// Reject files whose header disagrees with these dimensions.
    pub dims: Option<(usize, usize)>,
    /// Medical-style reward check: zero reward on non-terminal steps and
    /// `+m` / `-m` on discharge / death terminal steps.
    pub terminal_reward_magnitude: Option<f64>,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&text, schema)
}

fn parse_floats(field: &str, line: usize, what: &'static str, expected: usize) -> Result<Vec<f64>> {
    let vals = field
        .split(',')
        .map(|t| {
            t.trim().parse::<f64>().map_err(|_| DatasetError::Malformed {
                line,
                msg: format!("bad {what} value `{t}`"),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    if vals.len() != expected {
        return Err(DatasetError::Dimension {
            line,
            what,
            expected,
            found: vals.len(),
        });
    }
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(DatasetError::Malformed {
            line,
            msg: format!("non-finite {what} value {v}"),
        });
    }
    Ok(vals)
}

pub fn parse_dataset(text: &str, schema: &SchemaConfig) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (d_obs, d_act) = loop {
        match lines.next() {
            None => return Err(DatasetError::MissingHeader),
            Some((_, l)) if l.trim().is_empty() => continue,
            Some((line, l)) => {
                let parts: Vec<&str> = l.split_whitespace().collect();
                if parts.len() != 3 || parts[0] != "#dims" {
                    return Err(DatasetError::MissingHeader);
                }
                let parse = |s: &str| {
                    s.parse::<usize>().ok().filter(|&d| d > 0).ok_or_else(|| DatasetError::Malformed {
                        line,
                        msg: format!("bad dimension `{s}`"),
                    })
                };
                break (parse(parts[1])?, parse(parts[2])?);
            }
        }
    };
    if let Some((eo, ea)) = schema.dims {
        if (eo, ea) != (d_obs, d_act) {
            return Err(DatasetError::InconsistentDims(eo, ea, d_obs, d_act));
        }
    }

    let mut episodes: Vec<Episode> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut open = false;
    for (line, raw) in lines {
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 7 {
            return Err(DatasetError::Malformed {
                line,
                msg: format!("expected 7 tab-separated fields, found {}", fields.len()),
            });
        }
        let id: u64 = fields[0].trim().parse().map_err(|_| DatasetError::Malformed {
            line,
            msg: format!("bad episode id `{}`", fields[0]),
        })?;
        let t: usize = fields[1].trim().parse().map_err(|_| DatasetError::Malformed {
            line,
            msg: format!("bad step index `{}`", fields[1]),
        })?;
        let obs = parse_floats(fields[2], line, "observation", d_obs)?;
        let action = parse_floats(fields[3], line, "action", d_act)?;
        let reward: f64 = fields[4]
            .trim()
            .parse()
            .ok()
            .filter(|r: &f64| r.is_finite())
            .ok_or_else(|| DatasetError::Malformed {
                line,
                msg: format!("bad reward `{}`", fields[4]),
            })?;
        let is_terminal = match fields[5].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(DatasetError::Malformed {
                    line,
                    msg: format!("terminal flag must be 0 or 1, found `{other}`"),
                })
            }
        };
        let outcome = Outcome::parse(fields[6].trim()).ok_or_else(|| DatasetError::Malformed {
            line,
            msg: format!("unknown outcome `{}`", fields[6]),
        })?;
        if !is_terminal && outcome != Outcome::None {
            return Err(DatasetError::Malformed {
                line,
                msg: "outcome given on a non-terminal step".into(),
            });
        }
        if let Some(m) = schema.terminal_reward_magnitude {
            let expected = match (is_terminal, outcome) {
                (true, Outcome::Discharge) => m,
                (true, Outcome::Death) => -m,
                _ => 0.0,
            };
            if reward != expected {
                return Err(DatasetError::Malformed {
                    line,
                    msg: format!("reward {reward} violates the terminal-reward schema (expected {expected})"),
                });
            }
        }

        let continues = episodes.last().is_some_and(|e| e.id == id);
        if continues {
            if !open {
                return Err(DatasetError::StepAfterTerminal { line, episode: id });
            }
        } else {
            if open {
                return Err(DatasetError::Unterminated(episodes.last().map(|e| e.id).unwrap_or_default()));
            }
            if !seen.insert(id) {
                return Err(DatasetError::DuplicateEpisode { line, episode: id });
            }
            episodes.push(Episode { id, steps: Vec::new() });
        }
        let ep = episodes.last_mut().expect("episode just pushed");
        if t != ep.steps.len() {
            return Err(DatasetError::Malformed {
                line,
                msg: format!("episode {id}: expected step {}, found {t}", ep.steps.len()),
            });
        }
        ep.steps.push(EpisodeStep {
            obs,
            action,
            reward,
            is_terminal,
            outcome,
        });
        open = !is_terminal;
    }
    if open {
        return Err(DatasetError::Unterminated(episodes.last().map(|e| e.id).unwrap_or_default()));
    }
    Ok(Dataset::new(episodes, d_obs, d_act))
}

fn join(vals: &[f64]) -> String {
    vals.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

/// Serializes in the episode file format; `comments` become `#` lines after the header.
pub fn write_dataset(ds: &Dataset, comments: &[String]) -> String {
    let mut out = format!("#dims {} {}\n", ds.d_obs, ds.d_act);
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    for ep in &ds.episodes {
        for (t, s) in ep.steps.iter().enumerate() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                ep.id,
                t,
                join(&s.obs),
                join(&s.action),
                s.reward,
                u8::from(s.is_terminal),
                s.outcome
            ));
        }
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>, comments: &[String]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_dataset(ds, comments)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Min/max of every observation dimension.
pub fn fit_normalization(ds: &Dataset) -> NormalizationBounds {
    let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); ds.d_obs];
    for s in ds.steps() {
        for (r, &x) in ranges.iter_mut().zip(&s.obs) {
            r.0 = r.0.min(x);
            r.1 = r.1.max(x);
        }
    }
    for (i, r) in ranges.iter().enumerate() {
        if !(r.1 > r.0) {
            warn!("observation dimension {i} is constant; mapping it to 0.5");
        }
    }
    NormalizationBounds { ranges }
}

/// Maps observations into [0, 1] with the given bounds, clipping outliers.
pub fn apply_normalization(ds: &Dataset, bounds: &NormalizationBounds) -> Dataset {
    let mut out = ds.clone();
    for ep in &mut out.episodes {
        for s in &mut ep.steps {
            s.obs = bounds.apply(&s.obs);
        }
    }
    out.normalization = Some(bounds.clone());
    out
}

/// Normalizes a development set with its own bounds.
pub fn normalize(ds: &Dataset) -> (Dataset, NormalizationBounds) {
    let bounds = fit_normalization(ds);
    (apply_normalization(ds, &bounds), bounds)
}

/// Episode-level random split; the first part holds `floor(ratio * n)` episodes.
/// Episodes keep their original relative order inside each part.
pub fn split(ds: &Dataset, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(ratio));
    }
    let n = ds.episodes.len();
    let n_dev = ((ratio * n as f64) + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut dev_idx = order[..n_dev].to_vec();
    let mut test_idx = order[n_dev..].to_vec();
    dev_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize], tag| Dataset {
        episodes: idx.iter().map(|&i| ds.episodes[i].clone()).collect(),
        d_obs: ds.d_obs,
        d_act: ds.d_act,
        normalization: ds.normalization.clone(),
        split_tag: tag,
    };
    Ok((pick(&dev_idx, SplitTag::Development), pick(&test_idx, SplitTag::Test)))
}

/// Bins of one action dimension.
///
/// With a zero bin, index 0 holds exact zeros. The remaining bins are
/// half-open intervals `(edge[j-1], edge[j]]`, unbounded at both ends.
#[derive(Debug, Clone, PartialEq)]
pub struct DimBins {
    pub zero_bin: bool,
    pub edges: Vec<f64>,
    pub representatives: Vec<f64>,
}

impl DimBins {
    pub fn n_bins(&self) -> usize {
        self.representatives.len()
    }

    pub fn bin_of(&self, x: f64) -> usize {
        if self.zero_bin {
            if x == 0.0 || self.representatives.len() == 1 {
                return 0;
            }
            1 + self.edges.partition_point(|&e| e < x)
        } else {
            self.edges.partition_point(|&e| e < x)
        }
    }

    /// Bin whose representative is closest to `x` (lowest index on ties).
    pub fn nearest(&self, x: f64) -> usize {
        let mut best = 0;
        for (j, r) in self.representatives.iter().enumerate() {
            if (r - x).abs() < (self.representatives[best] - x).abs() {
                best = j;
            }
        }
        best
    }
}

/// Discretization of the continuous action space into a joint bin grid
/// (row-major, first dimension most significant).
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBinning {
    pub dims: Vec<DimBins>,
}

impl ActionBinning {
    pub fn n_joint(&self) -> usize {
        self.dims.iter().map(DimBins::n_bins).product()
    }

    fn compose(&self, per_dim: impl Iterator<Item = usize>) -> usize {
        per_dim
            .zip(&self.dims)
            .fold(0, |acc, (b, d)| acc * d.n_bins() + b)
    }

    pub fn bin_of(&self, action: &[f64]) -> usize {
        self.compose(action.iter().zip(&self.dims).map(|(&x, d)| d.bin_of(x)))
    }

    pub fn nearest(&self, action: &[f64]) -> usize {
        self.compose(action.iter().zip(&self.dims).map(|(&x, d)| d.nearest(x)))
    }

    pub fn decompose(&self, mut joint: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dims.len()];
        for (i, d) in self.dims.iter().enumerate().rev() {
            idx[i] = joint % d.n_bins();
            joint /= d.n_bins();
        }
        idx
    }

    pub fn representative(&self, joint: usize) -> Vec<f64> {
        self.decompose(joint)
            .into_iter()
            .zip(&self.dims)
            .map(|(b, d)| d.representatives[b])
            .collect()
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Quantile bins over one dimension of recorded doses.
pub fn fit_dim_bins(values: &[f64], n_bins: usize, zero_bin: bool) -> Result<DimBins> {
    if n_bins < 2 {
        return Err(DatasetError::TooFewBins(n_bins));
    }
    let has_zero = zero_bin && values.contains(&0.0);
    let mut rest: Vec<f64> = values
        .iter()
        .copied()
        .filter(|&v| !(zero_bin && v == 0.0))
        .collect();
    rest.sort_by(f64::total_cmp);
    let mut representatives = Vec::new();
    if has_zero {
        representatives.push(0.0);
    }
    if rest.is_empty() {
        if representatives.is_empty() {
            return Err(DatasetError::Empty);
        }
        warn!("all recorded doses are zero; using a single zero bin");
        return Ok(DimBins {
            zero_bin: true,
            edges: Vec::new(),
            representatives,
        });
    }

    let target = if has_zero { n_bins - 1 } else { n_bins };
    // positions where a new distinct value starts
    let boundaries: Vec<usize> = (1..rest.len()).filter(|&i| rest[i - 1] < rest[i]).collect();
    let n_distinct = boundaries.len() + 1;
    let cuts: Vec<usize> = if n_distinct <= target {
        if n_distinct < target {
            warn!("only {n_distinct} distinct non-zero doses; reducing from {target} bins");
        }
        boundaries
    } else {
        let n = rest.len();
        let mut cuts = Vec::new();
        for j in 1..target {
            let want = ((j * n) as f64 / target as f64).round() as usize;
            let prev = cuts.last().copied().unwrap_or(0);
            let pick = boundaries
                .iter()
                .copied()
                .find(|&b| b >= want && b > prev)
                .or_else(|| boundaries.iter().copied().rev().find(|&b| b > prev));
            match pick {
                Some(b) => cuts.push(b),
                None => break,
            }
        }
        cuts.dedup();
        if cuts.len() + 1 < target {
            warn!("ties in recorded doses leave {} of {target} bins", cuts.len() + 1);
        }
        cuts
    };

    let mut edges = Vec::with_capacity(cuts.len());
    let mut start = 0;
    for &c in cuts.iter().chain(std::iter::once(&rest.len())) {
        representatives.push(median(&rest[start..c]));
        if c < rest.len() {
            edges.push(0.5 * (rest[c - 1] + rest[c]));
        }
        start = c;
    }
    Ok(DimBins {
        zero_bin: has_zero,
        edges,
        representatives,
    })
}

pub fn fit_action_bins(ds: &Dataset, n_bins: usize, zero_bin: bool) -> Result<ActionBinning> {
    if ds.episodes.is_empty() {
        return Err(DatasetError::Empty);
    }
    let dims = (0..ds.d_act)
        .map(|i| {
            let vals: Vec<f64> = ds.steps().map(|s| s.action[i]).collect();
            fit_dim_bins(&vals, n_bins, zero_bin)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActionBinning { dims })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_EPISODES: &str = "#dims 3 2\n\
        7\t0\t0.1,0.2,0.3\t0,1.5\t0\t0\t-\n\
        7\t1\t0.4,0.5,0.6\t1,0\t10\t1\tdischarge\n\
        9\t0\t1,2,3\t0.5,0.5\t-10\t1\tdeath\n";

    #[test]
    fn normalization_text_round_trip() {
        let b = NormalizationBounds {
            ranges: vec![(-1.5, 2.0 / 3.0), (0.1, 0.1)],
        };
        let prov = Provenance::new("abc", 4);
        let (back, p) = NormalizationBounds::from_text(&b.to_text(&prov)).unwrap();
        assert_eq!(back, b);
        assert_eq!(p, prov);
    }

    #[test]
    fn loads_hand_written_file() {
        let ds = parse_dataset(TWO_EPISODES, &SchemaConfig::default()).unwrap();
        assert_eq!(ds.episodes.len(), 2);
        assert_eq!((ds.d_obs, ds.d_act), (3, 2));
        assert_eq!(ds.episodes[0].outcome(), Outcome::Discharge);
        assert_eq!(ds.episodes[1].steps[0].obs, vec![1.0, 2.0, 3.0]);
        let again = parse_dataset(&write_dataset(&ds, &[]), &SchemaConfig::default()).unwrap();
        assert_eq!(again, ds);
    }

    #[test]
    fn unterminated_episode_rejected() {
        let text = "#dims 1 1\n1\t0\t0.5\t0\t0\t0\t-\n";
        let err = parse_dataset(text, &SchemaConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "unterminated episode 1");
        let text = "#dims 1 1\n1\t0\t0.5\t0\t0\t0\t-\n2\t0\t0.5\t0\t0\t1\t-\n";
        assert!(matches!(
            parse_dataset(text, &SchemaConfig::default()),
            Err(DatasetError::Unterminated(1))
        ));
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = "#dims 2 1\n1\t0\t0.5\t0\t0\t1\t-\n";
        match parse_dataset(text, &SchemaConfig::default()) {
            Err(DatasetError::Dimension { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let text = "#dims 1 1\n1\t0\tabc\t0\t0\t1\t-\n";
        match parse_dataset(text, &SchemaConfig::default()) {
            Err(DatasetError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn steps_after_terminal_and_duplicates_rejected() {
        let text = "#dims 1 1\n1\t0\t0.5\t0\t0\t1\t-\n1\t1\t0.5\t0\t0\t1\t-\n";
        assert!(matches!(
            parse_dataset(text, &SchemaConfig::default()),
            Err(DatasetError::StepAfterTerminal { line: 3, .. })
        ));
        let text = "#dims 1 1\n1\t0\t0.5\t0\t0\t1\t-\n2\t0\t0.5\t0\t0\t1\t-\n1\t0\t0.5\t0\t0\t1\t-\n";
        assert!(matches!(
            parse_dataset(text, &SchemaConfig::default()),
            Err(DatasetError::DuplicateEpisode { line: 4, .. })
        ));
    }

    #[test]
    fn medical_reward_schema() {
        let schema = SchemaConfig {
            dims: None,
            terminal_reward_magnitude: Some(10.0),
        };
        assert!(parse_dataset(TWO_EPISODES, &schema).is_ok());
        let bad = "#dims 1 1\n1\t0\t0.5\t0\t1\t0\t-\n1\t1\t0.5\t0\t10\t1\tdischarge\n";
        assert!(matches!(
            parse_dataset(bad, &schema),
            Err(DatasetError::Malformed { line: 2, .. })
        ));
    }

    fn one_dim(values: &[f64]) -> Dataset {
        let episodes = values
            .iter()
            .enumerate()
            .map(|(i, &v)| Episode {
                id: i as u64,
                steps: vec![EpisodeStep {
                    obs: vec![v],
                    action: vec![v],
                    reward: 0.0,
                    is_terminal: true,
                    outcome: Outcome::None,
                }],
            })
            .collect();
        Dataset::new(episodes, 1, 1)
    }

    #[test]
    fn normalization_examples() {
        let dev = one_dim(&[2.0, 4.0, 3.0]);
        let (norm, bounds) = normalize(&dev);
        assert_eq!(norm.episodes[2].steps[0].obs, vec![0.5]);
        assert_eq!(bounds.apply(&[5.0]), vec![1.0]);
        assert_eq!(bounds.apply(&[1.0]), vec![0.0]);
        let wide = fit_normalization(&one_dim(&[0.0, 10.0]));
        assert_eq!(wide.apply(&[2.5]), vec![0.25]);
    }

    #[test]
    fn constant_dimension_maps_to_half() {
        let (norm, _) = normalize(&one_dim(&[3.0, 3.0]));
        assert!(norm.steps().all(|s| s.obs == vec![0.5]));
    }

    #[test]
    fn split_counts_and_determinism() {
        let ds = one_dim(&[0.0; 10]);
        let (a, b) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((a.episodes.len(), b.episodes.len()), (8, 2));
        let (a2, b2) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((a, b), (a2, b2));
        assert!(split(&ds, 1.0, 3).is_err());
    }

    #[test]
    fn split_large_cohort() {
        let ds = one_dim(&vec![0.0; 18919]);
        let (dev, test) = split(&ds, 0.8, 11).unwrap();
        assert_eq!((dev.episodes.len(), test.episodes.len()), (15135, 3784));
        let ids: HashSet<u64> = dev.episodes.iter().map(|e| e.id).collect();
        assert!(test.episodes.iter().all(|e| !ids.contains(&e.id)));
    }

    #[test]
    fn zero_bin_quantiles() {
        let bins = fit_dim_bins(&[0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0], 3, true).unwrap();
        assert_eq!(bins.edges, vec![2.5]);
        assert_eq!(bins.representatives, vec![0.0, 1.5, 3.5]);
        assert_eq!(bins.bin_of(0.0), 0);
        assert_eq!(bins.bin_of(2.5), 1);
        assert_eq!(bins.bin_of(2.6), 2);
        assert_eq!(bins.bin_of(40.0), 2);
    }

    #[test]
    fn categorical_codes_get_one_bin_each() {
        let codes: Vec<f64> = (0..600).map(|i| ((i * 7) % 6) as f64).collect();
        let bins = fit_dim_bins(&codes, 6, false).unwrap();
        assert_eq!(bins.representatives, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        for c in 0..6 {
            assert_eq!(bins.bin_of(c as f64), c);
        }
        // heavily skewed code frequencies must not merge codes
        let mut skewed = vec![3.0; 1000];
        skewed.extend([0.0, 1.0, 2.0, 4.0, 5.0]);
        let bins = fit_dim_bins(&skewed, 6, false).unwrap();
        assert_eq!(bins.n_bins(), 6);
    }

    #[test]
    fn all_zero_doses_single_bin() {
        let bins = fit_dim_bins(&[0.0; 5], 5, true).unwrap();
        assert_eq!(bins.representatives, vec![0.0]);
        assert_eq!(bins.bin_of(0.0), 0);
        assert_eq!(bins.bin_of(3.0), 0);
    }

    #[test]
    fn joint_index_round_trip() {
        let ds = parse_dataset(TWO_EPISODES, &SchemaConfig::default()).unwrap();
        let bins = fit_action_bins(&ds, 3, true).unwrap();
        for j in 0..bins.n_joint() {
            assert_eq!(bins.bin_of(&bins.representative(j)), j);
        }
    }
}
