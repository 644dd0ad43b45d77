//! Trajectory to token-sequence conversion with kinematic features.
//!
//! Export format (one trajectory per line, tab separated):
//!
//! ```text
//! <id>\t<L>\t<tok>;<tok>;...
//! tok = token_id,lat,lon,t,v_mps,heading_deg,heading_filled(0|1)
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::{bearing_deg, speed_mps, GpsPoint, Trajectory};
use crate::grid::Grid;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub token_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub t: f64,
    /// Speed over the incoming segment, m/s. Zero for the first token.
    pub v: f64,
    /// Bearing of the incoming segment in `[0, 360)`.
    pub heading: f64,
    /// True when `heading` was filled from a neighbouring segment because
    /// the incoming segment was degenerate (or absent).
    pub heading_filled: bool,
}

impl Token {
    pub fn point(&self) -> GpsPoint {
        GpsPoint {
            lat: self.lat,
            lon: self.lon,
            t: self.t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.token_id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizeOptions {
    pub dedup: bool,
    pub max_len: usize,
}

impl Default for TokenizeOptions {
    fn default() -> Self {
        TokenizeOptions {
            dedup: false,
            max_len: 192,
        }
    }
}

/// Normalized speed and heading encoding of one token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicFeatures {
    pub v_norm: f64,
    pub sin: f64,
    pub cos: f64,
}

impl KinematicFeatures {
    pub fn as_array(&self) -> [f64; 3] {
        [self.v_norm, self.sin, self.cos]
    }
}

/// Pairs a vocabulary with the grid it was built on.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub vocab: Vocabulary,
    grid: Grid,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Result<Self> {
        let grid = Grid::from_config(&vocab.grid)?;
        Ok(Tokenizer { vocab, grid })
    }

    pub fn map_point(&self, p: &GpsPoint) -> u32 {
        self.vocab.map_point(&self.grid, p)
    }

    pub fn tokenize(&self, traj: &Trajectory, opts: TokenizeOptions) -> Result<TokenSequence> {
        if traj.points.is_empty() {
            return Err(Error::EmptyTrajectory);
        }
        if opts.max_len == 0 {
            return Err(Error::Config("max_len must be >= 1".into()));
        }
        let mut tokens: Vec<Token> = traj
            .points
            .iter()
            .map(|p| Token {
                token_id: self.map_point(p),
                lat: p.lat,
                lon: p.lon,
                t: p.t,
                v: 0.0,
                heading: 0.0,
                heading_filled: true,
            })
            .collect();
        if opts.dedup {
            tokens = collapse_runs(tokens);
        }
        tokens.truncate(opts.max_len);
        attach_kinematics(&mut tokens)?;
        Ok(TokenSequence {
            id: traj.id.clone(),
            tokens,
        })
    }

    pub fn tokenize_all(&self, trajs: &[Trajectory], opts: TokenizeOptions, exec: Execution) -> Result<Vec<TokenSequence>> {
        exec.map_slice(trajs, |t| self.tokenize(t, opts)).into_iter().collect()
    }
}

fn collapse_runs(tokens: Vec<Token>) -> Vec<Token> {
    let mut out: Vec<Token> = Vec::with_capacity(tokens.len());
    for tok in tokens {
        if out.last().map(|l| l.token_id) != Some(tok.token_id) {
            out.push(tok);
        }
    }
    out
}

/// Collapses consecutive repeated cells, keeping each run's first point,
/// and recomputes kinematics on the shortened sequence.
pub fn dedup(seq: &TokenSequence) -> Result<TokenSequence> {
    let mut tokens = collapse_runs(seq.tokens.clone());
    attach_kinematics(&mut tokens)?;
    Ok(TokenSequence {
        id: seq.id.clone(),
        tokens,
    })
}

/// Fills `v`, `heading` and `heading_filled` from consecutive positions.
///
/// Degenerate segments repeat the previous heading; a leading degenerate
/// stretch (and the first token) takes the first real heading; a sequence
/// without any real heading gets 0.
pub fn attach_kinematics(tokens: &mut [Token]) -> Result<()> {
    let n = tokens.len();
    let mut headings: Vec<Option<f64>> = vec![None; n];
    for j in 1..n {
        let (a, b) = (tokens[j - 1].point(), tokens[j].point());
        tokens[j].v = speed_mps(&a, &b)?;
        let br = bearing_deg(&a, &b);
        if !br.degenerate {
            headings[j] = Some(br.degrees);
        }
    }
    if let Some(first) = tokens.first_mut() {
        first.v = 0.0;
    }
    let first_real = headings.iter().flatten().next().copied().unwrap_or(0.0);
    let mut carry = first_real;
    for (tok, h) in tokens.iter_mut().zip(headings) {
        match h {
            Some(deg) => {
                tok.heading = deg;
                tok.heading_filled = false;
                carry = deg;
            }
            None => {
                tok.heading = carry;
                tok.heading_filled = true;
            }
        }
    }
    Ok(())
}

pub fn kinematic_features(seq: &TokenSequence, v_max: f64) -> Result<Vec<KinematicFeatures>> {
    if !(v_max > 0.0) {
        return Err(Error::Config(format!("v_max must be positive, got {v_max}")));
    }
    Ok(seq
        .tokens
        .iter()
        .map(|t| {
            let rad = t.heading.to_radians();
            KinematicFeatures {
                v_norm: (t.v / v_max).clamp(0.0, 1.0),
                sin: rad.sin(),
                cos: rad.cos(),
            }
        })
        .collect())
}

/// Speed quantile over all consecutive-point segments, used as `v_max`.
pub fn segment_speed_quantile(trajs: &[Trajectory], q: f64) -> Option<f64> {
    let mut speeds: Vec<f64> = trajs
        .iter()
        .flat_map(|t| t.points.windows(2).filter_map(|w| speed_mps(&w[0], &w[1]).ok()))
        .filter(|v| v.is_finite())
        .collect();
    if speeds.is_empty() {
        return None;
    }
    speeds.sort_by(f64::total_cmp);
    let rank = ((speeds.len() - 1) as f64 * q.clamp(0.0, 1.0)).round() as usize;
    Some(speeds[rank])
}

pub fn export_line(seq: &TokenSequence) -> String {
    let mut s = format!("{}\t{}\t", seq.id, seq.tokens.len());
    for (i, t) in seq.tokens.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(
            s,
            "{},{},{},{},{},{},{}",
            t.token_id,
            t.lat,
            t.lon,
            t.t,
            t.v,
            t.heading,
            u8::from(t.heading_filled)
        );
    }
    s
}

pub fn parse_export_line(line: &str) -> Result<TokenSequence> {
    let mut parts = line.trim_end_matches(['\r', '\n']).splitn(3, '\t');
    let bad = || Error::Malformed(format!("bad token record `{line}`"));
    let id = parts.next().ok_or_else(bad)?.to_string();
    let n: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let body = parts.next().ok_or_else(bad)?;
    let tokens = body
        .split(';')
        .filter(|s| !s.is_empty())
        .map(|tok| {
            let f: Vec<&str> = tok.split(',').collect();
            if f.len() != 7 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(Token {
                token_id: f[0].parse().map_err(|_| bad())?,
                lat: num(1)?,
                lon: num(2)?,
                t: num(3)?,
                v: num(4)?,
                heading: num(5)?,
                heading_filled: f[6] == "1",
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if tokens.len() != n {
        return Err(bad());
    }
    Ok(TokenSequence { id, tokens })
}
