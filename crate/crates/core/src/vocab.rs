//! Density-adaptive multi-resolution vocabulary.
//!
//! Points are counted at the base resolution. Any cell holding more than
//! `capacity` points is split and its points re-bucketed into the next
//! resolution, repeating until a cell is under capacity or reaches `r_max`.
//! The surviving leaves, sorted by `(resolution, index)`, become the cell
//! tokens, numbered from [`FIRST_CELL_ID`].

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::GpsPoint;
use crate::grid::{BBox, CellKey, CellSystem, Grid, GridConfig};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const FIRST_CELL_ID: u32 = 3;
pub const NUM_SPECIAL: usize = 3;

pub const VOCAB_FILE_VERSION: u32 = 1;

pub type CountMap = BTreeMap<CellKey, u64>;

/// Counts points per cell at `cfg.r_min`, sharding the input and merging
/// the partial maps by addition.
pub fn count_base(points: &[GpsPoint], cfg: &GridConfig, shards: usize, exec: Execution) -> Result<CountMap> {
    let grid = Grid::from_config(cfg)?;
    if points.is_empty() {
        return Ok(CountMap::new());
    }
    let shards = shards.clamp(1, points.len());
    let chunk = points.len().div_ceil(shards);
    let chunks: Vec<&[GpsPoint]> = points.chunks(chunk).collect();
    let partials = exec.map_slice(&chunks, |part| -> Result<CountMap> {
        let mut m = CountMap::new();
        for p in part.iter() {
            *m.entry(grid.cell_of(p, cfg.r_min)?).or_insert(0) += 1;
        }
        Ok(m)
    });
    let mut total = CountMap::new();
    for part in partials {
        for (k, v) in part? {
            *total.entry(k).or_insert(0) += v;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pub grid: GridConfig,
    pub capacity: u64,
    /// Cell tokens in canonical order; entry `i` has id `FIRST_CELL_ID + i`.
    entries: Vec<CellKey>,
    lookup: HashMap<CellKey, u32>,
    /// Free-form provenance lines, stored as leading `#` comments on disk.
    pub note: Option<String>,
}

impl Vocabulary {
    pub fn from_cells(grid: GridConfig, capacity: u64, mut cells: Vec<CellKey>) -> Result<Self> {
        grid.validate()?;
        cells.sort();
        cells.dedup();
        for c in &cells {
            if c.backend != grid.backend {
                return Err(Error::BackendMismatch(grid.backend, c.backend));
            }
            if c.resolution < grid.r_min || c.resolution > grid.r_max {
                return Err(Error::ResolutionOutOfRange {
                    resolution: c.resolution,
                    min: grid.r_min,
                    max: grid.r_max,
                });
            }
        }
        let lookup = cells
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, FIRST_CELL_ID + i as u32))
            .collect();
        Ok(Vocabulary {
            grid,
            capacity,
            entries: cells,
            lookup,
            note: None,
        })
    }

    /// Number of cell tokens (excluding specials).
    pub fn num_cells(&self) -> usize {
        self.entries.len()
    }

    /// Embedding-table size: cells plus the special tokens.
    pub fn size(&self) -> usize {
        self.entries.len() + NUM_SPECIAL
    }

    pub fn cells(&self) -> &[CellKey] {
        &self.entries
    }

    pub fn id_of(&self, cell: &CellKey) -> Option<u32> {
        self.lookup.get(cell).copied()
    }

    pub fn cell_of_id(&self, id: u32) -> Option<CellKey> {
        id.checked_sub(FIRST_CELL_ID)
            .and_then(|i| self.entries.get(i as usize))
            .copied()
    }

    /// Token id of the finest vocabulary cell containing `p`, or `UNK_ID`.
    pub fn map_point(&self, grid: &Grid, p: &GpsPoint) -> u32 {
        for r in (self.grid.r_min..=self.grid.r_max).rev() {
            if let Ok(c) = grid.cell_of(p, r) {
                if let Some(id) = self.id_of(&c) {
                    return id;
                }
            }
        }
        UNK_ID
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut body = String::new();
        if let Some(note) = &self.note {
            for line in note.lines() {
                let _ = writeln!(body, "# {line}");
            }
        }
        let b = &self.grid.bbox;
        let _ = writeln!(body, "version={VOCAB_FILE_VERSION}");
        let _ = writeln!(body, "backend={}", self.grid.backend);
        let _ = writeln!(body, "bbox={},{},{},{}", b.lat_min, b.lat_max, b.lon_min, b.lon_max);
        let _ = writeln!(body, "rmin={}", self.grid.r_min);
        let _ = writeln!(body, "rmax={}", self.grid.r_max);
        let _ = writeln!(body, "capacity={}", self.capacity);
        let _ = writeln!(body, "count={}", self.entries.len());
        for (i, c) in self.entries.iter().enumerate() {
            let _ = writeln!(body, "{}\t{}\t{}", FIRST_CELL_ID as usize + i, c.resolution, c.index);
        }
        let sum = sha256_hex(body.as_bytes());
        body.push_str("checksum=");
        body.push_str(&sum);
        body.push('\n');
        body
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split_inclusive('\n').peekable();
        let mut consumed = 0usize;
        let mut note_lines = Vec::new();
        while let Some(l) = lines.peek() {
            if let Some(rest) = l.strip_prefix('#') {
                let rest = rest.trim_end_matches('\n');
                note_lines.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
                consumed += l.len();
                lines.next();
            } else {
                break;
            }
        }

        let mut next_kv = |key: &str| -> Result<String> {
            let l = lines
                .next()
                .ok_or_else(|| Error::Malformed(format!("missing `{key}` header")))?;
            consumed += l.len();
            let l = l.trim_end_matches('\n');
            l.strip_prefix(key)
                .and_then(|r| r.strip_prefix('='))
                .map(str::to_string)
                .ok_or_else(|| Error::Malformed(format!("expected `{key}=`, found `{l}`")))
        };

        let version: u32 = parse_field(&next_kv("version")?, "version")?;
        if version != VOCAB_FILE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: VOCAB_FILE_VERSION,
            });
        }
        let backend = next_kv("backend")?.parse()?;
        let bbox_raw = next_kv("bbox")?;
        let parts: Vec<f64> = bbox_raw
            .split(',')
            .map(|s| parse_field(s, "bbox"))
            .collect::<Result<_>>()?;
        if parts.len() != 4 {
            return Err(Error::Malformed(format!("bbox needs 4 values: `{bbox_raw}`")));
        }
        let r_min: u8 = parse_field(&next_kv("rmin")?, "rmin")?;
        let r_max: u8 = parse_field(&next_kv("rmax")?, "rmax")?;
        let capacity: u64 = parse_field(&next_kv("capacity")?, "capacity")?;
        let count: usize = parse_field(&next_kv("count")?, "count")?;

        let mut cells = Vec::with_capacity(count);
        for i in 0..count {
            let l = lines
                .next()
                .ok_or_else(|| Error::Malformed(format!("expected {count} entries, found {i}")))?;
            consumed += l.len();
            let fields: Vec<&str> = l.trim_end_matches('\n').split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Malformed(format!("bad entry line `{}`", l.trim_end())));
            }
            let id: usize = parse_field(fields[0], "token id")?;
            if id != FIRST_CELL_ID as usize + i {
                return Err(Error::Malformed(format!("non-contiguous token id {id}")));
            }
            cells.push(CellKey {
                backend,
                resolution: parse_field(fields[1], "resolution")?,
                index: parse_field(fields[2], "cell index")?,
            });
        }
        let body = &text[..consumed];
        let stored = lines
            .next()
            .and_then(|l| l.trim_end_matches('\n').strip_prefix("checksum="))
            .ok_or_else(|| Error::Malformed("missing checksum line".into()))?
            .to_string();
        if lines.next().is_some() {
            return Err(Error::Malformed("trailing data after checksum".into()));
        }
        let computed = sha256_hex(body.as_bytes());
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let grid = GridConfig {
            backend,
            bbox: BBox {
                lat_min: parts[0],
                lat_max: parts[1],
                lon_min: parts[2],
                lon_max: parts[3],
            },
            r_min,
            r_max,
        };
        let sorted = cells.windows(2).all(|w| w[0] < w[1]);
        if !sorted {
            return Err(Error::Malformed("entries not in canonical order".into()));
        }
        let mut v = Vocabulary::from_cells(grid, capacity, cells)?;
        if !note_lines.is_empty() {
            v.note = Some(note_lines.join("\n"));
        }
        Ok(v)
    }
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Malformed(format!("cannot parse {what} from `{s}`")))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Builds the vocabulary from training points.
///
/// Over-capacity cells carry their point subsets through the refinement
/// queue. Children that receive no points are not enqueued.
pub fn build_vocabulary(points: &[GpsPoint], cfg: &GridConfig, capacity: u64, exec: Execution) -> Result<Vocabulary> {
    if capacity == 0 {
        return Err(Error::Config("capacity must be >= 1".into()));
    }
    let grid = Grid::from_config(cfg)?;
    let base_cells = exec.map_slice(points, |p| grid.cell_of(p, cfg.r_min));
    let mut buckets: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
    for (i, c) in base_cells.into_iter().enumerate() {
        buckets.entry(c?).or_default().push(i);
    }

    let mut leaves = Vec::new();
    let mut queue: Vec<(CellKey, Vec<usize>)> = Vec::new();
    for (cell, members) in buckets {
        if members.len() as u64 > capacity {
            queue.push((cell, members));
        } else {
            leaves.push(cell);
        }
    }

    while let Some((cell, members)) = queue.pop() {
        if members.len() as u64 > capacity && cell.resolution < cfg.r_max {
            let r = cell.resolution + 1;
            // Bucketing by the point's own r+1 cell also covers hexagonal
            // children that leak outside the parent.
            let mut sub: BTreeMap<CellKey, Vec<usize>> = BTreeMap::new();
            for i in members {
                sub.entry(grid.cell_of(&points[i], r)?).or_default().push(i);
            }
            queue.extend(sub);
        } else {
            leaves.push(cell);
        }
    }
    Vocabulary::from_cells(*cfg, capacity, leaves)
}

/// Vocabulary of every cell at a single resolution that contains at least
/// one point. Used as the fixed-resolution baseline.
pub fn fixed_resolution_vocabulary(points: &[GpsPoint], bbox: BBox, backend: crate::grid::Backend, r: u8) -> Result<Vocabulary> {
    let cfg = GridConfig {
        backend,
        bbox,
        r_min: r,
        r_max: r,
    };
    let counts = count_base(points, &cfg, 1, Execution::Sequential)?;
    Vocabulary::from_cells(cfg, u64::MAX, counts.into_keys().collect())
}
