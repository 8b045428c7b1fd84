//! Gridded monthly climate ingestion and window construction.
//!
//! Input is a delimited text table, one row per location-month, with the
//! exact header `date,lat,lon,pre,tmx,tmn,tmp,vap,cld,pet,spei1`. Missing
//! values are an empty field or the literal `NA`. The pipeline builds
//! 15-month windows with a 3x3 spatial augmentation, per-window
//! standardization from the center cell's statistics, and year-range splits
//! keyed on the target month.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layout;
use crate::tensor::Tensor;

pub const VAR_COUNT: usize = layout::VARS;
pub const VAR_NAMES: [&str; VAR_COUNT] = ["pre", "tmx", "tmn", "tmp", "vap", "cld", "pet"];
pub const HEADER: &str = "date,lat,lon,pre,tmx,tmn,tmp,vap,cld,pet,spei1";

/// Inclusive year ranges of the three splits, keyed on the target month.
pub const TRAIN_YEARS: (i32, i32) = (1901, 1980);
pub const VALIDATION_YEARS: (i32, i32) = (1981, 2005);
pub const TEST_START_YEAR: i32 = 2006;

// ---------------------------------------------------------------------------
// calendar and grid keys
// ---------------------------------------------------------------------------

/// A calendar month, stored as months since year 0 for easy arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MonthStamp(i64);

impl MonthStamp {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Validation(format!("month {month} outside 1..=12")));
        }
        Ok(MonthStamp(year as i64 * 12 + (month as i64 - 1)))
    }

    pub fn year(self) -> i32 {
        self.0.div_euclid(12) as i32
    }

    pub fn month(self) -> u32 {
        (self.0.rem_euclid(12) + 1) as u32
    }

    pub fn offset(self, months: i64) -> MonthStamp {
        MonthStamp(self.0 + months)
    }

    pub fn index(self) -> i64 {
        self.0
    }

    pub fn from_index(i: i64) -> Self {
        MonthStamp(i)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::Validation(format!("date '{s}' is not YYYY-MM")))?;
        let year: i32 = y
            .parse()
            .map_err(|_| Error::Validation(format!("date '{s}' has a bad year")))?;
        let month: u32 = m
            .parse()
            .map_err(|_| Error::Validation(format!("date '{s}' has a bad month")))?;
        MonthStamp::new(year, month)
    }
}

impl fmt::Display for MonthStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year(), self.month())
    }
}

/// A cell of the 0.5-degree grid, stored in quarter-degree integer units.
/// Gridded climate products center their half-degree cells on .25/.75
/// offsets, so both the integral and the offset lattice are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridCell {
    lat4: i32,
    lon4: i32,
}

impl GridCell {
    pub fn from_degrees(lat: f64, lon: f64) -> Result<Self> {
        let lat4 = (lat * 4.0).round();
        let lon4 = (lon * 4.0).round();
        if (lat - lat4 / 4.0).abs() > 1e-6 || (lon - lon4 / 4.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "({lat}, {lon}) is not aligned to the 0.5-degree grid"
            )));
        }
        Ok(GridCell { lat4: lat4 as i32, lon4: lon4 as i32 })
    }

    pub fn lat(self) -> f64 {
        self.lat4 as f64 / 4.0
    }

    pub fn lon(self) -> f64 {
        self.lon4 as f64 / 4.0
    }

    /// Neighbor `dr` rows north-to-south and `dc` columns west-to-east away,
    /// in half-degree steps.
    fn shifted(self, dr: i32, dc: i32) -> GridCell {
        // row 0 is north of the center: latitude decreases with dr
        GridCell { lat4: self.lat4 - 2 * dr, lon4: self.lon4 + 2 * dc }
    }
}

// ---------------------------------------------------------------------------
// parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClimateRecord {
    pub cell: GridCell,
    pub month: MonthStamp,
    pub vars: [Option<f64>; VAR_COUNT],
    pub spei1: Option<f64>,
    /// 1-based source line (the header is line 1).
    pub line: usize,
}

fn parse_field(raw: &str, line: usize, name: &str) -> Result<Option<f64>> {
    let t = raw.trim();
    if t.is_empty() || t == "NA" {
        return Ok(None);
    }
    let v: f64 = t
        .parse()
        .map_err(|_| Error::Parse { line, msg: format!("column '{name}' has bad value '{t}'") })?;
    if !v.is_finite() {
        return Err(Error::Parse { line, msg: format!("column '{name}' is not finite") });
    }
    Ok(Some(v))
}

/// Parse and validate the documented table format. Records come back sorted
/// by (location, month); duplicate keys are rejected naming both lines.
pub fn parse_records(text: &str) -> Result<Vec<ClimateRecord>> {
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.trim_end_matches('\r'),
        None => return Err(Error::Schema("empty input file".into())),
    };
    if header != HEADER {
        // name the first missing column for a actionable message
        let have: Vec<&str> = header.split(',').map(str::trim).collect();
        for want in HEADER.split(',') {
            if !have.contains(&want) {
                return Err(Error::Schema(format!(
                    "missing required column '{want}' (header must be exactly '{HEADER}')"
                )));
            }
        }
        return Err(Error::Schema(format!("header must be exactly '{HEADER}', got '{header}'")));
    }

    let mut records = Vec::new();
    let mut seen: BTreeMap<(GridCell, MonthStamp), usize> = BTreeMap::new();
    for (i, raw) in lines {
        let line = i + 1; // enumerate is 0-based; header consumed index 0
        let row = raw.trim_end_matches('\r');
        if row.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 11 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 11 columns, got {}", fields.len()),
            });
        }
        let month = MonthStamp::parse(fields[0].trim())
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let lat = parse_field(fields[1], line, "lat")?
            .ok_or(Error::Parse { line, msg: "lat is required".into() })?;
        let lon = parse_field(fields[2], line, "lon")?
            .ok_or(Error::Parse { line, msg: "lon is required".into() })?;
        let cell = GridCell::from_degrees(lat, lon)
            .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let mut vars = [None; VAR_COUNT];
        for (v, slot) in vars.iter_mut().enumerate() {
            *slot = parse_field(fields[3 + v], line, VAR_NAMES[v])?;
        }
        let spei1 = parse_field(fields[10], line, "spei1")?;
        if let Some(first) = seen.insert((cell, month), line) {
            return Err(Error::Parse {
                line,
                msg: format!(
                    "duplicate ({}, {}) also defined at line {first}",
                    cell.lat(),
                    month
                ),
            });
        }
        records.push(ClimateRecord { cell, month, vars, spei1, line });
    }
    records.sort_by_key(|r| (r.cell, r.month));
    Ok(records)
}

pub fn load_records(path: &Path) -> Result<Vec<ClimateRecord>> {
    let text = fs::read_to_string(path)?;
    parse_records(&text)
}

// ---------------------------------------------------------------------------
// indexed table
// ---------------------------------------------------------------------------

/// Records indexed by (cell, month) for window construction.
pub struct ClimateTable {
    by_key: BTreeMap<(GridCell, MonthStamp), ClimateRecord>,
}

impl ClimateTable {
    pub fn new(records: Vec<ClimateRecord>) -> Self {
        let by_key = records.into_iter().map(|r| ((r.cell, r.month), r)).collect();
        ClimateTable { by_key }
    }

    pub fn get(&self, cell: GridCell, month: MonthStamp) -> Option<&ClimateRecord> {
        self.by_key.get(&(cell, month))
    }

    pub fn var(&self, cell: GridCell, month: MonthStamp, v: usize) -> Option<f64> {
        self.get(cell, month).and_then(|r| r.vars[v])
    }

    pub fn locations(&self) -> Vec<GridCell> {
        let mut cells: Vec<GridCell> = self.by_key.keys().map(|(c, _)| *c).collect();
        cells.dedup();
        cells
    }

    pub fn month_range(&self, cell: GridCell) -> Option<(MonthStamp, MonthStamp)> {
        let mut months = self
            .by_key
            .range((cell, MonthStamp::from_index(i64::MIN))..=(cell, MonthStamp::from_index(i64::MAX)))
            .map(|((_, m), _)| *m);
        let first = months.next()?;
        let last = months.next_back().unwrap_or(first);
        Some((first, last))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }
}

// ---------------------------------------------------------------------------
// window construction
// ---------------------------------------------------------------------------

/// Raw (unstandardized) 15x7 center history starting at `start`. Fails if
/// any value is missing: center gaps are not imputed.
pub fn center_window(
    table: &ClimateTable,
    cell: GridCell,
    start: MonthStamp,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(layout::MONTHS * VAR_COUNT);
    let mut missing = Vec::new();
    for m in 0..layout::MONTHS {
        let month = start.offset(m as i64);
        for v in 0..VAR_COUNT {
            match table.var(cell, month, v) {
                Some(x) => data.push(x),
                None => missing.push(format!("{month}/{}", VAR_NAMES[v])),
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Validation(format!(
            "center history incomplete: missing {}",
            missing.join(", ")
        )));
    }
    Tensor::from_vec(&[layout::MONTHS, VAR_COUNT], data)
}

/// Raw spatially augmented tensor `[105, 3, 3]` over the 3x3 neighborhood.
/// A missing neighbor value is imputed from the nearest cell of the window
/// that has it (Euclidean grid distance, first match on ties); the center is
/// the fallback of last resort and must be complete.
pub fn augment_spatial(
    table: &ClimateTable,
    center: GridCell,
    start: MonthStamp,
) -> Result<Tensor> {
    // verify the center precondition (also produces the fallback values)
    let center_vals = center_window(table, center, start)?;
    let cells: Vec<GridCell> = (0..9)
        .map(|p| center.shifted(p / 3 - 1, p % 3 - 1))
        .collect();
    let mut data = vec![0.0; layout::FLAT * 9];
    for m in 0..layout::MONTHS {
        let month = start.offset(m as i64);
        for v in 0..VAR_COUNT {
            let channel = m * VAR_COUNT + v;
            for (p, &cell) in cells.iter().enumerate() {
                let value = match table.var(cell, month, v) {
                    Some(x) => x,
                    None => {
                        let (pr, pc) = (p / 3, p % 3);
                        let mut best: Option<(f64, f64)> = None; // (distance, value)
                        for (q, &other) in cells.iter().enumerate() {
                            if q == p {
                                continue;
                            }
                            if let Some(x) = table.var(other, month, v) {
                                let (qr, qc) = (q / 3, q % 3);
                                let d2 = ((pr as f64 - qr as f64).powi(2)
                                    + (pc as f64 - qc as f64).powi(2))
                                .sqrt();
                                if best.is_none_or(|(bd, _)| d2 < bd) {
                                    best = Some((d2, x));
                                }
                            }
                        }
                        match best {
                            Some((_, x)) => x,
                            None => center_vals.data()[m * VAR_COUNT + v],
                        }
                    }
                };
                data[channel * 9 + p] = value;
            }
        }
    }
    Tensor::from_vec(&[layout::FLAT, 3, 3], data)
}

/// Standardize a raw window and its augmentation with the center cell's
/// per-variable statistics over the 15 window months. Constant variables
/// divide by 1 instead of the vanishing standard deviation.
pub fn standardize_window(window: &Tensor, augmented: &Tensor) -> Result<(Tensor, Tensor)> {
    if window.shape() != [layout::MONTHS, VAR_COUNT] || augmented.shape() != [layout::FLAT, 3, 3] {
        return Err(Error::Shape(format!(
            "standardize_window got {:?} / {:?}",
            window.shape(),
            augmented.shape()
        )));
    }
    let mut mean = [0.0; VAR_COUNT];
    let mut std = [0.0; VAR_COUNT];
    for v in 0..VAR_COUNT {
        let mut mu = 0.0;
        for m in 0..layout::MONTHS {
            mu += window.data()[m * VAR_COUNT + v];
        }
        mu /= layout::MONTHS as f64;
        let mut var = 0.0;
        for m in 0..layout::MONTHS {
            let d = window.data()[m * VAR_COUNT + v] - mu;
            var += d * d;
        }
        var /= layout::MONTHS as f64;
        mean[v] = mu;
        let sigma = var.sqrt();
        std[v] = if sigma < 1e-8 { 1.0 } else { sigma };
    }
    let mut z = vec![0.0; layout::FLAT];
    for m in 0..layout::MONTHS {
        for v in 0..VAR_COUNT {
            z[m * VAR_COUNT + v] = (window.data()[m * VAR_COUNT + v] - mean[v]) / std[v];
        }
    }
    let mut tz = vec![0.0; layout::FLAT * 9];
    for m in 0..layout::MONTHS {
        for v in 0..VAR_COUNT {
            let channel = m * VAR_COUNT + v;
            for p in 0..9 {
                tz[channel * 9 + p] = (augmented.data()[channel * 9 + p] - mean[v]) / std[v];
            }
        }
    }
    Ok((Tensor::from_vec(&[layout::FLAT], z)?, Tensor::from_vec(&[layout::FLAT, 3, 3], tz)?))
}

// ---------------------------------------------------------------------------
// samples and splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct WindowSample {
    /// Standardized flattened 15x7 history, month-major.
    pub z: Tensor,
    /// Standardized 105x3x3 spatial augmentation; `tz[:, 1, 1] == z`.
    pub tz: Tensor,
    /// SPEI-1 of the month following the window, unstandardized.
    pub target: f64,
    pub cell: GridCell,
    pub target_month: MonthStamp,
}

#[derive(Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<WindowSample>,
    pub validation: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

impl DatasetSplit {
    pub fn counts(&self) -> (usize, usize, usize) {
        (self.train.len(), self.validation.len(), self.test.len())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedWindow {
    pub target_month: String,
    pub reason: String,
}

/// One sample per eligible target month of `cell`, split by the target
/// month's year. Input windows may reach back across a split boundary;
/// targets never do.
pub fn build_splits(
    table: &ClimateTable,
    cell: GridCell,
) -> Result<(DatasetSplit, Vec<SkippedWindow>)> {
    let Some((first, last)) = table.month_range(cell) else {
        return Err(Error::Validation(format!(
            "no records for location ({}, {})",
            cell.lat(),
            cell.lon()
        )));
    };
    let mut split = DatasetSplit::default();
    let mut skipped = Vec::new();
    let mut target = first.offset(layout::MONTHS as i64);
    while target <= last {
        let start = target.offset(-(layout::MONTHS as i64));
        let outcome = (|| -> Result<WindowSample> {
            let record = table
                .get(cell, target)
                .ok_or_else(|| Error::Validation(format!("no record for target {target}")))?;
            let spei = record.spei1.ok_or_else(|| {
                Error::Validation(format!("target month {target} has no spei1"))
            })?;
            let window = center_window(table, cell, start)?;
            let augmented = augment_spatial(table, cell, start)?;
            let (z, tz) = standardize_window(&window, &augmented)?;
            Ok(WindowSample { z, tz, target: spei, cell, target_month: target })
        })();
        match outcome {
            Ok(sample) => {
                let year = target.year();
                if year <= TRAIN_YEARS.1 {
                    split.train.push(sample);
                } else if year <= VALIDATION_YEARS.1 {
                    split.validation.push(sample);
                } else {
                    split.test.push(sample);
                }
            }
            Err(e) => {
                skipped.push(SkippedWindow { target_month: target.to_string(), reason: e.to_string() })
            }
        }
        target = target.offset(1);
    }
    // an all-empty split is a warning condition for the caller, not an error
    Ok((split, skipped))
}

// ---------------------------------------------------------------------------
// sample cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"SQMCACH1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheMeta {
    pub lat: f64,
    pub lon: f64,
    pub months: usize,
    pub vars: usize,
    pub window: usize,
    pub first_month: String,
    pub last_month: String,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

pub fn write_cache(path: &Path, cell: GridCell, split: &DatasetSplit) -> Result<CacheMeta> {
    let all = || split.train.iter().chain(&split.validation).chain(&split.test);
    let first = all().map(|s| s.target_month).min();
    let last = all().map(|s| s.target_month).max();
    let meta = CacheMeta {
        lat: cell.lat(),
        lon: cell.lon(),
        months: layout::MONTHS,
        vars: VAR_COUNT,
        window: layout::WINDOW,
        first_month: first.map(|m| m.to_string()).unwrap_or_default(),
        last_month: last.map(|m| m.to_string()).unwrap_or_default(),
        train: split.train.len(),
        validation: split.validation.len(),
        test: split.test.len(),
    };
    let meta_bytes =
        serde_json::to_vec(&meta).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    for sample in all() {
        buf.extend_from_slice(&sample.target_month.index().to_le_bytes());
        buf.extend_from_slice(&sample.target.to_le_bytes());
        for v in sample.z.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in sample.tz.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(meta)
}

pub fn read_cache(path: &Path) -> Result<(DatasetSplit, CacheMeta)> {
    let bytes = fs::read(path)?;
    if bytes.len() < CACHE_MAGIC.len() + 8 || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
        return Err(Error::Version(format!("{} is not a sample cache", path.display())));
    }
    let mut off = CACHE_MAGIC.len();
    let meta_len = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize;
    off += 8;
    if bytes.len() < off + meta_len {
        return Err(Error::Version("sample cache truncated in manifest".into()));
    }
    let meta: CacheMeta = serde_json::from_slice(&bytes[off..off + meta_len])
        .map_err(|e| Error::Version(format!("bad cache manifest: {e}")))?;
    off += meta_len;
    if meta.months != layout::MONTHS || meta.vars != VAR_COUNT || meta.window != layout::WINDOW {
        return Err(Error::Version(
            "sample cache layout does not match this build's window layout".into(),
        ));
    }
    let cell = GridCell::from_degrees(meta.lat, meta.lon)?;
    let sample_bytes = 8 + 8 + (layout::FLAT + layout::FLAT * 9) * 8;
    let total = meta.train + meta.validation + meta.test;
    if bytes.len() != off + total * sample_bytes {
        return Err(Error::Version("sample cache truncated in data".into()));
    }
    let read_sample = |off: &mut usize| -> Result<WindowSample> {
        let month = i64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        let target = f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap());
        *off += 8;
        let mut z = Vec::with_capacity(layout::FLAT);
        for _ in 0..layout::FLAT {
            z.push(f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap()));
            *off += 8;
        }
        let mut tz = Vec::with_capacity(layout::FLAT * 9);
        for _ in 0..layout::FLAT * 9 {
            tz.push(f64::from_le_bytes(bytes[*off..*off + 8].try_into().unwrap()));
            *off += 8;
        }
        Ok(WindowSample {
            z: Tensor::from_vec(&[layout::FLAT], z)?,
            tz: Tensor::from_vec(&[layout::FLAT, 3, 3], tz)?,
            target,
            cell,
            target_month: MonthStamp::from_index(month),
        })
    };
    let mut split = DatasetSplit::default();
    for _ in 0..meta.train {
        split.train.push(read_sample(&mut off)?);
    }
    for _ in 0..meta.validation {
        split.validation.push(read_sample(&mut off)?);
    }
    for _ in 0..meta.test {
        split.test.push(read_sample(&mut off)?);
    }
    Ok((split, meta))
}

/// Audit manifest emitted next to the parsed output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestManifest {
    pub locations: Vec<(f64, f64)>,
    pub first_month: String,
    pub last_month: String,
    pub row_count: usize,
    pub center: (f64, f64),
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub skipped: Vec<SkippedWindow>,
}
