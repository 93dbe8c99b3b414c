//! wILI surveillance CSV ingestion and season segmentation.
//!
//! Input schema: a header row `region,year,week,wili` followed by one row
//! per region and epiweek. A season runs from calendar week 21 to week 20
//! of the following year; its length is the number of epiweeks in its
//! first year (52 or 53).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First calendar week of a season.
pub const SEASON_START_WEEK: u32 = 21;
/// First calendar week that is scored in real-time evaluation.
pub const EVAL_START_WEEK: u32 = 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Epiweek {
    pub year: i32,
    pub week: u32,
}

impl Epiweek {
    pub fn new(year: i32, week: u32) -> Result<Self> {
        if !(1..=53).contains(&week) {
            return Err(Error::Data(format!("week {week} outside 1..=53")));
        }
        Ok(Epiweek { year, week })
    }

    pub fn next(self) -> Epiweek {
        if self.week >= weeks_in_year(self.year) {
            Epiweek {
                year: self.year + 1,
                week: 1,
            }
        } else {
            Epiweek {
                year: self.year,
                week: self.week + 1,
            }
        }
    }

    /// Start year of the season containing this week.
    pub fn season_year(self) -> i32 {
        if self.week >= SEASON_START_WEEK {
            self.year
        } else {
            self.year - 1
        }
    }

    /// Zero-based position inside its season.
    pub fn season_index(self) -> usize {
        if self.week >= SEASON_START_WEEK {
            (self.week - SEASON_START_WEEK) as usize
        } else {
            (weeks_in_year(self.year - 1) - SEASON_START_WEEK + 1 + self.week - 1) as usize
        }
    }
}

impl std::fmt::Display for Epiweek {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}w{:02}", self.year, self.week)
    }
}

/// Day of week of January 1st, 0 = Sunday.
fn jan1_weekday(year: i32) -> i32 {
    let y = year - 1;
    (1 + 5 * y.rem_euclid(4) + 4 * y.rem_euclid(100) + 6 * y.rem_euclid(400)).rem_euclid(7)
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

/// Number of MMWR (Sunday-start) epiweeks in `year`.
pub fn weeks_in_year(year: i32) -> u32 {
    match jan1_weekday(year) {
        3 => 53,
        2 if is_leap(year) => 53,
        _ => 52,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WiliRecord {
    pub epiweek: Epiweek,
    pub region: String,
    pub wili: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRecords {
    pub records: Vec<WiliRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct Row {
    region: String,
    year: i32,
    week: u32,
    wili: f64,
}

/// Reads `path`, keeping rows whose region equals `region`.
pub fn parse_csv(path: &Path, region: &str) -> Result<ParsedRecords> {
    let file = std::fs::File::open(path)?;
    parse_reader(file, path, region)
}

pub fn parse_reader<R: Read>(reader: R, source: &Path, region: &str) -> Result<ParsedRecords> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let err = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(source),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
    for col in ["region", "year", "week", "wili"] {
        if !headers.iter().any(|h| h == col) {
            return Err(err(1, format!("missing column `{col}`")));
        }
    }
    let mut by_week: BTreeMap<Epiweek, WiliRecord> = BTreeMap::new();
    let mut seen_regions = false;
    for result in rdr.records() {
        let raw = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = raw.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: Row = raw
            .deserialize(Some(&headers))
            .map_err(|e| err(line, e.to_string()))?;
        if row.region != region {
            continue;
        }
        seen_regions = true;
        let epiweek = Epiweek::new(row.year, row.week).map_err(|e| err(line, e.to_string()))?;
        if !row.wili.is_finite() || row.wili < 0.0 {
            return Err(err(line, format!("wILI value {} must be finite and >= 0", row.wili)));
        }
        if by_week.contains_key(&epiweek) {
            return Err(err(line, format!("duplicate epiweek {epiweek} for region {region}")));
        }
        by_week.insert(
            epiweek,
            WiliRecord {
                epiweek,
                region: row.region,
                wili: row.wili,
            },
        );
    }
    let mut warnings = Vec::new();
    if !seen_regions {
        let w = format!("no rows for region `{region}` in {}", source.display());
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(ParsedRecords {
        records: by_week.into_values().collect(),
        warnings,
    })
}

/// One complete season of weekly values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonSeries {
    /// Label like `2003/04`.
    pub id: String,
    pub start_year: i32,
    pub values: Vec<f64>,
}

impl SeasonSeries {
    pub fn new(start_year: i32, values: Vec<f64>) -> Self {
        SeasonSeries {
            id: season_label(start_year),
            start_year,
            values,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Calendar epiweek of zero-based season index `i`.
    pub fn epiweek(&self, i: usize) -> Epiweek {
        let mut w = Epiweek {
            year: self.start_year,
            week: SEASON_START_WEEK,
        };
        for _ in 0..i {
            w = w.next();
        }
        w
    }
}

pub fn season_label(start_year: i32) -> String {
    format!("{}/{:02}", start_year, (start_year + 1).rem_euclid(100))
}

/// Parses `2003/04` into its start year.
pub fn parse_season_label(label: &str) -> Result<i32> {
    let (a, b) = label
        .split_once('/')
        .ok_or_else(|| Error::Data(format!("season label `{label}` is not YYYY/YY")))?;
    let year: i32 = a
        .parse()
        .map_err(|_| Error::Data(format!("season label `{label}` is not YYYY/YY")))?;
    if season_label(year) != format!("{a}/{b}") {
        return Err(Error::Data(format!("season label `{label}` is not consecutive years")));
    }
    Ok(year)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmented {
    pub seasons: Vec<SeasonSeries>,
    pub warnings: Vec<String>,
}

/// Cuts sorted single-region records into complete seasons. Partial seasons
/// at either end are dropped with a warning; any missing week between the
/// first and last record is an error.
pub fn segment_seasons(records: &[WiliRecord]) -> Result<Segmented> {
    let mut warnings = Vec::new();
    if records.is_empty() {
        return Ok(Segmented {
            seasons: Vec::new(),
            warnings,
        });
    }
    if let Some(r) = records.iter().find(|r| r.region != records[0].region) {
        return Err(Error::Data(format!(
            "segmenting mixes regions `{}` and `{}`",
            records[0].region, r.region
        )));
    }
    for pair in records.windows(2) {
        let expected = pair[0].epiweek.next();
        if pair[1].epiweek != expected {
            if pair[1].epiweek <= pair[0].epiweek {
                return Err(Error::Data(format!(
                    "records not sorted: {} follows {}",
                    pair[1].epiweek, pair[0].epiweek
                )));
            }
            return Err(Error::Data(format!("missing epiweek {expected}")));
        }
    }
    let mut groups: BTreeMap<i32, Vec<&WiliRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.epiweek.season_year()).or_default().push(r);
    }
    let mut seasons = Vec::new();
    for (year, recs) in groups {
        let expected = weeks_in_year(year) as usize;
        let starts = recs[0].epiweek.season_index() == 0;
        if recs.len() == expected && starts {
            seasons.push(SeasonSeries::new(year, recs.iter().map(|r| r.wili).collect()));
        } else {
            let w = format!(
                "season {} incomplete ({} of {expected} weeks), dropped",
                season_label(year),
                recs.len()
            );
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(Segmented { seasons, warnings })
}

/// Values of the season starting in `start_year` from its first week
/// through `as_of`, for forecasting inside a season that may be incomplete.
pub fn season_prefix(records: &[WiliRecord], start_year: i32, as_of: Epiweek) -> Result<Vec<f64>> {
    if as_of.season_year() != start_year || as_of.week > weeks_in_year(as_of.year) {
        return Err(Error::Data(format!(
            "week {as_of} is not inside season {}",
            season_label(start_year)
        )));
    }
    let by_week: BTreeMap<Epiweek, f64> = records.iter().map(|r| (r.epiweek, r.wili)).collect();
    let mut week = Epiweek {
        year: start_year,
        week: SEASON_START_WEEK,
    };
    let mut out = Vec::new();
    loop {
        match by_week.get(&week) {
            Some(&v) => out.push(v),
            None => return Err(Error::Data(format!("missing epiweek {week}"))),
        }
        if week == as_of {
            return Ok(out);
        }
        week = week.next();
    }
}

/// A `(prefix, target)` pair inside one season.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalPoint {
    /// Number of observed weeks `t` (prefix is `values[..t]`).
    pub prefix_len: usize,
    /// Zero-based season index of the target `x^(t+k)`.
    pub target_index: usize,
}

/// Points whose target index runs from `first_target` to the season end.
pub fn eval_points(season_len: usize, horizon: usize, first_target: usize) -> Vec<EvalPoint> {
    let start = first_target.max(horizon);
    (start..season_len)
        .map(|target_index| EvalPoint {
            prefix_len: target_index + 1 - horizon,
            target_index,
        })
        .collect()
}

/// Real-time evaluation points: targets from calendar week 40 to the season end.
pub fn realtime_eval_points(season: &SeasonSeries, horizon: usize) -> Vec<EvalPoint> {
    let first = (EVAL_START_WEEK - SEASON_START_WEEK) as usize;
    eval_points(season.len(), horizon, first)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_of_running_season() {
        let from = Epiweek::new(2003, 21).unwrap();
        let recs = season_records(2003, from, Epiweek::new(2003, 45).unwrap());
        let p = season_prefix(&recs, 2003, Epiweek::new(2003, 40).unwrap()).unwrap();
        assert_eq!(p.len(), 20);
        assert_eq!(p[0], recs[0].wili);
        assert_eq!(season_prefix(&recs, 2003, from).unwrap().len(), 1);
        assert!(season_prefix(&recs, 2003, Epiweek::new(2003, 50).unwrap()).is_err());
        assert!(season_prefix(&recs, 2003, Epiweek::new(2003, 20).unwrap()).is_err());
        assert!(season_prefix(&recs, 2002, Epiweek::new(2003, 30).unwrap()).is_err());
    }

    fn parse(text: &str, region: &str) -> Result<ParsedRecords> {
        parse_reader(text.as_bytes(), Path::new("fixture.csv"), region)
    }

    fn season_records(start_year: i32, from: Epiweek, to: Epiweek) -> Vec<WiliRecord> {
        let mut out = Vec::new();
        let mut w = from;
        let mut i = 0.0;
        loop {
            out.push(WiliRecord {
                epiweek: w,
                region: "nat".into(),
                wili: 1.0 + i * 0.01,
            });
            i += 1.0;
            if w == to {
                break;
            }
            w = w.next();
        }
        let _ = start_year;
        out
    }

    #[test]
    fn known_53_week_years() {
        for y in [2003, 2008, 2014, 2020] {
            assert_eq!(weeks_in_year(y), 53, "{y}");
        }
        for y in [2004, 2009, 2013, 2019] {
            assert_eq!(weeks_in_year(y), 52, "{y}");
        }
    }

    #[test]
    fn parses_and_sorts() {
        let csv = "region,year,week,wili\nnat,2004,2,1.5\nnat,2003,52,2.0\nnat,2004,1,1.7\nhhs1,2004,1,9\n";
        let p = parse(csv, "nat").unwrap();
        let weeks: Vec<_> = p.records.iter().map(|r| r.epiweek.to_string()).collect();
        assert_eq!(weeks, ["2003w52", "2004w01", "2004w02"]);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn negative_value_reports_line() {
        let csv = "region,year,week,wili\nnat,2004,1,1.5\nnat,2004,2,-0.1\n";
        match parse(csv, "nat") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_epiweek_named() {
        let csv = "region,year,week,wili\nnat,2004,1,1.5\nnat,2004,1,1.6\n";
        let e = parse(csv, "nat").unwrap_err();
        assert!(e.to_string().contains("2004w01"), "{e}");
    }

    #[test]
    fn malformed_row_and_unknown_region() {
        let csv = "region,year,week,wili\nnat,2004,x,1.5\n";
        assert!(matches!(parse(csv, "nat"), Err(Error::Parse { line: 2, .. })));
        let p = parse("region,year,week,wili\nnat,2004,1,1.0\n", "hhs9").unwrap();
        assert!(p.records.is_empty());
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn one_full_season() {
        let recs = season_records(2003, Epiweek::new(2003, 21).unwrap(), Epiweek::new(2004, 20).unwrap());
        let s = segment_seasons(&recs).unwrap();
        assert_eq!(s.seasons.len(), 1);
        assert_eq!(s.seasons[0].id, "2003/04");
        // 2003 has 53 MMWR weeks, so this season keeps its extra week
        assert_eq!(s.seasons[0].len(), 53);
        let recs = season_records(2004, Epiweek::new(2004, 21).unwrap(), Epiweek::new(2005, 20).unwrap());
        let s = segment_seasons(&recs).unwrap();
        assert_eq!(s.seasons[0].len(), 52);
        assert_eq!(s.seasons[0].epiweek(51), Epiweek::new(2005, 20).unwrap());
    }

    #[test]
    fn partial_season_dropped_with_warning() {
        let recs = season_records(2003, Epiweek::new(2003, 30).unwrap(), Epiweek::new(2004, 20).unwrap());
        let s = segment_seasons(&recs).unwrap();
        assert!(s.seasons.is_empty());
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn two_seasons_in_order_and_gap_detected() {
        let recs = season_records(2004, Epiweek::new(2004, 21).unwrap(), Epiweek::new(2006, 20).unwrap());
        let s = segment_seasons(&recs).unwrap();
        let ids: Vec<_> = s.seasons.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["2004/05", "2005/06"]);

        let mut gappy = recs.clone();
        gappy.remove(10);
        let e = segment_seasons(&gappy).unwrap_err();
        assert!(e.to_string().contains("2004w31"), "{e}");
    }

    #[test]
    fn realtime_points_span_week_40_to_end() {
        let s = SeasonSeries::new(2004, vec![1.0; 52]);
        let k1 = realtime_eval_points(&s, 1);
        assert_eq!(s.epiweek(k1[0].target_index), Epiweek::new(2004, 40).unwrap());
        assert_eq!(s.epiweek(k1.last().unwrap().target_index), Epiweek::new(2005, 20).unwrap());
        assert!(k1[0].prefix_len >= 1);
        let k4 = realtime_eval_points(&s, 4);
        assert_eq!(k4[0].prefix_len + 3, k1[0].prefix_len);
        assert!(k4.iter().all(|p| p.prefix_len + 4 == p.target_index + 1));
    }

    #[test]
    fn season_labels_round_trip() {
        assert_eq!(season_label(1999), "1999/00");
        assert_eq!(parse_season_label("2014/15").unwrap(), 2014);
        assert!(parse_season_label("2014/16").is_err());
    }
}
