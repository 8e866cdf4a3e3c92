//! Speed records: ingestion of hourly probe aggregates, day-of-week by
//! hour-of-day aggregation, free-flow speed, and the tile split.

mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{render_image, synth_city, Image, RoadClass, SynthConfig, SynthWorld};

use crate::geo::TileIndex;
use crate::{Error, Result};

pub const DAYS: u8 = 7;
pub const HOURS: u8 = 24;
pub const SLOTS: usize = 168;
const KMH_PER_MPH: f64 = 1.609_344;

pub const DAY_NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// A (day-of-week, hour-of-day) slot. Day 0 is Monday.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub day: u8,
    pub hour: u8,
}

impl Slot {
    pub fn new(day: u8, hour: u8) -> Result<Self> {
        if day >= DAYS {
            return Err(Error::Bounds {
                index: day.into(),
                len: DAYS.into(),
            });
        }
        if hour >= HOURS {
            return Err(Error::Bounds {
                index: hour.into(),
                len: HOURS.into(),
            });
        }
        Ok(Self { day, hour })
    }

    pub fn index(&self) -> usize {
        usize::from(self.day) * usize::from(HOURS) + usize::from(self.hour)
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            day: (i / HOURS as usize) as u8,
            hour: (i % HOURS as usize) as u8,
        }
    }

    pub fn all() -> impl Iterator<Item = Slot> {
        (0..SLOTS).map(Slot::from_index)
    }

    /// Parses `day:hour` where day is 0-6 or a three-letter name.
    pub fn parse(s: &str) -> Result<Self> {
        let (d, h) = s
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("slot '{s}' is not day:hour")))?;
        let day = match DAY_NAMES
            .iter()
            .position(|n| n.eq_ignore_ascii_case(d.trim()))
        {
            Some(i) => i as u8,
            None => d
                .trim()
                .parse()
                .map_err(|_| Error::Usage(format!("slot '{s}' has a bad day")))?,
        };
        let hour = h
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("slot '{s}' has a bad hour")))?;
        Slot::new(day, hour)
    }
}

/// One hourly observation as read from a probe-speed export.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub segment_id: String,
    pub date: NaiveDate,
    pub hour: u8,
    pub speed_kmh: f64,
}

impl RawRecord {
    pub fn slot(&self) -> Slot {
        Slot {
            day: self.date.weekday().num_days_from_monday() as u8,
            hour: self.hour,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Ingested {
    pub records: Vec<RawRecord>,
    pub errors: Vec<RowError>,
}

/// Reads an hourly segment-speed CSV in the Movement layout. Required
/// columns are `segment_id`, `year`, `month`, `day`, `hour` and one of
/// `speed_kmh`, `speed_kph_mean` or `speed_mph_mean`. Bad rows are
/// collected with their line numbers.
pub fn ingest_movement_csv<R: Read>(reader: R) -> Result<Ingested> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let require = |name: &str| {
        col(name).ok_or_else(|| Error::Format(format!("missing required column '{name}'")))
    };
    let seg = require("segment_id")?;
    let (year, month, day, hour) = (
        require("year")?,
        require("month")?,
        require("day")?,
        require("hour")?,
    );
    let (speed, factor) = if let Some(i) = col("speed_kmh") {
        (i, 1.0)
    } else if let Some(i) = col("speed_kph_mean") {
        (i, 1.0)
    } else if let Some(i) = col("speed_mph_mean") {
        (i, KMH_PER_MPH)
    } else {
        return Err(Error::Format(
            "missing speed column (speed_kmh, speed_kph_mean or speed_mph_mean)".into(),
        ));
    };

    let mut out = Ingested::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                out.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let parsed = (|| -> std::result::Result<RawRecord, String> {
            let int = |i: usize, what: &str| -> std::result::Result<i64, String> {
                row.get(i)
                    .and_then(|v| v.parse::<i64>().ok())
                    .ok_or_else(|| format!("bad {what} '{}'", row.get(i).unwrap_or("")))
            };
            let date = NaiveDate::from_ymd_opt(
                int(year, "year")? as i32,
                int(month, "month")? as u32,
                int(day, "day")? as u32,
            )
            .ok_or("invalid calendar date")?;
            let h = int(hour, "hour")?;
            if !(0..24).contains(&h) {
                return Err(format!("hour {h} outside 0-23"));
            }
            let raw = row.get(speed).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| format!("non-numeric speed '{raw}'"))?;
            if !v.is_finite() || v <= 0.0 {
                return Err(format!("speed '{raw}' is not a positive number"));
            }
            let id = row.get(seg).unwrap_or("");
            if id.is_empty() {
                return Err("empty segment id".into());
            }
            Ok(RawRecord {
                segment_id: id.to_owned(),
                date,
                hour: h as u8,
                speed_kmh: v * factor,
            })
        })();
        match parsed {
            Ok(r) => out.records.push(r),
            Err(message) => out.errors.push(RowError { line, message }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotStat {
    pub speed_kmh: f64,
    pub n_samples: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRecord {
    pub segment_id: String,
    pub slot: Slot,
    pub speed_kmh: f64,
    pub n_samples: u32,
}

/// Mean speed and observation count per (segment, day, hour).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeedTable {
    entries: BTreeMap<String, BTreeMap<Slot, SlotStat>>,
}

impl SpeedTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: SpeedRecord) -> Result<()> {
        if !(record.speed_kmh > 0.0) || !record.speed_kmh.is_finite() {
            return Err(Error::domain(format!(
                "speed {} for {} must be positive",
                record.speed_kmh, record.segment_id
            )));
        }
        if record.n_samples == 0 {
            return Err(Error::domain("slot sample count must be at least one"));
        }
        let slots = self.entries.entry(record.segment_id.clone()).or_default();
        if slots.contains_key(&record.slot) {
            return Err(Error::Format(format!(
                "duplicate slot {:?} for segment {}",
                record.slot, record.segment_id
            )));
        }
        slots.insert(
            record.slot,
            SlotStat {
                speed_kmh: record.speed_kmh,
                n_samples: record.n_samples,
            },
        );
        Ok(())
    }

    pub fn get(&self, segment_id: &str, slot: Slot) -> Option<SlotStat> {
        self.entries.get(segment_id)?.get(&slot).copied()
    }

    pub fn segment_slots(&self, segment_id: &str) -> impl Iterator<Item = (Slot, SlotStat)> + '_ {
        self.entries
            .get(segment_id)
            .into_iter()
            .flat_map(|m| m.iter().map(|(s, v)| (*s, *v)))
    }

    pub fn segments(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = SpeedRecord> + '_ {
        self.entries.iter().flat_map(|(id, slots)| {
            slots.iter().map(move |(slot, stat)| SpeedRecord {
                segment_id: id.clone(),
                slot: *slot,
                speed_kmh: stat.speed_kmh,
                n_samples: stat.n_samples,
            })
        })
    }

    /// Canonical CSV: `segment_id,day,hour,speed_kmh,n_samples`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["segment_id", "day", "hour", "speed_kmh", "n_samples"])?;
        for r in self.iter() {
            w.write_record([
                r.segment_id,
                r.slot.day.to_string(),
                r.slot.hour.to_string(),
                r.speed_kmh.to_string(),
                r.n_samples.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            segment_id: String,
            day: u8,
            hour: u8,
            speed_kmh: f64,
            n_samples: u32,
        }
        let mut table = SpeedTable::new();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: Row = row?;
            table.insert(SpeedRecord {
                segment_id: row.segment_id,
                slot: Slot::new(row.day, row.hour)?,
                speed_kmh: row.speed_kmh,
                n_samples: row.n_samples,
            })?;
        }
        Ok(table)
    }
}

/// Arithmetic mean per (segment, day, hour), with contributing-record counts.
pub fn aggregate_speeds(records: &[RawRecord]) -> SpeedTable {
    let mut acc: BTreeMap<String, BTreeMap<Slot, (f64, u32)>> = BTreeMap::new();
    for r in records {
        let e = acc
            .entry(r.segment_id.clone())
            .or_default()
            .entry(r.slot())
            .or_insert((0.0, 0));
        e.0 += r.speed_kmh;
        e.1 += 1;
    }
    let entries = acc
        .into_iter()
        .map(|(id, slots)| {
            let slots = slots
                .into_iter()
                .map(|(slot, (sum, n))| {
                    (
                        slot,
                        SlotStat {
                            speed_kmh: sum / f64::from(n),
                            n_samples: n,
                        },
                    )
                })
                .collect();
            (id, slots)
        })
        .collect();
    SpeedTable { entries }
}

/// Nearest-rank 85th percentile: the value at 1-based rank ceil(0.85 n).
pub fn free_flow_speed(speeds: &[f64]) -> Result<f64> {
    if speeds.is_empty() {
        return Err(Error::domain("free-flow speed of an empty list"));
    }
    let mut sorted = speeds.to_vec();
    sorted.sort_by(f64::total_cmp);
    // 0.85 * n computed in integers to keep the rank exact
    let rank = (85 * sorted.len()).div_ceil(100).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TileIndex>,
    pub val: Vec<TileIndex>,
    pub test: Vec<TileIndex>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.85,
            val: 0.05,
            test: 0.10,
        }
    }
}

/// Seeded shuffle, then validation and test sizes are floored and the
/// remainder goes to training.
pub fn split_tiles(tiles: &[TileIndex], ratios: SplitRatios, seed: u64) -> Result<DatasetSplit> {
    let sum = ratios.train + ratios.val + ratios.test;
    if (sum - 1.0).abs() > 1e-9 || ratios.train < 0.0 || ratios.val < 0.0 || ratios.test < 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be non-negative and sum to 1, got {sum}"
        )));
    }
    let unique: BTreeSet<TileIndex> = tiles.iter().copied().collect();
    let mut shuffled: Vec<TileIndex> = unique.into_iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = shuffled.len() as f64;
    let n_val = (n * ratios.val + 1e-9).floor() as usize;
    let n_test = (n * ratios.test + 1e-9).floor() as usize;
    let test = shuffled.split_off(shuffled.len() - n_test);
    let val = shuffled.split_off(shuffled.len() - n_val);
    Ok(DatasetSplit {
        train: shuffled,
        val,
        test,
    })
}

impl DatasetSplit {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tile", "set"])?;
        for (set, tiles) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            for t in tiles {
                w.write_record([t.to_string(), set.to_owned()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut out = DatasetSplit::default();
        for row in csv::Reader::from_reader(reader).records() {
            let row = row?;
            let tile: TileIndex = row.get(0).unwrap_or("").parse()?;
            match row.get(1) {
                Some("train") => out.train.push(tile),
                Some("val") => out.val.push(tile),
                Some("test") => out.test.push(tile),
                other => return Err(Error::Format(format!("unknown split set {other:?}"))),
            }
        }
        Ok(out)
    }

    pub fn all(&self) -> impl Iterator<Item = &TileIndex> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}
