//! Hourly readings: CSV input/output, the synthetic generator, utility price
//! series and the monthly balance and external-donation schedules.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Duration, Months, NaiveDate, NaiveDateTime, Timelike};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MonthKey, PeerId, Role, TimeStep};
use crate::quantity::{div_round_half_up, EnergyQuantity, Fraction, MoneyAmount, UnitPrice};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("line {line}: duplicate reading for peer {peer} at {timestamp}")]
    Duplicate {
        line: u64,
        peer: PeerId,
        timestamp: String,
    },
    #[error("coverage gap: peer {peer} has no reading at {timestamp}")]
    CoverageGap { peer: PeerId, timestamp: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("no readings")]
    Empty,
    #[error("utility price series has no entry for {0}")]
    PriceGap(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynthetic(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Reading {
    pub production: EnergyQuantity,
    pub consumption: EnergyQuantity,
}

/// Dense per-peer, per-hour readings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReadingSeries {
    timestamps: Vec<NaiveDateTime>,
    peers: Vec<PeerId>,
    /// `readings[peer_index][timestep]`
    readings: Vec<Vec<Reading>>,
}

impl ReadingSeries {
    /// Builds a series from dense rows. Panics if the shape is inconsistent.
    pub fn from_dense(timestamps: Vec<NaiveDateTime>, peers: Vec<PeerId>, readings: Vec<Vec<Reading>>) -> Self {
        assert_eq!(peers.len(), readings.len());
        assert!(readings.iter().all(|r| r.len() == timestamps.len()));
        assert!(peers.windows(2).all(|w| w[0] < w[1]), "peers must be sorted and unique");
        Self {
            timestamps,
            peers,
            readings,
        }
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn peers(&self) -> &[PeerId] {
        &self.peers
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = TimeStep> + '_ {
        self.timestamps.iter().enumerate().map(|(i, ts)| TimeStep {
            index: i as u32,
            timestamp: *ts,
        })
    }

    pub fn reading(&self, peer_index: usize, step: usize) -> Reading {
        self.readings[peer_index][step]
    }

    pub fn peer_series(&self, peer_index: usize) -> &[Reading] {
        &self.readings[peer_index]
    }

    /// Prosumer iff the peer produces anything over the whole range.
    pub fn role(&self, peer_index: usize) -> Role {
        if self.readings[peer_index].iter().any(|r| !r.production.is_zero()) {
            Role::Prosumer
        } else {
            Role::Consumer
        }
    }

    /// Index of the first timestep of each calendar month in the range.
    pub fn month_starts(&self) -> Vec<(MonthKey, usize)> {
        let mut out: Vec<(MonthKey, usize)> = Vec::new();
        for (i, ts) in self.timestamps.iter().enumerate() {
            let key = MonthKey::of(ts);
            if out.last().map(|(k, _)| *k != key).unwrap_or(true) {
                out.push((key, i));
            }
        }
        out
    }
}

/// Maps the reading fields onto CSV header names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub timestamp: String,
    pub peer_id: String,
    pub production_kwh: String,
    pub consumption_kwh: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            peer_id: "peer_id".into(),
            production_kwh: "production_kwh".into(),
            consumption_kwh: "consumption_kwh".into(),
        }
    }
}

/// Decimal kWh to integer Wh. Digits past the third decimal round half-up.
pub fn parse_kwh(text: &str) -> Option<EnergyQuantity> {
    let t = text.trim();
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
        return None;
    }
    let whole: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let digits: Vec<u64> = frac.bytes().map(|b| (b - b'0') as u64).collect();
    let mut milli = 0u64;
    for i in 0..3 {
        milli = milli * 10 + digits.get(i).copied().unwrap_or(0);
    }
    let round_up = digits.get(3).map(|d| *d >= 5).unwrap_or(false);
    whole.checked_mul(1000)?.checked_add(milli + round_up as u64).map(EnergyQuantity)
}

pub fn format_kwh(energy: EnergyQuantity) -> String {
    format!("{}.{:03}", energy.0 / 1000, energy.0 % 1000)
}

pub fn parse_timestamp(text: &str) -> Option<NaiveDateTime> {
    let t = text.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%d %H:%M:%S",
    ] {
        if let Ok(ts) = NaiveDateTime::parse_from_str(t, fmt) {
            return Some(ts);
        }
    }
    None
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, IngestError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| IngestError::MissingColumn(name.to_string()))
}

/// Parses hourly readings into a dense series.
///
/// The range runs from the earliest to the latest timestamp in the file;
/// every peer must have exactly one row for every hour in it.
pub fn parse_readings<R: Read>(source: R, mapping: &ColumnMapping) -> Result<ReadingSeries, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers()?.clone();
    let c_ts = column(&headers, &mapping.timestamp)?;
    let c_peer = column(&headers, &mapping.peer_id)?;
    let c_prod = column(&headers, &mapping.production_kwh)?;
    let c_cons = column(&headers, &mapping.consumption_kwh)?;

    let mut cells: BTreeMap<(PeerId, NaiveDateTime), Reading> = BTreeMap::new();
    let mut record = csv::StringRecord::new();
    loop {
        if !rdr.read_record(&mut record)? {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |message: String| IngestError::Malformed { line, message };
        let field = |i: usize| record.get(i).unwrap_or("");
        let ts = parse_timestamp(field(c_ts)).ok_or_else(|| malformed(format!("bad timestamp `{}`", field(c_ts))))?;
        if ts.minute() != 0 || ts.second() != 0 {
            return Err(malformed(format!("timestamp `{}` is not on the hour", field(c_ts))));
        }
        let peer = field(c_peer)
            .parse::<u32>()
            .map(PeerId)
            .map_err(|_| malformed(format!("bad peer id `{}`", field(c_peer))))?;
        let production =
            parse_kwh(field(c_prod)).ok_or_else(|| malformed(format!("bad production `{}`", field(c_prod))))?;
        let consumption =
            parse_kwh(field(c_cons)).ok_or_else(|| malformed(format!("bad consumption `{}`", field(c_cons))))?;
        if cells
            .insert(
                (peer, ts),
                Reading {
                    production,
                    consumption,
                },
            )
            .is_some()
        {
            return Err(IngestError::Duplicate {
                line,
                peer,
                timestamp: ts.format(TIMESTAMP_FORMAT).to_string(),
            });
        }
    }

    let (first, last) = match (cells.keys().map(|k| k.1).min(), cells.keys().map(|k| k.1).max()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(IngestError::Empty),
    };
    let mut timestamps = Vec::new();
    let mut ts = first;
    while ts <= last {
        timestamps.push(ts);
        ts += Duration::hours(1);
    }
    let peers: Vec<PeerId> = cells.keys().map(|k| k.0).collect::<BTreeSet<_>>().into_iter().collect();
    let mut readings = Vec::with_capacity(peers.len());
    for &peer in &peers {
        let mut row = Vec::with_capacity(timestamps.len());
        for ts in &timestamps {
            match cells.get(&(peer, *ts)) {
                Some(r) => row.push(*r),
                None => {
                    return Err(IngestError::CoverageGap {
                        peer,
                        timestamp: ts.format(TIMESTAMP_FORMAT).to_string(),
                    })
                }
            }
        }
        readings.push(row);
    }
    Ok(ReadingSeries::from_dense(timestamps, peers, readings))
}

pub fn read_readings_file(path: &Path, mapping: &ColumnMapping) -> Result<ReadingSeries, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_readings(std::io::BufReader::new(file), mapping)
}

/// Writes the series in the standard input format, timestamp-major.
pub fn write_readings<W: Write>(series: &ReadingSeries, sink: W) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["timestamp", "peer_id", "production_kwh", "consumption_kwh"])?;
    for (t, ts) in series.timestamps.iter().enumerate() {
        let stamp = ts.format(TIMESTAMP_FORMAT).to_string();
        for (p, peer) in series.peers.iter().enumerate() {
            let r = series.readings[p][t];
            w.write_record([
                stamp.as_str(),
                &peer.to_string(),
                &format_kwh(r.production),
                &format_kwh(r.consumption),
            ])?;
        }
    }
    w.flush().map_err(|source| IngestError::Io {
        path: "<output>".into(),
        source,
    })?;
    Ok(())
}

/// Parameters of the synthetic community generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub peer_count: u32,
    pub months: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_start")]
    pub start: NaiveDate,
    #[serde(default = "default_prosumer_fraction")]
    pub prosumer_fraction: Fraction,
    /// Peak hourly production of an average prosumer on a clear June day.
    #[serde(default = "default_peak")]
    pub peak_production_wh: u64,
    /// Mean hourly consumption of an average peer.
    #[serde(default = "default_base")]
    pub base_consumption_wh: u64,
    /// Uniform multiplicative noise, +/- this many percent per reading.
    #[serde(default = "default_noise")]
    pub noise_percent: u32,
}

fn default_start() -> NaiveDate {
    NaiveDate::from_ymd_opt(2021, 9, 1).expect("valid date")
}
fn default_prosumer_fraction() -> Fraction {
    Fraction::new(1, 2)
}
fn default_peak() -> u64 {
    4000
}
fn default_base() -> u64 {
    900
}
fn default_noise() -> u32 {
    25
}

impl SyntheticConfig {
    pub fn new(peer_count: u32, months: u32, seed: u64) -> Self {
        Self {
            peer_count,
            months,
            seed: Some(seed),
            start: default_start(),
            prosumer_fraction: default_prosumer_fraction(),
            peak_production_wh: default_peak(),
            base_consumption_wh: default_base(),
            noise_percent: default_noise(),
        }
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidSynthetic(m.to_string()));
        if self.peer_count < 2 {
            return bad("peer_count must be at least 2");
        }
        if self.months < 1 {
            return bad("months must be at least 1");
        }
        if self.prosumer_fraction.numer() > self.prosumer_fraction.denom() {
            return bad("prosumer_fraction must be within [0, 1]");
        }
        if self.noise_percent > 100 {
            return bad("noise_percent must be at most 100");
        }
        Ok(())
    }
}

// Tenths of peak, hour 0..23.
const SOLAR_PROFILE: [u64; 24] = [0, 0, 0, 0, 0, 1, 2, 4, 6, 8, 9, 10, 10, 9, 8, 6, 4, 2, 1, 0, 0, 0, 0, 0];
// Tenths of base load, hour 0..23.
const LOAD_PROFILE: [u64; 24] = [6, 5, 5, 5, 5, 6, 8, 11, 10, 8, 7, 7, 7, 7, 7, 8, 10, 13, 15, 15, 13, 11, 9, 7];
// Percent of June irradiance, January..December.
const SEASON: [u64; 12] = [15, 30, 55, 80, 100, 110, 105, 90, 65, 40, 20, 10];

/// Generates a reproducible community. Integer arithmetic only, so the output
/// does not depend on the platform's floating point library.
pub fn generate_synthetic(config: &SyntheticConfig, default_seed: u64) -> Result<ReadingSeries, IngestError> {
    use chrono::Datelike;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.unwrap_or(default_seed));

    let start = config.start.and_hms_opt(0, 0, 0).expect("midnight");
    let end = config
        .start
        .checked_add_months(Months::new(config.months))
        .ok_or_else(|| IngestError::InvalidSynthetic("date range overflows".into()))?
        .and_hms_opt(0, 0, 0)
        .expect("midnight");
    let hours = (end - start).num_hours() as usize;
    let timestamps: Vec<NaiveDateTime> = (0..hours).map(|h| start + Duration::hours(h as i64)).collect();

    let n = config.peer_count as usize;
    let frac = config.prosumer_fraction;
    let prosumers = div_round_half_up(n as u128 * frac.numer() as u128, frac.denom() as u128) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut is_prosumer = vec![false; n];
    for &i in order.iter().take(prosumers) {
        is_prosumer[i] = true;
    }
    let capacity: Vec<u64> = (0..n).map(|_| rng.gen_range(60..=140)).collect();
    let appetite: Vec<u64> = (0..n).map(|_| rng.gen_range(60..=140)).collect();
    let days = hours.div_ceil(24);
    let cloud: Vec<u64> = (0..days).map(|_| rng.gen_range(20..=100)).collect();

    let noise = config.noise_percent as u64;
    let jitter = |rng: &mut ChaCha8Rng| -> u64 { 100 - noise + rng.gen_range(0..=2 * noise) };

    let mut readings = vec![Vec::with_capacity(hours); n];
    for (h, ts) in timestamps.iter().enumerate() {
        let hour = ts.hour() as usize;
        let season = SEASON[ts.month0() as usize];
        let sky = cloud[h / 24];
        for p in 0..n {
            let production = if is_prosumer[p] {
                let base = config.peak_production_wh * SOLAR_PROFILE[hour] * season * capacity[p] * sky;
                base * jitter(&mut rng) / (10 * 100 * 100 * 100 * 100)
            } else {
                0
            };
            let consumption =
                config.base_consumption_wh * LOAD_PROFILE[hour] * appetite[p] * jitter(&mut rng) / (10 * 100 * 100);
            readings[p].push(Reading {
                production: EnergyQuantity(production),
                consumption: EnergyQuantity(consumption),
            });
        }
    }
    let peers = (0..n as u32).map(PeerId).collect();
    Ok(ReadingSeries::from_dense(timestamps, peers, readings))
}

/// Grid retail price per hour.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UtilityPrices {
    Constant(UnitPrice),
    Series(Vec<UnitPrice>),
}

impl UtilityPrices {
    pub fn at(&self, step: usize) -> UnitPrice {
        match self {
            UtilityPrices::Constant(p) => *p,
            UtilityPrices::Series(v) => v[step],
        }
    }

    pub fn min(&self) -> Option<UnitPrice> {
        match self {
            UtilityPrices::Constant(p) => Some(*p),
            UtilityPrices::Series(v) => v.iter().min().copied(),
        }
    }

    /// Reads `timestamp,price_cents_per_kwh` rows and aligns them with `timestamps`.
    pub fn parse_series<R: Read>(source: R, timestamps: &[NaiveDateTime]) -> Result<Self, IngestError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
        let headers = rdr.headers()?.clone();
        let c_ts = column(&headers, "timestamp")?;
        let c_price = column(&headers, "price_cents_per_kwh")?;
        let mut by_time = BTreeMap::new();
        let mut record = csv::StringRecord::new();
        loop {
            if !rdr.read_record(&mut record)? {
                break;
            }
            let line = record.position().map_or(0, |p| p.line());
            let malformed = |message: String| IngestError::Malformed { line, message };
            let raw_ts = record.get(c_ts).unwrap_or("");
            let ts = parse_timestamp(raw_ts).ok_or_else(|| malformed(format!("bad timestamp `{raw_ts}`")))?;
            let raw_price = record.get(c_price).unwrap_or("");
            let price = raw_price
                .parse::<u64>()
                .map_err(|_| malformed(format!("bad price `{raw_price}`")))?;
            by_time.insert(ts, UnitPrice(price));
        }
        timestamps
            .iter()
            .map(|ts| {
                by_time
                    .get(ts)
                    .copied()
                    .ok_or_else(|| IngestError::PriceGap(ts.format(TIMESTAMP_FORMAT).to_string()))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(UtilityPrices::Series)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MonthCredits {
    pub month: MonthKey,
    pub first_step: usize,
    pub credits: BTreeMap<PeerId, MoneyAmount>,
}

impl MonthCredits {
    pub fn community_total(&self) -> MoneyAmount {
        self.credits.values().sum()
    }
}

/// Monthly balance credit per peer: a fraction of what the peer's hourly
/// need would cost at the utility price over that month.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BalanceSchedule {
    pub percentage: Fraction,
    pub months: Vec<MonthCredits>,
}

impl BalanceSchedule {
    pub fn credit_at(&self, step: usize) -> Option<&MonthCredits> {
        self.months.iter().find(|m| m.first_step == step)
    }
}

pub fn build_balance_schedule(readings: &ReadingSeries, prices: &UtilityPrices, percentage: Fraction) -> BalanceSchedule {
    let starts = readings.month_starts();
    let mut months = Vec::with_capacity(starts.len());
    for (m, &(month, first)) in starts.iter().enumerate() {
        let end = starts.get(m + 1).map(|s| s.1).unwrap_or(readings.len());
        let mut credits = BTreeMap::new();
        for (p, peer) in readings.peers().iter().enumerate() {
            // Wh * ct/kWh = milli-cents
            let grid_bill: u128 = (first..end)
                .map(|t| {
                    let r = readings.reading(p, t);
                    let need = r.consumption.0.saturating_sub(r.production.0) as u128;
                    need * prices.at(t).0 as u128
                })
                .sum();
            let credit = div_round_half_up(
                grid_bill * percentage.numer() as u128,
                1000 * percentage.denom() as u128,
            );
            credits.insert(*peer, MoneyAmount(credit as u64));
        }
        months.push(MonthCredits {
            month,
            first_step: first,
            credits,
        });
    }
    BalanceSchedule { percentage, months }
}

/// A constant external deposit landing at the first hour of every month.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DonationSchedule {
    pub monthly_deposit: MoneyAmount,
    pub month_starts: Vec<usize>,
}

impl DonationSchedule {
    pub fn deposit_at(&self, step: usize) -> Option<MoneyAmount> {
        self.month_starts.contains(&step).then_some(self.monthly_deposit)
    }

    pub fn total(&self) -> MoneyAmount {
        MoneyAmount(self.monthly_deposit.0 * self.month_starts.len() as u64)
    }
}

/// The deposit is the mean monthly community-wide credit, rounded half-up.
/// Returns `None` when the schedule covers no months.
pub fn build_donation_schedule(balances: &BalanceSchedule) -> Option<DonationSchedule> {
    if balances.months.is_empty() {
        return None;
    }
    let total: u128 = balances.months.iter().map(|m| m.community_total().0 as u128).sum();
    let mean = div_round_half_up(total, balances.months.len() as u128);
    Some(DonationSchedule {
        monthly_deposit: MoneyAmount(mean as u64),
        month_starts: balances.months.iter().map(|m| m.first_step).collect(),
    })
}
