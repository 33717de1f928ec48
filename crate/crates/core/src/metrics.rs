//! Run-level aggregates: donated energy by source, expenses, unit cost,
//! participation rates, and the cross-algorithm comparison matrix.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::donation::{DonationAlgorithm, DonationEvent, DonationSource, FundEntry, FundEntryKind, Payee};
use crate::model::PeerId;
use crate::quantity::{EnergyQuantity, Fraction, MoneyAmount, UnitPrice};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no reports to compare")]
    Empty,
    #[error("{algorithm} was run at {count} balance percentages, expected {expected}")]
    MismatchedScenarios {
        algorithm: DonationAlgorithm,
        count: usize,
        expected: usize,
    },
    #[error("duplicate report for {algorithm} at balance percentage {percentage}")]
    Duplicate {
        algorithm: DonationAlgorithm,
        percentage: Fraction,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SourceShares {
    pub grid_funded: Fraction,
    pub peer_funded: Fraction,
    pub peer_direct: Fraction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DonationReport {
    pub grid_funded_wh: EnergyQuantity,
    pub peer_funded_wh: EnergyQuantity,
    pub peer_direct_wh: EnergyQuantity,
    pub external_donated_wh: EnergyQuantity,
    pub internal_donated_wh: EnergyQuantity,
    pub total_donated_wh: EnergyQuantity,
    pub funded_payments_cents: MoneyAmount,
    /// Peer-direct energy valued at the clearing price of its hour.
    pub peer_direct_value_cents: MoneyAmount,
    pub expenses_cents: MoneyAmount,
    /// `None` when nothing was bought with fund money.
    pub external_cost_cents_per_mwh: Option<Fraction>,
    pub shares: SourceShares,
    pub fund_deposits_cents: MoneyAmount,
    pub fund_spent_cents: MoneyAmount,
    pub donation_events: usize,
}

/// Sums a run's donation log by source.
///
/// `clearing[t]` is the clearing price of timestep `t`.
pub fn aggregate(events: &[DonationEvent], fund: &[FundEntry], clearing: &[UnitPrice]) -> DonationReport {
    let mut by_source: BTreeMap<DonationSource, EnergyQuantity> = BTreeMap::new();
    let mut funded_payments = MoneyAmount::ZERO;
    let mut direct_value = MoneyAmount::ZERO;
    for e in events {
        *by_source.entry(e.source).or_default() += e.quantity_wh;
        if e.source.is_funded() {
            funded_payments += e.payment_cents;
        } else {
            direct_value += clearing[e.timestep as usize].cost(e.quantity_wh);
        }
    }
    let get = |s| by_source.get(&s).copied().unwrap_or_default();
    let grid = get(DonationSource::GridFunded);
    let peer = get(DonationSource::PeerFunded);
    let direct = get(DonationSource::PeerDirect);
    let external = grid + peer;
    let total = external + direct;

    let share = |q: EnergyQuantity| {
        if total.is_zero() {
            Fraction::new(0, 1)
        } else {
            Fraction::new(q.0, total.0)
        }
    };
    let cost = (!external.is_zero()).then(|| Fraction::new(funded_payments.0 * 1_000_000, external.0));

    let mut deposits = MoneyAmount::ZERO;
    let mut spent = MoneyAmount::ZERO;
    for f in fund {
        match f.kind {
            FundEntryKind::Deposit => deposits += f.amount_cents,
            FundEntryKind::GridPayment | FundEntryKind::ProsumerPayment => spent += f.amount_cents,
        }
    }

    DonationReport {
        grid_funded_wh: grid,
        peer_funded_wh: peer,
        peer_direct_wh: direct,
        external_donated_wh: external,
        internal_donated_wh: direct,
        total_donated_wh: total,
        funded_payments_cents: funded_payments,
        peer_direct_value_cents: direct_value,
        expenses_cents: funded_payments + direct_value,
        external_cost_cents_per_mwh: cost,
        shares: SourceShares {
            grid_funded: share(grid),
            peer_funded: share(peer),
            peer_direct: share(direct),
        },
        fund_deposits_cents: deposits,
        fund_spent_cents: spent,
        donation_events: events.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParticipationStats {
    pub peers: usize,
    pub sellers_for_donation: usize,
    pub direct_donors: usize,
    pub donation_receivers: usize,
    pub donors_turned_donees: usize,
    pub pct_sellers_for_donation: Fraction,
    pub pct_direct_donors: Fraction,
    pub pct_donation_receivers: Fraction,
    pub pct_donors_turned_donees: Fraction,
}

/// Counts over distinct peers. All rates use the whole roster as the
/// denominator except donors-turned-donees, which is relative to the donors.
pub fn participation(events: &[DonationEvent], roster: &[PeerId]) -> ParticipationStats {
    let mut sellers = BTreeSet::new();
    let mut donors = BTreeSet::new();
    let mut donees = BTreeSet::new();
    for e in events {
        donees.insert(e.donee);
        match (e.source, e.payee, e.supplier) {
            (DonationSource::PeerFunded, Payee::Peer(p), _) => {
                sellers.insert(p);
            }
            (DonationSource::PeerDirect, _, Some(p)) => {
                donors.insert(p);
            }
            _ => {}
        }
    }
    let turned = donors.intersection(&donees).count();
    let ratio = |n: usize, d: usize| {
        if d == 0 {
            Fraction::new(0, 1)
        } else {
            Fraction::new(n as u64, d as u64)
        }
    };
    let n = roster.len();
    ParticipationStats {
        peers: n,
        sellers_for_donation: sellers.len(),
        direct_donors: donors.len(),
        donation_receivers: donees.len(),
        donors_turned_donees: turned,
        pct_sellers_for_donation: ratio(sellers.len(), n),
        pct_direct_donors: ratio(donors.len(), n),
        pct_donation_receivers: ratio(donees.len(), n),
        pct_donors_turned_donees: ratio(turned, donors.len()),
    }
}

/// Relative change of `subject` over `baseline`, `(a - b) / b`.
pub fn percent_change(subject: u64, baseline: u64) -> Option<f64> {
    (baseline != 0).then(|| (subject as f64 - baseline as f64) / baseline as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlgorithmAverage {
    pub algorithm: DonationAlgorithm,
    pub scenarios: usize,
    pub external_donated_wh: u64,
    pub internal_donated_wh: u64,
    pub total_donated_wh: u64,
    pub expenses_cents: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseChange {
    pub subject: DonationAlgorithm,
    pub baseline: DonationAlgorithm,
    /// `None` when the baseline donated nothing.
    pub total_donated_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub percentages: Vec<Fraction>,
    pub averages: Vec<AlgorithmAverage>,
    pub changes: Vec<PairwiseChange>,
}

/// Per-algorithm averages across balance percentages and pairwise changes
/// of the total donated energy. Every algorithm must cover the same set of
/// percentages.
pub fn compare(reports: &[(DonationAlgorithm, Fraction, &DonationReport)]) -> Result<Comparison, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut grid: BTreeMap<DonationAlgorithm, BTreeMap<(u64, u64), &DonationReport>> = BTreeMap::new();
    let mut percentages: Vec<Fraction> = Vec::new();
    for &(algorithm, pct, report) in reports {
        let key = (pct.numer(), pct.denom());
        if grid.entry(algorithm).or_default().insert(key, report).is_some() {
            return Err(MetricsError::Duplicate {
                algorithm,
                percentage: pct,
            });
        }
        if !percentages.contains(&pct) {
            percentages.push(pct);
        }
    }
    let keys: BTreeSet<(u64, u64)> = percentages.iter().map(|p| (p.numer(), p.denom())).collect();
    for (&algorithm, cells) in &grid {
        if cells.keys().copied().collect::<BTreeSet<_>>() != keys {
            return Err(MetricsError::MismatchedScenarios {
                algorithm,
                count: cells.len(),
                expected: keys.len(),
            });
        }
    }
    percentages.sort_by(|a, b| (a.numer() as u128 * b.denom() as u128).cmp(&(b.numer() as u128 * a.denom() as u128)));

    let n = keys.len() as u64;
    let mean = |total: u64| (2 * total + n) / (2 * n);
    let mut totals = BTreeMap::new();
    let averages: Vec<AlgorithmAverage> = grid
        .iter()
        .map(|(&algorithm, cells)| {
            let sum = |f: fn(&DonationReport) -> u64| cells.values().map(|r| f(r)).sum::<u64>();
            let total = sum(|r| r.total_donated_wh.0);
            totals.insert(algorithm, total);
            AlgorithmAverage {
                algorithm,
                scenarios: cells.len(),
                external_donated_wh: mean(sum(|r| r.external_donated_wh.0)),
                internal_donated_wh: mean(sum(|r| r.internal_donated_wh.0)),
                total_donated_wh: mean(total),
                expenses_cents: mean(sum(|r| r.expenses_cents.0)),
            }
        })
        .collect();

    let mut changes = Vec::new();
    for (&subject, &a) in &totals {
        for (&baseline, &b) in &totals {
            if subject != baseline {
                changes.push(PairwiseChange {
                    subject,
                    baseline,
                    total_donated_change: percent_change(a, b),
                });
            }
        }
    }
    Ok(Comparison {
        percentages,
        averages,
        changes,
    })
}

pub const ROW_EXTERNAL: &str = "External Donations (MW)";
pub const ROW_INTERNAL: &str = "Internal Donations (GW)";
pub const ROW_TOTAL: &str = "Total Donated (MW)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum Cell {
    Value(String),
    NotApplicable,
    Failed,
}

impl Cell {
    pub fn text(&self) -> &str {
        match self {
            Cell::Value(v) => v,
            Cell::NotApplicable => "N.A.",
            Cell::Failed => "failed",
        }
    }
}

/// One cell of a scenario matrix; `None` marks a run that failed.
pub struct MatrixEntry<'a> {
    pub algorithm: DonationAlgorithm,
    pub percentage: Fraction,
    pub report: Option<&'a DonationReport>,
}

/// Donated energy laid out by balance percentage and algorithm. Energy rows
/// are megawatt-hours (gigawatt-hours for internal donations), printed with
/// enough decimals to be exact in Wh.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatrixTable {
    pub percentages: Vec<String>,
    pub algorithms: Vec<String>,
    pub rows: Vec<(String, Vec<Cell>)>,
}

fn mwh(e: EnergyQuantity) -> String {
    format!("{}.{:06}", e.0 / 1_000_000, e.0 % 1_000_000)
}

fn gwh(e: EnergyQuantity) -> String {
    format!("{}.{:09}", e.0 / 1_000_000_000, e.0 % 1_000_000_000)
}

pub fn matrix_table(entries: &[MatrixEntry<'_>]) -> MatrixTable {
    let mut percentages: Vec<Fraction> = Vec::new();
    for e in entries {
        if !percentages.contains(&e.percentage) {
            percentages.push(e.percentage);
        }
    }
    percentages.sort_by(|a, b| (a.numer() as u128 * b.denom() as u128).cmp(&(b.numer() as u128 * a.denom() as u128)));
    let algorithms: Vec<DonationAlgorithm> = DonationAlgorithm::ALL
        .into_iter()
        .filter(|a| entries.iter().any(|e| e.algorithm == *a))
        .collect();

    let cell = |pct: Fraction, alg: DonationAlgorithm, row: &str| -> Cell {
        let Some(entry) = entries.iter().find(|e| e.percentage == pct && e.algorithm == alg) else {
            return Cell::Failed;
        };
        let applicable = match row {
            ROW_EXTERNAL => alg.uses_funds(),
            ROW_INTERNAL => alg.uses_direct_donations(),
            _ => true,
        };
        if !applicable {
            return Cell::NotApplicable;
        }
        match entry.report {
            None => Cell::Failed,
            Some(r) => Cell::Value(match row {
                ROW_EXTERNAL => mwh(r.external_donated_wh),
                ROW_INTERNAL => gwh(r.internal_donated_wh),
                _ => mwh(r.total_donated_wh),
            }),
        }
    };

    let rows = [ROW_EXTERNAL, ROW_INTERNAL, ROW_TOTAL]
        .into_iter()
        .map(|row| {
            let cells = percentages
                .iter()
                .flat_map(|&p| algorithms.iter().map(move |&a| (p, a)))
                .map(|(p, a)| cell(p, a, row))
                .collect();
            (row.to_string(), cells)
        })
        .collect();

    MatrixTable {
        percentages: percentages.iter().map(|p| format!("Balance Percentage: {}", p.percent_label())).collect(),
        algorithms: algorithms.iter().map(|a| a.label().to_string()).collect(),
        rows,
    }
}

impl MatrixTable {
    pub fn has_failures(&self) -> bool {
        self.rows.iter().any(|(_, cells)| cells.contains(&Cell::Failed))
    }

    /// Two header lines: the balance percentage groups, then the algorithms.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let width = self.algorithms.len();
        let mut top = vec![String::new()];
        for p in &self.percentages {
            top.push(p.clone());
            top.extend(std::iter::repeat_n(String::new(), width.saturating_sub(1)));
        }
        w.write_record(&top).expect("in-memory write");
        let mut second = vec!["Metric".to_string()];
        for _ in &self.percentages {
            second.extend(self.algorithms.iter().cloned());
        }
        w.write_record(&second).expect("in-memory write");
        for (label, cells) in &self.rows {
            let mut rec = vec![label.clone()];
            rec.extend(cells.iter().map(|c| c.text().to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn to_text(&self) -> String {
        let width = self.algorithms.len();
        let mut header_cells = Vec::new();
        for _ in &self.percentages {
            header_cells.extend(self.algorithms.iter().cloned());
        }
        let label_w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("Metric".len());
        let mut col_w: Vec<usize> = header_cells.iter().map(String::len).collect();
        for (_, cells) in &self.rows {
            for (i, c) in cells.iter().enumerate() {
                col_w[i] = col_w[i].max(c.text().len());
            }
        }
        // widen the last column of a group if the group title does not fit
        for (g, title) in self.percentages.iter().enumerate() {
            let span = &mut col_w[g * width..(g + 1) * width];
            let have: usize = span.iter().sum::<usize>() + 2 * (width - 1);
            if title.len() > have {
                span[width - 1] += title.len() - have;
            }
        }

        let mut out = String::new();
        let _ = write!(out, "{:label_w$}", "");
        for (g, title) in self.percentages.iter().enumerate() {
            let span: usize = col_w[g * width..(g + 1) * width].iter().sum::<usize>() + 2 * (width - 1);
            let _ = write!(out, " | {title:<span$}");
        }
        out.push('\n');
        let _ = write!(out, "{:label_w$}", "Metric");
        for g in 0..self.percentages.len() {
            out.push_str(" |");
            for i in g * width..(g + 1) * width {
                let sep = if i == g * width { " " } else { "  " };
                let _ = write!(out, "{sep}{:>w$}", header_cells[i], w = col_w[i]);
            }
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            let _ = write!(out, "{label:label_w$}");
            for g in 0..self.percentages.len() {
                out.push_str(" |");
                for i in g * width..(g + 1) * width {
                    let sep = if i == g * width { " " } else { "  " };
                    let _ = write!(out, "{sep}{:>w$}", cells[i].text(), w = col_w[i]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Aligned two-column rendering of one run's report.
pub fn report_text(report: &DonationReport, stats: &ParticipationStats) -> String {
    let cost = report
        .external_cost_cents_per_mwh
        .map(|c| format!("{:.3}", c.to_f64()))
        .unwrap_or_else(|| "undefined".into());
    let pct = |f: Fraction| format!("{:.2}", f.to_f64() * 100.0);
    let rows: Vec<(&str, String)> = vec![
        ("grid-funded donated (Wh)", report.grid_funded_wh.0.to_string()),
        ("peer-funded donated (Wh)", report.peer_funded_wh.0.to_string()),
        ("peer-direct donated (Wh)", report.peer_direct_wh.0.to_string()),
        ("external donated (Wh)", report.external_donated_wh.0.to_string()),
        ("internal donated (Wh)", report.internal_donated_wh.0.to_string()),
        ("total donated (Wh)", report.total_donated_wh.0.to_string()),
        ("fund payments (cents)", report.funded_payments_cents.0.to_string()),
        ("peer-direct value (cents)", report.peer_direct_value_cents.0.to_string()),
        ("expenses (cents)", report.expenses_cents.0.to_string()),
        ("external cost (cents/MWh)", cost),
        ("fund deposits (cents)", report.fund_deposits_cents.0.to_string()),
        ("grid-funded share (%)", pct(report.shares.grid_funded)),
        ("peer-funded share (%)", pct(report.shares.peer_funded)),
        ("peer-direct share (%)", pct(report.shares.peer_direct)),
        ("sellers for donation (%)", pct(stats.pct_sellers_for_donation)),
        ("direct donors (%)", pct(stats.pct_direct_donors)),
        ("donation receivers (%)", pct(stats.pct_donation_receivers)),
        ("donors turned donees (%)", pct(stats.pct_donors_turned_donees)),
    ];
    let lw = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let vw = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (l, v) in rows {
        let _ = writeln!(out, "{l:<lw$}  {v:>vw$}");
    }
    out
}
